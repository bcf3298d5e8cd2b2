//! Maximum-inner-product search over document embeddings, plus the
//! asynchronous refresh protocol that keeps snapshots close to the trainer.

mod kmeans;
mod persist;
mod refresh;
mod snapshot;

pub use kmeans::KMEANS_ITERS;
pub use persist::{
    load_snapshot, read_snapshot, save_snapshot, write_snapshot, SNAPSHOT_FORMAT, SNAPSHOT_MAGIC,
};
pub use refresh::{
    refresh_protocol_step, staleness, BuildJob, BuildSpec, IndexRefresher, ProtocolEvent,
    ProtocolState, RefreshMode, RefreshSchedule, SimulatedRefresher, SnapshotSlot,
    ThreadedRefresher,
};
pub use snapshot::{build_index, IndexSnapshot, IndexStructure, RetrievalResult, SearchStructure};
