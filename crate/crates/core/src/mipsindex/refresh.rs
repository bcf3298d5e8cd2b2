//! Snapshot → rebuild → swap protocol between the trainer and an index builder.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::snapshot::{build_index, IndexSnapshot, IndexStructure};
use crate::retriever::{ParamVersion, RetrieverParams};
use crate::textcorpus::KnowledgeCorpus;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshMode {
    Simulated,
    Threaded,
}

impl std::str::FromStr for RefreshMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" => Ok(RefreshMode::Simulated),
            "threaded" => Ok(RefreshMode::Threaded),
            other => Err(Error::Config(format!("unknown refresh mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshSchedule {
    /// Steps between snapshot requests; `None` never refreshes.
    pub interval: Option<u64>,
    pub mode: RefreshMode,
    /// Multiplies `interval`; used by staleness ablations.
    pub staleness_multiplier: u64,
    /// Simulated builder latency, in trainer steps.
    pub build_latency: u64,
}

impl RefreshSchedule {
    pub fn simulated(interval: Option<u64>, build_latency: u64) -> Self {
        RefreshSchedule {
            interval,
            mode: RefreshMode::Simulated,
            staleness_multiplier: 1,
            build_latency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == Some(0) {
            return Err(Error::Config("refresh interval must be >= 1".into()));
        }
        if self.staleness_multiplier == 0 {
            return Err(Error::Config("staleness multiplier must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_interval(&self) -> Option<u64> {
        self.interval.map(|r| r * self.staleness_multiplier)
    }

    pub fn is_due(&self, version: ParamVersion) -> bool {
        match self.effective_interval() {
            Some(r) => version.0 > 0 && version.0.is_multiple_of(r),
            None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildJob<P> {
    pub version: ParamVersion,
    pub started_at: ParamVersion,
    pub snapshot: P,
}

/// Version bookkeeping of the protocol, generic over the parameter payload
/// carried with each request. An active index always exists.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolState<P> {
    pub active_version: ParamVersion,
    pub building: Option<BuildJob<P>>,
    pub pending: Option<(ParamVersion, P)>,
    pub coalesced_requests: u64,
    pub completed_builds: u64,
}

impl<P> ProtocolState<P> {
    pub fn new(active_version: ParamVersion) -> Self {
        ProtocolState {
            active_version,
            building: None,
            pending: None,
            coalesced_requests: 0,
            completed_builds: 0,
        }
    }

    pub fn is_building(&self) -> bool {
        self.building.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolEvent<P> {
    /// The trainer finished the update that produced `version`.
    TrainerStep {
        version: ParamVersion,
        snapshot: P,
    },
    SnapshotRequest {
        version: ParamVersion,
        snapshot: P,
    },
    /// The running build finished at trainer version `at`.
    BuildComplete {
        at: ParamVersion,
    },
}

/// Advance the protocol by one event.
///
/// A request while a build runs replaces any older pending request; the
/// builder takes the latest one when the current build completes.
pub fn refresh_protocol_step<P>(
    mut state: ProtocolState<P>,
    event: ProtocolEvent<P>,
    schedule: &RefreshSchedule,
) -> ProtocolState<P> {
    match event {
        ProtocolEvent::TrainerStep { version, snapshot } => {
            if schedule.is_due(version) {
                state = refresh_protocol_step(
                    state,
                    ProtocolEvent::SnapshotRequest { version, snapshot },
                    schedule,
                );
            }
        }
        ProtocolEvent::SnapshotRequest { version, snapshot } => {
            if state.building.is_some() {
                if state.pending.is_some() {
                    state.coalesced_requests += 1;
                }
                log::debug!("snapshot request {version} queued behind running build");
                state.pending = Some((version, snapshot));
            } else {
                state.building = Some(BuildJob {
                    version,
                    started_at: version,
                    snapshot,
                });
            }
        }
        ProtocolEvent::BuildComplete { at } => {
            if let Some(job) = state.building.take() {
                state.active_version = job.version;
                state.completed_builds += 1;
                if let Some((version, snapshot)) = state.pending.take() {
                    state.building = Some(BuildJob {
                        version,
                        started_at: at,
                        snapshot,
                    });
                }
            }
        }
    }
    state
}

/// Steps between the snapshot's version and `current`, both looked up in `log`.
pub fn staleness(
    index_version: ParamVersion,
    current: ParamVersion,
    log: &[ParamVersion],
) -> Result<u64> {
    let pos = |v: ParamVersion| {
        log.iter()
            .position(|&x| x == v)
            .ok_or_else(|| Error::contract(format!("version {v} not in version log")))
    };
    let (a, b) = (pos(index_version)?, pos(current)?);
    if a > b {
        return Err(Error::contract(format!(
            "index version {index_version} is newer than current {current}"
        )));
    }
    Ok((b - a) as u64)
}

/// Atomically swappable reference to the active snapshot.
#[derive(Debug)]
pub struct SnapshotSlot<T> {
    inner: RwLock<Arc<IndexSnapshot<T>>>,
}

impl<T: Scalar> SnapshotSlot<T> {
    pub fn new(snapshot: Arc<IndexSnapshot<T>>) -> Self {
        SnapshotSlot {
            inner: RwLock::new(snapshot),
        }
    }

    pub fn load(&self) -> Arc<IndexSnapshot<T>> {
        Arc::clone(&self.inner.read().expect("slot lock"))
    }

    pub fn store(&self, snapshot: Arc<IndexSnapshot<T>>) {
        *self.inner.write().expect("slot lock") = snapshot;
    }
}

/// Everything the builder needs besides θ.
#[derive(Clone, Debug)]
pub struct BuildSpec {
    pub corpus: Arc<KnowledgeCorpus>,
    pub structure: IndexStructure,
    pub seed: u64,
}

impl BuildSpec {
    pub fn build<T: Scalar>(
        &self,
        theta: &RetrieverParams<T>,
        version: ParamVersion,
    ) -> Result<IndexSnapshot<T>> {
        build_index(&self.corpus, theta, version, self.structure, self.seed)
    }
}

/// Single-threaded refresher whose builder latency is counted in trainer steps.
#[derive(Debug)]
pub struct SimulatedRefresher<T> {
    spec: BuildSpec,
    schedule: RefreshSchedule,
    state: ProtocolState<RetrieverParams<T>>,
    active: Arc<IndexSnapshot<T>>,
    active_theta: RetrieverParams<T>,
}

impl<T: Scalar> SimulatedRefresher<T> {
    pub fn new(
        spec: BuildSpec,
        schedule: RefreshSchedule,
        theta: &RetrieverParams<T>,
        version: ParamVersion,
    ) -> Result<Self> {
        schedule.validate()?;
        let active = Arc::new(spec.build(theta, version)?);
        Ok(SimulatedRefresher {
            spec,
            schedule,
            state: ProtocolState::new(version),
            active,
            active_theta: theta.clone(),
        })
    }

    /// Rebuild a refresher from saved protocol state (checkpoint resume).
    pub fn restore(
        spec: BuildSpec,
        schedule: RefreshSchedule,
        active_theta: RetrieverParams<T>,
        state: ProtocolState<RetrieverParams<T>>,
    ) -> Result<Self> {
        schedule.validate()?;
        let active = Arc::new(spec.build(&active_theta, state.active_version)?);
        Ok(SimulatedRefresher {
            spec,
            schedule,
            state,
            active,
            active_theta,
        })
    }

    pub fn on_trainer_step(
        &mut self,
        version: ParamVersion,
        theta: &RetrieverParams<T>,
    ) -> Result<()> {
        let state = std::mem::replace(&mut self.state, ProtocolState::new(ParamVersion(0)));
        self.state = refresh_protocol_step(
            state,
            ProtocolEvent::TrainerStep {
                version,
                snapshot: theta.clone(),
            },
            &self.schedule,
        );
        // A zero-latency build can chain into the pending request immediately.
        while let Some(job) = &self.state.building {
            if version.0 < job.started_at.0 + self.schedule.build_latency {
                break;
            }
            let built = Arc::new(self.spec.build(&job.snapshot, job.version)?);
            let finished_theta = job.snapshot.clone();
            let state = std::mem::replace(&mut self.state, ProtocolState::new(ParamVersion(0)));
            self.state = refresh_protocol_step(
                state,
                ProtocolEvent::BuildComplete { at: version },
                &self.schedule,
            );
            self.active = built;
            self.active_theta = finished_theta;
        }
        Ok(())
    }

    pub fn active(&self) -> Arc<IndexSnapshot<T>> {
        Arc::clone(&self.active)
    }

    pub fn active_theta(&self) -> &RetrieverParams<T> {
        &self.active_theta
    }

    pub fn state(&self) -> &ProtocolState<RetrieverParams<T>> {
        &self.state
    }

    pub fn schedule(&self) -> &RefreshSchedule {
        &self.schedule
    }
}

/// Refresher with a real background builder thread. The trainer only sends
/// requests and reads the slot, so it never waits on a build.
#[derive(Debug)]
pub struct ThreadedRefresher<T: Scalar> {
    schedule: RefreshSchedule,
    slot: Arc<SnapshotSlot<T>>,
    requests: Option<Sender<(ParamVersion, RetrieverParams<T>)>>,
    errors: Receiver<String>,
    worker: Option<JoinHandle<u64>>,
}

impl<T: Scalar> ThreadedRefresher<T> {
    pub fn new(
        spec: BuildSpec,
        schedule: RefreshSchedule,
        theta: &RetrieverParams<T>,
        version: ParamVersion,
    ) -> Result<Self> {
        schedule.validate()?;
        let slot = Arc::new(SnapshotSlot::new(Arc::new(spec.build(theta, version)?)));
        let (tx, rx) = mpsc::channel::<(ParamVersion, RetrieverParams<T>)>();
        let (err_tx, err_rx) = mpsc::channel();
        let worker_slot = Arc::clone(&slot);
        let worker = std::thread::spawn(move || {
            let mut builds = 0u64;
            while let Ok(mut job) = rx.recv() {
                // Coalesce: only the newest queued snapshot is worth building.
                while let Ok(newer) = rx.try_recv() {
                    job = newer;
                }
                match spec.build(&job.1, job.0) {
                    Ok(snapshot) => {
                        worker_slot.store(Arc::new(snapshot));
                        builds += 1;
                    }
                    Err(e) => {
                        let _ = err_tx.send(e.to_string());
                    }
                }
            }
            builds
        });
        Ok(ThreadedRefresher {
            schedule,
            slot,
            requests: Some(tx),
            errors: err_rx,
            worker: Some(worker),
        })
    }

    pub fn on_trainer_step(
        &mut self,
        version: ParamVersion,
        theta: &RetrieverParams<T>,
    ) -> Result<()> {
        if let Ok(msg) = self.errors.try_recv() {
            return Err(Error::Validation(format!("index build failed: {msg}")));
        }
        if self.schedule.is_due(version) {
            if let Some(tx) = &self.requests {
                tx.send((version, theta.clone()))
                    .map_err(|_| Error::Validation("index builder thread exited".into()))?;
            }
        }
        Ok(())
    }

    pub fn active(&self) -> Arc<IndexSnapshot<T>> {
        self.slot.load()
    }

    pub fn slot(&self) -> Arc<SnapshotSlot<T>> {
        Arc::clone(&self.slot)
    }

    /// Stop the builder after its queue drains; returns the number of builds.
    pub fn shutdown(mut self) -> u64 {
        self.stop()
    }

    fn stop(&mut self) -> u64 {
        self.requests.take();
        self.worker
            .take()
            .map(|w| w.join().unwrap_or(0))
            .unwrap_or(0)
    }
}

impl<T: Scalar> Drop for ThreadedRefresher<T> {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Either refresher behind one interface.
#[derive(Debug)]
#[allow(clippy::large_enum_variant)]
pub enum IndexRefresher<T: Scalar> {
    Simulated(SimulatedRefresher<T>),
    Threaded(ThreadedRefresher<T>),
}

impl<T: Scalar> IndexRefresher<T> {
    pub fn new(
        spec: BuildSpec,
        schedule: RefreshSchedule,
        theta: &RetrieverParams<T>,
        version: ParamVersion,
    ) -> Result<Self> {
        Ok(match schedule.mode {
            RefreshMode::Simulated => {
                IndexRefresher::Simulated(SimulatedRefresher::new(spec, schedule, theta, version)?)
            }
            RefreshMode::Threaded => {
                IndexRefresher::Threaded(ThreadedRefresher::new(spec, schedule, theta, version)?)
            }
        })
    }

    pub fn on_trainer_step(
        &mut self,
        version: ParamVersion,
        theta: &RetrieverParams<T>,
    ) -> Result<()> {
        match self {
            IndexRefresher::Simulated(r) => r.on_trainer_step(version, theta),
            IndexRefresher::Threaded(r) => r.on_trainer_step(version, theta),
        }
    }

    pub fn active(&self) -> Arc<IndexSnapshot<T>> {
        match self {
            IndexRefresher::Simulated(r) => r.active(),
            IndexRefresher::Threaded(r) => r.active(),
        }
    }
}
