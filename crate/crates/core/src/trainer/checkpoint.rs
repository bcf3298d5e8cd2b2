//! Checkpoint files: a JSON manifest followed by raw tensor data.
//!
//! ```text
//! magic          8 bytes "RALMCKPT"
//! manifest len   u64 little-endian
//! manifest       UTF-8 JSON (format, step, config digest, tensor table)
//! data           little-endian f64 values at the manifest offsets
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::mipsindex::{BuildJob, ProtocolState};
use crate::reader::{ReaderConfig, ReaderParams};
use crate::retriever::{ParamVersion, RetrieverConfig, RetrieverParams};
use crate::{Error, Result, Scalar};

use super::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RALMCKPT";
pub const CHECKPOINT_FORMAT: u32 = 1;

/// Refresh protocol state needed to continue a simulated run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RefreshState<T> {
    pub active_theta: RetrieverParams<T>,
    pub protocol: ProtocolState<RetrieverParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// Which phase wrote the file (`warmstart`, `pretrain`, `finetune`).
    pub phase: String,
    pub step: u64,
    pub config_digest: String,
    pub skipped: u64,
    pub store: ParamStore<T>,
    pub refresh: Option<RefreshState<T>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the data section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JobEntry {
    version: u64,
    started_at: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RefreshEntry {
    active_version: u64,
    building: Option<JobEntry>,
    pending: Option<u64>,
    coalesced_requests: u64,
    completed_builds: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    phase: String,
    step: u64,
    version: u64,
    config_digest: String,
    skipped: u64,
    retriever: RetrieverConfig,
    reader: ReaderConfig,
    refresh: Option<RefreshEntry>,
    tensors: Vec<TensorEntry>,
}

struct Writer<'a, T> {
    entries: Vec<TensorEntry>,
    tensors: Vec<&'a Tensor<T>>,
    offset: usize,
}

impl<'a, T: Scalar> Writer<'a, T> {
    fn push(&mut self, name: String, t: &'a Tensor<T>) {
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: self.offset,
        });
        self.offset += t.numel();
        self.tensors.push(t);
    }

    fn push_theta(&mut self, prefix: &str, theta: &'a RetrieverParams<T>) {
        for (n, t) in theta.tensors() {
            self.push(format!("{prefix}.{n}"), t);
        }
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer {
            entries: Vec::new(),
            tensors: Vec::new(),
            offset: 0,
        };
        let names = self.store.names();
        for (n, t) in names.iter().zip(self.store.flat()) {
            w.push(n.clone(), t);
        }
        let (m1, m2) = self.store.moments();
        for (n, t) in names.iter().zip(m1) {
            w.push(format!("opt.m1.{n}"), t);
        }
        for (n, t) in names.iter().zip(m2) {
            w.push(format!("opt.m2.{n}"), t);
        }
        let refresh = self.refresh.as_ref().map(|r| {
            w.push_theta("refresh.active", &r.active_theta);
            if let Some(job) = &r.protocol.building {
                w.push_theta("refresh.building", &job.snapshot);
            }
            if let Some((_, theta)) = &r.protocol.pending {
                w.push_theta("refresh.pending", theta);
            }
            RefreshEntry {
                active_version: r.protocol.active_version.0,
                building: r.protocol.building.as_ref().map(|j| JobEntry {
                    version: j.version.0,
                    started_at: j.started_at.0,
                }),
                pending: r.protocol.pending.as_ref().map(|(v, _)| v.0),
                coalesced_requests: r.protocol.coalesced_requests,
                completed_builds: r.protocol.completed_builds,
            }
        });
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT,
            phase: self.phase.clone(),
            step: self.step,
            version: self.store.version().0,
            config_digest: self.config_digest.clone(),
            skipped: self.skipped,
            retriever: self.store.theta.config(),
            reader: self.store.phi.config(),
            refresh,
            tensors: w.entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + w.offset * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in w.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Format("truncated checkpoint manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)
            .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {}",
                manifest.format
            )));
        }
        let data = &bytes[16 + len..];
        let mut table: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data.get(e.offset * 8..(e.offset + n) * 8).ok_or_else(|| {
                Error::Format(format!("tensor {} extends past end of file", e.name))
            })?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| T::c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            table.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals)?);
        }
        let mut take = |name: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = table
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };

        let theta0 = RetrieverParams::<T>::init(&manifest.retriever, 0)?;
        let phi0 = ReaderParams::<T>::init(&manifest.reader, 0)?;
        let mut store = ParamStore::new(theta0.clone(), phi0);
        let names = store.names();
        for (n, t) in names.iter().zip(store.flat_mut()) {
            *t = take(n, t)?;
        }
        let shapes: Vec<Tensor<T>> = store.flat().into_iter().cloned().collect();
        let m1 = names
            .iter()
            .zip(&shapes)
            .map(|(n, t)| take(&format!("opt.m1.{n}"), t))
            .collect::<Result<Vec<_>>>()?;
        let m2 = names
            .iter()
            .zip(&shapes)
            .map(|(n, t)| take(&format!("opt.m2.{n}"), t))
            .collect::<Result<Vec<_>>>()?;
        store.set_moments(m1, m2)?;
        store.set_version(ParamVersion(manifest.version));

        let mut take_theta = |prefix: &str| -> Result<RetrieverParams<T>> {
            let mut th = theta0.clone();
            for (n, t) in th.tensors_mut() {
                *t = take(&format!("{prefix}.{n}"), t)?;
            }
            Ok(th)
        };
        let refresh = match &manifest.refresh {
            None => None,
            Some(r) => {
                let active_theta = take_theta("refresh.active")?;
                let building = match &r.building {
                    None => None,
                    Some(j) => Some(BuildJob {
                        version: ParamVersion(j.version),
                        started_at: ParamVersion(j.started_at),
                        snapshot: take_theta("refresh.building")?,
                    }),
                };
                let pending = match r.pending {
                    None => None,
                    Some(v) => Some((ParamVersion(v), take_theta("refresh.pending")?)),
                };
                Some(RefreshState {
                    active_theta,
                    protocol: ProtocolState {
                        active_version: ParamVersion(r.active_version),
                        building,
                        pending,
                        coalesced_requests: r.coalesced_requests,
                        completed_builds: r.completed_builds,
                    },
                })
            }
        };
        Ok(Checkpoint {
            phase: manifest.phase,
            step: manifest.step,
            config_digest: manifest.config_digest,
            skipped: manifest.skipped,
            store,
            refresh,
        })
    }

    /// Write via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcorpus::NUM_RESERVED;

    fn store() -> ParamStore<f64> {
        let v = NUM_RESERVED + 4;
        ParamStore::init(
            &RetrieverConfig {
                vocab_size: v,
                hidden: 4,
                proj_dim: 2,
            },
            &ReaderConfig {
                vocab_size: v,
                hidden: 4,
                heads: 2,
                layers: 1,
                max_len: 12,
                span_hidden: 3,
                max_answer_len: 2,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = store();
        let mut other = s.theta.clone();
        other.w_doc = other.w_doc.map(|v| v * 2.0);
        let mut protocol = ProtocolState::new(ParamVersion(10));
        protocol.building = Some(BuildJob {
            version: ParamVersion(12),
            started_at: ParamVersion(12),
            snapshot: other.clone(),
        });
        protocol.pending = Some((ParamVersion(14), s.theta.clone()));
        let ck = Checkpoint {
            phase: "pretrain".into(),
            step: 14,
            config_digest: "d".into(),
            skipped: 2,
            store: s,
            refresh: Some(RefreshState {
                active_theta: other,
                protocol,
            }),
        };
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::<f64>::from_bytes(b"hello").is_err());
        let ck = Checkpoint {
            phase: "warmstart".into(),
            step: 0,
            config_digest: String::new(),
            skipped: 0,
            store: store(),
            refresh: None,
        };
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Format(_))
        ));
    }
}
