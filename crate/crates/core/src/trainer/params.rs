use crate::diffcore::{Gradients, Graph, NodeId, Tensor};
use crate::reader::{ReaderConfig, ReaderNodes, ReaderParams};
use crate::retriever::{
    ParamVersion, RetrieverConfig, RetrieverNodes, RetrieverParams, RETRIEVER_TENSORS,
};
use crate::{Error, Result, Scalar};

use super::config::OptimizerConfig;

/// Retriever tensors that belong to the document side of the index. They
/// stay fixed during fine-tuning so the once-built index remains exact; the
/// token table is shared with the query tower and counts as document side.
pub const DOC_TOWER_TENSORS: [&str; 3] = ["theta.token_emb", "theta.doc_dense", "theta.w_doc"];

/// θ and φ, the optimizer moments, and the parameter version.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub theta: RetrieverParams<T>,
    pub phi: ReaderParams<T>,
    version: ParamVersion,
    /// First moments (momentum buffer for SGD), in [`names`](Self::names) order.
    moment1: Vec<Tensor<T>>,
    /// Second moments; only used by Adam.
    moment2: Vec<Tensor<T>>,
}

/// Gradients for every tensor of a [`ParamStore`], in its flat order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        ParamGrads {
            tensors: store
                .flat()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads<T>, alpha: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for t in &mut self.tensors {
            *t = t.map(|v| v * alpha);
        }
    }

    pub fn sq_norm(&self) -> T {
        self.tensors.iter().map(|t| t.sq_norm()).sum()
    }
}

/// Graph leaves for a whole store.
#[derive(Clone, Debug)]
pub struct StoreNodes {
    pub theta: RetrieverNodes,
    pub phi: ReaderNodes,
}

impl StoreNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.theta.ids().to_vec();
        ids.extend(self.phi.ids());
        ids
    }

    pub fn gradients<T: Scalar>(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        ParamGrads {
            tensors: self.ids().into_iter().map(|id| grads.get(id)).collect(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(theta: RetrieverParams<T>, phi: ReaderParams<T>) -> Self {
        let mut store = ParamStore {
            theta,
            phi,
            version: ParamVersion(0),
            moment1: Vec::new(),
            moment2: Vec::new(),
        };
        store.reset_optimizer();
        store
    }

    /// Fresh parameters; θ and φ draw from separate seed streams.
    pub fn init(rcfg: &RetrieverConfig, pcfg: &ReaderConfig, seed: u64) -> Result<Self> {
        let mut sub = crate::rng::stream(seed, "init", &[]);
        let (a, b) = (rand::Rng::random(&mut sub), rand::Rng::random(&mut sub));
        Ok(ParamStore::new(
            RetrieverParams::init(rcfg, a)?,
            ReaderParams::init(pcfg, b)?,
        ))
    }

    pub fn version(&self) -> ParamVersion {
        self.version
    }

    pub fn set_version(&mut self, v: ParamVersion) {
        self.version = v;
    }

    /// Zero the optimizer moments, e.g. between training phases.
    pub fn reset_optimizer(&mut self) {
        self.moment1 = self
            .flat()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        self.moment2 = self.moment1.clone();
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = RETRIEVER_TENSORS
            .iter()
            .map(|n| format!("theta.{n}"))
            .collect();
        names.extend(
            self.phi
                .named_tensors()
                .into_iter()
                .map(|(n, _)| format!("phi.{n}")),
        );
        names
    }

    pub fn flat(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.theta.tensors().iter().map(|(_, t)| *t).collect();
        out.extend(self.phi.named_tensors().into_iter().map(|(_, t)| t));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self
            .theta
            .tensors_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        out.extend(self.phi.tensors_mut());
        out
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.moment1, &self.moment2)
    }

    pub fn set_moments(&mut self, m1: Vec<Tensor<T>>, m2: Vec<Tensor<T>>) -> Result<()> {
        let shapes: Vec<Vec<usize>> = self.flat().iter().map(|t| t.shape().to_vec()).collect();
        let ok = |m: &[Tensor<T>]| {
            m.len() == shapes.len() && m.iter().zip(&shapes).all(|(t, s)| t.shape() == &s[..])
        };
        if !ok(&m1) || !ok(&m2) {
            return Err(Error::Format(
                "optimizer state does not match parameter shapes".into(),
            ));
        }
        self.moment1 = m1;
        self.moment2 = m2;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<StoreNodes> {
        Ok(StoreNodes {
            theta: self.theta.bind(g)?,
            phi: self.phi.bind(g)?,
        })
    }

    /// One optimizer step: clip the global gradient norm over trainable
    /// tensors to `clip_norm`, update, and advance the version. Tensors whose
    /// name is in `frozen` are left bit-identical.
    pub fn apply(
        &mut self,
        grads: &ParamGrads<T>,
        opt: &OptimizerConfig,
        learning_rate: f64,
        clip_norm: f64,
        frozen: &[&str],
    ) -> Result<f64> {
        self.apply_split(grads, opt, learning_rate, learning_rate, clip_norm, frozen)
    }

    /// [`ParamStore::apply`] with separate learning rates for θ and φ.
    pub fn apply_split(
        &mut self,
        grads: &ParamGrads<T>,
        opt: &OptimizerConfig,
        theta_learning_rate: f64,
        phi_learning_rate: f64,
        clip_norm: f64,
        frozen: &[&str],
    ) -> Result<f64> {
        let names = self.names();
        if grads.tensors.len() != names.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.tensors.len(),
                names.len()
            )));
        }
        let trainable: Vec<bool> = names
            .iter()
            .map(|n| !frozen.contains(&n.as_str()))
            .collect();
        let norm = grads
            .tensors
            .iter()
            .zip(&trainable)
            .filter(|(_, &t)| t)
            .map(|(g, _)| g.sq_norm().f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric {
                node: 0,
                op: "optimizer",
                detail: "non-finite gradient norm".into(),
            });
        }
        let clip = if norm > clip_norm {
            T::c(clip_norm / norm)
        } else {
            T::one()
        };
        let n_theta = self.theta.tensors().len();
        let step = self.version.0 + 1;
        let (mut m1, mut m2) = (
            std::mem::take(&mut self.moment1),
            std::mem::take(&mut self.moment2),
        );
        for (i, p) in self.flat_mut().into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let lr = T::c(if i < n_theta {
                theta_learning_rate
            } else {
                phi_learning_rate
            });
            let g = grads.tensors[i].map(|v| v * clip);
            match *opt {
                OptimizerConfig::Sgd { momentum } => {
                    let mu = T::c(momentum);
                    let m = m1[i].zip_map(&g, |m, g| mu * m + g);
                    *p = p.zip_map(&m, |p, m| p - lr * m);
                    m1[i] = m;
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::c(beta1), T::c(beta2));
                    let m = m1[i].zip_map(&g, |m, g| b1 * m + (T::one() - b1) * g);
                    let v = m2[i].zip_map(&g, |v, g| b2 * v + (T::one() - b2) * g * g);
                    let c1 = T::one() - b1.powi(step as i32);
                    let c2 = T::one() - b2.powi(step as i32);
                    let e = T::c(eps);
                    let upd = m.zip_map(&v, |m, v| (m / c1) / ((v / c2).sqrt() + e));
                    *p = p.zip_map(&upd, |p, u| p - lr * u);
                    m1[i] = m;
                    m2[i] = v;
                }
            }
        }
        self.moment1 = m1;
        self.moment2 = m2;
        self.version = ParamVersion(step);
        Ok(norm)
    }
}
