//! First-order optimizers over a [`ParamStore`].
//!
//! Weight decay and layer-wise adaptation apply only to parameters
//! registered with `decay = true`; biases and normalization gains are
//! excluded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    Adam,
    /// SGD with heavy-ball momentum and L2 weight decay.
    Sgd,
    /// SGD with momentum and layer-wise trust-ratio scaling.
    Lars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_trust")]
    pub trust_coefficient: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_momentum() -> f64 {
    0.9
}
fn default_trust() -> f64 {
    1e-3
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerConfig {
            kind,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            momentum: default_momentum(),
            trust_coefficient: default_trust(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) || !unit(self.momentum) {
            return Err(Error::Config("betas and momentum must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.trust_coefficient <= 0.0 {
            return Err(Error::Config("eps and trust_coefficient must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer with per-parameter state aligned to a store's registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub step: u64,
    /// First moment (Adam) or momentum buffer (SGD, LARS).
    pub m: Vec<Tensor>,
    /// Second moment (Adam only; empty tensors otherwise).
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        let m = params.iter().map(|(_, t)| zeros(t)).collect();
        let v = match cfg.kind {
            OptimizerKind::Adam => params.iter().map(|(_, t)| zeros(t)).collect(),
            _ => Vec::new(),
        };
        Optimizer { cfg, step: 0, m, v }
    }

    /// Apply one update. `grads[i]` belongs to the i-th parameter; `None`
    /// is treated as a zero gradient.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, wd: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer state for {} params, store has {}, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let cfg = self.cfg.clone();
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let decay = params.decays(id);
            let p = params.get_mut(id);
            let n = p.numel();
            let g = match &grads[i] {
                Some(g) if g.shape() == p.shape() => g.data().to_vec(),
                Some(g) => {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => vec![0.0; n],
            };
            let wd_i = if decay { wd } else { 0.0 };
            match cfg.kind {
                OptimizerKind::Adam => {
                    let t = self.step as i32;
                    let c1 = 1.0 - cfg.beta1.powi(t);
                    let c2 = 1.0 - cfg.beta2.powi(t);
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    let p = p.data_mut();
                    for j in 0..n {
                        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                        let update = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                        p[j] -= lr * (update + wd_i * p[j]);
                    }
                }
                OptimizerKind::Sgd => {
                    let buf = self.m[i].data_mut();
                    let p = p.data_mut();
                    for j in 0..n {
                        buf[j] = cfg.momentum * buf[j] + g[j] + wd_i * p[j];
                        p[j] -= lr * buf[j];
                    }
                }
                OptimizerKind::Lars => {
                    let p = p.data_mut();
                    let d: Vec<f64> = (0..n).map(|j| g[j] + wd_i * p[j]).collect();
                    let trust = if decay {
                        let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if pn > 0.0 && dn > 0.0 {
                            cfg.trust_coefficient * pn / dn
                        } else {
                            1.0
                        }
                    } else {
                        1.0
                    };
                    let buf = self.m[i].data_mut();
                    for j in 0..n {
                        buf[j] = cfg.momentum * buf[j] + trust * d[j];
                        p[j] -= lr * buf[j];
                    }
                }
            }
        }
        Ok(())
    }

    /// Named state tensors for checkpointing.
    pub fn state_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("m.{name}"), self.m[i].clone()));
            if let Some(v) = self.v.get(i) {
                out.push((format!("v.{name}"), v.clone()));
            }
        }
        out
    }

    /// Rebuild from tensors produced by [`Optimizer::state_tensors`].
    pub fn from_state(
        cfg: OptimizerConfig,
        params: &ParamStore,
        step: u64,
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut opt = Optimizer::new(cfg, params);
        opt.step = step;
        for (i, (name, t)) in params.iter().enumerate() {
            let load = |key: String, slot: &mut Tensor| -> Result<()> {
                let v = lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if v.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has wrong shape")));
                }
                *slot = v;
                Ok(())
            };
            load(format!("m.{name}"), &mut opt.m[i])?;
            if i < opt.v.len() {
                load(format!("v.{name}"), &mut opt.v[i])?;
            }
        }
        Ok(opt)
    }
}
