//! Linear classifier trained on frozen features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{lr_schedule, LrSchedule, PostWarmup};
use crate::tensor::Tensor;

/// Per-dimension standardization fitted on training features. Plays the
/// role of the affine-free batch normalization commonly placed in front of
/// a linear probe, with statistics frozen after fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.ndim() != 2 || x.dim(0) == 0 {
            return Err(Error::Empty("feature matrix".into()));
        }
        let (n, d) = (x.dim(0), x.dim(1));
        let mut mean = vec![0.0; d];
        for row in x.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.data().chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n as f64).sqrt().max(1e-6)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeHparams {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// `logits = x W + b`, `W: (D, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
}

impl LinearProbe {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        LinearProbe {
            weight: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
            dim,
            classes,
        }
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        let (n, d, c) = (x.dim(0), self.dim, self.classes);
        let mut out = vec![0.0; n * c];
        for (i, row) in x.data().chunks(d).enumerate() {
            let o = &mut out[i * c..(i + 1) * c];
            o.copy_from_slice(&self.bias);
            for (j, &xv) in row.iter().enumerate() {
                let w = &self.weight[j * c..(j + 1) * c];
                for k in 0..c {
                    o[k] += xv * w[k];
                }
            }
        }
        Tensor::from_parts(vec![n, c], out)
    }

    /// Mini-batch SGD with momentum on softmax cross-entropy. Weight decay
    /// applies to the weight matrix only. Mini-batch order is a pure
    /// function of `hp.seed` and the epoch.
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, hp: &ProbeHparams) -> Result<Self> {
        if x.ndim() != 2 || x.dim(0) != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "features {:?} vs {} labels",
                x.shape(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside {classes} classes")));
        }
        if hp.batch_size == 0 || hp.epochs == 0 {
            return Err(Error::Config("probe batch_size and epochs must be positive".into()));
        }
        let (n, d, c) = (x.dim(0), x.dim(1), classes);
        let mut probe = LinearProbe::zeros(d, c);
        let mut vw = vec![0.0; d * c];
        let mut vb = vec![0.0; c];
        let steps_per_epoch = n.div_ceil(hp.batch_size);
        let total = (hp.epochs * steps_per_epoch) as u64;
        let sched = LrSchedule {
            base_lr: hp.lr,
            warmup_steps: (hp.warmup_epochs * steps_per_epoch) as u64,
            policy: PostWarmup::Constant,
        };
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0u64;
        for epoch in 0..hp.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ ((epoch as u64 + 1) << 32));
            order.sort_unstable();
            order.shuffle(&mut rng);
            for batch in order.chunks(hp.batch_size) {
                let lr = lr_schedule(step, total, &sched);
                let mut gw = vec![0.0; d * c];
                let mut gb = vec![0.0; c];
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let row = x.row(i);
                    let mut z = probe.bias.clone();
                    for (j, &xv) in row.iter().enumerate() {
                        for k in 0..c {
                            z[k] += xv * probe.weight[j * c + k];
                        }
                    }
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    for k in 0..c {
                        let p = e[k] / s - if k == labels[i] { 1.0 } else { 0.0 };
                        gb[k] += scale * p;
                        for (j, &xv) in row.iter().enumerate() {
                            gw[j * c + k] += scale * p * xv;
                        }
                    }
                }
                for idx in 0..d * c {
                    let g = gw[idx] + hp.weight_decay * probe.weight[idx];
                    vw[idx] = hp.momentum * vw[idx] + g;
                    probe.weight[idx] -= lr * vw[idx];
                }
                for k in 0..c {
                    vb[k] = hp.momentum * vb[k] + gb[k];
                    probe.bias[k] -= lr * vb[k];
                }
                step += 1;
            }
        }
        if probe.weight.iter().chain(&probe.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear probe weights".into()));
        }
        Ok(probe)
    }
}
