//! Scalar-loop reference implementations of the losses and metrics, and the
//! randomized comparison suites that run them against the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitae_ssl::eval::{auc_binary, evaluate, PredictionSet};
use vitae_ssl::ssl::losses::eval_loss;
use vitae_ssl::ssl::{byol_loss, dino_loss, simclr_loss, simsiam_loss};
use vitae_ssl::Tensor;

pub const INSTANCES: usize = 1000;
pub const LOSS_TOL: f64 = 1e-8;
pub const AUC_TOL: f64 = 1e-12;

type Rows = Vec<Vec<f64>>;

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Rows {
    (0..n).map(|_| (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).collect()
}

fn tensor(r: &Rows) -> Tensor {
    Tensor::new(vec![r.len(), r[0].len()], r.concat()).unwrap()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mut m = z[0];
    for &v in z {
        if v > m {
            m = v;
        }
    }
    let mut e = Vec::new();
    let mut total = 0.0;
    for &v in z {
        e.push((v - m).exp());
        total += (v - m).exp();
    }
    for v in e.iter_mut() {
        *v /= total;
    }
    e
}

fn unit(v: &[f64]) -> Vec<f64> {
    let mut n = 0.0;
    for x in v {
        n += x * x;
    }
    let n = n.sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dino_oracle(s: [&Rows; 2], t: [&Rows; 2], center: &[f64], tau_s: f64, tau_t: f64) -> f64 {
    let b = s[0].len();
    let mut total = 0.0;
    for (ti, si) in [(0, 1), (1, 0)] {
        for i in 0..b {
            let shifted: Vec<f64> = (0..center.len()).map(|k| (t[ti][i][k] - center[k]) / tau_t).collect();
            let p = softmax(&shifted);
            let scaled: Vec<f64> = s[si][i].iter().map(|v| v / tau_s).collect();
            let q = softmax(&scaled);
            for k in 0..center.len() {
                total -= p[k] * q[k].ln();
            }
        }
    }
    total / (2.0 * b as f64)
}

pub fn simclr_oracle(z: &Rows, temperature: f64) -> f64 {
    let n = z.len();
    let b = n / 2;
    let u: Rows = z.iter().map(|r| unit(r)).collect();
    let sim = |i: usize, j: usize| u[i].iter().zip(&u[j]).map(|(a, c)| a * c).sum::<f64>() / temperature;
    let mut total = 0.0;
    for i in 0..n {
        let pos = (i + b) % n;
        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += sim(i, k).exp();
            }
        }
        total += -(sim(i, pos).exp() / denom).ln();
    }
    total / n as f64
}

pub fn byol_oracle(p: &Rows, z: &Rows) -> f64 {
    let mut total = 0.0;
    for (a, c) in p.iter().zip(z) {
        let (a, c) = (unit(a), unit(c));
        for d in 0..a.len() {
            total += (a[d] - c[d]) * (a[d] - c[d]);
        }
    }
    total / p.len() as f64
}

pub fn simsiam_oracle(p: &Rows, z: &Rows) -> f64 {
    let mut total = 0.0;
    for (a, c) in p.iter().zip(z) {
        let (a, c) = (unit(a), unit(c));
        let mut cos = 0.0;
        for d in 0..a.len() {
            cos += a[d] * c[d];
        }
        total -= cos;
    }
    total / p.len() as f64
}

/// Worst absolute deviation from the oracle per loss over `INSTANCES` draws.
pub fn loss_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0ac1e);
    let mut worst = [0.0f64; 4];
    for _ in 0..INSTANCES {
        let (b, k) = (rng.random_range(1..=6), rng.random_range(2..=10));
        let scale = rng.random_range(0.1..=5.0);
        let s = [rows(&mut rng, b, k, scale), rows(&mut rng, b, k, scale)];
        let t = [rows(&mut rng, b, k, scale), rows(&mut rng, b, k, scale)];
        let c = rows(&mut rng, 1, k, scale).remove(0);
        let tau_s = rng.random_range(0.05..=1.0);
        let tau_t = rng.random_range(0.02..=tau_s);
        let ts = [tensor(&s[0]), tensor(&s[1]), tensor(&t[0]), tensor(&t[1]), Tensor::new(vec![k], c.clone()).unwrap()];
        let got = eval_loss(&ts.iter().collect::<Vec<_>>(), |g, v| {
            dino_loss(g, [v[0], v[1]], [v[2], v[3]], v[4], tau_s, tau_t)
        })
        .unwrap();
        worst[0] = worst[0].max((got - dino_oracle([&s[0], &s[1]], [&t[0], &t[1]], &c, tau_s, tau_t)).abs());

        let bb = rng.random_range(2..=5);
        let d = rng.random_range(2..=9);
        let z = rows(&mut rng, 2 * bb, d, scale);
        let temp = rng.random_range(0.05..=1.0);
        let got = eval_loss(&[&tensor(&z)], |g, v| simclr_loss(g, v[0], temp)).unwrap();
        worst[1] = worst[1].max((got - simclr_oracle(&z, temp)).abs());

        let p = rows(&mut rng, b, d, scale);
        let q = rows(&mut rng, b, d, scale);
        let got = eval_loss(&[&tensor(&p), &tensor(&q)], |g, v| byol_loss(g, v[0], v[1])).unwrap();
        worst[2] = worst[2].max((got - byol_oracle(&p, &q)).abs());
        let got = eval_loss(&[&tensor(&p), &tensor(&q)], |g, v| simsiam_loss(g, v[0], v[1])).unwrap();
        worst[3] = worst[3].max((got - simsiam_oracle(&p, &q)).abs());
    }
    vec![
        ("dino_loss", worst[0]),
        ("simclr_loss", worst[1]),
        ("byol_loss", worst[2]),
        ("simsiam_loss", worst[3]),
    ]
}

pub fn argmax_oracle(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 0..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Brute force over all (positive, negative) pairs, ties counting one half.
pub fn auc_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// `(precision, recall, f1, degenerate)` from explicit counts.
pub fn prf_oracle(preds: &[usize], labels: &[usize], positive: usize) -> (f64, f64, f64, bool) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for i in 0..preds.len() {
        if preds[i] == positive && labels[i] == positive {
            tp += 1;
        }
        if preds[i] == positive && labels[i] != positive {
            fp += 1;
        }
        if preds[i] != positive && labels[i] == positive {
            fneg += 1;
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if 2 * tp + fp + fneg == 0 || tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    };
    (precision, recall, f1, tp + fp == 0 || tp + fneg == 0 || tp == 0)
}

#[derive(Clone, Debug, Default)]
pub struct MetricSuite {
    pub instances: usize,
    /// Instances where accuracy, precision, recall or the degenerate flag
    /// differed from the counting oracle at all.
    pub count_mismatches: usize,
    pub f1_worst: f64,
    pub auc_worst: f64,
    pub auc_binary_worst: f64,
}

impl MetricSuite {
    pub fn passes(&self) -> bool {
        self.instances >= INSTANCES && self.count_mismatches == 0 && self.f1_worst <= AUC_TOL && self.auc_worst <= AUC_TOL && self.auc_binary_worst <= AUC_TOL
    }
}

pub fn metric_suite() -> MetricSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7c);
    let mut out = MetricSuite::default();
    for _ in 0..INSTANCES {
        let c = rng.random_range(2..=4);
        let n = rng.random_range(c + 1..=30);
        // Every class appears so one-vs-rest AUC is defined.
        let mut labels: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        // Coarse integer scores produce argmax ties half the time.
        let coarse = rng.random_bool(0.5);
        let scores: Rows = (0..n)
            .map(|_| {
                (0..c)
                    .map(|_| if coarse { rng.random_range(0..3) as f64 } else { rng.random_range(-3.0..3.0) })
                    .collect()
            })
            .collect();
        let p = PredictionSet::new(tensor(&scores), labels.clone()).unwrap();
        let report = evaluate(&p, &[]).unwrap();

        let preds: Vec<usize> = scores.iter().map(|r| argmax_oracle(r)).collect();
        let mut hits = 0;
        for i in 0..n {
            if preds[i] == labels[i] {
                hits += 1;
            }
        }
        let acc = hits as f64 / n as f64;
        let (precision, recall, f1, degenerate) = if c == 2 {
            prf_oracle(&preds, &labels, 1)
        } else {
            let per: Vec<_> = (0..c).map(|k| prf_oracle(&preds, &labels, k)).collect();
            let mean = |f: fn(&(f64, f64, f64, bool)) -> f64| per.iter().map(f).sum::<f64>() / c as f64;
            (mean(|x| x.0), mean(|x| x.1), mean(|x| x.2), per.iter().any(|x| x.3))
        };
        if report.accuracy.mean != acc
            || report.precision.mean != precision
            || report.recall.mean != recall
            || report.degenerate != degenerate
        {
            out.count_mismatches += 1;
        }
        out.f1_worst = out.f1_worst.max((report.f1.mean - f1).abs());

        let probs: Rows = scores.iter().map(|r| softmax(r)).collect();
        let ovr = |k: usize| {
            let s: Vec<f64> = probs.iter().map(|r| r[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            auc_oracle(&s, &pos)
        };
        let auc = if c == 2 { ovr(1) } else { (0..c).map(ovr).sum::<f64>() / c as f64 };
        out.auc_worst = out.auc_worst.max((report.auc.mean - auc).abs());

        // Raw binary AUC with heavy ties.
        let m = rng.random_range(2..=25);
        let mut pos: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        pos[0] = true;
        pos[1] = false;
        let s: Vec<f64> = (0..m).map(|_| rng.random_range(0..5) as f64 * 0.25).collect();
        out.auc_binary_worst = out.auc_binary_worst.max((auc_binary(&s, &pos).unwrap() - auc_oracle(&s, &pos)).abs());
        out.instances += 1;
    }
    out
}
