//! Self-supervised objectives as graph operations.
//!
//! Each loss validates its inputs eagerly (values are available at graph
//! construction time) and returns a scalar `Var`. Targets are detached
//! inside the loss, so no gradient can reach a teacher, a target network or
//! the center regardless of how the caller built them.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MASKED: f64 = -1e9;
const MIN_NORM: f64 = 1e-12;

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn check_matrix(g: &Graph, v: Var, what: &str) -> Result<(usize, usize)> {
    let s = g.shape(v);
    if s.len() != 2 {
        return Err(Error::Shape(format!("{what}: expected (B, D), got {s:?}")));
    }
    if s[0] == 0 {
        return Err(Error::Empty(what.into()));
    }
    check_finite(g, v, what)?;
    Ok((s[0], s[1]))
}

fn check_rows_nonzero(g: &Graph, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let d = t.dim(1);
    for (i, row) in t.data().chunks(d.max(1)).enumerate() {
        if row.iter().map(|x| x * x).sum::<f64>().sqrt() < MIN_NORM {
            return Err(Error::Data(format!("{what}: row {i} has zero norm")));
        }
    }
    Ok(())
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Teacher targets `softmax((t − center) / tau)`, detached.
pub fn teacher_probs(g: &mut Graph, teacher: Var, center: Var, tau_teacher: f64) -> Var {
    let t = g.detach(teacher);
    let c = g.detach(center);
    let z = g.sub(t, c);
    let z = g.scale(z, 1.0 / tau_teacher);
    g.softmax(z)
}

/// Cross-view self-distillation loss over two views:
/// `½ [H(P_t(v1), P_s(v2)) + H(P_t(v2), P_s(v1))]`, averaged over the batch.
pub fn dino_loss(
    g: &mut Graph,
    student: [Var; 2],
    teacher: [Var; 2],
    center: Var,
    tau_student: f64,
    tau_teacher: f64,
) -> Result<Var> {
    if !(tau_student > 0.0 && tau_teacher > 0.0) {
        return Err(Error::Config("temperatures must be positive".into()));
    }
    let (b, k) = check_matrix(g, student[0], "student logits")?;
    for (v, what) in [
        (student[1], "student logits"),
        (teacher[0], "teacher logits"),
        (teacher[1], "teacher logits"),
    ] {
        check_matrix(g, v, what)?;
        same_shape(g, student[0], v, what)?;
    }
    if g.shape(center) != [k] {
        return Err(Error::Shape(format!(
            "center has shape {:?}, logits have K = {k}",
            g.shape(center)
        )));
    }
    check_finite(g, center, "center")?;

    let pt: Vec<Var> = teacher
        .iter()
        .map(|&t| teacher_probs(g, t, center, tau_teacher))
        .collect();
    let ls: Vec<Var> = student
        .iter()
        .map(|&s| {
            let z = g.scale(s, 1.0 / tau_student);
            g.log_softmax(z)
        })
        .collect();
    let a = g.mul(pt[0], ls[1]);
    let a = g.sum(a);
    let c = g.mul(pt[1], ls[0]);
    let c = g.sum(c);
    let total = g.add(a, c);
    Ok(g.scale(total, -1.0 / (2.0 * b as f64)))
}

/// `center' = c · center + (1 − c) · mean_rows(batch)`.
pub fn update_center(center: &Tensor, batch: &Tensor, c: f64) -> Result<Tensor> {
    if batch.ndim() != 2 || batch.dim(0) == 0 {
        return Err(Error::Empty("teacher logits batch".into()));
    }
    let k = batch.dim(1);
    if center.shape() != [k] {
        return Err(Error::Shape(format!(
            "center {:?} vs batch width {k}",
            center.shape()
        )));
    }
    let n = batch.dim(0);
    let mut mean = vec![0.0; k];
    for row in batch.data().chunks(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let data = center
        .data()
        .iter()
        .zip(&mean)
        .map(|(&old, &sum)| c * old + (1.0 - c) * (sum / n as f64))
        .collect();
    Tensor::new(vec![k], data)
}

/// NT-Xent over `2B` projections where rows `i` and `i + B` are the two
/// views of image `i`.
pub fn simclr_loss(g: &mut Graph, z: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let (n, _) = check_matrix(g, z, "projections")?;
    if n % 2 != 0 {
        return Err(Error::Shape(format!("expected 2B rows, got {n}")));
    }
    if n < 4 {
        return Err(Error::Data("contrastive loss needs B >= 2 for negatives".into()));
    }
    check_rows_nonzero(g, z, "projections")?;
    let b = n / 2;
    let u = g.l2_normalize_last(z);
    let sim = g.matmul_nt(u, u);
    let sim = g.scale(sim, 1.0 / temperature);
    let mut diag = vec![0.0; n * n];
    let mut pos = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = MASKED;
        pos[i * n + (i + b) % n] = 1.0;
    }
    let diag = g.constant(Tensor::new(vec![n, n], diag)?);
    let pos = g.constant(Tensor::new(vec![n, n], pos)?);
    let logits = g.add(sim, diag);
    let lp = g.log_softmax(logits);
    let picked = g.mul(lp, pos);
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Mean of `‖n(p) − n(z)‖²` with `z` detached.
pub fn byol_loss(g: &mut Graph, online_pred: Var, target_proj: Var) -> Result<Var> {
    let (b, _) = check_matrix(g, online_pred, "online prediction")?;
    check_matrix(g, target_proj, "target projection")?;
    same_shape(g, online_pred, target_proj, "target projection")?;
    check_rows_nonzero(g, online_pred, "online prediction")?;
    check_rows_nonzero(g, target_proj, "target projection")?;
    let z = g.detach(target_proj);
    let p = g.l2_normalize_last(online_pred);
    let z = g.l2_normalize_last(z);
    let d = g.sub(p, z);
    let d = g.square(d);
    let total = g.sum(d);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// `½ [byol(p1, z2) + byol(p2, z1)]`.
pub fn byol_loss_symmetric(g: &mut Graph, pred: [Var; 2], proj: [Var; 2]) -> Result<Var> {
    let a = byol_loss(g, pred[0], proj[1])?;
    let b = byol_loss(g, pred[1], proj[0])?;
    let s = g.add(a, b);
    Ok(g.scale(s, 0.5))
}

/// Mean of `−cos(p, z)` with `z` detached.
pub fn simsiam_loss(g: &mut Graph, pred: Var, proj: Var) -> Result<Var> {
    let (b, _) = check_matrix(g, pred, "prediction")?;
    check_matrix(g, proj, "projection")?;
    same_shape(g, pred, proj, "projection")?;
    check_rows_nonzero(g, pred, "prediction")?;
    check_rows_nonzero(g, proj, "projection")?;
    let z = g.detach(proj);
    let p = g.l2_normalize_last(pred);
    let z = g.l2_normalize_last(z);
    let c = g.mul(p, z);
    let total = g.sum(c);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// `½ [−cos(p1, sg(z2)) − cos(p2, sg(z1))]`, batch-averaged.
pub fn simsiam_loss_symmetric(g: &mut Graph, pred: [Var; 2], proj: [Var; 2]) -> Result<Var> {
    let a = simsiam_loss(g, pred[0], proj[1])?;
    let b = simsiam_loss(g, pred[1], proj[0])?;
    let s = g.add(a, b);
    Ok(g.scale(s, 0.5))
}

/// Mean per-row entropy of a batch of distributions, in nats.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let k = probs.dim(probs.ndim() - 1);
    let rows = probs.numel() / k;
    let total: f64 = probs.data().chunks(k).map(entropy).sum();
    total / rows as f64
}

/// Entropy of the batch-averaged distribution, in nats.
pub fn marginal_entropy(probs: &Tensor) -> f64 {
    let k = probs.dim(probs.ndim() - 1);
    let rows = probs.numel() / k;
    let mut mean = vec![0.0; k];
    for row in probs.data().chunks(k) {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p / rows as f64;
        }
    }
    entropy(&mean)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Evaluate a loss on plain tensors and return its value.
pub fn eval_loss(inputs: &[&Tensor], f: impl FnOnce(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn dino_uniform_is_ln2() {
        let z = t(&[1, 2], &[0.0, 0.0]);
        let c = t(&[2], &[0.0, 0.0]);
        let l = eval_loss(&[&z, &z, &z, &z, &c], |g, v| dino_loss(g, [v[0], v[1]], [v[2], v[3]], v[4], 1.0, 1.0)).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dino_sharp_teacher_limit() {
        let z = t(&[1, 2], &[10.0, 0.0]);
        let c = t(&[2], &[0.0, 0.0]);
        let l = eval_loss(&[&z, &z, &z, &z, &c], |g, v| dino_loss(g, [v[0], v[1]], [v[2], v[3]], v[4], 1.0, 0.04)).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-9, "{l} vs {expected}");
        assert!((l - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn dino_rejects_center_mismatch() {
        let z = t(&[1, 2], &[0.0, 0.0]);
        let c = t(&[3], &[0.0; 3]);
        let r = eval_loss(&[&z, &z, &z, &z, &c], |g, v| dino_loss(g, [v[0], v[1]], [v[2], v[3]], v[4], 1.0, 1.0));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn dino_rejects_non_finite() {
        let z = t(&[1, 2], &[f64::NAN, 0.0]);
        let ok = t(&[1, 2], &[0.0, 0.0]);
        let c = t(&[2], &[0.0, 0.0]);
        let r = eval_loss(&[&z, &ok, &ok, &ok, &c], |g, v| dino_loss(g, [v[0], v[1]], [v[2], v[3]], v[4], 1.0, 1.0));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn center_examples() {
        let batch = t(&[2, 2], &[1.0, 3.0, 3.0, 1.0]);
        let c0 = t(&[2], &[5.0, -5.0]);
        assert_eq!(update_center(&c0, &batch, 1.0).unwrap(), c0);
        assert_eq!(update_center(&c0, &batch, 0.0).unwrap().data(), &[2.0, 2.0]);
        let b = t(&[1, 2], &[1.0, -1.0]);
        let c = update_center(&t(&[2], &[0.0, 0.0]), &b, 0.9).unwrap();
        assert!((c.data()[0] - 0.1).abs() < 1e-15 && (c.data()[1] + 0.1).abs() < 1e-15);
        assert!(update_center(&c0, &Tensor::zeros([0, 2]), 0.9).is_err());
    }

    #[test]
    fn simclr_closed_form() {
        // views of image 0 along e0, of image 1 along e1
        let z = t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let l = eval_loss(&[&z], |g, v| simclr_loss(g, v[0], 1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 2.0)).ln()).abs() < 1e-12);
        let z5 = z.map(|x| 5.0 * x);
        let l5 = eval_loss(&[&z5], |g, v| simclr_loss(g, v[0], 1.0)).unwrap();
        assert!((l - l5).abs() < 1e-12);
    }

    #[test]
    fn simclr_errors() {
        let z = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(eval_loss(&[&z], |g, v| simclr_loss(g, v[0], 0.5)).is_err());
        let z = t(&[4, 2], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(eval_loss(&[&z], |g, v| simclr_loss(g, v[0], 0.5)), Err(Error::Data(_))));
    }

    #[test]
    fn byol_and_simsiam_examples() {
        let p = t(&[1, 2], &[3.0, 4.0]);
        let q = t(&[1, 2], &[-4.0, 3.0]);
        assert!(eval_loss(&[&p, &p], |g, v| byol_loss(g, v[0], v[1])).unwrap().abs() < 1e-15);
        assert!((eval_loss(&[&p, &q], |g, v| byol_loss(g, v[0], v[1])).unwrap() - 2.0).abs() < 1e-12);
        assert!((eval_loss(&[&p, &p], |g, v| simsiam_loss(g, v[0], v[1])).unwrap() + 1.0).abs() < 1e-12);
        assert!(eval_loss(&[&p, &q], |g, v| simsiam_loss(g, v[0], v[1])).unwrap().abs() < 1e-12);
        let zero = t(&[1, 2], &[0.0, 0.0]);
        assert!(eval_loss(&[&p, &zero], |g, v| byol_loss(g, v[0], v[1])).is_err());
        assert!(eval_loss(&[&zero, &p], |g, v| simsiam_loss(g, v[0], v[1])).is_err());
    }

    #[test]
    fn entropies_bounded() {
        let u = Tensor::full([3, 4], 0.25);
        assert!((mean_entropy(&u) - 4f64.ln()).abs() < 1e-12);
        let one = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mean_entropy(&one), 0.0);
        assert!((marginal_entropy(&one) - 2f64.ln()).abs() < 1e-12);
    }
}
