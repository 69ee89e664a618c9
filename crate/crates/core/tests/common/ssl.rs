//! Training-step fixtures: a tiny model, augmented view batches and an
//! external replay of the teacher and center recurrences.

use vitae_ssl::augment::{view_pairs_for_batch, AugmentConfig};
use vitae_ssl::backbone::BackboneConfig;
use vitae_ssl::image::Image;
use vitae_ssl::kernels::Exec;
use vitae_ssl::nn::Session;
use vitae_ssl::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use vitae_ssl::ssl::{Framework, HeadConfig, SslConfig, SslModel, SslState};
use vitae_ssl::synth::{generate, SynthConfig};
use vitae_ssl::Tensor;

pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        image_size: 16,
        embed_dim: 16,
        stage_dims: vec![8, 16],
        num_heads: vec![1, 2],
        window_size: 2,
        reduction_ratios: vec![4, 2],
        ..BackboneConfig::vitaev2_tiny()
    }
}

pub fn small_model(framework: Framework, seed: u64) -> (SslModel, SslState) {
    let mut cfg = SslConfig::new(framework);
    cfg.head = HeadConfig {
        hidden_dim: 16,
        bottleneck_dim: 8,
        out_dim: 12,
    };
    // Strong momentum mixing so the replay sees visible teacher movement.
    cfg.dino.teacher_momentum = 0.9;
    cfg.byol_momentum = 0.9;
    SslModel::build(&small_backbone(), &cfg, seed).unwrap()
}

/// Views `(v1, v2)` of `batch` synthetic images for a given step.
pub fn views(size: usize, batch: usize, step: u64) -> (Tensor, Tensor) {
    let images = generate(Exec::Sequential, &SynthConfig::new(size, 11), batch);
    let refs: Vec<&Image> = images.iter().map(|p| &p.0).collect();
    let idx: Vec<u64> = (0..batch as u64).collect();
    let pairs = view_pairs_for_batch(Exec::Sequential, &refs, &idx, 3, step, &AugmentConfig::new(size)).unwrap();
    let v1: Vec<Image> = pairs.iter().map(|p| p.view1.clone()).collect();
    let v2: Vec<Image> = pairs.iter().map(|p| p.view2.clone()).collect();
    (Image::batch(&v1).unwrap(), Image::batch(&v2).unwrap())
}

#[derive(Clone, Debug, Default)]
pub struct Replay {
    pub steps: usize,
    /// Largest |teacher − (m·t + (1−m)·s)| over all parameters and steps.
    pub teacher_max_diff: f64,
    /// Largest |center − (c·center + (1−c)·mean)| over all steps.
    pub center_max_diff: f64,
}

/// Run `steps` train steps and replay the teacher EMA and the center update
/// from the pre-step teacher, the pre-step center and the post-update
/// student.
pub fn replay(framework: Framework, steps: usize) -> Replay {
    let (model, mut state) = small_model(framework, 5);
    let mut opt = Optimizer::new(OptimizerConfig::new(OptimizerKind::Adam), &state.student);
    let m = match framework {
        Framework::AdaptedDino => model.cfg.dino.teacher_momentum,
        _ => model.cfg.byol_momentum,
    };
    let c = model.cfg.dino.center_momentum;
    let mut out = Replay::default();
    for step in 0..steps {
        let (v1, v2) = views(16, 4, step as u64);
        let before = state.clone();
        model.train_step(&mut state, &mut opt, &v1, &v2, 1e-2, 1e-4).unwrap();
        let (t0, t1) = (before.teacher.as_ref().unwrap(), state.teacher.as_ref().unwrap());
        for id in t0.ids() {
            let s = state.student.get(id).data();
            for ((&a, &b), &sv) in t0.get(id).data().iter().zip(t1.get(id).data()).zip(s) {
                out.teacher_max_diff = out.teacher_max_diff.max((b - (m * a + (1.0 - m) * sv)).abs());
            }
        }
        if let (Some(c0), Some(c1)) = (&before.center, &state.center) {
            let both = Tensor::concat_rows(&[&v1, &v2]).unwrap();
            let mut sess = Session::new(t0, false);
            let x = sess.g.constant(both);
            let y = model.project(&mut sess, x);
            let logits = sess.g.value(y);
            let (n, k) = (logits.dim(0), logits.dim(1));
            for j in 0..k {
                let mean = (0..n).map(|i| logits.data()[i * k + j]).sum::<f64>() / n as f64;
                let want = c * c0.data()[j] + (1.0 - c) * mean;
                out.center_max_diff = out.center_max_diff.max((c1.data()[j] - want).abs());
            }
        }
        out.steps += 1;
    }
    out
}

/// Whether the losses leave teacher outputs, targets and the center without
/// gradient while the student side receives one.
pub fn stop_gradient_holds() -> bool {
    use rand::SeedableRng;
    use vitae_ssl::autograd::Graph;
    use vitae_ssl::ssl::{byol_loss, dino_loss, simsiam_loss};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut randn = |shape: &[usize]| Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    let zero = |g: Option<Tensor>| g.is_none_or(|x| x.data().iter().all(|&e| e == 0.0));
    let live = |g: Option<Tensor>| g.is_some_and(|x| x.data().iter().any(|&e| e != 0.0));

    let mut g = Graph::new();
    let s = [g.leaf(randn(&[3, 5])), g.leaf(randn(&[3, 5]))];
    let t = [g.leaf(randn(&[3, 5])), g.leaf(randn(&[3, 5]))];
    let c = g.leaf(randn(&[5]));
    let loss = dino_loss(&mut g, s, t, c, 0.1, 0.04).unwrap();
    let grads = g.backward(loss);
    let mut ok = live(grads.get(s[0])) && live(grads.get(s[1]));
    ok &= [t[0], t[1], c].iter().all(|&v| zero(grads.get(v)));
    for f in [byol_loss, simsiam_loss] {
        let mut g = Graph::new();
        let p = g.leaf(randn(&[3, 4]));
        let z = g.leaf(randn(&[3, 4]));
        let loss = f(&mut g, p, z).unwrap();
        let grads = g.backward(loss);
        ok &= live(grads.get(p)) && zero(grads.get(z));
    }
    ok
}
