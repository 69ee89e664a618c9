//! Self-supervised frameworks over any backbone: adapted two-view
//! self-distillation (EMA teacher with centering and sharpening) and the
//! SimCLR, BYOL and SimSiam baselines.

pub mod heads;
pub mod losses;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{check_images, Backbone, BackboneConfig, Encoder};
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamStore, Session};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

pub use heads::{DinoHead, HeadConfig, ProjectionMlp};
pub use losses::{byol_loss, dino_loss, simclr_loss, simsiam_loss, update_center};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    AdaptedDino,
    Simclr,
    Byol,
    Simsiam,
}

impl Framework {
    pub fn display_name(self) -> &'static str {
        match self {
            Framework::AdaptedDino => "Adapted DINO",
            Framework::Simclr => "SimCLR",
            Framework::Byol => "BYOL",
            Framework::Simsiam => "SimSiam",
        }
    }

    pub fn has_teacher(self) -> bool {
        matches!(self, Framework::AdaptedDino | Framework::Byol)
    }

    /// Whether the loss needs at least two images per batch.
    pub fn needs_negatives(self) -> bool {
        self == Framework::Simclr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DinoConfig {
    #[serde(default = "d_tau_s")]
    pub tau_student: f64,
    #[serde(default = "d_tau_t")]
    pub tau_teacher: f64,
    #[serde(default = "d_m")]
    pub teacher_momentum: f64,
    #[serde(default = "d_c")]
    pub center_momentum: f64,
    /// Permit `tau_teacher >= tau_student`; only for collapse ablations.
    #[serde(default)]
    pub allow_unsharpened: bool,
}

fn d_tau_s() -> f64 {
    0.1
}
fn d_tau_t() -> f64 {
    0.04
}
fn d_m() -> f64 {
    0.996
}
fn d_c() -> f64 {
    0.9
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            tau_student: d_tau_s(),
            tau_teacher: d_tau_t(),
            teacher_momentum: d_m(),
            center_momentum: d_c(),
            allow_unsharpened: false,
        }
    }
}

impl DinoConfig {
    /// Centering and sharpening both switched off: the center stays at its
    /// initial value and the teacher uses the student temperature.
    pub fn without_centering_and_sharpening(&self) -> Self {
        DinoConfig {
            tau_teacher: self.tau_student,
            center_momentum: 1.0,
            allow_unsharpened: true,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_student > 0.0 && self.tau_teacher > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !self.allow_unsharpened && self.tau_teacher >= self.tau_student {
            return Err(Error::Config(format!(
                "tau_teacher ({}) must be below tau_student ({})",
                self.tau_teacher, self.tau_student
            )));
        }
        for (v, name) in [(self.teacher_momentum, "teacher_momentum"), (self.center_momentum, "center_momentum")] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub framework: Framework,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default)]
    pub dino: DinoConfig,
    #[serde(default = "d_simclr_t")]
    pub simclr_temperature: f64,
    #[serde(default = "d_m")]
    pub byol_momentum: f64,
}

fn d_simclr_t() -> f64 {
    0.1
}

impl SslConfig {
    pub fn new(framework: Framework) -> Self {
        SslConfig {
            framework,
            head: HeadConfig::default(),
            dino: DinoConfig::default(),
            simclr_temperature: d_simclr_t(),
            byol_momentum: d_m(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.head;
        if h.hidden_dim == 0 || h.out_dim == 0 || h.bottleneck_dim == 0 {
            return Err(Error::Config("head sizes must be positive".into()));
        }
        match self.framework {
            Framework::AdaptedDino => self.dino.validate(),
            Framework::Simclr if self.simclr_temperature <= 0.0 => {
                Err(Error::Config("simclr_temperature must be positive".into()))
            }
            Framework::Byol if !(0.0..=1.0).contains(&self.byol_momentum) => {
                Err(Error::Config("byol_momentum must lie in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }

    fn momentum(&self) -> f64 {
        match self.framework {
            Framework::AdaptedDino => self.dino.teacher_momentum,
            _ => self.byol_momentum,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Dino(DinoHead),
    Projector(ProjectionMlp),
}

/// Network layout of a framework. Parameters are registered as
/// `backbone.*`, then `head.*`, then `predictor.*`, so the teacher (or
/// target) store is a prefix of the student store.
#[derive(Clone, Debug)]
pub struct SslModel {
    pub backbone_cfg: BackboneConfig,
    pub cfg: SslConfig,
    pub backbone: Backbone,
    pub head: Head,
    pub predictor: Option<ProjectionMlp>,
    pub backbone_len: usize,
    pub teacher_len: usize,
}

/// Complete resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct SslState {
    pub student: ParamStore,
    pub teacher: Option<ParamStore>,
    pub center: Option<Tensor>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub loss: f64,
    /// Mean per-image entropy of the teacher softmax (self-distillation only).
    pub teacher_entropy: Option<f64>,
    /// Entropy of the batch-averaged teacher softmax (self-distillation only).
    pub teacher_marginal_entropy: Option<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl SslModel {
    /// Register all parameters with a seeded initializer and return the
    /// layout with its initial state; the teacher starts as a copy.
    pub fn build(backbone_cfg: &BackboneConfig, cfg: &SslConfig, seed: u64) -> Result<(Self, SslState)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::build(backbone_cfg, &mut store, &mut rng, "backbone")?;
        let backbone_len = store.len();
        let d = backbone.embed_dim();
        let h = &cfg.head;
        let mut b = Builder::new(&mut store, &mut rng, "");
        let head = match cfg.framework {
            Framework::AdaptedDino => Head::Dino(DinoHead::new(&mut b.sub("head"), d, h)),
            Framework::Simclr => Head::Projector(ProjectionMlp::new(&mut b.sub("head"), d, h.hidden_dim, h.out_dim, false)),
            Framework::Byol | Framework::Simsiam => {
                Head::Projector(ProjectionMlp::new(&mut b.sub("head"), d, h.hidden_dim, h.out_dim, true))
            }
        };
        let teacher_len = b.store.len();
        let predictor = matches!(cfg.framework, Framework::Byol | Framework::Simsiam)
            .then(|| ProjectionMlp::new(&mut b.sub("predictor"), h.out_dim, h.hidden_dim, h.out_dim, true));
        let teacher = cfg.framework.has_teacher().then(|| store.truncated(teacher_len));
        let center = (cfg.framework == Framework::AdaptedDino).then(|| Tensor::zeros([h.out_dim]));
        let model = SslModel {
            backbone_cfg: backbone_cfg.clone(),
            cfg: cfg.clone(),
            backbone,
            head,
            predictor,
            backbone_len,
            teacher_len,
        };
        Ok((
            model,
            SslState {
                student: store,
                teacher,
                center,
                step: 0,
            },
        ))
    }

    /// Backbone followed by the projection head.
    pub fn project(&self, s: &mut Session<'_>, images: Var) -> Var {
        let e = self.backbone.encode(s, images);
        match &self.head {
            Head::Dino(h) => h.forward(s, e),
            Head::Projector(h) => h.forward(s, e),
        }
    }

    /// Parameters of the backbone alone, taken from the teacher when one
    /// exists (the teacher is the network kept after self-distillation).
    pub fn backbone_params(&self, state: &SslState) -> ParamStore {
        state
            .teacher
            .as_ref()
            .unwrap_or(&state.student)
            .truncated(self.backbone_len)
    }

    fn check_views(&self, v1: &Tensor, v2: &Tensor) -> Result<usize> {
        check_images(&self.backbone_cfg, v1)?;
        check_images(&self.backbone_cfg, v2)?;
        if v1.shape() != v2.shape() {
            return Err(Error::Shape(format!("view shapes differ: {:?} vs {:?}", v1.shape(), v2.shape())));
        }
        let b = v1.dim(0);
        if self.cfg.framework.needs_negatives() && b < 2 {
            return Err(Error::Data("batch of at least 2 images required for negatives".into()));
        }
        Ok(b)
    }

    /// One optimization step on the student, then the teacher EMA and the
    /// center update. The state and optimizer are modified only if every
    /// produced value is finite; otherwise an error is returned and both are
    /// left exactly as they were.
    pub fn train_step(
        &self,
        state: &mut SslState,
        opt: &mut Optimizer,
        v1: &Tensor,
        v2: &Tensor,
        lr: f64,
        wd: f64,
    ) -> Result<StepOutput> {
        let b = self.check_views(v1, v2)?;
        let both = Tensor::concat_rows(&[v1, v2])?;
        let framework = self.cfg.framework;

        let teacher_out = match &state.teacher {
            Some(t) => {
                let mut ts = Session::new(t, false);
                let x = ts.g.constant(both.clone());
                let y = self.project(&mut ts, x);
                Some(ts.g.value(y).clone())
            }
            None => None,
        };

        let mut s = Session::new(&state.student, true);
        let x = s.g.constant(both);
        let out = self.project(&mut s, x);
        let o1 = s.g.narrow(out, 0, 0, b);
        let o2 = s.g.narrow(out, 0, b, b);
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("alignment".to_string(), mean_row_cosine(s.g.value(o1), s.g.value(o2)));
        let (mut entropy, mut marginal) = (None, None);

        let loss = match framework {
            Framework::AdaptedDino => {
                let t = teacher_out.as_ref().expect("teacher present");
                let center = state.center.as_ref().expect("center present");
                let tv = s.g.constant(t.clone());
                let t1 = s.g.narrow(tv, 0, 0, b);
                let t2 = s.g.narrow(tv, 0, b, b);
                let c = s.g.constant(center.clone());
                let pt = losses::teacher_probs(&mut s.g, tv, c, self.cfg.dino.tau_teacher);
                entropy = Some(losses::mean_entropy(s.g.value(pt)));
                marginal = Some(losses::marginal_entropy(s.g.value(pt)));
                losses::dino_loss(
                    &mut s.g,
                    [o1, o2],
                    [t1, t2],
                    c,
                    self.cfg.dino.tau_student,
                    self.cfg.dino.tau_teacher,
                )?
            }
            Framework::Simclr => losses::simclr_loss(&mut s.g, out, self.cfg.simclr_temperature)?,
            Framework::Byol | Framework::Simsiam => {
                let pred = self.predictor.as_ref().expect("predictor present");
                let p = pred.forward(&mut s, out);
                let p1 = s.g.narrow(p, 0, 0, b);
                let p2 = s.g.narrow(p, 0, b, b);
                if framework == Framework::Byol {
                    let t = teacher_out.as_ref().expect("target present");
                    let tv = s.g.constant(t.clone());
                    let z1 = s.g.narrow(tv, 0, 0, b);
                    let z2 = s.g.narrow(tv, 0, b, b);
                    losses::byol_loss_symmetric(&mut s.g, [p1, p2], [z1, z2])?
                } else {
                    losses::simsiam_loss_symmetric(&mut s.g, [p1, p2], [o1, o2])?
                }
            }
        };

        let loss_value = s.g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", state.step)));
        }
        let grads = s.g.backward(loss);
        let grads = s.param_grads(&grads);
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
        }
        drop(s);

        let mut student = state.student.clone();
        let mut new_opt = opt.clone();
        new_opt.apply(&mut student, &grads, lr, wd)?;
        if !student.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", state.step)));
        }
        let teacher = match &state.teacher {
            Some(t) => Some(ema_update(t, &student, self.cfg.momentum())?),
            None => None,
        };
        let center = match (&state.center, &teacher_out) {
            (Some(c), Some(t)) => Some(update_center(c, t, self.cfg.dino.center_momentum)?),
            _ => state.center.clone(),
        };

        *opt = new_opt;
        state.student = student;
        state.teacher = teacher;
        state.center = center;
        state.step += 1;
        Ok(StepOutput {
            loss: loss_value,
            teacher_entropy: entropy,
            teacher_marginal_entropy: marginal,
            diagnostics,
        })
    }
}

/// `t' = m · t + (1 − m) · s` for every teacher parameter. The student may
/// hold extra trailing parameters (a predictor) that the teacher lacks.
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, m: f64) -> Result<ParamStore> {
    if teacher.len() > student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    let mut out = teacher.clone();
    for id in teacher.ids() {
        let (tn, sn) = (teacher.name(id), student.name(id));
        let (t, s) = (teacher.get(id), student.get(id));
        if tn != sn || t.shape() != s.shape() {
            return Err(Error::Shape(format!("teacher {tn} {:?} vs student {sn} {:?}", t.shape(), s.shape())));
        }
        for (o, (&tv, &sv)) in out.get_mut(id).data_mut().iter_mut().zip(t.data().iter().zip(s.data())) {
            *o = m * tv + (1.0 - m) * sv;
        }
    }
    Ok(out)
}

fn mean_row_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.dim(1);
    let n = a.dim(0);
    let mut total = 0.0;
    for (x, y) in a.data().chunks(d).zip(b.data().chunks(d)) {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += dot / (nx * ny).max(1e-12);
    }
    total / n as f64
}
