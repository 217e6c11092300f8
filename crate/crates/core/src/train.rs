//! Minimising the stochastic collage objective `S_eps(T*_theta mu_n, mu_n)`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{gumbel, ArchConfig, GradEstimator, Model, Routing, Selection};
use crate::geometry::{GeometryError, PointCloud};
use crate::ifs::{IfsError, RandomIfs};
use crate::nn::{layout_path, AdamState, NnError, PowerState};
use crate::ot::{sinkhorn_state, OtError, SinkhornConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Ifs(#[from] IfsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("branches are not certified contractive (sup sum p c^2 = {0:.4}); set allow_uncertified to train anyway")]
    Uncertified(f64),
    #[error("non-finite {what} at epoch {epoch}, step {step}{}", checkpoint.as_ref().map(|p| format!("; last good state saved to {}", p.display())).unwrap_or_default())]
    NonFinite { what: &'static str, epoch: usize, step: usize, checkpoint: Option<PathBuf> },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub blur: f64,
    pub sigma: f64,
    #[serde(default)]
    pub contraction_cap: Option<f64>,
    pub seed: u64,
    #[serde(default = "sampled")]
    pub routing: Routing,
    #[serde(default = "pathwise")]
    pub grad_estimator: GradEstimator,
    #[serde(default = "one")]
    pub mc_draws: usize,
    /// Iteration cap of the Sinkhorn solves inside the loss.
    #[serde(default = "default_sinkhorn_iters")]
    pub sinkhorn_iters: usize,
    #[serde(default = "default_sinkhorn_tol")]
    pub sinkhorn_tol: f64,
    /// Power iterations per spectral-normalisation step.
    #[serde(default = "one")]
    pub power_iters: usize,
    #[serde(default)]
    pub allow_uncertified: bool,
    /// Linear cap warm-up from `warmup_cap` to `contraction_cap`; off at 0.
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "default_warmup_cap")]
    pub warmup_cap: f64,
}

fn sampled() -> Routing {
    Routing::Sampled
}
fn pathwise() -> GradEstimator {
    GradEstimator::PathwiseSelected
}
fn one() -> usize {
    1
}
fn default_sinkhorn_iters() -> usize {
    50
}
fn default_sinkhorn_tol() -> f64 {
    1e-3
}
fn default_warmup_cap() -> f64 {
    10.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 256,
            lr: 1e-3,
            blur: 0.05,
            sigma: 0.04,
            contraction_cap: Some(0.9),
            seed: 0,
            routing: Routing::Sampled,
            grad_estimator: GradEstimator::PathwiseSelected,
            mc_draws: 1,
            sinkhorn_iters: default_sinkhorn_iters(),
            sinkhorn_tol: default_sinkhorn_tol(),
            power_iters: 1,
            allow_uncertified: false,
            warmup_epochs: 0,
            warmup_cap: default_warmup_cap(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if let Some(c) = self.contraction_cap {
            if !(c > 0.0 && c < 1.0) {
                return bad(format!("contraction_cap must be in (0, 1), got {c}"));
            }
        }
        if self.mc_draws == 0 || self.power_iters == 0 {
            return bad("mc_draws and power_iters must be >= 1".into());
        }
        if self.warmup_epochs > 0 && !(self.warmup_cap > 0.0) {
            return bad(format!("warmup_cap must be > 0, got {}", self.warmup_cap));
        }
        self.sinkhorn().validate()?;
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            blur: self.blur,
            max_iters: self.sinkhorn_iters,
            tol: self.sinkhorn_tol,
            ..SinkhornConfig::default()
        }
    }

    /// Cap in force during `epoch` (1-based), if any.
    pub fn cap_at(&self, epoch: usize) -> Option<f64> {
        let c = self.contraction_cap?;
        if self.warmup_epochs == 0 || epoch > self.warmup_epochs {
            return Some(c);
        }
        let t = (epoch - 1) as f64 / self.warmup_epochs as f64;
        Some(self.warmup_cap + (c - self.warmup_cap) * t)
    }
}

/// Random numbers of one transfer-step sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    pub gumbel: Vec<f64>,
    pub noise: Vec<f64>,
}

impl StepDraws {
    pub fn sample(model: &Model, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let gumbel = (0..n * model.gumbel_per_state()).map(|_| gumbel(rng)).collect();
        let noise = (0..n * model.dim()).map(|_| StandardNormal.sample(rng)).collect();
        Self { gumbel, noise }
    }
}

/// One evaluation of the collage loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    /// Debiased Sinkhorn divergence (squared-distance scale), averaged over draws.
    pub loss: f64,
    /// Raw entropic cost, averaged over draws.
    pub raw: f64,
    /// False when any Sinkhorn solve hit its iteration cap.
    pub converged: bool,
}

/// `S_eps(Y, batch)` with `Y` one transfer step of `batch` under `draws`;
/// parameter gradients are accumulated into the model's tape (zeroed first).
pub fn collage_loss_with(model: &mut Model, batch: &PointCloud, cfg: &TrainConfig, draws: &[StepDraws]) -> Result<LossEval> {
    if batch.dim() != model.dim() {
        return Err(IfsError::Dim { expected: model.dim(), found: batch.dim() }.into());
    }
    if !batch.is_uniform() {
        return Err(TrainError::Config("training batches must carry uniform weights".into()));
    }
    let n = batch.len();
    let sk = cfg.sinkhorn();
    model.tape_mut().zero_grads();
    let scale = 1.0 / draws.len() as f64;
    let mut out = LossEval { loss: 0.0, raw: 0.0, converged: true };
    for d in draws {
        let sel = Selection::from_routing(cfg.routing, cfg.grad_estimator, &d.gumbel);
        let (mut y, cache) = model.forward_step(batch.coords(), n, sel)?;
        if cfg.sigma > 0.0 {
            y.iter_mut().zip(&d.noise).for_each(|(y, g)| *y += cfg.sigma * g);
        }
        let yc = batch.with_coords(y)?;
        let state = sinkhorn_state(&yc, batch, &sk)?;
        let mut grad = state.gradient(&yc, batch);
        grad.iter_mut().for_each(|g| *g *= scale);
        model.backward_step(&cache, &grad)?;
        out.loss += scale * state.result.cost;
        out.raw += scale * state.result.raw_cost;
        out.converged &= state.result.converged;
    }
    Ok(out)
}

/// [`collage_loss_with`] on fresh draws from `rng`.
pub fn collage_loss(model: &mut Model, batch: &PointCloud, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<LossEval> {
    let draws: Vec<StepDraws> = (0..cfg.mc_draws).map(|_| StepDraws::sample(model, batch.len(), rng)).collect();
    collage_loss_with(model, batch, cfg, &draws)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub w2_estimate: f64,
    /// NaN when the model carries no certificate.
    #[serde(with = "non_finite_as_null")]
    pub sup_c: f64,
    pub wallclock_ms: u64,
    /// Batches whose Sinkhorn solves hit the iteration cap.
    pub unconverged: usize,
}

// JSON has no encoding for NaN or infinities.
mod non_finite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollageReport {
    pub routing: Option<Routing>,
    pub grad_estimator: Option<GradEstimator>,
    pub rows: Vec<EpochRow>,
}

impl CollageReport {
    pub const CSV_HEADER: &'static str = "epoch,loss,w2_estimate,sup_c,wallclock_ms";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.loss, r.w2_estimate, r.sup_c, r.wallclock_ms)?;
        }
        Ok(())
    }

    pub fn first(&self) -> Option<&EpochRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    epoch: usize,
    arch: ArchConfig,
    train: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    power: Vec<Vec<PowerState>>,
    report: CollageReport,
}

/// Owns a model, its optimiser and RNG stream for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
    report: CollageReport,
    abort_checkpoint: Option<PathBuf>,
}

pub fn state_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

impl Trainer {
    pub fn new(mut model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.set_noise_sigma(cfg.sigma);
        if let Some(c) = cfg.cap_at(1) {
            model.set_cap(c)?;
            model.normalize(5)?;
        }
        if !cfg.allow_uncertified {
            match model.uniform_contraction() {
                Some(c) if c < 1.0 => {}
                other => return Err(TrainError::Uncertified(other.unwrap_or(f64::INFINITY))),
            }
        }
        let adam = AdamState::new(model.param_count(), cfg.lr);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let report = CollageReport { routing: Some(cfg.routing), grad_estimator: Some(cfg.grad_estimator), rows: Vec::new() };
        Ok(Self { model, cfg, adam, rng, epoch: 0, report, abort_checkpoint: None })
    }

    /// Where the last good state is written if training hits a non-finite value.
    pub fn with_abort_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.abort_checkpoint = Some(path.into());
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_parts(self) -> (Model, CollageReport) {
        (self.model, self.report)
    }

    pub fn report(&self) -> &CollageReport {
        &self.report
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One pass over shuffled batches of `data`.
    pub fn run_epoch(&mut self, data: &PointCloud) -> Result<&EpochRow> {
        if data.len() < 2 {
            return Err(TrainError::Config("need at least two training points".into()));
        }
        let start = Instant::now();
        let epoch = self.epoch + 1;
        if self.cfg.warmup_epochs > 0 {
            if let Some(c) = self.cfg.cap_at(epoch) {
                self.model.set_cap(c)?;
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut unconverged = 0;
        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.select(chunk);
            let batch = PointCloud::new(batch.dim(), batch.coords().to_vec())?;
            let good = self.model.tape().values().to_vec();
            let eval = collage_loss(&mut self.model, &batch, &self.cfg, &mut self.rng)?;
            let what = if !eval.loss.is_finite() {
                Some("loss")
            } else if self.model.tape().grads().iter().any(|g| !g.is_finite()) {
                Some("gradient")
            } else {
                None
            };
            if let Some(what) = what {
                return Err(self.abort(what, epoch, step, &good));
            }
            self.adam.step(self.model.tape_mut())?;
            self.model.normalize(self.cfg.power_iters)?;
            if self.model.tape().values().iter().any(|v| !v.is_finite()) {
                return Err(self.abort("parameter", epoch, step, &good));
            }
            total += eval.loss * chunk.len() as f64;
            count += chunk.len();
            unconverged += usize::from(!eval.converged);
        }
        let loss = total / count as f64;
        let prev = self.report.rows.last().map(|r| r.wallclock_ms).unwrap_or(0);
        let row = EpochRow {
            epoch,
            loss,
            w2_estimate: loss.max(0.0).sqrt(),
            sup_c: self.model.uniform_contraction().unwrap_or(f64::NAN),
            wallclock_ms: prev + start.elapsed().as_millis() as u64,
            unconverged,
        };
        self.epoch = epoch;
        self.report.rows.push(row);
        Ok(self.report.rows.last().expect("row just pushed"))
    }

    fn abort(&mut self, what: &'static str, epoch: usize, step: usize, good: &[f64]) -> TrainError {
        let restored = self.model.tape_mut().set_values(good);
        let checkpoint = match (&self.abort_checkpoint, restored) {
            (Some(p), Ok(())) => self.save_checkpoint(p).ok().map(|_| p.clone()),
            _ => None,
        };
        TrainError::NonFinite { what, epoch, step, checkpoint }
    }

    /// Runs epochs until `cfg.epochs` are done.
    pub fn run(&mut self, data: &PointCloud) -> Result<()> {
        self.run_until(data, self.cfg.epochs)
    }

    pub fn run_until(&mut self, data: &PointCloud, epochs: usize) -> Result<()> {
        while self.epoch < epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    /// Writes parameters (`path`, plus its layout JSON) and the trainer
    /// state (`path.state.json`).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.model.tape().save(path)?;
        let state = TrainerState {
            epoch: self.epoch,
            arch: self.model.config(),
            train: self.cfg.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            power: self.model.power_states(),
            report: self.report.clone(),
        };
        let sp = state_path(path);
        let json = serde_json::to_string(&state).expect("trainer state serialises");
        std::fs::write(&sp, json).map_err(|source| TrainError::Io { path: sp, source })
    }

    /// Rebuilds a trainer from a checkpoint. `arch` describes the model the
    /// caller expects; a checkpoint with a different parameter layout is
    /// refused with the differing slots.
    pub fn resume(path: &Path, arch: &ArchConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let sp = state_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|source| TrainError::Io { path: sp.clone(), source })?;
        let state: TrainerState =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint { path: sp.clone(), msg: e.to_string() })?;
        let mut model = arch.build(&mut ChaCha8Rng::seed_from_u64(0))?;
        model.tape_mut().load(path)?;
        model.set_power_states(state.power)?;
        model.set_noise_sigma(cfg.sigma);
        if let Some(c) = cfg.cap_at(state.epoch + 1) {
            model.set_cap(c)?;
        }
        if state.adam.m.len() != model.param_count() {
            return Err(TrainError::Checkpoint { path: sp, msg: "optimiser state size differs from the parameters".into() });
        }
        let mut adam = state.adam;
        adam.lr = cfg.lr;
        Ok(Self { model, cfg, adam, rng: state.rng, epoch: state.epoch, report: state.report, abort_checkpoint: None })
    }
}

/// Loads a trained model (parameters plus power-iteration state) from a
/// checkpoint written by [`Trainer::save_checkpoint`].
pub fn load_model(path: &Path) -> Result<Model> {
    load_trained(path).map(|(m, _)| m)
}

/// [`load_model`] plus the training configuration stored with it.
pub fn load_trained(path: &Path) -> Result<(Model, TrainConfig)> {
    let sp = state_path(path);
    let text = std::fs::read_to_string(&sp).map_err(|source| TrainError::Io { path: sp.clone(), source })?;
    let state: TrainerState =
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint { path: sp.clone(), msg: e.to_string() })?;
    let mut model = state.arch.build(&mut ChaCha8Rng::seed_from_u64(0))?;
    model.tape_mut().load(path)?;
    model.set_power_states(state.power)?;
    model.set_noise_sigma(state.train.sigma);
    Ok((model, state.train))
}

/// Checkpoint files written for `path`.
pub fn checkpoint_files(path: &Path) -> [PathBuf; 3] {
    [path.to_path_buf(), layout_path(path), state_path(path)]
}

/// Packs consecutive points into contexts of `state_dim / data.dim()`
/// tokens; a trailing incomplete context is dropped.
pub fn to_state_space(data: &PointCloud, state_dim: usize) -> Result<PointCloud> {
    let d = data.dim();
    if state_dim == d {
        return Ok(data.clone());
    }
    if state_dim % d != 0 {
        return Err(TrainError::Config(format!("state dimension {state_dim} is not a multiple of data dimension {d}")));
    }
    let per = state_dim / d;
    let keep = data.len() / per * per;
    let idx: Vec<usize> = (0..keep).collect();
    Ok(PointCloud::new(d, data.select(&idx).coords().to_vec())?.reshape(state_dim)?)
}

/// Trains a fresh copy of `model` for `cfg.epochs`.
pub fn train(model: Model, data: &PointCloud, cfg: &TrainConfig) -> Result<(Model, CollageReport)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.run(data)?;
    Ok(t.into_parts())
}
