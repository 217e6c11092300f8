//! Experiment runners behind the `ifs-collage` binary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{ArchConfig, Model, MoeConfig, ResNetConfig, Routing, TransformerConfig};
use crate::bound::{self, BoundError, SweepEntry};
use crate::config::{AppendixCSection, AttractorSection, ConfigError, RunConfig, SierpinskiSection};
use crate::geometry::{box_counting_dimension, generate, hausdorff_distance, DatasetSpec, GeometryError, PointCloud};
use crate::ifs::{
    barycentric_map, chain_rng, hutchinson_iterate, lyapunov_exponent_mc, markov_step, sample_attractor, IfsError, MeanMap,
    RandomIfs, StochasticIfs,
};
use crate::nn::NnError;
use crate::ot::OtError;
use crate::plot::{self, Series};
use crate::train::{load_trained, to_state_space, TrainConfig, TrainError, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Numeric,
    Io,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Numeric => 3,
            FailureKind::Io => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: FailureKind,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: FailureKind::Config, message: message.into() }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self { kind: FailureKind::Io, message: format!("{}: {e}", path.display()) }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

fn kind_geometry(e: &GeometryError) -> FailureKind {
    match e {
        GeometryError::Io(_) | GeometryError::Csv(_) => FailureKind::Io,
        _ => FailureKind::Config,
    }
}

fn kind_nn(e: &NnError) -> FailureKind {
    match e {
        NnError::Io { .. } | NnError::Checkpoint(_) => FailureKind::Io,
        NnError::NonFinite { .. } | NnError::StaleCache { .. } => FailureKind::Numeric,
        _ => FailureKind::Config,
    }
}

fn kind_ot(e: &OtError) -> FailureKind {
    match e {
        OtError::Geometry(g) => kind_geometry(g),
        OtError::Numeric(_) | OtError::StaleGradient { .. } => FailureKind::Numeric,
        _ => FailureKind::Config,
    }
}

fn kind_ifs(e: &IfsError) -> FailureKind {
    match e {
        IfsError::Geometry(g) => kind_geometry(g),
        IfsError::Nn(n) => kind_nn(n),
        IfsError::Instability { .. } | IfsError::Certificate(_) => FailureKind::Numeric,
        _ => FailureKind::Config,
    }
}

fn kind_train(e: &TrainError) -> FailureKind {
    match e {
        TrainError::Ifs(i) => kind_ifs(i),
        TrainError::Nn(n) => kind_nn(n),
        TrainError::Ot(o) => kind_ot(o),
        TrainError::Geometry(g) => kind_geometry(g),
        TrainError::NonFinite { .. } => FailureKind::Numeric,
        TrainError::Checkpoint { .. } | TrainError::Io { .. } => FailureKind::Io,
        TrainError::Config(_) | TrainError::Uncertified(_) => FailureKind::Config,
    }
}

fn kind_bound(e: &BoundError) -> FailureKind {
    match e {
        BoundError::Ifs(i) => kind_ifs(i),
        BoundError::Ot(o) => kind_ot(o),
        BoundError::Train(t) => kind_train(t),
        BoundError::Config(_) | BoundError::Uncertified => FailureKind::Config,
    }
}

impl From<&BoundError> for CliError {
    fn from(e: &BoundError) -> Self {
        Self { kind: kind_bound(e), message: e.to_string() }
    }
}

macro_rules! from_error {
    ($t:ty, $f:ident) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self { kind: $f(&e), message: e.to_string() }
            }
        }
    };
}

from_error!(GeometryError, kind_geometry);
from_error!(NnError, kind_nn);
from_error!(OtError, kind_ot);
from_error!(IfsError, kind_ifs);
from_error!(TrainError, kind_train);
from_error!(BoundError, kind_bound);

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let kind = match e {
            ConfigError::Io { .. } => FailureKind::Io,
            ConfigError::Parse { .. } => FailureKind::Config,
        };
        Self { kind, message: e.to_string() }
    }
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Globals {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub plot: bool,
    pub config: RunConfig,
}

impl Globals {
    pub fn new(out: PathBuf, seed: Option<u64>, plot: bool, config: RunConfig) -> Self {
        let plot = plot || config.output.as_ref().is_some_and(|o| o.plot);
        Self { out, seed, plot, config }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    fn write(&self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<PathBuf> {
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| CliError::io(&p, e))?;
        let mut w = BufWriter::new(f);
        body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    fn write_cloud(&self, name: &str, cloud: &PointCloud) -> Result<PathBuf> {
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| CliError::io(&p, e))?;
        let mut w = BufWriter::new(f);
        cloud.write_csv(&mut w).map_err(|e| CliError::io(&p, e))?;
        w.flush().map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    fn write_svg(&self, name: &str, svg: &str) -> Result<Option<PathBuf>> {
        if !self.plot {
            return Ok(None);
        }
        let p = self.path(name);
        std::fs::write(&p, svg).map_err(|e| CliError::io(&p, e))?;
        Ok(Some(p))
    }
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    PointCloud::read_csv(BufReader::new(f)).map_err(|e| CliError::io(path, e))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SierpinskiSummary {
    pub files: Vec<PathBuf>,
    /// `d_H(T_iters, chaos cloud)`.
    pub hausdorff: f64,
    pub box_dimension: f64,
}

/// Hutchinson iterates `T_0 .. T_iters` of the gasket from `T_0 = {0}` and a
/// chaos-game cloud.
pub fn cmd_sierpinski(g: &Globals, iters_override: Option<usize>) -> Result<SierpinskiSummary> {
    let mut sec = g.config.sierpinski.clone().unwrap_or_default();
    if let Some(n) = iters_override {
        sec.iters = n;
    }
    run_sierpinski(g, &sec)
}

fn run_sierpinski(g: &Globals, sec: &SierpinskiSection) -> Result<SierpinskiSummary> {
    g.prepare()?;
    let ifs = StochasticIfs::sierpinski();
    let cap = 3usize.pow(sec.iters as u32).max(1);
    let mut t = PointCloud::new(2, vec![0.0, 0.0])?;
    let mut files = vec![g.write_cloud("hutchinson_T0.csv", &t)?];
    for k in 1..=sec.iters {
        t = hutchinson_iterate(&ifs, &t, 1, cap, g.seed())?;
        files.push(g.write_cloud(&format!("hutchinson_T{k}.csv"), &t)?);
    }
    if sec.iters == 0 {
        return Ok(SierpinskiSummary { files, hausdorff: f64::NAN, box_dimension: f64::NAN });
    }
    let chaos = sample_attractor(&ifs, sec.chaos_points, sec.burn_in, g.seed(), false)?;
    files.push(g.write_cloud("chaos_game.csv", &chaos)?);
    let hausdorff = hausdorff_distance(&t, &chaos)?;
    let box_dimension = box_counting_dimension(&chaos, 3..=7);
    if let Some(p) = g.write_svg(
        "sierpinski.svg",
        &plot::scatter(
            &[Series::from_coords("chaos game", chaos.coords(), 2), Series::from_coords("Hutchinson", t.coords(), 2)],
            "Sierpinski gasket",
        ),
    )? {
        files.push(p);
    }
    Ok(SierpinskiSummary { files, hausdorff, box_dimension })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Moe,
    Resnet,
    Transformer,
}

/// Command-line overrides of the training run.
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub arch: Option<ArchKind>,
    pub cap: Option<f64>,
    pub routing: Option<Routing>,
    pub sigma: Option<f64>,
    pub embed: Option<usize>,
    pub epochs: Option<usize>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub files: Vec<PathBuf>,
    pub model: Model,
    pub first_loss: f64,
    pub final_loss: f64,
    pub data_spread: f64,
    pub attractor_spread: f64,
    pub attractor: PointCloud,
}

fn data_spec(g: &Globals) -> DatasetSpec {
    g.config.dataset.clone().unwrap_or_else(|| DatasetSpec::two_moons(2048, g.seed()))
}

/// Architecture and training settings after applying config and overrides.
pub fn resolve_training(g: &Globals, o: &TrainOverrides) -> Result<(ArchConfig, TrainConfig)> {
    let kind = o.arch.unwrap_or(match &g.config.architecture {
        Some(ArchConfig::Resnet(_)) => ArchKind::Resnet,
        Some(ArchConfig::Transformer(_)) => ArchKind::Transformer,
        _ => ArchKind::Moe,
    });
    let mut train = g.config.train.clone().unwrap_or_else(|| match kind {
        ArchKind::Moe => TrainConfig::default(),
        ArchKind::Resnet | ArchKind::Transformer => TrainConfig {
            contraction_cap: None,
            allow_uncertified: true,
            sigma: 0.0,
            routing: Routing::Dense,
            ..TrainConfig::default()
        },
    });
    if let Some(s) = g.seed {
        train.seed = s;
    }
    if let Some(c) = o.cap {
        train.contraction_cap = Some(c);
    }
    if let Some(r) = o.routing {
        train.routing = r;
    }
    if let Some(s) = o.sigma {
        train.sigma = s;
    }
    if let Some(e) = o.epochs {
        train.epochs = e;
    }
    let from_config = g.config.architecture.clone().filter(|a| {
        matches!(
            (a, kind),
            (ArchConfig::Moe(_), ArchKind::Moe)
                | (ArchConfig::Resnet(_), ArchKind::Resnet)
                | (ArchConfig::Transformer(_), ArchKind::Transformer)
        )
    });
    let mut arch = from_config.unwrap_or_else(|| match kind {
        ArchKind::Moe => ArchConfig::Moe(MoeConfig::two_moons(train.contraction_cap.unwrap_or(0.9), train.sigma)),
        ArchKind::Resnet => ArchConfig::Resnet(ResNetConfig::two_moons()),
        ArchKind::Transformer => ArchConfig::Transformer(TransformerConfig::two_moons(10)),
    });
    match &mut arch {
        ArchConfig::Moe(m) => m.cap = train.contraction_cap.or(m.cap),
        ArchConfig::Resnet(r) => r.cap = train.contraction_cap.or(r.cap),
        ArchConfig::Transformer(t) => {
            if train.contraction_cap.is_some() {
                return Err(CliError::config("the transformer block has no contraction cap"));
            }
            if let Some(e) = o.embed {
                t.embed = e;
            }
        }
    }
    match &arch {
        ArchConfig::Moe(m) if train.contraction_cap.is_none() => train.contraction_cap = m.cap,
        ArchConfig::Resnet(_) | ArchConfig::Transformer(_) if train.contraction_cap.is_none() => {
            train.allow_uncertified = true
        }
        _ => {}
    }
    if o.embed.is_some() && kind != ArchKind::Transformer {
        return Err(CliError::config("--embed only applies to the transformer"));
    }
    arch.set_noise_sigma(train.sigma);
    train.validate()?;
    Ok((arch, train))
}

/// Attractor samples of the chain the model was trained as: dense routing
/// iterates the mean map.
pub fn attractor_of(
    model: &Model,
    routing: Routing,
    n: usize,
    burn_in: usize,
    seed: u64,
    allow_uncertified: bool,
) -> Result<PointCloud> {
    Ok(match routing {
        Routing::Dense => sample_attractor(&MeanMap(model), n, burn_in, seed, allow_uncertified)?,
        Routing::Sampled => sample_attractor(model, n, burn_in, seed, allow_uncertified)?,
    })
}

/// Token-space view of a state-space cloud.
fn to_data_space(cloud: &PointCloud, data_dim: usize) -> Result<PointCloud> {
    Ok(PointCloud::new(cloud.dim(), cloud.coords().to_vec())?.reshape(data_dim)?)
}

pub fn cmd_two_moons_train(g: &Globals, o: &TrainOverrides) -> Result<TrainSummary> {
    let (arch, train) = resolve_training(g, o)?;
    g.prepare()?;
    let data = generate(&data_spec(g))?;
    let model = arch.build(&mut ChaCha8Rng::seed_from_u64(train.seed))?;
    let state = to_state_space(&data, model.dim())?;
    let ckpt = g.path("model.ckpt");
    let mut t = Trainer::new(model, train.clone())?.with_abort_checkpoint(&ckpt);
    t.run(&state)?;
    t.save_checkpoint(&ckpt)?;
    let mut files = crate::train::checkpoint_files(&ckpt).to_vec();
    let report = t.report().clone();
    files.push(g.write("collage.csv", |w| report.write_csv(w))?);

    let (model, _) = t.into_parts();
    let sec = g.config.attractor.clone().unwrap_or_default();
    let states = sec.count.div_ceil(model.dim() / data.dim());
    let att = attractor_of(&model, train.routing, states, sec.burn_in, train.seed, train.allow_uncertified)?;
    let att = to_data_space(&att, data.dim())?;
    files.push(g.write_cloud("attractor.csv", &att)?);

    let epochs: Vec<f64> = report.rows.iter().map(|r| r.epoch as f64).collect();
    let losses: Vec<f64> = report.rows.iter().map(|r| r.loss).collect();
    files.extend(g.write_svg(
        "loss.svg",
        &plot::lines(&[Series::new("collage loss", epochs.into_iter().zip(losses))], "Training collage error", "epoch", "loss"),
    )?);
    files.extend(g.write_svg(
        "attractor.svg",
        &plot::scatter(
            &[Series::from_coords("data", data.coords(), data.dim()), Series::from_coords("attractor", att.coords(), att.dim())],
            "Data and attractor samples",
        ),
    )?);
    let first_loss = report.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let final_loss = report.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(TrainSummary {
        files,
        model,
        first_loss,
        final_loss,
        data_spread: data.spread(1024),
        attractor_spread: att.spread(1024),
        attractor: att,
    })
}

// ---------------------------------------------------------------------------

pub struct SweepSummary {
    pub files: Vec<PathBuf>,
    pub entries: Vec<SweepEntry>,
}

pub fn cmd_bound_sweep(g: &Globals, caps: Option<Vec<f64>>, o: &TrainOverrides) -> Result<SweepSummary> {
    let caps = caps.unwrap_or_else(|| g.config.sweep.clone().unwrap_or_default().caps);
    if caps.is_empty() {
        return Err(CliError::config("no caps to sweep"));
    }
    if o.arch.is_some_and(|a| a != ArchKind::Moe) {
        return Err(CliError::config("the bound sweep trains mixtures of experts"));
    }
    let (arch, train) = resolve_training(g, &TrainOverrides { arch: Some(ArchKind::Moe), ..o.clone() })?;
    let ArchConfig::Moe(moe) = arch else { unreachable!("mixture requested") };
    let mut bcfg = g.config.bound.clone().unwrap_or_default();
    if let Some(s) = g.seed {
        bcfg.seed = s;
    }
    bcfg.validate()?;
    g.prepare()?;
    let data = generate(&data_spec(g))?;
    let reference = generate(&g.config.reference.clone().unwrap_or_else(|| DatasetSpec::two_moons(50_000, 1_000_003)))?;
    let entries = bound::sweep_contraction(&data, &reference, &caps, &moe, &train, &bcfg);
    let mut files = vec![g.write("bound.csv", |w| bound::write_csv(&entries, w))?];
    let ok: Vec<_> = entries.iter().filter_map(|e| e.report.as_ref().ok().map(|r| (e.cap, r))).collect();
    files.extend(g.write_svg(
        "bound.svg",
        &plot::lines(
            &[
                Series::new("generalization estimate", ok.iter().map(|(c, r)| (*c, r.generalization_estimate))),
                Series::new("bound", ok.iter().map(|(c, r)| (*c, r.bound_value))),
            ],
            "Generalization error and bound",
            "contraction cap",
            "W2",
        ),
    )?);
    Ok(SweepSummary { files, entries })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AppendixCRow {
    pub p: f64,
    pub lyapunov: f64,
    pub lyapunov_exact: f64,
    pub slope: f64,
    pub stochastic: Vec<f64>,
    pub deterministic: Vec<f64>,
}

/// The halve-or-double system for each `p`: Lyapunov exponent, slope of the
/// mean map, and both trajectories from `x0 = 1`.
pub fn appendix_c(sec: &AppendixCSection, seed: u64) -> Result<Vec<AppendixCRow>> {
    sec.p
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ifs = StochasticIfs::halve_or_double(p)?;
            let lyapunov = lyapunov_exponent_mc(&ifs, sec.lyapunov_steps, &mut chain_rng(seed, 2 * i as u64))?;
            let slope = barycentric_map(&ifs, &[1.0])?[0].abs();
            let mut rng = chain_rng(seed, 2 * i as u64 + 1);
            let (mut s, mut d) = (vec![1.0], vec![1.0]);
            for _ in 0..sec.steps {
                let last = *s.last().expect("non-empty");
                s.push(markov_step(&ifs, &[last], &mut rng)?.0[0]);
                let last = *d.last().expect("non-empty");
                d.push(barycentric_map(&ifs, &[last])?[0]);
            }
            Ok(AppendixCRow {
                p,
                lyapunov,
                lyapunov_exact: (1.0 - 2.0 * p) * std::f64::consts::LN_2,
                slope,
                stochastic: s,
                deterministic: d,
            })
        })
        .collect()
}

pub fn cmd_appendix_c(g: &Globals, ps: Option<Vec<f64>>) -> Result<(Vec<PathBuf>, Vec<AppendixCRow>)> {
    let mut sec = g.config.appendix_c.clone().unwrap_or_default();
    if let Some(ps) = ps {
        sec.p = ps;
    }
    let rows = appendix_c(&sec, g.seed())?;
    g.prepare()?;
    let mut files = vec![g.write("appendix_c.csv", |w| {
        writeln!(w, "p,lyapunov,lyapunov_exact,slope,stochastic_final,deterministic_final")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.p,
                r.lyapunov,
                r.lyapunov_exact,
                r.slope,
                r.stochastic.last().expect("non-empty"),
                r.deterministic.last().expect("non-empty")
            )?;
        }
        Ok(())
    })?];
    files.push(g.write("trajectories.csv", |w| {
        writeln!(w, "p,step,stochastic,deterministic")?;
        for r in &rows {
            for (k, (s, d)) in r.stochastic.iter().zip(&r.deterministic).enumerate() {
                writeln!(w, "{},{k},{s},{d}", r.p)?;
            }
        }
        Ok(())
    })?);
    let names: Vec<String> =
        rows.iter().flat_map(|r| [format!("stochastic p={}", r.p), format!("mean map p={}", r.p)]).collect();
    let series: Vec<Series> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            let log = |v: &Vec<f64>| v.iter().enumerate().map(|(k, x)| (k as f64, x.abs().log10())).collect::<Vec<_>>();
            [Series::new(&names[2 * i], log(&r.stochastic)), Series::new(&names[2 * i + 1], log(&r.deterministic))]
        })
        .collect();
    files.extend(g.write_svg("appendix_c.svg", &plot::lines(&series, "Trajectories from x0 = 1", "step", "log10 |x|"))?);
    Ok((files, rows))
}

// ---------------------------------------------------------------------------

/// Samples the attractor of a checkpointed model.
pub fn cmd_attractor(
    g: &Globals,
    checkpoint: Option<PathBuf>,
    count: Option<usize>,
    burn_in: Option<usize>,
) -> Result<(Vec<PathBuf>, PointCloud)> {
    let mut sec: AttractorSection = g.config.attractor.clone().unwrap_or_default();
    sec.checkpoint = checkpoint.or(sec.checkpoint);
    sec.count = count.unwrap_or(sec.count);
    sec.burn_in = burn_in.unwrap_or(sec.burn_in);
    let path = sec.checkpoint.clone().ok_or_else(|| CliError::config("no checkpoint given"))?;
    if sec.count == 0 {
        return Err(CliError::config("count must be >= 1"));
    }
    let (model, train) = load_trained(&path)?;
    let token_dim = match model.config() {
        ArchConfig::Transformer(t) => t.token_dim,
        _ => model.dim(),
    };
    let uncertified = match train.routing {
        Routing::Dense => MeanMap(&model).uniform_contraction(),
        Routing::Sampled => model.uniform_contraction(),
    }
    .map_or(true, |c| c >= 1.0);
    let att = attractor_of(&model, train.routing, sec.count, sec.burn_in, g.seed(), uncertified)?;
    let att = to_data_space(&att, token_dim)?;
    g.prepare()?;
    let mut files = vec![g.write_cloud("attractor.csv", &att)?];
    files.extend(g.write_svg("attractor.svg", &plot::scatter(&[Series::from_coords("attractor", att.coords(), att.dim())], "Attractor"))?);
    Ok((files, att))
}
