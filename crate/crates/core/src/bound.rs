//! Monte-Carlo estimates of the terms of the generalisation bound
//! `W2(mu_theta, mu) <= eps(n, theta) / (1 - c_theta) + W2(mu, mu_n)`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchConfig, Model, MoeConfig};
use crate::geometry::PointCloud;
use crate::ifs::{chain_rng, sample_attractor, transfer_step, IfsError, RandomIfs};
use crate::ot::{exact_w2, sinkhorn_divergence, OtError, SinkhornConfig};
use crate::train::{TrainConfig, TrainError, Trainer};

/// Both clouds at most this large: exact W2 instead of Sinkhorn.
pub const EXACT_LIMIT: usize = 256;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error(transparent)]
    Ifs(#[from] IfsError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("invalid bound config: {0}")]
    Config(String),
    #[error("model carries no certified contraction constant")]
    Uncertified,
}

pub type Result<T> = std::result::Result<T, BoundError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub mc_batches: usize,
    pub mc_batch_size: usize,
    pub burn_in: usize,
    pub blur: f64,
    #[serde(default = "default_iters")]
    pub sinkhorn_iters: usize,
    #[serde(default = "default_tol")]
    pub sinkhorn_tol: f64,
    #[serde(default = "default_anneal")]
    pub anneal_iters: usize,
    pub seed: u64,
}

fn default_iters() -> usize {
    300
}
fn default_anneal() -> usize {
    10
}
fn default_tol() -> f64 {
    1e-4
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            mc_batches: 8,
            mc_batch_size: 512,
            burn_in: 100,
            blur: 0.05,
            sinkhorn_iters: default_iters(),
            sinkhorn_tol: default_tol(),
            anneal_iters: default_anneal(),
            seed: 0,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_batches == 0 || self.mc_batch_size < 2 {
            return Err(BoundError::Config("need mc_batches >= 1 and mc_batch_size >= 2".into()));
        }
        self.sinkhorn().validate()?;
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            blur: self.blur,
            max_iters: self.sinkhorn_iters,
            tol: self.sinkhorn_tol,
            anneal_iters: self.anneal_iters,
            ..SinkhornConfig::default()
        }
    }
}

/// Mean and standard error of a Monte-Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, samples: n }
    }
}

/// Distance-scale discrepancy: exact W2 for small equal-size uniform
/// clouds, debiased Sinkhorn otherwise.
pub fn w2_distance(a: &PointCloud, b: &PointCloud, cfg: &SinkhornConfig) -> Result<f64> {
    if a.len() <= EXACT_LIMIT && b.len() <= EXACT_LIMIT && a.len() == b.len() && a.is_uniform() && b.is_uniform() {
        return Ok(exact_w2(a, b)?.value);
    }
    Ok(sinkhorn_divergence(a, b, cfg)?.value)
}

fn matched(n: usize, cfg: &BoundConfig) -> usize {
    cfg.mc_batch_size.min(n)
}

/// `W2(T* mu_n, mu_n)` averaged over `mc_batches` draws, each on a
/// `mc_batch_size` subsample of the training cloud and its transfer image.
pub fn estimate_collage_error<I: RandomIfs + ?Sized>(ifs: &I, train: &PointCloud, cfg: &BoundConfig) -> Result<Estimate> {
    cfg.validate()?;
    let sk = cfg.sinkhorn();
    let m = matched(train.len(), cfg);
    let v = (0..cfg.mc_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = chain_rng(cfg.seed, b as u64);
            let sub = if m < train.len() { train.subsample(m, &mut rng) } else { train.clone() };
            let sub = uniform(&sub);
            let img = transfer_step(ifs, &sub, &mut rng)?;
            w2_distance(&img, &sub, &sk)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&v))
}

fn uniform(c: &PointCloud) -> PointCloud {
    PointCloud::new(c.dim(), c.coords().to_vec()).expect("coordinates already validated")
}

/// Attractor sample (`mc_batches * mc_batch_size` chains after `burn_in`
/// steps) against matched reference subsamples.
pub fn estimate_generalization<I: RandomIfs + ?Sized>(
    ifs: &I,
    reference: &PointCloud,
    cfg: &BoundConfig,
    allow_uncertified: bool,
) -> Result<(Estimate, PointCloud)> {
    cfg.validate()?;
    let total = cfg.mc_batches * cfg.mc_batch_size;
    let attractor = sample_attractor(ifs, total, cfg.burn_in, cfg.seed, allow_uncertified)?;
    let est = generalization_from_sample(&attractor, reference, cfg)?;
    Ok((est, attractor))
}

/// Splits `attractor` into `mc_batches` chunks and compares each with a
/// same-size reference subsample.
pub fn generalization_from_sample(attractor: &PointCloud, reference: &PointCloud, cfg: &BoundConfig) -> Result<Estimate> {
    let sk = cfg.sinkhorn();
    let per = attractor.len() / cfg.mc_batches;
    if per < 2 {
        return Err(BoundError::Config("attractor sample too small for the batch count".into()));
    }
    let m = per.min(reference.len());
    let v = (0..cfg.mc_batches)
        .into_par_iter()
        .map(|b| {
            let idx: Vec<usize> = (b * per..b * per + m).collect();
            let chunk = attractor.select(&idx);
            let mut rng = chain_rng(cfg.seed ^ 0x5eed_0001, b as u64);
            let r = uniform(&reference.subsample(m, &mut rng));
            w2_distance(&chunk, &r, &sk)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&v))
}

/// `W2(mu, mu_n)` from matched subsamples of the training and reference clouds.
pub fn estimate_statistical_term(train: &PointCloud, reference: &PointCloud, cfg: &BoundConfig) -> Result<Estimate> {
    cfg.validate()?;
    let sk = cfg.sinkhorn();
    let m = matched(train.len(), cfg).min(reference.len());
    let v = (0..cfg.mc_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = chain_rng(cfg.seed ^ 0x5eed_0002, b as u64);
            let t = if m < train.len() { train.subsample(m, &mut rng) } else { train.clone() };
            let r = if m < reference.len() { reference.subsample(m, &mut rng) } else { reference.clone() };
            w2_distance(&uniform(&t), &uniform(&r), &sk)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub c_theta: f64,
    pub epsilon_n_theta: f64,
    pub statistical_term: f64,
    pub bound_value: f64,
    pub generalization_estimate: f64,
    pub mc_batches: usize,
    pub mc_batch_size: usize,
    pub burn_in: usize,
    /// Standard errors of the three estimates.
    pub epsilon_se: f64,
    pub statistical_se: f64,
    pub generalization_se: f64,
    /// Mean pairwise distance of the attractor sample.
    pub attractor_spread: f64,
}

impl BoundReport {
    /// `eps / (1 - c) + stat`.
    pub fn bound(c_theta: f64, epsilon: f64, statistical: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&c_theta) {
            return Err(BoundError::Config(format!("contraction constant must be in [0, 1), got {c_theta}")));
        }
        Ok(epsilon / (1.0 - c_theta) + statistical)
    }

    /// Standard error of `generalization - bound` treating the three
    /// estimates as independent.
    pub fn mc_se(&self) -> f64 {
        let k = 1.0 / (1.0 - self.c_theta);
        (self.generalization_se.powi(2) + (k * self.epsilon_se).powi(2) + self.statistical_se.powi(2)).sqrt()
    }

    pub fn holds(&self, z: f64) -> bool {
        self.generalization_estimate <= self.bound_value + z * self.mc_se()
    }
}

/// All terms for a trained model with a certified contraction constant.
pub fn evaluate_bound(model: &Model, train: &PointCloud, reference: &PointCloud, cfg: &BoundConfig) -> Result<BoundReport> {
    let c = model.certified_cap().ok_or(BoundError::Uncertified)?;
    let eps = estimate_collage_error(model, train, cfg)?;
    let stat = estimate_statistical_term(train, reference, cfg)?;
    let (gen, attractor) = estimate_generalization(model, reference, cfg, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spread = attractor.subsample(attractor.len().min(1024), &mut rng).spread(1024);
    Ok(BoundReport {
        c_theta: c,
        epsilon_n_theta: eps.mean,
        statistical_term: stat.mean,
        bound_value: BoundReport::bound(c, eps.mean, stat.mean)?,
        generalization_estimate: gen.mean,
        mc_batches: cfg.mc_batches,
        mc_batch_size: cfg.mc_batch_size,
        burn_in: cfg.burn_in,
        epsilon_se: eps.se,
        statistical_se: stat.se,
        generalization_se: gen.se,
        attractor_spread: spread,
    })
}

/// Result of one cap in a sweep; failures do not abort the others.
#[derive(Debug)]
pub struct SweepEntry {
    pub cap: f64,
    pub report: Result<BoundReport>,
}

/// Trains one mixture per cap (shared seeds) and evaluates its bound.
pub fn sweep_contraction(
    data: &PointCloud,
    reference: &PointCloud,
    caps: &[f64],
    moe: &MoeConfig,
    train: &TrainConfig,
    cfg: &BoundConfig,
) -> Vec<SweepEntry> {
    caps.par_iter()
        .map(|&cap| {
            let report = (|| {
                if !(cap > 0.0 && cap < 1.0) {
                    return Err(BoundError::Config(format!("cap {cap} outside (0, 1)")));
                }
                let mut mc = moe.clone();
                mc.cap = Some(cap);
                mc.noise_sigma = train.sigma;
                let model = ArchConfig::Moe(mc).build(&mut ChaCha8Rng::seed_from_u64(train.seed))?;
                let tc = TrainConfig { contraction_cap: Some(cap), ..train.clone() };
                let mut t = Trainer::new(model, tc)?;
                t.run(data)?;
                evaluate_bound(t.model(), data, reference, cfg)
            })();
            SweepEntry { cap, report }
        })
        .collect()
}

pub const CSV_HEADER: &str = "cap,epsilon,stat_term,bound,gen_estimate,mc_se";

/// One row per successful entry, in sweep order.
pub fn write_csv<W: Write>(entries: &[SweepEntry], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for e in entries {
        if let Ok(r) = &e.report {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.cap,
                r.epsilon_n_theta,
                r.statistical_term,
                r.bound_value,
                r.generalization_estimate,
                r.mc_se()
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate, DatasetSpec};
    use crate::ifs::{BranchMap, StochasticIfs};
    use proptest::prelude::*;

    fn shift(t: [f64; 2]) -> StochasticIfs {
        StochasticIfs::independent(vec![BranchMap::similarity(2, 1.0, &t).unwrap()], &[1.0]).unwrap()
    }

    fn small(batch: usize) -> BoundConfig {
        BoundConfig { mc_batches: 4, mc_batch_size: batch, ..BoundConfig::default() }
    }

    fn diameter(c: &PointCloud) -> f64 {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in c.points() {
            for i in 0..2 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt()
    }

    #[test]
    fn collage_error_of_identity_and_translation() {
        let train = generate(&DatasetSpec::two_moons(512, 1)).unwrap();
        let e = estimate_collage_error(&shift([0.0, 0.0]), &train, &small(128)).unwrap();
        assert!(e.mean.abs() <= 1e-12);
        let e = estimate_collage_error(&shift([0.3, 0.4]), &train, &small(128)).unwrap();
        assert!((e.mean - 0.5).abs() <= 1e-9, "{}", e.mean);
        // Sinkhorn path on larger batches.
        let e = estimate_collage_error(&shift([0.3, 0.4]), &train, &small(512)).unwrap();
        assert!((e.mean - 0.5).abs() <= 1e-2, "{}", e.mean);
    }

    #[test]
    fn generalisation_of_a_point_attractor() {
        let p: [f64; 2] = [1.0, -1.0];
        let ifs = StochasticIfs::independent(vec![BranchMap::similarity(2, 0.5, &[0.5, -0.5]).unwrap()], &[1.0]).unwrap();
        let q = PointCloud::new(2, [4.0, 3.0].repeat(300)).unwrap();
        let (g, att) = estimate_generalization(&ifs, &q, &small(64), false).unwrap();
        assert_eq!(att.len(), 256);
        let want = ((4.0 - p[0]).powi(2) + (3.0 - p[1]).powi(2)).sqrt();
        assert!((g.mean - want).abs() <= 1e-9, "{} vs {want}", g.mean);
        assert!(g.se <= 1e-9);
    }

    #[test]
    fn statistical_term_is_small_and_grows_with_fewer_points() {
        let reference = generate(&DatasetSpec::two_moons(50_000, 99)).unwrap();
        let cfg = BoundConfig::default();
        let train = generate(&DatasetSpec::two_moons(2048, 1)).unwrap();
        let s = estimate_statistical_term(&train, &reference, &cfg).unwrap();
        assert!(s.mean < 0.05 * diameter(&reference), "{} vs {}", s.mean, diameter(&reference));
        let big = estimate_statistical_term(&generate(&DatasetSpec::two_moons(512, 1)).unwrap(), &reference, &cfg).unwrap();
        let half = estimate_statistical_term(&generate(&DatasetSpec::two_moons(256, 1)).unwrap(), &reference, &cfg).unwrap();
        assert!(half.mean > big.mean, "{} vs {}", half.mean, big.mean);
    }

    #[test]
    fn bound_rejects_non_contractions() {
        assert!(BoundReport::bound(1.0, 0.1, 0.1).is_err());
        assert!(BoundReport::bound(-0.1, 0.1, 0.1).is_err());
    }

    #[test]
    fn sweep_isolates_failures_and_keeps_order() {
        let data = generate(&DatasetSpec::two_moons(64, 1)).unwrap();
        let reference = generate(&DatasetSpec::two_moons(2000, 2)).unwrap();
        let train = TrainConfig { epochs: 2, batch_size: 32, ..TrainConfig::default() };
        let cfg = BoundConfig { mc_batches: 2, mc_batch_size: 64, burn_in: 20, ..BoundConfig::default() };
        let moe = MoeConfig::two_moons(0.9, 0.04);
        let out = sweep_contraction(&data, &reference, &[0.5, 1.5, 0.3], &moe, &train, &cfg);
        assert_eq!(out.iter().map(|e| e.cap).collect::<Vec<_>>(), vec![0.5, 1.5, 0.3]);
        assert!(out[0].report.is_ok() && out[2].report.is_ok());
        assert!(out[1].report.is_err());
        let r = out[0].report.as_ref().unwrap();
        assert!(r.c_theta <= 0.5 + 1e-12);
        assert!((r.bound_value - (r.epsilon_n_theta / (1.0 - r.c_theta) + r.statistical_term)).abs() <= 1e-12);
        let mut csv = Vec::new();
        write_csv(&out, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.5,") && lines[2].starts_with("0.3,"));
    }

    proptest! {
        #[test]
        fn bound_arithmetic(c in 0.0..0.99f64, eps in 0.0..10.0f64, stat in 0.0..10.0f64) {
            let b = BoundReport::bound(c, eps, stat).unwrap();
            prop_assert!((b - (eps / (1.0 - c) + stat)).abs() <= 1e-12 * b.max(1.0));
            prop_assert!(b >= eps + stat - 1e-12);
        }
    }
}
