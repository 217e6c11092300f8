//! Deterministic and stochastic iterated function systems.
//!
//! [`RandomIfs`] is the common interface: a branch family on `R^dim`, a
//! selector kernel choosing the branch from the current state, and optional
//! additive Gaussian noise. [`StochasticIfs`] is the explicit finite version
//! (affine or MLP branches); the neural architectures implement the trait
//! directly.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PointCloud};
use crate::linalg::{matvec_into, Matrix};
use crate::nn::{Mlp, NnError, ParamTape};

#[derive(Debug, Error)]
pub enum IfsError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dim { expected: usize, found: usize },
    #[error("selector kernel: {0}")]
    Kernel(String),
    #[error("certification: {0}")]
    Certificate(String),
    #[error("chain {chain} diverged at step {step} (|x| = {value:.3e})")]
    Instability { chain: usize, step: usize, value: f64 },
    #[error("average contraction not certified (estimate {0:.4}); pass the override to sample anyway")]
    Uncertified(f64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, IfsError>;

/// Coordinates beyond this magnitude abort attractor sampling.
pub const DIVERGENCE_GUARD: f64 = 1e6;
pub const DEFAULT_HUTCHINSON_CAP: usize = 100_000;

/// A branch family with a selector kernel on `R^dim`.
pub trait RandomIfs: Send + Sync {
    fn dim(&self) -> usize;

    /// Standard deviation of the additive Gaussian noise after each step.
    fn noise_sigma(&self) -> f64 {
        0.0
    }

    /// Draws a branch from the selector at `x` and writes its image
    /// (without noise) to `out`. Returns an index identifying the branch.
    fn sample_step(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<u64>;

    /// `F(x) = E[w_Xi(x) | X = x]`.
    fn barycentric(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Number of branches when it is finite and small enough to enumerate.
    fn branch_count(&self) -> Option<usize> {
        None
    }

    fn apply_branch(&self, _k: usize, _x: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(IfsError::Unsupported("branch enumeration".into()))
    }

    /// Selector probabilities over the enumerated branches.
    fn probabilities(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Err(IfsError::Unsupported("explicit selector probabilities".into()))
    }

    /// Lipschitz certificates of the enumerated branches.
    fn certificates(&self) -> Option<Vec<f64>> {
        None
    }

    /// True when the selector does not depend on the state.
    fn place_independent(&self) -> bool {
        false
    }

    /// `(sum_k p_k(x) c_k^2, sum_k p_k(x) c_k)` at `x`.
    fn average_contraction_at(&self, x: &[f64]) -> Result<(f64, f64)> {
        let certs = self
            .certificates()
            .ok_or_else(|| IfsError::Certificate("branches carry no Lipschitz certificate".into()))?;
        let p = self.probabilities(x)?;
        Ok(p.iter().zip(&certs).fold((0.0, 0.0), |(s2, s1), (p, c)| (s2 + p * c * c, s1 + p * c)))
    }

    /// A bound on `sup_x sum p c^2` valid for every state, when the model
    /// carries one (e.g. a cap shared by all branches).
    fn uniform_contraction(&self) -> Option<f64> {
        None
    }
}

/// Deterministic view of a system: every step applies the mean map `F`.
#[derive(Debug, Clone, Copy)]
pub struct MeanMap<'a, I: ?Sized>(pub &'a I);

impl<I: RandomIfs + ?Sized> RandomIfs for MeanMap<'_, I> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn noise_sigma(&self) -> f64 {
        self.0.noise_sigma()
    }

    fn sample_step(&self, x: &[f64], _rng: &mut dyn RngCore, out: &mut [f64]) -> Result<u64> {
        self.0.barycentric(x, out)?;
        Ok(0)
    }

    fn barycentric(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.0.barycentric(x, out)
    }

    fn branch_count(&self) -> Option<usize> {
        Some(1)
    }

    fn apply_branch(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        if k != 0 {
            return Err(IfsError::Domain(format!("branch {k} out of 1")));
        }
        self.0.barycentric(x, out)
    }

    fn probabilities(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![1.0])
    }

    fn place_independent(&self) -> bool {
        true
    }

    // Lip(sum p_k w_k)^2 <= (sum p_k c_k)^2 <= sum p_k c_k^2 for constant p.
    fn uniform_contraction(&self) -> Option<f64> {
        if self.0.place_independent() {
            self.0.uniform_contraction()
        } else {
            None
        }
    }
}

/// One map `w: R^d -> R^d` with an optional Lipschitz certificate.
#[derive(Debug, Clone)]
pub enum BranchMap {
    Affine { a: Matrix, b: Vec<f64>, cert: Option<f64> },
    Mlp { net: Mlp, params: ParamTape, cert: Option<f64> },
}

impl BranchMap {
    /// Affine map certified by the exact spectral norm of `a`.
    pub fn affine(a: Matrix, b: Vec<f64>) -> Result<Self> {
        if a.rows() != a.cols() || b.len() != a.rows() {
            return Err(IfsError::Dim { expected: a.rows(), found: b.len() });
        }
        let cert = Some(a.spectral_norm());
        Ok(Self::Affine { a, b, cert })
    }

    /// `x -> s x + t` in `R^d`.
    pub fn similarity(d: usize, s: f64, t: &[f64]) -> Result<Self> {
        let mut a = Matrix::identity(d);
        a.scale(s);
        Self::affine(a, t.to_vec())
    }

    /// MLP branch certified by the product of its layer norms.
    pub fn mlp(net: Mlp, params: ParamTape) -> Result<Self> {
        if net.in_dim() != net.out_dim() {
            return Err(IfsError::Dim { expected: net.in_dim(), found: net.out_dim() });
        }
        let cert = Some(net.lipschitz_certificate(&params));
        Ok(Self::Mlp { net, params, cert })
    }

    pub fn without_certificate(mut self) -> Self {
        match &mut self {
            BranchMap::Affine { cert, .. } | BranchMap::Mlp { cert, .. } => *cert = None,
        }
        self
    }

    pub fn dim(&self) -> usize {
        match self {
            BranchMap::Affine { b, .. } => b.len(),
            BranchMap::Mlp { net, .. } => net.in_dim(),
        }
    }

    pub fn lipschitz_cert(&self) -> Option<f64> {
        match self {
            BranchMap::Affine { cert, .. } | BranchMap::Mlp { cert, .. } => *cert,
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            BranchMap::Affine { a, b, .. } => {
                matvec_into(a.as_slice(), a.rows(), a.cols(), x, out);
                out.iter_mut().zip(b).for_each(|(o, bb)| *o += bb);
            }
            BranchMap::Mlp { net, params, .. } => net.eval(params, x, out),
        }
    }
}

/// Selector kernel `p: R^d -> simplex`.
#[derive(Clone)]
pub enum SelectorKernel {
    /// `softmax(logits / temperature)`, independent of the state.
    Constant { logits: Vec<f64>, temperature: f64 },
    /// Point mass on the branch returned by the pattern function.
    Dirac(Arc<dyn Fn(&[f64]) -> usize + Send + Sync>),
    /// `softmax(net(x) / temperature)`.
    Gating { net: Mlp, params: ParamTape, temperature: f64 },
}

impl std::fmt::Debug for SelectorKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectorKernel::Constant { logits, temperature } => {
                f.debug_struct("Constant").field("logits", logits).field("temperature", temperature).finish()
            }
            SelectorKernel::Dirac(_) => f.write_str("Dirac(..)"),
            SelectorKernel::Gating { temperature, .. } => f.debug_struct("Gating").field("temperature", temperature).finish(),
        }
    }
}

impl SelectorKernel {
    /// Constant kernel with the given probabilities (zeros allowed).
    pub fn fixed(probs: &[f64]) -> Self {
        Self::Constant { logits: probs.iter().map(|p| p.ln()).collect(), temperature: 1.0 }
    }

    pub fn uniform(k: usize) -> Self {
        Self::Constant { logits: vec![0.0; k], temperature: 1.0 }
    }

    pub fn probabilities(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let p = match self {
            SelectorKernel::Constant { logits, temperature } => softmax(logits, *temperature),
            SelectorKernel::Dirac(pattern) => {
                let j = pattern(x);
                if j >= k {
                    return Err(IfsError::Kernel(format!("pattern index {j} out of {k} branches")));
                }
                let mut p = vec![0.0; k];
                p[j] = 1.0;
                p
            }
            SelectorKernel::Gating { net, params, temperature } => {
                let mut z = vec![0.0; net.out_dim()];
                net.eval(params, x, &mut z);
                softmax(&z, *temperature)
            }
        };
        check_probabilities(&p, k)?;
        Ok(p)
    }
}

/// Numerically stable `softmax(z / t)`.
pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let mx = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let e: Vec<f64> = z.iter().map(|v| ((v - mx) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn check_probabilities(p: &[f64], k: usize) -> Result<()> {
    if p.len() != k {
        return Err(IfsError::Kernel(format!("{} probabilities for {k} branches", p.len())));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(IfsError::Kernel(format!("invalid probabilities {p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(IfsError::Kernel(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // rounding: last branch with positive mass
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// Finite branch family plus selector kernel.
#[derive(Debug, Clone)]
pub struct StochasticIfs {
    dim: usize,
    branches: Vec<BranchMap>,
    selector: SelectorKernel,
    noise_sigma: f64,
}

impl StochasticIfs {
    pub fn new(branches: Vec<BranchMap>, selector: SelectorKernel, noise_sigma: f64) -> Result<Self> {
        let dim = branches.first().ok_or_else(|| IfsError::Domain("need at least one branch".into()))?.dim();
        if let Some(b) = branches.iter().find(|b| b.dim() != dim) {
            return Err(IfsError::Dim { expected: dim, found: b.dim() });
        }
        if !(noise_sigma >= 0.0) {
            return Err(IfsError::Domain(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        if let SelectorKernel::Constant { logits, temperature } = &selector {
            if logits.len() != branches.len() || !(*temperature > 0.0) {
                return Err(IfsError::Kernel(format!(
                    "{} logits at temperature {temperature} for {} branches",
                    logits.len(),
                    branches.len()
                )));
            }
        }
        Ok(Self { dim, branches, selector, noise_sigma })
    }

    /// Place-independent IFS with fixed probabilities.
    pub fn independent(branches: Vec<BranchMap>, probs: &[f64]) -> Result<Self> {
        Self::new(branches, SelectorKernel::fixed(probs), 0.0)
    }

    /// `{x -> (x + v)/2}` over the vertices of the unit equilateral triangle,
    /// uniform probabilities.
    pub fn sierpinski() -> Self {
        let h = 3f64.sqrt() / 2.0;
        let branches = [[0.0, 0.0], [1.0, 0.0], [0.5, h]]
            .iter()
            .map(|v| BranchMap::similarity(2, 0.5, &[v[0] / 2.0, v[1] / 2.0]).unwrap())
            .collect();
        Self::new(branches, SelectorKernel::uniform(3), 0.0).unwrap()
    }

    /// `{x/3, x/3 + 2/3}` on the line, uniform probabilities.
    pub fn cantor() -> Self {
        let branches = vec![
            BranchMap::similarity(1, 1.0 / 3.0, &[0.0]).unwrap(),
            BranchMap::similarity(1, 1.0 / 3.0, &[2.0 / 3.0]).unwrap(),
        ];
        Self::new(branches, SelectorKernel::uniform(2), 0.0).unwrap()
    }

    /// `x -> x/2` with probability `p`, `x -> 2x` otherwise.
    pub fn halve_or_double(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(IfsError::Domain(format!("probability {p} outside [0, 1]")));
        }
        let branches =
            vec![BranchMap::similarity(1, 0.5, &[0.0]).unwrap(), BranchMap::similarity(1, 2.0, &[0.0]).unwrap()];
        Self::independent(branches, &[p, 1.0 - p])
    }

    pub fn branches(&self) -> &[BranchMap] {
        &self.branches
    }

    pub fn selector(&self) -> &SelectorKernel {
        &self.selector
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }
}

impl RandomIfs for StochasticIfs {
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    fn sample_step(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<u64> {
        let p = self.selector.probabilities(x, self.branches.len())?;
        let k = sample_categorical(&p, rng);
        self.branches[k].apply(x, out);
        Ok(k as u64)
    }

    fn barycentric(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.selector.probabilities(x, self.branches.len())?;
        let mut tmp = vec![0.0; self.dim];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (b, pk) in self.branches.iter().zip(&p) {
            if *pk == 0.0 {
                continue;
            }
            b.apply(x, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += pk * t);
        }
        Ok(())
    }

    fn branch_count(&self) -> Option<usize> {
        Some(self.branches.len())
    }

    fn apply_branch(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let b = self.branches.get(k).ok_or_else(|| IfsError::Domain(format!("branch {k} out of range")))?;
        b.apply(x, out);
        Ok(())
    }

    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.selector.probabilities(x, self.branches.len())
    }

    fn certificates(&self) -> Option<Vec<f64>> {
        self.branches.iter().map(|b| b.lipschitz_cert()).collect()
    }

    fn place_independent(&self) -> bool {
        matches!(self.selector, SelectorKernel::Constant { .. })
    }

    fn uniform_contraction(&self) -> Option<f64> {
        let certs = self.certificates()?;
        match self.selector {
            SelectorKernel::Constant { .. } => self.average_contraction_at(&vec![0.0; self.dim]).ok().map(|v| v.0),
            _ => Some(certs.iter().fold(0.0_f64, |m, c| m.max(c * c))),
        }
    }
}

fn check_dim<I: RandomIfs + ?Sized>(ifs: &I, found: usize) -> Result<()> {
    if ifs.dim() != found {
        return Err(IfsError::Dim { expected: ifs.dim(), found });
    }
    Ok(())
}

/// `H(K) = union_k w_k(K)`, uniformly subsampled (seeded) down to `cap`
/// points when the union is larger.
pub fn hutchinson_step<I: RandomIfs + ?Sized>(ifs: &I, set: &PointCloud, cap: usize, seed: u64) -> Result<PointCloud> {
    check_dim(ifs, set.dim())?;
    let k = ifs
        .branch_count()
        .ok_or_else(|| IfsError::Unsupported("Hutchinson step needs an enumerable branch family".into()))?;
    if cap < set.len() {
        return Err(IfsError::Domain(format!("cap {cap} below the input size {}", set.len())));
    }
    let d = set.dim();
    let mut coords = vec![0.0; k * set.len() * d];
    for b in 0..k {
        for (i, x) in set.points().enumerate() {
            let o = (b * set.len() + i) * d;
            ifs.apply_branch(b, x, &mut coords[o..o + d])?;
        }
    }
    let union = PointCloud::new(d, coords)?;
    if union.len() > cap {
        Ok(union.subsample(cap, &mut ChaCha8Rng::seed_from_u64(seed)))
    } else {
        Ok(union)
    }
}

/// `n` Hutchinson steps from `set`.
pub fn hutchinson_iterate<I: RandomIfs + ?Sized>(
    ifs: &I,
    set: &PointCloud,
    n: usize,
    cap: usize,
    seed: u64,
) -> Result<PointCloud> {
    let mut cur = set.clone();
    for step in 0..n {
        cur = hutchinson_step(ifs, &cur, cap.max(cur.len()), seed.wrapping_add(step as u64))?;
    }
    Ok(cur)
}

/// `X_{t+1} = w_Xi(X_t) + sigma g` with `Xi ~ p(X_t)`.
pub fn markov_step<I: RandomIfs + ?Sized, R: RngCore>(ifs: &I, x: &[f64], rng: &mut R) -> Result<(Vec<f64>, u64)> {
    check_dim(ifs, x.len())?;
    let mut out = vec![0.0; x.len()];
    let k = ifs.sample_step(x, rng, &mut out)?;
    add_noise(ifs.noise_sigma(), &mut out, rng);
    Ok((out, k))
}

fn add_noise<R: RngCore + ?Sized>(sigma: f64, out: &mut [f64], rng: &mut R) {
    if sigma > 0.0 {
        for o in out.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *o += sigma * g;
        }
    }
}

/// One draw of `T* mu`: every point takes an independent Markov step,
/// weights are kept.
pub fn transfer_step<I: RandomIfs + ?Sized, R: RngCore>(ifs: &I, mu: &PointCloud, rng: &mut R) -> Result<PointCloud> {
    check_dim(ifs, mu.dim())?;
    let d = mu.dim();
    let mut coords = vec![0.0; mu.len() * d];
    for (i, x) in mu.points().enumerate() {
        let out = &mut coords[i * d..(i + 1) * d];
        ifs.sample_step(x, rng, out)?;
        add_noise(ifs.noise_sigma(), out, rng);
    }
    Ok(PointCloud::with_weights(d, coords, mu.weights().to_vec())?)
}

/// Seeded RNG for chain `index` of a run.
pub fn chain_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Certified bound on `sup_x sum p c^2` available without probing, if any.
pub fn a_priori_contraction<I: RandomIfs + ?Sized>(ifs: &I) -> Option<f64> {
    ifs.uniform_contraction()
}

/// `n` independent chains from standard Gaussian starts, each run for
/// `burn_in` Markov steps; returns the terminal states.
///
/// Refuses models without an a priori average-contraction certificate below
/// one unless `allow_uncertified` is set.
pub fn sample_attractor<I: RandomIfs + ?Sized>(
    ifs: &I,
    n: usize,
    burn_in: usize,
    seed: u64,
    allow_uncertified: bool,
) -> Result<PointCloud> {
    if n == 0 {
        return Err(IfsError::Domain("need at least one chain".into()));
    }
    if !allow_uncertified {
        match a_priori_contraction(ifs) {
            Some(c) if c < 1.0 => {}
            Some(c) => return Err(IfsError::Uncertified(c)),
            None => return Err(IfsError::Uncertified(f64::NAN)),
        }
    }
    let d = ifs.dim();
    let mut coords = vec![0.0; n * d];
    coords.par_chunks_mut(d).enumerate().try_for_each(|(chain, x)| -> Result<()> {
        let mut rng = chain_rng(seed, chain as u64);
        for v in x.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut next = vec![0.0; d];
        for step in 0..burn_in {
            ifs.sample_step(x, &mut rng, &mut next)?;
            add_noise(ifs.noise_sigma(), &mut next, &mut rng);
            let mx = next.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if !(mx <= DIVERGENCE_GUARD) {
                return Err(IfsError::Instability { chain, step: step + 1, value: mx });
            }
            x.copy_from_slice(&next);
        }
        Ok(())
    })?;
    Ok(PointCloud::new(d, coords)?)
}

/// Estimate of `sup_x sum_k p_k(x) c_k^2` (and of the first-power variant).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionCertificate {
    pub sup_estimate: f64,
    pub certified: bool,
    pub probe_size: usize,
    pub sup_first_power: f64,
    pub certified_first_power: bool,
    /// True when the supremum is a heuristic over probe points (place-dependent selector).
    pub heuristic: bool,
}

impl ContractionCertificate {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("certificate serialises")
    }
}

/// Evaluates `sum p c^2` and `sum p c` over the probe cloud and one
/// transfer-step image of it (seeded); a constant selector needs a single
/// evaluation.
pub fn certify_average_contraction<I: RandomIfs + ?Sized>(
    ifs: &I,
    probe: &PointCloud,
    seed: u64,
) -> Result<ContractionCertificate> {
    check_dim(ifs, probe.dim())?;
    let mut points: Vec<Vec<f64>> = Vec::new();
    let heuristic = !ifs.place_independent();
    if heuristic {
        let image = transfer_step(ifs, probe, &mut ChaCha8Rng::seed_from_u64(seed))?;
        points.extend(probe.points().map(|p| p.to_vec()));
        points.extend(image.points().map(|p| p.to_vec()));
    } else {
        points.push(probe.point(0).to_vec());
    }
    let vals = points.iter().map(|x| ifs.average_contraction_at(x)).collect::<Result<Vec<_>>>()?;
    let s2 = vals.iter().fold(0.0_f64, |m, v| m.max(v.0));
    let s1 = vals.iter().fold(0.0_f64, |m, v| m.max(v.1));
    Ok(ContractionCertificate {
        sup_estimate: s2,
        certified: s2 < 1.0,
        probe_size: points.len(),
        sup_first_power: s1,
        certified_first_power: s1 < 1.0,
        heuristic,
    })
}

/// `bound = epsilon / (1 - c)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollageBound {
    pub epsilon: f64,
    pub c: f64,
    pub bound: f64,
}

pub fn collage_bound(epsilon: f64, c: f64) -> Result<CollageBound> {
    if !(0.0..1.0).contains(&c) {
        return Err(IfsError::Domain(format!("contraction constant must be in [0, 1), got {c}")));
    }
    if !(epsilon >= 0.0) {
        return Err(IfsError::Domain(format!("collage error must be >= 0, got {epsilon}")));
    }
    Ok(CollageBound { epsilon, c, bound: epsilon / (1.0 - c) })
}

/// `(1/steps) sum_t log c_{Xi_t}` along a sampled branch sequence of a
/// place-independent IFS. Returns `-inf` as soon as a zero certificate is
/// drawn.
pub fn lyapunov_exponent_mc<I: RandomIfs + ?Sized, R: Rng>(ifs: &I, steps: usize, rng: &mut R) -> Result<f64> {
    if steps == 0 {
        return Err(IfsError::Domain("steps must be >= 1".into()));
    }
    if !ifs.place_independent() {
        return Err(IfsError::Unsupported("Lyapunov estimate needs a place-independent selector".into()));
    }
    let certs = ifs.certificates().ok_or_else(|| IfsError::Certificate("missing branch certificates".into()))?;
    let p = ifs.probabilities(&vec![0.0; ifs.dim()])?;
    let logs: Vec<f64> = certs.iter().map(|c| c.ln()).collect();
    let mut acc = 0.0;
    for _ in 0..steps {
        let k = sample_categorical(&p, rng);
        if logs[k] == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        acc += logs[k];
    }
    Ok(acc / steps as f64)
}

/// `F(x) = sum_k p_k(x) w_k(x)`.
pub fn barycentric_map<I: RandomIfs + ?Sized>(ifs: &I, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(ifs, x.len())?;
    let mut out = vec![0.0; x.len()];
    ifs.barycentric(x, &mut out)?;
    Ok(out)
}
