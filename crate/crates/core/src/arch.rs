//! Neural blocks viewed as random IFS: ReLU and softplus residual blocks,
//! single-head Transformer blocks on short contexts, and (deep) mixtures of
//! experts.
//!
//! Every trainable family exposes a batched training step through [`Model`]:
//! a forward pass of one transfer step under a [`Selection`] rule and the
//! matching reverse pass into the shared [`ParamTape`].

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::ifs::{sample_categorical, softmax, BranchMap, IfsError, RandomIfs, Result, SelectorKernel, StochasticIfs};
use crate::linalg::{dot, matvec_into, matvec_t_into, spectral_norm, Matrix};
use crate::nn::{softplus, Activation, Mlp, MlpCache, MlpSpec, NnError, ParamTape, PowerState, SlotId};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Above this many bits a ResNet pattern set is not enumerated.
pub const MAX_ENUMERATED_UNITS: usize = 20;
const MAX_ENUMERATED_BRANCHES: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Sampled,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradEstimator {
    PathwiseSelected,
    RelaxedOnehot,
}

/// How branch weights are formed in a batched step.
#[derive(Debug, Clone, Copy)]
pub enum Selection<'a> {
    /// Selector probabilities (the deterministic block).
    Dense,
    /// `softmax(logits + gumbel)`.
    Relaxed(&'a [f64]),
    /// One-hot at `argmax(logits + gumbel)`, an exact categorical draw.
    Pathwise(&'a [f64]),
    /// One-hot at the given indices.
    Fixed(&'a [usize]),
}

impl<'a> Selection<'a> {
    pub fn from_routing(routing: Routing, estimator: GradEstimator, gumbel: &'a [f64]) -> Self {
        match (routing, estimator) {
            (Routing::Dense, _) => Selection::Dense,
            (Routing::Sampled, GradEstimator::PathwiseSelected) => Selection::Pathwise(gumbel),
            (Routing::Sampled, GradEstimator::RelaxedOnehot) => Selection::Relaxed(gumbel),
        }
    }

    fn differentiable(&self) -> bool {
        matches!(self, Selection::Dense | Selection::Relaxed(_))
    }

    /// Weights for selection slot `slot` (each slot owns `logits.len()` draws).
    fn weights(&self, logits: &[f64], slot: usize) -> Vec<f64> {
        let k = logits.len();
        match self {
            Selection::Dense => softmax(logits, 1.0),
            Selection::Relaxed(g) => {
                let z: Vec<f64> = logits.iter().zip(&g[slot * k..(slot + 1) * k]).map(|(l, g)| l + g).collect();
                softmax(&z, 1.0)
            }
            Selection::Pathwise(g) => {
                let mut best = 0;
                let mut bv = f64::NEG_INFINITY;
                for (j, (l, g)) in logits.iter().zip(&g[slot * k..(slot + 1) * k]).enumerate() {
                    if l + g > bv {
                        bv = l + g;
                        best = j;
                    }
                }
                one_hot(k, best)
            }
            Selection::Fixed(idx) => one_hot(k, idx[slot]),
        }
    }
}

fn one_hot(k: usize, j: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[j] = 1.0;
    v
}

/// Standard Gumbel variate.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// `dz_k = s_k (ds_k - sum_j s_j ds_j)` for `s = softmax(z)`.
fn softmax_backward(s: &[f64], ds: &[f64]) -> Vec<f64> {
    let inner = dot(s, ds);
    s.iter().zip(ds).map(|(s, d)| s * (d - inner)).collect()
}

fn gumbel_draws(rng: &mut dyn RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| gumbel(rng)).collect()
}

// ---------------------------------------------------------------------------
// ReLU residual blocks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResNetConfig {
    pub dim: usize,
    pub width: usize,
    pub depth: usize,
    /// Without biases every block is positively homogeneous.
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default)]
    pub cap: Option<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
}

fn yes() -> bool {
    true
}

impl ResNetConfig {
    pub fn two_moons() -> Self {
        Self { dim: 2, width: 32, depth: 8, bias: true, cap: None, noise_sigma: 0.0 }
    }
}

/// Stack of `x -> x + B relu(Ax + b) + c` blocks; the selector is the Dirac
/// at the activation pattern of every block.
#[derive(Debug, Clone)]
pub struct ResNetIfs {
    config: ResNetConfig,
    tape: ParamTape,
    blocks: Vec<Mlp>,
}

#[derive(Debug, Clone)]
pub struct ResNetCache {
    caches: Vec<MlpCache>,
}

impl ResNetIfs {
    pub fn new<R: Rng + ?Sized>(config: ResNetConfig, rng: &mut R) -> Result<Self> {
        if config.depth == 0 || config.width == 0 || config.dim == 0 {
            return Err(IfsError::Domain("ResNet needs positive dim, width and depth".into()));
        }
        let mut tape = ParamTape::new();
        let mut blocks = Vec::new();
        for l in 0..config.depth {
            let mut spec = MlpSpec::new(&[config.dim, config.width, config.dim], Activation::Relu);
            spec.residual = true;
            spec.spectral_cap = config.cap;
            blocks.push(Mlp::new(spec, &mut tape, &format!("block{l}"))?);
        }
        let mut r = Self { config, tape, blocks };
        r.init(rng);
        Ok(r)
    }

    /// Single block with the given `A` (m x d), `b`, `B` (d x m), `c`.
    pub fn from_parts(a: &Matrix, b: &[f64], bb: &Matrix, c: &[f64]) -> Result<Self> {
        let (m, d) = (a.rows(), a.cols());
        if b.len() != m || bb.rows() != d || bb.cols() != m || c.len() != d {
            return Err(IfsError::Dim { expected: m, found: b.len() });
        }
        let config = ResNetConfig { dim: d, width: m, depth: 1, bias: true, cap: None, noise_sigma: 0.0 };
        let mut r = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let blk = &r.blocks[0];
        let (w0, b0, w1, b1) = (blk.weight_slots()[0], blk.bias_slots()[0], blk.weight_slots()[1], blk.bias_slots()[1]);
        r.tape.get_mut(w0).copy_from_slice(a.as_slice());
        r.tape.get_mut(b0).copy_from_slice(b);
        r.tape.get_mut(w1).copy_from_slice(bb.as_slice());
        r.tape.get_mut(b1).copy_from_slice(c);
        Ok(r)
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for blk in &mut self.blocks {
            blk.init(&mut self.tape, rng);
            blk.enforce_cap(&mut self.tape);
        }
        if !self.config.bias {
            self.zero_biases();
        }
    }

    fn zero_biases(&mut self) {
        for blk in &self.blocks {
            for s in blk.bias_slots() {
                self.tape.get_mut(*s).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn mask_bias_grads(&mut self) {
        if self.config.bias {
            return;
        }
        for blk in &self.blocks {
            for s in blk.bias_slots() {
                self.tape.grad_mut(*s).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// `(A, b, B, c)` of block `l`.
    pub fn block_parts(&self, l: usize) -> (Matrix, Vec<f64>, Matrix, Vec<f64>) {
        let blk = &self.blocks[l];
        let (d, m) = (self.config.dim, self.config.width);
        (
            Matrix::from_vec(m, d, self.tape.get(blk.weight_slots()[0]).to_vec()),
            self.tape.get(blk.bias_slots()[0]).to_vec(),
            Matrix::from_vec(d, m, self.tape.get(blk.weight_slots()[1]).to_vec()),
            self.tape.get(blk.bias_slots()[1]).to_vec(),
        )
    }

    /// `xi_j(x) = 1{(Ax + b)_j > 0}` for every block along the forward pass.
    pub fn pattern(&self, x: &[f64]) -> Vec<Vec<bool>> {
        let mut cur = x.to_vec();
        let mut next = vec![0.0; cur.len()];
        let mut out = Vec::with_capacity(self.blocks.len());
        for (l, blk) in self.blocks.iter().enumerate() {
            let (a, b, _, _) = self.block_parts(l);
            let pre = a.matvec(&cur);
            out.push(pre.iter().zip(&b).map(|(p, b)| p + b > 0.0).collect());
            blk.eval(&self.tape, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        out
    }

    /// Block `l` restricted to pattern `xi`: `x -> (I + B D A) x + B D b + c`.
    pub fn pattern_branch(&self, l: usize, xi: &[bool]) -> Result<BranchMap> {
        let (a, b, bb, c) = self.block_parts(l);
        let (d, m) = (self.config.dim, self.config.width);
        let mut jac = Matrix::identity(d);
        let mut shift = c.clone();
        for r in 0..d {
            for j in 0..m {
                if !xi[j] {
                    continue;
                }
                let bij = bb[(r, j)];
                for col in 0..d {
                    jac[(r, col)] += bij * a[(j, col)];
                }
                shift[r] += bij * b[j];
            }
        }
        BranchMap::affine(jac, shift)
    }

    /// All `2^m` affine branches of a single block, in pattern-bit order
    /// (bit `j` of the index is unit `j`).
    pub fn enumerate_branches(&self) -> Result<Vec<BranchMap>> {
        let m = self.config.width;
        if self.config.depth != 1 || m > MAX_ENUMERATED_UNITS {
            return Err(IfsError::Unsupported(format!(
                "explicit enumeration needs depth 1 and width <= {MAX_ENUMERATED_UNITS} (got depth {}, width {m}); sample lazily instead",
                self.config.depth
            )));
        }
        (0..1usize << m).map(|k| self.pattern_branch(0, &bits(k, m))).collect()
    }

    /// Degenerate P-IFS with the enumerated branches and the Dirac selector.
    pub fn to_stochastic_ifs(&self) -> Result<StochasticIfs> {
        let branches = self.enumerate_branches()?;
        let me = self.clone();
        let selector = SelectorKernel::Dirac(std::sync::Arc::new(move |x: &[f64]| pattern_index(&me.pattern(x)[0])));
        StochasticIfs::new(branches, selector, self.config.noise_sigma)
    }

    pub fn forward_step(&self, x: &[f64], n: usize) -> Result<(Vec<f64>, ResNetCache)> {
        let mut cur = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(&self.tape, &cur, n)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, ResNetCache { caches }))
    }

    pub fn backward_step(&mut self, cache: &ResNetCache, dy: &[f64]) -> Result<Vec<f64>> {
        let mut delta = dy.to_vec();
        for (blk, c) in self.blocks.iter().zip(&cache.caches).rev() {
            delta = blk.backward(&mut self.tape, c, &delta)?;
        }
        self.mask_bias_grads();
        Ok(delta)
    }
}

fn bits(k: usize, m: usize) -> Vec<bool> {
    (0..m).map(|j| k >> j & 1 == 1).collect()
}

fn pattern_index(xi: &[bool]) -> usize {
    xi.iter().enumerate().fold(0, |acc, (j, b)| acc | (usize::from(*b) << j))
}

/// FNV-1a over the pattern bits.
fn pattern_hash(pattern: &[Vec<bool>]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in pattern.iter().flatten() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl RandomIfs for ResNetIfs {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn noise_sigma(&self) -> f64 {
        self.config.noise_sigma
    }

    fn sample_step(&self, x: &[f64], _rng: &mut dyn RngCore, out: &mut [f64]) -> Result<u64> {
        self.barycentric(x, out)?;
        let p = self.pattern(x);
        Ok(if self.config.depth == 1 && self.config.width <= 64 { pattern_index(&p[0]) as u64 } else { pattern_hash(&p) })
    }

    fn barycentric(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let mut cur = x.to_vec();
        for blk in &self.blocks {
            blk.eval(&self.tape, &cur, out);
            cur.copy_from_slice(out);
        }
        Ok(())
    }

    fn branch_count(&self) -> Option<usize> {
        (self.config.depth == 1 && self.config.width <= MAX_ENUMERATED_UNITS).then(|| 1 << self.config.width)
    }

    fn apply_branch(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.branch_count().ok_or_else(|| IfsError::Unsupported("ResNet branch enumeration".into()))?;
        if k >= n {
            return Err(IfsError::Domain(format!("branch {k} out of {n}")));
        }
        self.pattern_branch(0, &bits(k, self.config.width))?.apply(x, out);
        Ok(())
    }

    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = self.branch_count().ok_or_else(|| IfsError::Unsupported("ResNet branch enumeration".into()))?;
        let mut p = vec![0.0; n];
        p[pattern_index(&self.pattern(x)[0])] = 1.0;
        Ok(p)
    }

    fn certificates(&self) -> Option<Vec<f64>> {
        let branches = self.enumerate_branches().ok()?;
        branches.iter().map(|b| b.lipschitz_cert()).collect()
    }

    /// Dirac selector: the certificate of the active pattern composed over blocks.
    fn average_contraction_at(&self, x: &[f64]) -> Result<(f64, f64)> {
        let mut c = 1.0;
        for (l, xi) in self.pattern(x).iter().enumerate() {
            c *= self.pattern_branch(l, xi)?.lipschitz_cert().unwrap_or(f64::INFINITY);
        }
        Ok((c * c, c))
    }
}

// ---------------------------------------------------------------------------
// Softplus residual block

/// `x -> x + B softplus(Ax + b) + c`, read as the expectation of
/// `x + B relu(Ax + b - tau) + c` over independent logistic thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftplusIfs {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub bb: Matrix,
    pub c: Vec<f64>,
    pub noise_sigma: f64,
}

impl SoftplusIfs {
    pub fn new(a: Matrix, b: Vec<f64>, bb: Matrix, c: Vec<f64>) -> Result<Self> {
        let (m, d) = (a.rows(), a.cols());
        if b.len() != m || bb.rows() != d || bb.cols() != m || c.len() != d {
            return Err(IfsError::Dim { expected: m, found: b.len() });
        }
        Ok(Self { a, b, bb, c, noise_sigma: 0.0 })
    }

    /// Branch for thresholds `tau`.
    pub fn branch(&self, tau: &[f64], x: &[f64], out: &mut [f64]) {
        let pre = self.a.matvec(x);
        let h: Vec<f64> = pre.iter().zip(&self.b).zip(tau).map(|((p, b), t)| (p + b - t).max(0.0)).collect();
        matvec_into(self.bb.as_slice(), self.bb.rows(), self.bb.cols(), &h, out);
        out.iter_mut().zip(x).zip(&self.c).for_each(|((o, x), c)| *o += x + c);
    }

    pub fn sample_thresholds<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.b.len())
            .map(|_| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                (u / (1.0 - u)).ln()
            })
            .collect()
    }
}

impl RandomIfs for SoftplusIfs {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// The index set is a continuum; the returned index is always 0.
    fn sample_step(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<u64> {
        let tau = self.sample_thresholds(rng);
        self.branch(&tau, x, out);
        Ok(0)
    }

    fn barycentric(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let pre = self.a.matvec(x);
        let h: Vec<f64> = pre.iter().zip(&self.b).map(|(p, b)| softplus(p + b)).collect();
        matvec_into(self.bb.as_slice(), self.bb.rows(), self.bb.cols(), &h, out);
        out.iter_mut().zip(x).zip(&self.c).for_each(|((o, x), c)| *o += x + c);
        Ok(())
    }
}

/// Monte-Carlo average of `w_tau(x)` over `samples` logistic threshold draws.
pub fn softplus_mc_expectation<R: Rng + ?Sized>(
    s: &SoftplusIfs,
    x: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(IfsError::Domain("samples must be >= 1".into()));
    }
    let d = s.dim();
    let mut acc = vec![0.0; d];
    let mut out = vec![0.0; d];
    for _ in 0..samples {
        let tau = s.sample_thresholds(rng);
        s.branch(&tau, x, &mut out);
        acc.iter_mut().zip(&out).for_each(|(a, o)| *a += o);
    }
    Ok(acc.into_iter().map(|a| a / samples as f64).collect())
}

// ---------------------------------------------------------------------------
// Transformer block

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    /// Dimension of each token in data space.
    pub token_dim: usize,
    /// Context length `n`.
    pub tokens: usize,
    /// Width of the residual stream. Tokens are embedded and projected back
    /// by affine maps unless this equals `token_dim`.
    pub embed: usize,
    pub mlp_hidden: usize,
    #[serde(default = "gelu")]
    pub activation: Activation,
    /// Divide attention logits by `sqrt(embed)`.
    #[serde(default)]
    pub attention_scaling: bool,
    #[serde(default)]
    pub noise_sigma: f64,
}

fn gelu() -> Activation {
    Activation::Gelu
}

impl TransformerConfig {
    pub fn two_moons(embed: usize) -> Self {
        Self {
            token_dim: 2,
            tokens: 2,
            embed,
            mlp_hidden: 48,
            activation: Activation::Gelu,
            attention_scaling: false,
            noise_sigma: 0.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.token_dim * self.tokens
    }
}

/// `G(x) = x + SA(LN(x)) + g(LN(x))` on contexts of `n` tokens; branch `xi`
/// sends token `i` to `x_i + v_{xi_i}(LN(x)) + g(LN(x))_i`.
#[derive(Debug, Clone)]
pub struct TransformerIfs {
    config: TransformerConfig,
    tape: ParamTape,
    embed_in: Option<Mlp>,
    embed_out: Option<Mlp>,
    wq: SlotId,
    wk: SlotId,
    wv: SlotId,
    ln_gamma: SlotId,
    ln_beta: SlotId,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct TransformerCache {
    nctx: usize,
    differentiable: bool,
    embed_cache: Option<MlpCache>,
    out_cache: Option<MlpCache>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    u: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Branch weights, `nctx x n x n`.
    w: Vec<f64>,
    mlp_cache: MlpCache,
}

impl TransformerIfs {
    pub fn new<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        let TransformerConfig { token_dim: p, tokens: n, embed: e, mlp_hidden: h, .. } = config;
        if p == 0 || n == 0 || e == 0 || h == 0 {
            return Err(IfsError::Domain("Transformer dimensions must be positive".into()));
        }
        let mut tape = ParamTape::new();
        let (embed_in, embed_out) = if e != p {
            (
                Some(Mlp::new(MlpSpec::new(&[p, e], Activation::Relu), &mut tape, "embed_in")?),
                Some(Mlp::new(MlpSpec::new(&[e, p], Activation::Relu), &mut tape, "embed_out")?),
            )
        } else {
            (None, None)
        };
        let wq = tape.add("attn.wq", &[e, e]);
        let wk = tape.add("attn.wk", &[e, e]);
        let wv = tape.add("attn.wv", &[e, e]);
        let ln_gamma = tape.add("ln.gamma", &[e]);
        let ln_beta = tape.add("ln.beta", &[e]);
        let mlp = Mlp::new(MlpSpec::new(&[e, h, e], config.activation), &mut tape, "mlp")?;
        let mut t = Self { config, tape, embed_in, embed_out, wq, wk, wv, ln_gamma, ln_beta, mlp };
        t.init(rng);
        Ok(t)
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let e = self.config.embed;
        let bound = 1.0 / (e as f64).sqrt();
        for s in [self.wq, self.wk, self.wv] {
            self.tape.get_mut(s).iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
        }
        self.tape.get_mut(self.ln_gamma).iter_mut().for_each(|v| *v = 1.0);
        self.tape.get_mut(self.ln_beta).iter_mut().for_each(|v| *v = 0.0);
        for m in [&mut self.embed_in, &mut self.embed_out].into_iter().flatten() {
            m.init(&mut self.tape, rng);
        }
        self.mlp.init(&mut self.tape, rng);
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    fn scale(&self) -> f64 {
        if self.config.attention_scaling {
            1.0 / (self.config.embed as f64).sqrt()
        } else {
            1.0
        }
    }

    /// Row-stochastic `n x n` attention matrix of one context.
    pub fn attention_weights(&self, x: &[f64]) -> Result<Matrix> {
        if x.len() != self.config.state_dim() {
            return Err(IfsError::Dim { expected: self.config.state_dim(), found: x.len() });
        }
        let (_, c) = self.forward_impl(x, 1, Selection::Dense)?;
        let n = self.config.tokens;
        Ok(Matrix::from_vec(n, n, c.w))
    }

    pub fn forward_step(&self, x: &[f64], nctx: usize, sel: Selection) -> Result<(Vec<f64>, TransformerCache)> {
        self.forward_impl(x, nctx, sel)
    }

    fn forward_impl(&self, x: &[f64], nctx: usize, sel: Selection) -> Result<(Vec<f64>, TransformerCache)> {
        let TransformerConfig { token_dim: p, tokens: n, embed: e, .. } = self.config;
        if x.len() != nctx * n * p {
            return Err(IfsError::Dim { expected: nctx * n * p, found: x.len() });
        }
        let rows = nctx * n;
        let tape = &self.tape;
        let (h, embed_cache) = match &self.embed_in {
            Some(m) => {
                let (h, c) = m.forward(tape, x, rows)?;
                (h, Some(c))
            }
            None => (x.to_vec(), None),
        };
        let gamma = tape.get(self.ln_gamma);
        let beta = tape.get(self.ln_beta);
        let mut xhat = vec![0.0; rows * e];
        let mut inv_std = vec![0.0; rows];
        let mut u = vec![0.0; rows * e];
        for r in 0..rows {
            let hr = &h[r * e..(r + 1) * e];
            let mean = hr.iter().sum::<f64>() / e as f64;
            let var = hr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..e {
                let xh = (hr[j] - mean) * inv;
                xhat[r * e + j] = xh;
                u[r * e + j] = gamma[j] * xh + beta[j];
            }
        }
        let proj = |slot: SlotId| {
            let w = tape.get(slot);
            let mut out = vec![0.0; rows * e];
            for r in 0..rows {
                matvec_into(w, e, e, &u[r * e..(r + 1) * e], &mut out[r * e..(r + 1) * e]);
            }
            out
        };
        let (q, k, v) = (proj(self.wq), proj(self.wk), proj(self.wv));
        let scale = self.scale();
        let mut w = vec![0.0; nctx * n * n];
        let mut att = vec![0.0; rows * e];
        for c in 0..nctx {
            for i in 0..n {
                let qi = &q[(c * n + i) * e..(c * n + i + 1) * e];
                let logits: Vec<f64> =
                    (0..n).map(|j| scale * dot(qi, &k[(c * n + j) * e..(c * n + j + 1) * e])).collect();
                let row = sel.weights(&logits, c * n + i);
                let ai = &mut att[(c * n + i) * e..(c * n + i + 1) * e];
                for (j, wij) in row.iter().enumerate() {
                    if *wij != 0.0 {
                        ai.iter_mut().zip(&v[(c * n + j) * e..(c * n + j + 1) * e]).for_each(|(a, vv)| *a += wij * vv);
                    }
                }
                w[(c * n + i) * n..(c * n + i + 1) * n].copy_from_slice(&row);
            }
        }
        let (m, mlp_cache) = self.mlp.forward(tape, &u, rows)?;
        let z: Vec<f64> = h.iter().zip(&att).zip(&m).map(|((h, a), m)| h + a + m).collect();
        let (y, out_cache) = match &self.embed_out {
            Some(mo) => {
                let (y, c) = mo.forward(tape, &z, rows)?;
                (y, Some(c))
            }
            None => (z, None),
        };
        let cache = TransformerCache {
            nctx,
            differentiable: sel.differentiable(),
            embed_cache,
            out_cache,
            xhat,
            inv_std,
            u,
            q,
            k,
            v,
            w,
            mlp_cache,
        };
        Ok((y, cache))
    }

    pub fn backward_step(&mut self, cache: &TransformerCache, dy: &[f64]) -> Result<Vec<f64>> {
        let TransformerConfig { tokens: n, embed: e, .. } = self.config;
        let nctx = cache.nctx;
        let rows = nctx * n;
        let dz = match (&self.embed_out, &cache.out_cache) {
            (Some(mo), Some(c)) => mo.backward(&mut self.tape, c, dy)?,
            _ => dy.to_vec(),
        };
        let mut dh = dz.clone();
        let mut du = self.mlp.backward(&mut self.tape, &cache.mlp_cache, &dz)?;
        let mut dq = vec![0.0; rows * e];
        let mut dk = vec![0.0; rows * e];
        let mut dv = vec![0.0; rows * e];
        let scale = self.scale();
        for c in 0..nctx {
            for i in 0..n {
                let datt = &dz[(c * n + i) * e..(c * n + i + 1) * e];
                let row = &cache.w[(c * n + i) * n..(c * n + i + 1) * n];
                let mut dw = vec![0.0; n];
                for j in 0..n {
                    let vj = (c * n + j) * e;
                    if row[j] != 0.0 {
                        dv[vj..vj + e].iter_mut().zip(datt).for_each(|(d, a)| *d += row[j] * a);
                    }
                    dw[j] = dot(datt, &cache.v[vj..vj + e]);
                }
                if !cache.differentiable {
                    continue;
                }
                let da = softmax_backward(row, &dw);
                let qi = (c * n + i) * e;
                for j in 0..n {
                    let kj = (c * n + j) * e;
                    for t in 0..e {
                        dq[qi + t] += scale * da[j] * cache.k[kj + t];
                        dk[kj + t] += scale * da[j] * cache.q[qi + t];
                    }
                }
            }
        }
        for (slot, d) in [(self.wq, &dq), (self.wk, &dk), (self.wv, &dv)] {
            let mut tmp = vec![0.0; e];
            for r in 0..rows {
                let dr = &d[r * e..(r + 1) * e];
                let ur = &cache.u[r * e..(r + 1) * e];
                {
                    let g = self.tape.grad_mut(slot);
                    for a in 0..e {
                        if dr[a] != 0.0 {
                            g[a * e..(a + 1) * e].iter_mut().zip(ur).for_each(|(g, u)| *g += dr[a] * u);
                        }
                    }
                }
                matvec_t_into(self.tape.get(slot), e, e, dr, &mut tmp);
                du[r * e..(r + 1) * e].iter_mut().zip(&tmp).for_each(|(d, t)| *d += t);
            }
        }
        let gamma = self.tape.get(self.ln_gamma).to_vec();
        let mut dgamma = vec![0.0; e];
        let mut dbeta = vec![0.0; e];
        for r in 0..rows {
            let xh = &cache.xhat[r * e..(r + 1) * e];
            let dur = &du[r * e..(r + 1) * e];
            let dxhat: Vec<f64> = dur.iter().zip(&gamma).map(|(d, g)| d * g).collect();
            for j in 0..e {
                dgamma[j] += dur[j] * xh[j];
                dbeta[j] += dur[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / e as f64;
            let m2 = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / e as f64;
            for j in 0..e {
                dh[r * e + j] += cache.inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
        self.tape.grad_mut(self.ln_gamma).iter_mut().zip(&dgamma).for_each(|(g, d)| *g += d);
        self.tape.grad_mut(self.ln_beta).iter_mut().zip(&dbeta).for_each(|(g, d)| *g += d);
        match (&self.embed_in, &cache.embed_cache) {
            (Some(mi), Some(c)) => Ok(mi.backward(&mut self.tape, c, &dh)?),
            _ => Ok(dh),
        }
    }

    fn decode(&self, k: usize) -> Vec<usize> {
        let n = self.config.tokens;
        (0..n).map(|i| k / n.pow(i as u32) % n).collect()
    }
}

impl RandomIfs for TransformerIfs {
    fn dim(&self) -> usize {
        self.config.state_dim()
    }

    fn noise_sigma(&self) -> f64 {
        self.config.noise_sigma
    }

    fn sample_step(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<u64> {
        let n = self.config.tokens;
        let g = gumbel_draws(rng, n * n);
        let (y, c) = self.forward_impl(x, 1, Selection::Pathwise(&g))?;
        out.copy_from_slice(&y);
        let idx = (0..n).map(|i| c.w[i * n..(i + 1) * n].iter().position(|v| *v == 1.0).unwrap_or(0));
        Ok(idx.enumerate().map(|(i, j)| (j * n.pow(i as u32)) as u64).sum())
    }

    fn barycentric(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (y, _) = self.forward_impl(x, 1, Selection::Dense)?;
        out.copy_from_slice(&y);
        Ok(())
    }

    fn branch_count(&self) -> Option<usize> {
        let n = self.config.tokens;
        n.checked_pow(n as u32).filter(|c| *c <= MAX_ENUMERATED_BRANCHES)
    }

    fn apply_branch(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let count = self.branch_count().ok_or_else(|| IfsError::Unsupported("Transformer branch enumeration".into()))?;
        if k >= count {
            return Err(IfsError::Domain(format!("branch {k} out of {count}")));
        }
        let pat = self.decode(k);
        let (y, _) = self.forward_impl(x, 1, Selection::Fixed(&pat))?;
        out.copy_from_slice(&y);
        Ok(())
    }

    /// `p_xi(x) = prod_i alpha_{i, xi_i}(x)`.
    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let count = self.branch_count().ok_or_else(|| IfsError::Unsupported("Transformer branch enumeration".into()))?;
        let alpha = self.attention_weights(x)?;
        Ok((0..count).map(|k| self.decode(k).iter().enumerate().map(|(i, j)| alpha[(i, *j)]).product()).collect())
    }
}

// ---------------------------------------------------------------------------
// Mixture of experts

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Learned constant logits (place-independent).
    Constant,
    /// Gating network on the stage input (place-dependent).
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub dim: usize,
    pub experts: usize,
    /// Hidden widths of every expert.
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
    /// Lipschitz cap of every expert.
    #[serde(default)]
    pub cap: Option<f64>,
    #[serde(default = "one")]
    pub stages: usize,
    #[serde(default = "constant_gating")]
    pub gating: Gating,
    #[serde(default = "default_gate_hidden")]
    pub gate_hidden: usize,
    #[serde(default = "unit")]
    pub temperature: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

fn relu() -> Activation {
    Activation::Relu
}
fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn constant_gating() -> Gating {
    Gating::Constant
}
fn default_gate_hidden() -> usize {
    16
}

impl MoeConfig {
    pub fn two_moons(cap: f64, noise_sigma: f64) -> Self {
        Self {
            dim: 2,
            experts: 8,
            hidden: vec![32],
            activation: Activation::Relu,
            cap: Some(cap),
            stages: 1,
            gating: Gating::Constant,
            gate_hidden: 16,
            temperature: 1.0,
            noise_sigma,
        }
    }

    fn expert_spec(&self) -> MlpSpec {
        let mut dims = vec![self.dim];
        dims.extend(&self.hidden);
        dims.push(self.dim);
        let mut spec = MlpSpec::new(&dims, self.activation);
        spec.spectral_cap = self.cap;
        spec
    }
}

#[derive(Debug, Clone)]
struct MoeStage {
    experts: Vec<Mlp>,
    logits: Option<SlotId>,
    gate: Option<Mlp>,
}

/// `D` stages, each drawing one of `K` expert maps from its selector.
#[derive(Debug, Clone)]
pub struct MoeIfs {
    config: MoeConfig,
    tape: ParamTape,
    stages: Vec<MoeStage>,
}

#[derive(Debug, Clone)]
struct ExpertPass {
    rows: Vec<usize>,
    out: Vec<f64>,
    cache: MlpCache,
}

#[derive(Debug, Clone)]
struct StageCache {
    weights: Vec<f64>,
    passes: Vec<Option<ExpertPass>>,
    gate_cache: Option<MlpCache>,
}

#[derive(Debug, Clone)]
pub struct MoeCache {
    n: usize,
    differentiable: bool,
    stages: Vec<StageCache>,
}

impl MoeIfs {
    pub fn new<R: Rng + ?Sized>(config: MoeConfig, rng: &mut R) -> Result<Self> {
        if config.experts == 0 || config.stages == 0 || config.dim == 0 {
            return Err(IfsError::Domain("MoE needs positive dim, experts and stages".into()));
        }
        if !(config.temperature > 0.0) {
            return Err(IfsError::Kernel(format!("temperature must be > 0, got {}", config.temperature)));
        }
        let mut tape = ParamTape::new();
        let mut stages = Vec::new();
        for s in 0..config.stages {
            let experts = (0..config.experts)
                .map(|k| Mlp::new(config.expert_spec(), &mut tape, &format!("stage{s}.expert{k}")))
                .collect::<std::result::Result<Vec<_>, NnError>>()?;
            let (logits, gate) = match config.gating {
                Gating::Constant => (Some(tape.add(format!("stage{s}.logits"), &[config.experts])), None),
                Gating::Network => {
                    let spec = MlpSpec::new(&[config.dim, config.gate_hidden, config.experts], Activation::Tanh);
                    (None, Some(Mlp::new(spec, &mut tape, &format!("stage{s}.gate"))?))
                }
            };
            stages.push(MoeStage { experts, logits, gate });
        }
        let mut m = Self { config, tape, stages };
        m.init(rng);
        Ok(m)
    }

    fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for st in &mut self.stages {
            for e in &mut st.experts {
                e.init(&mut self.tape, rng);
                e.enforce_cap(&mut self.tape);
            }
            if let Some(g) = &mut st.gate {
                g.init(&mut self.tape, rng);
            }
        }
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    pub fn expert(&self, s: usize, k: usize) -> &Mlp {
        &self.stages[s].experts[k]
    }

    pub fn logits_slot(&self, s: usize) -> Option<SlotId> {
        self.stages[s].logits
    }

    fn stage_logits(&self, s: usize, x: &[f64]) -> Vec<f64> {
        let st = &self.stages[s];
        let t = self.config.temperature;
        match (&st.logits, &st.gate) {
            (Some(l), _) => self.tape.get(*l).iter().map(|v| v / t).collect(),
            (None, Some(g)) => {
                let mut z = vec![0.0; self.config.experts];
                g.eval(&self.tape, x, &mut z);
                z.iter().map(|v| v / t).collect()
            }
            _ => unreachable!("stage without selector"),
        }
    }

    fn stage_probs(&self, s: usize, x: &[f64]) -> Result<Vec<f64>> {
        let p = softmax(&self.stage_logits(s, x), 1.0);
        crate::ifs::check_probabilities(&p, self.config.experts)?;
        Ok(p)
    }

    /// Exact Lipschitz certificates of the experts of stage `s`.
    pub fn expert_certificates(&self, s: usize) -> Vec<f64> {
        self.stages[s].experts.iter().map(|e| e.lipschitz_certificate(&self.tape)).collect()
    }

    /// Product over stages of the largest expert certificate.
    pub fn composite_certificate(&self) -> f64 {
        (0..self.config.stages).map(|s| self.expert_certificates(s).into_iter().fold(0.0, f64::max)).product()
    }

    fn digits(&self, k: usize) -> Vec<usize> {
        let kk = self.config.experts;
        (0..self.config.stages).map(|s| k / kk.pow(s as u32) % kk).collect()
    }

    fn apply_path(&self, path: &[usize], x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = vec![0.0; cur.len()];
        for (s, k) in path.iter().enumerate() {
            self.stages[s].experts[*k].eval(&self.tape, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// `E[w_Xi(x)]` by recursion over stages.
    fn expectation(&self, s: usize, x: &[f64]) -> Result<Vec<f64>> {
        if s == self.config.stages {
            return Ok(x.to_vec());
        }
        let p = self.stage_probs(s, x)?;
        let mut acc = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for (k, pk) in p.iter().enumerate() {
            if *pk == 0.0 {
                continue;
            }
            self.stages[s].experts[k].eval(&self.tape, x, &mut y);
            let sub = self.expectation(s + 1, &y)?;
            acc.iter_mut().zip(&sub).for_each(|(a, v)| *a += pk * v);
        }
        Ok(acc)
    }

    fn contraction_rec(&self, s: usize, x: &[f64], certs: &[Vec<f64>]) -> Result<(f64, f64)> {
        if s == self.config.stages {
            return Ok((1.0, 1.0));
        }
        let p = self.stage_probs(s, x)?;
        let mut y = vec![0.0; x.len()];
        let (mut s2, mut s1) = (0.0, 0.0);
        for (k, pk) in p.iter().enumerate() {
            if *pk == 0.0 {
                continue;
            }
            let (r2, r1) = if s + 1 == self.config.stages {
                (1.0, 1.0)
            } else {
                self.stages[s].experts[k].eval(&self.tape, x, &mut y);
                self.contraction_rec(s + 1, &y, certs)?
            };
            let c = certs[s][k];
            s2 += pk * c * c * r2;
            s1 += pk * c * r1;
        }
        Ok((s2, s1))
    }

    /// Dense (`Selection::Dense`) or sampled batched step without noise.
    pub fn forward_step(&self, x: &[f64], n: usize, sel: Selection) -> Result<(Vec<f64>, MoeCache)> {
        let (d, kk) = (self.config.dim, self.config.experts);
        if x.len() != n * d {
            return Err(IfsError::Dim { expected: n * d, found: x.len() });
        }
        let mut cur = x.to_vec();
        let mut stages = Vec::with_capacity(self.config.stages);
        let t = self.config.temperature;
        for (s, st) in self.stages.iter().enumerate() {
            let (logits, gate_cache) = match (&st.logits, &st.gate) {
                (Some(l), _) => {
                    let l: Vec<f64> = self.tape.get(*l).iter().map(|v| v / t).collect();
                    (l.repeat(n), None)
                }
                (None, Some(g)) => {
                    let (z, c) = g.forward(&self.tape, &cur, n)?;
                    (z.into_iter().map(|v| v / t).collect(), Some(c))
                }
                _ => unreachable!("stage without selector"),
            };
            let mut weights = vec![0.0; n * kk];
            for i in 0..n {
                let w = sel.weights(&logits[i * kk..(i + 1) * kk], i * self.config.stages + s);
                weights[i * kk..(i + 1) * kk].copy_from_slice(&w);
            }
            let mut y = vec![0.0; n * d];
            let mut passes = Vec::with_capacity(kk);
            for (k, e) in st.experts.iter().enumerate() {
                let rows: Vec<usize> = (0..n).filter(|i| weights[i * kk + k] != 0.0).collect();
                if rows.is_empty() {
                    passes.push(None);
                    continue;
                }
                let input: Vec<f64> = rows.iter().flat_map(|i| cur[i * d..(i + 1) * d].iter().copied()).collect();
                let (out, cache) = e.forward(&self.tape, &input, rows.len())?;
                for (r, i) in rows.iter().enumerate() {
                    let w = weights[i * kk + k];
                    y[i * d..(i + 1) * d].iter_mut().zip(&out[r * d..(r + 1) * d]).for_each(|(y, o)| *y += w * o);
                }
                passes.push(Some(ExpertPass { rows, out, cache }));
            }
            stages.push(StageCache { weights, passes, gate_cache });
            cur = y;
        }
        Ok((cur, MoeCache { n, differentiable: sel.differentiable(), stages }))
    }

    pub fn backward_step(&mut self, cache: &MoeCache, dy: &[f64]) -> Result<Vec<f64>> {
        let (d, kk, n) = (self.config.dim, self.config.experts, cache.n);
        let t = self.config.temperature;
        let mut delta = dy.to_vec();
        for (s, sc) in cache.stages.iter().enumerate().rev() {
            let mut dx = vec![0.0; n * d];
            let mut dw = vec![0.0; n * kk];
            for (k, pass) in sc.passes.iter().enumerate() {
                let Some(pass) = pass else { continue };
                let mut up = vec![0.0; pass.rows.len() * d];
                for (r, i) in pass.rows.iter().enumerate() {
                    let w = sc.weights[i * kk + k];
                    let di = &delta[i * d..(i + 1) * d];
                    up[r * d..(r + 1) * d].iter_mut().zip(di).for_each(|(u, dd)| *u = w * dd);
                    dw[i * kk + k] = dot(di, &pass.out[r * d..(r + 1) * d]);
                }
                let dxe = self.stages[s].experts[k].backward(&mut self.tape, &pass.cache, &up)?;
                for (r, i) in pass.rows.iter().enumerate() {
                    dx[i * d..(i + 1) * d].iter_mut().zip(&dxe[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
            }
            if cache.differentiable {
                let mut dlogits = vec![0.0; n * kk];
                for i in 0..n {
                    let dz = softmax_backward(&sc.weights[i * kk..(i + 1) * kk], &dw[i * kk..(i + 1) * kk]);
                    dlogits[i * kk..(i + 1) * kk].iter_mut().zip(&dz).for_each(|(a, b)| *a = b / t);
                }
                let st = &self.stages[s];
                match (&st.logits, &st.gate, &sc.gate_cache) {
                    (Some(l), _, _) => {
                        let g = self.tape.grad_mut(*l);
                        for i in 0..n {
                            g.iter_mut().zip(&dlogits[i * kk..(i + 1) * kk]).for_each(|(g, v)| *g += v);
                        }
                    }
                    (None, Some(gate), Some(gc)) => {
                        let gate = gate.clone();
                        let dxg = gate.backward(&mut self.tape, gc, &dlogits)?;
                        dx.iter_mut().zip(&dxg).for_each(|(a, b)| *a += b);
                    }
                    _ => {}
                }
            }
            delta = dx;
        }
        Ok(delta)
    }
}

impl RandomIfs for MoeIfs {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn noise_sigma(&self) -> f64 {
        self.config.noise_sigma
    }

    fn sample_step(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<u64> {
        let mut cur = x.to_vec();
        let mut idx = 0u64;
        let mut mult = 1u64;
        for s in 0..self.config.stages {
            let p = self.stage_probs(s, &cur)?;
            let k = sample_categorical(&p, rng);
            self.stages[s].experts[k].eval(&self.tape, &cur, out);
            cur.copy_from_slice(out);
            idx = idx.wrapping_add(mult.wrapping_mul(k as u64));
            mult = mult.wrapping_mul(self.config.experts as u64);
        }
        Ok(idx)
    }

    fn barycentric(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.expectation(0, x)?);
        Ok(())
    }

    fn branch_count(&self) -> Option<usize> {
        self.config.experts.checked_pow(self.config.stages as u32).filter(|c| *c <= MAX_ENUMERATED_BRANCHES)
    }

    fn apply_branch(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let count = self.branch_count().ok_or_else(|| IfsError::Unsupported("MoE branch enumeration".into()))?;
        if k >= count {
            return Err(IfsError::Domain(format!("branch {k} out of {count}")));
        }
        out.copy_from_slice(&self.apply_path(&self.digits(k), x));
        Ok(())
    }

    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let count = self.branch_count().ok_or_else(|| IfsError::Unsupported("MoE branch enumeration".into()))?;
        (0..count)
            .map(|k| {
                let mut cur = x.to_vec();
                let mut p = 1.0;
                let mut y = vec![0.0; cur.len()];
                for (s, j) in self.digits(k).into_iter().enumerate() {
                    p *= self.stage_probs(s, &cur)?[j];
                    self.stages[s].experts[j].eval(&self.tape, &cur, &mut y);
                    std::mem::swap(&mut cur, &mut y);
                }
                Ok(p)
            })
            .collect()
    }

    fn certificates(&self) -> Option<Vec<f64>> {
        let count = self.branch_count()?;
        let certs: Vec<Vec<f64>> = (0..self.config.stages).map(|s| self.expert_certificates(s)).collect();
        Some((0..count).map(|k| self.digits(k).iter().enumerate().map(|(s, j)| certs[s][*j]).product()).collect())
    }

    fn place_independent(&self) -> bool {
        self.config.gating == Gating::Constant
    }

    fn average_contraction_at(&self, x: &[f64]) -> Result<(f64, f64)> {
        let certs: Vec<Vec<f64>> = (0..self.config.stages).map(|s| self.expert_certificates(s)).collect();
        if self.place_independent() {
            let mut acc = (1.0, 1.0);
            for (s, c) in certs.iter().enumerate() {
                let p = self.stage_probs(s, x)?;
                acc.0 *= p.iter().zip(c).map(|(p, c)| p * c * c).sum::<f64>();
                acc.1 *= p.iter().zip(c).map(|(p, c)| p * c).sum::<f64>();
            }
            return Ok(acc);
        }
        self.contraction_rec(0, x, &certs)
    }

    fn uniform_contraction(&self) -> Option<f64> {
        if self.place_independent() {
            self.average_contraction_at(&vec![0.0; self.config.dim]).ok().map(|v| v.0)
        } else {
            Some(self.composite_certificate().powi(2))
        }
    }
}

// ---------------------------------------------------------------------------
// Trainable models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Moe(MoeConfig),
    Resnet(ResNetConfig),
    Transformer(TransformerConfig),
}

impl ArchConfig {
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Model> {
        Ok(match self {
            ArchConfig::Moe(c) => Model::Moe(MoeIfs::new(c.clone(), rng)?),
            ArchConfig::Resnet(c) => Model::Resnet(ResNetIfs::new(c.clone(), rng)?),
            ArchConfig::Transformer(c) => Model::Transformer(TransformerIfs::new(c.clone(), rng)?),
        })
    }

    /// Dimension of one IFS state.
    pub fn state_dim(&self) -> usize {
        match self {
            ArchConfig::Moe(c) => c.dim,
            ArchConfig::Resnet(c) => c.dim,
            ArchConfig::Transformer(c) => c.state_dim(),
        }
    }

    pub fn noise_sigma(&self) -> f64 {
        match self {
            ArchConfig::Moe(c) => c.noise_sigma,
            ArchConfig::Resnet(c) => c.noise_sigma,
            ArchConfig::Transformer(c) => c.noise_sigma,
        }
    }

    pub fn set_noise_sigma(&mut self, sigma: f64) {
        match self {
            ArchConfig::Moe(c) => c.noise_sigma = sigma,
            ArchConfig::Resnet(c) => c.noise_sigma = sigma,
            ArchConfig::Transformer(c) => c.noise_sigma = sigma,
        }
    }
}

/// A trainable architecture.
#[derive(Debug, Clone)]
pub enum Model {
    Moe(MoeIfs),
    Resnet(ResNetIfs),
    Transformer(TransformerIfs),
}

#[derive(Debug, Clone)]
pub enum StepCache {
    Moe(MoeCache),
    Resnet(ResNetCache),
    Transformer(TransformerCache),
}

impl Model {
    pub fn config(&self) -> ArchConfig {
        match self {
            Model::Moe(m) => ArchConfig::Moe(m.config.clone()),
            Model::Resnet(m) => ArchConfig::Resnet(m.config.clone()),
            Model::Transformer(m) => ArchConfig::Transformer(m.config.clone()),
        }
    }

    pub fn tape(&self) -> &ParamTape {
        match self {
            Model::Moe(m) => &m.tape,
            Model::Resnet(m) => &m.tape,
            Model::Transformer(m) => &m.tape,
        }
    }

    pub fn tape_mut(&mut self) -> &mut ParamTape {
        match self {
            Model::Moe(m) => &mut m.tape,
            Model::Resnet(m) => &mut m.tape,
            Model::Transformer(m) => &mut m.tape,
        }
    }

    pub fn as_ifs(&self) -> &dyn RandomIfs {
        match self {
            Model::Moe(m) => m,
            Model::Resnet(m) => m,
            Model::Transformer(m) => m,
        }
    }

    pub fn param_count(&self) -> usize {
        self.tape().len()
    }

    pub fn set_noise_sigma(&mut self, sigma: f64) {
        match self {
            Model::Moe(m) => m.config.noise_sigma = sigma,
            Model::Resnet(m) => m.config.noise_sigma = sigma,
            Model::Transformer(m) => m.config.noise_sigma = sigma,
        }
    }

    /// Gumbel variates consumed per state by a sampled step.
    pub fn gumbel_per_state(&self) -> usize {
        match self {
            Model::Moe(m) => m.config.stages * m.config.experts,
            Model::Resnet(_) => 0,
            Model::Transformer(m) => m.config.tokens * m.config.tokens,
        }
    }

    /// Noise-free batched step; `x` is `n x state_dim` row-major.
    pub fn forward_step(&self, x: &[f64], n: usize, sel: Selection) -> Result<(Vec<f64>, StepCache)> {
        Ok(match self {
            Model::Moe(m) => {
                let (y, c) = m.forward_step(x, n, sel)?;
                (y, StepCache::Moe(c))
            }
            Model::Resnet(m) => {
                let (y, c) = m.forward_step(x, n)?;
                (y, StepCache::Resnet(c))
            }
            Model::Transformer(m) => {
                let nctx = n;
                let (y, c) = m.forward_step(x, nctx, sel)?;
                (y, StepCache::Transformer(c))
            }
        })
    }

    /// Accumulates parameter gradients of `<dy, Y>` into the tape.
    pub fn backward_step(&mut self, cache: &StepCache, dy: &[f64]) -> Result<()> {
        match (self, cache) {
            (Model::Moe(m), StepCache::Moe(c)) => m.backward_step(c, dy).map(|_| ()),
            (Model::Resnet(m), StepCache::Resnet(c)) => m.backward_step(c, dy).map(|_| ()),
            (Model::Transformer(m), StepCache::Transformer(c)) => m.backward_step(c, dy).map(|_| ()),
            _ => Err(IfsError::Domain("step cache belongs to a different architecture".into())),
        }
    }

    fn mlps(&self) -> Vec<&Mlp> {
        match self {
            Model::Moe(m) => m.stages.iter().flat_map(|s| s.experts.iter().chain(s.gate.iter())).collect(),
            Model::Resnet(m) => m.blocks.iter().collect(),
            Model::Transformer(m) => {
                m.embed_in.iter().chain(std::iter::once(&m.mlp)).chain(m.embed_out.iter()).collect()
            }
        }
    }

    fn mlps_mut(&mut self) -> (Vec<&mut Mlp>, &mut ParamTape) {
        match self {
            Model::Moe(m) => (m.stages.iter_mut().flat_map(|s| s.experts.iter_mut().chain(s.gate.iter_mut())).collect(), &mut m.tape),
            Model::Resnet(m) => (m.blocks.iter_mut().collect(), &mut m.tape),
            Model::Transformer(m) => (
                m.embed_in.iter_mut().chain(std::iter::once(&mut m.mlp)).chain(m.embed_out.iter_mut()).collect(),
                &mut m.tape,
            ),
        }
    }

    /// Spectral normalisation of every capped layer (`iters` power
    /// iterations, then an exact-norm guard).
    pub fn normalize(&mut self, iters: usize) -> Result<()> {
        let (mlps, tape) = self.mlps_mut();
        for m in mlps {
            if m.spec().spectral_cap.is_some() {
                m.normalize(tape, iters)?;
                m.enforce_cap(tape);
            }
        }
        Ok(())
    }

    pub fn power_states(&self) -> Vec<Vec<PowerState>> {
        self.mlps().iter().map(|m| m.power_states().to_vec()).collect()
    }

    pub fn set_power_states(&mut self, states: Vec<Vec<PowerState>>) -> Result<()> {
        let (mlps, _) = self.mlps_mut();
        if mlps.len() != states.len() {
            return Err(IfsError::Nn(NnError::Shape("power-iteration state count mismatch".into())));
        }
        for (m, s) in mlps.into_iter().zip(states) {
            m.set_power_states(s)?;
        }
        Ok(())
    }

    /// Changes the expert cap of a mixture; the next [`Model::normalize`]
    /// enforces it.
    pub fn set_cap(&mut self, cap: f64) -> Result<()> {
        let Model::Moe(m) = self else {
            return Err(IfsError::Unsupported("only mixtures of experts carry a contraction cap".into()));
        };
        m.config.cap = Some(cap);
        for st in &mut m.stages {
            for e in &mut st.experts {
                e.set_spectral_cap(Some(cap))?;
            }
        }
        Ok(())
    }

    /// Certified Lipschitz cap of the branch family, when the architecture
    /// carries one.
    pub fn certified_cap(&self) -> Option<f64> {
        match self {
            Model::Moe(m) if m.config.cap.is_some() => Some(m.composite_certificate()),
            _ => None,
        }
    }

    pub fn spectral_norm_of(&self, slot: SlotId, rows: usize, cols: usize) -> f64 {
        spectral_norm(self.tape().get(slot), rows, cols)
    }
}

impl RandomIfs for Model {
    fn dim(&self) -> usize {
        self.as_ifs().dim()
    }
    fn noise_sigma(&self) -> f64 {
        self.as_ifs().noise_sigma()
    }
    fn sample_step(&self, x: &[f64], rng: &mut dyn RngCore, out: &mut [f64]) -> Result<u64> {
        self.as_ifs().sample_step(x, rng, out)
    }
    fn barycentric(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.as_ifs().barycentric(x, out)
    }
    fn branch_count(&self) -> Option<usize> {
        self.as_ifs().branch_count()
    }
    fn apply_branch(&self, k: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.as_ifs().apply_branch(k, x, out)
    }
    fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.as_ifs().probabilities(x)
    }
    fn certificates(&self) -> Option<Vec<f64>> {
        self.as_ifs().certificates()
    }
    fn place_independent(&self) -> bool {
        self.as_ifs().place_independent()
    }
    fn average_contraction_at(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.as_ifs().average_contraction_at(x)
    }
    fn uniform_contraction(&self) -> Option<f64> {
        self.as_ifs().uniform_contraction()
    }
}
