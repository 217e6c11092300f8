//! Reverse-mode differentiation for the small dense blocks the architectures
//! are built from, plus spectral normalisation and Adam.
//!
//! Parameters live in one flat [`ParamTape`]; layers refer to named slots of
//! it. Forward passes return explicit caches, backward passes consume them and
//! accumulate into the tape's gradient buffer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, matvec_into, matvec_t_into, norm, spectral_norm};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("stale forward cache (built at tape version {expected}, tape is at {found})")]
    StaleCache { expected: u64, found: u64 },
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint layout does not match the model:\n{0}")]
    LayoutMismatch(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, NnError>;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"IFSNN1";

/// Named region of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlotId(usize);

/// Flat parameters, their layout and a same-shape gradient accumulator.
///
/// Every mutable access to the values bumps `version`, which forward caches
/// record so a backward pass over outdated intermediates is refused.
#[derive(Debug, Clone, Default)]
pub struct ParamTape {
    values: Vec<f64>,
    grads: Vec<f64>,
    layout: Vec<Slot>,
    version: u64,
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero-initialised slot.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> SlotId {
        let slot = Slot { name: name.into(), offset: self.values.len(), shape: shape.to_vec() };
        let len = slot.len();
        self.values.resize(self.values.len() + len, 0.0);
        self.grads.resize(self.values.len(), 0.0);
        self.layout.push(slot);
        self.version += 1;
        SlotId(self.layout.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn layout(&self) -> &[Slot] {
        &self.layout
    }

    pub fn slot(&self, id: SlotId) -> &Slot {
        &self.layout[id.0]
    }

    pub fn find(&self, name: &str) -> Option<SlotId> {
        self.layout.iter().position(|s| s.name == name).map(SlotId)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(NnError::Shape(format!("{} values for a tape of {}", values.len(), self.values.len())));
        }
        self.values.copy_from_slice(values);
        self.version += 1;
        Ok(())
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    #[inline]
    pub fn get(&self, id: SlotId) -> &[f64] {
        let s = &self.layout[id.0];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: SlotId) -> &mut [f64] {
        self.version += 1;
        let s = &self.layout[id.0];
        let (o, l) = (s.offset, s.len());
        &mut self.values[o..o + l]
    }

    #[inline]
    pub fn grad(&self, id: SlotId) -> &[f64] {
        let s = &self.layout[id.0];
        &self.grads[s.offset..s.offset + s.len()]
    }

    #[inline]
    pub fn grad_mut(&mut self, id: SlotId) -> &mut [f64] {
        let s = &self.layout[id.0];
        let (o, l) = (s.offset, s.len());
        &mut self.grads[o..o + l]
    }

    /// Value slice and gradient slice of the same slot at once.
    pub fn split(&mut self, id: SlotId) -> (&[f64], &mut [f64]) {
        let s = &self.layout[id.0];
        let (o, l) = (s.offset, s.len());
        (&self.values[o..o + l], &mut self.grads[o..o + l])
    }

    pub fn layout_json(&self) -> String {
        serde_json::to_string_pretty(&self.layout).expect("layout serialises")
    }

    /// `IFSNN1`, little-endian u64 count, then the values as little-endian f64.
    pub fn write_values<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_values<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|e| NnError::Checkpoint(format!("truncated header: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|e| NnError::Checkpoint(format!("truncated header: {e}")))?;
        let count = u64::from_le_bytes(buf) as usize;
        if count != self.values.len() {
            return Err(NnError::Checkpoint(format!("checkpoint holds {count} values, model has {}", self.values.len())));
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            r.read_exact(&mut buf).map_err(|_| NnError::Checkpoint(format!("truncated at value {i}")))?;
            values.push(f64::from_le_bytes(buf));
        }
        self.set_values(&values)
    }

    /// Writes `path` (binary values) and `path.layout.json` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| NnError::Io { path: path.to_path_buf(), source };
        let f = File::create(path).map_err(io)?;
        self.write_values(BufWriter::new(f)).map_err(io)?;
        let lp = layout_path(path);
        std::fs::write(&lp, self.layout_json()).map_err(|source| NnError::Io { path: lp, source })
    }

    /// Loads values saved by [`ParamTape::save`], refusing when the stored
    /// layout differs from this tape's.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let lp = layout_path(path);
        let text = std::fs::read_to_string(&lp).map_err(|source| NnError::Io { path: lp.clone(), source })?;
        let stored: Vec<Slot> =
            serde_json::from_str(&text).map_err(|e| NnError::Checkpoint(format!("{}: {e}", lp.display())))?;
        if let Some(diff) = layout_diff(&self.layout, &stored) {
            return Err(NnError::LayoutMismatch(diff));
        }
        let f = File::open(path).map_err(|source| NnError::Io { path: path.to_path_buf(), source })?;
        self.read_values(BufReader::new(f))
    }
}

pub fn layout_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".layout.json");
    PathBuf::from(s)
}

/// Human-readable list of slots that differ, or `None` when the layouts agree.
pub fn layout_diff(expected: &[Slot], found: &[Slot]) -> Option<String> {
    let mut lines = Vec::new();
    for e in expected {
        match found.iter().find(|f| f.name == e.name) {
            None => lines.push(format!("- {} {:?} missing from checkpoint", e.name, e.shape)),
            Some(f) if f.shape != e.shape || f.offset != e.offset => lines.push(format!(
                "~ {}: model {:?}@{} vs checkpoint {:?}@{}",
                e.name, e.shape, e.offset, f.shape, f.offset
            )),
            _ => {}
        }
    }
    for f in found {
        if !expected.iter().any(|e| e.name == f.name) {
            lines.push(format!("+ {} {:?} only in checkpoint", f.name, f.shape));
        }
    }
    (!lines.is_empty()).then(|| lines.join("\n"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
    /// `z * Phi(z)` with the exact normal CDF.
    Gelu,
}

const GELU_LIPSCHITZ: f64 = 1.13;

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
            Activation::Tanh => z.tanh(),
            Activation::Gelu => z * normal_cdf(z),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => logistic(z),
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Gelu => normal_cdf(z) + z * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    /// Global Lipschitz constant (GELU's is about 1.129).
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Gelu => GELU_LIPSCHITZ,
            _ => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Self::Relu),
            "softplus" => Ok(Self::Softplus),
            "tanh" => Ok(Self::Tanh),
            "gelu" => Ok(Self::Gelu),
            _ => Err(format!("unknown activation {s:?}")),
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Shape and Lipschitz controls of a dense network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub residual: bool,
    /// Cap on the network's Lipschitz constant, enforced by capping every
    /// linear layer at `cap^(1/L)`.
    #[serde(default)]
    pub spectral_cap: Option<f64>,
}

impl MlpSpec {
    pub fn new(dims: &[usize], activation: Activation) -> Self {
        Self { dims: dims.to_vec(), activation, residual: false, spectral_cap: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(NnError::Spec(format!("dims must have >= 2 positive entries, got {:?}", self.dims)));
        }
        if let Some(c) = self.spectral_cap {
            if !(c > 0.0 && c.is_finite()) {
                return Err(NnError::Spec(format!("spectral_cap must be in (0, inf), got {c}")));
            }
        }
        if self.residual && self.dims[0] != *self.dims.last().unwrap() {
            return Err(NnError::Spec("residual network needs equal input and output widths".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layer_cap(&self) -> Option<f64> {
        self.spectral_cap.map(|c| c.powf(1.0 / self.layers() as f64))
    }
}

/// Persistent power-iteration vectors for one weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerState {
    /// Left singular vector estimate (length `rows`).
    pub u: Vec<f64>,
    /// Right singular vector estimate (length `cols`).
    pub v: Vec<f64>,
}

impl PowerState {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        normalize_or_basis(&mut u);
        normalize_or_basis(&mut v);
        Self { u, v }
    }
}

fn normalize_or_basis(x: &mut [f64]) {
    let n = norm(x);
    if n > 0.0 && n.is_finite() {
        x.iter_mut().for_each(|v| *v /= n);
    } else {
        x.iter_mut().enumerate().for_each(|(i, v)| *v = if i == 0 { 1.0 } else { 0.0 });
    }
}

/// Power-iteration estimate of the top singular value of `w`
/// (row-major `rows x cols`), continuing from `state`.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, iters: usize, state: &mut PowerState) -> f64 {
    let mut wv = vec![0.0; rows];
    for _ in 0..iters {
        matvec_t_into(w, rows, cols, &state.u, &mut state.v);
        if norm(&state.v) == 0.0 {
            return 0.0;
        }
        normalize_or_basis(&mut state.v);
        matvec_into(w, rows, cols, &state.v, &mut state.u);
        if norm(&state.u) == 0.0 {
            return 0.0;
        }
        normalize_or_basis(&mut state.u);
    }
    matvec_into(w, rows, cols, &state.v, &mut wv);
    dot(&state.u, &wv).abs()
}

/// `W <- W * min(1, cap / sigma)` with `sigma` from `iters` power iterations.
/// Returns the estimate of `sigma` before rescaling. Never scales up.
pub fn spectral_normalize(
    w: &mut [f64],
    rows: usize,
    cols: usize,
    cap: f64,
    iters: usize,
    state: &mut PowerState,
) -> Result<f64> {
    if !(cap > 0.0) || iters == 0 {
        return Err(NnError::Spec(format!("spectral_normalize needs cap > 0 and iters >= 1, got {cap}, {iters}")));
    }
    if w.len() != rows * cols || state.u.len() != rows || state.v.len() != cols {
        return Err(NnError::Shape(format!("{rows}x{cols} weight with power state {}x{}", state.u.len(), state.v.len())));
    }
    let sigma = power_iteration(w, rows, cols, iters, state);
    if sigma > cap {
        let s = cap / sigma;
        w.iter_mut().for_each(|x| *x *= s);
    }
    Ok(sigma)
}

/// Dense network `x -> W_L act(... act(W_1 x + b_1) ...) + b_L`, optionally
/// residual.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<SlotId>,
    biases: Vec<SlotId>,
    power: Vec<PowerState>,
}

/// Intermediates of a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    version: u64,
    n: usize,
    /// Input to every linear layer, `n x dims[l]`.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers, `n x dims[l+1]`.
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.n
    }
}

impl Mlp {
    /// Registers `{prefix}.w{l}` / `{prefix}.b{l}` slots on the tape.
    pub fn new(spec: MlpSpec, tape: &mut ParamTape, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut power = Vec::new();
        for (l, w) in spec.dims.windows(2).enumerate() {
            weights.push(tape.add(format!("{prefix}.w{l}"), &[w[1], w[0]]));
            biases.push(tape.add(format!("{prefix}.b{l}"), &[w[1]]));
            let mut u = vec![0.0; w[1]];
            let mut v = vec![0.0; w[0]];
            normalize_or_basis(&mut u);
            normalize_or_basis(&mut v);
            power.push(PowerState { u, v });
        }
        Ok(Self { spec, weights, biases, power })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.spec.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.dims.last().unwrap()
    }

    /// Changes the Lipschitz cap enforced by later normalisation calls.
    pub fn set_spectral_cap(&mut self, cap: Option<f64>) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.spectral_cap = cap;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    pub fn weight_slots(&self) -> &[SlotId] {
        &self.weights
    }

    pub fn bias_slots(&self) -> &[SlotId] {
        &self.biases
    }

    pub fn power_states(&self) -> &[PowerState] {
        &self.power
    }

    pub fn set_power_states(&mut self, states: Vec<PowerState>) -> Result<()> {
        if states.len() != self.power.len()
            || states.iter().zip(&self.power).any(|(a, b)| a.u.len() != b.u.len() || a.v.len() != b.v.len())
        {
            return Err(NnError::Shape("power-iteration state does not match the network".into()));
        }
        self.power = states;
        Ok(())
    }

    /// Uniform(+-1/sqrt(fan_in)) weights and biases, fresh power vectors and,
    /// when capped, 5 normalisation iterations.
    pub fn init<R: Rng + ?Sized>(&mut self, tape: &mut ParamTape, rng: &mut R) {
        for (l, w) in self.spec.dims.clone().windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for v in tape.get_mut(self.weights[l]) {
                *v = rng.gen_range(-bound..=bound);
            }
            for v in tape.get_mut(self.biases[l]) {
                *v = rng.gen_range(-bound..=bound);
            }
            self.power[l] = PowerState::new(w[1], w[0], rng);
        }
        if self.spec.spectral_cap.is_some() {
            self.normalize(tape, 5).expect("valid cap");
        }
    }

    /// Spectral normalisation of every layer at `cap^(1/L)`; returns the
    /// product of the per-layer estimates after rescaling. No-op without cap.
    pub fn normalize(&mut self, tape: &mut ParamTape, iters: usize) -> Result<f64> {
        let Some(cap) = self.spec.layer_cap() else {
            return Ok(self.lipschitz_certificate(tape));
        };
        let mut prod = 1.0;
        for (l, w) in self.spec.dims.clone().windows(2).enumerate() {
            let sigma = spectral_normalize(tape.get_mut(self.weights[l]), w[1], w[0], cap, iters, &mut self.power[l])?;
            prod *= sigma.min(cap);
        }
        Ok(prod)
    }

    /// Rescales any layer whose exact spectral norm still exceeds the
    /// per-layer cap (power iteration under-estimates).
    pub fn enforce_cap(&self, tape: &mut ParamTape) {
        let Some(cap) = self.spec.layer_cap() else { return };
        for (l, w) in self.spec.dims.windows(2).enumerate() {
            let sigma = spectral_norm(tape.get(self.weights[l]), w[1], w[0]);
            if sigma > cap {
                let s = cap / sigma * (1.0 - 1e-12);
                tape.get_mut(self.weights[l]).iter_mut().for_each(|x| *x *= s);
            }
        }
    }

    /// Exact per-layer spectral norms.
    pub fn layer_norms(&self, tape: &ParamTape) -> Vec<f64> {
        self.spec.dims.windows(2).enumerate().map(|(l, w)| spectral_norm(tape.get(self.weights[l]), w[1], w[0])).collect()
    }

    /// Product of exact layer norms and activation constants (plus one for a
    /// residual connection): an upper bound on the Lipschitz constant.
    pub fn lipschitz_certificate(&self, tape: &ParamTape) -> f64 {
        let act = self.spec.activation.lipschitz().powi(self.spec.layers() as i32 - 1);
        let body = self.layer_norms(tape).iter().product::<f64>() * act;
        if self.spec.residual {
            1.0 + body
        } else {
            body
        }
    }

    /// Single-point evaluation without a cache.
    pub fn eval(&self, tape: &ParamTape, x: &[f64], out: &mut [f64]) {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.spec.layers() - 1;
        for (l, w) in self.spec.dims.windows(2).enumerate() {
            next.resize(w[1], 0.0);
            matvec_into(tape.get(self.weights[l]), w[1], w[0], &cur, &mut next);
            for (z, b) in next.iter_mut().zip(tape.get(self.biases[l])) {
                *z += b;
                if l < last {
                    *z = self.spec.activation.apply(*z);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        if self.spec.residual {
            cur.iter_mut().zip(x).for_each(|(c, xi)| *c += xi);
        }
        out.copy_from_slice(&cur);
    }

    /// Batched forward over `n` row-major inputs.
    pub fn forward(&self, tape: &ParamTape, x: &[f64], n: usize) -> Result<(Vec<f64>, MlpCache)> {
        let d0 = self.in_dim();
        if x.len() != n * d0 {
            return Err(NnError::Shape(format!("input of length {} is not {n} x {d0}", x.len())));
        }
        let last = self.spec.layers() - 1;
        let mut inputs = Vec::with_capacity(self.spec.layers());
        let mut pre = Vec::with_capacity(last);
        let mut cur = x.to_vec();
        for (l, w) in self.spec.dims.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let wt = tape.get(self.weights[l]);
            let b = tape.get(self.biases[l]);
            let mut z = vec![0.0; n * dout];
            for i in 0..n {
                let zi = &mut z[i * dout..(i + 1) * dout];
                matvec_into(wt, dout, din, &cur[i * din..(i + 1) * din], zi);
                zi.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
            }
            inputs.push(cur);
            if l < last {
                let act: Vec<f64> = z.iter().map(|&v| self.spec.activation.apply(v)).collect();
                pre.push(z);
                cur = act;
            } else {
                cur = z;
            }
        }
        if self.spec.residual {
            cur.iter_mut().zip(x).for_each(|(c, xi)| *c += xi);
        }
        Ok((cur, MlpCache { version: tape.version(), n, inputs, pre }))
    }

    /// Accumulates parameter gradients for `upstream` (`n x out_dim`) and
    /// returns the input cotangents.
    pub fn backward(&self, tape: &mut ParamTape, cache: &MlpCache, upstream: &[f64]) -> Result<Vec<f64>> {
        if cache.version != tape.version() {
            return Err(NnError::StaleCache { expected: cache.version, found: tape.version() });
        }
        let n = cache.n;
        if upstream.len() != n * self.out_dim() {
            return Err(NnError::Shape(format!("upstream of length {} is not {n} x {}", upstream.len(), self.out_dim())));
        }
        let mut delta = upstream.to_vec();
        for l in (0..self.spec.layers()).rev() {
            let (din, dout) = (self.spec.dims[l], self.spec.dims[l + 1]);
            let input = &cache.inputs[l];
            {
                let (_, gb) = tape.split(self.biases[l]);
                for i in 0..n {
                    gb.iter_mut().zip(&delta[i * dout..(i + 1) * dout]).for_each(|(g, d)| *g += d);
                }
            }
            {
                let (_, gw) = tape.split(self.weights[l]);
                for i in 0..n {
                    let di = &delta[i * dout..(i + 1) * dout];
                    let xi = &input[i * din..(i + 1) * din];
                    for (r, &dr) in di.iter().enumerate() {
                        if dr == 0.0 {
                            continue;
                        }
                        gw[r * din..(r + 1) * din].iter_mut().zip(xi).for_each(|(g, x)| *g += dr * x);
                    }
                }
            }
            let wt = tape.get(self.weights[l]);
            let mut prev = vec![0.0; n * din];
            for i in 0..n {
                matvec_t_into(wt, dout, din, &delta[i * dout..(i + 1) * dout], &mut prev[i * din..(i + 1) * din]);
            }
            if l > 0 {
                let z = &cache.pre[l - 1];
                prev.iter_mut().zip(z).for_each(|(p, &zz)| *p *= self.spec.activation.derivative(zz));
            }
            delta = prev;
        }
        if self.spec.residual {
            delta.iter_mut().zip(upstream).for_each(|(d, u)| *d += u);
        }
        Ok(delta)
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update from the tape's gradients. Refuses non-finite gradients
    /// before touching any state.
    pub fn step(&mut self, tape: &mut ParamTape) -> Result<()> {
        if tape.len() != self.m.len() {
            return Err(NnError::Shape(format!("adam state for {} params, tape has {}", self.m.len(), tape.len())));
        }
        if let Some(index) = tape.grads().iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFinite { what: "gradient", index });
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let grads = tape.grads().to_vec();
        let values = tape.values_mut();
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(dims: &[usize], act: Activation, residual: bool, seed: u64) -> (Mlp, ParamTape) {
        let mut tape = ParamTape::new();
        let mut spec = MlpSpec::new(dims, act);
        spec.residual = residual;
        let mut net = Mlp::new(spec, &mut tape, "net").unwrap();
        net.init(&mut tape, &mut ChaCha8Rng::seed_from_u64(seed));
        (net, tape)
    }

    #[test]
    fn residual_relu_block_direct_evaluation() {
        // x + I relu(I x + 0) + 0 at (1, -1)
        let mut tape = ParamTape::new();
        let mut spec = MlpSpec::new(&[2, 2, 2], Activation::Relu);
        spec.residual = true;
        let net = Mlp::new(spec, &mut tape, "r").unwrap();
        tape.get_mut(net.weight_slots()[0]).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        tape.get_mut(net.weight_slots()[1]).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let (y, _) = net.forward(&tape, &[1.0, -1.0], 1).unwrap();
        assert_eq!(y, vec![2.0, -1.0]);
    }

    #[test]
    fn zero_residual_net_is_identity() {
        let mut tape = ParamTape::new();
        let mut spec = MlpSpec::new(&[3, 5, 3], Activation::Tanh);
        spec.residual = true;
        let net = Mlp::new(spec, &mut tape, "z").unwrap();
        let x = [0.3, -2.0, 7.5, 1.0, 1.0, 1.0];
        let (y, cache) = net.forward(&tape, &x, 2).unwrap();
        assert_eq!(y, x.to_vec());
        let up = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(net.backward(&mut tape, &cache, &up).unwrap(), up.to_vec());
    }

    #[test]
    fn forward_matches_naive_reevaluation() {
        for act in [Activation::Relu, Activation::Softplus, Activation::Tanh, Activation::Gelu] {
            let (net, tape) = random_mlp(&[3, 7, 5, 2], act, false, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x: Vec<f64> = (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (y, _) = net.forward(&tape, &x, 10).unwrap();
            for i in 0..10 {
                // naive: explicit matrices
                let mut h = Matrix::from_vec(3, 1, x[i * 3..i * 3 + 3].to_vec());
                for l in 0..3 {
                    let (din, dout) = (net.spec().dims[l], net.spec().dims[l + 1]);
                    let w = Matrix::from_vec(dout, din, tape.get(net.weight_slots()[l]).to_vec());
                    let mut z = w.matmul(&h);
                    for r in 0..dout {
                        z[(r, 0)] += tape.get(net.bias_slots()[l])[r];
                        if l < 2 {
                            z[(r, 0)] = act.apply(z[(r, 0)]);
                        }
                    }
                    h = z;
                }
                let mut single = [0.0; 2];
                net.eval(&tape, &x[i * 3..i * 3 + 3], &mut single);
                for k in 0..2 {
                    assert!((y[i * 2 + k] - h[(k, 0)]).abs() < 1e-12);
                    assert!((single[k] - h[(k, 0)]).abs() < 1e-12);
                }
            }
        }
    }

    fn probe_loss(net: &Mlp, tape: &ParamTape, x: &[f64], n: usize) -> f64 {
        let (y, _) = net.forward(tape, x, n).unwrap();
        y.iter().enumerate().map(|(i, v)| 0.5 * v * v * (1.0 + 0.1 * i as f64)).sum()
    }

    #[test]
    fn backward_matches_central_differences() {
        for act in [Activation::Softplus, Activation::Tanh, Activation::Gelu, Activation::Relu] {
            for residual in [false, true] {
                let (net, mut tape) = random_mlp(&[2, 6, 4, 2], act, residual, 11);
                let mut rng = ChaCha8Rng::seed_from_u64(12);
                let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let (y, cache) = net.forward(&tape, &x, 4).unwrap();
                let up: Vec<f64> = y.iter().enumerate().map(|(i, v)| v * (1.0 + 0.1 * i as f64)).collect();
                tape.zero_grads();
                let dx = net.backward(&mut tape, &cache, &up).unwrap();
                let grads = tape.grads().to_vec();
                let h = 1e-5;
                let base = tape.values().to_vec();
                for p in 0..tape.len() {
                    let mut v = base.clone();
                    v[p] += h;
                    tape.set_values(&v).unwrap();
                    let lp = probe_loss(&net, &tape, &x, 4);
                    v[p] -= 2.0 * h;
                    tape.set_values(&v).unwrap();
                    let lm = probe_loss(&net, &tape, &x, 4);
                    let fd = (lp - lm) / (2.0 * h);
                    let err = (fd - grads[p]).abs() / fd.abs().max(grads[p].abs()).max(1e-3);
                    assert!(err <= 1e-6, "{act:?} residual={residual} param {p}: fd {fd} vs {}", grads[p]);
                }
                tape.set_values(&base).unwrap();
                for k in 0..x.len() {
                    let mut xp = x.clone();
                    xp[k] += h;
                    let lp = probe_loss(&net, &tape, &xp, 4);
                    xp[k] -= 2.0 * h;
                    let lm = probe_loss(&net, &tape, &xp, 4);
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((fd - dx[k]).abs() <= 1e-6 * fd.abs().max(1e-3), "input {k}: {fd} vs {}", dx[k]);
                }
            }
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let (net, mut tape) = random_mlp(&[2, 8, 2], Activation::Gelu, true, 5);
        let x = [0.1, 0.2, -0.3, 0.4];
        let (_, cache) = net.forward(&tape, &x, 2).unwrap();
        let up = [0.5, -1.0, 2.0, 0.25];
        tape.zero_grads();
        let d1 = net.backward(&mut tape, &cache, &up).unwrap();
        let g1 = tape.grads().to_vec();
        tape.zero_grads();
        let up2: Vec<f64> = up.iter().map(|u| 2.0 * u).collect();
        let d2 = net.backward(&mut tape, &cache, &up2).unwrap();
        for (a, b) in d1.iter().zip(&d2).chain(g1.iter().zip(tape.grads())) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn identity_network_passes_cotangents_through() {
        let mut tape = ParamTape::new();
        let net = Mlp::new(MlpSpec::new(&[2, 2], Activation::Relu), &mut tape, "id").unwrap();
        tape.get_mut(net.weight_slots()[0]).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let (_, cache) = net.forward(&tape, &[3.0, -4.0], 1).unwrap();
        assert_eq!(net.backward(&mut tape, &cache, &[0.7, -0.2]).unwrap(), vec![0.7, -0.2]);
    }

    #[test]
    fn stale_cache_is_refused() {
        let (net, mut tape) = random_mlp(&[2, 3, 2], Activation::Relu, false, 1);
        let (_, cache) = net.forward(&tape, &[1.0, 1.0], 1).unwrap();
        tape.values_mut()[0] += 1.0;
        assert!(matches!(net.backward(&mut tape, &cache, &[1.0, 1.0]), Err(NnError::StaleCache { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (net, tape) = random_mlp(&[2, 3, 2], Activation::Relu, false, 1);
        assert!(matches!(net.forward(&tape, &[1.0, 2.0, 3.0], 1), Err(NnError::Shape(_))));
    }

    #[test]
    fn spectral_normalize_diagonal() {
        let mut w = vec![3.0, 0.0, 0.0, 1.0];
        let mut st = PowerState::new(2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let s = spectral_normalize(&mut w, 2, 2, 0.9, 50, &mut st).unwrap();
        assert!((s - 3.0).abs() < 1e-9);
        for (a, b) in w.iter().zip([0.9, 0.0, 0.0, 0.3]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_normalize_never_upscales() {
        let mut w = vec![0.5, 0.0, 0.0, 0.2];
        let before = w.clone();
        let mut st = PowerState::new(2, 2, &mut ChaCha8Rng::seed_from_u64(1));
        spectral_normalize(&mut w, 2, 2, 0.9, 10, &mut st).unwrap();
        assert_eq!(w, before);
        let mut z = vec![0.0; 6];
        let mut st = PowerState::new(2, 3, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(spectral_normalize(&mut z, 2, 3, 0.9, 5, &mut st).unwrap(), 0.0);
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn power_iteration_matches_jacobi_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut st = PowerState::new(32, 32, &mut rng);
        let est = power_iteration(&w, 32, 32, 50, &mut st);
        let oracle = spectral_norm(&w, 32, 32);
        assert!((est - oracle).abs() < 1e-6 * oracle, "{est} vs {oracle}");
    }

    #[test]
    fn capped_network_is_certified_and_contracts() {
        let mut tape = ParamTape::new();
        let mut spec = MlpSpec::new(&[2, 32, 2], Activation::Relu);
        spec.spectral_cap = Some(0.9);
        let mut net = Mlp::new(spec, &mut tape, "c").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        net.init(&mut tape, &mut rng);
        for v in tape.values_mut() {
            *v *= 4.0;
        }
        net.normalize(&mut tape, 50).unwrap();
        net.enforce_cap(&mut tape);
        let cap = net.spec().layer_cap().unwrap();
        for (l, w) in net.spec().dims.windows(2).enumerate() {
            let wt = tape.get(net.weight_slots()[l]);
            for _ in 0..1000 {
                let x: Vec<f64> = (0..w[0]).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut y = vec![0.0; w[1]];
                matvec_into(wt, w[1], w[0], &x, &mut y);
                assert!(norm(&y) <= cap * norm(&x) + 1e-12);
            }
        }
        assert!(net.lipschitz_certificate(&tape) <= 0.9 + 1e-12);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut tape = ParamTape::new();
        tape.add("p", &[3]);
        let mut adam = AdamState::new(3, 0.1);
        tape.grads_mut().iter_mut().for_each(|g| *g = 1.0);
        adam.step(&mut tape).unwrap();
        for v in tape.values() {
            assert!((v + 0.1 / (1.0 + 1e-8)).abs() < 1e-12);
        }
        let before = tape.values().to_vec();
        tape.zero_grads();
        adam.step(&mut tape).unwrap();
        assert_eq!(adam.t, 2);
        let mut fresh = AdamState::new(3, 0.1);
        let mut t2 = tape.clone();
        fresh.step(&mut t2).unwrap();
        assert_eq!(fresh.t, 1);
        assert_eq!(t2.values(), tape.values());
        assert_ne!(before, tape.values());
    }

    #[test]
    fn adam_refuses_nan_gradient() {
        let mut tape = ParamTape::new();
        tape.add("p", &[2]);
        tape.grads_mut()[1] = f64::NAN;
        let mut adam = AdamState::new(2, 1e-3);
        assert!(matches!(adam.step(&mut tape), Err(NnError::NonFinite { index: 1, .. })));
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn adam_minimises_a_convex_quadratic() {
        // f(p) = sum_i k_i (p_i - t_i)^2 / 2; beta1 = 0.9 overshoots on a
        // quadratic, so the probe damps the first moment
        let k = [1.0, 3.0, 0.5, 2.0];
        let t = [1.0, -2.0, 0.5, 3.0];
        let mut tape = ParamTape::new();
        tape.add("p", &[4]);
        let mut adam = AdamState { beta1: 0.5, ..AdamState::new(4, 0.1) };
        let loss = |p: &[f64]| p.iter().zip(&k).zip(&t).map(|((p, k), t)| 0.5 * k * (p - t) * (p - t)).sum::<f64>();
        let grad = |p: &[f64]| p.iter().zip(&k).zip(&t).map(|((p, k), t)| k * (p - t)).collect::<Vec<f64>>();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let p = tape.values().to_vec();
            losses.push(loss(&p));
            tape.grads_mut().copy_from_slice(&grad(&p));
            adam.step(&mut tape).unwrap();
        }
        for w in losses[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(norm(&grad(tape.values())) < 1e-4);
    }

    #[test]
    fn checkpoint_roundtrip_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ifsnn");
        let (_, tape) = random_mlp(&[2, 4, 2], Activation::Relu, false, 9);
        tape.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..6], b"IFSNN1");
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize, tape.len());
        let (_, mut other) = random_mlp(&[2, 4, 2], Activation::Relu, false, 10);
        other.load(&path).unwrap();
        assert_eq!(other.values(), tape.values());

        let (_, mut wider) = random_mlp(&[2, 5, 2], Activation::Relu, false, 10);
        match wider.load(&path) {
            Err(NnError::LayoutMismatch(diff)) => assert!(diff.contains("net.w0"), "{diff}"),
            other => panic!("expected layout mismatch, got {other:?}"),
        }
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, corrupt).unwrap();
        assert!(matches!(other.load(&path), Err(NnError::Checkpoint(_))));
    }
}
