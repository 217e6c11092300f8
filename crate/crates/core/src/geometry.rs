//! Point clouds, Hausdorff / squared-distance computations and synthetic
//! dataset generators.
//!
//! A [`PointCloud`] plays two roles: the empirical measure of a sample
//! (uniform weights `1/n`) and a finite approximation of a compact set fed to
//! the Hutchinson operator.

use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dist, sq_dist, Matrix};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("point cloud must contain at least one point")]
    Empty,
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("coordinate buffer of length {len} is not a multiple of dim {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("weights invalid: {0}")]
    Weights(String),
    #[error("invalid dataset spec: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Finite weighted point set in `R^dim`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl PointCloud {
    /// Cloud with uniform weights `1/n`.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        Self::check_shape(dim, coords.len())?;
        let n = coords.len() / dim;
        Ok(Self { dim, coords, weights: vec![1.0 / n as f64; n] })
    }

    /// Cloud with explicit weights; they must be nonnegative and sum to 1
    /// within `1e-9`.
    pub fn with_weights(dim: usize, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        Self::check_shape(dim, coords.len())?;
        let n = coords.len() / dim;
        if weights.len() != n {
            return Err(GeometryError::Weights(format!("{} weights for {} points", weights.len(), n)));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GeometryError::Weights("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GeometryError::Weights(format!("weights sum to {total}")));
        }
        Ok(Self { dim, coords, weights })
    }

    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points.first().map(|p| p.as_ref().len()).ok_or(GeometryError::Empty)?;
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(GeometryError::DimMismatch(dim, p.len()));
            }
            coords.extend_from_slice(p);
        }
        Self::new(dim, coords)
    }

    fn check_shape(dim: usize, len: usize) -> Result<()> {
        if dim == 0 {
            return Err(GeometryError::ZeroDim);
        }
        if len == 0 {
            return Err(GeometryError::Empty);
        }
        if len % dim != 0 {
            return Err(GeometryError::Ragged { len, dim });
        }
        Ok(())
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() <= 1e-12 * w.max(1.0))
    }

    /// Same points, new coordinates (weights preserved).
    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != self.coords.len() {
            return Err(GeometryError::Ragged { len: coords.len(), dim: self.dim });
        }
        Ok(Self { dim: self.dim, coords, weights: self.weights.clone() })
    }

    /// Uniform subsample without replacement (uniform weights). Returns a
    /// copy when `n >= len`.
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> PointCloud {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx = sample_indices(rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    /// Points at the given indices, uniform weights.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let mut coords = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            coords.extend_from_slice(self.point(i));
        }
        PointCloud { dim: self.dim, coords, weights: vec![1.0 / idx.len() as f64; idx.len()] }
    }

    /// Union of several clouds with uniform weights.
    pub fn concat(parts: &[PointCloud]) -> Result<PointCloud> {
        let dim = parts.first().ok_or(GeometryError::Empty)?.dim;
        let mut coords = Vec::new();
        for p in parts {
            if p.dim != dim {
                return Err(GeometryError::DimMismatch(dim, p.dim));
            }
            coords.extend_from_slice(&p.coords);
        }
        PointCloud::new(dim, coords)
    }

    /// Reinterpret `n` points of dimension `dim` as `n * dim / new_dim` points.
    /// Used to split context-space samples into their tokens.
    pub fn reshape(&self, new_dim: usize) -> Result<PointCloud> {
        PointCloud::new(new_dim, self.coords.clone())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (p, w) in self.points().zip(&self.weights) {
            for (mi, x) in m.iter_mut().zip(p) {
                *mi += w * x;
            }
        }
        m
    }

    pub fn max_abs_coord(&self) -> f64 {
        self.coords.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Mean Euclidean distance over distinct pairs; clouds above `max_points`
    /// are evaluated on their first `max_points` points.
    pub fn spread(&self, max_points: usize) -> f64 {
        let n = self.len().min(max_points);
        if n < 2 {
            return 0.0;
        }
        let len = self.len();
        let idx: Vec<usize> = (0..n).map(|k| k * len / n).collect();
        let total: f64 = (0..n)
            .into_par_iter()
            .map(|i| (i + 1..n).map(|j| dist(self.point(idx[i]), self.point(idx[j]))).sum::<f64>())
            .collect::<Vec<_>>()
            .iter()
            .sum();
        total / (n * (n - 1) / 2) as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).chain(["w".to_string()]).collect();
        writeln!(w, "{}", header.join(","))?;
        let mut line = String::new();
        for (p, wt) in self.points().zip(&self.weights) {
            line.clear();
            for x in p {
                line.push_str(&format!("{x},"));
            }
            line.push_str(&format!("{wt}"));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<PointCloud> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| GeometryError::Csv("missing header".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 2 || cols.last() != Some(&"w") {
            return Err(GeometryError::Csv(format!("bad header `{header}`")));
        }
        let dim = cols.len() - 1;
        for (k, c) in cols[..dim].iter().enumerate() {
            if *c != format!("x{k}") {
                return Err(GeometryError::Csv(format!("bad header column `{c}`")));
            }
        }
        let mut coords = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != dim + 1 {
                return Err(GeometryError::Csv(format!("row {} has {} fields", lineno + 2, fields.len())));
            }
            for (k, f) in fields.iter().enumerate() {
                let v: f64 = f
                    .parse()
                    .map_err(|_| GeometryError::Csv(format!("row {}: cannot parse `{f}`", lineno + 2)))?;
                if k < dim {
                    coords.push(v);
                } else {
                    weights.push(v);
                }
            }
        }
        PointCloud::with_weights(dim, coords, weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    SierpinskiVertices,
    GaussianMixture,
    CantorEndpoints,
}

impl std::str::FromStr for DatasetKind {
    type Err = GeometryError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(Self::TwoMoons),
            "sierpinski_vertices" => Ok(Self::SierpinskiVertices),
            "gaussian_mixture" => Ok(Self::GaussianMixture),
            "cantor_endpoints" => Ok(Self::CantorEndpoints),
            other => Err(GeometryError::Config(format!("unsupported dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub noise: f64,
    pub radius: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn two_moons(n: usize, seed: u64) -> Self {
        Self { kind: DatasetKind::TwoMoons, n, noise: 0.1, radius: 2.0, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(GeometryError::Config("n must be >= 1".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(GeometryError::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(GeometryError::Config(format!("radius must be > 0, got {}", self.radius)));
        }
        Ok(())
    }
}

/// Number of components of the Gaussian mixture dataset.
pub const MIXTURE_COMPONENTS: usize = 8;

/// Centre offset of the lower moon relative to the upper one.
pub fn two_moons_offset(radius: f64) -> [f64; 2] {
    [radius, radius / 2.0]
}

/// Draw a synthetic dataset. Pure function of the spec (including its seed).
///
/// * `two_moons`: the upper half-circle `r (cos t, sin t)` and the lower
///   half-circle `(r, r/2) - r (cos t, sin t)`, `t ~ U[0, pi]`, with
///   isotropic Gaussian noise. The first `ceil(n/2)` points are on the upper
///   moon.
/// * `gaussian_mixture`: [`MIXTURE_COMPONENTS`] equally weighted isotropic
///   Gaussians (std `noise`) centred on the circle of radius `radius`.
/// * `sierpinski_vertices`: vertices of random depth-24 addresses in the
///   gasket with corners `(0,0), (r,0), (r/2, r sqrt(3)/2)`, plus noise.
/// * `cantor_endpoints`: random depth-24 endpoints of the middle-thirds
///   Cantor set on `[0, r]`, plus noise (1-D).
pub fn generate(spec: &DatasetSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = spec.radius;
    let n = spec.n;
    let noise = |rng: &mut ChaCha8Rng| -> f64 {
        let g: f64 = StandardNormal.sample(rng);
        spec.noise * g
    };
    let (dim, coords) = match spec.kind {
        DatasetKind::TwoMoons => {
            let upper = n.div_ceil(2);
            let off = two_moons_offset(r);
            let mut c = Vec::with_capacity(2 * n);
            for i in 0..n {
                let t = rng.gen::<f64>() * std::f64::consts::PI;
                let (x, y) = if i < upper {
                    (r * t.cos(), r * t.sin())
                } else {
                    (off[0] - r * t.cos(), off[1] - r * t.sin())
                };
                let (nx, ny) = (noise(&mut rng), noise(&mut rng));
                c.push(x + nx);
                c.push(y + ny);
            }
            (2, c)
        }
        DatasetKind::GaussianMixture => {
            let mut c = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let k = rng.gen_range(0..MIXTURE_COMPONENTS);
                let a = 2.0 * std::f64::consts::PI * k as f64 / MIXTURE_COMPONENTS as f64;
                let (nx, ny) = (noise(&mut rng), noise(&mut rng));
                c.push(r * a.cos() + nx);
                c.push(r * a.sin() + ny);
            }
            (2, c)
        }
        DatasetKind::SierpinskiVertices => {
            let v = [[0.0, 0.0], [r, 0.0], [0.5 * r, r * 3f64.sqrt() / 2.0]];
            let mut c = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let (mut x, mut y) = (0.0, 0.0);
                let mut scale = 0.5;
                for _ in 0..24 {
                    let k = rng.gen_range(0..3);
                    x += scale * v[k][0];
                    y += scale * v[k][1];
                    scale *= 0.5;
                }
                // the last address digit fixes a vertex of the level-24 cell
                let k = rng.gen_range(0..3);
                x += 2.0 * scale * v[k][0];
                y += 2.0 * scale * v[k][1];
                let (nx, ny) = (noise(&mut rng), noise(&mut rng));
                c.push(x + nx);
                c.push(y + ny);
            }
            (2, c)
        }
        DatasetKind::CantorEndpoints => {
            let mut c = Vec::with_capacity(n);
            for _ in 0..n {
                let mut x = 0.0;
                let mut scale = 2.0 / 3.0;
                for _ in 0..24 {
                    if rng.gen::<bool>() {
                        x += scale;
                    }
                    scale /= 3.0;
                }
                if rng.gen::<bool>() {
                    x += 1.5 * scale; // right endpoint of the level-24 interval
                }
                c.push(r * x + noise(&mut rng));
            }
            (1, c)
        }
    };
    PointCloud::new(dim, coords)
}

/// `max_{x in a} min_{y in b} |x - y|`, with the early-break scan: a point of
/// `a` stops scanning as soon as it is provably below the running maximum.
pub fn directed_hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.dim != b.dim {
        return Err(GeometryError::DimMismatch(a.dim, b.dim));
    }
    let mut cmax2 = 0.0_f64;
    for x in a.points() {
        let mut cmin2 = f64::INFINITY;
        let mut dominated = false;
        for y in b.points() {
            let d2 = sq_dist(x, y);
            if d2 < cmin2 {
                cmin2 = d2;
                if cmin2 <= cmax2 {
                    dominated = true;
                    break;
                }
            }
        }
        if !dominated && cmin2 > cmax2 {
            cmax2 = cmin2;
        }
    }
    Ok(cmax2.sqrt())
}

/// Hausdorff distance between the point sets of `a` and `b` (weights ignored).
pub fn hausdorff_distance(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let (ab, ba) = rayon::join(|| directed_hausdorff(a, b), || directed_hausdorff(b, a));
    Ok(ab?.max(ba?))
}

/// `C[i][j] = |a_i - b_j|^2`.
pub fn pairwise_sq_dists(a: &PointCloud, b: &PointCloud) -> Result<Matrix> {
    if a.dim != b.dim {
        return Err(GeometryError::DimMismatch(a.dim, b.dim));
    }
    let m = b.len();
    let mut data = vec![0.0; a.len() * m];
    data.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let x = a.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = sq_dist(x, b.point(j));
        }
    });
    Ok(Matrix::from_vec(a.len(), m, data))
}

/// Box-counting dimension estimate: least-squares slope of `log N(s)` against
/// `log(1/s)` for box sides `s = 2^-k`, `k` in `levels`.
pub fn box_counting_dimension(cloud: &PointCloud, levels: std::ops::RangeInclusive<u32>) -> f64 {
    use std::collections::HashSet;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in levels {
        let inv = f64::from(2u32.pow(k));
        let boxes: HashSet<Vec<i64>> = cloud
            .points()
            .map(|p| p.iter().map(|v| (v * inv).floor() as i64).collect())
            .collect();
        xs.push(inv.ln());
        ys.push((boxes.len() as f64).ln());
    }
    least_squares_slope(&xs, &ys)
}

pub(crate) fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
