//! Linear approximation spaces, their weights and the registry holding them.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{domain, Error, Result};
use crate::scalar::{norm_sq, Real};

/// Relative pivot threshold used when orthonormalizing spanning vectors.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Projector Frobenius distance below which two spaces are the same.
pub const DEDUP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpaceId(pub String);

impl SpaceId {
    pub fn new(s: impl Into<String>) -> Self {
        SpaceId(s.into())
    }
}

impl fmt::Display for SpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for SpaceId {
    fn from(s: String) -> Self {
        SpaceId(s)
    }
}

impl From<&str> for SpaceId {
    fn from(s: &str) -> Self {
        SpaceId(s.to_owned())
    }
}

/// A linear subspace of ℝⁿ carried by an orthonormal basis.
#[derive(Debug, Clone)]
pub struct ModelSpace<T: Real> {
    pub id: SpaceId,
    basis: DMatrix<T>,
    /// Number of vectors the space was generated from (`|m|` for spans of
    /// dictionary elements or design columns).
    pub generators: usize,
    pub delta: f64,
}

impl<T: Real> ModelSpace<T> {
    /// The zero space `{0}` in ℝⁿ.
    pub fn zero(id: impl Into<SpaceId>, n: usize) -> Self {
        Self { id: id.into(), basis: DMatrix::zeros(n, 0), generators: 0, delta: 0.0 }
    }

    /// Wraps a basis that is already orthonormal. Checked to `1e-10` (scaled
    /// to the scalar's precision).
    pub fn from_orthonormal(id: impl Into<SpaceId>, basis: DMatrix<T>) -> Result<Self> {
        let d = basis.ncols();
        let gram = basis.transpose() * &basis;
        let tol = orthonormality_tol::<T>();
        let err = (gram - DMatrix::<T>::identity(d, d)).amax().as_f64();
        if err > tol {
            return domain(format!("basis is not orthonormal (max deviation {err:e})"));
        }
        Ok(Self { id: id.into(), basis, generators: d, delta: 0.0 })
    }

    /// Orthonormal basis of the span of `vectors` by column-pivoted QR.
    /// Directions whose pivot falls below `rank_tol` times the largest pivot
    /// are dropped.
    pub fn span_of(id: impl Into<SpaceId>, n: usize, vectors: &[DVector<T>], rank_tol: f64) -> Result<Self> {
        if let Some(bad) = vectors.iter().find(|v| v.len() != n) {
            return domain(format!("vector of length {} in ℝ^{n}", bad.len()));
        }
        let m = if vectors.is_empty() { DMatrix::zeros(n, 0) } else { DMatrix::from_columns(vectors) };
        Self::span_of_columns(id, &m, rank_tol)
    }

    pub fn span_of_columns(id: impl Into<SpaceId>, columns: &DMatrix<T>, rank_tol: f64) -> Result<Self> {
        let id = id.into();
        let generators = columns.ncols();
        let basis = orthonormal_basis(columns, rank_tol);
        Ok(Self { id, basis, generators, delta: 0.0 })
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_generators(mut self, generators: usize) -> Self {
        self.generators = generators;
        self
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// `Π_S v`.
    pub fn project(&self, v: &DVector<T>) -> DVector<T> {
        if self.dim() == 0 {
            return DVector::zeros(v.len());
        }
        &self.basis * (self.basis.tr_mul(v))
    }

    /// `‖v − Π_S v‖²`.
    pub fn residual_sq(&self, v: &DVector<T>) -> T {
        norm_sq(&(v - self.project(v)))
    }

    /// `σ̂²_S = ‖y − Π_S y‖² / (n − dim S)`.
    pub fn residual_variance(&self, y: &DVector<T>) -> Result<T> {
        let n = self.ambient_dim();
        if y.len() != n {
            return domain(format!("vector of length {} in ℝ^{n}", y.len()));
        }
        if self.dim() >= n {
            return domain("residual variance undefined when dim S = n");
        }
        Ok(self.residual_sq(y) / T::of_usize(n - self.dim()))
    }

    /// Dense projector `B Bᵀ`.
    pub fn projector(&self) -> DMatrix<T> {
        &self.basis * self.basis.transpose()
    }

    /// Frobenius distance between the two orthogonal projectors, as
    /// `(‖(I−P₁)B₂‖² + ‖(I−P₂)B₁‖²)^{1/2}` to avoid cancellation.
    pub fn projector_distance(&self, other: &Self) -> f64 {
        let cross = self.basis.tr_mul(&other.basis);
        let r2 = &other.basis - &self.basis * &cross;
        let r1 = &self.basis - &other.basis * cross.transpose();
        (norm_sq_mat(&r1) + norm_sq_mat(&r2)).as_f64().sqrt()
    }
}

fn norm_sq_mat<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

fn orthonormality_tol<T: Real>() -> f64 {
    (T::default_epsilon().as_f64() * 1e6).max(1e-10)
}

/// Orthonormal basis of the column span, rank decided by relative pivot.
pub fn orthonormal_basis<T: Real>(columns: &DMatrix<T>, rank_tol: f64) -> DMatrix<T> {
    let n = columns.nrows();
    if columns.ncols() == 0 || n == 0 {
        return DMatrix::zeros(n, 0);
    }
    let qr = columns.clone().col_piv_qr();
    let r = qr.r();
    let k = r.nrows().min(r.ncols());
    let top = r[(0, 0)].abs();
    if top == T::zero() {
        return DMatrix::zeros(n, 0);
    }
    let thresh = top * T::of(rank_tol);
    let rank = (0..k).take_while(|&i| r[(i, i)].abs() > thresh).count();
    let q = qr.q();
    q.columns(0, rank).into_owned()
}

/// Weight schemes `Δ` attached to spaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum WeightScheme {
    /// `Δ(S_m) = |m| + log C(M, |m|)`.
    Aggregation { m_total: usize },
    /// `Δ(S) = log C(p, D) + log(1 + D)` with `D = dim S`.
    VarSel { p: usize },
    /// `Δ(S) = a·(1 ∨ dim S)`.
    Linear { a: f64 },
    /// Weights supplied by the caller on each space.
    Explicit,
}

impl WeightScheme {
    /// Weight for a space of the given size: `|m|` for aggregation, the
    /// dimension otherwise.
    pub fn weight(&self, size: usize) -> Result<f64> {
        match *self {
            WeightScheme::Aggregation { m_total } => {
                if size > m_total {
                    return domain(format!("|m| = {size} exceeds M = {m_total}"));
                }
                Ok(size as f64 + ln_binomial(m_total as u64, size as u64))
            }
            WeightScheme::VarSel { p } => {
                if size > p {
                    return domain(format!("D = {size} exceeds p = {p}"));
                }
                Ok(ln_binomial(p as u64, size as u64) + (1.0 + size as f64).ln())
            }
            WeightScheme::Linear { a } => {
                if !(a >= 1.0) || !a.is_finite() {
                    return domain(format!("linear weight constant must be >= 1, got {a}"));
                }
                Ok(a * (size.max(1) as f64))
            }
            WeightScheme::Explicit => domain("explicit scheme carries per-space weights"),
        }
    }

    /// Weight of a concrete space under this scheme.
    pub fn weight_of<T: Real>(&self, space: &ModelSpace<T>) -> Result<f64> {
        match self {
            WeightScheme::Aggregation { .. } => self.weight(space.generators),
            WeightScheme::Explicit => Ok(space.delta),
            _ => self.weight(space.dim()),
        }
    }

    /// Analytic upper bound on `Σ` over the scheme's full (possibly
    /// unmaterialized) family.
    pub fn sigma_bound(&self) -> Option<f64> {
        match *self {
            WeightScheme::VarSel { p } => Some(1.0 + (1.0 + p as f64).ln()),
            WeightScheme::Aggregation { m_total } => {
                Some((1..=m_total).map(|k| (-(k as f64)).exp()).sum())
            }
            _ => None,
        }
    }
}

/// `Σ_{D=0}^{d_max} C(p, D) e^{−Δ(D)}` for the variable-selection weights,
/// which collapses to `Σ 1/(1+D)`.
pub fn varsel_sigma(p: usize, d_max: usize) -> f64 {
    (0..=d_max.min(p)).map(|d| 1.0 / (1.0 + d as f64)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    Enumerated,
    AnalyticBound,
}

/// Largest registry for which `Σ` is summed term by term.
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// A finite family of spaces with weights, `Σ`, and assumption flags.
#[derive(Debug, Clone)]
pub struct ModelRegistry<T: Real> {
    n: usize,
    spaces: Vec<ModelSpace<T>>,
    index: HashMap<SpaceId, usize>,
    pub sigma: f64,
    pub sigma_source: SigmaSource,
    pub kappa: f64,
    pub scheme: WeightScheme,
    h4: Vec<bool>,
}

impl<T: Real> ModelRegistry<T> {
    /// Validates, weights and deduplicates `spaces`. Ids of spaces merged
    /// into an earlier equal space stay resolvable as aliases.
    pub fn build(n: usize, spaces: Vec<ModelSpace<T>>, scheme: WeightScheme, kappa: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa < 1.0) {
            return Err(Error::Config(format!("kappa must lie in (0, 1), got {kappa}")));
        }
        let mut weighted = Vec::with_capacity(spaces.len());
        for mut s in spaces {
            if s.ambient_dim() != n {
                return domain(format!("space {} lives in ℝ^{} not ℝ^{n}", s.id, s.ambient_dim()));
            }
            if s.dim() + 2 > n {
                return Err(Error::H0Violation { dim: s.dim(), n });
            }
            s.delta = scheme.weight_of(&s)?;
            if !(s.delta >= 0.0 && s.delta.is_finite()) {
                return domain(format!("space {} has invalid weight {}", s.id, s.delta));
            }
            weighted.push(s);
        }
        let (spaces, index) = dedup(n, weighted)?;
        let (sigma, sigma_source) = match scheme.sigma_bound() {
            Some(bound) if spaces.len() > ENUMERATION_LIMIT => (bound, SigmaSource::AnalyticBound),
            _ => (spaces.iter().map(|s| (-s.delta).exp()).sum(), SigmaSource::Enumerated),
        };
        let h4 = spaces
            .iter()
            .map(|s| {
                let m = (s.dim() as f64).max(s.delta);
                (1.0..=kappa * n as f64).contains(&m)
            })
            .collect();
        Ok(Self { n, spaces, index, sigma, sigma_source, kappa, scheme, h4 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spaces(&self) -> &[ModelSpace<T>] {
        &self.spaces
    }

    pub fn len(&self) -> usize {
        self.spaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spaces.is_empty()
    }

    pub fn position(&self, id: &SpaceId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &SpaceId) -> Option<&ModelSpace<T>> {
        self.position(id).map(|i| &self.spaces[i])
    }

    pub fn h4_holds(&self, i: usize) -> bool {
        self.h4[i]
    }

    pub fn h4_all(&self) -> bool {
        self.h4.iter().all(|&b| b)
    }
}

/// Merges spaces with equal range. Candidates are bucketed by dimension and
/// the squared norm of a fixed probe's projection, then compared exactly.
fn dedup<T: Real>(n: usize, spaces: Vec<ModelSpace<T>>) -> Result<(Vec<ModelSpace<T>>, HashMap<SpaceId, usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0f_5ace);
    let probe = DVector::<T>::from_fn(n, |_, _| T::of(StandardNormal.sample(&mut rng)));
    let probe_norm = norm_sq(&probe).as_f64().max(1.0);
    let fingerprints: Vec<f64> = spaces
        .iter()
        .map(|s| if s.dim() == 0 { 0.0 } else { norm_sq(&s.basis.tr_mul(&probe)).as_f64() / probe_norm })
        .collect();
    let mut order: Vec<usize> = (0..spaces.len()).collect();
    order.sort_by(|&a, &b| {
        spaces[a]
            .dim()
            .cmp(&spaces[b].dim())
            .then(fingerprints[a].total_cmp(&fingerprints[b]))
            .then(a.cmp(&b))
    });
    let fp_tol = 1e-7_f64.max(T::default_epsilon().as_f64() * 1e3);
    // group head (in sorted order) for each original index
    let mut head: Vec<usize> = (0..spaces.len()).collect();
    for (pos, &i) in order.iter().enumerate() {
        for &k in order[..pos].iter().rev() {
            if spaces[k].dim() != spaces[i].dim() || fingerprints[i] - fingerprints[k] > fp_tol {
                break;
            }
            if head[k] == k && spaces[i].projector_distance(&spaces[k]) < dedup_tol::<T>() {
                head[i] = k;
                break;
            }
        }
    }
    // the smallest original index of each group is kept
    let mut keeper: HashMap<usize, usize> = HashMap::new();
    for (i, &h) in head.iter().enumerate() {
        let e = keeper.entry(h).or_insert(i);
        *e = (*e).min(i);
    }
    let keep_of = |i: usize| keeper[&head[i]];
    let mut min_delta: HashMap<usize, f64> = HashMap::new();
    for (i, s) in spaces.iter().enumerate() {
        let e = min_delta.entry(keep_of(i)).or_insert(s.delta);
        *e = e.min(s.delta);
    }
    let mut out: Vec<ModelSpace<T>> = Vec::new();
    let mut new_pos: HashMap<usize, usize> = HashMap::new();
    let mut aliases: Vec<(SpaceId, usize)> = Vec::new();
    for (i, mut s) in spaces.into_iter().enumerate() {
        let k = keep_of(i);
        if k == i {
            s.delta = min_delta[&i];
            new_pos.insert(i, out.len());
            out.push(s);
        } else {
            aliases.push((s.id, k));
        }
    }
    let mut index = HashMap::new();
    for (p, s) in out.iter().enumerate() {
        if index.insert(s.id.clone(), p).is_some() {
            return domain(format!("duplicate space id {}", s.id));
        }
    }
    for (id, k) in aliases {
        if index.insert(id.clone(), new_pos[&k]).is_some() {
            return domain(format!("duplicate space id {id}"));
        }
    }
    Ok((out, index))
}

fn dedup_tol<T: Real>() -> f64 {
    DEDUP_TOL.max(T::default_epsilon().as_f64().sqrt() * 10.0)
}
