//! Selection among linear smoothers `f̂_λ = A_λ Y`.
//!
//! Each smoother gets the space `S_λ` spanned by the right-singular
//! directions of `A⁺_λ − Π̄_λ` with singular value below one, where `A⁺_λ`
//! inverts `A_λ` between `rg(A_λ)` and `rg(A_λ*)` and `Π̄_λ` is the
//! orthogonal projection onto `rg(A_λ*)` restricted to `rg(A_λ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::modelspace::{ModelRegistry, ModelSpace, SpaceId, WeightScheme};
use crate::scalar::Real;
use crate::selector::{select, EstimatorCandidate, SelectionConfig, SelectionReport};

/// Singular values of `M` within this distance of 1 count as `≥ 1`.
pub const UNIT_SINGVAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LinearSmoother<T: Real> {
    pub id: String,
    matrix: DMatrix<T>,
}

impl<T: Real> LinearSmoother<T> {
    pub fn new(id: impl Into<String>, matrix: DMatrix<T>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return domain(format!("smoother must be square, got {}x{}", matrix.nrows(), matrix.ncols()));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return domain("smoother has non-finite entries");
        }
        Ok(Self { id: id.into(), matrix })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, y: &DVector<T>) -> DVector<T> {
        &self.matrix * y
    }

    /// `A = c·I`.
    pub fn scalar_shrinker(id: impl Into<String>, n: usize, c: T) -> Self {
        Self { id: id.into(), matrix: DMatrix::identity(n, n) * c }
    }

    /// `A = Π_S`.
    pub fn projection(id: impl Into<String>, space: &ModelSpace<T>) -> Self {
        Self { id: id.into(), matrix: space.projector() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `K(u) = exp(−u²/2)`
    Gaussian,
    /// `K(u) = 1{|u| < 1}`
    Uniform,
}

impl Kernel {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-0.5 * u * u).exp(),
            Kernel::Uniform => {
                if u.abs() < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Nadaraya–Watson smoother on design points `x` with bandwidth `h`.
pub fn nadaraya_watson<T: Real>(id: impl Into<String>, x: &[f64], h: f64, kernel: Kernel) -> Result<LinearSmoother<T>> {
    if !(h > 0.0 && h.is_finite()) {
        return domain(format!("bandwidth must be positive, got {h}"));
    }
    let n = x.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = kernel.eval((x[i] - x[j]) / h);
        }
        let s: f64 = a.row(i).sum();
        if s <= 0.0 {
            return domain(format!("kernel weights vanish at design point {i}"));
        }
        a.row_mut(i).scale_mut(1.0 / s);
    }
    LinearSmoother::new(id, a.map(T::of))
}

#[derive(Debug, Clone)]
pub struct SmootherDecomposition<T: Real> {
    pub n: usize,
    pub rank: usize,
    /// Orthonormal basis of `rg(A)` (n×r).
    pub left_basis: DMatrix<T>,
    /// Orthonormal basis of `rg(A*)` (n×r).
    pub right_basis: DMatrix<T>,
    /// Singular values of `M = A⁺ − Π̄`, nonincreasing.
    pub singvals_m: Vec<T>,
    /// Right-singular directions of `M`, lifted to ℝⁿ, matching `singvals_m`.
    pub right_dirs_m: DMatrix<T>,
    pub trace_ata: T,
}

fn sorted_svd<T: Real>(m: &DMatrix<T>) -> (DMatrix<T>, Vec<T>, DMatrix<T>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    let s = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = u.select_columns(order.iter());
    let v = vt.transpose().select_columns(order.iter());
    (u, s, v)
}

/// Singular structure of `A` and of `M = A⁺ − Π̄`.
///
/// With `A = UΣVᵀ` of numerical rank `r`, `M` maps `U_r`-coordinates of
/// `rg(A)` to `V_r`-coordinates of `rg(A*)` as `Σ_r⁻¹ − V_rᵀU_r`.
pub fn decompose<T: Real>(smoother: &LinearSmoother<T>) -> SmootherDecomposition<T> {
    let a = smoother.matrix();
    let n = a.nrows();
    let trace_ata = a.iter().fold(T::zero(), |s, &x| s + x * x);
    if n == 0 {
        return empty_decomposition(n, trace_ata);
    }
    let (u, s, v) = sorted_svd(a);
    let smax = s[0];
    let thresh = T::of(1e-10) * smax * T::of_usize(n);
    let rank = if smax > T::zero() { s.iter().take_while(|&&x| x > thresh).count() } else { 0 };
    if rank == 0 {
        return empty_decomposition(n, trace_ata);
    }
    let ur = u.columns(0, rank).into_owned();
    let vr = v.columns(0, rank).into_owned();
    let mut m = -(vr.transpose() * &ur);
    for i in 0..rank {
        m[(i, i)] += T::one() / s[i];
    }
    let (_, sm, qm) = sorted_svd(&m);
    let right_dirs_m = &ur * qm;
    SmootherDecomposition { n, rank, left_basis: ur, right_basis: vr, singvals_m: sm, right_dirs_m, trace_ata }
}

fn empty_decomposition<T: Real>(n: usize, trace_ata: T) -> SmootherDecomposition<T> {
    SmootherDecomposition {
        n,
        rank: 0,
        left_basis: DMatrix::zeros(n, 0),
        right_basis: DMatrix::zeros(n, 0),
        singvals_m: Vec::new(),
        right_dirs_m: DMatrix::zeros(n, 0),
        trace_ata,
    }
}

#[derive(Debug, Clone)]
pub struct SLambda<T: Real> {
    pub space: ModelSpace<T>,
    /// Dimension before capping at `n − 2`.
    pub full_dim: usize,
    pub truncated: bool,
}

impl<T: Real> SmootherDecomposition<T> {
    /// Number of directions of `M` with singular value strictly below one.
    pub fn count_below_one(&self) -> usize {
        let cut = T::of(1.0 - UNIT_SINGVAL_TOL);
        self.singvals_m.iter().filter(|&&s| s < cut).count()
    }

    fn smallest(&self, id: SpaceId, k: usize) -> Result<ModelSpace<T>> {
        let r = self.rank;
        let basis = self.right_dirs_m.columns(r - k, k).into_owned();
        ModelSpace::from_orthonormal(id, basis)
    }

    /// `S_λ` without the `n − 2` cap.
    pub fn s_lambda_full(&self, id: impl Into<SpaceId>) -> Result<ModelSpace<T>> {
        self.smallest(id.into(), self.count_below_one())
    }

    /// `S_λ` (no `k`) or the nested `S_λ^k` (the `k` smallest singular
    /// values). `S_λ` is cut to its `n − 2` best directions when larger.
    pub fn s_lambda(&self, id: impl Into<SpaceId>, k: Option<usize>) -> Result<SLambda<T>> {
        let id = id.into();
        let cap = self.n.saturating_sub(2);
        match k {
            Some(k) => {
                if k == 0 || k > self.rank.min(cap) {
                    return domain(format!("k = {k} outside 1..={}", self.rank.min(cap)));
                }
                Ok(SLambda { space: self.smallest(id, k)?, full_dim: k, truncated: false })
            }
            None => {
                let full = self.count_below_one();
                let d = full.min(cap);
                Ok(SLambda { space: self.smallest(id, d)?, full_dim: full, truncated: d < full })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherInfo {
    pub id: String,
    pub rank: usize,
    pub dim_s_lambda: usize,
    pub full_dim_s_lambda: usize,
    pub truncated: bool,
    pub trace_ata: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSelection {
    pub report: SelectionReport,
    pub a: f64,
    pub smoothers: Vec<SmootherInfo>,
}

/// Default weight constant `(log |Λ|) ∨ 1`.
pub fn default_a(count: usize) -> f64 {
    (count.max(1) as f64).ln().max(1.0)
}

/// Runs the selection over `f̂_λ = A_λ Y` with `Δ(S) = a(1 ∨ dim S)`.
/// With `nested`, each `𝕊_λ` also holds `S_λ^k` for every admissible `k`.
pub fn select_linear<T: Real>(
    smoothers: &[LinearSmoother<T>],
    y: &DVector<T>,
    a: Option<f64>,
    config: SelectionConfig,
    nested: bool,
) -> Result<LinearSelection> {
    if smoothers.is_empty() {
        return domain("no smoothers supplied");
    }
    let n = y.len();
    if let Some(s) = smoothers.iter().find(|s| s.n() != n) {
        return domain(format!("smoother {} is {}x{} but Y has length {n}", s.id, s.n(), s.n()));
    }
    let a = a.unwrap_or_else(|| default_a(smoothers.len()));
    let mut spaces = Vec::new();
    let mut candidates = Vec::new();
    let mut infos = Vec::new();
    for sm in smoothers {
        let dec = decompose(sm);
        let main = dec.s_lambda(format!("{}:S", sm.id), None)?;
        let mut ids = vec![main.space.id.clone()];
        infos.push(SmootherInfo {
            id: sm.id.clone(),
            rank: dec.rank,
            dim_s_lambda: main.space.dim(),
            full_dim_s_lambda: main.full_dim,
            truncated: main.truncated,
            trace_ata: dec.trace_ata.as_f64(),
        });
        spaces.push(main.space);
        if nested {
            for k in 1..=dec.rank.min(n.saturating_sub(2)) {
                let s = dec.s_lambda(format!("{}:S{k}", sm.id), Some(k))?;
                ids.push(s.space.id.clone());
                spaces.push(s.space);
            }
        }
        candidates.push(EstimatorCandidate::new(sm.id.clone(), sm.apply(y), ids));
    }
    let registry = ModelRegistry::build(n, spaces, WeightScheme::Linear { a }, config.kappa)?;
    let mut report = select(&candidates, y, &registry, SelectionConfig { delta: 0.0, ..config })?;
    for info in infos.iter().filter(|i| i.truncated) {
        report.warnings.push(format!(
            "S_lambda of {} truncated from dim {} to {}",
            info.id, info.full_dim_s_lambda, info.dim_s_lambda
        ));
    }
    Ok(LinearSelection { report, a, smoothers: infos })
}
