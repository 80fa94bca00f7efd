//! Linear, model-selection and convex aggregation of preliminary estimators,
//! and the selection among the three aggregates.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distkernel::pen_delta_cached;
use crate::error::{domain, Error, Result};
use crate::modelspace::{ModelRegistry, ModelSpace, SpaceId, WeightScheme, DEFAULT_RANK_TOL};
use crate::scalar::{norm_sq, Real};
use crate::selector::{select, EstimatorCandidate, SelectionConfig, SelectionReport};

/// Largest number of subsets enumerated for the convex family.
pub const SUBSET_GUARD: usize = 100_000;
pub const DEFAULT_SIZE_CAP: usize = 8;

const PG_TOL: f64 = 1e-8;
const PG_MAX_ITER: usize = 10_000;

/// Preliminary estimators `φ_1, …, φ_M` as the columns of an n×M matrix.
#[derive(Debug, Clone)]
pub struct Dictionary<T: Real> {
    phis: DMatrix<T>,
}

impl<T: Real> Dictionary<T> {
    pub fn new(phis: DMatrix<T>) -> Result<Self> {
        if phis.ncols() < 2 {
            return domain(format!("aggregation needs M >= 2 preliminary estimators, got {}", phis.ncols()));
        }
        if phis.iter().any(|x| !x.is_finite()) {
            return domain("dictionary has non-finite entries");
        }
        Ok(Self { phis })
    }

    pub fn n(&self) -> usize {
        self.phis.nrows()
    }

    pub fn m(&self) -> usize {
        self.phis.ncols()
    }

    pub fn phis(&self) -> &DMatrix<T> {
        &self.phis
    }

    pub fn phi(&self, j: usize) -> DVector<T> {
        self.phis.column(j).into_owned()
    }

    /// `Σ λ_j φ_j`.
    pub fn combine(&self, weights: &[T]) -> DVector<T> {
        &self.phis * DVector::from_column_slice(weights)
    }

    /// `S_m`, the span of `{φ_j : j ∈ m}` (0-based `m`).
    pub fn span(&self, m: &[usize]) -> Result<ModelSpace<T>> {
        let cols = self.phis.select_columns(m.iter());
        Ok(ModelSpace::span_of_columns(subset_id(m), &cols, DEFAULT_RANK_TOL)?.with_generators(m.len()))
    }

    pub fn scheme(&self) -> WeightScheme {
        WeightScheme::Aggregation { m_total: self.m() }
    }
}

/// Space id for a subset, with 1-based indices.
pub fn subset_id(m: &[usize]) -> SpaceId {
    SpaceId(format!("S{{{}}}", m.iter().map(|j| j + 1).join(",")))
}

fn phi_label(j: usize, m_total: usize) -> String {
    let w = m_total.to_string().len();
    format!("phi{:0w$}", j + 1)
}

/// `d(n, M) = n / (2 log(eM))`.
pub fn d_n_m(n: usize, m: usize) -> f64 {
    n as f64 / (2.0 * (1.0 + (m as f64).ln()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationDiagnostics {
    /// `max_j ‖φ_j‖ / (σ√n)`; needs σ.
    pub l: Option<f64>,
    pub d_n_m: f64,
    /// Condition `2 ≤ √n L ≤ M ≤ e⁻¹ min(√n L e^{nL²}, e^{√n/(2L)})`.
    pub hm_holds: Option<bool>,
}

pub fn diagnostics<T: Real>(dict: &Dictionary<T>, sigma: Option<f64>) -> AggregationDiagnostics {
    let n = dict.n() as f64;
    let m = dict.m() as f64;
    let l = sigma.filter(|s| *s > 0.0).map(|s| {
        (0..dict.m()).map(|j| dict.phi(j).norm().as_f64()).fold(0.0, f64::max) / (s * n.sqrt())
    });
    let hm_holds = l.map(|l| {
        let snl = n.sqrt() * l;
        // compare in log space; e^{nL²} overflows quickly
        let ln_m = m.ln();
        let ln_a = snl.ln() + n * l * l - 1.0;
        let ln_b = n.sqrt() / (2.0 * l) - 1.0;
        2.0 <= snl && snl <= m && ln_m <= ln_a.min(ln_b)
    });
    AggregationDiagnostics { l, d_n_m: d_n_m(dict.n(), dict.m()), hm_holds }
}

/// `f̂_L = Π_{S_{1..M}} Y`.
pub fn linear_aggregate<T: Real>(dict: &Dictionary<T>, y: &DVector<T>) -> Result<(DVector<T>, ModelSpace<T>)> {
    check_len(dict, y)?;
    let all: Vec<usize> = (0..dict.m()).collect();
    let space = dict.span(&all)?;
    Ok((space.project(y), space))
}

fn check_len<T: Real>(dict: &Dictionary<T>, y: &DVector<T>) -> Result<()> {
    if y.len() != dict.n() {
        return domain(format!("Y has length {} but the dictionary lives in ℝ^{}", y.len(), dict.n()));
    }
    Ok(())
}

/// Selects one `φ_j`, each with the singleton collection `{S_{j}}`.
///
/// Requires `log(eM) ≤ n/2` unless `allow_violation`, in which case the
/// violation is only reported.
pub fn ms_aggregate<T: Real>(
    dict: &Dictionary<T>,
    y: &DVector<T>,
    config: SelectionConfig,
    allow_violation: bool,
) -> Result<SelectionReport> {
    check_len(dict, y)?;
    let n = dict.n();
    let m = dict.m();
    let violated = 1.0 + (m as f64).ln() > n as f64 / 2.0;
    if violated && !allow_violation {
        return Err(Error::Config(format!("log(eM) > n/2 for n = {n}, M = {m}")));
    }
    let spaces: Vec<ModelSpace<T>> = (0..m).map(|j| dict.span(&[j])).collect::<Result<_>>()?;
    let candidates: Vec<EstimatorCandidate<T>> = (0..m)
        .map(|j| EstimatorCandidate::new(phi_label(j, m), dict.phi(j), vec![subset_id(&[j])]))
        .collect();
    let registry = ModelRegistry::build(n, spaces, dict.scheme(), config.kappa)?;
    let mut report = select(&candidates, y, &registry, config)?;
    if violated {
        report.warnings.push(format!("log(eM) > n/2 for n = {n}, M = {m}"));
    }
    Ok(report)
}

/// Subsets `m` with `1 ≤ |m| ≤ limit`, in size-then-lexicographic order.
fn enumerate_subsets(m: usize, limit: usize) -> Result<Vec<Vec<usize>>> {
    let mut total: usize = 0;
    for k in 1..=limit.min(m) {
        total = total.saturating_add(binomial(m, k));
        if total > SUBSET_GUARD {
            return Err(Error::Feasibility(format!(
                "more than {SUBSET_GUARD} subsets with |m| <= {limit} among M = {m}; lower size_cap"
            )));
        }
    }
    Ok((1..=limit.min(m)).flat_map(|k| (0..m).combinations(k)).collect())
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// Result of minimizing a convex quadratic over the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSolution {
    pub weights: Vec<f64>,
    /// `λᵀQλ − 2bᵀλ` at the solution.
    pub value: f64,
    /// `min_j ∇f(λ)ᵀ(e_j − λ)`; nonnegative at an exact minimizer.
    pub kkt_slack: f64,
    pub iterations: usize,
}

/// Euclidean projection onto `{λ ≥ 0, Σλ = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn quad_value(q: &DMatrix<f64>, b: &DVector<f64>, l: &DVector<f64>) -> f64 {
    (l.transpose() * q * l)[(0, 0)] - 2.0 * b.dot(l)
}

fn kkt_slack(q: &DMatrix<f64>, b: &DVector<f64>, l: &DVector<f64>) -> f64 {
    let g = (q * l - b) * 2.0;
    let gl = g.dot(l);
    g.iter().map(|gj| gj - gl).fold(f64::INFINITY, f64::min)
}

/// Minimizes `λᵀQλ − 2bᵀλ` over the simplex for symmetric PSD `Q`.
///
/// Accelerated projected gradient with restarts, stopped when the projected
/// step falls below `1e-8` (scaled by the step size) or after `10⁴`
/// iterations, followed by an exact active-set polish.
pub fn simplex_qp(q: &DMatrix<f64>, b: &DVector<f64>) -> SimplexSolution {
    let m = b.len();
    let lip = 2.0 * q.clone().symmetric_eigenvalues().max().max(1e-300);
    let step = 1.0 / lip;
    let grad = |l: &DVector<f64>| (q * l - b) * 2.0;
    let mut x = DVector::from_element(m, 1.0 / m as f64);
    let mut z = x.clone();
    let mut t = 1.0_f64;
    let mut fx = quad_value(q, b, &x);
    let mut iterations = 0;
    for it in 0..PG_MAX_ITER {
        iterations = it + 1;
        let g = grad(&z);
        let next = DVector::from_vec(project_simplex((&z - &g * step).as_slice()));
        let f_next = quad_value(q, b, &next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if f_next > fx {
            // restart momentum
            z = x.clone();
            t = 1.0;
            continue;
        }
        let moved = (&next - &x).amax();
        z = &next + (&next - &x) * ((t - 1.0) / t_next);
        x = next;
        fx = f_next;
        t = t_next;
        // stationarity: the plain projected-gradient map at x
        let gx = grad(&x);
        let px = DVector::from_vec(project_simplex((&x - &gx * step).as_slice()));
        if (&px - &x).amax() * lip <= PG_TOL && moved * lip <= PG_TOL {
            break;
        }
    }
    let x = polish(q, b, x);
    let value = quad_value(q, b, &x);
    SimplexSolution { kkt_slack: kkt_slack(q, b, &x), weights: x.iter().copied().collect(), value, iterations }
}

/// Primal active-set refinement starting from the support of `x0`.
fn polish(q: &DMatrix<f64>, b: &DVector<f64>, x0: DVector<f64>) -> DVector<f64> {
    let m = b.len();
    let mut best = x0.clone();
    let mut best_val = quad_value(q, b, &best);
    let mut active: Vec<usize> = (0..m).filter(|&j| x0[j] > 1e-10).collect();
    if active.is_empty() {
        return best;
    }
    for _ in 0..4 * m {
        let k = active.len();
        // [2Q_AA 1; 1ᵀ 0] [λ; -ν] = [2b_A; 1]
        let mut kkt = DMatrix::<f64>::zeros(k + 1, k + 1);
        let mut rhs = DVector::<f64>::zeros(k + 1);
        for (r, &i) in active.iter().enumerate() {
            for (c, &j) in active.iter().enumerate() {
                kkt[(r, c)] = 2.0 * q[(i, j)];
            }
            kkt[(r, k)] = 1.0;
            kkt[(k, r)] = 1.0;
            rhs[r] = 2.0 * b[i];
        }
        rhs[k] = 1.0;
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { break };
        if sol.iter().any(|v| !v.is_finite()) {
            break;
        }
        let mut cand = DVector::<f64>::zeros(m);
        for (r, &i) in active.iter().enumerate() {
            cand[i] = sol[r];
        }
        if let Some((r, _)) = active.iter().enumerate().filter(|(r, _)| sol[*r] < 0.0).min_by(|a, b| sol[a.0].total_cmp(&sol[b.0])) {
            // step from the current best towards cand until a coordinate hits zero
            let mut tmax: f64 = 1.0;
            for (rr, &i) in active.iter().enumerate() {
                if sol[rr] < 0.0 && best[i] > sol[rr] {
                    tmax = tmax.min(best[i] / (best[i] - sol[rr]));
                }
            }
            let stepped = &best + (&cand - &best) * tmax.max(0.0);
            let stepped = DVector::from_vec(project_simplex(stepped.as_slice()));
            let v = quad_value(q, b, &stepped);
            if v <= best_val {
                best = stepped;
                best_val = v;
            }
            active.remove(r);
            if active.is_empty() {
                break;
            }
            continue;
        }
        let v = quad_value(q, b, &cand);
        if v <= best_val + 1e-15 * best_val.abs().max(1.0) {
            best = cand;
            best_val = v;
        }
        // add the most violated inactive coordinate, if any
        let g = (q * &best - b) * 2.0;
        let mu = active.iter().map(|&i| g[i]).sum::<f64>() / active.len() as f64;
        let worst = (0..m)
            .filter(|j| !active.contains(j))
            .map(|j| (j, g[j] - mu))
            .filter(|&(_, s)| s < -1e-12 * mu.abs().max(1.0))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((j, _)) => {
                active.push(j);
                active.sort_unstable();
            }
            None => break,
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexSpaceScore {
    pub space: SpaceId,
    pub size: usize,
    pub dim: usize,
    /// `min_λ ‖Y − Π_S f_λ‖² + α‖f_λ − Π_S f_λ‖²`
    pub inner_value: f64,
    pub crit: f64,
    pub weights: Vec<f64>,
    pub kkt_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexReport {
    pub chosen_space: SpaceId,
    pub weights: Vec<f64>,
    pub crit: f64,
    pub size_limit: usize,
    pub d_n_m: f64,
    /// True when `size_cap` cut the family below `d(n, M)`.
    pub capped: bool,
    pub per_space: Vec<ConvexSpaceScore>,
}

/// Inner problem for one space: `min_λ ‖Y − Π_S Φλ‖² + α‖Φλ − Π_S Φλ‖²`.
pub fn convex_inner<T: Real>(dict: &Dictionary<T>, y: &DVector<T>, space: &ModelSpace<T>, alpha: f64) -> SimplexSolution {
    let phi = dict.phis().map(|x| x.as_f64());
    let yf = y.map(|x| x.as_f64());
    let basis = space.basis().map(|x| x.as_f64());
    let g = &basis * (basis.transpose() * &phi);
    let r = &phi - &g;
    let q = g.transpose() * &g + (r.transpose() * &r) * alpha;
    let q = (&q + q.transpose()) * 0.5;
    let b = g.transpose() * &yf;
    let mut sol = simplex_qp(&q, &b);
    sol.value += yf.norm_squared();
    sol
}

/// Convex aggregation: minimize `crit_α(f_λ)` over the simplex, with the
/// spaces `S_m`, `|m| ≤ min(d(n, M), size_cap)`, as the collection.
pub fn convex_aggregate<T: Real>(
    dict: &Dictionary<T>,
    y: &DVector<T>,
    config: SelectionConfig,
    size_cap: usize,
) -> Result<(DVector<T>, ConvexReport)> {
    config.validate()?;
    check_len(dict, y)?;
    let n = dict.n();
    let m = dict.m();
    let d = d_n_m(n, m);
    let natural = (d.floor() as usize).min(m).max(1);
    let limit = natural.min(size_cap.max(1));
    let subsets = enumerate_subsets(m, limit)?;
    let scheme = dict.scheme();
    let alpha = config.alpha;
    let scores: Vec<ConvexSpaceScore> = {
        use rayon::prelude::*;
        subsets
            .par_iter()
            .map(|sub| -> Result<ConvexSpaceScore> {
                let space = dict.span(sub)?;
                if space.dim() + 2 > n {
                    return Err(Error::H0Violation { dim: space.dim(), n });
                }
                let delta = scheme.weight(sub.len())?;
                let sol = convex_inner(dict, y, &space, alpha);
                let s2 = space.residual_variance(y)?.as_f64();
                let pen = config.k * pen_delta_cached(n, space.dim(), delta)?;
                Ok(ConvexSpaceScore {
                    space: space.id.clone(),
                    size: sub.len(),
                    dim: space.dim(),
                    inner_value: sol.value,
                    crit: sol.value + pen * s2,
                    weights: sol.weights,
                    kkt_slack: sol.kkt_slack,
                })
            })
            .collect::<Result<_>>()?
    };
    let best = scores
        .iter()
        .min_by(|a, b| a.crit.total_cmp(&b.crit).then(a.dim.cmp(&b.dim)).then_with(|| a.space.cmp(&b.space)))
        .expect("at least one subset");
    let weights: Vec<T> = best.weights.iter().map(|&w| T::of(w)).collect();
    let estimate = dict.combine(&weights);
    let report = ConvexReport {
        chosen_space: best.space.clone(),
        weights: best.weights.clone(),
        crit: best.crit,
        size_limit: limit,
        d_n_m: d,
        capped: limit < natural,
        per_space: scores.clone(),
    };
    Ok((estimate, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimultaneousReport {
    pub report: SelectionReport,
    pub diagnostics: AggregationDiagnostics,
    pub size_limit: usize,
}

/// Selects among `f̂_L`, `f̂_MS`, `f̂_Cv` with their respective collections,
/// over the union registry.
pub fn simultaneous_select<T: Real>(
    f_l: &DVector<T>,
    f_ms: &DVector<T>,
    f_cv: &DVector<T>,
    dict: &Dictionary<T>,
    y: &DVector<T>,
    config: SelectionConfig,
    size_cap: usize,
    sigma: Option<f64>,
) -> Result<SimultaneousReport> {
    check_len(dict, y)?;
    let n = dict.n();
    let m = dict.m();
    for (name, f) in [("f_L", f_l), ("f_MS", f_ms), ("f_Cv", f_cv)] {
        if f.len() != n {
            return domain(format!("{name} has length {}", f.len()));
        }
    }
    let mut warnings = Vec::new();
    let all: Vec<usize> = (0..m).collect();
    let l_space = dict.span(&all)?;
    if l_space.residual_sq(f_l).as_f64() > 1e-9 * norm_sq(f_l).as_f64().max(1.0) {
        warnings.push("f_L does not lie in the span of the dictionary".to_string());
    }
    let on_vertex = (0..m).any(|j| (f_ms - dict.phi(j)).amax().as_f64() <= 1e-9);
    if !on_vertex {
        warnings.push("f_MS is not one of the preliminary estimators".to_string());
    }
    {
        let phi = dict.phis().map(|x| x.as_f64());
        let target = f_cv.map(|x| x.as_f64());
        let q = phi.transpose() * &phi;
        let b = phi.transpose() * &target;
        let sol = simplex_qp(&q, &b);
        let dist = (sol.value + target.norm_squared()).max(0.0);
        if dist > 1e-6 {
            warnings.push(format!("f_Cv lies outside the convex hull (squared distance {dist:e})"));
        }
    }
    let natural = (d_n_m(n, m).floor() as usize).min(m).max(1);
    let limit = natural.min(size_cap.max(1));
    let cv_subsets = enumerate_subsets(m, limit)?;
    let mut spaces = vec![l_space];
    let mut seen = std::collections::HashSet::new();
    seen.insert(all.clone());
    for j in 0..m {
        if seen.insert(vec![j]) {
            spaces.push(dict.span(&[j])?);
        }
    }
    for sub in &cv_subsets {
        if seen.insert(sub.clone()) {
            spaces.push(dict.span(sub)?);
        }
    }
    let ms_ids: Vec<SpaceId> = (0..m).map(|j| subset_id(&[j])).collect();
    let cv_ids: Vec<SpaceId> = cv_subsets.iter().map(|s| subset_id(s)).collect();
    let candidates = vec![
        EstimatorCandidate::new("Cv", f_cv.clone(), cv_ids),
        EstimatorCandidate::new("L", f_l.clone(), vec![subset_id(&all)]),
        EstimatorCandidate::new("MS", f_ms.clone(), ms_ids),
    ];
    let registry = ModelRegistry::build(n, spaces, dict.scheme(), config.kappa)?;
    let mut report = select(&candidates, y, &registry, config)?;
    if limit < natural {
        warnings.push(format!("convex family capped at |m| <= {limit} (d(n,M) allows {natural})"));
    }
    report.warnings.extend(warnings);
    Ok(SimultaneousReport { report, diagnostics: diagnostics(dict, sigma), size_limit: limit })
}

/// Builds the three aggregates and selects among them.
pub fn aggregate_all<T: Real>(
    dict: &Dictionary<T>,
    y: &DVector<T>,
    config: SelectionConfig,
    size_cap: usize,
    sigma: Option<f64>,
) -> Result<SimultaneousReport> {
    let (f_l, _) = linear_aggregate(dict, y)?;
    let ms = ms_aggregate(dict, y, config, true)?;
    let f_ms = dict.phi(ms.chosen_index);
    let (f_cv, _) = convex_aggregate(dict, y, config, size_cap)?;
    let mut out = simultaneous_select(&f_l, &f_ms, &f_cv, dict, y, config, size_cap, sigma)?;
    out.report.warnings.extend(ms.warnings);
    Ok(out)
}
