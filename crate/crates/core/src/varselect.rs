//! Variable selection: candidate supports from several procedures, scored by
//! `crit(m) = ‖Y − Π_{S_m}Y‖² + K·pen_Δ(S_m)·σ̂²_{S_m}`.

use std::collections::BTreeMap;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distkernel::pen_delta_cached;
use crate::error::{domain, Error, Result};
use crate::modelspace::{ModelRegistry, ModelSpace, SpaceId, WeightScheme, DEFAULT_RANK_TOL};
use crate::scalar::Real;
use crate::selector::{select, EstimatorCandidate, SelectionConfig, SelectionReport};

pub const EXHAUSTIVE_GUARD: usize = 1_000_000;
pub const RIDGE_GRID: [f64; 5] = [1e-3, 1e-2, 1e-1, 1.0, 5.0];
pub const PATH_DMAX_CAP: usize = 30;

/// Default exhaustive `D_max` by number of predictors.
pub fn default_exhaustive_dmax(p: usize) -> usize {
    match p {
        0..=50 => 4,
        51..=100 => 3,
        _ => 2,
    }
}

/// Default `D_max` for path generators: `min(n − 2, p, 30)`.
pub fn default_path_dmax(n: usize, p: usize) -> usize {
    n.saturating_sub(2).min(p).min(PATH_DMAX_CAP)
}

#[derive(Debug, Clone)]
pub struct DesignMatrix<T: Real> {
    x: DMatrix<T>,
    labels: Vec<String>,
}

impl<T: Real> DesignMatrix<T> {
    pub fn new(x: DMatrix<T>, labels: Option<Vec<String>>) -> Result<Self> {
        if x.ncols() < 2 {
            return domain(format!("variable selection needs p >= 2, got {}", x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return domain("design has non-finite entries");
        }
        let labels = match labels {
            Some(l) if l.len() != x.ncols() => return domain(format!("{} labels for {} columns", l.len(), x.ncols())),
            Some(l) => l,
            None => (1..=x.ncols()).map(|j| format!("x{j}")).collect(),
        };
        Ok(Self { x, labels })
    }

    pub fn x(&self) -> &DMatrix<T> {
        &self.x
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// `S_m`, spanned by the columns in `m` (0-based).
    pub fn space(&self, m: &[usize]) -> Result<ModelSpace<T>> {
        let id = support_id(m);
        if m.is_empty() {
            return Ok(ModelSpace::zero(id, self.n()));
        }
        let cols = self.x.select_columns(m.iter());
        Ok(ModelSpace::span_of_columns(id, &cols, DEFAULT_RANK_TOL)?.with_generators(m.len()))
    }

    fn to_f64(&self) -> DMatrix<f64> {
        self.x.map(|v| v.as_f64())
    }
}

/// `m{1,4,7}` with 1-based indices.
pub fn support_id(m: &[usize]) -> SpaceId {
    SpaceId(format!("m{{{}}}", m.iter().map(|j| j + 1).join(",")))
}

mod one_based {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[usize], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|j| j + 1))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        v.into_iter()
            .map(|j| j.checked_sub(1).ok_or_else(|| serde::de::Error::custom("indices are 1-based")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Origin {
    pub procedure: String,
    pub tuning: String,
}

impl Origin {
    pub fn new(procedure: impl Into<String>, tuning: impl ToString) -> Self {
        Self { procedure: procedure.into(), tuning: tuning.to_string() }
    }
}

/// A sorted set of predictor indices. Stored 0-based, serialized 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    #[serde(with = "one_based")]
    pub indices: Vec<usize>,
    pub origin: Origin,
}

impl SupportSet {
    pub fn new(mut indices: Vec<usize>, origin: Origin) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self { indices, origin }
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.indices.iter().map(|j| j + 1).collect()
    }
}

/// Deduplicated family of supports with every origin that produced each.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportCatalog {
    entries: Vec<CatalogEntry>,
    #[serde(skip)]
    index: BTreeMap<Vec<usize>, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    #[serde(with = "one_based")]
    pub indices: Vec<usize>,
    pub origins: Vec<Origin>,
}

impl SupportCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, s: SupportSet) {
        match self.index.get(&s.indices) {
            Some(&i) => {
                if !self.entries[i].origins.contains(&s.origin) {
                    self.entries[i].origins.push(s.origin);
                }
            }
            None => {
                self.index.insert(s.indices.clone(), self.entries.len());
                self.entries.push(CatalogEntry { indices: s.indices, origins: vec![s.origin] });
            }
        }
    }

    pub fn extend(&mut self, supports: impl IntoIterator<Item = SupportSet>) {
        for s in supports {
            self.add(s);
        }
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.entries.iter().map(|e| e.indices.len()).max().unwrap_or(0)
    }
}

/// One step of the LARS-lasso homotopy.
#[derive(Debug, Clone)]
pub struct LarsStep {
    /// Variables with nonzero coefficient at the end of the step.
    pub support: Vec<usize>,
    /// Variables that moved during the step.
    pub active: Vec<usize>,
    /// Largest absolute correlation with the residual at the end of the step,
    /// on unit-norm columns; the lasso penalty level of the knot.
    pub lambda: f64,
    /// Coefficients on the original column scale.
    pub beta: DVector<f64>,
    pub fit: DVector<f64>,
    pub dropped: Option<usize>,
    /// Columns skipped at this step because they lie in the span of the
    /// active set.
    pub collinear: Vec<usize>,
}

/// LARS with the lasso modification, on unit-norm columns and without
/// intercept, for at most `d_max` steps.
pub fn lars_lasso_path<T: Real>(design: &DesignMatrix<T>, y: &DVector<T>, d_max: usize) -> Result<Vec<LarsStep>> {
    let n = design.n();
    let p = design.p();
    if y.len() != n {
        return domain(format!("Y has length {} for n = {n}", y.len()));
    }
    if d_max > p.min(n.saturating_sub(2)) {
        return domain(format!("D_max = {d_max} exceeds min(p, n - 2) = {}", p.min(n.saturating_sub(2))));
    }
    let x = design.to_f64();
    let yf = y.map(|v| v.as_f64());
    let norms: Vec<f64> = x.column_iter().map(|c| c.norm()).collect();
    if let Some(j) = norms.iter().position(|&s| s == 0.0) {
        return domain(format!("column {} is identically zero", j + 1));
    }
    let mut xs = x.clone();
    for (j, mut c) in xs.column_iter_mut().enumerate() {
        c /= norms[j];
    }
    let scale = yf.norm();
    let tiny = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut beta = DVector::<f64>::zeros(p);
    let mut mu = DVector::<f64>::zeros(n);
    let mut corr = xs.transpose() * &yf;
    let mut active: Vec<usize> = Vec::new();
    let mut excluded = vec![false; p];
    let mut steps = Vec::new();
    if corr.amax() <= tiny {
        return Ok(steps);
    }
    let mut pending_collinear = Vec::new();
    let first = argmax_abs(&corr, &active, &excluded).expect("some column");
    active.push(first);

    while steps.len() < d_max {
        let c_max = active.iter().map(|&j| corr[j].abs()).fold(0.0, f64::max);
        if c_max <= tiny {
            break;
        }
        let xa = xs.select_columns(active.iter());
        let signs = DVector::from_iterator(active.len(), active.iter().map(|&j| corr[j].signum()));
        let gram = xa.transpose() * &xa;
        let Some(chol) = gram.cholesky() else {
            // the last entrant is numerically collinear with the others
            let j = active.pop().expect("nonempty");
            excluded[j] = true;
            pending_collinear.push(j);
            if active.is_empty() {
                break;
            }
            continue;
        };
        let gis = chol.solve(&signs);
        let aa = 1.0 / signs.dot(&gis).sqrt();
        let w = gis * aa;
        let u = &xa * &w;
        let a = xs.transpose() * &u;

        let mut gamma = c_max / aa;
        let mut entering = None;
        for j in 0..p {
            if excluded[j] || active.contains(&j) {
                continue;
            }
            for g in [(c_max - corr[j]) / (aa - a[j]), (c_max + corr[j]) / (aa + a[j])] {
                if g > 1e-14 && g < gamma {
                    gamma = g;
                    entering = Some(j);
                }
            }
        }
        let mut leaving = None;
        for (k, &j) in active.iter().enumerate() {
            if w[k] != 0.0 {
                let g = -beta[j] / w[k];
                if g > 1e-14 && g < gamma {
                    gamma = g;
                    leaving = Some(k);
                    entering = None;
                }
            }
        }
        mu += &u * gamma;
        for (k, &j) in active.iter().enumerate() {
            beta[j] += gamma * w[k];
        }
        corr = xs.transpose() * (&yf - &mu);
        let moved = active.clone();
        let mut dropped = None;
        if let Some(k) = leaving {
            let j = active.remove(k);
            beta[j] = 0.0;
            dropped = Some(j);
        }
        let lambda = active.iter().chain(entering.iter()).map(|&j| corr[j].abs()).fold(0.0, f64::max);
        let support: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        let beta_orig = DVector::from_iterator(p, (0..p).map(|j| beta[j] / norms[j]));
        let mut moved_sorted = moved;
        moved_sorted.sort_unstable();
        steps.push(LarsStep {
            support,
            active: moved_sorted,
            lambda: if entering.is_none() && leaving.is_none() { 0.0 } else { lambda },
            beta: beta_orig,
            fit: mu.clone(),
            dropped,
            collinear: std::mem::take(&mut pending_collinear),
        });
        match (entering, leaving) {
            (Some(j), _) if in_span(&xs, &active, j) => {
                excluded[j] = true;
                pending_collinear.push(j);
            }
            (Some(j), _) => active.push(j),
            (None, Some(_)) => {}
            (None, None) => break, // least-squares fit on the active set reached
        }
        if active.is_empty() {
            break;
        }
    }
    Ok(steps)
}

/// Whether column `j` is numerically in the span of the active columns.
fn in_span(xs: &DMatrix<f64>, active: &[usize], j: usize) -> bool {
    if active.is_empty() {
        return false;
    }
    let xa = xs.select_columns(active.iter());
    let xj = xs.column(j).into_owned();
    let coef = xa.clone().svd(true, true).solve(&xj, 1e-12);
    match coef {
        Ok(c) => (&xj - &xa * c).norm_squared() < 1e-10,
        Err(_) => false,
    }
}

fn argmax_abs(v: &DVector<f64>, skip: &[usize], excluded: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in 0..v.len() {
        if excluded[j] || skip.contains(&j) {
            continue;
        }
        if best.is_none_or(|b| v[j].abs() > v[b].abs()) {
            best = Some(j);
        }
    }
    best
}

pub fn lars_supports(steps: &[LarsStep]) -> Vec<SupportSet> {
    steps
        .iter()
        .enumerate()
        .map(|(h, s)| SupportSet::new(s.support.clone(), Origin::new("lars", h + 1)))
        .collect()
}

/// Solves `(XᵀX + hI)β = Xᵀy`.
pub fn ridge_coefficients<T: Real>(design: &DesignMatrix<T>, y: &DVector<T>, h: f64) -> Result<DVector<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return domain(format!("ridge parameter must be positive, got {h}"));
    }
    let x = design.to_f64();
    let yf = y.map(|v| v.as_f64());
    let mut g = x.transpose() * &x;
    for j in 0..g.nrows() {
        g[(j, j)] += h;
    }
    let chol = g.cholesky().ok_or_else(|| Error::Domain("ridge system not positive definite".into()))?;
    Ok(chol.solve(&(x.transpose() * yf)))
}

/// Nested supports `{j₁}, {j₁, j₂}, …` by decreasing `|β̂_j(h)|` for each `h`.
/// Ties are broken by column index.
pub fn ridge_rank_supports<T: Real>(
    design: &DesignMatrix<T>,
    y: &DVector<T>,
    h_grid: &[f64],
    d_max: usize,
) -> Result<Vec<SupportSet>> {
    let mut out = Vec::new();
    for &h in h_grid {
        let b = ridge_coefficients(design, y, h)?;
        let mut order: Vec<usize> = (0..b.len()).collect();
        order.sort_by(|&i, &j| b[j].abs().total_cmp(&b[i].abs()).then(i.cmp(&j)));
        for k in 1..=d_max.min(b.len()) {
            out.push(SupportSet::new(order[..k].to_vec(), Origin::new("ridge", format!("h={h},k={k}"))));
        }
    }
    Ok(out)
}

/// All subsets of size `0..=d_max`, by size then lexicographically.
pub fn exhaustive_supports(p: usize, d_max: usize) -> Result<Vec<SupportSet>> {
    let d_max = d_max.min(p);
    let mut total: u128 = 0;
    for k in 0..=d_max {
        let mut c: u128 = 1;
        for i in 0..k {
            c = c * (p - i) as u128 / (i + 1) as u128;
        }
        total += c;
        if total > EXHAUSTIVE_GUARD as u128 {
            return Err(Error::Feasibility(format!(
                "more than {EXHAUSTIVE_GUARD} subsets of size <= {d_max} among p = {p}"
            )));
        }
    }
    Ok((0..=d_max)
        .flat_map(|k| (0..p).combinations(k))
        .map(|m| SupportSet { origin: Origin::new("exhaustive", m.len()), indices: m })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub procedure: String,
    #[serde(default)]
    pub tuning: serde_json::Value,
    pub indices: Vec<usize>,
}

/// Reads supports produced elsewhere: a JSON array of
/// `{"procedure", "tuning", "indices"}` records with 1-based indices, or an
/// object with such an array under `"supports"`.
pub fn parse_manifest(text: &str, p: usize) -> Result<Vec<SupportSet>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        List(Vec<ManifestRecord>),
        Wrapped { supports: Vec<ManifestRecord> },
    }
    let records = match serde_json::from_str::<Doc>(text)? {
        Doc::List(r) | Doc::Wrapped { supports: r } => r,
    };
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if let Some(&bad) = r.indices.iter().find(|&&j| j == 0 || j > p) {
                return Err(Error::Parse(format!("record {i}: index {bad} outside 1..={p}")));
            }
            let tuning = match r.tuning {
                serde_json::Value::String(s) => s,
                serde_json::Value::Null => String::new(),
                v => v.to_string(),
            };
            Ok(SupportSet::new(r.indices.iter().map(|j| j - 1).collect(), Origin { procedure: r.procedure, tuning }))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportScore {
    #[serde(with = "one_based")]
    pub indices: Vec<usize>,
    pub origins: Vec<Origin>,
    /// Numerical rank of the selected columns.
    pub dim: usize,
    pub rss: f64,
    pub sigma2: f64,
    pub delta: f64,
    pub penalty: f64,
    pub crit: f64,
}

/// `crit(m)` with `Δ(S_m) = log C(p, D) + log(1 + D)`, `D = dim S_m`.
pub fn crit_m<T: Real>(m: &[usize], design: &DesignMatrix<T>, y: &DVector<T>, config: SelectionConfig) -> Result<SupportScore> {
    let n = design.n();
    if let Some(&bad) = m.iter().find(|&&j| j >= design.p()) {
        return domain(format!("index {} outside 1..={}", bad + 1, design.p()));
    }
    let space = design.space(m)?;
    let dim = space.dim();
    if dim + 2 > n {
        return Err(Error::H0Violation { dim, n });
    }
    let rss = space.residual_sq(y).as_f64();
    let sigma2 = rss / (n - dim) as f64;
    let delta = WeightScheme::VarSel { p: design.p() }.weight(dim)?;
    let penalty = config.k * pen_delta_cached(n, dim, delta)?;
    Ok(SupportScore {
        indices: m.to_vec(),
        origins: Vec::new(),
        dim,
        rss,
        sigma2,
        delta,
        penalty,
        crit: rss + penalty * sigma2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureWinner {
    pub procedure: String,
    #[serde(with = "one_based")]
    pub indices: Vec<usize>,
    pub crit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarSelReport {
    #[serde(with = "one_based")]
    pub chosen: Vec<usize>,
    pub chosen_labels: Vec<String>,
    pub chosen_crit: f64,
    pub per_support: Vec<SupportScore>,
    pub per_procedure: Vec<ProcedureWinner>,
    /// `1 + log(1 + p)`, an upper bound on `Σ e^{−Δ}`.
    pub sigma_bound: f64,
    pub d_max: usize,
    /// `κn / (2 log p)`.
    pub d_max_bound: f64,
    pub config: SelectionConfig,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct VarSelection {
    pub chosen: CatalogEntry,
    pub estimate: DVector<f64>,
    pub report: VarSelReport,
}

fn support_order(a: &SupportScore, b: &SupportScore) -> std::cmp::Ordering {
    a.crit.total_cmp(&b.crit).then(a.dim.cmp(&b.dim)).then_with(|| a.indices.cmp(&b.indices))
}

/// Minimizes `crit(m)` over the catalog; the estimate is `Π_{S_m̂} Y`.
pub fn varselect<T: Real>(
    design: &DesignMatrix<T>,
    y: &DVector<T>,
    catalog: &SupportCatalog,
    config: SelectionConfig,
) -> Result<VarSelection> {
    config.validate()?;
    if catalog.is_empty() {
        return domain("support catalog is empty");
    }
    if y.len() != design.n() {
        return domain(format!("Y has length {} for n = {}", y.len(), design.n()));
    }
    let n = design.n();
    let p = design.p();
    let scores: Vec<SupportScore> = catalog
        .entries()
        .par_iter()
        .map(|e| {
            let mut s = crit_m(&e.indices, design, y, config)?;
            s.origins = e.origins.clone();
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let best = scores.iter().min_by(|a, b| support_order(a, b)).expect("nonempty");
    let mut winners: BTreeMap<&str, &SupportScore> = BTreeMap::new();
    for s in &scores {
        for o in &s.origins {
            let w = winners.entry(o.procedure.as_str()).or_insert(s);
            if support_order(s, w).is_lt() {
                *w = s;
            }
        }
    }
    let per_procedure = winners
        .into_iter()
        .map(|(proc_, s)| ProcedureWinner { procedure: proc_.to_string(), indices: s.indices.clone(), crit: s.crit })
        .collect();
    let d_max = catalog.max_size();
    let d_max_bound = config.kappa * n as f64 / (2.0 * (p as f64).ln());
    let mut warnings = Vec::new();
    if d_max as f64 > d_max_bound {
        warnings.push(format!("D_max = {d_max} exceeds kappa n / (2 log p) = {d_max_bound:.4}"));
    }
    let chosen = catalog.entries()[catalog.index[&best.indices]].clone();
    let estimate = design.space(&best.indices)?.project(y).map(|v| v.as_f64());
    let report = VarSelReport {
        chosen: best.indices.clone(),
        chosen_labels: best.indices.iter().map(|&j| design.labels()[j].clone()).collect(),
        chosen_crit: best.crit,
        per_procedure,
        sigma_bound: 1.0 + (1.0 + p as f64).ln(),
        d_max,
        d_max_bound,
        config,
        warnings,
        per_support: scores,
    };
    Ok(VarSelection { chosen, estimate, report })
}

/// `fdr = |m∖m*| / max(|m|, 1)`, `tdr = |m ∩ m*| / |m*|` (0 for empty truth).
pub fn fdr_tdr(chosen: &[usize], truth: &[usize]) -> (f64, f64) {
    let hits = chosen.iter().filter(|j| truth.contains(j)).count();
    let fdr = (chosen.len() - hits) as f64 / chosen.len().max(1) as f64;
    let tdr = if truth.is_empty() { 0.0 } else { hits as f64 / truth.len() as f64 };
    (fdr, tdr)
}

/// Selection of the number of LARS-lasso steps: candidate `h` is the lasso
/// fit after `h` steps, approximated by every path support.
#[derive(Debug, Clone)]
pub struct LassoTuning {
    pub steps: Vec<LarsStep>,
    /// 1-based step index.
    pub chosen_step: usize,
    pub report: SelectionReport,
}

pub fn select_lasso_step<T: Real>(
    design: &DesignMatrix<T>,
    y: &DVector<T>,
    d_max: usize,
    config: SelectionConfig,
) -> Result<LassoTuning> {
    let steps = lars_lasso_path(design, y, d_max)?;
    if steps.is_empty() {
        return Err(Error::Feasibility("the lasso path is empty (Y is orthogonal to every column)".into()));
    }
    let n = design.n();
    let mut seen = BTreeMap::new();
    let mut spaces = Vec::new();
    for s in &steps {
        if !seen.contains_key(&s.support) {
            seen.insert(s.support.clone(), ());
            spaces.push(design.space(&s.support)?);
        }
    }
    let ids: Vec<SpaceId> = seen.keys().map(|m| support_id(m)).collect();
    let width = steps.len().to_string().len();
    let candidates: Vec<EstimatorCandidate<T>> = steps
        .iter()
        .enumerate()
        .map(|(h, s)| EstimatorCandidate::new(format!("step{:0width$}", h + 1), s.fit.map(T::of), ids.clone()))
        .collect();
    let registry = ModelRegistry::build(n, spaces, WeightScheme::VarSel { p: design.p() }, config.kappa)?;
    let report = select(&candidates, y, &registry, config)?;
    Ok(LassoTuning { chosen_step: report.chosen_index + 1, steps, report })
}
