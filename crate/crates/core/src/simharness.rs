//! Simulation study: the example designs, Monte Carlo risks against the
//! oracle, V-fold cross-validation for the lasso step, and report tables.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::selector::SelectionConfig;
use crate::varselect::{
    default_exhaustive_dmax, default_path_dmax, exhaustive_supports, fdr_tdr, lars_lasso_path, lars_supports,
    ridge_rank_supports, select_lasso_step, varselect, DesignMatrix, LarsStep, SupportCatalog, RIDGE_GRID,
};

const DESIGN_TAG: u64 = 0xd35_16a;
const NOISE_TAG: u64 = 0x4015e;

/// Independent ChaCha stream for `(tag, seed, a, b)`.
pub fn stream(tag: u64, seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [tag, seed, a, b].into_iter().enumerate() {
        key[8 * i..8 * i + 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    E7,
    E8,
    E9,
    E10,
    E11,
}

impl Family {
    pub const ALL: [Family; 11] = [
        Family::E1,
        Family::E2,
        Family::E3,
        Family::E4,
        Family::E5,
        Family::E6,
        Family::E7,
        Family::E8,
        Family::E9,
        Family::E10,
        Family::E11,
    ];

    /// Smallest `p` holding the nonzero coefficients.
    pub fn min_p(self) -> usize {
        match self {
            Family::E7 => 4,
            Family::E8 | Family::E9 => 8,
            Family::E10 => 40,
            _ => 15,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k: usize = s
            .trim()
            .trim_start_matches(['E', 'e'])
            .parse()
            .map_err(|_| Error::Parse(format!("unknown family {s:?}")))?;
        Family::ALL.get(k.wrapping_sub(1)).copied().ok_or_else(|| Error::Parse(format!("unknown family {s:?}")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

fn toeplitz(p: usize, r: f64, blocks: &[(usize, usize)]) -> DMatrix<f64> {
    let mut c = DMatrix::identity(p, p);
    for &(lo, hi) in blocks {
        for j in lo..hi.min(p) {
            for k in lo..hi.min(p) {
                c[(j, k)] = r.powi((j as i32 - k as i32).abs());
            }
        }
    }
    c
}

/// Row covariance of the design; `None` for the latent-factor family.
pub fn covariance(family: Family, p: usize) -> Option<DMatrix<f64>> {
    let c = match family {
        Family::E1 | Family::E6 => DMatrix::identity(p, p),
        Family::E2 => toeplitz(p, 0.5, &[(0, 15), (15, p)]),
        Family::E3 => toeplitz(p, 0.95, &[(0, 15), (15, p)]),
        Family::E4 => toeplitz(p, 0.5, &[(0, p)]),
        Family::E5 => toeplitz(p, 0.95, &[(0, p)]),
        Family::E7 => {
            let mut c = DMatrix::identity(p, p);
            for j in 0..3 {
                for k in 0..3 {
                    if j != k {
                        c[(j, k)] = 0.39;
                    }
                }
                c[(3, j)] = 0.23;
                c[(j, 3)] = 0.23;
            }
            c
        }
        Family::E8 | Family::E9 => toeplitz(p, 0.5, &[(0, 8)]),
        Family::E10 => {
            let mut c = DMatrix::identity(p, p);
            for j in 0..40.min(p) {
                for k in 0..40.min(p) {
                    if j != k {
                        c[(j, k)] = 0.5;
                    }
                }
            }
            c
        }
        Family::E11 => return None,
    };
    Some(c)
}

pub fn true_beta(family: Family, p: usize) -> DVector<f64> {
    DVector::from_fn(p, |j, _| {
        let j = j + 1;
        match family {
            Family::E1 | Family::E2 | Family::E3 | Family::E4 | Family::E5 => match j {
                1..=5 => 2.5,
                6..=10 => 1.5,
                11..=15 => 0.5,
                _ => 0.0,
            },
            Family::E6 | Family::E11 => if j <= 15 { 1.5 } else { 0.0 },
            Family::E7 => if j <= 3 { 5.6 } else { 0.0 },
            Family::E8 => match j {
                1 => 3.0,
                2 => 1.5,
                5 => 2.0,
                _ => 0.0,
            },
            Family::E9 => if j <= 8 { 0.85 } else { 0.0 },
            Family::E10 => if (11..=20).contains(&j) || (31..=40).contains(&j) { 2.0 } else { 0.0 },
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSpec {
    pub family: Family,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub design_seed: u64,
    pub design_index: u64,
    pub noise_seed: u64,
}

impl ExampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < self.family.min_p() {
            return domain(format!("{} needs p >= {}, got {}", self.family, self.family.min_p(), self.p));
        }
        if self.n < 4 {
            return domain(format!("n must be at least 4, got {}", self.n));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return domain(format!("signal-to-noise ratio must be positive, got {}", self.rho));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RealizedExample {
    pub spec: ExampleSpec,
    pub x: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub f: DVector<f64>,
    pub sigma2: f64,
}

impl RealizedExample {
    pub fn design(&self) -> DesignMatrix<f64> {
        DesignMatrix::new(self.x.clone(), None).expect("generated designs are finite with p >= 2")
    }

    pub fn truth(&self) -> Vec<usize> {
        (0..self.beta.len()).filter(|&j| self.beta[j] != 0.0).collect()
    }

    /// `Y = f + ε` for replicate `rep`.
    pub fn draw_y(&self, rep: u64) -> DVector<f64> {
        let mut rng = stream(NOISE_TAG, self.spec.noise_seed, self.spec.design_index, rep);
        let s = self.sigma2.sqrt();
        DVector::from_fn(self.spec.n, |i, _| self.f[i] + s * gauss(&mut rng))
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gen_example(spec: &ExampleSpec) -> Result<RealizedExample> {
    spec.validate()?;
    let (n, p) = (spec.n, spec.p);
    let mut rng = stream(DESIGN_TAG, spec.design_seed, spec.design_index, 0);
    let x = match covariance(spec.family, p) {
        Some(c) => {
            let l = c.cholesky().expect("listed covariances are positive definite").l();
            let z = DMatrix::from_fn(n, p, |_, _| gauss(&mut rng));
            z * l.transpose()
        }
        None => {
            let z = DMatrix::from_fn(n, 3, |_, _| gauss(&mut rng));
            let mut x = DMatrix::from_fn(n, p, |_, _| 0.1 * gauss(&mut rng));
            for j in 0..15.min(p) {
                let mut col = x.column_mut(j);
                col += z.column(j / 5);
            }
            x
        }
    };
    let beta = true_beta(spec.family, p);
    let f = &x * &beta;
    let ff = f.norm_squared();
    if ff == 0.0 {
        return domain("the regression function is identically zero");
    }
    Ok(RealizedExample { spec: spec.clone(), sigma2: ff / (n as f64 * spec.rho), x, beta, f })
}

/// What one replicate of a procedure produces.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// Named final estimates of `f`.
    pub estimates: Vec<(String, DVector<f64>)>,
    /// Candidate family for the oracle `min_h ‖f − f̂_h‖²`; empty if none.
    pub family: Vec<DVector<f64>>,
    /// Named scalar metrics averaged over replicates.
    pub metrics: Vec<(String, f64)>,
    pub flags: Vec<String>,
}

pub trait Procedure: Sync {
    fn run(&self, ex: &RealizedExample, y: &DVector<f64>) -> Result<Outcome>;
}

/// Returns `Y` itself.
pub struct ReturnY;

impl Procedure for ReturnY {
    fn run(&self, _: &RealizedExample, y: &DVector<f64>) -> Result<Outcome> {
        Ok(Outcome { estimates: vec![("y".into(), y.clone())], ..Default::default() })
    }
}

/// Returns the true `f`.
pub struct ReturnF;

impl Procedure for ReturnF {
    fn run(&self, ex: &RealizedExample, _: &DVector<f64>) -> Result<Outcome> {
        Ok(Outcome { estimates: vec![("f".into(), ex.f.clone())], family: vec![ex.f.clone()], ..Default::default() })
    }
}

/// Lasso fits along the first `d_max` LARS-lasso steps, with the step chosen
/// by the penalized criterion (`pen`) and by V-fold CV (`cv`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoStudy {
    pub d_max: usize,
    /// Number of folds; `n/10` when absent.
    pub v: Option<usize>,
    pub config: SelectionConfig,
}

impl Procedure for LassoStudy {
    fn run(&self, ex: &RealizedExample, y: &DVector<f64>) -> Result<Outcome> {
        let design = ex.design();
        let d_max = self.d_max.min(default_path_dmax(ex.spec.n, ex.spec.p).max(1));
        let tuning = select_lasso_step(&design, y, d_max, self.config)?;
        let v = self.v.unwrap_or((ex.spec.n / 10).max(2));
        let cv = vfold_cv(&design, y, tuning.steps.len(), v)?;
        let family: Vec<DVector<f64>> = tuning.steps.iter().map(|s| s.fit.clone()).collect();
        let mut flags = cv.flags.clone();
        if tuning.steps.len() < d_max {
            flags.push(format!("path ended after {} steps", tuning.steps.len()));
        }
        Ok(Outcome {
            estimates: vec![
                ("pen".into(), family[tuning.chosen_step - 1].clone()),
                ("cv".into(), family[cv.chosen_step - 1].clone()),
            ],
            metrics: vec![("pen_step".into(), tuning.chosen_step as f64), ("cv_step".into(), cv.chosen_step as f64)],
            family,
            flags,
        })
    }
}

/// Variable selection over LARS, ridge-rank and exhaustive supports; reports
/// FDR and TDR against the true support.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarSelStudy {
    pub path_dmax: Option<usize>,
    pub exhaustive_dmax: Option<usize>,
    pub ridge_grid: Vec<f64>,
    pub config: SelectionConfig,
}

impl Default for VarSelStudy {
    fn default() -> Self {
        Self { path_dmax: None, exhaustive_dmax: None, ridge_grid: RIDGE_GRID.to_vec(), config: SelectionConfig::default() }
    }
}

impl Procedure for VarSelStudy {
    fn run(&self, ex: &RealizedExample, y: &DVector<f64>) -> Result<Outcome> {
        let design = ex.design();
        let (n, p) = (ex.spec.n, ex.spec.p);
        let path_dmax = self.path_dmax.unwrap_or(default_path_dmax(n, p)).min(default_path_dmax(n, p));
        let ex_dmax = self.exhaustive_dmax.unwrap_or(default_exhaustive_dmax(p)).min(n - 2);
        let mut catalog = SupportCatalog::new();
        catalog.extend(lars_supports(&lars_lasso_path(&design, y, path_dmax)?));
        catalog.extend(ridge_rank_supports(&design, y, &self.ridge_grid, path_dmax)?);
        catalog.extend(exhaustive_supports(p, ex_dmax)?);
        let sel = varselect(&design, y, &catalog, self.config)?;
        let (fdr, tdr) = fdr_tdr(&sel.chosen.indices, &ex.truth());
        Ok(Outcome {
            estimates: vec![("all".into(), sel.estimate)],
            metrics: vec![("fdr".into(), fdr), ("tdr".into(), tdr), ("size".into(), sel.chosen.indices.len() as f64)],
            flags: sel.report.warnings,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub rep: u64,
    pub losses: Vec<(String, f64)>,
    pub oracle: Option<f64>,
    pub metrics: Vec<(String, f64)>,
    pub flags: Vec<String>,
}

pub fn run_replicate(ex: &RealizedExample, rep: u64, procedure: &dyn Procedure) -> Result<ReplicateResult> {
    let y = ex.draw_y(rep);
    let out = procedure.run(ex, &y)?;
    let loss = |g: &DVector<f64>| (&ex.f - g).norm_squared();
    Ok(ReplicateResult {
        rep,
        losses: out.estimates.iter().map(|(k, g)| (k.clone(), loss(g))).collect(),
        oracle: out.family.iter().map(loss).min_by(f64::total_cmp),
        metrics: out.metrics,
        flags: out.flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
}

fn mean_estimate(name: &str, xs: &[f64]) -> MeanEstimate {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0) } else { 0.0 };
    MeanEstimate { name: name.into(), mean, stderr: (var / k).sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRisk {
    pub spec: ExampleSpec,
    pub sigma2: f64,
    pub n_sims: usize,
    pub risks: Vec<MeanEstimate>,
    pub oracle: Option<MeanEstimate>,
    pub metrics: Vec<MeanEstimate>,
    pub failures: Vec<(u64, String)>,
    pub flags: Vec<(u64, String)>,
}

/// Reduces replicate results in replicate-index order, whatever order they
/// arrive in.
pub fn summarize(ex: &RealizedExample, mut results: Vec<std::result::Result<ReplicateResult, (u64, String)>>) -> Result<McRisk> {
    let key = |r: &std::result::Result<ReplicateResult, (u64, String)>| match r {
        Ok(r) => r.rep,
        Err((rep, _)) => *rep,
    };
    results.sort_by_key(key);
    let n_sims = results.len();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => failures.push(e),
        }
    }
    let Some(first) = ok.first() else {
        return Err(Error::Feasibility(format!("all {n_sims} replicates failed: {}", failures[0].1)));
    };
    let names: Vec<String> = first.losses.iter().map(|(k, _)| k.clone()).collect();
    let metric_names: Vec<String> = first.metrics.iter().map(|(k, _)| k.clone()).collect();
    let column = |f: &dyn Fn(&ReplicateResult) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(f).collect() };
    let risks = names
        .iter()
        .enumerate()
        .map(|(i, k)| mean_estimate(k, &column(&|r| r.losses.get(i).map(|x| x.1))))
        .collect();
    let metrics = metric_names
        .iter()
        .enumerate()
        .map(|(i, k)| mean_estimate(k, &column(&|r| r.metrics.get(i).map(|x| x.1))))
        .collect();
    let oracles = column(&|r| r.oracle);
    let oracle = (oracles.len() == ok.len()).then(|| mean_estimate("oracle", &oracles));
    let flags = ok.iter().flat_map(|r| r.flags.iter().map(|f| (r.rep, f.clone()))).collect();
    Ok(McRisk { spec: ex.spec.clone(), sigma2: ex.sigma2, n_sims, risks, oracle, metrics, failures, flags })
}

/// Monte Carlo risks over `n_sims` replicates, run in parallel.
pub fn mc_risk(ex: &RealizedExample, procedure: &dyn Procedure, n_sims: usize) -> Result<McRisk> {
    if n_sims < 2 {
        return domain(format!("need at least 2 replicates, got {n_sims}"));
    }
    let results = (0..n_sims as u64)
        .into_par_iter()
        .map(|rep| run_replicate(ex, rep, procedure).map_err(|e| (rep, e.to_string())))
        .collect();
    summarize(ex, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// 1-based step.
    pub chosen_step: usize,
    /// Mean squared prediction error per step.
    pub errors: Vec<f64>,
    pub skipped_folds: Vec<usize>,
    pub flags: Vec<String>,
}

/// Contiguous fold boundaries: fold `k` holds rows `⌊kn/v⌋ .. ⌊(k+1)n/v⌋`.
pub fn fold_bounds(n: usize, v: usize) -> Vec<(usize, usize)> {
    (0..v).map(|k| (k * n / v, (k + 1) * n / v)).collect()
}

fn beta_at(steps: &[LarsStep], h: usize, p: usize) -> DVector<f64> {
    match steps.get(h - 1).or(steps.last()) {
        Some(s) => s.beta.clone(),
        None => DVector::zeros(p),
    }
}

/// V-fold CV over the first `h_max` LARS-lasso steps, refitting the path on
/// each training part. Ties go to the smaller step.
pub fn vfold_cv(design: &DesignMatrix<f64>, y: &DVector<f64>, h_max: usize, v: usize) -> Result<CvResult> {
    let n = design.n();
    let p = design.p();
    if v < 2 || v > n {
        return domain(format!("number of folds must lie in 2..={n}, got {v}"));
    }
    if h_max == 0 {
        return domain("CV needs at least one step");
    }
    let mut sse = vec![0.0; h_max];
    let mut used = 0usize;
    let mut skipped = Vec::new();
    let mut flags = Vec::new();
    for (k, (lo, hi)) in fold_bounds(n, v).into_iter().enumerate() {
        let train: Vec<usize> = (0..n).filter(|i| *i < lo || *i >= hi).collect();
        let xt = design.x().select_rows(train.iter());
        let yt = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
        let fold_dmax = h_max.min(train.len().saturating_sub(2)).min(p);
        let path = DesignMatrix::new(xt, None).and_then(|d| lars_lasso_path(&d, &yt, fold_dmax));
        let steps = match path {
            Ok(s) => s,
            Err(e) => {
                skipped.push(k);
                flags.push(format!("fold {} skipped: {e}", k + 1));
                continue;
            }
        };
        if steps.len() < h_max {
            flags.push(format!("fold {}: path has {} of {h_max} steps; last fit extended", k + 1, steps.len()));
        }
        let xv = design.x().rows(lo, hi - lo);
        let yv = y.rows(lo, hi - lo);
        for (h, e) in sse.iter_mut().enumerate() {
            *e += (yv - xv * beta_at(&steps, h + 1, p)).norm_squared();
        }
        used += hi - lo;
    }
    if used == 0 {
        return Err(Error::Feasibility("every CV fold was degenerate".into()));
    }
    let errors: Vec<f64> = sse.iter().map(|e| e / used as f64).collect();
    let mut chosen = 0;
    for h in 1..h_max {
        if errors[h] < errors[chosen] {
            chosen = h;
        }
    }
    Ok(CvResult { chosen_step: chosen + 1, errors, skipped_folds: skipped, flags })
}

pub const QUANTILE_LEVELS: [f64; 6] = [0.0, 0.5, 0.75, 0.95, 0.99, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    /// Standard deviation across examples.
    pub std_err: f64,
    pub quantiles: Vec<(f64, f64)>,
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn report_table(name: &str, values: &[f64]) -> Result<RiskTable> {
    if values.is_empty() {
        return domain(format!("no values for table {name}"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let sd = if values.len() > 1 { (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() } else { 0.0 };
    Ok(RiskTable {
        name: name.into(),
        count: values.len(),
        mean,
        std_err: sd,
        quantiles: QUANTILE_LEVELS.iter().map(|&q| (q, quantile(&sorted, q))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Study {
    Lasso(LassoStudy),
    VarSel(VarSelStudy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub family: Family,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub n_designs: usize,
    pub n_sims: usize,
    pub seed: u64,
    pub study: Study,
}

impl PartialEq for LassoStudy {
    fn eq(&self, o: &Self) -> bool {
        self.d_max == o.d_max && self.v == o.v && self.config == o.config
    }
}

impl PartialEq for VarSelStudy {
    fn eq(&self, o: &Self) -> bool {
        self.path_dmax == o.path_dmax
            && self.exhaustive_dmax == o.exhaustive_dmax
            && self.ridge_grid == o.ridge_grid
            && self.config == o.config
    }
}

impl Campaign {
    pub fn example(&self, design_index: usize) -> ExampleSpec {
        ExampleSpec {
            family: self.family,
            n: self.n,
            p: self.p,
            rho: self.rho,
            design_seed: self.seed,
            design_index: design_index as u64,
            noise_seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub example: ExampleSpec,
    pub risk: McRisk,
    /// `R/O` per estimate; empty without an oracle.
    pub ratios: Vec<(String, f64)>,
    /// `O < nσ²/3`; always true without an oracle.
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub campaign: Campaign,
    pub rows: Vec<ExampleRow>,
    pub tables: Vec<RiskTable>,
}

pub fn run_campaign(c: &Campaign) -> Result<CampaignResult> {
    if c.n_designs == 0 {
        return domain("need at least one design draw");
    }
    let procedure: &dyn Procedure = match &c.study {
        Study::Lasso(s) => {
            s.config.validate()?;
            s
        }
        Study::VarSel(s) => {
            s.config.validate()?;
            s
        }
    };
    let mut rows = Vec::new();
    for d in 0..c.n_designs {
        let ex = gen_example(&c.example(d))?;
        let risk = mc_risk(&ex, procedure, c.n_sims)?;
        let (ratios, kept) = match &risk.oracle {
            Some(o) => (
                risk.risks.iter().map(|r| (r.name.clone(), r.mean / o.mean)).collect(),
                o.mean < c.n as f64 * ex.sigma2 / 3.0,
            ),
            None => (Vec::new(), true),
        };
        rows.push(ExampleRow { example: ex.spec.clone(), risk, ratios, kept });
    }
    let tables = campaign_tables(&rows)?;
    Ok(CampaignResult { campaign: c.clone(), rows, tables })
}

/// Ratio tables over kept examples, and mean-metric tables over all.
pub fn campaign_tables(rows: &[ExampleRow]) -> Result<Vec<RiskTable>> {
    let mut tables = Vec::new();
    let kept: Vec<&ExampleRow> = rows.iter().filter(|r| r.kept).collect();
    if let Some(first) = kept.first() {
        for (i, (name, _)) in first.ratios.iter().enumerate() {
            let vals: Vec<f64> = kept.iter().map(|r| r.ratios[i].1).collect();
            tables.push(report_table(&format!("ratio_{name}"), &vals)?);
        }
    }
    if let Some(first) = rows.first() {
        for (i, m) in first.risk.metrics.iter().enumerate() {
            let vals: Vec<f64> = rows.iter().map(|r| r.risk.metrics[i].mean).collect();
            tables.push(report_table(&m.name, &vals)?);
        }
    }
    Ok(tables)
}

/// Writes `rows.csv` and `summary.json` into `dir`.
pub fn write_campaign(dir: &Path, r: &CampaignResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("rows.csv"))?;
    let names: Vec<String> = r.rows.first().map(|row| row.risk.risks.iter().map(|x| x.name.clone()).collect()).unwrap_or_default();
    let mut header = vec!["family", "n", "p", "rho", "seed", "design_index", "sigma2", "oracle", "kept"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for k in &names {
        header.push(format!("risk_{k}"));
        header.push(format!("ratio_{k}"));
    }
    w.write_record(&header)?;
    for row in &r.rows {
        let e = &row.example;
        let mut rec = vec![
            e.family.to_string(),
            e.n.to_string(),
            e.p.to_string(),
            crate::io::exact(e.rho),
            e.design_seed.to_string(),
            e.design_index.to_string(),
            crate::io::exact(row.risk.sigma2),
            row.risk.oracle.as_ref().map(|o| crate::io::exact(o.mean)).unwrap_or_default(),
            row.kept.to_string(),
        ];
        for (i, risk) in row.risk.risks.iter().enumerate() {
            rec.push(crate::io::exact(risk.mean));
            rec.push(row.ratios.get(i).map(|x| crate::io::exact(x.1)).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(r)?)?;
    Ok(())
}

/// Re-runs the campaign embedded in a summary file.
pub fn replay(summary_json: &str) -> Result<(CampaignResult, bool)> {
    let old: CampaignResult = serde_json::from_str(summary_json)?;
    let new = run_campaign(&old.campaign)?;
    let same = serde_json::to_string(&new)? == serde_json::to_string(&old)?;
    Ok((new, same))
}
