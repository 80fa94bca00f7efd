//! The penalized selection rule over a family of estimators.
//!
//! For a candidate `f̂` with approximation collection `𝕊_f`:
//!
//! ```text
//! crit_α(f̂) = min_{S ∈ 𝕊_f}  ‖Y − Π_S f̂‖² + α‖f̂ − Π_S f̂‖² + K·pen_Δ(S)·σ̂²_S
//! ```
//!
//! and the selected estimator minimizes `crit_α` over the family.

use std::cmp::Ordering;
use std::collections::HashMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distkernel::pen_delta_cached;
use crate::error::{domain, Error, Result};
use crate::modelspace::{ModelRegistry, SpaceId};
use crate::scalar::{norm_sq, Real};

#[derive(Debug, Clone)]
pub struct EstimatorCandidate<T: Real> {
    pub id: String,
    pub fitted: DVector<T>,
    pub approx_ids: Vec<SpaceId>,
}

impl<T: Real> EstimatorCandidate<T> {
    pub fn new(id: impl Into<String>, fitted: DVector<T>, approx_ids: Vec<SpaceId>) -> Self {
        Self { id: id.into(), fitted, approx_ids }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Penalty multiplier: `pen = K·pen_Δ`.
    pub k: f64,
    pub alpha: f64,
    /// Slack allowed on the minimization; the exact minimizer is always
    /// returned for finite families.
    pub delta: f64,
    pub kappa: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { k: 1.1, alpha: 0.5, delta: 0.0, kappa: 0.5 }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 1.0 && self.k.is_finite()) {
            return Err(Error::Config(format!("K must exceed 1, got {}", self.k)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be nonnegative, got {}", self.delta)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("kappa must lie in (0, 1), got {}", self.kappa)));
        }
        Ok(())
    }

    /// The risk-bound constant `C(K, α)`.
    pub fn risk_constant(&self) -> f64 {
        let ik = 1.0 / self.k;
        let a = self.alpha;
        a * (1.0 - ik) / ((1.0 + a - ik) * (a + 2.0 * (1.0 + ik)))
    }
}

/// Terms of the criterion at one space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTerms<T: Real> {
    pub position: usize,
    /// `‖Y − Π_S f̂‖²`
    pub fit: T,
    /// `‖f̂ − Π_S f̂‖²`
    pub proximity: T,
    /// `pen(S)·σ̂²_S`
    pub penalty: T,
    pub sigma2: T,
}

impl<T: Real> SpaceTerms<T> {
    pub fn crit(&self, alpha: T) -> T {
        self.fit + alpha * self.proximity + self.penalty
    }

    pub fn accuracy(&self) -> T {
        self.proximity + self.penalty
    }
}

/// Per-space quantities that depend only on `Y`: `σ̂²_S` and `pen(S)`.
pub struct SelectionContext<'a, T: Real> {
    registry: &'a ModelRegistry<T>,
    y: &'a DVector<T>,
    config: SelectionConfig,
    sigma2: Vec<Option<T>>,
    pen: Vec<Option<T>>,
}

impl<'a, T: Real> SelectionContext<'a, T> {
    /// Prepares the spaces referenced by `candidates`.
    pub fn new(
        registry: &'a ModelRegistry<T>,
        y: &'a DVector<T>,
        config: SelectionConfig,
        candidates: &[EstimatorCandidate<T>],
    ) -> Result<Self> {
        config.validate()?;
        if y.len() != registry.n() {
            return domain(format!("Y has length {} but the registry lives in ℝ^{}", y.len(), registry.n()));
        }
        let mut used = vec![false; registry.len()];
        for c in candidates {
            if c.fitted.len() != registry.n() {
                return domain(format!("candidate {} has length {}", c.id, c.fitted.len()));
            }
            if c.approx_ids.is_empty() {
                return domain(format!("candidate {} has an empty approximation collection", c.id));
            }
            for id in &c.approx_ids {
                let p = registry
                    .position(id)
                    .ok_or_else(|| Error::Domain(format!("candidate {} references unknown space {id}", c.id)))?;
                used[p] = true;
            }
        }
        let n = registry.n();
        let per_space: Vec<Option<(T, T)>> = registry
            .spaces()
            .par_iter()
            .zip(used.par_iter())
            .map(|(s, &u)| -> Result<Option<(T, T)>> {
                if !u {
                    return Ok(None);
                }
                let s2 = s.residual_variance(y)?;
                let pen = config.k * pen_delta_cached(n, s.dim(), s.delta)?;
                Ok(Some((s2, T::of(pen))))
            })
            .collect::<Result<_>>()?;
        let sigma2 = per_space.iter().map(|o| o.map(|p| p.0)).collect();
        let pen = per_space.iter().map(|o| o.map(|p| p.1)).collect();
        Ok(Self { registry, y, config, sigma2, pen })
    }

    pub fn registry(&self) -> &ModelRegistry<T> {
        self.registry
    }

    pub fn config(&self) -> &SelectionConfig {
        &self.config
    }

    fn terms(&self, fitted: &DVector<T>, position: usize) -> SpaceTerms<T> {
        let space = &self.registry.spaces()[position];
        let pf = space.project(fitted);
        let sigma2 = self.sigma2[position].expect("space prepared");
        SpaceTerms {
            position,
            fit: norm_sq(&(self.y - &pf)),
            proximity: norm_sq(&(fitted - &pf)),
            penalty: self.pen[position].expect("space prepared") * sigma2,
            sigma2,
        }
    }

    /// All terms for a candidate, one entry per distinct space of `𝕊_f`.
    pub fn all_terms(&self, candidate: &EstimatorCandidate<T>) -> Result<Vec<SpaceTerms<T>>> {
        let mut positions: Vec<usize> = Vec::with_capacity(candidate.approx_ids.len());
        for id in &candidate.approx_ids {
            let p = self
                .registry
                .position(id)
                .ok_or_else(|| Error::Domain(format!("unknown space {id}")))?;
            if self.sigma2[p].is_none() {
                return domain(format!("space {id} was not prepared for this context"));
            }
            if !positions.contains(&p) {
                positions.push(p);
            }
        }
        if positions.is_empty() {
            return domain(format!("candidate {} has an empty approximation collection", candidate.id));
        }
        Ok(positions.into_iter().map(|p| self.terms(&candidate.fitted, p)).collect())
    }

    /// Orders spaces by value, then dimension, then id.
    fn space_order(&self, a: (T, usize), b: (T, usize)) -> Ordering {
        let sa = &self.registry.spaces()[a.1];
        let sb = &self.registry.spaces()[b.1];
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(sa.dim().cmp(&sb.dim()))
            .then_with(|| sa.id.cmp(&sb.id))
    }

    /// `crit_α` and the space attaining it.
    pub fn crit_alpha(&self, candidate: &EstimatorCandidate<T>) -> Result<(T, SpaceTerms<T>)> {
        let alpha = T::of(self.config.alpha);
        let terms = self.all_terms(candidate)?;
        let best = terms
            .into_iter()
            .min_by(|a, b| self.space_order((a.crit(alpha), a.position), (b.crit(alpha), b.position)))
            .expect("nonempty");
        Ok((best.crit(alpha), best))
    }

    /// Accuracy index `A(f̂, 𝕊_f) = min_S ‖f̂ − Π_S f̂‖² + pen(S)σ̂²_S`.
    pub fn accuracy_index(&self, candidate: &EstimatorCandidate<T>) -> Result<(T, SpaceTerms<T>)> {
        let terms = self.all_terms(candidate)?;
        let best = terms
            .into_iter()
            .min_by(|a, b| self.space_order((a.accuracy(), a.position), (b.accuracy(), b.position)))
            .expect("nonempty");
        Ok((best.accuracy(), best))
    }

    pub fn score(&self, candidate: &EstimatorCandidate<T>) -> Result<CandidateScore> {
        let (crit, at) = self.crit_alpha(candidate)?;
        let (acc, acc_at) = self.accuracy_index(candidate)?;
        let space = &self.registry.spaces()[at.position];
        Ok(CandidateScore {
            id: candidate.id.clone(),
            crit: crit.as_f64(),
            space: space.id.clone(),
            dim: space.dim(),
            sigma2: at.sigma2.as_f64(),
            fit: at.fit.as_f64(),
            proximity: at.proximity.as_f64(),
            penalty_term: at.penalty.as_f64(),
            accuracy_index: acc.as_f64(),
            accuracy_space: self.registry.spaces()[acc_at.position].id.clone(),
            h4_ok: self.registry.h4_holds(at.position),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub id: String,
    pub crit: f64,
    /// Space attaining the criterion.
    pub space: SpaceId,
    pub dim: usize,
    pub sigma2: f64,
    pub fit: f64,
    pub proximity: f64,
    pub penalty_term: f64,
    pub accuracy_index: f64,
    pub accuracy_space: SpaceId,
    pub h4_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub chosen: String,
    pub chosen_index: usize,
    pub chosen_crit: f64,
    pub per_candidate: Vec<CandidateScore>,
    /// Diagnostic `C(K, α)`.
    pub constant_c: f64,
    pub sigma: f64,
    pub config: SelectionConfig,
    /// Spaces referenced by some candidate that fail `1 ≤ dim ∨ Δ ≤ κn`.
    pub h4_violations: Vec<SpaceId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SelectionReport {
    pub fn chosen_score(&self) -> &CandidateScore {
        &self.per_candidate[self.chosen_index]
    }
}

/// `crit_α` of a single candidate against `Y`.
pub fn crit_alpha<T: Real>(
    candidate: &EstimatorCandidate<T>,
    y: &DVector<T>,
    registry: &ModelRegistry<T>,
    config: SelectionConfig,
) -> Result<(T, SpaceId)> {
    let ctx = SelectionContext::new(registry, y, config, std::slice::from_ref(candidate))?;
    let (v, at) = ctx.crit_alpha(candidate)?;
    Ok((v, registry.spaces()[at.position].id.clone()))
}

pub fn accuracy_index<T: Real>(
    candidate: &EstimatorCandidate<T>,
    y: &DVector<T>,
    registry: &ModelRegistry<T>,
    config: SelectionConfig,
) -> Result<T> {
    let ctx = SelectionContext::new(registry, y, config, std::slice::from_ref(candidate))?;
    Ok(ctx.accuracy_index(candidate)?.0)
}

/// Scores every candidate and returns the exact minimizer of `crit_α`.
///
/// Ties go to the smaller dimension at the minimizing space, then to the
/// lexicographically smaller candidate id.
pub fn select<T: Real>(
    candidates: &[EstimatorCandidate<T>],
    y: &DVector<T>,
    registry: &ModelRegistry<T>,
    config: SelectionConfig,
) -> Result<SelectionReport> {
    if candidates.is_empty() {
        return domain("selection needs at least one candidate");
    }
    let ctx = SelectionContext::new(registry, y, config, candidates)?;
    select_in(&ctx, candidates)
}

pub fn select_in<T: Real>(ctx: &SelectionContext<'_, T>, candidates: &[EstimatorCandidate<T>]) -> Result<SelectionReport> {
    if candidates.is_empty() {
        return domain("selection needs at least one candidate");
    }
    let scores: Vec<CandidateScore> = candidates.par_iter().map(|c| ctx.score(c)).collect::<Result<_>>()?;
    let chosen_index = (0..scores.len())
        .min_by(|&a, &b| {
            let (sa, sb) = (&scores[a], &scores[b]);
            sa.crit
                .partial_cmp(&sb.crit)
                .unwrap_or(Ordering::Equal)
                .then(sa.dim.cmp(&sb.dim))
                .then_with(|| sa.id.cmp(&sb.id))
        })
        .expect("nonempty");
    let registry = ctx.registry();
    let mut seen: HashMap<usize, ()> = HashMap::new();
    let mut h4_violations = Vec::new();
    for c in candidates {
        for id in &c.approx_ids {
            let p = registry.position(id).expect("validated");
            if seen.insert(p, ()).is_none() && !registry.h4_holds(p) {
                h4_violations.push(registry.spaces()[p].id.clone());
            }
        }
    }
    h4_violations.sort();
    let config = *ctx.config();
    Ok(SelectionReport {
        chosen: scores[chosen_index].id.clone(),
        chosen_index,
        chosen_crit: scores[chosen_index].crit,
        per_candidate: scores,
        constant_c: config.risk_constant(),
        sigma: registry.sigma,
        config,
        h4_violations,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelspace::{ModelSpace, WeightScheme, DEFAULT_RANK_TOL};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
    }

    fn registry(n: usize, spaces: Vec<ModelSpace<f64>>) -> ModelRegistry<f64> {
        ModelRegistry::build(n, spaces, WeightScheme::Explicit, 0.5).unwrap()
    }

    fn pen(n: usize, dim: usize, delta: f64) -> f64 {
        1.1 * pen_delta_cached(n, dim, delta).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SelectionConfig::default().validate().is_ok());
        assert!(SelectionConfig { k: 1.0, ..Default::default() }.validate().is_err());
        assert!(SelectionConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(SelectionConfig { delta: -1.0, ..Default::default() }.validate().is_err());
        assert!(SelectionConfig { kappa: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn risk_constant_value() {
        let c = SelectionConfig::default().risk_constant();
        let ik = 1.0 / 1.1;
        let inv = (1.5 - ik) * (0.5 + 2.0 * (1.0 + ik)) / (0.5 * (1.0 - ik));
        assert!((c - 1.0 / inv).abs() < 1e-15);
    }

    #[test]
    fn fitted_in_space_drops_proximity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10;
        let x = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
        let s = ModelSpace::span_of_columns("S", &x, DEFAULT_RANK_TOL).unwrap().with_delta(1.5);
        let y = gauss(&mut rng, n);
        let fitted = s.project(&y);
        let s2 = s.residual_variance(&y).unwrap();
        let reg = registry(n, vec![s]);
        let c = EstimatorCandidate::new("f", fitted.clone(), vec!["S".into()]);
        let (v, id) = crit_alpha(&c, &y, &reg, SelectionConfig::default()).unwrap();
        let expect = (&y - &fitted).norm_squared() + pen(n, 2, 1.5) * s2;
        assert_eq!(id, SpaceId::from("S"));
        assert!((v - expect).abs() < 1e-10);
        let a = accuracy_index(&c, &y, &reg, SelectionConfig::default()).unwrap();
        assert!((a - pen(n, 2, 1.5) * s2).abs() < 1e-10);
    }

    #[test]
    fn zero_space_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 8;
        let y = gauss(&mut rng, n);
        let f = gauss(&mut rng, n);
        let reg = registry(n, vec![ModelSpace::zero("0", n).with_delta(0.7)]);
        let c = EstimatorCandidate::new("f", f.clone(), vec!["0".into()]);
        let (v, _) = crit_alpha(&c, &y, &reg, SelectionConfig::default()).unwrap();
        let yy = y.norm_squared();
        let expect = yy + 0.5 * f.norm_squared() + pen(n, 0, 0.7) * yy / n as f64;
        assert!((v - expect).abs() < 1e-10);
    }

    #[test]
    fn brute_force_min_over_three_spaces() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10;
        let spaces: Vec<ModelSpace<f64>> = (0..3)
            .map(|i| {
                let x = DMatrix::from_fn(n, i + 1, |_, _| StandardNormal.sample(&mut rng));
                ModelSpace::span_of_columns(format!("S{i}"), &x, DEFAULT_RANK_TOL).unwrap().with_delta(0.5 + i as f64)
            })
            .collect();
        let y = gauss(&mut rng, n);
        let f = gauss(&mut rng, n);
        // oracle computed from explicit normal-equation projections
        let mut oracle = f64::INFINITY;
        let mut oracle_a = f64::INFINITY;
        for s in &spaces {
            let b = s.basis();
            let proj = |v: &DVector<f64>| b * (b.transpose() * v);
            let fit = (&y - proj(&f)).norm_squared();
            let prox = (&f - proj(&f)).norm_squared();
            let s2 = (&y - proj(&y)).norm_squared() / (n - s.dim()) as f64;
            let pterm = pen(n, s.dim(), s.delta) * s2;
            oracle = oracle.min(fit + 0.5 * prox + pterm);
            oracle_a = oracle_a.min(prox + pterm);
        }
        let ids: Vec<SpaceId> = spaces.iter().map(|s| s.id.clone()).collect();
        let reg = registry(n, spaces);
        let c = EstimatorCandidate::new("f", f, ids);
        let (v, _) = crit_alpha(&c, &y, &reg, SelectionConfig::default()).unwrap();
        assert!((v - oracle).abs() < 1e-10);
        let a = accuracy_index(&c, &y, &reg, SelectionConfig::default()).unwrap();
        assert!((a - oracle_a).abs() < 1e-10);
    }

    #[test]
    fn empty_collection_is_an_error() {
        let n = 5;
        let reg = registry(n, vec![ModelSpace::zero("0", n)]);
        let c = EstimatorCandidate::new("f", DVector::zeros(n), vec![]);
        assert!(crit_alpha(&c, &DVector::zeros(n), &reg, SelectionConfig::default()).is_err());
        assert!(select::<f64>(&[], &DVector::zeros(n), &reg, SelectionConfig::default()).is_err());
    }

    #[test]
    fn unknown_space_is_an_error() {
        let n = 5;
        let reg = registry(n, vec![ModelSpace::zero("0", n)]);
        let c = EstimatorCandidate::new("f", DVector::zeros(n), vec!["nope".into()]);
        assert!(select(&[c], &DVector::zeros(n), &reg, SelectionConfig::default()).is_err());
    }

    #[test]
    fn single_candidate_is_chosen() {
        let n = 6;
        let reg = registry(n, vec![ModelSpace::zero("0", n)]);
        let y = DVector::from_element(n, 1.0);
        let c = EstimatorCandidate::new("only", y.clone(), vec!["0".into()]);
        let r = select(&[c], &y, &reg, SelectionConfig::default()).unwrap();
        assert_eq!(r.chosen, "only");
        assert_eq!(r.per_candidate.len(), 1);
    }

    #[test]
    fn exact_fit_with_cheap_space_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 12;
        let v = gauss(&mut rng, n);
        let y = &v * 3.0 + gauss(&mut rng, n) * 0.01;
        let s = ModelSpace::span_of("S", n, std::slice::from_ref(&v), DEFAULT_RANK_TOL).unwrap().with_delta(0.5);
        let reg = registry(n, vec![s.clone(), ModelSpace::zero("0", n).with_delta(0.5)]);
        let good = EstimatorCandidate::new("good", s.project(&y), vec!["S".into()]);
        let bad = EstimatorCandidate::new("bad", DVector::zeros(n), vec!["0".into()]);
        let r = select(&[bad, good], &y, &reg, SelectionConfig::default()).unwrap();
        assert_eq!(r.chosen, "good");
        assert!(r.per_candidate[1].crit < r.per_candidate[0].crit);
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let n = 6;
        let reg = registry(n, vec![ModelSpace::zero("0", n)]);
        let y = DVector::from_element(n, 1.0);
        let a = EstimatorCandidate::new("b", y.clone(), vec!["0".into()]);
        let b = EstimatorCandidate::new("a", y.clone(), vec!["0".into()]);
        let r = select(&[a, b], &y, &reg, SelectionConfig::default()).unwrap();
        assert_eq!(r.chosen, "a");
    }

    #[test]
    fn joint_rescaling_keeps_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10;
        let spaces: Vec<ModelSpace<f64>> = (0..4)
            .map(|i| {
                let x = DMatrix::from_fn(n, i, |_, _| StandardNormal.sample(&mut rng));
                ModelSpace::span_of_columns(format!("S{i}"), &x, DEFAULT_RANK_TOL).unwrap().with_delta(i as f64)
            })
            .collect();
        let ids: Vec<SpaceId> = spaces.iter().map(|s| s.id.clone()).collect();
        let reg = registry(n, spaces);
        let y = gauss(&mut rng, n);
        let cands: Vec<_> = (0..5).map(|i| EstimatorCandidate::new(format!("c{i}"), gauss(&mut rng, n), ids.clone())).collect();
        let r1 = select(&cands, &y, &reg, SelectionConfig::default()).unwrap();
        let c = 7.5;
        let scaled: Vec<_> = cands.iter().map(|k| EstimatorCandidate::new(k.id.clone(), &k.fitted * c, k.approx_ids.clone())).collect();
        let r2 = select(&scaled, &(&y * c), &reg, SelectionConfig::default()).unwrap();
        assert_eq!(r1.chosen, r2.chosen);
        for (a, b) in r1.per_candidate.iter().zip(&r2.per_candidate) {
            assert!((a.crit * c * c - b.crit).abs() < 1e-9 * b.crit);
        }
    }

    #[test]
    fn decomposition_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 9;
        let x = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let s = ModelSpace::span_of_columns("S", &x, DEFAULT_RANK_TOL).unwrap().with_delta(1.0);
        let reg = registry(n, vec![s]);
        let y = gauss(&mut rng, n);
        let c = EstimatorCandidate::new("f", gauss(&mut rng, n), vec!["S".into()]);
        let r = select(&[c], &y, &reg, SelectionConfig::default()).unwrap();
        let sc = &r.per_candidate[0];
        assert!((sc.crit - sc.fit - (0.5 * sc.proximity + sc.penalty_term)).abs() < 1e-9);
    }

    #[test]
    fn generic_over_f32() {
        let n = 8;
        let reg = ModelRegistry::<f32>::build(n, vec![ModelSpace::zero("0", n)], WeightScheme::Explicit, 0.5).unwrap();
        let y = DVector::<f32>::from_element(n, 1.0);
        let c = EstimatorCandidate::new("f", y.clone(), vec!["0".into()]);
        let r = select(&[c], &y, &reg, SelectionConfig::default()).unwrap();
        let expect = 8.0 + 0.5 * 8.0 + pen(n, 0, 0.0) * 1.0;
        assert!((r.chosen_crit - expect).abs() < 1e-4);
    }
}
