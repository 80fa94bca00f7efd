//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::time::Instant;

use estsel::aggregate::{convex_inner, Dictionary};
use estsel::distkernel::{edkhi_lhs, mc_edkhi, pen_delta, PenaltyQuery};
use estsel::linsmooth::{decompose, LinearSmoother};
use estsel::modelspace::{ModelRegistry, ModelSpace, WeightScheme, DEFAULT_RANK_TOL};
use estsel::selector::{select, EstimatorCandidate, SelectionConfig};
use estsel::simharness::{
    gen_example, mc_risk, run_campaign, run_replicate, summarize, write_campaign, Campaign, Family, LassoStudy,
    Study, VarSelStudy,
};
use estsel::varselect::{exhaustive_supports, DesignMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const DRAWS: usize = 10_000_000;

fn penalty_fixed_point() -> Outcome {
    let start = Instant::now();
    let queries = [
        (20, 1, 1.0),
        (50, 3, 2.0),
        (100, 10, 5.0),
        (200, 5, 200f64.ln()),
        (100, 1, (10.0 * std::f64::consts::E).ln()),
    ];
    let mut worst: f64 = 0.0;
    for (i, &(n, d, delta)) in queries.iter().enumerate() {
        let q = PenaltyQuery::new(n, d, delta).unwrap();
        let pen = pen_delta(&q).unwrap().pen_delta;
        let (mean, se) = mc_edkhi(&q, pen, DRAWS, 1000 + i as u64).unwrap();
        worst = worst.max((mean - (-delta).exp()).abs() / se);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 3.0 && secs < 120.0, format!("max |z| = {worst:.3} (<= 3), {secs:.1}s (< 120s)"))
}

fn closed_form_vs_mc() -> Outcome {
    let queries = [(10, 1, 1.0), (30, 4, 2.0), (60, 2, 3.0), (100, 10, 5.0), (200, 30, 4.0)];
    let factors = [0.25, 0.5, 0.75, 1.0, 1.25];
    let mut worst: f64 = 0.0;
    for (k, &(n, d, delta)) in queries.iter().enumerate() {
        let q = PenaltyQuery::new(n, d, delta).unwrap();
        let pen = pen_delta(&q).unwrap().pen_delta;
        for &f in &factors {
            let x = f * pen;
            let exact = edkhi_lhs(&q, x).unwrap();
            // one draw set per query, shared across its x values
            let (mean, se) = mc_edkhi(&q, x, DRAWS, 9000 + k as u64).unwrap();
            worst = worst.max((mean - exact).abs() / se);
        }
    }
    outcome(worst <= 3.0, format!("25 points, max |z| = {worst:.3} (<= 3)"))
}

fn random_operator(rng: &mut ChaCha8Rng, kind: usize) -> DMatrix<f64> {
    let n = rng.random_range(3..=12);
    match kind {
        0 => {
            // symmetric with spectrum spread over [-0.5, 1.5]
            let q = DMatrix::from_fn(n, n, |_, _| gauss(rng)).qr().q();
            let ev = DVector::from_fn(n, |_, _| rng.random_range(-0.5..1.5));
            &q * DMatrix::from_diagonal(&ev) * q.transpose()
        }
        1 => {
            let r = rng.random_range(1..n);
            let a = DMatrix::from_fn(n, r, |_, _| gauss(rng));
            let b = DMatrix::from_fn(r, n, |_, _| gauss(rng));
            let m = a * b;
            let s = m.norm() / (n as f64).sqrt();
            m / s
        }
        _ => DMatrix::from_fn(n, n, |_, _| gauss(rng) / (n as f64).sqrt()),
    }
}

fn smoother_lemma() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut slack_i = f64::INFINITY;
    let mut slack_ii = f64::INFINITY;
    let mut sym_dist: f64 = 0.0;
    for t in 0..500 {
        let a = random_operator(&mut rng, t % 3);
        let n = a.nrows();
        let sm = LinearSmoother::new("a", a.clone()).unwrap();
        let dec = decompose(&sm);
        let s = dec.s_lambda_full("s").unwrap();
        slack_ii = slack_ii.min(4.0 * a.norm_squared() - s.dim() as f64);
        for _ in 0..5 {
            let f = DVector::from_fn(n, |_, _| gauss(&mut rng));
            let af = &a * &f;
            let lhs = s.residual_sq(&af).sqrt();
            let rhs = (&f - &af).norm();
            slack_i = slack_i.min(rhs - lhs);
        }
        if t % 3 == 0 {
            let eig = a.clone().symmetric_eigen();
            let cols: Vec<DVector<f64>> = (0..n)
                .filter(|&i| eig.eigenvalues[i] > 0.5)
                .map(|i| eig.eigenvectors.column(i).into_owned())
                .collect();
            let rule = ModelSpace::span_of("r", n, &cols, DEFAULT_RANK_TOL).unwrap();
            sym_dist = sym_dist.max(rule.projector_distance(&s));
        }
    }
    let pass = slack_i >= -1e-8 && slack_ii >= -1e-8 && sym_dist < 1e-8;
    outcome(
        pass,
        format!(
            "min slack (i) {slack_i:.3e}, (ii) {slack_ii:.3e}, symmetric projector distance {sym_dist:.3e}, {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

/// Least-squares projection through an SVD, independent of the QR path.
fn project_svd(cols: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = cols.clone().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let mut p = DVector::zeros(y.len());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > 1e-10 * smax {
            let ui = u.column(i);
            p += ui * ui.dot(y);
        }
    }
    p
}

fn crit_sm_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let cfg = SelectionConfig::default();
    let mut worst: f64 = 0.0;
    let mut argmin_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(8..=40);
        let kmax = rng.random_range(1..=(n - 2).min(8));
        let basis = DMatrix::from_fn(n, kmax, |_, _| gauss(&mut rng));
        let y = DVector::from_fn(n, |_, _| gauss(&mut rng)) + basis.column(0) * rng.random_range(0.0..3.0);
        let mut spaces = Vec::new();
        let mut cands = Vec::new();
        let mut direct = Vec::new();
        for k in 1..=kmax {
            let cols = basis.columns(0, k).into_owned();
            let id = format!("S{k:02}");
            let delta = k as f64;
            spaces.push(ModelSpace::span_of_columns(id.as_str(), &cols, DEFAULT_RANK_TOL).unwrap().with_delta(delta));
            let fit = project_svd(&cols, &y);
            let rss = (&y - &fit).norm_squared();
            let pen = pen_delta(&PenaltyQuery::new(n, k, delta).unwrap()).unwrap().pen_delta;
            direct.push(rss + cfg.k * pen * rss / (n - k) as f64);
            cands.push(EstimatorCandidate::new(id.clone(), fit, vec![id.as_str().into()]));
        }
        let reg = ModelRegistry::build(n, spaces, WeightScheme::Explicit, cfg.kappa).unwrap();
        let rep = select(&cands, &y, &reg, cfg).unwrap();
        for (c, d) in rep.per_candidate.iter().zip(&direct) {
            worst = worst.max((c.crit - d).abs() / d.abs().max(1.0));
        }
        let best = (0..direct.len()).min_by(|&a, &b| direct[a].total_cmp(&direct[b])).unwrap();
        argmin_ok &= rep.chosen_index == best;
    }
    outcome(argmin_ok && worst <= 1e-10, format!("argmin identical: {argmin_ok}, max relative gap {worst:.3e} (<= 1e-10)"))
}

fn registry_sigma() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut details = Vec::new();
    let mut pass = true;
    for p in [6usize, 8, 10] {
        let n = p + 6;
        let x = DMatrix::from_fn(n, p, |_, _| gauss(&mut rng));
        let design = DesignMatrix::new(x, None).unwrap();
        let spaces: Vec<_> = exhaustive_supports(p, p)
            .unwrap()
            .iter()
            .map(|s| design.space(&s.indices).unwrap())
            .collect();
        let reg = ModelRegistry::build(n, spaces, WeightScheme::VarSel { p }, 0.5).unwrap();
        let expected: f64 = (0..=p).map(|d| 1.0 / (1.0 + d as f64)).sum();
        let bound = 1.0 + (1.0 + p as f64).ln();
        let ok = (reg.sigma - expected).abs() <= 1e-12 * expected && reg.sigma <= bound && reg.len() == 1 << p;
        pass &= ok;
        details.push(format!("p={p}: {:.12} vs {expected:.12} (bound {bound:.4})", reg.sigma));
    }
    outcome(pass, details.join("; "))
}

fn lasso_tuning_desk() -> Outcome {
    let start = Instant::now();
    let c = Campaign {
        family: Family::E1,
        n: 100,
        p: 50,
        rho: 10.0,
        n_designs: 2,
        n_sims: 100,
        seed: 2024,
        study: Study::Lasso(LassoStudy { d_max: 30, v: None, config: SelectionConfig::default() }),
    };
    let r = run_campaign(&c).unwrap();
    let table = |name: &str| r.tables.iter().find(|t| t.name == name).map(|t| t.mean);
    let (Some(pen), Some(cv)) = (table("ratio_pen"), table("ratio_cv")) else {
        return outcome(false, "no example passed the O < n sigma^2 / 3 filter".into());
    };
    let secs = start.elapsed().as_secs_f64();
    let pass = (1.0..=1.3).contains(&pen) && pen <= cv + 0.05 && secs < 600.0;
    outcome(pass, format!("mean R/O: pen {pen:.4} in [1, 1.3], cv {cv:.4}, pen <= cv + 0.05; {secs:.1}s"))
}

fn discovery_rates_desk() -> Outcome {
    let start = Instant::now();
    let c = Campaign {
        family: Family::E7,
        n: 100,
        p: 100,
        rho: 10.0,
        n_designs: 1,
        n_sims: 100,
        seed: 2025,
        study: Study::VarSel(VarSelStudy { exhaustive_dmax: Some(2), ..Default::default() }),
    };
    let r = run_campaign(&c).unwrap();
    let m = &r.rows[0].risk.metrics;
    let get = |k: &str| m.iter().find(|x| x.name == k).unwrap().mean;
    let (fdr, tdr) = (get("fdr"), get("tdr"));
    let secs = start.elapsed().as_secs_f64();
    outcome(fdr <= 0.10 && tdr >= 0.90 && secs < 900.0, format!("FDR {fdr:.4} (<= 0.10), TDR {tdr:.4} (>= 0.90); {secs:.1}s"))
}

/// Quadratic objective `λᵀQλ − 2bᵀλ + c` evaluated directly.
struct Quad {
    q: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl Quad {
    fn value(&self, l: &[f64]) -> f64 {
        let l = DVector::from_column_slice(l);
        (l.transpose() * &self.q * &l)[(0, 0)] - 2.0 * self.b.dot(&l) + self.c
    }
}

/// Minimum over the simplex points `{k·step}` with `Σ = 1`, restricted to a
/// box around `center` of half-width `radius` when given.
fn grid_search(obj: &Quad, m: usize, step: f64, center: Option<(&[f64], f64)>) -> (f64, Vec<f64>) {
    let mut best = (f64::INFINITY, vec![0.0; m]);
    let mut point = vec![0.0; m];
    let (lo, hi): (Vec<f64>, Vec<f64>) = match center {
        Some((c, r)) => (c.iter().map(|v| (v - r).max(0.0)).collect(), c.iter().map(|v| (v + r).min(1.0)).collect()),
        None => (vec![0.0; m], vec![1.0; m]),
    };
    fn rec(j: usize, m: usize, step: f64, lo: &[f64], hi: &[f64], point: &mut Vec<f64>, used: f64, obj: &Quad, best: &mut (f64, Vec<f64>)) {
        if j == m - 1 {
            let last = 1.0 - used;
            if last >= lo[j] - 1e-12 && last <= hi[j] + 1e-12 && last >= -1e-12 {
                point[j] = last.max(0.0);
                let v = obj.value(point);
                if v < best.0 {
                    *best = (v, point.clone());
                }
            }
            return;
        }
        let k0 = (lo[j] / step).ceil() as i64;
        let k1 = (hi[j].min(1.0 - used) / step + 1e-9).floor() as i64;
        for k in k0..=k1 {
            point[j] = k as f64 * step;
            rec(j + 1, m, step, lo, hi, point, used + point[j], obj, best);
        }
    }
    rec(0, m, step, &lo, &hi, &mut point, 0.0, obj, &mut best);
    best
}

fn convex_inner_solver() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut worst_coarse: f64 = f64::NEG_INFINITY;
    let mut worst_refined: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let alpha = 0.5;
    for _ in 0..50 {
        let m = rng.random_range(2..=5);
        let n = rng.random_range(8..=30);
        let phis = DMatrix::from_fn(n, m, |_, _| gauss(&mut rng));
        let dict = Dictionary::new(phis.clone()).unwrap();
        let y = DVector::from_fn(n, |_, _| gauss(&mut rng)) + phis.column(0) * 0.5;
        let k = rng.random_range(1..=m);
        let subset: Vec<usize> = (0..k).collect();
        let space = dict.span(&subset).unwrap();
        let sol = convex_inner(&dict, &y, &space, alpha);
        // independent objective: G = B Bᵀ Φ from an SVD projector
        let g = DMatrix::from_columns(&(0..m).map(|j| project_svd(&phis.columns(0, k).into_owned(), &phis.column(j).into_owned())).collect::<Vec<_>>());
        let r = &phis - &g;
        let obj = Quad { q: g.transpose() * &g + r.transpose() * &r * alpha, b: g.transpose() * &y, c: y.norm_squared() };
        let (coarse, mut at) = grid_search(&obj, m, 0.02, None);
        worst_coarse = worst_coarse.max(sol.value - coarse);
        let mut refined = coarse;
        let mut step = 0.02;
        while step > 1e-7 {
            let (v, p) = grid_search(&obj, m, step / 10.0, Some((&at, step)));
            if v < refined {
                refined = v;
                at = p;
            }
            step /= 10.0;
        }
        worst_refined = worst_refined.max((sol.value - refined).abs());
        worst_kkt = worst_kkt.max(-sol.kkt_slack);
    }
    let pass = worst_coarse <= 1e-4 && worst_refined <= 1e-4 && worst_kkt <= 1e-6;
    outcome(
        pass,
        format!(
            "solver - coarse grid <= {worst_coarse:.3e}, |solver - refined grid| <= {worst_refined:.3e} (1e-4), KKT violation {worst_kkt:.3e} (1e-6)"
        ),
    )
}

fn monotone_in_lambda() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = SelectionConfig::default();
    let mut violations = 0;
    for _ in 0..100 {
        let n = rng.random_range(10..=30);
        let p = rng.random_range(2..=6);
        let x = DMatrix::from_fn(n, p, |_, _| gauss(&mut rng));
        let spaces: Vec<_> = (1..=p)
            .map(|k| ModelSpace::span_of_columns(format!("S{k}").as_str(), &x.columns(0, k).into_owned(), DEFAULT_RANK_TOL).unwrap().with_delta(k as f64))
            .collect();
        let reg = ModelRegistry::build(n, spaces, WeightScheme::Explicit, cfg.kappa).unwrap();
        let y = DVector::from_fn(n, |_, _| gauss(&mut rng)) + x.column(0) * 2.0;
        let mut cands = Vec::new();
        let mut prev = f64::INFINITY;
        for c in 0..8 {
            let fit = DVector::from_fn(n, |i, _| y[i] * rng.random_range(0.0..1.0));
            let approx = (1..=p).filter(|_| rng.random_bool(0.6)).map(|k| format!("S{k}").as_str().into()).collect::<Vec<_>>();
            let approx = if approx.is_empty() { vec!["S1".into()] } else { approx };
            cands.push(EstimatorCandidate::new(format!("c{c}"), fit, approx));
            let v = select(&cands, &y, &reg, cfg).unwrap().chosen_crit;
            if v > prev {
                violations += 1;
            }
            prev = v;
        }
    }
    outcome(violations == 0, format!("{violations} increases over 100 instances x 8 additions"))
}

fn determinism() -> Outcome {
    let c = Campaign {
        family: Family::E8,
        n: 60,
        p: 20,
        rho: 5.0,
        n_designs: 2,
        n_sims: 20,
        seed: 7,
        study: Study::Lasso(LassoStudy { d_max: 10, v: None, config: SelectionConfig::default() }),
    };
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    write_campaign(&a, &run_campaign(&c).unwrap()).unwrap();
    write_campaign(&b, &run_campaign(&c).unwrap()).unwrap();
    let same_files = ["rows.csv", "summary.json"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let ex = gen_example(&c.example(1)).unwrap();
    let study = LassoStudy { d_max: 10, v: None, config: SelectionConfig::default() };
    let direct = mc_risk(&ex, &study, 20).unwrap();
    let mut order: Vec<u64> = (0..20).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let shuffled = order.iter().map(|&r| run_replicate(&ex, r, &study).map_err(|e| (r, e.to_string()))).collect();
    let permuted = summarize(&ex, shuffled).unwrap();
    let same_agg = permuted == direct;
    outcome(same_files && same_agg, format!("report files identical: {same_files}; permuted replicate order identical: {same_agg}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("penalty fixed point under Monte Carlo", penalty_fixed_point),
        ("closed form agrees with Monte Carlo", closed_form_vs_mc),
        ("smoother space identity", smoother_lemma),
        ("projection-candidate reduction", crit_sm_reduction),
        ("registry mass for exhaustive supports", registry_sigma),
        ("desk-scale lasso tuning ratios (E1)", lasso_tuning_desk),
        ("desk-scale discovery rates (E7)", discovery_rates_desk),
        ("convex aggregation inner solver", convex_inner_solver),
        ("monotone in the candidate family", monotone_in_lambda),
        ("determinism and order invariance", determinism),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let tag = format!("{}", i + 1);
        if let Some(fl) = &filter {
            if fl != &tag {
                continue;
            }
        }
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("{} criterion {tag:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
