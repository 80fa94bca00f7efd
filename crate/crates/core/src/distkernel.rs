//! χ² / Fisher tail kernel and the penalty solve.
//!
//! For a space of dimension `D` in ℝⁿ with weight `Δ`, the penalty `pen_Δ` is
//! the unique `x ≥ 0` with
//!
//! ```text
//! E[(U − x·V/(n−D))₊] = e^{−Δ},   U ~ χ²(D+1),  V ~ χ²(n−D−1)  independent.
//! ```
//!
//! Writing `N = n − D`, the left-hand side has the closed form
//!
//! ```text
//! (D+1)·[ P(F_{D+3,N−1} ≥ x(N−1)/(N(D+3))) − x(N−1)/(N(D+1))·P(F_{D+1,N+1} ≥ x(N+1)/(N(D+1))) ]
//! ```
//!
//! which follows from `E[U·1{U>c}] = k·P(χ²_{k+2} > c)` for `U ~ χ²(k)`.
//! [`mc_edkhi`] is an independent Monte-Carlo estimate of the same quantity.

use std::collections::HashMap;
use std::sync::{OnceLock, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Error, Result};

/// Degrees of freedom above this are outside the supported range.
pub const MAX_DOF: usize = 100_000;

const BETA_CF_RTOL: f64 = 1e-12;
const BETA_CF_MAX_ITER: usize = 20_000;

pub const PENALTY_RESIDUAL_TOL: f64 = 1e-9;
const SOLVER_MAX_ITER: usize = 200;
// enough to walk the bracket across the whole f64 range
const MAX_BRACKET_DOUBLINGS: usize = 1100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyQuery {
    pub n: usize,
    pub dim: usize,
    pub delta: f64,
}

impl PenaltyQuery {
    pub fn new(n: usize, dim: usize, delta: f64) -> Result<Self> {
        let q = Self { n, dim, delta };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.dim + 2 > self.n {
            return Err(Error::H0Violation { dim: self.dim, n: self.n });
        }
        if self.n > MAX_DOF {
            return domain(format!("n = {} exceeds the supported range ({MAX_DOF})", self.n));
        }
        if !self.delta.is_finite() || self.delta < 0.0 {
            return domain(format!("weight must be finite and nonnegative, got {}", self.delta));
        }
        if (-self.delta).exp() == 0.0 {
            return domain(format!("weight {} underflows e^-delta", self.delta));
        }
        Ok(())
    }

    /// Degrees of freedom of `U` and `V`.
    pub fn dofs(&self) -> (usize, usize) {
        (self.dim + 1, self.n - self.dim - 1)
    }

    pub fn target(&self) -> f64 {
        (-self.delta).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyValue {
    pub pen_delta: f64,
    /// `|lhs(pen_delta) − e^{−Δ}|` at the returned root.
    pub residual: f64,
}

impl PenaltyValue {
    /// `pen_Δ / (dim ∨ Δ)`; only meaningful when `dim ∨ Δ > 0`.
    pub fn magnitude_ratio(&self, query: &PenaltyQuery) -> Option<f64> {
        let scale = (query.dim as f64).max(query.delta);
        (scale > 0.0).then(|| self.pen_delta / scale)
    }
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0 && b > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_cf(a, b, x) / a).clamp(0.0, 1.0)
    } else {
        (1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b).clamp(0.0, 1.0)
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() <= BETA_CF_RTOL {
            break;
        }
    }
    h
}

fn check_dof(d: usize, name: &str) -> Result<()> {
    if d == 0 {
        return domain(format!("{name} must be at least 1"));
    }
    if d > MAX_DOF {
        return domain(format!("{name} = {d} exceeds the supported range ({MAX_DOF})"));
    }
    Ok(())
}

/// `P(F_{d1,d2} ≥ x)`.
pub fn fisher_sf(x: f64, d1: usize, d2: usize) -> Result<f64> {
    check_dof(d1, "d1")?;
    check_dof(d2, "d2")?;
    if !(x >= 0.0) {
        return domain(format!("Fisher quantile must be nonnegative, got {x}"));
    }
    Ok(fisher_sf_unchecked(x, d1 as f64, d2 as f64))
}

fn fisher_sf_unchecked(x: f64, d1: f64, d2: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    let z = d2 / (d2 + d1 * x);
    beta_reg(d2 / 2.0, d1 / 2.0, z)
}

/// `E[(U − x·V/(n−D))₊]` through Fisher tail probabilities.
pub fn edkhi_lhs(query: &PenaltyQuery, x: f64) -> Result<f64> {
    query.validate()?;
    if !(x >= 0.0) {
        return domain(format!("x must be nonnegative, got {x}"));
    }
    Ok(edkhi_lhs_unchecked(query, x))
}

fn edkhi_lhs_unchecked(query: &PenaltyQuery, x: f64) -> f64 {
    let d = query.dim as f64;
    let big_n = (query.n - query.dim) as f64;
    if x == 0.0 {
        return d + 1.0;
    }
    let first = fisher_sf_unchecked(x * (big_n - 1.0) / (big_n * (d + 3.0)), d + 3.0, big_n - 1.0);
    let scale = x * (big_n - 1.0) / (big_n * (d + 1.0));
    let second = fisher_sf_unchecked(x * (big_n + 1.0) / (big_n * (d + 1.0)), d + 1.0, big_n + 1.0);
    ((d + 1.0) * (first - scale * second)).max(0.0)
}

/// Monte-Carlo estimate of `E[(U − x·V/(n−D))₊]` with its standard error.
///
/// Draws are split into fixed-size chunks, each with its own ChaCha stream,
/// so the result depends only on `(query, x, draws, seed)`.
pub fn mc_edkhi(query: &PenaltyQuery, x: f64, draws: usize, seed: u64) -> Result<(f64, f64)> {
    query.validate()?;
    if draws < 10_000 {
        return domain(format!("at least 10^4 draws required, got {draws}"));
    }
    if !(x >= 0.0) {
        return domain(format!("x must be nonnegative, got {x}"));
    }
    const CHUNK: usize = 1 << 16;
    let (du, dv) = query.dofs();
    let u_dist = ChiSquared::new(du as f64).map_err(|e| Error::Domain(e.to_string()))?;
    let v_dist = ChiSquared::new(dv as f64).map_err(|e| Error::Domain(e.to_string()))?;
    let t = x / (query.n - query.dim) as f64;
    let chunks = draws.div_ceil(CHUNK);
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(draws - c * CHUNK);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..len {
                let u = u_dist.sample(&mut rng);
                let v = v_dist.sample(&mut rng);
                let z = (u - t * v).max(0.0);
                sum += z;
                sum_sq += z * z;
            }
            (sum, sum_sq)
        })
        .collect();
    let (sum, sum_sq) = partial
        .iter()
        .fold((0.0, 0.0), |(s, q), &(a, b)| (s + a, q + b));
    let m = draws as f64;
    let mean = sum / m;
    let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok((mean, (var / m).sqrt()))
}

/// Solves the penalty equation for `pen_Δ`.
///
/// The root is bracketed on `[0, x_hi]`, with `x_hi` doubled from
/// `(n−D)(D+1)`, and refined by Brent's method on `ln lhs(x) + Δ` so that
/// large weights (tiny right-hand sides) are still resolved to full relative
/// precision.
pub fn pen_delta(query: &PenaltyQuery) -> Result<PenaltyValue> {
    query.validate()?;
    let target = query.target();
    let log_target = -query.delta;
    let g = |x: f64| {
        let lhs = edkhi_lhs_unchecked(query, x);
        if lhs > 0.0 {
            lhs.ln() - log_target
        } else {
            f64::NEG_INFINITY
        }
    };
    let g0 = g(0.0);
    if g0 <= 0.0 {
        // only possible when D = 0 and Δ = 0
        return Ok(PenaltyValue { pen_delta: 0.0, residual: (edkhi_lhs_unchecked(query, 0.0) - target).abs() });
    }
    let mut hi = ((query.n - query.dim) * (query.dim + 1)) as f64;
    let mut g_hi = g(hi);
    let mut doublings = 0;
    while g_hi >= 0.0 {
        hi *= 2.0;
        g_hi = g(hi);
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS || !hi.is_finite() {
            return Err(Error::Solver { iterations: doublings, lo: 0.0, hi });
        }
    }
    let lo = if doublings > 0 { hi / 2.0 } else { 0.0 };
    let g_lo = if doublings > 0 { g(lo) } else { g0 };
    let root = brent(g, lo, hi, g_lo, g_hi)?;
    let residual = (edkhi_lhs_unchecked(query, root) - target).abs();
    if residual > PENALTY_RESIDUAL_TOL {
        return Err(Error::Solver { iterations: SOLVER_MAX_ITER, lo, hi });
    }
    Ok(PenaltyValue { pen_delta: root, residual })
}

/// Brent's method for a sign change on `[a, b]`.
fn brent<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, fa: f64, fb: f64) -> Result<f64> {
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Solver { iterations: 0, lo: a, hi: b });
    }
    // the upper end may be -inf in log space; pull it in until finite
    let mut guard = 0;
    while !fb.is_finite() {
        let mid = 0.5 * (a + b);
        let fm = f(mid);
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
            fb = fm;
        }
        guard += 1;
        if guard > SOLVER_MAX_ITER {
            return Err(Error::Solver { iterations: guard, lo: a, hi: b });
        }
    }
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..SOLVER_MAX_ITER {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 1e-300;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = d;
            }
        } else {
            d = m;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
    }
    Err(Error::Solver { iterations: SOLVER_MAX_ITER, lo: a.min(c), hi: a.max(c) })
}

/// Process-wide memo of penalty solves keyed by `(n, dim, Δ)`.
#[derive(Debug, Default)]
pub struct PenaltyCache {
    map: RwLock<HashMap<(usize, usize, u64), PenaltyValue>>,
}

impl PenaltyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn global() -> &'static PenaltyCache {
        static CACHE: OnceLock<PenaltyCache> = OnceLock::new();
        CACHE.get_or_init(PenaltyCache::new)
    }

    pub fn get(&self, query: &PenaltyQuery) -> Result<PenaltyValue> {
        let key = (query.n, query.dim, (query.delta + 0.0).to_bits());
        if let Some(v) = self.map.read().expect("penalty cache poisoned").get(&key) {
            return Ok(*v);
        }
        let v = pen_delta(query)?;
        self.map.write().expect("penalty cache poisoned").insert(key, v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("penalty cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `pen_Δ` through the global cache.
pub fn pen_delta_cached(n: usize, dim: usize, delta: f64) -> Result<f64> {
    let q = PenaltyQuery::new(n, dim, delta)?;
    Ok(PenaltyCache::global().get(&q)?.pen_delta)
}
