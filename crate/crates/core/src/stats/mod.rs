//! Correlation, significance and multiple-testing correction.

pub mod special;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Pearson correlation with a two-pass (mean-centred) formulation, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64], gene: &str) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "pearson on vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::input(format!("pearson needs at least 2 samples for gene `{gene}`")));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation { gene: gene.to_string() });
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PValue {
    pub p: f64,
    /// `|r| = 1`, reported as `p = 0` by convention.
    pub exact: bool,
}

/// Two-sided p-value of `H0: ρ = 0` via `t = r·√((n−2)/(1−r²))` on `n − 2` df.
pub fn pearson_pvalue(r: f64, n: usize) -> Result<PValue> {
    if n < 3 {
        return Err(Error::input(format!("p-value needs n ≥ 3, got {n}")));
    }
    if !(-1.0..=1.0).contains(&r) {
        return Err(Error::input(format!("correlation {r} outside [-1, 1]")));
    }
    if r.abs() == 1.0 {
        return Ok(PValue { p: 0.0, exact: true });
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    Ok(PValue {
        p: special::student_t_two_sided(t, df),
        exact: false,
    })
}

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Two-sided permutation p-value `(1 + #{|r*| ≥ |r|}) / (1 + B)`, permuting `y`.
pub fn permutation_pvalue<R: Rng + ?Sized>(
    x: &[f64],
    y: &[f64],
    permutations: usize,
    rng: &mut R,
    gene: &str,
) -> Result<f64> {
    let observed = pearson(x, y, gene)?.abs();
    let mut shuffled = y.to_vec();
    let mut hits = 0usize;
    // tolerance for ties from rounding in permuted sums
    let tol = 1e-12;
    for _ in 0..permutations {
        shuffled.shuffle(rng);
        if pearson(x, &shuffled, gene)?.abs() >= observed - tol {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + permutations) as f64)
}

/// Šidák per-rank threshold `1 − (1 − α)^(1/(m − i + 1))`, `rank` 1-based.
pub fn sidak_threshold(alpha: f64, m: usize, rank: usize) -> f64 {
    let k = (m - rank + 1) as f64;
    // -expm1(ln(1-α)/k) avoids cancellation for small α
    -((-alpha).ln_1p() / k).exp_m1()
}

/// Holm–Šidák step-down. Flags come back in the input order.
pub fn holm_sidak(pvalues: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha {alpha} must lie in (0, 1)")));
    }
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::input(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let mut reject = vec![false; m];
    for (i, &idx) in order.iter().enumerate() {
        if pvalues[idx] <= sidak_threshold(alpha, m, i + 1) {
            reject[idx] = true;
        } else {
            break;
        }
    }
    Ok(reject)
}
