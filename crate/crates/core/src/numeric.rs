//! Small exact solvers shared by the allocation modules.

use crate::error::{AdlError, Result};

/// Solves `Σ clamp(a_i - b_i ν, lo_i, hi_i) = target` for `ν` with `b_i ≥ 0`.
///
/// The left side is piecewise linear and nonincreasing in `ν`, so the root
/// is located between sorted breakpoints and then solved in closed form.
/// Returns `(ν, x)`.
pub(crate) fn clamped_fill(a: &[f64], b: &[f64], lo: &[f64], hi: &[f64], target: f64) -> Result<(f64, Vec<f64>)> {
    let n = a.len();
    let term = |i: usize, nu: f64| (a[i] - b[i] * nu).clamp(lo[i], hi[i]);
    let total = |nu: f64| (0..n).map(|i| term(i, nu)).sum::<f64>();
    let s_min: f64 = (0..n).map(|i| if b[i] > 0.0 { lo[i] } else { term(i, 0.0) }).sum();
    let s_max: f64 = (0..n).map(|i| if b[i] > 0.0 { hi[i] } else { term(i, 0.0) }).sum();
    let slack = 1e-12 * (1.0 + s_min.abs().max(s_max.abs()));
    if target < s_min - slack || target > s_max + slack {
        return Err(AdlError::Infeasible(format!(
            "target {target} outside attainable range [{s_min}, {s_max}]"
        )));
    }
    let mut bps: Vec<f64> = (0..n)
        .filter(|&i| b[i] > 0.0)
        .flat_map(|i| [(a[i] - hi[i]) / b[i], (a[i] - lo[i]) / b[i]])
        .collect();
    if bps.is_empty() {
        return Ok((0.0, (0..n).map(|i| term(i, 0.0)).collect()));
    }
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    let nu = if target >= total(bps[0]) {
        bps[0]
    } else if target <= total(bps[bps.len() - 1]) {
        bps[bps.len() - 1]
    } else {
        // last breakpoint whose total still exceeds the target
        let j = bps.partition_point(|&nu| total(nu) > target) - 1;
        let (left, right) = (bps[j], bps[j + 1]);
        let mid = 0.5 * (left + right);
        let (mut fixed, mut sa, mut sb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let raw = a[i] - b[i] * mid;
            if b[i] > 0.0 && raw > lo[i] && raw < hi[i] {
                sa += a[i];
                sb += b[i];
            } else {
                fixed += term(i, mid);
            }
        }
        if sb > 0.0 {
            ((fixed + sa - target) / sb).clamp(left, right)
        } else {
            right
        }
    };
    Ok((nu, (0..n).map(|i| term(i, nu)).collect()))
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to relative tolerance
/// `rel_tol`, started from 64 equal panels so narrow features are not
/// skipped by the first estimate.
pub(crate) fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> f64 {
    const PANELS: usize = 64;
    if a == b {
        return 0.0;
    }
    let h = (b - a) / PANELS as f64;
    let panels: Vec<(f64, f64, f64, f64, f64, f64)> = (0..PANELS)
        .map(|j| {
            let lo = a + h * j as f64;
            let hi = if j + 1 == PANELS { b } else { lo + h };
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            (lo, hi, fa, fm, fb, (hi - lo) / 6.0 * (fa + 4.0 * fm + fb))
        })
        .collect();
    let coarse: f64 = panels.iter().map(|p| p.5.abs()).sum();
    // rounding in the Simpson differences sits near eps·coarse; asking for
    // less than that would only deepen the recursion
    let floor = 64.0 * f64::EPSILON * coarse;
    let tol = (rel_tol * coarse).max(floor).max(f64::MIN_POSITIVE) / PANELS as f64;
    panels
        .into_iter()
        .map(|(lo, hi, fa, fm, fb, whole)| simpson(f, lo, hi, fa, fm, fb, whole, tol, floor, 40))
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, floor: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol.max(floor) {
        return left + right + delta / 15.0;
    }
    let tol = 0.5 * tol;
    simpson(f, a, m, fa, flm, fm, left, tol, floor, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol, floor, depth - 1)
}
