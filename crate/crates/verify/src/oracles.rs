//! Independent reference computations.

/// `((q - x)(p - p_tau) - E)_+` for an isolated short.
pub fn isolated_loss(q: f64, equity: f64, p_tau: f64, x: f64, p: f64) -> f64 {
    ((q - x) * (p - p_tau) - equity).max(0.0)
}

/// `((q - x)ᵀ(p - p_tau) - E)_+` for a cross-margin portfolio.
pub fn portfolio_loss(q: &[f64], equity: f64, p_tau: &[f64], x: &[f64], p: &[f64]) -> f64 {
    let pnl: f64 = (0..q.len()).map(|k| (q[k] - x[k]) * (p[k] - p_tau[k])).sum();
    (pnl - equity).max(0.0)
}

/// CVaR through its variational form `min_t { t + E[(L - t)_+] / (1 - β) }`.
/// For a discrete law the minimum is attained at one of the atoms.
pub fn variational_cvar(values: &[f64], probs: &[f64], beta: f64) -> f64 {
    values
        .iter()
        .map(|&t| {
            let excess: f64 = values.iter().zip(probs).map(|(v, p)| p * (v - t).max(0.0)).sum();
            t + excess / (1.0 - beta)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Largest eigenpair of `[[a, b], [b, d]]` in closed form, `u₁` normalized
/// with a positive largest entry.
pub fn symmetric_2x2_top(a: f64, b: f64, d: f64) -> (f64, [f64; 2]) {
    let mean = 0.5 * (a + d);
    let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let lambda = mean + radius;
    // (b, λ - a) and (λ - d, b) both span the eigenspace; use the longer one
    let (u, w) = if (lambda - a).abs() > (lambda - d).abs() {
        (b, lambda - a)
    } else {
        (lambda - d, b)
    };
    let norm = (u * u + w * w).sqrt();
    let pivot = if u.abs() >= w.abs() { u } else { w };
    let s = pivot.signum() * norm;
    (lambda, [u / s, w / s])
}

/// `CVaR_β((p_T - z)_+)` when `p_T - p0` is exponential with the given rate.
pub fn exponential_call_cvar(p0: f64, rate: f64, beta: f64, z: f64) -> f64 {
    let p_beta = p0 + (1.0 / (1.0 - beta)).ln() / rate;
    if z <= p_beta {
        p_beta + 1.0 / rate - z
    } else {
        (-rate * (z - p0)).exp() / rate / (1.0 - beta)
    }
}

/// Visits every `x = total · k / steps` with `Σ k = steps` and `x_i ≤ caps_i`.
pub fn simplex_grid(caps: &[f64], total: f64, steps: usize, mut visit: impl FnMut(&[f64])) {
    fn rec(caps: &[f64], h: f64, left: usize, x: &mut Vec<f64>, visit: &mut dyn FnMut(&[f64])) {
        let i = x.len();
        if i + 1 == caps.len() {
            let last = left as f64 * h;
            if last <= caps[i] * (1.0 + 1e-12) {
                x.push(last);
                visit(x);
                x.pop();
            }
            return;
        }
        for k in 0..=left {
            let xi = k as f64 * h;
            if xi > caps[i] * (1.0 + 1e-12) {
                break;
            }
            x.push(xi);
            rec(caps, h, left - k, x, visit);
            x.pop();
        }
    }
    let mut x = Vec::with_capacity(caps.len());
    rec(caps, total / steps as f64, steps, &mut x, &mut visit);
}

/// Sample mean and its standard error.
pub fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Random point of `{0 ≤ x ≤ cap, Σ x = total}`: positive weights scaled
/// by the factor that makes the capped sum hit the total.
pub fn capped_split(weights: &[f64], caps: &[f64], total: f64) -> Vec<f64> {
    let fill = |s: f64| -> Vec<f64> { weights.iter().zip(caps).map(|(w, c)| (s * w).min(*c)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    while fill(hi).iter().sum::<f64>() < total {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fill(mid).iter().sum::<f64>() < total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    fill(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_compositions() {
        let mut count = 0;
        simplex_grid(&[10.0, 10.0, 10.0], 1.0, 4, |_| count += 1);
        assert_eq!(count, 15);
        let mut count = 0;
        simplex_grid(&[0.5, 10.0], 1.0, 4, |x| {
            assert!(x[0] <= 0.5);
            count += 1;
        });
        assert_eq!(count, 3);
    }

    #[test]
    fn eigenpair_of_diagonal_and_coupled() {
        let (l, u) = symmetric_2x2_top(1.0, 0.0, 3.0);
        assert_eq!((l, u), (3.0, [0.0, 1.0]));
        let (l, u) = symmetric_2x2_top(2.0, 1.0, 2.0);
        assert!((l - 3.0).abs() < 1e-15);
        assert!((u[0] - u[1]).abs() < 1e-15 && u[0] > 0.0);
    }

    #[test]
    fn variational_cvar_of_two_atoms() {
        // worst 10% of {0 w.p. 0.9, 10 w.p. 0.1} is the atom at 10
        assert!((variational_cvar(&[0.0, 10.0], &[0.9, 0.1], 0.9) - 10.0).abs() < 1e-12);
        assert!((variational_cvar(&[0.0, 10.0], &[0.9, 0.1], 0.8) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn capped_split_hits_total() {
        let x = capped_split(&[1.0, 1.0, 5.0], &[3.0, 3.0, 1.0], 4.0);
        assert!((x.iter().sum::<f64>() - 4.0).abs() < 1e-12);
        assert!((x[2] - 1.0).abs() < 1e-12);
    }
}
