//! Weighted least-squares logistic fits in log-x, by multi-start damped
//! Gauss-Newton. The decreasing form yields t_max (where attack success
//! falls to 50%), the increasing form yields a_min (where token-attack
//! success rises to 50%). The fitted curve equals exactly 0.5 at the
//! crossing parameter by construction.

use crate::error::{Error, Result};

const MAX_ITERS: usize = 500;
const STEP_TOL: f64 = 1e-8;
const N_STARTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SigmoidFit {
    /// Slope parameter; positive for a well-formed decreasing curve.
    pub alpha: f64,
    /// Target length at which the fitted success rate crosses 50%.
    pub t_max: f64,
    pub t_max_stderr: Option<f64>,
    /// Weighted sum of squared residuals.
    pub residual_sum: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AminFit {
    pub alpha: f64,
    /// Attack length at which the fitted success rate crosses 50%.
    pub a_min: f64,
    pub a_min_stderr: Option<f64>,
    pub residual_sum: f64,
    pub converged: bool,
}

/// Decreasing logistic in log t: 1 / (1 + exp(α (log t − log t_max))).
pub fn sigmoid_value(t: f64, alpha: f64, t_max: f64) -> f64 {
    1.0 / (1.0 + (alpha * (t.ln() - t_max.ln())).exp())
}

/// Fit the decreasing logistic to (t, p, weight) success points.
/// All-equal p values carry no crossing information and come back
/// flagged `converged: false` with NaN parameters.
pub fn fit_sigmoid(points: &[(f64, f64, f64)]) -> Result<SigmoidFit> {
    let fit = fit_logistic(points, false)?;
    Ok(SigmoidFit {
        alpha: fit.alpha,
        t_max: fit.crossing,
        t_max_stderr: fit.crossing_stderr,
        residual_sum: fit.residual_sum,
        converged: fit.converged,
    })
}

/// Fit the increasing logistic to (a, p, weight) success points.
pub fn fit_amin(points: &[(f64, f64, f64)]) -> Result<AminFit> {
    let fit = fit_logistic(points, true)?;
    Ok(AminFit {
        alpha: fit.alpha,
        a_min: fit.crossing,
        a_min_stderr: fit.crossing_stderr,
        residual_sum: fit.residual_sum,
        converged: fit.converged,
    })
}

struct LogisticFit {
    alpha: f64,
    crossing: f64,
    crossing_stderr: Option<f64>,
    residual_sum: f64,
    converged: bool,
}

/// σ(x; α, μ) with μ = log crossing; `increasing` flips the sign of α.
fn eval(lx: f64, alpha: f64, mu: f64, increasing: bool) -> f64 {
    let sign = if increasing { -1.0 } else { 1.0 };
    1.0 / (1.0 + (sign * alpha * (lx - mu)).exp())
}

fn fit_logistic(points: &[(f64, f64, f64)], increasing: bool) -> Result<LogisticFit> {
    let distinct = {
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    };
    if distinct.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "logistic fit needs at least 3 distinct x values, got {}",
            distinct.len()
        )));
    }
    for &(x, p, w) in points {
        if x <= 0.0 || !x.is_finite() {
            return Err(Error::DegenerateFit(format!("non-positive x value {x}")));
        }
        if !(-1e-9..=1.0 + 1e-9).contains(&p) {
            return Err(Error::DegenerateFit(format!("success value {p} outside [0, 1]")));
        }
        if w <= 0.0 || !w.is_finite() {
            return Err(Error::DegenerateFit(format!("non-positive weight {w}")));
        }
    }
    let p_lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let p_hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if p_hi - p_lo < 1e-12 {
        return Ok(LogisticFit {
            alpha: f64::NAN,
            crossing: f64::NAN,
            crossing_stderr: None,
            residual_sum: f64::NAN,
            converged: false,
        });
    }

    let lpts: Vec<(f64, f64, f64)> = points.iter().map(|&(x, p, w)| (x.ln(), p, w)).collect();
    let (lx_lo, lx_hi) = (distinct[0].ln(), distinct[distinct.len() - 1].ln());

    let mut best: Option<(f64, f64, f64, bool)> = None; // (alpha, mu, ssr, converged)
    for start in 0..N_STARTS {
        let mu0 = lx_lo + (lx_hi - lx_lo) * (start as f64 + 0.5) / N_STARTS as f64;
        let (alpha, mu, ssr, converged) = gauss_newton(&lpts, 2.0, mu0, increasing);
        let better = match best {
            None => true,
            Some((_, _, best_ssr, best_conv)) => {
                (converged && !best_conv) || (converged == best_conv && ssr < best_ssr)
            }
        };
        if better {
            best = Some((alpha, mu, ssr, converged));
        }
    }
    let (alpha, mu, ssr, mut converged) = best.expect("at least one start");
    // a negative slope means the data runs against the requested
    // direction; the crossing is then meaningless
    if alpha <= 0.0 {
        converged = false;
    }

    let crossing = mu.exp();
    let crossing_stderr = if converged && points.len() > 2 {
        stderr_of_mu(&lpts, alpha, mu, increasing).map(|se| crossing * se)
    } else {
        None
    };
    Ok(LogisticFit { alpha, crossing, crossing_stderr, residual_sum: ssr, converged })
}

fn residual_stats(
    lpts: &[(f64, f64, f64)],
    alpha: f64,
    mu: f64,
    increasing: bool,
) -> (f64, [[f64; 2]; 2], [f64; 2]) {
    let sign = if increasing { -1.0 } else { 1.0 };
    let mut ssr = 0.0;
    let mut jtj = [[0.0f64; 2]; 2];
    let mut jtr = [0.0f64; 2];
    for &(lx, p, w) in lpts {
        let s = eval(lx, alpha, mu, increasing);
        let r = s - p;
        ssr += w * r * r;
        let core = -s * (1.0 - s) * sign;
        let d_alpha = core * (lx - mu);
        let d_mu = -core * alpha;
        jtj[0][0] += w * d_alpha * d_alpha;
        jtj[0][1] += w * d_alpha * d_mu;
        jtj[1][1] += w * d_mu * d_mu;
        jtr[0] += w * d_alpha * r;
        jtr[1] += w * d_mu * r;
    }
    jtj[1][0] = jtj[0][1];
    (ssr, jtj, jtr)
}

fn gauss_newton(
    lpts: &[(f64, f64, f64)],
    mut alpha: f64,
    mut mu: f64,
    increasing: bool,
) -> (f64, f64, f64, bool) {
    let mut lambda = 1e-3;
    let (mut ssr, mut jtj, mut jtr) = residual_stats(lpts, alpha, mu, increasing);
    let mut converged = false;
    for _ in 0..MAX_ITERS {
        // (JᵀWJ + λ diag) δ = −JᵀWr
        let a00 = jtj[0][0] * (1.0 + lambda);
        let a11 = jtj[1][1] * (1.0 + lambda);
        let a01 = jtj[0][1];
        let det = a00 * a11 - a01 * a01;
        if det.abs() < 1e-300 {
            break;
        }
        let d_alpha = (-jtr[0] * a11 + jtr[1] * a01) / det;
        let d_mu = (jtr[0] * a01 - jtr[1] * a00) / det;
        let (na, nm) = (alpha + d_alpha, mu + d_mu);
        let (nssr, njtj, njtr) = residual_stats(lpts, na, nm, increasing);
        if nssr.is_finite() && nssr <= ssr {
            alpha = na;
            mu = nm;
            ssr = nssr;
            jtj = njtj;
            jtr = njtr;
            lambda = (lambda * 0.1).max(1e-12);
            if (d_alpha * d_alpha + d_mu * d_mu).sqrt() < STEP_TOL {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                converged = true; // damped to a standstill at a minimum
                break;
            }
        }
    }
    (alpha, mu, ssr, converged)
}

/// Standard-error of μ from the damped-free normal matrix, scaled by
/// the residual variance.
fn stderr_of_mu(lpts: &[(f64, f64, f64)], alpha: f64, mu: f64, increasing: bool) -> Option<f64> {
    let (ssr, jtj, _) = residual_stats(lpts, alpha, mu, increasing);
    let dof = lpts.len().checked_sub(2)?;
    if dof == 0 {
        return None;
    }
    let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[0][1];
    if det.abs() < 1e-300 {
        return None;
    }
    let cov_mu = jtj[0][0] / det;
    let s2 = ssr / dof as f64;
    let var = s2 * cov_mu;
    if var.is_finite() && var >= 0.0 {
        Some(var.sqrt())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        (0..count)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (count - 1) as f64).exp())
            .collect()
    }

    #[test]
    fn recovers_noiseless_parameters() {
        let points: Vec<_> = log_spaced(1.0, 400.0, 12)
            .into_iter()
            .map(|t| (t, sigmoid_value(t, 3.0, 20.0), 1.0))
            .collect();
        let fit = fit_sigmoid(&points).unwrap();
        assert!(fit.converged);
        assert!((fit.alpha - 3.0).abs() < 1e-6, "alpha {}", fit.alpha);
        assert!((fit.t_max - 20.0).abs() < 1e-6 * 20.0, "t_max {}", fit.t_max);
    }

    #[test]
    fn crossing_is_exactly_half() {
        let points: Vec<_> = log_spaced(1.0, 400.0, 12)
            .into_iter()
            .map(|t| (t, sigmoid_value(t, 3.0, 20.0), 1.0))
            .collect();
        let fit = fit_sigmoid(&points).unwrap();
        assert_eq!(sigmoid_value(fit.t_max, fit.alpha, fit.t_max), 0.5);
    }

    #[test]
    fn flat_data_is_flagged_unconverged() {
        let points: Vec<_> = [1.0, 2.0, 4.0, 8.0].iter().map(|&t| (t, 0.5, 1.0)).collect();
        let fit = fit_sigmoid(&points).unwrap();
        assert!(!fit.converged);
        assert!(fit.t_max.is_nan());
    }

    #[test]
    fn too_few_distinct_points_is_an_error() {
        let points = [(2.0, 0.9, 1.0), (2.0, 0.8, 1.0), (4.0, 0.2, 1.0)];
        assert!(fit_sigmoid(&points).is_err());
    }

    #[test]
    fn rejects_out_of_range_success_values() {
        let points = [(1.0, 1.2, 1.0), (2.0, 0.5, 1.0), (4.0, 0.1, 1.0)];
        assert!(fit_sigmoid(&points).is_err());
    }

    #[test]
    fn amin_recovers_increasing_curve() {
        let points: Vec<_> = log_spaced(1.0, 100.0, 10)
            .into_iter()
            .map(|a| (a, 1.0 / (1.0 + (-2.5 * (a.ln() - 12.0f64.ln())).exp()), 1.0))
            .collect();
        let fit = fit_amin(&points).unwrap();
        assert!(fit.converged);
        assert!((fit.a_min - 12.0).abs() < 1e-6 * 12.0);
        assert!((fit.alpha - 2.5).abs() < 1e-6);
    }

    #[test]
    fn noisy_recovery_hits_the_monte_carlo_bound() {
        // σ = 0.02 noise, t_max within 5% in ≥95 of 100 seeded trials
        let ts = log_spaced(1.0, 400.0, 12);
        let mut hits = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let points: Vec<_> = ts
                .iter()
                .map(|&t| {
                    let noise = 0.02 * gauss(&mut rng);
                    (t, (sigmoid_value(t, 3.0, 20.0) + noise).clamp(0.0, 1.0), 1.0)
                })
                .collect();
            let fit = fit_sigmoid(&points).unwrap();
            if fit.converged && (fit.t_max - 20.0).abs() < 0.05 * 20.0 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 trials within 5%");
    }

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
