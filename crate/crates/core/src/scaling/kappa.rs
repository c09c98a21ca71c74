//! The attack multiplier: weighted least squares of t_max against the
//! effective attack strength x = f·a/n, through the origin.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalingFit {
    pub kappa: f64,
    pub kappa_stderr: Option<f64>,
    pub points_used: usize,
}

/// Points are (x, t_max, t_max stderr). Inverse-variance weighting when
/// every stderr is present and positive, unweighted otherwise. A single
/// point degenerates to κ = y/x with no error estimate.
pub fn fit_kappa(points: &[(f64, f64, Option<f64>)]) -> Result<ScalingFit> {
    if points.is_empty() {
        return Err(Error::DegenerateFit("kappa fit needs at least one point".into()));
    }
    for &(x, y, _) in points {
        if x <= 0.0 || !x.is_finite() || !y.is_finite() {
            return Err(Error::DegenerateFit(format!("bad scaling point ({x}, {y})")));
        }
    }
    if points.len() == 1 {
        return Ok(ScalingFit { kappa: points[0].1 / points[0].0, kappa_stderr: None, points_used: 1 });
    }

    let weighted = points
        .iter()
        .all(|&(_, _, se)| matches!(se, Some(se) if se.is_finite() && se > 0.0));
    let weights: Vec<f64> = points
        .iter()
        .map(|&(_, _, se)| if weighted { 1.0 / se.unwrap().powi(2).max(1e-12) } else { 1.0 })
        .collect();

    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (&(x, y, _), &w) in points.iter().zip(&weights) {
        sxy += w * x * y;
        sxx += w * x * x;
    }
    let kappa = sxy / sxx;

    let stderr = if weighted {
        // known variances: Var(κ) = 1 / Σ w x²
        Some((1.0 / sxx).sqrt())
    } else {
        // residual-based estimate
        let dof = points.len() - 1;
        let ssr: f64 = points.iter().map(|&(x, y, _)| (y - kappa * x).powi(2)).sum();
        Some((ssr / dof as f64 / sxx).sqrt())
    };
    Ok(ScalingFit { kappa, kappa_stderr: stderr, points_used: points.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_line_is_recovered_to_machine_precision() {
        let points: Vec<_> = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&x| (x, 7.5 * x, None))
            .collect();
        let fit = fit_kappa(&points).unwrap();
        assert!((fit.kappa - 7.5).abs() < 1e-12);
    }

    #[test]
    fn collapse_of_mixed_cells_on_one_line() {
        // any (f, a, n) combinations on t_max = κ·fa/n give back κ exactly
        let kappa = 23.0;
        let cells = [
            (1.0, 1.0, 1.0),
            (1.0, 2.0, 1.0),
            (1.0, 8.0, 1.0),
            (1.0, 1.0, 4.0),
            (0.5, 8.0, 8.0),
            (0.125, 1.0, 1.0),
        ];
        let points: Vec<_> = cells
            .iter()
            .map(|&(f, a, n)| {
                let x = f * a / n;
                (x, kappa * x, None)
            })
            .collect();
        let fit = fit_kappa(&points).unwrap();
        assert!((fit.kappa - kappa).abs() < 1e-12);
    }

    #[test]
    fn single_point_has_no_stderr() {
        let fit = fit_kappa(&[(2.0, 9.0, None)]).unwrap();
        assert_eq!(fit.kappa, 4.5);
        assert!(fit.kappa_stderr.is_none());
    }

    #[test]
    fn noisy_fit_covers_truth_within_three_stderr() {
        let xs = [0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 8.0];
        let mut hits = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
            let points: Vec<_> = xs
                .iter()
                .map(|&x| {
                    let y = 7.5 * x * (1.0 + 0.05 * gauss(&mut rng));
                    (x, y, Some(0.05 * 7.5 * x))
                })
                .collect();
            let fit = fit_kappa(&points).unwrap();
            let se = fit.kappa_stderr.unwrap();
            if (fit.kappa - 7.5).abs() <= 3.0 * se {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 within 3 stderr");
    }

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
