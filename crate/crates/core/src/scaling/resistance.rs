//! Bit-accounting arithmetic: attack resistance χ (input bits needed
//! per controlled output bit) and the predicted token-attack
//! multiplier.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Resistance {
    pub chi: f64,
    pub chi_stderr: Option<f64>,
}

/// χ = d·p / (κ·log₂ V), first-order error propagation from κ.
pub fn attack_resistance(
    dim: usize,
    p_bits: u32,
    vocab: usize,
    kappa: f64,
    kappa_stderr: Option<f64>,
) -> Resistance {
    assert!(dim > 0 && p_bits > 0 && vocab > 1 && kappa > 0.0, "positive arguments required");
    let bits_per_token = (vocab as f64).log2();
    let chi = (dim as f64 * p_bits as f64) / (kappa * bits_per_token);
    let chi_stderr = kappa_stderr.map(|se| chi * se / kappa);
    Resistance { chi, chi_stderr }
}

/// κ = d·p / (χ·log₂ V), the inverse of [`attack_resistance`].
pub fn kappa_for_resistance(dim: usize, p_bits: u32, vocab: usize, chi: f64) -> f64 {
    assert!(dim > 0 && p_bits > 0 && vocab > 1 && chi > 0.0, "positive arguments required");
    (dim as f64 * p_bits as f64) / (chi * (vocab as f64).log2())
}

/// κ_token = κ·log₂V / (d·p): the token-substitution multiplier
/// implied by an activation multiplier under pure bit accounting.
pub fn predicted_token_kappa(kappa: f64, dim: usize, p_bits: u32, vocab: usize) -> f64 {
    assert!(dim > 0 && p_bits > 0 && vocab > 1 && kappa >= 0.0, "positive arguments required");
    kappa * (vocab as f64).log2() / (dim as f64 * p_bits as f64)
}

/// Two pooled estimates from (value, stderr) pairs. `inverse_variance`
/// is the standard 1/σ² weighting; `error_squared` weights by σ²
/// directly, the literal reading of "weighting them using the squares
/// of their errors". They differ materially, so both are reported.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenKappaCombined {
    pub inverse_variance: f64,
    pub error_squared: f64,
}

pub fn combine_kappa_estimates(estimates: &[(f64, f64)]) -> Result<TokenKappaCombined> {
    if estimates.is_empty() {
        return Err(Error::DegenerateFit("no estimates to combine".into()));
    }
    for &(v, se) in estimates {
        if !v.is_finite() || !se.is_finite() || se <= 0.0 {
            return Err(Error::DegenerateFit(format!("bad estimate ({v}, {se})")));
        }
    }
    let mut inv_num = 0.0;
    let mut inv_den = 0.0;
    let mut sq_num = 0.0;
    let mut sq_den = 0.0;
    for &(v, se) in estimates {
        let var = se * se;
        inv_num += v / var;
        inv_den += 1.0 / var;
        sq_num += v * var;
        sq_den += var;
    }
    Ok(TokenKappaCombined { inverse_variance: inv_num / inv_den, error_squared: sq_num / sq_den })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_resistance_values() {
        // published per-model arithmetic, ±0.05 after rounding
        let rows = [
            (512usize, 16u32, 50304usize, 24.2, 21.7),
            (2048, 16, 50304, 128.4, 16.3),
            (2560, 16, 50304, 104.9, 25.0),
        ];
        for (d, p, v, kappa, want) in rows {
            let got = attack_resistance(d, p, v, kappa, None).chi;
            assert!((got - want).abs() <= 0.05, "χ({d},{p},{v},{kappa}) = {got}, want {want}");
        }
    }

    #[test]
    fn resistance_error_propagates_from_kappa() {
        let r = attack_resistance(512, 16, 50304, 24.2, Some(0.8));
        let rel = r.chi_stderr.unwrap() / r.chi;
        assert!((rel - 0.8 / 24.2).abs() < 1e-12);
    }

    #[test]
    fn resistance_round_trip_is_identity() {
        for chi in [1.0, 16.3, 21.7, 49.0] {
            let kappa = kappa_for_resistance(2048, 16, 50304, chi);
            let back = attack_resistance(2048, 16, 50304, kappa, None).chi;
            assert!((back - chi).abs() < 1e-12 * chi);
        }
    }

    #[test]
    fn definitional_fixed_point_is_one() {
        let dim = 512;
        let kappa = (dim as f64) * 16.0 / (50304f64).log2();
        let r = attack_resistance(dim, 16, 50304, kappa, None);
        assert!((r.chi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predicted_token_ratio_matches_bit_accounting() {
        // log₂(50000) / (512·16) ≈ 1.9e-3
        let ratio = predicted_token_kappa(1.0, 512, 16, 50000);
        assert!(ratio > 1.8e-3 && ratio < 2.0e-3, "ratio {ratio}");
        assert_eq!(predicted_token_kappa(0.0, 512, 16, 50000), 0.0);
    }

    #[test]
    fn combined_estimates_freeze_both_weightings() {
        let estimates = [(0.085, 0.001), (0.120, 0.002), (0.120, 0.004)];
        let combined = combine_kappa_estimates(&estimates).unwrap();
        // inverse variance: (0.085/1e-6 + 0.120/4e-6 + 0.120/1.6e-5)
        //                 / (1/1e-6 + 1/4e-6 + 1/1.6e-5) = 0.0933…
        assert!((combined.inverse_variance - 0.09333333333333334).abs() < 1e-12);
        // σ²-weighted pool lands near 0.12
        assert!((combined.error_squared - 0.11833333333333333).abs() < 1e-12);
    }
}
