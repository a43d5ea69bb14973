//! Closed-form forward diffusion and the quantities training is built on.
//!
//! The forward chain `q(y_n | y_{n-1}) = N(√(1-β_n) y_{n-1}, β_n I)` has the
//! marginal `y_n = √ᾱ_n y0 + √(1-ᾱ_n) ε`. Its log-density gradient in `y_n`
//! is `-ε / √(1-ᾱ_n)`, so a network that predicts `ε` is a rescaled score
//! model: denoising score matching with one noise scale per level, which is
//! why no separate score-matching objective lives here. The per-level
//! weighting constant of the variational bound is dropped and the squared
//! error is replaced by a mean absolute error.
//!
//! All functions take the continuous level `√ᾱ` directly; discrete step
//! indices go through [`crate::schedule::NoiseSchedule::sqrt_alpha_bar`].

use crate::error::{check_finite, check_len, Error, Result};

/// A noisy sample together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPoint {
    pub y_noisy: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub sqrt_alpha_bar: f64,
}

impl DiffusionPoint {
    /// Inverts the marginal: `y0 = (y_n - √(1-ᾱ) ε) / √ᾱ`.
    pub fn reconstruct_clean(&self) -> Vec<f64> {
        let sab = self.sqrt_alpha_bar;
        let noise_scale = noise_scale(sab);
        self.y_noisy
            .iter()
            .zip(&self.epsilon)
            .map(|(y, e)| (y - noise_scale * e) / sab)
            .collect()
    }
}

/// `√(1 - ᾱ)` from `√ᾱ`, accurate near `√ᾱ = 1`.
pub fn noise_scale(sqrt_alpha_bar: f64) -> f64 {
    // 1 - s² = (1 - s)(1 + s) keeps precision when s → 1
    ((1.0 - sqrt_alpha_bar) * (1.0 + sqrt_alpha_bar))
        .max(0.0)
        .sqrt()
}

/// `y_n = √ᾱ y0 + √(1-ᾱ) ε`.
pub fn forward_diffuse(y0: &[f64], sqrt_alpha_bar: f64, epsilon: &[f64]) -> Result<DiffusionPoint> {
    check_len("forward_diffuse epsilon", y0.len(), epsilon.len())?;
    if !(sqrt_alpha_bar > 0.0 && sqrt_alpha_bar <= 1.0) {
        return Err(Error::invalid(format!(
            "sqrt_alpha_bar must lie in (0, 1], got {sqrt_alpha_bar}"
        )));
    }
    check_finite(y0, "forward_diffuse y0")?;
    check_finite(epsilon, "forward_diffuse epsilon")?;
    let ns = noise_scale(sqrt_alpha_bar);
    let y_noisy = y0
        .iter()
        .zip(epsilon)
        .map(|(y, e)| sqrt_alpha_bar * y + ns * e)
        .collect();
    Ok(DiffusionPoint {
        y_noisy,
        epsilon: epsilon.to_vec(),
        sqrt_alpha_bar,
    })
}

/// `∇_{y_n} log q(y_n | y0) = -ε / √(1-ᾱ)`.
pub fn noise_log_density_gradient(epsilon: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha_bar) {
        return Err(Error::invalid(format!(
            "alpha_bar must lie in [0, 1), got {alpha_bar}"
        )));
    }
    let inv = 1.0 / (1.0 - alpha_bar).sqrt();
    Ok(epsilon.iter().map(|e| -e * inv).collect())
}

/// Mean absolute difference.
pub fn loss_l1(epsilon_pred: &[f64], epsilon_true: &[f64]) -> Result<f64> {
    check_len("loss_l1", epsilon_true.len(), epsilon_pred.len())?;
    if epsilon_true.is_empty() {
        return Err(Error::invalid("loss_l1 on empty input"));
    }
    let total: f64 = epsilon_pred
        .iter()
        .zip(epsilon_true)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / epsilon_true.len() as f64)
}

/// Bayes-optimal noise prediction `E[ε | y_n]` when `y0 ~ N(mu 1, s2 I)`.
///
/// Used as a perfectly trained model in tests of training and sampling.
pub fn optimal_gaussian_epsilon(
    y_noisy: &[f64],
    sqrt_alpha_bar: f64,
    mu: f64,
    s2: f64,
) -> Result<Vec<f64>> {
    if !(s2 > 0.0) {
        return Err(Error::invalid(format!("s2 must be positive, got {s2}")));
    }
    if !(sqrt_alpha_bar > 0.0 && sqrt_alpha_bar < 1.0) {
        return Err(Error::invalid(format!(
            "sqrt_alpha_bar must lie in (0, 1), got {sqrt_alpha_bar}"
        )));
    }
    let ab = sqrt_alpha_bar * sqrt_alpha_bar;
    let one_minus = (1.0 - sqrt_alpha_bar) * (1.0 + sqrt_alpha_bar);
    let gain = one_minus.sqrt() / (ab * s2 + one_minus);
    Ok(y_noisy
        .iter()
        .map(|y| gain * (y - sqrt_alpha_bar * mu))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn forward_examples() {
        let p = forward_diffuse(&[0.25, -1.0], 1.0, &[3.0, 4.0]).unwrap();
        assert_eq!(p.y_noisy, vec![0.25, -1.0]);
        let p = forward_diffuse(&[1.0, 0.0], 0.6, &[0.0, 1.0]).unwrap();
        assert_relative_eq!(p.y_noisy[0], 0.6, max_relative = 1e-15);
        assert_relative_eq!(p.y_noisy[1], 0.8, max_relative = 1e-15);
        let p = forward_diffuse(&[5.0], 1e-12, &[0.7]).unwrap();
        assert_relative_eq!(p.y_noisy[0], 0.7, max_relative = 1e-10);
    }

    #[test]
    fn forward_errors() {
        assert!(matches!(
            forward_diffuse(&[1.0], 0.5, &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(forward_diffuse(&[f64::NAN], 0.5, &[1.0]).is_err());
        assert!(forward_diffuse(&[1.0], 0.0, &[1.0]).is_err());
        assert!(forward_diffuse(&[1.0], 1.5, &[1.0]).is_err());
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(
            noise_log_density_gradient(&[0.0, 0.0], 0.3).unwrap(),
            vec![-0.0, -0.0]
        );
        assert_relative_eq!(noise_log_density_gradient(&[1.0], 0.75).unwrap()[0], -2.0);
        assert_eq!(
            noise_log_density_gradient(&[0.5, -2.0], 0.0).unwrap(),
            vec![-0.5, 2.0]
        );
        assert!(noise_log_density_gradient(&[1.0], 1.0).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(loss_l1(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(loss_l1(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        let t = [0.1, -0.7, 2.0];
        let p: Vec<f64> = t.iter().map(|v| v - 0.25).collect();
        assert_relative_eq!(loss_l1(&p, &t).unwrap(), 0.25, max_relative = 1e-12);
        assert!(loss_l1(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn optimal_epsilon_examples() {
        let sab: f64 = 0.8;
        let y = vec![sab * 0.4; 3];
        for v in optimal_gaussian_epsilon(&y, sab, 0.4, 0.3).unwrap() {
            assert!(v.abs() < 1e-15);
        }
        // s2 -> 0: deterministic y0 = mu, ε recovered exactly
        let eps = 0.37;
        let yn = sab * 0.4 + noise_scale(sab) * eps;
        let got = optimal_gaussian_epsilon(&[yn], sab, 0.4, 1e-14).unwrap()[0];
        assert_relative_eq!(got, eps, max_relative = 1e-9);
        // standard normal data: the denominator collapses to 1
        let got = optimal_gaussian_epsilon(&[1.5], sab, 0.0, 1.0).unwrap()[0];
        assert_relative_eq!(got, 1.5 * noise_scale(sab), max_relative = 1e-14);
    }

    #[test]
    fn optimal_epsilon_matches_regression() {
        // Monte Carlo least-squares slope of ε on y_n for y0 ~ N(0, 1).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sab: f64 = 0.7;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for _ in 0..200_000 {
            let y0: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let yn = sab * y0 + noise_scale(sab) * e;
            sxy += yn * e;
            sxx += yn * yn;
        }
        let slope = sxy / sxx;
        let analytic = optimal_gaussian_epsilon(&[1.0], sab, 0.0, 1.0).unwrap()[0];
        assert!((slope - analytic).abs() < 0.01, "{slope} vs {analytic}");
    }

    proptest! {
        #[test]
        fn l1_symmetric_nonnegative(a in prop::collection::vec(-5.0f64..5.0, 1..20), shift in -2.0f64..2.0) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + shift * (i as f64).sin()).collect();
            let ab = loss_l1(&a, &b).unwrap();
            prop_assert_eq!(ab, loss_l1(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(loss_l1(&a, &a).unwrap(), 0.0);
            if a != b {
                prop_assert!(ab > 0.0);
            }
        }

        #[test]
        fn reconstruct_round_trip(y0 in prop::collection::vec(-1.0f64..1.0, 1..32), sab in 0.05f64..1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps: Vec<f64> = (0..y0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let p = forward_diffuse(&y0, sab, &eps).unwrap();
            for (a, b) in p.reconstruct_clean().iter().zip(&y0) {
                prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
            }
        }
    }
}
