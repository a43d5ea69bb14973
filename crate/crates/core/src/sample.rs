//! Iterative refinement from Gaussian noise to a waveform.
//!
//! Each step removes the predicted noise component and, except on the last
//! step, injects fresh noise with standard deviation `σ_n`. The model sees
//! only `√ᾱ_n`, so any schedule can drive a continuously conditioned model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::optimal_gaussian_epsilon;
use crate::dsp::MelSpectrogram;
use crate::error::{check_len, Error, Result};
use crate::schedule::NoiseSchedule;

/// Choice of the injected noise scale `σ_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaRule {
    /// `σ²_n = β_n (1 - ᾱ_{n-1}) / (1 - ᾱ_n)`, the forward-posterior variance.
    #[default]
    Posterior,
    /// `σ²_n = β_n`.
    Beta,
}

impl SigmaRule {
    pub fn name(self) -> &'static str {
        match self {
            SigmaRule::Posterior => "posterior",
            SigmaRule::Beta => "beta",
        }
    }
}

impl std::str::FromStr for SigmaRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "posterior" => Ok(SigmaRule::Posterior),
            "beta" => Ok(SigmaRule::Beta),
            other => Err(format!(
                "unknown sigma rule `{other}` (expected posterior or beta)"
            )),
        }
    }
}

/// Posterior noise scale for step `n >= 2`.
pub fn sigma(schedule: &NoiseSchedule, n: usize) -> Result<f64> {
    sigma_with(schedule, n, SigmaRule::Posterior)
}

pub fn sigma_with(schedule: &NoiseSchedule, n: usize, rule: SigmaRule) -> Result<f64> {
    if n < 2 || n > schedule.len() {
        return Err(Error::invalid(format!(
            "sigma is defined for steps 2..={}, got {n}; the final step adds no noise",
            schedule.len()
        )));
    }
    let beta = schedule.beta(n);
    Ok(match rule {
        SigmaRule::Posterior => {
            let ratio = schedule.one_minus_alpha_bar(n - 1) / schedule.one_minus_alpha_bar(n);
            (ratio * beta).sqrt()
        }
        SigmaRule::Beta => beta.sqrt(),
    })
}

/// One reverse update with an explicit noise scale:
/// `y_{n-1} = (y_n - β_n / √(1-ᾱ_n) ε̂) / √α_n + σ z`; `z` is ignored at `n = 1`.
pub fn reverse_step_with_sigma(
    y_n: &[f64],
    eps_pred: &[f64],
    schedule: &NoiseSchedule,
    n: usize,
    z: &[f64],
    sigma_n: f64,
) -> Result<Vec<f64>> {
    check_len("reverse_step eps_pred", y_n.len(), eps_pred.len())?;
    if n == 0 || n > schedule.len() {
        return Err(Error::invalid(format!(
            "step {n} outside 1..={}",
            schedule.len()
        )));
    }
    let one_minus = schedule.one_minus_alpha_bar(n);
    if !(one_minus > 0.0) {
        return Err(Error::Numerical {
            context: format!("reverse step {n}"),
            message: "alpha_bar is 1, the noise coefficient is undefined".into(),
        });
    }
    let coef = schedule.beta(n) / one_minus.sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(n).sqrt();
    let mut out: Vec<f64> = y_n
        .iter()
        .zip(eps_pred)
        .map(|(y, e)| (y - coef * e) * inv_sqrt_alpha)
        .collect();
    if n > 1 && sigma_n != 0.0 {
        check_len("reverse_step z", y_n.len(), z.len())?;
        for (o, zi) in out.iter_mut().zip(z) {
            *o += sigma_n * zi;
        }
    }
    Ok(out)
}

/// [`reverse_step_with_sigma`] with the posterior `σ_n`.
pub fn reverse_step(
    y_n: &[f64],
    eps_pred: &[f64],
    schedule: &NoiseSchedule,
    n: usize,
    z: &[f64],
) -> Result<Vec<f64>> {
    let s = if n > 1 { sigma(schedule, n)? } else { 0.0 };
    reverse_step_with_sigma(y_n, eps_pred, schedule, n, z, s)
}

/// Anything that predicts the noise in `y_noisy` at level `√ᾱ`.
pub trait NoisePredictor {
    /// Waveform length produced for the given conditioning.
    fn output_len(&self, mel: &MelSpectrogram) -> Result<usize>;

    fn predict_noise(
        &self,
        y_noisy: &[f64],
        mel: &MelSpectrogram,
        sqrt_alpha_bar: f64,
    ) -> Result<Vec<f64>>;

    /// The only schedule this predictor may be sampled with, if it is bound to one.
    fn schedule_binding(&self) -> Option<&NoiseSchedule> {
        None
    }
}

/// Bayes-optimal predictor for data `y0 ~ N(mu, s2 I)`; ignores the mel
/// content and emits `samples_per_frame` samples per frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianOracle {
    pub mu: f64,
    pub s2: f64,
    pub samples_per_frame: usize,
}

impl NoisePredictor for GaussianOracle {
    fn output_len(&self, mel: &MelSpectrogram) -> Result<usize> {
        Ok(mel.frames() * self.samples_per_frame)
    }

    fn predict_noise(
        &self,
        y_noisy: &[f64],
        _mel: &MelSpectrogram,
        sqrt_alpha_bar: f64,
    ) -> Result<Vec<f64>> {
        optimal_gaussian_epsilon(y_noisy, sqrt_alpha_bar, self.mu, self.s2)
    }
}

/// Inputs to [`synthesize`].
#[derive(Debug, Clone)]
pub struct SynthRequest<'a> {
    pub mel: &'a MelSpectrogram,
    pub schedule: &'a NoiseSchedule,
    pub seed: u64,
    pub sigma_rule: SigmaRule,
    pub emit_intermediates: bool,
    /// Clamp every iterate to `[-c, c]`; `None` runs the chain unmodified.
    pub clamp: Option<f64>,
}

impl<'a> SynthRequest<'a> {
    pub fn new(mel: &'a MelSpectrogram, schedule: &'a NoiseSchedule, seed: u64) -> Self {
        Self {
            mel,
            schedule,
            seed,
            sigma_rule: SigmaRule::Posterior,
            emit_intermediates: false,
            clamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub waveform: Vec<f64>,
    /// `y_N, y_{N-1}, ..., y_0` when requested.
    pub intermediates: Vec<Vec<f64>>,
}

/// Runs the reverse chain from `y_N ~ N(0, I)` down to `y_0`.
pub fn synthesize<P: NoisePredictor + ?Sized>(
    model: &P,
    req: &SynthRequest<'_>,
) -> Result<SynthOutput> {
    let schedule = req.schedule;
    if let Some(bound) = model.schedule_binding() {
        if bound.betas() != schedule.betas() {
            return Err(Error::IncompatibleSchedule(format!(
                "model was trained with discrete steps of `{}` and can only sample with that schedule, not `{}`",
                bound.describe(),
                schedule.describe()
            )));
        }
    }
    let len = model.output_len(req.mel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut y: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut intermediates = Vec::new();
    if req.emit_intermediates {
        intermediates.push(y.clone());
    }
    for n in (1..=schedule.len()).rev() {
        let eps = model.predict_noise(&y, req.mel, schedule.sqrt_alpha_bar(n))?;
        let (z, s) = if n > 1 {
            let z: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
            (z, sigma_with(schedule, n, req.sigma_rule)?)
        } else {
            (Vec::new(), 0.0)
        };
        y = reverse_step_with_sigma(&y, &eps, schedule, n, &z, s)?;
        if let Some(c) = req.clamp {
            y.iter_mut().for_each(|v| *v = v.clamp(-c, c));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: format!("synthesis iteration {n}"),
                message: "non-finite sample".into(),
            });
        }
        if req.emit_intermediates {
            intermediates.push(y.clone());
        }
    }
    Ok(SynthOutput {
        waveform: y,
        intermediates,
    })
}
