//! Search for short inference schedules on a trained model.
//!
//! Candidates are β sequences over a mantissa × power-of-ten grid. The
//! default search draws random candidates and then refines the best one by
//! greedy coordinate descent. Scoring synthesizes a validation set with
//! each candidate and measures LS-MSE against the ground truth; the model is
//! never retrained.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dsp::{MelConfig, MelExtractor, MelSpectrogram, MetricConfig, Waveform};
use crate::error::{Error, Result};
use crate::sample::{synthesize, NoisePredictor, SynthRequest};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub iterations: usize,
    pub mantissas: Vec<u32>,
    pub exponents: Vec<i32>,
    /// Only admit `β_1 ≤ β_2 ≤ ... ≤ β_N`.
    pub non_decreasing: bool,
    /// Random candidates drawn before refinement.
    pub budget: usize,
    /// Maximum coordinate-descent passes over the best candidate.
    pub refine_rounds: usize,
    pub seed: u64,
    /// When non-empty, exactly these candidates are scored.
    pub fixed: Vec<Vec<f64>>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            iterations: 6,
            mantissas: (1..=9).collect(),
            exponents: (-6..=-1).collect(),
            non_decreasing: true,
            budget: 64,
            refine_rounds: 2,
            seed: 0,
            fixed: Vec::new(),
        }
    }
}

/// A candidate and its objective value (lower is better).
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub betas: Vec<f64>,
    pub score: f64,
}

fn key(betas: &[f64]) -> Vec<u64> {
    betas.iter().map(|b| b.to_bits()).collect()
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("sweep needs at least one iteration"));
        }
        if self.fixed.is_empty()
            && (self.mantissas.is_empty() || self.exponents.is_empty() || self.budget == 0)
        {
            return Err(Error::invalid(
                "sweep needs a non-empty grid and a positive budget",
            ));
        }
        Ok(())
    }

    /// Grid values `m · 10^e` in ascending order, parsed from decimal so they are exact literals.
    pub fn grid(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .exponents
            .iter()
            .flat_map(|e| {
                self.mantissas
                    .iter()
                    .map(move |m| format!("{m}e{e}").parse::<f64>().expect("grid literal"))
            })
            .filter(|b| *b > 0.0 && *b < 1.0)
            .collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn admits(&self, betas: &[f64]) -> bool {
        betas.len() == self.iterations
            && (!self.non_decreasing || betas.windows(2).all(|w| w[0] <= w[1]))
    }

    pub fn random_candidate<G: Rng + ?Sized>(&self, grid: &[f64], rng: &mut G) -> Vec<f64> {
        let mut c: Vec<f64> = (0..self.iterations)
            .map(|_| grid[rng.random_range(0..grid.len())])
            .collect();
        if self.non_decreasing {
            c.sort_by(f64::total_cmp);
        }
        c
    }
}

/// Scores every candidate in parallel; failures of the chain count as `+∞`.
fn score_all<F>(candidates: &[Vec<f64>], objective: &F) -> Result<Vec<Scored>>
where
    F: Fn(&NoiseSchedule) -> Result<f64> + Sync,
{
    candidates
        .par_iter()
        .map(|betas| {
            let schedule = NoiseSchedule::manual(betas)?;
            let score = match objective(&schedule) {
                Ok(s) if s.is_finite() => s,
                Ok(_) | Err(Error::Numerical { .. }) | Err(Error::NonFinite(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            Ok(Scored {
                betas: betas.clone(),
                score,
            })
        })
        .collect()
}

/// Ascending by score, ties broken by the β sequence.
pub fn rank(results: &mut [Scored]) {
    results.sort_by(|a, b| {
        a.score.total_cmp(&b.score).then_with(|| {
            a.betas
                .iter()
                .zip(&b.betas)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
}

/// Runs the search and returns every distinct scored candidate, best first.
pub fn run_sweep<F>(spec: &SweepSpec, objective: F) -> Result<Vec<Scored>>
where
    F: Fn(&NoiseSchedule) -> Result<f64> + Sync,
{
    spec.validate()?;
    let mut seen: HashMap<Vec<u64>, Scored> = HashMap::new();
    let mut order: Vec<Vec<u64>> = Vec::new();
    let mut record = |batch: Vec<Scored>, seen: &mut HashMap<Vec<u64>, Scored>| {
        for s in batch {
            let k = key(&s.betas);
            if let std::collections::hash_map::Entry::Vacant(slot) = seen.entry(k.clone()) {
                order.push(k);
                slot.insert(s);
            }
        }
    };

    if !spec.fixed.is_empty() {
        let admitted: Vec<Vec<f64>> = spec
            .fixed
            .iter()
            .filter(|c| spec.admits(c))
            .cloned()
            .collect();
        for c in spec.fixed.iter().filter(|c| !spec.admits(c)) {
            log::warn!("skipping fixed candidate {c:?}: violates the sweep constraints");
        }
        if admitted.is_empty() {
            return Err(Error::invalid(
                "no fixed candidate satisfies the sweep constraints",
            ));
        }
        record(score_all(&admitted, &objective)?, &mut seen);
    } else {
        let grid = spec.grid();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut fresh = Vec::new();
        let mut keys = std::collections::HashSet::new();
        // bounded retries so tiny grids cannot loop forever
        for _ in 0..spec.budget * 20 {
            if fresh.len() == spec.budget {
                break;
            }
            let c = spec.random_candidate(&grid, &mut rng);
            if keys.insert(key(&c)) {
                fresh.push(c);
            }
        }
        record(score_all(&fresh, &objective)?, &mut seen);

        for _ in 0..spec.refine_rounds {
            let mut improved = false;
            for i in 0..spec.iterations {
                let best = seen
                    .values()
                    .min_by(|a, b| a.score.total_cmp(&b.score))
                    .expect("scored candidates")
                    .clone();
                let moves: Vec<Vec<f64>> = grid
                    .iter()
                    .map(|&g| {
                        let mut c = best.betas.clone();
                        c[i] = g;
                        c
                    })
                    .filter(|c| spec.admits(c) && !seen.contains_key(&key(c)))
                    .collect();
                let scored = score_all(&moves, &objective)?;
                if scored.iter().any(|s| s.score < best.score) {
                    improved = true;
                }
                record(scored, &mut seen);
            }
            if !improved {
                break;
            }
        }
    }
    let mut out: Vec<Scored> = order
        .into_iter()
        .map(|k| seen.remove(&k).expect("recorded"))
        .collect();
    rank(&mut out);
    Ok(out)
}

/// Mean LS-MSE of synthesized audio against a validation set conditioned on its ground-truth mel.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    items: Vec<(Waveform, MelSpectrogram)>,
    metric: MetricConfig,
    pub seed: u64,
    pub clamp: Option<f64>,
}

impl ValidationSet {
    pub fn new(waves: Vec<Waveform>, mel: &MelConfig, seed: u64) -> Result<Self> {
        if waves.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let ex = MelExtractor::new(mel)?;
        let items = waves
            .into_iter()
            .map(|w| {
                let m = ex.compute(&w)?;
                Ok((w, m))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            items,
            metric: MetricConfig::for_conditioning(mel),
            seed,
            clamp: None,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Synthesizes item `i`, seeded by `seed + i`; the result is clipped to `[-1, 1]` like a WAV file.
    pub fn synthesize<P: NoisePredictor + ?Sized>(
        &self,
        model: &P,
        schedule: &NoiseSchedule,
        i: usize,
    ) -> Result<Waveform> {
        let (reference, mel) = &self.items[i];
        let mut req = SynthRequest::new(mel, schedule, self.seed.wrapping_add(i as u64));
        req.clamp = self.clamp;
        let out = synthesize(model, &req)?;
        Waveform::new(
            out.waveform
                .into_iter()
                .map(|v| v.clamp(-1.0, 1.0))
                .collect(),
            reference.sample_rate(),
        )
    }

    /// LS-MSE per item.
    pub fn scores<P: NoisePredictor + ?Sized>(
        &self,
        model: &P,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        (0..self.items.len())
            .map(|i| {
                self.metric
                    .ls_mse(&self.items[i].0, &self.synthesize(model, schedule, i)?)
            })
            .collect()
    }

    pub fn ls_mse<P: NoisePredictor + ?Sized>(
        &self,
        model: &P,
        schedule: &NoiseSchedule,
    ) -> Result<f64> {
        let s = self.scores(model, schedule)?;
        Ok(s.iter().sum::<f64>() / s.len() as f64)
    }
}
