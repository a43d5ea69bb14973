//! Training: segment batches, noise-level draws, the L1 noise loss and Adam.
//!
//! Each step draws one noise level per batch entry, diffuses the clean
//! segment with fresh Gaussian noise and regresses the network output onto
//! that noise. Randomness is split into per-step streams derived from the
//! run seed, so a run resumed from step `k` replays exactly what an
//! uninterrupted run would have done.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::forward_diffuse;
use crate::dsp::{MelConfig, MelExtractor, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::net::{DenoiserModel, ModelConfig};
use crate::sample::NoisePredictor;
use crate::schedule::{parse_schedule_spec, NoiseSchedule};
use crate::tensor::{Bound, DType, Graph, ParamStore, Real, Tensor, TensorArchive, Var};

/// How the network is told the noise level during training.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditioningMode {
    /// Levels drawn from the continuous piecewise-uniform prior.
    Continuous,
    /// Levels restricted to `√ᾱ_n` of a fixed schedule, `n` uniform.
    Discrete(NoiseSchedule),
}

impl ConditioningMode {
    pub fn draw_level<G: Rng + ?Sized>(&self, prior: &NoiseSchedule, rng: &mut G) -> f64 {
        match self {
            ConditioningMode::Continuous => prior.sample_noise_level(rng).sqrt_alpha_bar,
            ConditioningMode::Discrete(s) => s.sqrt_alpha_bar(rng.random_range(1..=s.len())),
        }
    }

    /// The schedule a model trained this way must be sampled with.
    pub fn binding(&self) -> Option<&NoiseSchedule> {
        match self {
            ConditioningMode::Continuous => None,
            ConditioningMode::Discrete(s) => Some(s),
        }
    }

    pub fn to_spec(&self) -> String {
        match self {
            ConditioningMode::Continuous => "continuous".into(),
            ConditioningMode::Discrete(s) => format!("discrete:{}", s.describe()),
        }
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec == "continuous" {
            return Ok(ConditioningMode::Continuous);
        }
        match spec.strip_prefix("discrete:") {
            Some(rest) => Ok(ConditioningMode::Discrete(parse_schedule_spec(rest)?)),
            None => Err(Error::invalid(format!(
                "conditioning must be `continuous` or `discrete:<schedule>`, got `{spec}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<R: Real> {
    config: AdamConfig,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
    t: u64,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig, params: &ParamStore<R>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| vec![R::zero(); t.len()])
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the gradients stored on `params`; returns their global norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<R>) -> Result<f64> {
        let sq: f64 = params
            .iter()
            .map(|(_, _, t)| {
                t.grad()
                    .map_or(0.0, |g| g.iter().map(|v| v.f64() * v.f64()).sum())
            })
            .sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical {
                context: format!("optimizer step {}", self.t + 1),
                message: "non-finite gradient norm".into(),
            });
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let Some(g) = t.grad().map(<[R]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j].f64() * scale;
                let mj = c.beta1 * m[j].f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].f64() + (1.0 - c.beta2) * gj * gj;
                m[j] = R::of(mj);
                v[j] = R::of(vj);
                let update = c.learning_rate * (mj / bc1) / ((vj / bc2).sqrt() + c.epsilon);
                *w = R::of(w.f64() - update);
            }
        }
        Ok(norm)
    }

    /// Moments as `m/<param>` and `v/<param>` entries.
    pub fn to_archive(&self, params: &ParamStore<R>) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for (i, (_, name, t)) in params.iter().enumerate() {
            a.push(
                &format!("m/{name}"),
                &Tensor::new(t.shape(), self.m[i].clone())?,
            );
            a.push(
                &format!("v/{name}"),
                &Tensor::new(t.shape(), self.v[i].clone())?,
            );
        }
        Ok(a)
    }

    pub fn load_archive(
        &mut self,
        params: &ParamStore<R>,
        archive: &TensorArchive,
        steps: u64,
    ) -> Result<()> {
        for (i, (_, name, t)) in params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let loaded: Tensor<R> = archive.get(&format!("{prefix}/{name}"))?;
                if loaded.shape() != t.shape() {
                    return Err(Error::Archive(format!(
                        "optimizer moment {prefix}/{name} has shape {:?}, parameter has {:?}",
                        loaded.shape(),
                        t.shape()
                    )));
                }
                *slot = loaded.into_data();
            }
        }
        self.t = steps;
        Ok(())
    }
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub training_prior: NoiseSchedule,
    pub batch_size: usize,
    pub segment_samples: usize,
    pub adam: AdamConfig,
    pub max_steps: u64,
    pub precision: DType,
    pub seed: u64,
    pub conditioning: ConditioningMode,
    /// Write a checkpoint every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            training_prior: NoiseSchedule::default_training_prior(),
            batch_size: 256,
            segment_samples: 7200,
            adam: AdamConfig::default(),
            max_steps: 1_000_000,
            precision: DType::F32,
            seed: 0,
            conditioning: ConditioningMode::Continuous,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the toy model and corpus.
    pub fn toy() -> Self {
        Self {
            batch_size: 8,
            segment_samples: 256,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
            max_steps: 400,
            checkpoint_every: 100,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::invalid(format!(
                "unknown training preset `{other}` (expected full or toy)"
            ))),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.segment_samples == 0 {
            return Err(Error::invalid(
                "batch_size and segment_samples must be positive",
            ));
        }
        let hop = model.hop();
        if !self.segment_samples.is_multiple_of(hop) {
            return Err(Error::invalid(format!(
                "segment_samples {} is not a multiple of the model's upsampling factor {hop}",
                self.segment_samples
            )));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0)
        {
            return Err(Error::invalid(
                "Adam needs lr > 0, betas in [0, 1) and epsilon > 0",
            ));
        }
        if a.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut d = KvDoc::new();
        d.set("training_prior", self.training_prior.describe());
        d.set("batch_size", self.batch_size);
        d.set("segment_samples", self.segment_samples);
        d.set("learning_rate", self.adam.learning_rate);
        d.set("beta1", self.adam.beta1);
        d.set("beta2", self.adam.beta2);
        d.set("epsilon", self.adam.epsilon);
        d.set(
            "clip_norm",
            self.adam
                .clip_norm
                .map_or("none".to_string(), |c| c.to_string()),
        );
        d.set("max_steps", self.max_steps);
        d.set("precision", self.precision.name());
        d.set("seed", self.seed);
        d.set("conditioning", self.conditioning.to_spec());
        d.set("checkpoint_every", self.checkpoint_every);
        d
    }

    /// Reads keys over `base`; unknown keys are left to the caller.
    pub fn from_doc(doc: &KvDoc, base: &TrainConfig) -> Result<Self> {
        let at = |key: &str, e: Error| doc.error_at(doc.line_of(key), e.to_string());
        let training_prior = match doc.get("training_prior") {
            Some(s) => parse_schedule_spec(s).map_err(|e| at("training_prior", e))?,
            None => base.training_prior.clone(),
        };
        let conditioning = match doc.get("conditioning") {
            Some(s) => ConditioningMode::parse(s).map_err(|e| at("conditioning", e))?,
            None => base.conditioning.clone(),
        };
        let clip_norm = match doc.get("clip_norm") {
            None => base.adam.clip_norm,
            Some("none") => None,
            Some(_) => Some(doc.parse_value("clip_norm")?),
        };
        Ok(Self {
            training_prior,
            batch_size: doc.parse_or("batch_size", base.batch_size)?,
            segment_samples: doc.parse_or("segment_samples", base.segment_samples)?,
            adam: AdamConfig {
                learning_rate: doc.parse_or("learning_rate", base.adam.learning_rate)?,
                beta1: doc.parse_or("beta1", base.adam.beta1)?,
                beta2: doc.parse_or("beta2", base.adam.beta2)?,
                epsilon: doc.parse_or("epsilon", base.adam.epsilon)?,
                clip_norm,
            },
            max_steps: doc.parse_or("max_steps", base.max_steps)?,
            precision: doc.parse_or("precision", base.precision)?,
            seed: doc.parse_or("seed", base.seed)?,
            conditioning,
            checkpoint_every: doc.parse_or("checkpoint_every", base.checkpoint_every)?,
        })
    }
}

/// An utterance with its full-length conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub samples: Vec<f64>,
    pub mel: MelSpectrogram,
}

/// Utterances long enough to supply training segments.
#[derive(Debug, Clone)]
pub struct SegmentStore {
    utterances: Vec<Utterance>,
    segment_samples: usize,
    hop: usize,
}

impl SegmentStore {
    /// Computes mel over each whole utterance. Utterances shorter than one
    /// segment are skipped with a warning.
    pub fn new(
        items: Vec<(String, Waveform)>,
        mel: &MelConfig,
        segment_samples: usize,
    ) -> Result<Self> {
        let hop = mel.hop_length;
        if segment_samples == 0 || !segment_samples.is_multiple_of(hop) {
            return Err(Error::invalid(format!(
                "segment of {segment_samples} samples is not a positive multiple of the mel hop {hop}"
            )));
        }
        let extractor = MelExtractor::new(mel)?;
        let mut utterances = Vec::new();
        for (name, y) in items {
            if y.len() < segment_samples.max(mel.win_length) {
                log::warn!(
                    "skipping {name}: {} samples is shorter than one {segment_samples}-sample segment",
                    y.len()
                );
                continue;
            }
            let m = extractor.compute(&y)?;
            utterances.push(Utterance {
                name,
                samples: y.into_samples(),
                mel: m,
            });
        }
        if utterances.is_empty() {
            return Err(Error::Data(
                "no utterance is long enough for one training segment".into(),
            ));
        }
        Ok(Self {
            utterances,
            segment_samples,
            hop,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn segment_samples(&self) -> usize {
        self.segment_samples
    }

    pub fn segment_frames(&self) -> usize {
        self.segment_samples / self.hop
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn mel_bins(&self) -> usize {
        self.utterances[0].mel.n_mels()
    }
}

/// Clean segments and their mel crops, batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub samples: usize,
    pub mel_bins: usize,
    pub frames: usize,
    /// `[size, samples]`.
    pub y0: Vec<f64>,
    /// `[size, mel_bins, frames]`.
    pub mel: Vec<f64>,
    /// `(utterance index, first mel frame)` per entry; the waveform starts at `frame · hop`.
    pub origins: Vec<(usize, usize)>,
}

impl Batch {
    pub fn entry_mel(&self, b: usize) -> Result<MelSpectrogram> {
        let n = self.mel_bins * self.frames;
        MelSpectrogram::new(
            self.mel_bins,
            self.frames,
            self.mel[b * n..(b + 1) * n].to_vec(),
        )
    }

    pub fn entry_y0(&self, b: usize) -> &[f64] {
        &self.y0[b * self.samples..(b + 1) * self.samples]
    }
}

/// Uniform utterances and frame-aligned crop offsets.
pub fn make_batch<G: Rng + ?Sized>(
    store: &SegmentStore,
    batch_size: usize,
    rng: &mut G,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let frames = store.segment_frames();
    let samples = store.segment_samples;
    let mel_bins = store.mel_bins();
    let mut batch = Batch {
        size: batch_size,
        samples,
        mel_bins,
        frames,
        y0: Vec::with_capacity(batch_size * samples),
        mel: Vec::with_capacity(batch_size * mel_bins * frames),
        origins: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let u = rng.random_range(0..store.len());
        let utt = &store.utterances[u];
        let max_start = (utt.mel.frames() - frames).min((utt.samples.len() - samples) / store.hop);
        let f = rng.random_range(0..=max_start);
        let start = f * store.hop;
        batch
            .y0
            .extend_from_slice(&utt.samples[start..start + samples]);
        batch
            .mel
            .extend_from_slice(utt.mel.crop(f, frames)?.values());
        batch.origins.push((u, f));
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    /// Seconds since the run (or its resumption) started.
    pub wall_seconds: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<R: Real> {
    pub step: u64,
    pub model: DenoiserModel<R>,
    pub optimizer: Adam<R>,
    pub history: Vec<LossRecord>,
}

impl<R: Real> TrainState<R> {
    /// Fresh model initialised from the run seed.
    pub fn new(model: ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate(&model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = DenoiserModel::new(model, &mut rng)?;
        let optimizer = Adam::new(config.adam, model.params());
        Ok(Self {
            step: 0,
            model,
            optimizer,
            history: Vec::new(),
        })
    }
}

/// Batch and noise generators for `step`, independent of earlier steps.
pub fn step_rngs(seed: u64, step: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut batch = ChaCha8Rng::seed_from_u64(seed);
    batch.set_stream(2 * step + 1);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2 * step + 2);
    (batch, noise)
}

/// Noisy inputs for a batch: one level per entry and the noise that was added.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyBatch {
    pub levels: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub y_noisy: Vec<f64>,
}

impl NoisyBatch {
    pub fn draw<G: Rng + ?Sized>(
        batch: &Batch,
        mode: &ConditioningMode,
        prior: &NoiseSchedule,
        rng: &mut G,
    ) -> Result<Self> {
        let levels: Vec<f64> = (0..batch.size)
            .map(|_| mode.draw_level(prior, rng))
            .collect();
        let epsilon: Vec<f64> = (0..batch.size * batch.samples)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut y_noisy = Vec::with_capacity(epsilon.len());
        for (b, &l) in levels.iter().enumerate() {
            let e = &epsilon[b * batch.samples..(b + 1) * batch.samples];
            y_noisy.extend(forward_diffuse(batch.entry_y0(b), l, e)?.y_noisy);
        }
        Ok(Self {
            levels,
            epsilon,
            y_noisy,
        })
    }
}

/// Builds the loss graph for a noisy batch; returns it with the loss value.
fn loss_graph<R: Real>(
    model: &DenoiserModel<R>,
    batch: &Batch,
    noisy: &NoisyBatch,
) -> Result<(Graph<R>, Bound, Var, f64)> {
    let mut g = Graph::new();
    let p = g.bind(model.params());
    let conv = |v: &[f64]| v.iter().map(|&x| R::of(x)).collect::<Vec<R>>();
    let y = g.constant_from(&[batch.size, 1, batch.samples], conv(&noisy.y_noisy))?;
    let m = g.constant_from(
        &[batch.size, batch.mel_bins, batch.frames],
        conv(&batch.mel),
    )?;
    let out = model.forward(&mut g, &p, y, m, &noisy.levels)?;
    let loss = g.mean_abs_diff(out, &conv(&noisy.epsilon))?;
    let value = g.value(loss)[0].f64();
    if !value.is_finite() {
        let bad: Vec<usize> = (0..batch.size)
            .filter(|&b| {
                g.value(out)[b * batch.samples..(b + 1) * batch.samples]
                    .iter()
                    .any(|v| !v.is_finite())
            })
            .collect();
        return Err(Error::Numerical {
            context: "training loss".into(),
            message: format!(
                "non-finite loss; batch entries {bad:?} drawn from {:?}",
                batch.origins
            ),
        });
    }
    Ok((g, p, loss, value))
}

/// Loss of `model` on a fixed noisy batch, without gradients.
pub fn batch_loss<R: Real>(
    model: &DenoiserModel<R>,
    batch: &Batch,
    noisy: &NoisyBatch,
) -> Result<f64> {
    Ok(loss_graph(model, batch, noisy)?.3)
}

/// The same loss for any predictor, evaluated entry by entry.
pub fn predictor_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    batch: &Batch,
    noisy: &NoisyBatch,
) -> Result<f64> {
    let mut total = 0.0;
    for b in 0..batch.size {
        let r = b * batch.samples..(b + 1) * batch.samples;
        let eps = predictor.predict_noise(
            &noisy.y_noisy[r.clone()],
            &batch.entry_mel(b)?,
            noisy.levels[b],
        )?;
        total += eps
            .iter()
            .zip(&noisy.epsilon[r])
            .map(|(a, e)| (a - e).abs())
            .sum::<f64>();
    }
    Ok(total / noisy.epsilon.len() as f64)
}

/// One update on `batch`; returns the loss before the update.
///
/// Gradients stay on the parameters until the next step.
pub fn train_step<R: Real, G: Rng + ?Sized>(
    state: &mut TrainState<R>,
    config: &TrainConfig,
    batch: &Batch,
    rng: &mut G,
) -> Result<f64> {
    if batch.samples != config.segment_samples || batch.mel_bins != state.model.config().mel_bins {
        return Err(Error::shape(format!(
            "batch of {} samples x {} bins does not match the configured {} samples x {} bins",
            batch.samples,
            batch.mel_bins,
            config.segment_samples,
            state.model.config().mel_bins
        )));
    }
    let noisy = NoisyBatch::draw(batch, &config.conditioning, &config.training_prior, rng)?;
    let step = state.step + 1;
    let (mut g, p, loss, value) = loss_graph(&state.model, batch, &noisy).map_err(|e| match e {
        Error::Numerical { message, .. } => Error::Numerical {
            context: format!("training step {step}"),
            message,
        },
        other => other,
    })?;
    g.backward(loss)?;
    let params = state.model.params_mut();
    g.write_grads(&p, params)?;
    state.optimizer.step(params)?;
    state.step = step;
    Ok(value)
}

/// A fixed batch and noise draw for tracking loss across a run.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub batch: Batch,
    pub noisy: NoisyBatch,
}

impl HeldOut {
    pub fn new(store: &SegmentStore, config: &TrainConfig, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = make_batch(store, size, &mut rng)?;
        let noisy = NoisyBatch::draw(
            &batch,
            &config.conditioning,
            &config.training_prior,
            &mut rng,
        )?;
        Ok(Self { batch, noisy })
    }

    pub fn loss<R: Real>(&self, model: &DenoiserModel<R>) -> Result<f64> {
        batch_loss(model, &self.batch, &self.noisy)
    }
}

/// Runs steps until `state.step == until`, calling `after_step` after each.
pub fn run<R: Real>(
    state: &mut TrainState<R>,
    config: &TrainConfig,
    store: &SegmentStore,
    until: u64,
    mut after_step: impl FnMut(&TrainState<R>) -> Result<()>,
) -> Result<()> {
    let start = Instant::now();
    while state.step < until {
        let (mut batch_rng, mut noise_rng) = step_rngs(config.seed, state.step);
        let batch = make_batch(store, config.batch_size, &mut batch_rng)?;
        let loss = train_step(state, config, &batch, &mut noise_rng)?;
        state.history.push(LossRecord {
            step: state.step,
            loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        after_step(state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;
    use crate::sample::GaussianOracle;
    use std::f64::consts::PI;

    fn toy_store(utterances: usize) -> SegmentStore {
        let corpus = CorpusConfig {
            utterances,
            ..CorpusConfig::default()
        };
        SegmentStore::new(corpus.generate().unwrap(), &MelConfig::toy(), 256).unwrap()
    }

    /// Gaussian data with an uninformative single-bin mel.
    fn gaussian_batch(
        size: usize,
        samples: usize,
        mu: f64,
        s2: f64,
        rng: &mut ChaCha8Rng,
    ) -> Batch {
        let y0 = (0..size * samples)
            .map(|_| mu + s2.sqrt() * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        let frames = samples / 4;
        Batch {
            size,
            samples,
            mel_bins: 1,
            frames,
            y0,
            mel: vec![0.0; size * frames],
            origins: vec![(0, 0); size],
        }
    }

    fn per_entry_losses<P: NoisePredictor>(p: &P, batch: &Batch, noisy: &NoisyBatch) -> Vec<f64> {
        (0..batch.size)
            .map(|b| {
                let r = b * batch.samples..(b + 1) * batch.samples;
                let e = p
                    .predict_noise(
                        &noisy.y_noisy[r.clone()],
                        &batch.entry_mel(b).unwrap(),
                        noisy.levels[b],
                    )
                    .unwrap();
                e.iter()
                    .zip(&noisy.epsilon[r])
                    .map(|(a, t)| (a - t).abs())
                    .sum::<f64>()
                    / batch.samples as f64
            })
            .collect()
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn oracle_reaches_analytic_minimum() {
        let (mu, s2) = (0.3, 0.25);
        let prior = NoiseSchedule::default_training_prior();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = gaussian_batch(4000, 32, mu, s2, &mut rng);
        let noisy =
            NoisyBatch::draw(&batch, &ConditioningMode::Continuous, &prior, &mut rng).unwrap();
        let oracle = GaussianOracle {
            mu,
            s2,
            samples_per_frame: 4,
        };
        let (measured, se) = mean_and_se(&per_entry_losses(&oracle, &batch, &noisy));
        assert_eq!(measured.to_bits(), {
            let total: f64 = per_entry_losses(&oracle, &batch, &noisy).iter().sum();
            (total / batch.size as f64).to_bits()
        });

        // residual ε - E[ε | y] is Gaussian with variance ᾱ s2 / (ᾱ s2 + 1 - ᾱ)
        let ell = prior.ell();
        let points = 16;
        let mut expected = 0.0;
        for s in 1..=prior.len() {
            for k in 0..points {
                let l = ell[s] + (ell[s - 1] - ell[s]) * (k as f64 + 0.5) / points as f64;
                let ab = l * l;
                let v = ab * s2 / (ab * s2 + 1.0 - ab);
                expected += (2.0 * v / PI).sqrt();
            }
        }
        expected /= (prior.len() * points) as f64;
        let predicted = predictor_loss(&oracle, &batch, &noisy).unwrap();
        assert!((predicted - measured).abs() < 1e-12);
        assert!(
            (measured - expected).abs() < 4.0 * se,
            "{measured} vs {expected} (se {se})"
        );
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn output_len(&self, mel: &MelSpectrogram) -> Result<usize> {
            Ok(mel.frames() * 4)
        }
        fn predict_noise(&self, y: &[f64], _: &MelSpectrogram, _: f64) -> Result<Vec<f64>> {
            Ok(vec![0.0; y.len()])
        }
    }

    #[test]
    fn zero_predictor_loss_is_folded_normal_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = gaussian_batch(500, 64, 0.0, 1.0, &mut rng);
        let noisy = NoisyBatch::draw(
            &batch,
            &ConditioningMode::Continuous,
            &NoiseSchedule::default_training_prior(),
            &mut rng,
        )
        .unwrap();
        let loss = predictor_loss(&Zero, &batch, &noisy).unwrap();
        let se = (1.0 - 2.0 / PI).sqrt() / (noisy.epsilon.len() as f64).sqrt();
        assert!((loss - (2.0 / PI).sqrt()).abs() < 4.0 * se, "{loss}");
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let store = toy_store(3);
        let config = TrainConfig {
            batch_size: 2,
            ..TrainConfig::toy()
        };
        let losses = |until| {
            let mut state = TrainState::<f32>::new(ModelConfig::toy(), &config).unwrap();
            run(&mut state, &config, &store, until, |_| Ok(())).unwrap();
            state
        };
        let a = losses(4);
        let b = losses(4);
        let bits = |s: &TrainState<f32>| {
            s.history
                .iter()
                .map(|r| r.loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.model.params(), b.model.params());

        // stopping and continuing replays the same steps
        let mut half = losses(2);
        run(&mut half, &config, &store, 4, |_| Ok(())).unwrap();
        assert_eq!(bits(&half), bits(&a));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let store = toy_store(2);
        let config = TrainConfig {
            batch_size: 2,
            ..TrainConfig::toy()
        };
        let mut state = TrainState::<f64>::new(ModelConfig::toy(), &config).unwrap();
        let (mut br, mut nr) = step_rngs(config.seed, 0);
        let batch = make_batch(&store, 2, &mut br).unwrap();
        let loss = train_step(&mut state, &config, &batch, &mut nr).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(state.step, 1);
        for (_, name, t) in state.model.params().iter() {
            let norm: f64 = t.grad().expect("gradient").iter().map(|g| g * g).sum();
            assert!(norm > 0.0, "{name} has zero gradient");
        }
    }

    #[test]
    fn discrete_mode_matches_collapsed_continuous_marginal() {
        let prior = NoiseSchedule::linear(1e-4, 0.05, 50).unwrap();
        let ell = prior.ell().to_vec();
        let draws = 50_000;
        let bin = |v: f64| {
            (1..=prior.len())
                .find(|&s| v >= ell[s] && v < ell[s - 1])
                .expect("in support")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut cont = vec![0f64; prior.len() + 1];
        let mut disc = vec![0f64; prior.len() + 1];
        let discrete = ConditioningMode::Discrete(prior.clone());
        for _ in 0..draws {
            cont[bin(ConditioningMode::Continuous.draw_level(&prior, &mut rng))] += 1.0;
            let d = discrete.draw_level(&prior, &mut rng);
            assert!(ell[1..].contains(&d));
            disc[bin(d)] += 1.0;
        }
        // two-sample chi-square on equal totals; 49 df, 0.1% critical value ≈ 85.4
        let chi2: f64 = (1..=prior.len())
            .map(|s| (cont[s] - disc[s]).powi(2) / (cont[s] + disc[s]))
            .sum();
        assert!(chi2 < 85.4, "chi2 {chi2}");
    }

    #[test]
    fn batch_crops_align_with_frames() {
        let mel = MelConfig::full();
        let y: Vec<f64> = (0..24_000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let store = SegmentStore::new(
            vec![("a".into(), Waveform::new(y.clone(), 24_000).unwrap())],
            &mel,
            7200,
        )
        .unwrap();
        assert_eq!(store.segment_frames(), 24);
        let full = &store.utterances()[0].mel;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let batch = make_batch(&store, 4, &mut rng).unwrap();
        for b in 0..4 {
            let (_, f) = batch.origins[b];
            assert_eq!(batch.entry_y0(b), &y[f * 300..f * 300 + 7200]);
            assert_eq!(batch.entry_mel(b).unwrap(), full.crop(f, 24).unwrap());
        }
    }

    #[test]
    fn batch_edge_cases() {
        let corpus = CorpusConfig::default();
        let y = corpus.utterance(0).unwrap();
        let store =
            SegmentStore::new(vec![("a".into(), y.clone())], &MelConfig::toy(), y.len()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let batch = make_batch(&store, 3, &mut rng).unwrap();
        for b in 0..3 {
            assert_eq!(batch.entry_y0(b), y.samples());
        }
        assert!(matches!(
            SegmentStore::new(Vec::new(), &MelConfig::toy(), 256),
            Err(Error::Data(_))
        ));
        let short = y.slice(0, 100).unwrap();
        let store = SegmentStore::new(
            vec![("s".into(), short), ("l".into(), y)],
            &MelConfig::toy(),
            256,
        )
        .unwrap();
        assert_eq!(store.len(), 1);
        assert!(SegmentStore::new(Vec::new(), &MelConfig::toy(), 254).is_err());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut cfg = TrainConfig::toy();
        cfg.conditioning =
            ConditioningMode::Discrete(NoiseSchedule::linear(1e-4, 0.05, 50).unwrap());
        cfg.adam.clip_norm = None;
        let back = TrainConfig::from_doc(&cfg.to_doc(), &TrainConfig::default()).unwrap();
        assert_eq!(back, cfg);
        cfg.segment_samples = 254;
        assert!(cfg.validate(&ModelConfig::toy()).is_err());
        let doc = KvDoc::parse("conditioning = sometimes\n", "t.cfg").unwrap();
        let err = TrainConfig::from_doc(&doc, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("t.cfg:1"), "{err}");
    }

    #[test]
    fn adam_minimises_a_quadratic_and_clips() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::new(&[2], vec![0.0, 10.0]).unwrap());
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.1,
                clip_norm: Some(1.0),
                ..AdamConfig::default()
            },
            &store,
        );
        for i in 0..500 {
            let w = store.get(id).data().to_vec();
            let g: Vec<f64> = w.iter().map(|v| 2.0 * (v - 3.0)).collect();
            store.get_mut(id).set_grad(g).unwrap();
            let norm = adam.step(&mut store).unwrap();
            if i == 0 {
                assert!((norm - (36.0f64 + 196.0).sqrt()).abs() < 1e-12);
                // first Adam step moves each coordinate by about lr regardless of scale
                let w = store.get(id).data();
                assert!((w[0] - 0.1).abs() < 1e-6 && (w[1] - 9.9).abs() < 1e-6);
            }
        }
        for v in store.get(id).data() {
            assert!((v - 3.0).abs() < 1e-2, "{v}");
        }
        assert_eq!(adam.steps(), 500);
    }
}
