//! The noise-prediction network `ε_θ(y_n, x, √ᾱ)`.
//!
//! The noisy waveform is reduced by DBlocks to a pyramid of feature maps;
//! each FiLM turns one of them, plus a sinusoidal embedding of the noise
//! level, into a scale and shift. UBlocks raise the mel spectrogram to the
//! waveform rate, modulated at every stage by the FiLM at matching rate.
//! No layer uses batch statistics, so samples in a batch never interact.

mod config;

pub use config::ModelConfig;

use rand::Rng;

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::sample::NoisePredictor;
use crate::tensor::{
    glorot_uniform, orthogonal_init, Bound, Graph, ParamId, ParamStore, Real, Tensor, Var,
};

/// Sinusoidal embedding of position `scale · √ᾱ`: `dim / 2` sines followed
/// by `dim / 2` cosines at geometrically spaced frequencies.
pub fn positional_encoding(sqrt_alpha_bar: f64, dim: usize, scale: f64) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 == 1 {
        return Err(Error::invalid(format!(
            "positional encoding needs an even dim, got {dim}"
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::invalid("positional encoding scale must be positive"));
    }
    let pos = scale * sqrt_alpha_bar;
    let half = dim / 2;
    let step = -(10_000f64).ln() / half as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let arg = pos * (step * i as f64).exp();
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Orthogonal,
    Glorot,
    /// Glorot scaled down, for the output projection.
    SmallGlorot,
}

/// Gain of the output projection at initialisation. FiLM multiplies features
/// derived from `y` into the upsampling path, so a unit-gain network is
/// strongly super-linear in its input and an untrained model diverges when
/// iterated by the sampler.
const OUTPUT_INIT_GAIN: f64 = 0.01;

/// Registers parameters under a name prefix.
struct Builder<'a, R: Real, G: Rng + ?Sized> {
    store: &'a mut ParamStore<R>,
    rng: &'a mut G,
}

impl<R: Real, G: Rng + ?Sized> Builder<'_, R, G> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
        init: Init,
    ) -> Conv {
        let shape = [cout, cin, kernel];
        let w = match init {
            Init::Orthogonal => orthogonal_init(&shape, 1.0, self.rng),
            Init::Glorot => glorot_uniform(&shape, self.rng),
            Init::SmallGlorot => {
                let mut w: Tensor<R> = glorot_uniform(&shape, self.rng);
                w.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = *v * R::of(OUTPUT_INIT_GAIN));
                w
            }
        };
        let w = self.store.insert(format!("{name}.weight"), w);
        let b = bias.then(|| {
            self.store
                .insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
        });
        Conv {
            w,
            b,
            stride,
            dilation,
        }
    }
}

/// Handles of one convolution's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn apply<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var) -> Result<Var> {
        g.conv1d(
            x,
            p.var(self.w),
            self.b.map(|b| p.var(b)),
            self.stride,
            self.dilation,
        )
    }
}

fn affine<R: Real>(g: &mut Graph<R>, x: Var, gamma: Var, xi: Var) -> Result<Var> {
    let scaled = g.mul(x, gamma)?;
    g.add(scaled, xi)
}

/// Produces `(γ, ξ)` from a feature map and the noise-level embedding.
#[derive(Debug, Clone)]
pub struct Film {
    pub input: Conv,
    pub gamma: Conv,
    pub xi: Conv,
    pub channels: usize,
}

impl Film {
    fn build<R: Real, G: Rng + ?Sized>(
        b: &mut Builder<'_, R, G>,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            input: b.conv(
                &format!("{name}.input"),
                cin,
                cout,
                3,
                1,
                1,
                true,
                Init::Glorot,
            ),
            gamma: b.conv(
                &format!("{name}.gamma"),
                cout,
                cout,
                3,
                1,
                1,
                true,
                Init::Glorot,
            ),
            xi: b.conv(
                &format!("{name}.xi"),
                cout,
                cout,
                3,
                1,
                1,
                true,
                Init::Glorot,
            ),
            channels: cout,
        }
    }

    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        rng: &mut G,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self::build(&mut Builder { store, rng }, name, cin, cout)
    }

    /// `embedding` is `[B, channels]`, added to every time step.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        features: Var,
        embedding: Var,
        slope: R,
    ) -> Result<(Var, Var)> {
        let h = self.input.apply(g, p, features)?;
        let h = g.leaky_relu(h, slope);
        let h = g.add_channel(h, embedding)?;
        Ok((self.gamma.apply(g, p, h)?, self.xi.apply(g, p, h)?))
    }
}

/// Upsampling block: two residual units, three FiLM affines.
#[derive(Debug, Clone)]
pub struct UBlock {
    pub factor: usize,
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Conv,
    pub conv3: Conv,
    pub conv4: Conv,
}

impl UBlock {
    fn build<R: Real, G: Rng + ?Sized>(
        b: &mut Builder<'_, R, G>,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        d: [usize; 4],
    ) -> Self {
        let o = Init::Orthogonal;
        Self {
            factor,
            conv1: b.conv(&format!("{name}.conv1"), cin, cout, 3, 1, d[0], true, o),
            conv2: b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, d[1], true, o),
            skip: b.conv(&format!("{name}.skip"), cin, cout, 1, 1, 1, false, o),
            conv3: b.conv(&format!("{name}.conv3"), cout, cout, 3, 1, d[2], true, o),
            conv4: b.conv(&format!("{name}.conv4"), cout, cout, 3, 1, d[3], true, o),
        }
    }

    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        rng: &mut G,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        dilations: [usize; 4],
    ) -> Self {
        Self::build(
            &mut Builder { store, rng },
            name,
            cin,
            cout,
            factor,
            dilations,
        )
    }

    fn upsample<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        if self.factor == 1 {
            Ok(x)
        } else {
            g.upsample(x, self.factor)
        }
    }

    /// `gamma` and `xi` are at the output rate, `factor` times the input rate.
    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        x: Var,
        gamma: Var,
        xi: Var,
        slope: R,
    ) -> Result<Var> {
        let t_in = g.shape(x)[2];
        if g.shape(gamma)[2] != t_in * self.factor {
            return Err(Error::shape(format!(
                "UBlock x{} on {t_in} steps needs FiLM outputs of {} steps, got {}",
                self.factor,
                t_in * self.factor,
                g.shape(gamma)[2]
            )));
        }
        let m = g.leaky_relu(x, slope);
        let m = self.upsample(g, m)?;
        let m = self.conv1.apply(g, p, m)?;
        let m = affine(g, m, gamma, xi)?;
        let m = g.leaky_relu(m, slope);
        let m = self.conv2.apply(g, p, m)?;
        // 1x1 conv commutes with nearest upsampling; convolving first is cheaper
        let s = self.skip.apply(g, p, x)?;
        let s = self.upsample(g, s)?;
        let h = g.add(m, s)?;

        let r = affine(g, h, gamma, xi)?;
        let r = g.leaky_relu(r, slope);
        let r = self.conv3.apply(g, p, r)?;
        let r = affine(g, r, gamma, xi)?;
        let r = g.leaky_relu(r, slope);
        let r = self.conv4.apply(g, p, r)?;
        g.add(h, r)
    }
}

/// Downsampling block: strided convolution, three dilated convolutions and a 1x1 skip.
#[derive(Debug, Clone)]
pub struct DBlock {
    pub factor: usize,
    pub down: Option<Conv>,
    pub convs: [Conv; 3],
    /// 1x1 projection applied at the block's stride, so the skip path downsamples by subsampling.
    pub skip: Conv,
}

fn down_kernel(factor: usize) -> usize {
    if factor >= 5 {
        5
    } else {
        3
    }
}

impl DBlock {
    fn build<R: Real, G: Rng + ?Sized>(
        b: &mut Builder<'_, R, G>,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        d: [usize; 3],
    ) -> Self {
        let o = Init::Orthogonal;
        let k = down_kernel(factor);
        let down =
            (factor > 1).then(|| b.conv(&format!("{name}.down"), cin, cin, k, factor, 1, true, o));
        let convs = [
            b.conv(&format!("{name}.conv1"), cin, cout, 3, 1, d[0], true, o),
            b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, d[1], true, o),
            b.conv(&format!("{name}.conv3"), cout, cout, 3, 1, d[2], true, o),
        ];
        let skip = b.conv(&format!("{name}.skip"), cin, cout, 1, factor, 1, false, o);
        Self {
            factor,
            down,
            convs,
            skip,
        }
    }

    pub fn new<R: Real, G: Rng + ?Sized>(
        store: &mut ParamStore<R>,
        rng: &mut G,
        name: &str,
        cin: usize,
        cout: usize,
        factor: usize,
        dilations: [usize; 3],
    ) -> Self {
        Self::build(
            &mut Builder { store, rng },
            name,
            cin,
            cout,
            factor,
            dilations,
        )
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, p: &Bound, x: Var, slope: R) -> Result<Var> {
        let t = g.shape(x)[2];
        if !t.is_multiple_of(self.factor) {
            return Err(Error::shape(format!(
                "DBlock /{} needs a length divisible by its factor, got {t}",
                self.factor
            )));
        }
        let mut m = match &self.down {
            Some(d) => d.apply(g, p, x)?,
            None => x,
        };
        for c in &self.convs {
            m = g.leaky_relu(m, slope);
            m = c.apply(g, p, m)?;
        }
        let s = self.skip.apply(g, p, x)?;
        g.add(m, s)
    }
}

#[derive(Debug, Clone)]
struct Layers {
    input: Conv,
    /// Each stage is one DBlock, plus its rate-preserving copy in the large variant.
    dstages: Vec<Vec<DBlock>>,
    mel: Conv,
    films: Vec<Film>,
    ustages: Vec<Vec<UBlock>>,
    output: Conv,
}

/// The denoiser with its parameters.
#[derive(Debug, Clone)]
pub struct DenoiserModel<R: Real> {
    config: ModelConfig,
    params: ParamStore<R>,
    layers: Layers,
}

impl<R: Real> DenoiserModel<R> {
    pub fn new<G: Rng + ?Sized>(config: ModelConfig, rng: &mut G) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng,
        };
        let c = &config;
        let input = b.conv("input", 1, c.input_channels, 5, 1, 1, true, Init::Glorot);
        let repeats = if c.large { 2 } else { 1 };
        let mut dstages = Vec::new();
        let mut cin = c.input_channels;
        for (i, (&cout, &f)) in c.dblock_channels.iter().zip(&c.dblock_factors).enumerate() {
            let mut stage = vec![DBlock::build(
                &mut b,
                &format!("dblock{i}"),
                cin,
                cout,
                f,
                c.dblock_dilations,
            )];
            if repeats == 2 {
                stage.push(DBlock::build(
                    &mut b,
                    &format!("dblock{i}b"),
                    cout,
                    cout,
                    1,
                    c.dblock_dilations,
                ));
            }
            dstages.push(stage);
            cin = cout;
        }
        let mel = b.conv(
            "mel",
            c.mel_bins,
            c.mel_channels,
            3,
            1,
            1,
            true,
            Init::Glorot,
        );
        let n = c.upsample_factors.len();
        let mut films = Vec::new();
        let mut ustages = Vec::new();
        let mut cin = c.mel_channels;
        for i in 0..n {
            let cout = c.ublock_channels[i];
            let level = n - 1 - i;
            films.push(Film::build(
                &mut b,
                &format!("film{i}"),
                c.feature_channels(level),
                cout,
            ));
            let d = c.ublock_dilations[i];
            let mut stage = vec![UBlock::build(
                &mut b,
                &format!("ublock{i}"),
                cin,
                cout,
                c.upsample_factors[i],
                d,
            )];
            if repeats == 2 {
                stage.push(UBlock::build(
                    &mut b,
                    &format!("ublock{i}b"),
                    cout,
                    cout,
                    1,
                    d,
                ));
            }
            ustages.push(stage);
            cin = cout;
        }
        let output = b.conv("output", cin, 1, 3, 1, 1, true, Init::SmallGlorot);
        Ok(Self {
            config,
            params,
            layers: Layers {
                input,
                dstages,
                mel,
                films,
                ustages,
                output,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<R> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same architecture and values in another precision.
    pub fn cast<S: Real>(&self) -> DenoiserModel<S> {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// `y` is `[B, 1, T]`, `mel` is `[B, mel_bins, T / hop]`, one level per batch entry.
    pub fn forward(
        &self,
        g: &mut Graph<R>,
        p: &Bound,
        y: Var,
        mel: Var,
        sqrt_alpha_bar: &[f64],
    ) -> Result<Var> {
        let c = &self.config;
        let ys = g.shape(y).to_vec();
        let ms = g.shape(mel).to_vec();
        if ys.len() != 3 || ys[1] != 1 || ms.len() != 3 || ms[1] != c.mel_bins || ms[0] != ys[0] {
            return Err(Error::shape(format!(
                "expected y [B, 1, T] and mel [B, {}, F], got {ys:?} and {ms:?}",
                c.mel_bins
            )));
        }
        if ys[2] != ms[2] * c.hop() {
            return Err(Error::shape(format!(
                "waveform of {} samples does not match {} mel frames at {} samples per frame",
                ys[2],
                ms[2],
                c.hop()
            )));
        }
        if sqrt_alpha_bar.len() != ys[0] {
            return Err(Error::LengthMismatch {
                context: "noise levels per batch entry",
                expected: ys[0],
                got: sqrt_alpha_bar.len(),
            });
        }
        let slope = R::of(c.leaky_slope);
        let l = &self.layers;

        let mut feats = vec![l.input.apply(g, p, y)?];
        for stage in &l.dstages {
            let mut h = *feats.last().expect("input features");
            for block in stage {
                h = block.forward(g, p, h, slope)?;
            }
            feats.push(h);
        }

        let n = l.ustages.len();
        let mut u = l.mel.apply(g, p, mel)?;
        for i in 0..n {
            let film = &l.films[i];
            let mut emb = Vec::with_capacity(ys[0] * film.channels);
            for &s in sqrt_alpha_bar {
                emb.extend(
                    positional_encoding(s, film.channels, c.positional_scale)?
                        .into_iter()
                        .map(R::of),
                );
            }
            let emb = g.constant_from(&[ys[0], film.channels], emb)?;
            let (gamma, xi) = film.forward(g, p, feats[n - 1 - i], emb, slope)?;
            for block in &l.ustages[i] {
                u = block.forward(g, p, u, gamma, xi, slope)?;
            }
        }
        l.output.apply(g, p, u)
    }

    /// Single-utterance inference in `R` precision.
    pub fn predict(
        &self,
        y_noisy: &[f64],
        mel: &MelSpectrogram,
        sqrt_alpha_bar: f64,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = g.bind_frozen(&self.params);
        let y = g.constant_from(
            &[1, 1, y_noisy.len()],
            y_noisy.iter().map(|&v| R::of(v)).collect(),
        )?;
        let m = g.constant_from(
            &[1, mel.n_mels(), mel.frames()],
            mel.values().iter().map(|&v| R::of(v)).collect(),
        )?;
        let out = self.forward(&mut g, &p, y, m, &[sqrt_alpha_bar])?;
        Ok(g.value(out).iter().map(|v| v.f64()).collect())
    }
}

impl<R: Real> NoisePredictor for DenoiserModel<R> {
    fn output_len(&self, mel: &MelSpectrogram) -> Result<usize> {
        if mel.n_mels() != self.config.mel_bins {
            return Err(Error::shape(format!(
                "model expects {} mel bins, conditioning has {}",
                self.config.mel_bins,
                mel.n_mels()
            )));
        }
        Ok(mel.frames() * self.config.hop())
    }

    fn predict_noise(
        &self,
        y_noisy: &[f64],
        mel: &MelSpectrogram,
        sqrt_alpha_bar: f64,
    ) -> Result<Vec<f64>> {
        self.predict(y_noisy, mel, sqrt_alpha_bar)
    }
}
