//! Noise schedules.
//!
//! A schedule is a sequence of per-step variance increments `β_1..β_N`. From
//! it we derive `α_n = 1 - β_n`, the cumulative signal retention
//! `ᾱ_n = Π_{s≤n} α_s` and the noise-level boundaries `ℓ_0 = 1`,
//! `ℓ_s = √ᾱ_s` used to draw continuous noise levels during training.
//!
//! Everything here is computed in `f64`: for long schedules `ᾱ` runs into
//! the single precision underflow range.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{check_finite, Error, Result};
use crate::kv::{self, KvDoc};

/// How a schedule was constructed. Informational only: the β list is
/// authoritative.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Linear { start: f64, end: f64 },
    Fibonacci,
    Manual,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear { .. } => "linear",
            ScheduleKind::Fibonacci => "fibonacci",
            ScheduleKind::Manual => "manual",
        }
    }
}

/// An immutable, validated noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    one_minus_alpha_bars: Vec<f64>,
    ell: Vec<f64>,
}

/// A continuous noise level drawn by hierarchical sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevelSample {
    pub sqrt_alpha_bar: f64,
    /// 1-based segment index `s`; the value lies in `(ℓ_s, ℓ_{s-1})`.
    pub segment_index: usize,
}

impl NoiseSchedule {
    /// `n` values spaced evenly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(beta_start: f64, beta_end: f64, n: usize) -> Result<Self> {
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::Schedule("linear endpoints must be finite".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "linear schedule needs 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        if n == 0 {
            return Err(Error::Schedule("linear schedule needs n >= 1".into()));
        }
        let betas = if n == 1 {
            vec![beta_start]
        } else {
            let last = (n - 1) as f64;
            (0..n)
                .map(|i| {
                    let t = i as f64 / last;
                    // lerp form so both endpoints are reproduced bit-exactly
                    beta_start * (1.0 - t) + beta_end * t
                })
                .collect()
        };
        Self::build(
            ScheduleKind::Linear {
                start: beta_start,
                end: beta_end,
            },
            betas,
        )
    }

    /// `β_1 = 1e-6`, `β_2 = 2e-6`, `β_k = β_{k-1} + β_{k-2}`.
    pub fn fibonacci(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Schedule(format!(
                "fibonacci schedule needs n >= 2, got {n}"
            )));
        }
        // Integer recurrence, scaled once, so each entry is the correctly
        // rounded decimal value.
        let mut counts: Vec<u64> = Vec::with_capacity(n);
        counts.push(1);
        counts.push(2);
        while counts.len() < n {
            let k = counts.len();
            let next = counts[k - 1]
                .checked_add(counts[k - 2])
                .ok_or_else(|| Error::Schedule(format!("fibonacci({n}) overflows")))?;
            counts.push(next);
        }
        let betas: Vec<f64> = counts.iter().map(|&c| c as f64 / 1e6).collect();
        if let Some(pos) = betas.iter().position(|&b| b >= 1.0) {
            return Err(Error::Schedule(format!(
                "fibonacci({n}) reaches beta_{} = {} >= 1",
                pos + 1,
                betas[pos]
            )));
        }
        Self::build(ScheduleKind::Fibonacci, betas)
    }

    /// Wraps an explicit β list verbatim.
    pub fn manual(betas: &[f64]) -> Result<Self> {
        Self::build(ScheduleKind::Manual, betas.to_vec())
    }

    /// Training prior for continuous noise-level sampling: `Linear(1e-6, 0.01, 1000)`.
    pub fn default_training_prior() -> Self {
        Self::linear(1e-6, 0.01, 1000).expect("constant schedule is valid")
    }

    fn build(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule(
                "schedule must have at least one beta".into(),
            ));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b.is_finite() && b > 0.0 && b < 1.0) {
                return Err(Error::Schedule(format!(
                    "beta_{} = {b} is outside (0, 1)",
                    i + 1
                )));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for &a in &alphas {
            let next = acc * a;
            if !(next < acc) || next <= 0.0 {
                return Err(Error::Schedule(format!(
                    "alpha_bar stops decreasing at step {} (beta too small for f64 or product underflow)",
                    alpha_bars.len() + 1
                )));
            }
            acc = next;
            alpha_bars.push(acc);
        }
        // 1 - ᾱ from the log-product keeps precision when ᾱ is close to 1
        let mut log_acc = 0.0f64;
        let one_minus_alpha_bars = betas
            .iter()
            .map(|b| {
                log_acc += (-b).ln_1p();
                -log_acc.exp_m1()
            })
            .collect();
        let mut ell = Vec::with_capacity(betas.len() + 1);
        ell.push(1.0);
        ell.extend(alpha_bars.iter().map(|ab| ab.sqrt()));
        if ell.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Schedule(
                "noise-level boundaries are not strictly decreasing".into(),
            ));
        }
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            one_minus_alpha_bars,
            ell,
        })
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    /// Number of steps `N`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ℓ_0..ℓ_N`, length `N + 1`.
    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    fn check_step(&self, n: usize) {
        assert!(
            (1..=self.len()).contains(&n),
            "step {n} outside 1..={}",
            self.len()
        );
    }

    /// `β_n`, 1-based.
    pub fn beta(&self, n: usize) -> f64 {
        self.check_step(n);
        self.betas[n - 1]
    }

    /// `α_n`, 1-based.
    pub fn alpha(&self, n: usize) -> f64 {
        self.check_step(n);
        self.alphas[n - 1]
    }

    /// `ᾱ_n`, 1-based; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            return 1.0;
        }
        self.check_step(n);
        self.alpha_bars[n - 1]
    }

    /// `1 - ᾱ_n`, 1-based; zero at `n = 0`.
    pub fn one_minus_alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        self.check_step(n);
        self.one_minus_alpha_bars[n - 1]
    }

    pub fn sqrt_alpha_bar(&self, n: usize) -> f64 {
        self.ell[n]
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        *self.alpha_bars.last().expect("non-empty")
    }

    /// Draws a segment uniformly from `1..=S`, then a level uniformly from
    /// the open interval `(ℓ_s, ℓ_{s-1})`.
    pub fn sample_noise_level<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseLevelSample {
        let s = rng.random_range(1..=self.len());
        let lo = self.ell[s];
        let hi = self.ell[s - 1];
        loop {
            let u: f64 = rng.random();
            let v = lo + (hi - lo) * u;
            if v > lo && v < hi {
                return NoiseLevelSample {
                    sqrt_alpha_bar: v,
                    segment_index: s,
                };
            }
        }
    }

    /// Closed-form `KL(N(√ᾱ_N y0, (1-ᾱ_N) I) || N(0, I))` in nats.
    pub fn kl_terminal(&self, y0: &[f64]) -> Result<f64> {
        check_finite(y0, "kl_terminal y0")?;
        let ab = self.terminal_alpha_bar();
        if ab >= 1.0 {
            return Err(Error::Schedule(
                "terminal alpha_bar is 1: the schedule adds no noise, KL to N(0, I) is unbounded"
                    .into(),
            ));
        }
        let dim = y0.len() as f64;
        let energy: f64 = y0.iter().map(|v| v * v).sum();
        // ½ Σ [ᾱ y² + (1-ᾱ) - 1 - ln(1-ᾱ)]
        Ok(0.5 * (ab * energy - dim * ab - dim * (-ab).ln_1p()))
    }

    /// Plain-text key-value form: `kind`, `params` and the full β list.
    pub fn to_text(&self) -> String {
        let mut doc = KvDoc::new();
        doc.set("kind", self.kind.name());
        let params = match &self.kind {
            ScheduleKind::Linear { start, end } => format!("{start:e}, {end:e}, {}", self.len()),
            ScheduleKind::Fibonacci | ScheduleKind::Manual => format!("{}", self.len()),
        };
        doc.set("params", params);
        let betas: Vec<String> = self.betas.iter().map(|b| format!("{b:e}")).collect();
        doc.set("betas", betas.join(", "));
        doc.to_text()
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let doc = KvDoc::parse(text, source)?;
        Self::from_doc(&doc)
    }

    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        let betas: Vec<f64> = doc.parse_list("betas")?;
        let kind = match doc.get("kind").unwrap_or("manual") {
            "linear" => {
                let params: Vec<f64> = doc.parse_list("params")?;
                if params.len() != 3 {
                    return Err(
                        doc.error_at(doc.line_of("params"), "linear params are `start, end, n`")
                    );
                }
                ScheduleKind::Linear {
                    start: params[0],
                    end: params[1],
                }
            }
            "fibonacci" => ScheduleKind::Fibonacci,
            "manual" => ScheduleKind::Manual,
            other => {
                return Err(doc.error_at(
                    doc.line_of("kind"),
                    format!("unknown schedule kind `{other}`"),
                ))
            }
        };
        let mut schedule = Self::build(ScheduleKind::Manual, betas)?;
        schedule.kind = kind;
        Ok(schedule)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let doc = KvDoc::read(path)?;
        Self::from_doc(&doc)
    }

    /// Compact single-line description, e.g. `linear:1e-4,5e-3,1000`.
    pub fn describe(&self) -> String {
        match &self.kind {
            ScheduleKind::Linear { start, end } => {
                format!("linear:{start:e},{end:e},{}", self.len())
            }
            ScheduleKind::Fibonacci => format!("fibonacci:{}", self.len()),
            ScheduleKind::Manual => {
                let parts: Vec<String> = self.betas.iter().map(|b| format!("{b:e}")).collect();
                format!("manual:{}", parts.join(","))
            }
        }
    }
}

/// Named presets accepted wherever a schedule spec is parsed.
pub const PRESETS: &[(&str, &str)] = &[
    ("linear-1000", "linear:1e-4,0.005,1000"),
    ("linear-50", "linear:1e-4,0.05,50"),
    ("fibonacci-25", "fibonacci:25"),
    ("training-prior", "linear:1e-6,0.01,1000"),
    ("manual-6", "manual:1e-4,1e-3,1e-2,1e-1,5e-1,9e-1"),
];

/// Parses a schedule spec: a preset name, `linear:start,end,n`,
/// `fibonacci:n`, `manual:b1,b2,...` or `file:<path>`.
pub fn parse_schedule_spec(spec: &str) -> Result<NoiseSchedule> {
    let spec = spec.trim();
    if let Some((_, expansion)) = PRESETS.iter().find(|(name, _)| *name == spec) {
        return parse_schedule_spec(expansion);
    }
    let (kind, args) = spec
        .split_once(':')
        .ok_or_else(|| Error::Schedule(format!("unknown schedule `{spec}`")))?;
    let bad = |e: String| Error::Schedule(format!("`{spec}`: {e}"));
    match kind {
        "linear" => {
            let parts: Vec<&str> = args.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(bad("expected linear:start,end,n".into()));
            }
            let start: f64 = parts[0].parse().map_err(|e| bad(format!("{e}")))?;
            let end: f64 = parts[1].parse().map_err(|e| bad(format!("{e}")))?;
            let n: usize = parts[2].parse().map_err(|e| bad(format!("{e}")))?;
            NoiseSchedule::linear(start, end, n)
        }
        "fibonacci" => {
            let n: usize = args.trim().parse().map_err(|e| bad(format!("{e}")))?;
            NoiseSchedule::fibonacci(n)
        }
        "manual" => {
            let betas: Vec<f64> = kv::parse_list(args).map_err(bad)?;
            NoiseSchedule::manual(&betas)
        }
        "file" => NoiseSchedule::read(Path::new(args.trim())),
        _ => Err(Error::Schedule(format!(
            "unknown schedule kind `{kind}` in `{spec}`"
        ))),
    }
}

/// Thresholds for the two well-behaved-schedule conditions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticThresholds {
    /// Maximum terminal KL per waveform sample (nats).
    pub kl_per_sample: f64,
    /// Maximum admissible `β_1`.
    pub first_beta: f64,
}

impl Default for DiagnosticThresholds {
    fn default() -> Self {
        Self {
            kl_per_sample: 0.05,
            first_beta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRow {
    pub n: usize,
    pub beta: f64,
    pub alpha_bar: f64,
    pub ell: f64,
    /// `None` for `n = 1`, where no noise is injected.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleWarning {
    TerminalKlTooLarge { kl_per_sample: f64, threshold: f64 },
    FirstBetaTooLarge { beta: f64, threshold: f64 },
}

impl std::fmt::Display for ScheduleWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleWarning::TerminalKlTooLarge {
                kl_per_sample,
                threshold,
            } => write!(
                f,
                "terminal KL {kl_per_sample:.4e} nats/sample exceeds {threshold:e}: the schedule ends too far from N(0, I)"
            ),
            ScheduleWarning::FirstBetaTooLarge { beta, threshold } => write!(
                f,
                "beta_1 = {beta:e} exceeds {threshold:e}: schedules should start with small betas"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleDiagnostics {
    pub rows: Vec<ScheduleRow>,
    /// Terminal KL in nats, when a reference waveform was supplied.
    pub terminal_kl: Option<f64>,
    pub warnings: Vec<ScheduleWarning>,
}

impl ScheduleDiagnostics {
    pub fn compute(
        schedule: &NoiseSchedule,
        y0: Option<&[f64]>,
        thresholds: DiagnosticThresholds,
    ) -> Result<Self> {
        let rows = (1..=schedule.len())
            .map(|n| ScheduleRow {
                n,
                beta: schedule.beta(n),
                alpha_bar: schedule.alpha_bar(n),
                ell: schedule.sqrt_alpha_bar(n),
                sigma: crate::sample::sigma(schedule, n).ok(),
            })
            .collect();
        let mut warnings = Vec::new();
        let terminal_kl = match y0 {
            Some(y) => {
                let kl = schedule.kl_terminal(y)?;
                let per = kl / y.len().max(1) as f64;
                if per > thresholds.kl_per_sample {
                    warnings.push(ScheduleWarning::TerminalKlTooLarge {
                        kl_per_sample: per,
                        threshold: thresholds.kl_per_sample,
                    });
                }
                Some(kl)
            }
            None => None,
        };
        let b1 = schedule.beta(1);
        if b1 > thresholds.first_beta {
            warnings.push(ScheduleWarning::FirstBetaTooLarge {
                beta: b1,
                threshold: thresholds.first_beta,
            });
        }
        Ok(Self {
            rows,
            terminal_kl,
            warnings,
        })
    }

    /// CSV with header `n,beta,alpha_bar,ell,sigma`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,beta,alpha_bar,ell,sigma\n");
        for r in &self.rows {
            let sigma = r.sigma.map(|s| format!("{s:e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{}",
                r.n, r.beta, r.alpha_bar, r.ell, sigma
            );
        }
        out
    }
}
