//! Synthetic CSI amplitude streams with labeled motion events.
//!
//! A stream is a fixed per-link baseline profile plus i.i.d. Gaussian sensor
//! noise. Each event adds its class signature: sinusoidal amplitude
//! modulations, each concentrated on a Gaussian band of subcarriers around a
//! center subcarrier. Individual events jitter the signature's amplitude and
//! frequency slightly and draw a random phase, so that two events of one
//! class are similar but never identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One sinusoidal modulation of a subcarrier band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureComponent {
    /// Center of the affected band, as a fraction of the subcarrier count.
    pub subcarrier: f64,
    /// Modulation frequency in Hz.
    pub frequency: f64,
    /// Peak amplitude in the stream's units.
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub class: u32,
    pub components: Vec<SignatureComponent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub antennas: usize,
    pub subcarriers: usize,
    /// Samples per second.
    pub sample_rate: f64,
    /// Stream length in seconds.
    pub duration: f64,
    /// Expected events per minute.
    pub event_rate: f64,
    pub noise_sigma: f64,
    /// Mean baseline amplitude.
    pub baseline: f64,
    /// Reference window length in samples; event durations are drawn from
    /// `[0.5, 1.5]` times this.
    pub window: usize,
    /// Gaussian band width of each component, as a fraction of the
    /// subcarrier count.
    pub band_width: f64,
    /// Relative per-event jitter of component amplitude and frequency.
    pub jitter: f64,
    pub class_signatures: Vec<ClassSignature>,
    pub seed: u64,
}

impl StreamConfig {
    pub fn num_classes(&self) -> usize {
        self.class_signatures.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("stream config: {msg}")));
        if self.antennas == 0 || self.subcarriers == 0 {
            return bad("antennas and subcarriers must be at least 1");
        }
        if !(self.sample_rate > 0.0) || !(self.duration > 0.0) {
            return bad("sample_rate and duration must be positive");
        }
        if !(self.event_rate >= 0.0) || !(self.noise_sigma >= 0.0) || !(self.baseline >= 0.0) {
            return bad("event_rate, noise_sigma and baseline must be nonnegative");
        }
        if self.window == 0 {
            return bad("window must be at least 1");
        }
        if self.event_rate > 0.0 && self.class_signatures.is_empty() {
            return bad("events requested but no class signatures given");
        }
        if !(0.0..1.0).contains(&self.jitter) || !(self.band_width > 0.0) {
            return bad("jitter must be in [0, 1) and band_width positive");
        }
        Ok(())
    }

    /// Stream length in samples.
    pub fn len(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An injected event: samples `start..end` carry the signature of `class`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub start: usize,
    pub end: usize,
    pub class: u32,
}

#[derive(Clone, Debug)]
pub struct Stream {
    /// `[A, S, L]` amplitudes.
    pub values: Tensor<f32>,
    pub events: Vec<Event>,
    /// Noise-free baseline per link, `[A, S]`.
    pub baseline: Vec<f64>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-link baseline: a smooth, seeded profile across subcarriers with a
/// per-antenna gain.
fn baseline_profile(cfg: &StreamConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = cfg.subcarriers;
    let mut out = Vec::with_capacity(cfg.antennas * s);
    for _ in 0..cfg.antennas {
        let gain = rng.random_range(0.8..1.2);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let ripple = rng.random_range(0.05..0.2);
        for k in 0..s {
            let x = k as f64 / s as f64;
            out.push(cfg.baseline * gain * (1.0 + ripple * (std::f64::consts::TAU * 1.5 * x + phase).sin()));
        }
    }
    out
}

/// Generate a stream and the log of the events injected into it.
pub fn generate_stream(cfg: &StreamConfig) -> Result<Stream> {
    cfg.validate()?;
    let (a_n, s_n, len) = (cfg.antennas, cfg.subcarriers, cfg.len());
    if len == 0 {
        return Err(Error::Invalid("stream config: duration yields no samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let baseline = baseline_profile(cfg, &mut rng);
    let antenna_gain: Vec<f64> = (0..a_n).map(|_| rng.random_range(0.6..1.0)).collect();

    // event schedule
    let mut events = Vec::new();
    if cfg.event_rate > 0.0 {
        let mean_gap = 60.0 / cfg.event_rate * cfg.sample_rate;
        let gap = Exp::new(1.0 / mean_gap).map_err(|e| Error::Invalid(e.to_string()))?;
        let lo = (cfg.window / 2).max(1);
        let hi = (cfg.window * 3 / 2).max(lo + 1);
        let mut t = gap.sample(&mut rng) as usize;
        loop {
            let dur = rng.random_range(lo..=hi);
            if t + dur > len {
                break;
            }
            let class = cfg.class_signatures[rng.random_range(0..cfg.num_classes())].class;
            events.push(Event {
                start: t,
                end: t + dur,
                class,
            });
            // at least one second of quiet between events
            t += dur + cfg.sample_rate.ceil() as usize + gap.sample(&mut rng) as usize;
        }
    }

    let mut values = vec![0f64; a_n * s_n * len];
    for (link, &b) in baseline.iter().enumerate() {
        values[link * len..(link + 1) * len].fill(b);
    }
    for ev in &events {
        let sig = cfg
            .class_signatures
            .iter()
            .find(|s| s.class == ev.class)
            .expect("event class has a signature");
        for comp in &sig.components {
            let amp = comp.amplitude * (1.0 + rng.random_range(-cfg.jitter..=cfg.jitter));
            let freq = comp.frequency * (1.0 + rng.random_range(-cfg.jitter..=cfg.jitter));
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let center = comp.subcarrier * s_n as f64;
            let width = cfg.band_width * s_n as f64;
            let wave: Vec<f64> = (ev.start..ev.end)
                .map(|t| {
                    let tt = (t - ev.start) as f64 / cfg.sample_rate;
                    (std::f64::consts::TAU * freq * tt + phase).sin()
                })
                .collect();
            for (a, &g) in antenna_gain.iter().enumerate() {
                for s in 0..s_n {
                    let z = (s as f64 - center) / width;
                    let band = amp * g * (-0.5 * z * z).exp();
                    if band < 1e-3 {
                        continue;
                    }
                    let row = &mut values[(a * s_n + s) * len..(a * s_n + s + 1) * len];
                    for (v, w) in row[ev.start..ev.end].iter_mut().zip(&wave) {
                        *v += band * w;
                    }
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        for v in &mut values {
            *v += noise.sample(&mut rng);
        }
    }
    let data = values.into_iter().map(|v| v.max(0.0) as f32).collect();
    Ok(Stream {
        values: Tensor::new(&[a_n, s_n, len], data)?,
        events,
        baseline,
    })
}

/// Event log as JSON lines, one `{"start","end","class"}` object per event.
pub fn events_to_jsonl(events: &[Event]) -> String {
    events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
        .collect()
}

pub fn events_from_jsonl(text: &str) -> Result<Vec<Event>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("event line {}: {e}", i + 1)))
        })
        .collect()
}
