//! The synthetic transfer benchmark: short streams with two disjoint groups
//! of event classes, segmented by the threshold trigger. One group supplies
//! unlabeled pretraining segments; the other supplies labeled segments for
//! few-shot calibration and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::segment::{label_from_events, segment_stream, SegmentParams};
use super::stream::{generate_stream, ClassSignature, SignatureComponent, StreamConfig};
use super::CsiSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    /// Segment shape `[antennas, subcarriers, window]`.
    pub input: [usize; 3],
    pub sample_rate: f64,
    pub noise_sigma: f64,
    pub baseline: f64,
    pub band_width: f64,
    pub jitter: f64,
    /// Events per minute.
    pub event_rate: f64,
    /// Length of each generated stream in seconds.
    pub stream_seconds: f64,
    pub tau: f64,
    pub baseline_len: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            input: [3, 69, 320],
            sample_rate: 100.0,
            noise_sigma: 1.0,
            baseline: 40.0,
            band_width: 0.06,
            jitter: 0.15,
            event_rate: 10.0,
            stream_seconds: 120.0,
            tau: 20.0,
            baseline_len: 100,
            seed: 0,
        }
    }
}

fn class(id: u32, parts: [(f64, f64, f64); 2]) -> ClassSignature {
    ClassSignature {
        class: id,
        components: parts
            .iter()
            .map(|&(subcarrier, frequency, amplitude)| SignatureComponent {
                subcarrier,
                frequency,
                amplitude,
            })
            .collect(),
    }
}

/// Eight event classes built from one shared set of subcarrier bands.
/// Classes 0-3 are the pretraining group and 4-7 the calibration group; no
/// band/frequency pair occurs in both.
pub fn benchmark_signatures() -> (Vec<ClassSignature>, Vec<ClassSignature>) {
    let pretrain = vec![
        class(0, [(0.2, 0.8, 30.0), (0.6, 2.0, 20.0)]),
        class(1, [(0.4, 1.4, 30.0), (0.8, 0.6, 20.0)]),
        class(2, [(0.6, 2.6, 30.0), (0.2, 1.6, 20.0)]),
        class(3, [(0.8, 1.0, 30.0), (0.4, 2.4, 20.0)]),
    ];
    let calibrate = vec![
        class(4, [(0.2, 2.2, 30.0), (0.8, 1.2, 20.0)]),
        class(5, [(0.4, 0.7, 30.0), (0.6, 1.8, 20.0)]),
        class(6, [(0.6, 1.2, 30.0), (0.4, 0.5, 20.0)]),
        class(7, [(0.8, 2.8, 30.0), (0.2, 0.9, 20.0)]),
    ];
    (pretrain, calibrate)
}

impl BenchmarkConfig {
    /// Generator settings for one stream of the given classes.
    pub fn stream(&self, signatures: &[ClassSignature], seed: u64) -> StreamConfig {
        StreamConfig {
            antennas: self.input[0],
            subcarriers: self.input[1],
            sample_rate: self.sample_rate,
            duration: self.stream_seconds,
            event_rate: self.event_rate,
            noise_sigma: self.noise_sigma,
            baseline: self.baseline,
            window: self.input[2],
            band_width: self.band_width,
            jitter: self.jitter,
            class_signatures: signatures.to_vec(),
            seed,
        }
    }

    pub fn segment_params(&self) -> SegmentParams {
        SegmentParams {
            tau: self.tau,
            window: self.input[2],
            baseline_len: self.baseline_len,
        }
    }

    fn stream_seed(&self, group: u64, k: u64) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(group << 32 | k);
        rng.random()
    }
}

const MAX_STREAMS: u64 = 100_000;

/// Generate streams until `want` segments are collected. Segments are
/// unlabeled unless `labeled` is set, in which case only those starting
/// near an event onset are kept, labeled with its class.
fn collect(
    cfg: &BenchmarkConfig,
    signatures: &[ClassSignature],
    group: u64,
    mut keep: impl FnMut(&CsiSample) -> bool,
    mut done: impl FnMut() -> bool,
    labeled: bool,
) -> Result<Vec<CsiSample>> {
    let mut out = Vec::new();
    for k in 0..MAX_STREAMS {
        if done() {
            return Ok(out);
        }
        let stream = generate_stream(&cfg.stream(signatures, cfg.stream_seed(group, k)))?;
        let mut segs = segment_stream(&stream.values, &cfg.segment_params(), k as u32)?;
        if labeled {
            label_from_events(&mut segs, &stream.events, cfg.input[2] / 2);
        }
        for s in segs {
            if (!labeled || s.label.is_some()) && keep(&s) {
                out.push(s);
                if done() {
                    return Ok(out);
                }
            }
        }
    }
    Err(Error::Invalid(format!(
        "benchmark: {MAX_STREAMS} streams did not yield enough segments"
    )))
}

/// `count` unlabeled segments from streams of the given classes.
pub fn unlabeled_segments(cfg: &BenchmarkConfig, signatures: &[ClassSignature], count: usize) -> Result<Vec<CsiSample>> {
    let n = std::cell::Cell::new(0usize);
    collect(
        cfg,
        signatures,
        0,
        |_| {
            n.set(n.get() + 1);
            true
        },
        || n.get() >= count,
        false,
    )
}

/// Exactly `per_class` labeled segments of every given class.
pub fn labeled_segments(cfg: &BenchmarkConfig, signatures: &[ClassSignature], per_class: usize) -> Result<Vec<CsiSample>> {
    let counts = std::cell::RefCell::new(vec![0usize; signatures.len()]);
    let ids: Vec<u32> = signatures.iter().map(|s| s.class).collect();
    collect(
        cfg,
        signatures,
        1,
        |s| {
            let Some(i) = ids.iter().position(|&c| Some(c) == s.label) else { return false };
            let mut c = counts.borrow_mut();
            if c[i] < per_class {
                c[i] += 1;
                true
            } else {
                false
            }
        },
        || counts.borrow().iter().all(|&c| c >= per_class),
        true,
    )
}

/// Unlabeled segments of the pretraining classes and labeled segments of
/// the disjoint calibration classes.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub unlabeled: Vec<CsiSample>,
    pub labeled: Vec<CsiSample>,
}

pub fn build_benchmark(cfg: &BenchmarkConfig, unlabeled: usize, per_class: usize) -> Result<Benchmark> {
    let (pre, cal) = benchmark_signatures();
    Ok(Benchmark {
        unlabeled: unlabeled_segments(cfg, &pre, unlabeled)?,
        labeled: labeled_segments(cfg, &cal, per_class)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkConfig {
        BenchmarkConfig {
            stream_seconds: 60.0,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn builds_requested_counts() {
        let b = build_benchmark(&small(), 30, 5).unwrap();
        assert_eq!(b.unlabeled.len(), 30);
        assert!(b.unlabeled.iter().all(|s| s.label.is_none() && s.values.dims() == [3, 69, 320]));
        assert_eq!(b.labeled.len(), 20);
        for c in 4..8 {
            assert_eq!(b.labeled.iter().filter(|s| s.label == Some(c)).count(), 5);
        }
    }

    #[test]
    fn groups_are_disjoint() {
        let (pre, cal) = benchmark_signatures();
        for p in &pre {
            for c in &cal {
                assert_ne!(p.class, c.class);
                for a in &p.components {
                    for b in &c.components {
                        assert!(a.subcarrier != b.subcarrier || a.frequency != b.frequency);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = build_benchmark(&small(), 10, 2).unwrap();
        let b = build_benchmark(&small(), 10, 2).unwrap();
        assert_eq!(a.unlabeled, b.unlabeled);
        assert_eq!(a.labeled, b.labeled);
    }
}
