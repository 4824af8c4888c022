//! Threshold-triggered capture of fixed-length windows from a stream.

use crate::data::{CsiSample, Provenance};
use crate::data::stream::Event;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default trigger threshold in amplitude units.
pub const DEFAULT_TAU: f64 = 20.0;
/// Default window: 5 s at 100 Hz.
pub const DEFAULT_WINDOW: usize = 500;
/// Default rolling-baseline length: 1 s at 100 Hz.
pub const DEFAULT_BASELINE_LEN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentParams {
    pub tau: f64,
    pub window: usize,
    pub baseline_len: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams {
            tau: DEFAULT_TAU,
            window: DEFAULT_WINDOW,
            baseline_len: DEFAULT_BASELINE_LEN,
        }
    }
}

/// Start indices of all triggered windows.
///
/// Scanning starts once a full baseline is available. At time `t` the
/// baseline of each link is the mean of samples `t - baseline_len .. t`; the
/// trigger fires when any link deviates from its baseline by more than
/// `tau`. A fired window covers `t .. t + window` and scanning resumes right
/// after it.
pub fn trigger_starts(stream: &Tensor<f32>, params: &SegmentParams) -> Result<Vec<usize>> {
    let &[a, s, len] = stream.dims() else {
        return Err(Error::shape(
            "segment_stream",
            format!("stream must be [A,S,L], got {:?}", stream.dims()),
        ));
    };
    if !(params.tau > 0.0) {
        return Err(Error::Invalid(format!("tau must be positive, got {}", params.tau)));
    }
    if params.window == 0 || params.baseline_len == 0 {
        return Err(Error::Invalid("window and baseline_len must be at least 1".into()));
    }
    if len < params.window {
        return Err(Error::Invalid(format!(
            "stream of {len} samples is shorter than the window of {}",
            params.window
        )));
    }
    let links = a * s;
    let x = stream.data();
    let bl = params.baseline_len;
    let mut sums = vec![0f64; links];
    let refill = |sums: &mut [f64], t: usize| {
        for (link, sum) in sums.iter_mut().enumerate() {
            let row = &x[link * len..(link + 1) * len];
            *sum = row[t - bl..t].iter().map(|&v| v as f64).sum();
        }
    };
    let mut starts = Vec::new();
    let mut t = bl;
    if t + params.window <= len {
        refill(&mut sums, t);
    }
    while t + params.window <= len {
        let fired = (0..links).any(|link| {
            let v = x[link * len + t] as f64;
            (v - sums[link] / bl as f64).abs() > params.tau
        });
        if fired {
            starts.push(t);
            t += params.window;
            if t + params.window <= len {
                refill(&mut sums, t);
            }
            continue;
        }
        for (link, sum) in sums.iter_mut().enumerate() {
            let row = &x[link * len..(link + 1) * len];
            *sum += row[t] as f64 - row[t - bl] as f64;
        }
        t += 1;
    }
    Ok(starts)
}

/// Cut triggered windows out of `stream` as unlabeled samples.
pub fn segment_stream(stream: &Tensor<f32>, params: &SegmentParams, stream_id: u32) -> Result<Vec<CsiSample>> {
    let starts = trigger_starts(stream, params)?;
    let &[a, s, len] = stream.dims() else { unreachable!() };
    let w = params.window;
    starts
        .into_iter()
        .map(|start| {
            let mut data = Vec::with_capacity(a * s * w);
            for link in 0..a * s {
                data.extend_from_slice(&stream.data()[link * len + start..link * len + start + w]);
            }
            Ok(CsiSample {
                values: Tensor::new(&[a, s, w], data)?,
                label: None,
                provenance: Some(Provenance {
                    stream: stream_id,
                    start: start as u64,
                }),
            })
        })
        .collect()
}

/// Label each segment with the class of the event it starts in (allowing the
/// trigger to fire up to `slack` samples after event onset). Segments that
/// start outside every event stay unlabeled.
pub fn label_from_events(samples: &mut [CsiSample], events: &[Event], slack: usize) {
    for sample in samples.iter_mut() {
        let Some(p) = sample.provenance else { continue };
        let start = p.start as usize;
        sample.label = events
            .iter()
            .find(|e| e.start <= start && start < e.end.min(e.start + slack + 1))
            .map(|e| e.class);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(a: usize, s: usize, len: usize, v: f32) -> Tensor<f32> {
        Tensor::full(&[a, s, len], v)
    }

    /// Direct recomputation of every rolling mean.
    fn brute_force(stream: &Tensor<f32>, p: &SegmentParams) -> Vec<usize> {
        let &[a, s, len] = stream.dims() else { panic!() };
        let mut out = Vec::new();
        let mut t = p.baseline_len;
        while t + p.window <= len {
            let mut hit = false;
            for link in 0..a * s {
                let row = &stream.data()[link * len..(link + 1) * len];
                let mean: f64 =
                    row[t - p.baseline_len..t].iter().map(|&v| v as f64).sum::<f64>() / p.baseline_len as f64;
                if (row[t] as f64 - mean).abs() > p.tau {
                    hit = true;
                }
            }
            if hit {
                out.push(t);
                t += p.window;
            } else {
                t += 1;
            }
        }
        out
    }

    #[test]
    fn constant_stream_never_triggers() {
        let p = SegmentParams { tau: 0.5, window: 50, baseline_len: 10 };
        assert!(trigger_starts(&flat(2, 3, 400, 37.0), &p).unwrap().is_empty());
    }

    #[test]
    fn single_burst_gives_one_segment_at_its_index() {
        let p = SegmentParams { tau: 20.0, window: 50, baseline_len: 10 };
        let mut x = flat(2, 3, 400, 30.0);
        let i = 137;
        x.data_mut()[4 * 400 + i] += 40.0;
        let starts = trigger_starts(&x, &p).unwrap();
        assert_eq!(starts, vec![i]);
        assert_eq!(starts, brute_force(&x, &p));
        let segs = segment_stream(&x, &p, 5).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].values.dims(), &[2, 3, 50]);
        assert_eq!(segs[0].values.data()[4 * 50], 70.0);
        assert_eq!(segs[0].provenance, Some(Provenance { stream: 5, start: i as u64 }));
        assert_eq!(segs[0].label, None);
    }

    #[test]
    fn short_stream_is_an_error() {
        let p = SegmentParams { tau: 1.0, window: 50, baseline_len: 10 };
        assert!(trigger_starts(&flat(1, 1, 49, 0.0), &p).is_err());
        assert!(trigger_starts(&flat(1, 1, 60, 0.0), &SegmentParams { tau: 0.0, ..p }).is_err());
    }

    #[test]
    fn defaults() {
        let p = SegmentParams::default();
        assert_eq!((p.tau, p.window, p.baseline_len), (20.0, 500, 100));
    }

    #[test]
    fn labels_follow_events() {
        let p = SegmentParams { tau: 15.0, window: 20, baseline_len: 10 };
        let mut x = flat(1, 2, 200, 10.0);
        for t in 50..65 {
            x.data_mut()[t] = 30.0;
        }
        x.data_mut()[120] = 40.0;
        let mut segs = segment_stream(&x, &p, 0).unwrap();
        let starts: Vec<_> = segs.iter().map(|s| s.provenance.unwrap().start).collect();
        assert_eq!(starts, vec![50, 120]);
        let events = [Event { start: 50, end: 65, class: 3 }];
        label_from_events(&mut segs, &events, 5);
        assert_eq!(segs[0].label, Some(3));
        assert_eq!(segs[1].label, None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn stream_with_bursts(len: usize, bursts: &[(usize, usize, f32)]) -> Tensor<f32> {
            let mut x = flat(1, 3, len, 20.0);
            for &(t, link, dv) in bursts {
                x.data_mut()[link * len + (t % len)] += dv;
            }
            x
        }

        proptest! {
            #[test]
            fn matches_brute_force(
                bursts in prop::collection::vec((0usize..600, 0usize..3, -60f32..60.0), 0..12),
                tau in 1.0f64..40.0,
            ) {
                let p = SegmentParams { tau, window: 40, baseline_len: 15 };
                let x = stream_with_bursts(600, &bursts);
                prop_assert_eq!(trigger_starts(&x, &p).unwrap(), brute_force(&x, &p));
            }

            #[test]
            fn shifting_the_stream_shifts_the_starts(
                bursts in prop::collection::vec((100usize..500, 0usize..3, 25f32..60.0), 1..6),
                k in 1usize..80,
            ) {
                let p = SegmentParams { tau: 20.0, window: 40, baseline_len: 15 };
                let x = stream_with_bursts(600, &bursts);
                let shifted: Vec<_> = bursts.iter().map(|&(t, l, v)| (t + k, l, v)).collect();
                let y = stream_with_bursts(600 + k, &shifted);
                let a = trigger_starts(&x, &p).unwrap();
                let b = trigger_starts(&y, &p).unwrap();
                prop_assert_eq!(b, a.iter().map(|s| s + k).collect::<Vec<_>>());
            }
        }
    }
}
