//! CSI samples: synthetic streams, threshold segmentation, view
//! augmentation and dataset files.

mod augment;
mod benchmark;
mod io;
mod segment;
mod stream;

pub use augment::{amplitude_std, augment_view, perturb, ViewPair};
pub use benchmark::{
    benchmark_signatures, build_benchmark, labeled_segments, unlabeled_segments, Benchmark,
    BenchmarkConfig,
};
pub use io::{
    decode_dataset, decode_labels, encode_dataset, encode_labels, read_dataset, read_labeled,
    write_dataset, write_labels,
};
pub use segment::{
    label_from_events, segment_stream, trigger_starts, SegmentParams, DEFAULT_BASELINE_LEN,
    DEFAULT_TAU, DEFAULT_WINDOW,
};
pub use stream::{
    events_from_jsonl, events_to_jsonl, generate_stream, ClassSignature, Event,
    SignatureComponent, Stream, StreamConfig,
};

use crate::numerics::Tensor;

/// Where a segment was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub stream: u32,
    pub start: u64,
}

/// One amplitude window, `[antennas, subcarriers, time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiSample {
    pub values: Tensor<f32>,
    pub label: Option<u32>,
    pub provenance: Option<Provenance>,
}

impl CsiSample {
    pub fn unlabeled(values: Tensor<f32>) -> Self {
        CsiSample {
            values,
            label: None,
            provenance: None,
        }
    }

    pub fn labeled(values: Tensor<f32>, label: u32) -> Self {
        CsiSample {
            values,
            label: Some(label),
            provenance: None,
        }
    }
}
