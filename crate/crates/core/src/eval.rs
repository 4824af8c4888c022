//! N-way K-shot episode evaluation.
//!
//! Each episode draws `n_way` classes, then `k_shot` support and `q_query`
//! query samples per class, disjointly. A learner fits on the support set
//! and labels the queries; accuracy is averaged over episodes with a
//! normal-approximation 95% interval.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CsiSample;
use crate::error::{Error, Result};
use crate::fsc::{compute_prototypes, predict_embedding};
use crate::model::{init_encoder, EncoderArch};
use crate::numerics::ParamSet;
use crate::trainer::{train_fsc, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub n_episodes: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_query == 0 || self.n_episodes == 0 {
            return Err(Error::Invalid(format!(
                "n_way, k_shot, q_query and n_episodes must all be at least 1, got {}/{}/{}/{}",
                self.n_way, self.k_shot, self.q_query, self.n_episodes
            )));
        }
        Ok(())
    }
}

/// Dataset indices of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub index: usize,
    pub classes: Vec<u32>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

fn by_class(samples: &[CsiSample]) -> BTreeMap<u32, Vec<usize>> {
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if let Some(c) = s.label {
            out.entry(c).or_default().push(i);
        }
    }
    out
}

/// Classes with enough samples for `spec`, or an error naming every class
/// that falls short.
pub fn eligible_classes(samples: &[CsiSample], spec: &EpisodeSpec) -> Result<Vec<u32>> {
    spec.validate()?;
    let need = spec.k_shot + spec.q_query;
    let groups = by_class(samples);
    let (ok, short): (Vec<_>, Vec<_>) = groups.iter().partition(|(_, v)| v.len() >= need);
    if ok.len() < spec.n_way {
        let listed: Vec<String> = short.iter().map(|(c, v)| format!("class {c} has {}", v.len())).collect();
        return Err(Error::Invalid(format!(
            "episodes need {} classes with at least {need} samples each, found {}; deficient: [{}]",
            spec.n_way,
            ok.len(),
            listed.join(", ")
        )));
    }
    Ok(ok.into_iter().map(|(c, _)| *c).collect())
}

/// Episode `index`, seeded by `spec.seed + index`. Depends only on the
/// labels and the spec.
pub fn sample_episode(samples: &[CsiSample], spec: &EpisodeSpec, index: usize) -> Result<Episode> {
    let eligible = eligible_classes(samples, spec)?;
    let groups = by_class(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(index as u64));
    let mut picked: Vec<u32> = index::sample(&mut rng, eligible.len(), spec.n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    let (mut support, mut query) = (Vec::new(), Vec::new());
    for c in &picked {
        let mut members = groups[c].clone();
        members.shuffle(&mut rng);
        support.extend_from_slice(&members[..spec.k_shot]);
        query.extend_from_slice(&members[spec.k_shot..spec.k_shot + spec.q_query]);
    }
    Ok(Episode {
        index,
        classes: picked,
        support,
        query,
    })
}

/// Anything that can be fitted on a labeled support set and then label
/// queries.
pub trait EpisodeLearner {
    fn fit_predict(&self, support: &[CsiSample], queries: &[&CsiSample], episode: usize) -> Result<Vec<u32>>;
}

/// Where the calibration encoder comes from.
#[derive(Clone, Debug)]
pub enum EncoderInit {
    /// Pretrained weights, shared by every episode.
    Pretrained(ParamSet<f32>),
    /// Fresh random weights, seeded per episode.
    Scratch,
}

/// Calibration with the full two-layer objective, then nearest-prototype
/// prediction.
#[derive(Clone, Debug)]
pub struct FscLearner {
    pub encoder: EncoderArch,
    pub init: EncoderInit,
    pub config: TrainConfig,
}

impl EpisodeLearner for FscLearner {
    fn fit_predict(&self, support: &[CsiSample], queries: &[&CsiSample], episode: usize) -> Result<Vec<u32>> {
        let cfg = TrainConfig {
            seed: self.config.seed.wrapping_add(episode as u64),
            ..self.config.clone()
        };
        let enc = match &self.init {
            EncoderInit::Pretrained(p) => p.clone(),
            EncoderInit::Scratch => init_encoder(&self.encoder, cfg.seed)?,
        };
        let (model, _) = train_fsc(support, self.encoder.clone(), enc, &cfg)?;
        let xs: Vec<_> = queries.iter().map(|q| &q.values).collect();
        model.predict_batch(&xs)
    }
}

/// Nearest class mean under a fixed embedding function.
pub struct EmbeddingLearner<F>(pub F);

impl<F: Fn(&CsiSample) -> Vec<f64>> EpisodeLearner for EmbeddingLearner<F> {
    fn fit_predict(&self, support: &[CsiSample], queries: &[&CsiSample], _episode: usize) -> Result<Vec<u32>> {
        let labeled = support
            .iter()
            .map(|s| {
                let c = s.label.ok_or_else(|| Error::Invalid("support sample without label".into()))?;
                Ok(((self.0)(s), c))
            })
            .collect::<Result<Vec<_>>>()?;
        let protos = compute_prototypes(&labeled)?;
        queries.iter().map(|q| predict_embedding(&(self.0)(q), &protos)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Half-width of the 95% interval.
    pub ci95: f64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let ci95 = if accuracies.len() > 1 {
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        EvalReport { accuracies, mean, ci95 }
    }

    /// One `{"episode": n, "accuracy": a}` line per episode.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line {
            episode: usize,
            accuracy: f64,
        }
        self.accuracies
            .iter()
            .enumerate()
            .map(|(episode, &accuracy)| serde_json::to_string(&Line { episode, accuracy }).expect("serializes") + "\n")
            .collect()
    }
}

/// Run every episode of `spec` through `learner`.
pub fn evaluate_episodes(samples: &[CsiSample], learner: &dyn EpisodeLearner, spec: &EpisodeSpec) -> Result<EvalReport> {
    eligible_classes(samples, spec)?;
    let mut accs = Vec::with_capacity(spec.n_episodes);
    for e in 0..spec.n_episodes {
        let ep = sample_episode(samples, spec, e)?;
        let support: Vec<CsiSample> = ep.support.iter().map(|&i| samples[i].clone()).collect();
        let queries: Vec<&CsiSample> = ep.query.iter().map(|&i| &samples[i]).collect();
        let pred = learner.fit_predict(&support, &queries, e)?;
        let hits = pred.iter().zip(&queries).filter(|(p, q)| Some(**p) == q.label).count();
        accs.push(hits as f64 / queries.len() as f64);
    }
    Ok(EvalReport::from_accuracies(accs))
}

/// Uniformly random labels, used to check that evaluation sits at chance.
pub fn shuffle_labels(samples: &mut [CsiSample], seed: u64) {
    let mut labels: Vec<Option<u32>> = samples.iter().map(|s| s.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (s, l) in samples.iter_mut().zip(labels) {
        s.label = l;
    }
}
