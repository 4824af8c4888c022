//! Optimization of both stages: self-supervised pretraining of the twin
//! branches, encoder transfer, and supervised calibration on a support set.

mod fsc;
mod gss;
mod state;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fsc::{train_fsc, FscModel, FscTrainer, Prediction};
pub use gss::{train_gss, transfer, GssModel, GssTrainer};
pub use state::{arch_from_tensor, arch_to_tensor};

use crate::error::{Error, Result};
use crate::gss::MiSign;
use crate::numerics::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub gss_epochs: usize,
    pub fsc_epochs: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Augmentation noise scale. `None` picks 5% of the dataset's amplitude
    /// standard deviation.
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub mi_sign: MiSign,
    /// Width `D` of the projector output.
    pub projector_dim: usize,
    /// Keep the encoder fixed during calibration.
    pub freeze_encoder: bool,
    /// L2 penalty added to every gradient; 0 disables it.
    pub weight_decay: f64,
    /// Learning-rate multiplier applied after every epoch; 1 disables it.
    pub lr_decay: f64,
    /// Which pretrained branch initializes calibration.
    pub branch: u8,
    /// Rescale each step's gradients so their joint L2 norm is at most this;
    /// `None` disables clipping. Calibration with the prototype loss
    /// diverges in most few-shot episodes without it.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 128,
            gss_epochs: 300,
            fsc_epochs: 100,
            lambda: 1.0,
            gamma: 1000.0,
            epsilon: None,
            seed: 0,
            mi_sign: MiSign::Corrected,
            projector_dim: 32,
            freeze_encoder: false,
            weight_decay: 0.0,
            lr_decay: 1.0,
            branch: 1,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return bad("lambda and gamma must be nonnegative".into());
        }
        if let Some(e) = self.epsilon {
            if !(e >= 0.0) || !e.is_finite() {
                return bad(format!("epsilon must be finite and nonnegative, got {e}"));
            }
        }
        if self.projector_dim < 2 {
            return bad(format!("projector_dim must be at least 2, got {}", self.projector_dim));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if !matches!(self.branch, 1 | 2) {
            return bad(format!("branch must be 1 or 2, got {}", self.branch));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Classical momentum: `v <- momentum * v + g; p <- p - lr * v`.
///
/// Every gradient is checked before anything is modified, so a non-finite
/// gradient leaves both `params` and `velocity` untouched. Frozen
/// parameters are skipped.
pub fn sgd_step(
    params: &mut ParamSet<f32>,
    grads: &ParamSet<f32>,
    velocity: &mut ParamSet<f32>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name)?;
        let v = velocity.get(name)?;
        if g.dims() != p.value.dims() || v.dims() != p.value.dims() {
            return Err(Error::shape(
                "sgd_step",
                format!("`{name}` is {:?}, gradient {:?}, velocity {:?}", p.value.dims(), g.dims(), v.dims()),
            ));
        }
        if p.trainable && !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let g = grads.get(name)?;
        let v = velocity.get_mut(name)?;
        for ((pv, vv), &gv) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Reject non-finite gradients of trainable parameters before any update.
pub(crate) fn check_grads(grads: &ParamSet<f32>, params: &ParamSet<f32>) -> Result<()> {
    for (name, g) in grads.iter() {
        if params.param(name).is_some_and(|p| p.trainable) && !g.value.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    Ok(())
}

/// Scale all gradients by one common factor so that their joint L2 norm
/// does not exceed `max_norm`. Returns the norm before clipping.
pub fn clip_grads(grads: &mut [&mut ParamSet<f32>], max_norm: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|(_, p)| p.value.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let k = (max / norm) as f32;
            for g in grads.iter_mut() {
                for (_, p) in g.iter_mut() {
                    p.value.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
    }
    norm
}

/// Independent random stream for one `(domain, epoch, index)` triple, so
/// that shuffles and augmentation noise never depend on how far a run has
/// progressed in the same process.
pub(crate) fn stream_rng(seed: u64, domain: u8, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) | ((epoch as u64 & 0xff_ffff) << 32) | (index as u64 & 0xffff_ffff));
    rng
}

/// One pretraining epoch: batch means of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GssRecord {
    pub epoch: usize,
    pub prob: f64,
    pub mutual_info: f64,
    pub geometric: f64,
    pub total: f64,
    /// Entropy of the mean projector output, averaged over batches and
    /// branches.
    pub marginal_entropy: f64,
}

/// One calibration epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscRecord {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub proto: f64,
    pub total: f64,
}

/// Per-epoch records plus wall time. Only the records go into the JSON-lines
/// output, so logs of identical runs compare byte for byte.
#[derive(Clone, Debug, Default)]
pub struct RunLog<R> {
    pub records: Vec<R>,
    pub wall_seconds: f64,
}

impl<R: Serialize> RunLog<R> {
    pub fn new() -> Self {
        RunLog {
            records: Vec::new(),
            wall_seconds: 0.0,
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}
