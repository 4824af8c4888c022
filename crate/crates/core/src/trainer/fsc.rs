use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::state::{
    get_count, get_encoder_meta, get_velocity, put_branch, put_encoder_meta, put_scalar,
};
use super::{check_grads, clip_grads, sgd_step, stream_rng, FscRecord, RunLog, TrainConfig};
use crate::data::CsiSample;
use crate::error::{Error, Result};
use crate::fsc::{compute_prototypes, fsc_objective, predict_embedding, proto_posterior, PrototypeSet};
use crate::model::{
    classify, classify_backward, classify_traced, encode, encode_backward, encode_traced,
    init_classifier, stack, validate_params, ClassifierArch, EncoderArch,
};
use crate::numerics::{ParamSet, Tensor};

const CLASSIFIER_INIT: u8 = 2;

/// Largest class id that survives the float32 checkpoint encoding.
const MAX_CLASS_ID: u32 = 1 << 24;

/// Predicted class and the prototype posterior, in class-id order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub class: u32,
    pub posterior: Vec<f64>,
}

/// Calibrated encoder, classifier and class prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct FscModel {
    pub encoder: EncoderArch,
    pub classifier: ClassifierArch,
    pub enc: ParamSet<f32>,
    pub cls: ParamSet<f32>,
    pub prototypes: PrototypeSet,
}

fn embed_rows(emb: &Tensor<f32>) -> Vec<Vec<f64>> {
    let width = emb.dims()[1];
    emb.data()
        .chunks(width)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

fn put_classes(out: &mut ParamSet<f32>, classes: &[u32]) -> Result<()> {
    out.insert("meta.classes", Tensor::from_vec(classes.iter().map(|&c| c as f32).collect()))
}

fn get_classes(ckpt: &ParamSet<f32>) -> Result<Vec<u32>> {
    ckpt.get("meta.classes")?
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < MAX_CLASS_ID as f32 {
                Ok(v as u32)
            } else {
                Err(Error::Format(format!("meta.classes: {v} is not a class id")))
            }
        })
        .collect()
}

fn put_classifier_meta(out: &mut ParamSet<f32>, arch: &ClassifierArch) -> Result<()> {
    out.insert("meta.classifier", Tensor::from_vec(vec![arch.embed as f32, arch.classes as f32]))
}

fn get_classifier_meta(ckpt: &ParamSet<f32>, encoder: &EncoderArch) -> Result<ClassifierArch> {
    let &[embed, classes] = ckpt.get("meta.classifier")?.data() else {
        return Err(Error::Format("meta.classifier must hold [embed, classes]".into()));
    };
    Ok(ClassifierArch {
        input: encoder.feature_dim()?,
        embed: embed as usize,
        classes: classes as usize,
    })
}

fn take(ckpt: &ParamSet<f32>, prefix: &str, shapes: &[(String, Vec<usize>)]) -> Result<ParamSet<f32>> {
    let p = ckpt.extract(prefix);
    validate_params(shapes, &p).map_err(|e| Error::Format(format!("`{prefix}`: {e}")))?;
    Ok(p)
}

impl FscModel {
    pub fn classes(&self) -> &[u32] {
        self.prototypes.classes()
    }

    /// Classifier embeddings (post-ReLU hidden layer) for a batch.
    pub fn embed_batch(&self, xs: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(64) {
            let feats = chunk
                .iter()
                .map(|x| encode(&self.encoder, &self.enc, x))
                .collect::<Result<Vec<_>>>()?;
            let (emb, _) = classify(&self.classifier, &self.cls, &stack(&feats)?)?;
            out.extend(embed_rows(&emb));
        }
        Ok(out)
    }

    pub fn embed(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[x])?.remove(0))
    }

    /// Nearest prototype in embedding space.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Prediction> {
        let z = self.embed(x)?;
        Ok(Prediction {
            class: predict_embedding(&z, &self.prototypes)?,
            posterior: proto_posterior(&z, &self.prototypes)?,
        })
    }

    pub fn predict_batch(&self, xs: &[&Tensor<f32>]) -> Result<Vec<u32>> {
        self.embed_batch(xs)?
            .iter()
            .map(|z| predict_embedding(z, &self.prototypes))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        put_encoder_meta(&mut out, &self.encoder)?;
        put_classifier_meta(&mut out, &self.classifier)?;
        put_classes(&mut out, self.classes())?;
        put_branch(&mut out, "enc", &self.enc, None)?;
        put_branch(&mut out, "cls", &self.cls, None)?;
        let (k, d) = (self.prototypes.len(), self.prototypes.dim());
        let data = self.prototypes.centroids().iter().flatten().map(|&v| v as f32).collect();
        out.insert("proto.centroids", Tensor::new(&[k, d], data)?)?;
        Ok(out)
    }

    pub fn from_checkpoint(ckpt: &ParamSet<f32>) -> Result<Self> {
        let encoder = get_encoder_meta(ckpt)?;
        let classifier = get_classifier_meta(ckpt, &encoder)?;
        let classes = get_classes(ckpt)?;
        let c = ckpt.get("proto.centroids")?;
        if c.dims() != [classes.len(), classifier.embed] {
            return Err(Error::Format(format!(
                "proto.centroids is {:?}, expected [{}, {}]",
                c.dims(),
                classes.len(),
                classifier.embed
            )));
        }
        let centroids = c
            .data()
            .chunks(classifier.embed.max(1))
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        Ok(FscModel {
            enc: take(ckpt, "enc", &encoder.param_shapes()?)?,
            cls: take(ckpt, "cls", &classifier.param_shapes())?,
            prototypes: PrototypeSet::new(classes, centroids)?,
            encoder,
            classifier,
        })
    }
}

/// Stateful calibration loop over one support set. Every epoch is a single
/// full-batch step: prototypes are the class means of the current support
/// embeddings, and gradients flow through them.
#[derive(Clone, Debug)]
pub struct FscTrainer {
    cfg: TrainConfig,
    encoder: EncoderArch,
    classifier: ClassifierArch,
    enc: ParamSet<f32>,
    cls: ParamSet<f32>,
    v_enc: ParamSet<f32>,
    v_cls: ParamSet<f32>,
    classes: Vec<u32>,
    epoch: usize,
}

fn support_classes(support: &[CsiSample]) -> Result<Vec<u32>> {
    if support.is_empty() {
        return Err(Error::Invalid("support set is empty".into()));
    }
    let mut classes = Vec::new();
    for (i, s) in support.iter().enumerate() {
        match s.label {
            Some(c) if c < MAX_CLASS_ID => classes.push(c),
            Some(c) => return Err(Error::Invalid(format!("class id {c} is too large"))),
            None => return Err(Error::Invalid(format!("support sample {i} has no label"))),
        }
    }
    classes.sort_unstable();
    classes.dedup();
    Ok(classes)
}

impl FscTrainer {
    /// Start calibration from encoder weights `enc` (pretrained or fresh)
    /// and a freshly initialized classifier sized to the support classes.
    pub fn new(cfg: TrainConfig, encoder: EncoderArch, enc: ParamSet<f32>, support: &[CsiSample]) -> Result<Self> {
        cfg.validate()?;
        validate_params(&encoder.param_shapes()?, &enc)?;
        let classes = support_classes(support)?;
        let classifier = ClassifierArch::new(encoder.feature_dim()?, classes.len());
        let seed = stream_rng(cfg.seed, CLASSIFIER_INIT, 0, 0).random();
        let cls = init_classifier(&classifier, seed);
        Ok(Self::assemble(cfg, encoder, classifier, enc, cls, classes))
    }

    fn assemble(
        cfg: TrainConfig,
        encoder: EncoderArch,
        classifier: ClassifierArch,
        mut enc: ParamSet<f32>,
        cls: ParamSet<f32>,
        classes: Vec<u32>,
    ) -> Self {
        enc.set_trainable(!cfg.freeze_encoder);
        FscTrainer {
            v_enc: enc.zeros_like(),
            v_cls: cls.zeros_like(),
            cfg,
            encoder,
            classifier,
            enc,
            cls,
            classes,
            epoch: 0,
        }
    }

    pub fn resume(cfg: TrainConfig, ckpt: &ParamSet<f32>) -> Result<Self> {
        cfg.validate()?;
        let encoder = get_encoder_meta(ckpt)?;
        let classifier = get_classifier_meta(ckpt, &encoder)?;
        let classes = get_classes(ckpt)?;
        if classes.len() != classifier.classes {
            return Err(Error::Format("meta.classes does not match the classifier".into()));
        }
        let enc = take(ckpt, "enc", &encoder.param_shapes()?)?;
        let cls = take(ckpt, "cls", &classifier.param_shapes())?;
        let mut t = Self::assemble(cfg, encoder, classifier, enc, cls, classes);
        t.v_enc = get_velocity(ckpt, "enc", &t.enc)?;
        t.v_cls = get_velocity(ckpt, "cls", &t.cls)?;
        t.epoch = get_count(ckpt, "state.epoch")?;
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn checkpoint(&self) -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        put_encoder_meta(&mut out, &self.encoder)?;
        put_classifier_meta(&mut out, &self.classifier)?;
        put_classes(&mut out, &self.classes)?;
        put_branch(&mut out, "enc", &self.enc, Some(&self.v_enc))?;
        put_branch(&mut out, "cls", &self.cls, Some(&self.v_cls))?;
        put_scalar(&mut out, "state.epoch", self.epoch as f64)?;
        Ok(out)
    }

    fn label_indices(&self, support: &[CsiSample]) -> Result<Vec<usize>> {
        support
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let c = s
                    .label
                    .ok_or_else(|| Error::Invalid(format!("support sample {i} has no label")))?;
                self.classes
                    .binary_search(&c)
                    .map_err(|_| Error::Invalid(format!("support sample {i} has unknown class {c}")))
            })
            .collect()
    }

    /// One full-batch update on the support set.
    pub fn run_epoch(&mut self, support: &[CsiSample]) -> Result<FscRecord> {
        let labels = self.label_indices(support)?;
        let frozen = self.cfg.freeze_encoder;
        let traces = support
            .iter()
            .map(|s| encode_traced(&self.encoder, &self.enc, &s.values))
            .collect::<Result<Vec<_>>>()?;
        let feats = stack(&traces.iter().map(|t| t.feature()).collect::<Vec<_>>())?;
        let head = classify_traced(&self.classifier, &self.cls, &feats)?;
        let emb = embed_rows(head.hidden());
        let loss = fsc_objective(&head.probs, &emb, &labels)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("calibration loss (epoch {})", self.epoch + 1)));
        }
        let mut g_cls = self.cls.zeros_like();
        let flat: Vec<f64> = loss.grad_embeddings.concat();
        let df = classify_backward(&self.cls, &head, &loss.grad_probs, &flat, &mut g_cls)?;
        let mut g_enc = self.enc.zeros_like();
        if !frozen {
            for (i, t) in traces.iter().enumerate() {
                encode_backward(&self.encoder, &self.enc, t, df.row(i), &mut g_enc, false)?;
            }
        }
        check_grads(&g_enc, &self.enc)?;
        check_grads(&g_cls, &self.cls)?;
        clip_grads(&mut [&mut g_enc, &mut g_cls], self.cfg.clip_norm);
        let lr = self.cfg.lr_at(self.epoch);
        let (m, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        sgd_step(&mut self.cls, &g_cls, &mut self.v_cls, lr, m, wd)?;
        sgd_step(&mut self.enc, &g_enc, &mut self.v_enc, lr, m, wd)?;
        self.epoch += 1;
        Ok(FscRecord {
            epoch: self.epoch,
            cross_entropy: loss.cross_entropy,
            proto: loss.proto,
            total: loss.total,
        })
    }

    pub fn fit(&mut self, support: &[CsiSample], log: &mut RunLog<FscRecord>) -> Result<()> {
        let (start, base) = (Instant::now(), log.wall_seconds);
        while self.epoch < self.cfg.fsc_epochs {
            let r = self.run_epoch(support);
            log.wall_seconds = base + start.elapsed().as_secs_f64();
            log.records.push(r?);
        }
        Ok(())
    }

    /// Freeze the current weights into a model whose prototypes are the
    /// class means of the support embeddings.
    pub fn finish(&self, support: &[CsiSample]) -> Result<FscModel> {
        let mut model = FscModel {
            encoder: self.encoder.clone(),
            classifier: self.classifier,
            enc: self.enc.clone(),
            cls: self.cls.clone(),
            prototypes: PrototypeSet::new(self.classes.clone(), vec![vec![0.0; self.classifier.embed]; self.classes.len()])?,
        };
        model.enc.set_trainable(true);
        let xs: Vec<&Tensor<f32>> = support.iter().map(|s| &s.values).collect();
        let emb = model.embed_batch(&xs)?;
        let labeled: Vec<(Vec<f64>, u32)> = emb
            .into_iter()
            .zip(support)
            .map(|(z, s)| (z, s.label.expect("labels checked")))
            .collect();
        self.label_indices(support)?;
        model.prototypes = compute_prototypes(&labeled)?;
        Ok(model)
    }
}

/// Calibrate on `support` starting from encoder weights `enc`.
pub fn train_fsc(
    support: &[CsiSample],
    encoder: EncoderArch,
    enc: ParamSet<f32>,
    cfg: &TrainConfig,
) -> Result<(FscModel, RunLog<FscRecord>)> {
    let mut trainer = FscTrainer::new(cfg.clone(), encoder, enc, support)?;
    let mut log = RunLog::new();
    trainer.fit(support, &mut log)?;
    Ok((trainer.finish(support)?, log))
}
