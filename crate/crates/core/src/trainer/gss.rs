use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::state::{
    get_count, get_encoder_meta, get_scalar, get_velocity, put_branch, put_encoder_meta, put_scalar,
};
use super::{check_grads, clip_grads, sgd_step, stream_rng, GssRecord, RunLog, TrainConfig};
use crate::data::{amplitude_std, perturb, CsiSample};
use crate::error::{Error, Result};
use crate::gss::{marginal_entropy, GssBatch, GssObjective};
use crate::model::{
    encode_backward, encode_traced, init_encoder, init_projector, project, project_backward,
    project_traced, stack, validate_params, EncoderArch, HeadTrace, ProjectorArch,
};
use crate::numerics::{ParamSet, ProbBatch, Tensor};

const SHUFFLE: u8 = 0;
const NOISE: u8 = 1;

/// Twin encoders and projectors of the pretraining stage.
#[derive(Clone, Debug, PartialEq)]
pub struct GssModel {
    pub encoder: EncoderArch,
    pub projector: ProjectorArch,
    pub enc1: ParamSet<f32>,
    pub enc2: ParamSet<f32>,
    pub proj1: ParamSet<f32>,
    pub proj2: ParamSet<f32>,
}

impl GssModel {
    /// Both branches share an architecture but draw their weights from
    /// different seeds.
    pub fn init(encoder: EncoderArch, projector_dim: usize, seed: u64) -> Result<Self> {
        let projector = ProjectorArch {
            out_dim: projector_dim,
            ..ProjectorArch::new(encoder.feature_dim()?)
        };
        let seeds: [u64; 4] = ChaCha8Rng::seed_from_u64(seed).random();
        Ok(GssModel {
            enc1: init_encoder(&encoder, seeds[0])?,
            enc2: init_encoder(&encoder, seeds[1])?,
            proj1: init_projector(&projector, seeds[2]),
            proj2: init_projector(&projector, seeds[3]),
            encoder,
            projector,
        })
    }

    pub fn branch(&self, branch: u8) -> Result<(&ParamSet<f32>, &ParamSet<f32>)> {
        match branch {
            1 => Ok((&self.enc1, &self.proj1)),
            2 => Ok((&self.enc2, &self.proj2)),
            b => Err(Error::Invalid(format!("branch must be 1 or 2, got {b}"))),
        }
    }

    /// Projector output of one branch for clean (unaugmented) samples.
    pub fn probs(&self, branch: u8, samples: &[&Tensor<f32>]) -> Result<ProbBatch> {
        let (enc, proj) = self.branch(branch)?;
        let mut rows = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let feats = chunk
                .iter()
                .map(|x| encode_traced(&self.encoder, enc, x).map(|t| t.feature()))
                .collect::<Result<Vec<_>>>()?;
            let p = project(&self.projector, proj, &stack(&feats)?)?;
            rows.extend(p.iter_rows().map(<[f64]>::to_vec));
        }
        ProbBatch::from_rows(&rows)
    }

    /// `h(mean P)` of one branch over a whole dataset.
    pub fn marginal_entropy(&self, branch: u8, data: &[CsiSample]) -> Result<f64> {
        let xs: Vec<&Tensor<f32>> = data.iter().map(|s| &s.values).collect();
        Ok(marginal_entropy(&self.probs(branch, &xs)?))
    }

    fn checkpoint_into(&self, out: &mut ParamSet<f32>, velocity: Option<&[ParamSet<f32>; 4]>) -> Result<()> {
        put_encoder_meta(out, &self.encoder)?;
        out.insert(
            "meta.projector",
            Tensor::from_vec(vec![self.projector.hidden as f32, self.projector.out_dim as f32]),
        )?;
        let parts = [("enc1", &self.enc1), ("enc2", &self.enc2), ("proj1", &self.proj1), ("proj2", &self.proj2)];
        for (i, (prefix, p)) in parts.into_iter().enumerate() {
            put_branch(out, prefix, p, velocity.map(|v| &v[i]))?;
        }
        Ok(())
    }

    /// Weights and architecture only.
    pub fn to_checkpoint(&self) -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        self.checkpoint_into(&mut out, None)?;
        Ok(out)
    }

    pub fn from_checkpoint(ckpt: &ParamSet<f32>) -> Result<Self> {
        let encoder = get_encoder_meta(ckpt)?;
        let dims = ckpt.get("meta.projector")?.data();
        let &[hidden, out_dim] = dims else {
            return Err(Error::Format("meta.projector must hold [hidden, out_dim]".into()));
        };
        let projector = ProjectorArch {
            input: encoder.feature_dim()?,
            hidden: hidden as usize,
            out_dim: out_dim as usize,
        };
        let enc_shapes = encoder.param_shapes()?;
        let proj_shapes = projector.param_shapes();
        let take = |prefix: &str, shapes: &[(String, Vec<usize>)]| -> Result<ParamSet<f32>> {
            let p = ckpt.extract(prefix);
            validate_params(shapes, &p).map_err(|e| Error::Format(format!("`{prefix}`: {e}")))?;
            Ok(p)
        };
        Ok(GssModel {
            enc1: take("enc1", &enc_shapes)?,
            enc2: take("enc2", &enc_shapes)?,
            proj1: take("proj1", &proj_shapes)?,
            proj2: take("proj2", &proj_shapes)?,
            encoder,
            projector,
        })
    }
}

/// Encoder of one pretrained branch, ready to initialize calibration.
pub fn transfer(ckpt: &ParamSet<f32>, branch: u8) -> Result<(EncoderArch, ParamSet<f32>)> {
    if !matches!(branch, 1 | 2) {
        return Err(Error::Invalid(format!("branch must be 1 or 2, got {branch}")));
    }
    let arch = get_encoder_meta(ckpt)?;
    let prefix = format!("enc{branch}");
    let enc = ckpt.extract(&prefix);
    validate_params(&arch.param_shapes()?, &enc).map_err(|e| Error::Format(format!("`{prefix}`: {e}")))?;
    Ok((arch, enc))
}

/// Stateful pretraining loop. Keeps the momentum buffers and epoch counter
/// so that training can be checkpointed and resumed.
#[derive(Clone, Debug)]
pub struct GssTrainer {
    cfg: TrainConfig,
    model: GssModel,
    velocity: [ParamSet<f32>; 4],
    epsilon: f64,
    epoch: usize,
}

struct Branch<'a> {
    traces: Vec<crate::model::EncoderTrace<f32>>,
    head: HeadTrace<f32>,
    enc: &'a ParamSet<f32>,
    proj: &'a ParamSet<f32>,
}

impl GssTrainer {
    /// Fresh model; the noise scale is resolved against `data` when the
    /// config leaves it open.
    pub fn new(cfg: TrainConfig, encoder: EncoderArch, data: &[CsiSample]) -> Result<Self> {
        cfg.validate()?;
        let model = GssModel::init(encoder, cfg.projector_dim, cfg.seed)?;
        let epsilon = cfg.epsilon.unwrap_or_else(|| 0.05 * amplitude_std(data));
        // Checkpoints store it as f32; round now so resumed runs see the same value.
        let epsilon = epsilon as f32 as f64;
        Ok(Self::with_model(cfg, model, epsilon))
    }

    fn with_model(cfg: TrainConfig, model: GssModel, epsilon: f64) -> Self {
        let velocity = [
            model.enc1.zeros_like(),
            model.enc2.zeros_like(),
            model.proj1.zeros_like(),
            model.proj2.zeros_like(),
        ];
        GssTrainer {
            cfg,
            model,
            velocity,
            epsilon,
            epoch: 0,
        }
    }

    /// Continue from a checkpoint written by [`GssTrainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ckpt: &ParamSet<f32>) -> Result<Self> {
        cfg.validate()?;
        let model = GssModel::from_checkpoint(ckpt)?;
        if model.projector.out_dim != cfg.projector_dim {
            return Err(Error::Invalid(format!(
                "checkpoint projector has {} outputs, config asks for {}",
                model.projector.out_dim, cfg.projector_dim
            )));
        }
        let epsilon = get_scalar(ckpt, "meta.epsilon")?;
        let mut t = Self::with_model(cfg, model, epsilon);
        t.velocity = [
            get_velocity(ckpt, "enc1", &t.model.enc1)?,
            get_velocity(ckpt, "enc2", &t.model.enc2)?,
            get_velocity(ckpt, "proj1", &t.model.proj1)?,
            get_velocity(ckpt, "proj2", &t.model.proj2)?,
        ];
        t.epoch = get_count(ckpt, "state.epoch")?;
        Ok(t)
    }

    pub fn model(&self) -> &GssModel {
        &self.model
    }

    pub fn into_model(self) -> GssModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Full training state: weights, momentum buffers, noise scale, epoch.
    pub fn checkpoint(&self) -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        self.model.checkpoint_into(&mut out, Some(&self.velocity))?;
        put_scalar(&mut out, "meta.epsilon", self.epsilon)?;
        put_scalar(&mut out, "state.epoch", self.epoch as f64)?;
        Ok(out)
    }

    fn check_data(&self, data: &[CsiSample]) -> Result<()> {
        if data.len() < self.cfg.batch_size {
            return Err(Error::Invalid(format!(
                "{} samples cannot fill one batch of {}",
                data.len(),
                self.cfg.batch_size
            )));
        }
        if let Some(i) = data.iter().position(|s| s.values.dims() != self.model.encoder.input) {
            return Err(Error::shape(
                "train_gss",
                format!(
                    "sample {i} is {:?}, encoder expects {:?}",
                    data[i].values.dims(),
                    self.model.encoder.input
                ),
            ));
        }
        Ok(())
    }

    /// One pass over `data` in a seeded order. The trailing partial batch is
    /// dropped. If any step fails the model is rolled back to the start of
    /// the epoch.
    pub fn run_epoch(&mut self, data: &[CsiSample]) -> Result<GssRecord> {
        self.check_data(data)?;
        let (seed, epoch, b) = (self.cfg.seed, self.epoch, self.cfg.batch_size);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(seed, SHUFFLE, epoch, 0));
        let batches = data.len() / b;
        let lr = self.cfg.lr_at(epoch);
        let snapshot = (self.model.clone(), self.velocity.clone());
        let mut sums = [0f64; 5];
        for bi in 0..batches {
            let mut rng = stream_rng(seed, NOISE, epoch, bi);
            let mut v1 = Vec::with_capacity(b);
            let mut v2 = Vec::with_capacity(b);
            for &i in &order[bi * b..(bi + 1) * b] {
                v1.push(perturb(&data[i].values, self.epsilon, &mut rng));
                v2.push(perturb(&data[i].values, self.epsilon, &mut rng));
            }
            match self.step(&v1, &v2, lr) {
                Ok(r) => sums.iter_mut().zip(r).for_each(|(s, v)| *s += v),
                Err(e) => {
                    (self.model, self.velocity) = snapshot;
                    return Err(match e {
                        Error::NonFinite(what) => {
                            Error::NonFinite(format!("{what} (epoch {}, batch {bi})", epoch + 1))
                        }
                        other => other,
                    });
                }
            }
        }
        self.epoch += 1;
        let n = batches as f64;
        Ok(GssRecord {
            epoch: self.epoch,
            prob: sums[0] / n,
            mutual_info: sums[1] / n,
            geometric: sums[2] / n,
            total: sums[3] / n,
            marginal_entropy: sums[4] / n,
        })
    }

    fn forward<'a>(&self, enc: &'a ParamSet<f32>, proj: &'a ParamSet<f32>, views: &[Tensor<f32>]) -> Result<Branch<'a>> {
        let traces = views
            .iter()
            .map(|x| encode_traced(&self.model.encoder, enc, x))
            .collect::<Result<Vec<_>>>()?;
        let feats = stack(&traces.iter().map(|t| t.feature()).collect::<Vec<_>>())?;
        let head = project_traced(&self.model.projector, proj, &feats)?;
        Ok(Branch { traces, head, enc, proj })
    }

    fn backward(&self, br: &Branch, grad_p: &[f64]) -> Result<(ParamSet<f32>, ParamSet<f32>)> {
        let mut gp = br.proj.zeros_like();
        let df = project_backward(br.proj, &br.head, grad_p, &mut gp)?;
        let mut ge = br.enc.zeros_like();
        for (i, t) in br.traces.iter().enumerate() {
            encode_backward(&self.model.encoder, br.enc, t, df.row(i), &mut ge, false)?;
        }
        Ok((ge, gp))
    }

    /// One update on a batch of view pairs. Returns the loss terms, total
    /// and marginal entropy.
    fn step(&mut self, v1: &[Tensor<f32>], v2: &[Tensor<f32>], lr: f64) -> Result<[f64; 5]> {
        let objective = GssObjective {
            lambda: self.cfg.lambda,
            gamma: self.cfg.gamma,
            mi_sign: self.cfg.mi_sign,
        };
        let (mut g, h) = {
            let b1 = self.forward(&self.model.enc1, &self.model.proj1, v1)?;
            let b2 = self.forward(&self.model.enc2, &self.model.proj2, v2)?;
            let batch = GssBatch::new(b1.head.probs.clone(), b2.head.probs.clone())?;
            let loss = objective.evaluate(&batch)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite("pretraining loss".into()));
            }
            let (ge1, gp1) = self.backward(&b1, &loss.grad_p1)?;
            let (ge2, gp2) = self.backward(&b2, &loss.grad_p2)?;
            let c = loss.components;
            let h = 0.5 * (marginal_entropy(&batch.p1) + marginal_entropy(&batch.p2));
            ([ge1, ge2, gp1, gp2], [c.prob, c.mutual_info, c.geometric, loss.total, h])
        };
        let m = &mut self.model;
        let (mom, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let targets = [&mut m.enc1, &mut m.enc2, &mut m.proj1, &mut m.proj2];
        // Validate every gradient before touching any branch.
        for (grad, p) in g.iter().zip(&targets) {
            check_grads(grad, p)?;
        }
        clip_grads(&mut g.iter_mut().collect::<Vec<_>>(), self.cfg.clip_norm);
        for ((p, grad), v) in targets.into_iter().zip(&g).zip(self.velocity.iter_mut()) {
            sgd_step(p, grad, v, lr, mom, wd)?;
        }
        Ok(h)
    }

    /// Train until `cfg.gss_epochs` epochs are complete, appending one
    /// record per epoch to `log`.
    pub fn fit(&mut self, data: &[CsiSample], log: &mut RunLog<GssRecord>) -> Result<()> {
        let (start, base) = (Instant::now(), log.wall_seconds);
        while self.epoch < self.cfg.gss_epochs {
            let r = self.run_epoch(data);
            log.wall_seconds = base + start.elapsed().as_secs_f64();
            log.records.push(r?);
        }
        Ok(())
    }
}

/// Pretrain a fresh model on unlabeled samples.
pub fn train_gss(data: &[CsiSample], encoder: EncoderArch, cfg: &TrainConfig) -> Result<(GssModel, RunLog<GssRecord>)> {
    let mut trainer = GssTrainer::new(cfg.clone(), encoder, data)?;
    let mut log = RunLog::new();
    trainer.fit(data, &mut log)?;
    Ok((trainer.into_model(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{checkpoint, encode};
    use crate::trainer::fixtures::{samples, tiny_arch};

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            gss_epochs: 4,
            projector_dim: 6,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn bytes(p: &ParamSet<f32>) -> Vec<u8> {
        checkpoint::encode_checkpoint(p).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = samples(20, 3, 0);
        let c = TrainConfig { gss_epochs: 0, ..cfg() };
        let (m, log) = train_gss(&data, tiny_arch(), &c).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(m, GssModel::init(tiny_arch(), 6, 5).unwrap());
    }

    #[test]
    fn branches_start_different() {
        let m = GssModel::init(tiny_arch(), 6, 5).unwrap();
        assert_ne!(m.enc1, m.enc2);
        assert_ne!(m.proj1, m.proj2);
    }

    #[test]
    fn same_seed_same_log_and_weights() {
        let data = samples(20, 3, 0);
        let (a, la) = train_gss(&data, tiny_arch(), &cfg()).unwrap();
        let (b, lb) = train_gss(&data, tiny_arch(), &cfg()).unwrap();
        assert_eq!(la.to_jsonl(), lb.to_jsonl());
        assert_eq!(bytes(&a.to_checkpoint().unwrap()), bytes(&b.to_checkpoint().unwrap()));
        assert_eq!(la.records.len(), 4);
        for (i, r) in la.records.iter().enumerate() {
            assert_eq!(r.epoch, i + 1);
            assert!(r.total.is_finite());
        }
        let (c, _) = train_gss(&data, tiny_arch(), &TrainConfig { seed: 6, ..cfg() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = samples(20, 3, 1);
        let mut full = GssTrainer::new(cfg(), tiny_arch(), &data).unwrap();
        let mut full_log = RunLog::new();
        full.fit(&data, &mut full_log).unwrap();

        let mut first = GssTrainer::new(TrainConfig { gss_epochs: 2, ..cfg() }, tiny_arch(), &data).unwrap();
        let mut log = RunLog::new();
        first.fit(&data, &mut log).unwrap();
        let saved = bytes(&first.checkpoint().unwrap());
        let ckpt = checkpoint::decode_checkpoint(&saved).unwrap();
        let mut second = GssTrainer::resume(cfg(), &ckpt).unwrap();
        assert_eq!(second.epoch(), 2);
        second.fit(&data, &mut log).unwrap();
        assert_eq!(log.to_jsonl(), full_log.to_jsonl());
        assert_eq!(bytes(&second.checkpoint().unwrap()), bytes(&full.checkpoint().unwrap()));
    }

    #[test]
    fn transfer_selects_branch() {
        let data = samples(16, 2, 2);
        let (m, _) = train_gss(&data, tiny_arch(), &TrainConfig { gss_epochs: 1, ..cfg() }).unwrap();
        let ckpt = m.to_checkpoint().unwrap();
        let x = &data[3].values;
        for (b, enc) in [(1, &m.enc1), (2, &m.enc2)] {
            let (arch, theta) = transfer(&ckpt, b).unwrap();
            assert_eq!(arch, tiny_arch());
            assert_eq!(encode(&arch, &theta, x).unwrap(), encode(&arch, enc, x).unwrap());
        }
        assert!(transfer(&ckpt, 3).is_err());
        let mut broken = ParamSet::new();
        for (name, p) in ckpt.iter() {
            if name != "enc1.conv2.bias" {
                broken.insert(name, p.value.clone()).unwrap();
            }
        }
        assert!(transfer(&broken, 1).is_err());
        assert!(transfer(&broken, 2).is_ok());
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_last_good_state() {
        let mut data = samples(16, 2, 3);
        let mut t = GssTrainer::new(TrainConfig { epsilon: Some(0.1), ..cfg() }, tiny_arch(), &data).unwrap();
        t.run_epoch(&data).unwrap();
        let good = t.checkpoint().unwrap();
        data[5].values.data_mut()[7] = f32::INFINITY;
        let err = t.run_epoch(&data).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert_eq!(t.epoch(), 1);
        assert_eq!(bytes(&t.checkpoint().unwrap()), bytes(&good));
    }

    #[test]
    fn small_dataset_rejected() {
        let data = samples(5, 2, 0);
        assert!(train_gss(&data, tiny_arch(), &cfg()).is_err());
    }

    #[test]
    fn epsilon_defaults_to_fraction_of_spread() {
        let data = samples(16, 2, 0);
        let t = GssTrainer::new(cfg(), tiny_arch(), &data).unwrap();
        assert!((t.epsilon() - 0.05 * amplitude_std(&data)).abs() < 1e-7);
    }
}
