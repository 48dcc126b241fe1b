use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use super::model::{EncoderInit, ModelSpec, SimSiamModel, Sgd};
use crate::augment::{make_views, AugmentConfig, ViewMode};
use crate::error::{Error, Result};
use crate::imaging::SliceRecord;
use crate::nn::Parameters;
use crate::seed::derive_rng;

/// Below this mean per-dimension std of normalized `z` an epoch counts as collapsed.
pub const COLLAPSE_STD: f64 = 1e-4;
/// Consecutive collapsed epochs before the warning fires.
pub const COLLAPSE_EPOCHS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Constant learning rate; `0.05 * batch_size / 256` when absent.
    pub lr: Option<f64>,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub view_mode: ViewMode,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 250,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr: None,
            seed: 0,
            checkpoint_every: 0,
            view_mode: ViewMode::DualClip,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(0.05 * self.batch_size as f64 / 256.0)
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        let lr = self.effective_lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::invalid(format!("invalid learning rate {lr}")));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("momentum must be in [0, 1) and weight_decay >= 0"));
        }
        self.augment.validate()?;
        if self.augment.out_size != spec.input_size {
            return Err(Error::invalid(format!(
                "augment.out_size {:?} differs from the model input size {:?}",
                self.augment.out_size, spec.input_size
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub embedding_std: f64,
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub embedding_std: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SimSiamModel,
    pub log: Vec<EpochLog>,
    pub collapse_warning: bool,
    /// Final checkpoint and its fingerprint, when an output directory was given.
    pub checkpoint: Option<(PathBuf, String)>,
}

/// Builds the initial model. An `imagenet_pretrained` encoder takes its
/// weights from `pretrained`, which must have the same encoder architecture.
pub fn init_model(spec: ModelSpec, seed: u64, pretrained: Option<&Checkpoint>) -> Result<SimSiamModel> {
    let mut model = SimSiamModel::new(spec, seed)?;
    match (model.spec.encoder.init, pretrained) {
        (EncoderInit::Random, None) => {}
        (EncoderInit::Random, Some(_)) => {
            return Err(Error::invalid("a pretrained checkpoint was given but encoder.init is random"));
        }
        (EncoderInit::ImagenetPretrained, None) => {
            return Err(Error::invalid(
                "encoder.init is imagenet_pretrained but no pretrained checkpoint was supplied",
            ));
        }
        (EncoderInit::ImagenetPretrained, Some(ck)) => {
            let src = &ck.model.spec.encoder;
            let dst = &model.spec.encoder;
            if src.kind != dst.kind || src.channels != dst.channels || src.out_dim != dst.out_dim {
                return Err(Error::invalid("pretrained encoder architecture differs from the requested one"));
            }
            model.encoder = ck.model.encoder.clone();
        }
    }
    Ok(model)
}

/// One optimizer step on already augmented views.
pub fn step_on_views(
    model: &mut SimSiamModel,
    opt: &mut Sgd,
    v1: &[Array3<f64>],
    v2: &[Array3<f64>],
) -> Result<StepStats> {
    let out = model.loss_and_grad(v1, v2)?;
    if out.loss.is_finite() && out.grads.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite())) {
        opt.step(model, &out.grads);
    }
    Ok(StepStats {
        loss: out.loss,
        embedding_std: out.embedding_std,
    })
}

/// Augments each HU slice twice with `rng` and takes one step.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut SimSiamModel,
    opt: &mut Sgd,
    batch: &[ArrayView2<'_, i16>],
    augment: &AugmentConfig,
    mode: ViewMode,
    rng: &mut R,
) -> Result<StepStats> {
    let mut v1 = Vec::with_capacity(batch.len());
    let mut v2 = Vec::with_capacity(batch.len());
    for hu in batch {
        let (a, b) = make_views(*hu, augment, mode, rng)?;
        v1.push(a);
        v2.push(b);
    }
    step_on_views(model, opt, &v1, &v2)
}

struct LogSink {
    file: Option<fs::File>,
    path: PathBuf,
}

impl LogSink {
    fn open(out_dir: Option<&Path>) -> Result<Self> {
        match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                Ok(Self { file: Some(file), path })
            }
            None => Ok(Self {
                file: None,
                path: PathBuf::new(),
            }),
        }
    }

    fn write(&mut self, entry: &EpochLog) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(entry)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Trains `model` on the given slices. With `out_dir`, writes
/// `train_log.jsonl`, optional `checkpoint_epoch_NNNN.ckpt` files and the
/// final `model.ckpt`.
pub fn train(
    records: &[SliceRecord],
    mut model: SimSiamModel,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate(&model.spec)?;
    if records.len() < 2 {
        return Err(Error::invalid("training needs at least 2 slices"));
    }
    let lr = cfg.effective_lr();
    let mut opt = Sgd::new(lr, cfg.momentum, cfg.weight_decay);
    let mut sink = LogSink::open(out_dir)?;
    let meta_train = serde_json::to_value(cfg)?;
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut collapsed_run = 0;
    let mut collapse_warning = false;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let epoch_tag = epoch.to_string();
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut shuffle_rng: ChaCha8Rng = derive_rng(cfg.seed, &["shuffle", &epoch_tag]);
        order.shuffle(&mut shuffle_rng);

        let (mut loss_sum, mut std_sum, mut n_batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            step += 1;
            let views: Vec<(Array3<f64>, Array3<f64>)> = chunk
                .par_iter()
                .map(|&i| {
                    let rec = &records[i];
                    let mut rng: ChaCha8Rng = derive_rng(cfg.seed, &["views", &epoch_tag, &rec.slice_id]);
                    make_views(rec.hu.view(), &cfg.augment, cfg.view_mode, &mut rng)
                })
                .collect::<Result<_>>()?;
            let (v1, v2): (Vec<_>, Vec<_>) = views.into_iter().unzip();
            let stats = match step_on_views(&mut model, &mut opt, &v1, &v2) {
                Ok(s) => s,
                Err(Error::NumericDegeneracy(_)) => StepStats {
                    loss: f64::NAN,
                    embedding_std: 0.0,
                },
                Err(e) => return Err(e),
            };
            if !stats.loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    step,
                    loss: stats.loss,
                    embedding_std: stats.embedding_std,
                    lr,
                });
            }
            loss_sum += stats.loss;
            std_sum += stats.embedding_std;
            n_batches += 1;
        }
        if n_batches == 0 {
            return Err(Error::invalid("no batch with at least 2 slices"));
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n_batches as f64,
            embedding_std: std_sum / n_batches as f64,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        tracing::info!(epoch, loss = entry.loss, embedding_std = entry.embedding_std, "epoch done");
        sink.write(&entry)?;

        if entry.embedding_std < COLLAPSE_STD {
            collapsed_run += 1;
            if collapsed_run == COLLAPSE_EPOCHS {
                collapse_warning = true;
                tracing::warn!(
                    epoch,
                    embedding_std = entry.embedding_std,
                    "representation collapse: embedding std below {COLLAPSE_STD} for {COLLAPSE_EPOCHS} epochs"
                );
            }
        } else {
            collapsed_run = 0;
        }
        log.push(entry);

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
                let meta = CheckpointMeta {
                    model: model.spec.clone(),
                    train: Some(meta_train.clone()),
                    epoch,
                };
                save_checkpoint(&dir.join(format!("checkpoint_epoch_{epoch:04}.ckpt")), &model, &meta)?;
            }
        }
    }

    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("model.ckpt");
            let meta = CheckpointMeta {
                model: model.spec.clone(),
                train: Some(meta_train),
                epoch: cfg.epochs,
            };
            let fp = save_checkpoint(&path, &model, &meta)?;
            Some((path, fp))
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        log,
        collapse_warning,
        checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Split;
    use crate::ssl::model::{EncoderSpec, HeadSpec, LossMode};
    use ndarray::Array2;

    fn spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderSpec::tiny_conv(vec![4], 8),
            head: HeadSpec::new(8),
            input_size: (16, 16),
            loss_mode: LossMode::Simsiam,
        }
    }

    fn records(n: usize) -> Vec<SliceRecord> {
        (0..n)
            .map(|k| SliceRecord {
                slice_id: format!("v:{k:04}"),
                volume_id: "v".into(),
                slice_index: k,
                hu: Array2::from_shape_fn((24, 24), |(y, x)| ((y * 7 + x * (k + 1)) % 300) as i16 - 100),
                liver_label: k % 2 == 0,
                liver_mask: None,
                split: Split::Train,
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            augment: AugmentConfig {
                out_size: (16, 16),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn default_lr_scales_with_batch() {
        assert!((TrainConfig::default().effective_lr() - 0.00625).abs() < 1e-15);
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let recs = records(9);
        let dir = tempfile::tempdir().unwrap();
        let a = train(&recs, SimSiamModel::new(spec(), 1).unwrap(), &cfg(), Some(dir.path())).unwrap();
        let b = train(&recs, SimSiamModel::new(spec(), 1).unwrap(), &cfg(), None).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log.len(), 2);
        let text = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: EpochLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.epoch, 1);
        let (path, fp) = a.checkpoint.unwrap();
        let ck = crate::ssl::load_checkpoint(&path).unwrap();
        assert_eq!(ck.fingerprint, fp);
        assert_eq!(ck.model, a.model);
        assert_ne!(a.model, SimSiamModel::new(spec(), 1).unwrap());
    }

    #[test]
    fn zero_lr_training_keeps_weights() {
        let recs = records(6);
        let m0 = SimSiamModel::new(spec(), 2).unwrap();
        let mut c = cfg();
        c.lr = Some(0.0);
        let out = train(&recs, m0.clone(), &c, None).unwrap();
        assert_eq!(out.model, m0);
    }

    #[test]
    fn pretrained_init_copies_encoder() {
        let donor = SimSiamModel::new(spec(), 7).unwrap();
        let ck = Checkpoint {
            meta: CheckpointMeta {
                model: donor.spec.clone(),
                train: None,
                epoch: 0,
            },
            model: donor.clone(),
            fingerprint: String::new(),
        };
        let mut s = spec();
        s.encoder.init = EncoderInit::ImagenetPretrained;
        let m = init_model(s.clone(), 1, Some(&ck)).unwrap();
        assert_eq!(m.encoder, donor.encoder);
        assert_ne!(m.projector, donor.projector);
        assert!(init_model(s, 1, None).is_err());
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let mut c = cfg();
        c.augment.out_size = (8, 8);
        assert!(train(&records(4), SimSiamModel::new(spec(), 1).unwrap(), &c, None).is_err());
    }
}
