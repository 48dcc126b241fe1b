//! Desk-scale phantom experiment: dual-window training against the
//! single-window baseline and an untrained encoder, over several seeds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ViewMode};
use crate::error::Result;
use crate::eval::{evaluate, EvalConfig};
use crate::imaging::{sample_dataset, SamplingOptions, SliceRecord, Split};
use crate::metrics::{mean_std, MeanStd};
use crate::phantom::{generate_corpus, PhantomConfig};
use crate::ssl::{train, EncoderSpec, HeadSpec, LossMode, ModelSpec, SimSiamModel, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_volumes: usize,
    pub n_train_volumes: usize,
    pub phantom: PhantomConfig,
    pub phantom_seed: u64,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides the batch-size learning-rate formula (ablations only).
    pub lr: Option<f64>,
    pub channels: Vec<usize>,
    pub out_dim: usize,
    pub d_proj: usize,
    pub augment: AugmentConfig,
    pub k: usize,
    /// Masks per saliency map for relevance rank; 0 disables it.
    pub rr_n_masks: usize,
    pub rr_images: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let phantom = PhantomConfig::default();
        let size = phantom.size;
        Self {
            n_volumes: 20,
            n_train_volumes: 15,
            phantom,
            phantom_seed: 2024,
            seeds: vec![0, 1, 2],
            epochs: 50,
            batch_size: 32,
            lr: None,
            channels: vec![8, 16, 32, 64],
            out_dim: 64,
            d_proj: 64,
            augment: AugmentConfig {
                out_size: (size, size),
                ..Default::default()
            },
            k: 5,
            rr_n_masks: 500,
            rr_images: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub map: f64,
    pub knn_accuracy: f64,
    pub relevance_rank: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub map: MeanStd,
    pub knn_accuracy: MeanStd,
    pub relevance_rank: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub n_train: usize,
    pub n_test: usize,
    pub runs: Vec<RunResult>,
    pub dual_clip: ArmSummary,
    pub single_clip: ArmSummary,
    pub random: ArmSummary,
}

fn summarize(runs: &[RunResult], arm: &str) -> ArmSummary {
    let pick: Vec<&RunResult> = runs.iter().filter(|r| r.arm == arm).collect();
    let rr: Option<Vec<f64>> = pick.iter().map(|r| r.relevance_rank).collect();
    ArmSummary {
        map: mean_std(&pick.iter().map(|r| r.map).collect::<Vec<_>>()),
        knn_accuracy: mean_std(&pick.iter().map(|r| r.knn_accuracy).collect::<Vec<_>>()),
        relevance_rank: rr.map(|v| mean_std(&v)),
    }
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            encoder: EncoderSpec::tiny_conv(self.channels.clone(), self.out_dim),
            head: HeadSpec::new(self.d_proj),
            input_size: self.augment.out_size,
            loss_mode: LossMode::Simsiam,
        }
    }

    pub fn train_config(&self, seed: u64, mode: ViewMode) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            seed,
            view_mode: mode,
            augment: self.augment.clone(),
            ..Default::default()
        }
    }

    /// Train and test records of the phantom corpus.
    pub fn dataset(&self) -> Result<(Vec<SliceRecord>, Vec<SliceRecord>)> {
        let volumes = generate_corpus(self.n_volumes, &self.phantom, self.phantom_seed)?;
        let (_, records) = sample_dataset(&volumes, self.n_train_volumes, self.phantom_seed, SamplingOptions::default())?;
        let (train, test): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.split == Split::Train);
        Ok((train, test))
    }
}

/// Runs every arm for every seed. `progress` receives each finished run.
pub fn run_experiment(cfg: &ExperimentConfig, mut progress: impl FnMut(&RunResult)) -> Result<ExperimentResult> {
    let (train_set, test_set) = cfg.dataset()?;
    let eval_cfg = EvalConfig {
        k: cfg.k,
        rr_n_masks: cfg.rr_n_masks,
        rr_max_images: Some(cfg.rr_images),
        ..Default::default()
    };
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for (arm, mode) in [("random", None), ("dual_clip", Some(ViewMode::DualClip)), ("single_clip", Some(ViewMode::SingleClip))] {
            let start = Instant::now();
            let init = SimSiamModel::new(cfg.model_spec(), seed)?;
            let (model, final_loss) = match mode {
                None => (init, None),
                Some(mode) => {
                    let out = train(&train_set, init, &cfg.train_config(seed, mode), None)?;
                    let last = out.log.last().map(|e| e.loss);
                    (out.model, last)
                }
            };
            let report = evaluate(&model, &format!("{arm}-{seed}"), &train_set, &test_set, &EvalConfig { seed, ..eval_cfg.clone() })?;
            let run = RunResult {
                arm: arm.to_string(),
                seed,
                map: report.map,
                knn_accuracy: report.knn_accuracy,
                relevance_rank: report.relevance_rank,
                final_loss,
                seconds: start.elapsed().as_secs_f64(),
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(ExperimentResult {
        n_train: train_set.len(),
        n_test: test_set.len(),
        dual_clip: summarize(&runs, "dual_clip"),
        single_clip: summarize(&runs, "single_clip"),
        random: summarize(&runs, "random"),
        runs,
    })
}
