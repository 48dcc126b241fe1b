//! End-to-end evaluation of one model: embed both splits, score retrieval,
//! kNN classification and saliency localization.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embed_index::{embed_records, preprocess, EmbeddingStore};
use crate::error::{Error, Result};
use crate::imaging::resize::resize;
use crate::imaging::{ClipWindow, SliceRecord};
use crate::metrics::{
    knn_accuracy, mean_average_precision, relevance_rank, summarize_relevance, EvalReport, MapDatabase, PerQuery,
};
use crate::relax::{generate_masks, relax_importance, MaskBatch, SaliencyMap, DEFAULT_GRID, DEFAULT_N_MASKS, DEFAULT_P};
use crate::ssl::SimSiamModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub database: MapDatabase,
    /// Seed of the saliency masks.
    pub seed: u64,
    /// Masks per saliency map; 0 skips relevance rank.
    pub rr_n_masks: usize,
    pub rr_grid: (usize, usize),
    pub rr_p: f64,
    /// Score at most this many test slices with a liver mask.
    pub rr_max_images: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            database: MapDatabase::TestLoo,
            seed: 0,
            rr_n_masks: DEFAULT_N_MASKS,
            rr_grid: DEFAULT_GRID,
            rr_p: DEFAULT_P,
            rr_max_images: None,
        }
    }
}

/// Importance map of one slice at model resolution.
pub fn explain_slice(model: &SimSiamModel, record: &SliceRecord, masks: &MaskBatch) -> Result<SaliencyMap> {
    let x = preprocess(record.hu.view(), ClipWindow::WIDE, model.input_size());
    relax_importance(model, x.view(), masks)
}

/// Saliency resampled to the slice grid so it lines up with the liver mask.
pub fn saliency_on_slice(map: &SaliencyMap, slice_shape: (usize, usize)) -> Array2<f64> {
    if map.r.dim() == slice_shape {
        map.r.clone()
    } else {
        resize(map.r.view(), slice_shape)
    }
}

/// Relevance rank of one slice; `Error::Undefined` when it has no liver pixels.
pub fn slice_relevance(model: &SimSiamModel, record: &SliceRecord, masks: &MaskBatch) -> Result<f64> {
    let mask = record
        .liver_mask
        .as_ref()
        .ok_or_else(|| Error::Undefined(format!("{} has no liver mask", record.slice_id)))?;
    if mask.iter().all(|&v| v == 0) {
        return Err(Error::Undefined(format!("{} has an empty liver mask", record.slice_id)));
    }
    let map = explain_slice(model, record, masks)?;
    relevance_rank(saliency_on_slice(&map, record.hu.dim()).view(), mask.view())
}

pub struct Embedded {
    pub train: EmbeddingStore,
    pub test: EmbeddingStore,
}

pub fn embed_splits(model: &SimSiamModel, fingerprint: &str, train: &[SliceRecord], test: &[SliceRecord]) -> Result<Embedded> {
    Ok(Embedded {
        train: embed_records(model, fingerprint, train, ClipWindow::WIDE)?,
        test: embed_records(model, fingerprint, test, ClipWindow::WIDE)?,
    })
}

/// Scores already embedded splits plus relevance rank on `test` records.
pub fn evaluate_stores(
    model: &SimSiamModel,
    stores: &Embedded,
    test: &[SliceRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let map = mean_average_precision(&stores.test, Some(&stores.train), cfg.k, cfg.database)?;
    let knn = knn_accuracy(&stores.train, &stores.test, cfg.k)?;

    // (slice id, relevance rank or None when the slice has no liver)
    let mut rr_scores: Vec<(String, Option<f64>)> = Vec::new();
    if cfg.rr_n_masks > 0 {
        let masks = generate_masks(cfg.rr_n_masks, cfg.rr_grid, cfg.rr_p, model.input_size(), cfg.seed)?;
        let limit = cfg.rr_max_images.unwrap_or(usize::MAX);
        let mut scored = 0;
        for rec in test {
            let has_liver = rec.liver_mask.as_ref().is_some_and(|m| m.iter().any(|&v| v != 0));
            if has_liver && scored >= limit {
                continue;
            }
            let score = match slice_relevance(model, rec, &masks) {
                Ok(v) => Some(v),
                Err(Error::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            scored += score.is_some() as usize;
            rr_scores.push((rec.slice_id.clone(), score));
        }
    }
    let rr_results: Vec<Result<f64>> = rr_scores
        .iter()
        .map(|(id, r)| r.ok_or_else(|| Error::Undefined(id.clone())))
        .collect();
    let rr_summary = match summarize_relevance(&rr_results) {
        Ok(s) => Some(s),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };

    let per_query = map
        .per_query
        .iter()
        .zip(&knn.predictions)
        .map(|(q, p)| PerQuery {
            slice_id: q.slice_id.clone(),
            liver_label: q.liver_label,
            average_precision: q.average_precision,
            knn_predicted: p.predicted,
            relevance_rank: rr_scores.iter().find(|(id, _)| *id == q.slice_id).and_then(|(_, r)| *r),
        })
        .collect();

    Ok(EvalReport {
        map: map.map,
        knn_accuracy: knn.accuracy,
        relevance_rank: rr_summary.map(|s| s.mean),
        k: cfg.k,
        n_queries: stores.test.len(),
        seed: cfg.seed,
        database: cfg.database,
        model_fingerprint: stores.test.fingerprint().to_string(),
        rr_images: rr_summary.map_or(0, |s| s.n_images),
        rr_undefined: rr_summary.map_or(0, |s| s.n_undefined),
        rr_n_masks: cfg.rr_n_masks,
        per_query,
    })
}

/// Embeds both splits with `model` and scores them.
pub fn evaluate(
    model: &SimSiamModel,
    fingerprint: &str,
    train: &[SliceRecord],
    test: &[SliceRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let stores = embed_splits(model, fingerprint, train, test)?;
    evaluate_stores(model, &stores, test, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{sample_dataset, SamplingOptions, Split};
    use crate::phantom::{generate_corpus, PhantomConfig};
    use crate::ssl::{EncoderSpec, HeadSpec, LossMode, ModelSpec};

    #[test]
    fn report_on_small_phantom() {
        let cfg = PhantomConfig {
            size: 24,
            depth: 14,
            liver_slices: (6, 8),
            ..Default::default()
        };
        let vols = generate_corpus(4, &cfg, 0).unwrap();
        let (_, records) = sample_dataset(&vols, 3, 0, SamplingOptions::default()).unwrap();
        let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
        let test: Vec<_> = records.iter().filter(|r| r.split == Split::Test).cloned().collect();
        let spec = ModelSpec {
            encoder: EncoderSpec::tiny_conv(vec![4], 8),
            head: HeadSpec::new(8),
            input_size: (24, 24),
            loss_mode: LossMode::Simsiam,
        };
        let model = SimSiamModel::new(spec, 0).unwrap();
        let ecfg = EvalConfig {
            rr_n_masks: 8,
            rr_grid: (3, 3),
            ..Default::default()
        };
        let r = evaluate(&model, "fp", &train, &test, &ecfg).unwrap();
        assert_eq!(r.n_queries, 10);
        assert_eq!(r.rr_images, 5);
        assert_eq!(r.rr_undefined, 5);
        for v in [r.map, r.knn_accuracy, r.relevance_rank.unwrap()] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert_eq!(r, evaluate(&model, "fp", &train, &test, &ecfg).unwrap());
    }
}
