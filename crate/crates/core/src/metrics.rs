//! Retrieval and representation scores: precision@k, MAP, kNN accuracy and
//! relevance rank.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::embed_index::{cosine, EmbeddingStore};
use crate::error::{Error, Result};

/// Fraction of relevant items among the first `k`.
pub fn precision_at_k(hits: &[bool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if k > hits.len() {
        return Err(Error::invalid(format!("k = {k} but only {} hits", hits.len())));
    }
    Ok(hits[..k].iter().filter(|&&h| h).count() as f64 / k as f64)
}

/// Mean of precision@k' for k' = 1..=k.
pub fn average_precision(hits: &[bool], k: usize) -> Result<f64> {
    if k == 0 || k > hits.len() {
        return Err(Error::invalid(format!("k = {k} with {} hits", hits.len())));
    }
    let mut relevant = 0usize;
    let mut sum = 0.0;
    for (i, &h) in hits[..k].iter().enumerate() {
        relevant += h as usize;
        sum += relevant as f64 / (i + 1) as f64;
    }
    Ok(sum / k as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapDatabase {
    /// Each test slice queries all other test slices.
    #[default]
    TestLoo,
    /// Test slices query the train slices.
    Train,
}

impl std::str::FromStr for MapDatabase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test_loo" | "test-loo" => Ok(Self::TestLoo),
            "train" => Ok(Self::Train),
            other => Err(Error::invalid(format!("unknown MAP database {other:?} (test_loo or train)"))),
        }
    }
}

/// Ranked neighbours of `q` in `db` (positions into `db`), excluding `exclude`.
fn ranked(db: &EmbeddingStore, q: &[f32], exclude: Option<usize>, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..db.len())
        .filter(|&i| Some(i) != exclude)
        .map(|i| (cosine(q, db.entry(i).vector), i))
        .collect();
    scored.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| db.entry(a.1).slice_id.cmp(db.entry(b.1).slice_id))
    });
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

fn check_pair(a: &EmbeddingStore, b: &EmbeddingStore) -> Result<()> {
    if a.fingerprint() != b.fingerprint() {
        return Err(Error::StoreConsistency(format!(
            "stores come from different models ({} vs {})",
            a.fingerprint(),
            b.fingerprint()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::StoreConsistency(format!("dimensions differ ({} vs {})", a.dim(), b.dim())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub slice_id: String,
    pub liver_label: bool,
    pub average_precision: f64,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapOutcome {
    pub map: f64,
    pub per_query: Vec<QueryScore>,
}

/// MAP@k with label match as relevance. `train` is required for
/// [`MapDatabase::Train`].
pub fn mean_average_precision(
    test: &EmbeddingStore,
    train: Option<&EmbeddingStore>,
    k: usize,
    database: MapDatabase,
) -> Result<MapOutcome> {
    if test.is_empty() {
        return Err(Error::invalid("no query slices"));
    }
    let (db, loo) = match database {
        MapDatabase::TestLoo => (test, true),
        MapDatabase::Train => {
            let train = train.ok_or_else(|| Error::invalid("the train database needs a train store"))?;
            check_pair(test, train)?;
            (train, false)
        }
    };
    let available = db.len() - loo as usize;
    if available < k {
        return Err(Error::invalid(format!("only {available} candidates per query, k = {k}")));
    }
    let mut per_query = Vec::with_capacity(test.len());
    for qi in 0..test.len() {
        let q = test.entry(qi);
        let hits = ranked(db, q.vector, loo.then_some(qi), k);
        let labels: Vec<bool> = hits.iter().map(|&i| db.entry(i).liver_label == q.liver_label).collect();
        per_query.push(QueryScore {
            slice_id: q.slice_id.to_string(),
            liver_label: q.liver_label,
            average_precision: average_precision(&labels, k)?,
            retrieved: hits.iter().map(|&i| db.entry(i).slice_id.to_string()).collect(),
        });
    }
    let map = per_query.iter().map(|q| q.average_precision).sum::<f64>() / per_query.len() as f64;
    Ok(MapOutcome { map, per_query })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnPrediction {
    pub slice_id: String,
    pub liver_label: bool,
    pub predicted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnOutcome {
    pub accuracy: f64,
    pub predictions: Vec<KnnPrediction>,
}

/// Majority vote over the `k` most similar train entries; a tied vote goes to
/// the label of the single nearest neighbour.
pub fn knn_accuracy(train: &EmbeddingStore, test: &EmbeddingStore, k: usize) -> Result<KnnOutcome> {
    check_pair(test, train)?;
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if k == 0 || train.len() < k {
        return Err(Error::invalid(format!("k = {k} with {} train entries", train.len())));
    }
    let mut predictions = Vec::with_capacity(test.len());
    for q in test.entries() {
        let nn = ranked(train, q.vector, None, k);
        let pos = nn.iter().filter(|&&i| train.entry(i).liver_label).count();
        let neg = nn.len() - pos;
        let predicted = match pos.cmp(&neg) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => train.entry(nn[0]).liver_label,
        };
        predictions.push(KnnPrediction {
            slice_id: q.slice_id.to_string(),
            liver_label: q.liver_label,
            predicted,
        });
    }
    let correct = predictions.iter().filter(|p| p.predicted == p.liver_label).count();
    Ok(KnnOutcome {
        accuracy: correct as f64 / predictions.len() as f64,
        predictions,
    })
}

/// Share of the mask covered by the `|S|` most important pixels. Equal
/// importances are ordered row-major.
pub fn relevance_rank<T: Copy + Into<f64>>(r: ArrayView2<'_, f64>, s: ArrayView2<'_, T>) -> Result<f64> {
    if r.dim() != s.dim() {
        return Err(Error::invalid(format!("map {:?} and mask {:?} differ in shape", r.dim(), s.dim())));
    }
    let inside: Vec<bool> = s.iter().map(|&v| v.into() != 0.0).collect();
    let m = inside.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::Undefined("relevance rank needs a nonempty mask".into()));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("importance map has non-finite entries"));
    }
    let values: Vec<f64> = r.iter().copied().collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let overlap = order[..m].iter().filter(|&&i| inside[i]).count();
    Ok(overlap as f64 / m as f64)
}

/// Mean relevance rank over images with nonempty masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSummary {
    pub mean: f64,
    pub n_images: usize,
    /// Images excluded because their mask was empty.
    pub n_undefined: usize,
}

pub fn summarize_relevance(scores: &[Result<f64>]) -> Result<RelevanceSummary> {
    let mut sum = 0.0;
    let (mut n, mut undefined) = (0, 0);
    for s in scores {
        match s {
            Ok(v) => {
                sum += v;
                n += 1;
            }
            Err(Error::Undefined(_)) => undefined += 1,
            Err(e) => return Err(Error::invalid(e.to_string())),
        }
    }
    if n == 0 {
        return Err(Error::Undefined("no image with a nonempty mask".into()));
    }
    Ok(RelevanceSummary {
        mean: sum / n as f64,
        n_images: n,
        n_undefined: undefined,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    pub slice_id: String,
    pub liver_label: bool,
    pub average_precision: f64,
    pub knn_predicted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relevance_rank: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub knn_accuracy: f64,
    /// Absent when no test slice had a liver mask or RR was disabled.
    pub relevance_rank: Option<f64>,
    pub k: usize,
    pub n_queries: usize,
    pub seed: u64,
    pub database: MapDatabase,
    pub model_fingerprint: String,
    pub rr_images: usize,
    pub rr_undefined: usize,
    pub rr_n_masks: usize,
    pub per_query: Vec<PerQuery>,
}

impl EvalReport {
    /// JSON with keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("slice_id,liver_label,average_precision,knn_predicted,relevance_rank\n");
        for q in &self.per_query {
            let rr = q.relevance_rank.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                q.slice_id, q.liver_label as u8, q.average_precision, q.knn_predicted as u8, rr
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

/// Reports of several runs (training seeds) folded into mean and std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub map: MeanStd,
    pub knn_accuracy: MeanStd,
    pub relevance_rank: Option<MeanStd>,
    pub n_runs: usize,
    pub runs: Vec<EvalReport>,
}

impl AggregateReport {
    pub fn from_runs(runs: Vec<EvalReport>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::invalid("no runs to aggregate"));
        }
        let pick = |f: fn(&EvalReport) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
        let rr: Option<Vec<f64>> = runs.iter().map(|r| r.relevance_rank).collect();
        Ok(Self {
            map: pick(|r| r.map),
            knn_accuracy: pick(|r| r.knn_accuracy),
            relevance_rank: rr.map(|v| mean_std(&v)),
            n_runs: runs.len(),
            runs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }
}
