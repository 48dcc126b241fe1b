//! Embedding store and exact cosine top-k retrieval.
//!
//! Store file layout:
//! ```text
//! "CBIRSTOR" | u32 version | u64 header_len | header JSON | f32 LE vectors | u64 LE checksum
//! ```
//! The checksum is the first 8 bytes of sha256 over header and vectors.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::resize::resize_chw;
use crate::imaging::{clip_and_scale, pseudo_rgb, ClipWindow, SliceRecord};
use crate::ssl::{write_atomic, Checkpoint, SimSiamModel};

const MAGIC: &[u8; 8] = b"CBIRSTOR";
const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    dim: usize,
    count: usize,
    ids: Vec<String>,
    labels: Vec<bool>,
    volume_ids: Vec<String>,
}

/// Vectors of one model, keyed by slice id. Entries keep insertion order.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    fingerprint: String,
    dim: usize,
    ids: Vec<String>,
    labels: Vec<bool>,
    volume_ids: Vec<String>,
    vectors: Vec<f32>,
    lookup: HashMap<String, usize>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
            && self.dim == other.dim
            && self.ids == other.ids
            && self.labels == other.labels
            && self.volume_ids == other.volume_ids
            && self.vectors.len() == other.vectors.len()
            && self.vectors.iter().zip(&other.vectors).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Borrowed view of one stored entry.
#[derive(Debug, Clone, Copy)]
pub struct Entry<'a> {
    pub slice_id: &'a str,
    pub liver_label: bool,
    pub volume_id: &'a str,
    pub vector: &'a [f32],
}

impl EmbeddingStore {
    pub fn new(fingerprint: impl Into<String>, dim: usize) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            dim,
            ..Default::default()
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, slice_id: &str) -> Option<usize> {
        self.lookup.get(slice_id).copied()
    }

    pub fn contains(&self, slice_id: &str) -> bool {
        self.lookup.contains_key(slice_id)
    }

    pub fn entry(&self, i: usize) -> Entry<'_> {
        Entry {
            slice_id: &self.ids[i],
            liver_label: self.labels[i],
            volume_id: &self.volume_ids[i],
            vector: &self.vectors[i * self.dim..(i + 1) * self.dim],
        }
    }

    pub fn get(&self, slice_id: &str) -> Option<Entry<'_>> {
        self.position(slice_id).map(|i| self.entry(i))
    }

    pub fn entries(&self) -> impl Iterator<Item = Entry<'_>> {
        (0..self.len()).map(|i| self.entry(i))
    }

    pub fn volume_ids(&self) -> impl Iterator<Item = &str> {
        self.volume_ids.iter().map(String::as_str)
    }

    pub fn push(&mut self, slice_id: &str, liver_label: bool, volume_id: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::invalid(format!(
                "vector for {slice_id} has length {}, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericDegeneracy(format!("non-finite embedding for {slice_id}")));
        }
        if self.lookup.contains_key(slice_id) {
            return Err(Error::DuplicateId(slice_id.to_string()));
        }
        self.lookup.insert(slice_id.to_string(), self.ids.len());
        self.ids.push(slice_id.to_string());
        self.labels.push(liver_label);
        self.volume_ids.push(volume_id.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    /// Appends every entry of `other`; both stores must come from the same model.
    /// On error `self` is left unchanged.
    pub fn append(&mut self, other: &EmbeddingStore) -> Result<()> {
        if other.fingerprint != self.fingerprint {
            return Err(Error::StoreConsistency(format!(
                "fingerprint {} does not match store fingerprint {}",
                other.fingerprint, self.fingerprint
            )));
        }
        if other.dim != self.dim {
            return Err(Error::StoreConsistency(format!("dim {} vs {}", other.dim, self.dim)));
        }
        if let Some(dup) = other.ids.iter().find(|id| self.lookup.contains_key(*id)) {
            return Err(Error::DuplicateId(dup.clone()));
        }
        let mut next = self.clone();
        for e in other.entries() {
            next.push(e.slice_id, e.liver_label, e.volume_id, e.vector)?;
        }
        *self = next;
        Ok(())
    }

    /// Entries whose volume id is `volume_id`.
    pub fn filter_volume(&self, volume_id: &str) -> EmbeddingStore {
        let mut out = EmbeddingStore::new(self.fingerprint.clone(), self.dim);
        for e in self.entries().filter(|e| e.volume_id == volume_id) {
            out.push(e.slice_id, e.liver_label, e.volume_id, e.vector).expect("entries already valid");
        }
        out
    }
}

/// Cosine similarity computed in double precision. A zero vector has
/// similarity 0 with everything.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub slice_id: String,
    pub similarity: f64,
    pub volume_id: String,
    pub liver_label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Slice id of the query when it came from the store.
    pub query_id: Option<String>,
    pub hits: Vec<Hit>,
    /// Number of hits returned after clamping.
    pub k: usize,
    /// True when fewer than the requested `k` candidates were available.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct QueryOptions<'a> {
    pub exclude_id: Option<&'a str>,
    /// Only entries of this volume are candidates.
    pub restrict_to: Option<&'a str>,
}

/// Exact top-k by cosine similarity; ties go to the smaller slice id.
pub fn query(store: &EmbeddingStore, q: &[f32], k: usize, opts: QueryOptions<'_>) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if q.len() != store.dim {
        return Err(Error::invalid(format!("query has dimension {}, store has {}", q.len(), store.dim)));
    }
    if !q.iter().all(|v| v.is_finite()) || q.iter().all(|&v| v == 0.0) {
        return Err(Error::NumericDegeneracy("query vector is zero or non-finite".into()));
    }
    let mut scored: Vec<(f64, usize)> = store
        .entries()
        .enumerate()
        .filter(|(_, e)| opts.exclude_id != Some(e.slice_id))
        .filter(|(_, e)| opts.restrict_to.is_none_or(|v| v == e.volume_id))
        .map(|(i, e)| (cosine(q, e.vector), i))
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| store.ids[a.1].cmp(&store.ids[b.1])));
    let clamped = k > scored.len();
    scored.truncate(k);
    let hits = scored
        .into_iter()
        .map(|(s, i)| {
            let e = store.entry(i);
            Hit {
                slice_id: e.slice_id.to_string(),
                similarity: s,
                volume_id: e.volume_id.to_string(),
                liver_label: e.liver_label,
            }
        })
        .collect::<Vec<_>>();
    Ok(RetrievalResult {
        query_id: None,
        k: hits.len(),
        hits,
        clamped,
    })
}

/// Query with a stored entry's own vector.
pub fn query_by_id(
    store: &EmbeddingStore,
    slice_id: &str,
    k: usize,
    exclude_self: bool,
    restrict_to: Option<&str>,
) -> Result<RetrievalResult> {
    let entry = store.get(slice_id).ok_or_else(|| Error::NotFound(slice_id.to_string()))?;
    let opts = QueryOptions {
        exclude_id: exclude_self.then_some(slice_id),
        restrict_to,
    };
    let mut result = query(store, entry.vector, k, opts)?;
    result.query_id = Some(slice_id.to_string());
    Ok(result)
}

/// Test-time input: wide window, pseudo-RGB, resized to the model input.
pub fn preprocess(hu: ArrayView2<'_, i16>, window: ClipWindow, input_size: (usize, usize)) -> Array3<f64> {
    let rgb = pseudo_rgb(clip_and_scale(hu, window).view());
    if rgb.dim().1 == input_size.0 && rgb.dim().2 == input_size.1 {
        rgb
    } else {
        resize_chw(rgb.view(), input_size)
    }
}

pub fn embed_slice(model: &SimSiamModel, hu: ArrayView2<'_, i16>, window: ClipWindow) -> Result<Vec<f32>> {
    let x = preprocess(hu, window, model.input_size());
    Ok(model.extract_h(x.view())?.iter().map(|&v| v as f32).collect())
}

/// Embeds records with `model` into a fresh store tagged with `fingerprint`.
pub fn embed_records(
    model: &SimSiamModel,
    fingerprint: &str,
    records: &[SliceRecord],
    window: ClipWindow,
) -> Result<EmbeddingStore> {
    let vectors: Vec<Vec<f32>> = records
        .par_iter()
        .map(|r| embed_slice(model, r.hu.view(), window))
        .collect::<Result<_>>()?;
    let mut store = EmbeddingStore::new(fingerprint, model.out_dim());
    for (r, v) in records.iter().zip(&vectors) {
        store.push(&r.slice_id, r.liver_label, &r.volume_id, v)?;
    }
    Ok(store)
}

/// Embeds records with the wide test-time window.
pub fn embed_dataset(checkpoint: &Checkpoint, records: &[SliceRecord]) -> Result<EmbeddingStore> {
    if records.is_empty() {
        return Err(Error::invalid("no records to embed"));
    }
    embed_records(&checkpoint.model, &checkpoint.fingerprint, records, ClipWindow::WIDE)
}

/// Embeds records and appends them to `store`, which must carry the
/// checkpoint's fingerprint.
pub fn embed_into(store: &mut EmbeddingStore, checkpoint: &Checkpoint, records: &[SliceRecord]) -> Result<()> {
    if store.fingerprint != checkpoint.fingerprint {
        return Err(Error::StoreConsistency(format!(
            "store was built with model {}, checkpoint is {}",
            store.fingerprint, checkpoint.fingerprint
        )));
    }
    let fresh = embed_records(&checkpoint.model, &checkpoint.fingerprint, records, ClipWindow::WIDE)?;
    store.append(&fresh)
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn encode_store(store: &EmbeddingStore) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        fingerprint: store.fingerprint.clone(),
        dim: store.dim,
        count: store.len(),
        ids: store.ids.clone(),
        labels: store.labels.clone(),
        volume_ids: store.volume_ids.clone(),
    })?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + store.vectors.len() * 4 + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &store.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let sum = checksum(&out[PREFIX..]);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode_store(bytes: &[u8]) -> Result<EmbeddingStore> {
    if bytes.len() < PREFIX {
        return Err(Error::format(bytes.len() as u64, "store truncated before header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(0, "not an embedding store (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported store version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(bytes.len() as u64, "store truncated inside header"))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| Error::format(PREFIX as u64 + e.column().saturating_sub(1) as u64, format!("bad header: {e}")))?;
    if header.ids.len() != header.count || header.labels.len() != header.count || header.volume_ids.len() != header.count {
        return Err(Error::format(PREFIX as u64, "header lists disagree with count"));
    }
    let blob_len = header
        .count
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(PREFIX as u64, "count * dim overflows"))?;
    let blob_end = header_end + blob_len;
    if bytes.len() < blob_end + 8 {
        return Err(Error::format(bytes.len() as u64, format!("store truncated: expected {} bytes", blob_end + 8)));
    }
    if bytes.len() > blob_end + 8 {
        return Err(Error::format((blob_end + 8) as u64, "trailing bytes after checksum"));
    }
    let stored = u64::from_le_bytes(bytes[blob_end..].try_into().expect("8 bytes"));
    let computed = checksum(&bytes[PREFIX..blob_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut store = EmbeddingStore::new(header.fingerprint, header.dim);
    store.vectors.reserve(header.count * header.dim);
    let floats: Vec<f32> = bytes[header_end..blob_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    for i in 0..header.count {
        store.push(
            &header.ids[i],
            header.labels[i],
            &header.volume_ids[i],
            &floats[i * header.dim..(i + 1) * header.dim],
        )?;
    }
    Ok(store)
}

pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    write_atomic(path, &encode_store(store)?)
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_store(rng: &mut impl Rng, n: usize, dim: usize) -> EmbeddingStore {
        let mut s = EmbeddingStore::new("fp", dim);
        for i in 0..n {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            s.push(&format!("s{i:03}"), rng.random_bool(0.5), &format!("vol{}", i % 3), &v).unwrap();
        }
        s
    }

    /// Selection-sort oracle: repeatedly take the best remaining entry.
    fn oracle(store: &EmbeddingStore, q: &[f32], k: usize) -> Vec<(String, f64)> {
        let mut pool: Vec<(String, f64)> = store
            .entries()
            .map(|e| {
                let dot: f64 = q.iter().zip(e.vector).map(|(&a, &b)| a as f64 * b as f64).sum();
                let nq: f64 = q.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                let ne: f64 = e.vector.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
                (e.slice_id.to_string(), dot / (nq * ne))
            })
            .collect();
        let mut out = Vec::new();
        while out.len() < k && !pool.is_empty() {
            let mut best = 0;
            for i in 1..pool.len() {
                if pool[i].1 > pool[best].1 || (pool[i].1 == pool[best].1 && pool[i].0 < pool[best].0) {
                    best = i;
                }
            }
            out.push(pool.remove(best));
        }
        out
    }

    #[test]
    fn self_retrieval_and_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_store(&mut rng, 20, 8);
        let v = s.entry(7).vector.to_vec();
        let r = query(&s, &v, 3, QueryOptions::default()).unwrap();
        assert_eq!(r.hits[0].slice_id, "s007");
        assert!((r.hits[0].similarity - 1.0).abs() < 1e-6);
        let all = query(&s, &v, 20, QueryOptions::default()).unwrap();
        assert_eq!(all.hits.len(), 20);
        assert!(!all.clamped);
        assert!(all.hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
        let more = query(&s, &v, 50, QueryOptions::default()).unwrap();
        assert!(more.clamped);
        assert_eq!(more.k, 20);
        let ex = query_by_id(&s, "s007", 20, true, None).unwrap();
        assert!(ex.hits.iter().all(|h| h.slice_id != "s007"));
        assert_eq!(ex.hits.len(), 19);
    }

    #[test]
    fn fifty_vector_store_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_store(&mut rng, 50, 16);
        let q: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let ids: Vec<_> = query(&s, &q, 5, QueryOptions::default()).unwrap().hits.into_iter().map(|h| h.slice_id).collect();
        let want: Vec<_> = oracle(&s, &q, 5).into_iter().map(|h| h.0).collect();
        assert_eq!(ids, want);
    }

    #[test]
    fn ties_break_by_slice_id() {
        let mut s = EmbeddingStore::new("fp", 2);
        s.push("b", true, "v", &[1.0, 0.0]).unwrap();
        s.push("a", true, "v", &[2.0, 0.0]).unwrap();
        s.push("c", true, "v", &[0.0, 1.0]).unwrap();
        let r = query(&s, &[1.0, 0.0], 3, QueryOptions::default()).unwrap();
        let ids: Vec<_> = r.hits.iter().map(|h| h.slice_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn errors() {
        let mut s = EmbeddingStore::new("fp", 2);
        s.push("a", true, "v1", &[1.0, 0.0]).unwrap();
        assert!(matches!(s.push("a", true, "v1", &[1.0, 0.0]), Err(Error::DuplicateId(_))));
        assert!(s.push("b", true, "v1", &[1.0]).is_err());
        assert!(query(&s, &[1.0, 0.0], 0, QueryOptions::default()).is_err());
        assert!(matches!(query(&s, &[0.0, 0.0], 1, QueryOptions::default()), Err(Error::NumericDegeneracy(_))));
        let opts = QueryOptions {
            restrict_to: Some("v2"),
            ..Default::default()
        };
        assert!(matches!(query(&s, &[1.0, 0.0], 1, opts), Err(Error::EmptyCandidates)));
        assert!(matches!(query_by_id(&s, "zz", 1, false, None), Err(Error::NotFound(_))));
        let other = EmbeddingStore::new("other", 2);
        assert!(matches!(s.clone().append(&other), Err(Error::StoreConsistency(_))));
    }

    #[test]
    fn round_trip_and_integrity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_store(&mut rng, 12, 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.store");
        save_store(&s, &p).unwrap();
        let back = load_store(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_store(&back).unwrap(), fs::read(&p).unwrap());

        let empty = EmbeddingStore::new("fp", 4);
        assert_eq!(decode_store(&encode_store(&empty).unwrap()).unwrap(), empty);

        let bytes = encode_store(&s).unwrap();
        let mut tampered = bytes.clone();
        let pos = bytes.windows(4).position(|w| w == b"\"fp\"").unwrap() + 1;
        tampered[pos] = b'g';
        assert!(matches!(decode_store(&tampered), Err(Error::Checksum { .. })));

        let cut = &bytes[..bytes.len() - 20];
        match decode_store(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(decode_store(&bytes[..30]), Err(Error::Format { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn restrict_never_leaks(seed in any::<u64>(), n in 1usize..40, k in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_store(&mut rng, n, 4);
            let q: Vec<f32> = vec![0.5, -0.25, 1.0, 0.1];
            let opts = QueryOptions { restrict_to: Some("vol1"), ..Default::default() };
            match query(&s, &q, k, opts) {
                Ok(r) => prop_assert!(r.hits.iter().all(|h| h.volume_id == "vol1")),
                Err(Error::EmptyCandidates) => prop_assert!(s.volume_ids().all(|v| v != "vol1")),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn similarity_symmetric_and_bounded(a in proptest::collection::vec(-10.0f32..10.0, 6), b in proptest::collection::vec(-10.0f32..10.0, 6)) {
            let s = cosine(&a, &b);
            prop_assert_eq!(s, cosine(&b, &a));
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
