//! Embedding database with exact cosine Top-K search and Recall@K
//! evaluation, plus a checksummed binary index file format.

use std::collections::HashSet;
use std::path::Path;

use crate::container::{fnv1a, Reader};
use crate::error::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"FBIX";
const INDEX_VERSION: u32 = 1;

/// Immutable table of unit-norm embeddings in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl RetrievalIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(|s| s.as_str())
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// One ranked search hit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub object_id: String,
    pub score: f32,
}

/// Top-K result: scores non-increasing, ties resolved toward earlier records.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<ScoredHit>,
}

/// Recall fractions for the requested K values.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub recalls: Vec<(usize, f64)>,
    pub queries: usize,
}

impl RecallReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Build an index from (id, embedding) pairs. Embeddings are defensively
/// re-normalized; duplicates, dimension mismatches, and zero vectors are
/// rejected.
pub fn build_index(entries: &[(String, Vec<f32>)]) -> Result<RetrievalIndex> {
    if entries.is_empty() {
        return Err(Error::Data("empty index: at least one entry required".into()));
    }
    let dim = entries[0].1.len();
    if dim == 0 {
        return Err(Error::Shape("embeddings must have at least one dimension".into()));
    }
    let mut seen = HashSet::new();
    let mut ids = Vec::with_capacity(entries.len());
    let mut data = Vec::with_capacity(entries.len() * dim);
    for (id, emb) in entries {
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("duplicate id '{id}' in index")));
        }
        if emb.len() != dim {
            return Err(Error::Shape(format!(
                "embedding for '{id}' has {} entries, expected {dim}",
                emb.len()
            )));
        }
        for &v in emb {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("embedding for '{id}' has a non-finite entry")));
            }
        }
        let norm = emb.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Data(format!("embedding for '{id}' is a zero vector")));
        }
        ids.push(id.clone());
        data.extend(emb.iter().map(|&v| ((v as f64) / norm) as f32));
    }
    Ok(RetrievalIndex { dim, ids, data })
}

/// Exact cosine Top-K. The query is normalized first, so positively scaled
/// queries produce the same result; exact score ties go to the earlier
/// record.
pub fn query_topk(index: &RetrievalIndex, query: &[f32], k: usize) -> Result<QueryResult> {
    if query.len() != index.dim {
        return Err(Error::Shape(format!(
            "query has {} entries, index dim is {}",
            query.len(),
            index.dim
        )));
    }
    if k == 0 || k > index.len() {
        return Err(Error::Usage(format!(
            "K must be in 1..={}, got {k}",
            index.len()
        )));
    }
    for &v in query {
        if !v.is_finite() {
            return Err(Error::Numeric("query has a non-finite entry".into()));
        }
    }
    let qnorm = query.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if qnorm < 1e-12 {
        return Err(Error::Usage("query is a zero vector".into()));
    }
    let unit: Vec<f64> = query.iter().map(|&v| (v as f64) / qnorm).collect();

    let mut scored: Vec<(f64, usize)> = (0..index.len())
        .map(|i| {
            let e = index.embedding(i);
            let dot: f64 = unit.iter().zip(e).map(|(q, &v)| q * v as f64).sum();
            (dot, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let hits = scored[..k]
        .iter()
        .map(|&(score, i)| ScoredHit {
            object_id: index.ids[i].clone(),
            score: score as f32,
        })
        .collect();
    Ok(QueryResult { hits })
}

/// Fraction of queries whose true ID appears among the first K hits, for
/// each requested K.
pub fn recall_at_k(results: &[(String, QueryResult)], ks: &[usize]) -> Result<RecallReport> {
    if results.is_empty() {
        return Err(Error::Usage("recall needs at least one query result".into()));
    }
    if ks.is_empty() {
        return Err(Error::Usage("recall needs at least one K value".into()));
    }
    let shortest = results.iter().map(|(_, r)| r.hits.len()).min().unwrap();
    let mut recalls = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 || k > shortest {
            return Err(Error::Usage(format!(
                "K={k} outside the valid range 1..={shortest} for these results"
            )));
        }
        let hits = results
            .iter()
            .filter(|(truth, r)| r.hits[..k].iter().any(|h| h.object_id == *truth))
            .count();
        recalls.push((k, hits as f64 / results.len() as f64));
    }
    Ok(RecallReport {
        recalls,
        queries: results.len(),
    })
}

/// Serialize: magic, version, dim, count, records of (id length, id bytes,
/// dim little-endian f32), then a trailing FNV-1a checksum of everything
/// before it.
pub fn encode_index(index: &RetrievalIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for i in 0..index.len() {
        let id = index.ids[i].as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        for &v in index.embedding(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn decode_index(bytes: &[u8]) -> Result<RetrievalIndex> {
    if bytes.len() < 8 {
        return Err(Error::Data("index file truncated before checksum".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8-byte slice"));
    if fnv1a(body) != stored {
        return Err(Error::Data("index checksum mismatch".into()));
    }
    let mut r = Reader::new(body);
    let magic = r.take(4)?;
    if magic != INDEX_MAGIC {
        return Err(Error::Data("bad index magic".into()));
    }
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(Error::Data(format!("unsupported index version {version}")));
    }
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::Data("index dim must be positive".into()));
    }
    let count = r.u64()? as usize;
    if count == 0 {
        return Err(Error::Data("empty index: at least one entry required".into()));
    }
    let mut seen = HashSet::new();
    let mut ids = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| Error::Data("index id is not valid UTF-8".into()))?
            .to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!("duplicate id '{id}' in index file")));
        }
        let mut norm = 0.0f64;
        for _ in 0..dim {
            let raw = r.take(4)?;
            let v = f32::from_le_bytes(raw.try_into().expect("4-byte slice"));
            if !v.is_finite() {
                return Err(Error::Data(format!("embedding for '{id}' has a non-finite entry")));
            }
            norm += (v as f64) * (v as f64);
            data.push(v);
        }
        if (norm.sqrt() - 1.0).abs() > 1e-5 {
            return Err(Error::Data(format!(
                "embedding for '{id}' is not unit-norm in index file"
            )));
        }
        ids.push(id);
    }
    if r.pos != body.len() {
        return Err(Error::Data("trailing bytes after index records".into()));
    }
    Ok(RetrievalIndex { dim, ids, data })
}

pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    std::fs::write(path, encode_index(index))?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    decode_index(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn entry(id: &str, v: &[f32]) -> (String, Vec<f32>) {
        (id.to_string(), v.to_vec())
    }

    fn random_entries(rng: &mut SeededRng, n: usize, d: usize) -> Vec<(String, Vec<f32>)> {
        (0..n)
            .map(|i| {
                let v: Vec<f32> = (0..d).map(|_| rng.range(-1.0, 1.0) as f32).collect();
                (format!("obj{i:04}"), v)
            })
            .collect()
    }

    #[test]
    fn test_build_rejects_bad_entries() {
        let err = build_index(&[]).unwrap_err();
        assert!(err.to_string().contains("empty index"));
        let dup = vec![entry("a", &[1.0, 0.0]), entry("a", &[0.0, 1.0])];
        assert!(build_index(&dup).unwrap_err().to_string().contains("duplicate"));
        let mismatch = vec![entry("a", &[1.0, 0.0]), entry("b", &[1.0, 0.0, 0.0])];
        assert!(build_index(&mismatch).is_err());
        let zero = vec![entry("a", &[0.0, 0.0])];
        assert!(build_index(&zero).unwrap_err().to_string().contains("zero vector"));
    }

    #[test]
    fn test_build_normalizes_defensively() {
        let idx = build_index(&[entry("a", &[2.0, 0.0])]).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.embedding(0), &[1.0, 0.0]);
        let idx = build_index(&[entry("a", &[3.0, 4.0])]).unwrap();
        assert_eq!(idx.embedding(0), &[0.6, 0.8]);
    }

    #[test]
    fn test_insertion_order_preserved() {
        let entries = vec![
            entry("zebra", &[1.0, 0.0]),
            entry("apple", &[0.0, 1.0]),
            entry("mango", &[0.6, 0.8]),
        ];
        let idx = build_index(&entries).unwrap();
        let ids: Vec<&str> = idx.ids().collect();
        assert_eq!(ids, vec!["zebra", "apple", "mango"]);
    }

    #[test]
    fn test_query_exact_match_ranks_first() {
        let entries = vec![
            entry("a", &[1.0, 0.0, 0.0]),
            entry("b", &[0.0, 1.0, 0.0]),
            entry("c", &[0.0, 0.0, 1.0]),
        ];
        let idx = build_index(&entries).unwrap();
        let res = query_topk(&idx, &[0.0, 1.0, 0.0], 2).unwrap();
        assert_eq!(res.hits[0].object_id, "b");
        assert!((res.hits[0].score - 1.0).abs() < 1e-7);
        assert!(res.hits[1].score.abs() < 1e-7);
    }

    #[test]
    fn test_query_scale_invariance() {
        let entries = vec![
            entry("a", &[1.0, 0.0]),
            entry("b", &[0.6, 0.8]),
            entry("c", &[-0.8, 0.6]),
        ];
        let idx = build_index(&entries).unwrap();
        // 3-4-5 query: both q and 5q normalize to exactly (0.6, 0.8).
        let base = query_topk(&idx, &[3.0, 4.0], 3).unwrap();
        let scaled = query_topk(&idx, &[15.0, 20.0], 3).unwrap();
        assert_eq!(base, scaled);

        let mut rng = SeededRng::new(3);
        for _ in 0..20 {
            let q: Vec<f32> = (0..2).map(|_| rng.range(-1.0, 1.0) as f32).collect();
            if q.iter().all(|v| v.abs() < 1e-3) {
                continue;
            }
            let q5: Vec<f32> = q.iter().map(|&v| v * 5.0).collect();
            let a = query_topk(&idx, &q, 3).unwrap();
            let b = query_topk(&idx, &q5, 3).unwrap();
            let ids_a: Vec<&str> = a.hits.iter().map(|h| h.object_id.as_str()).collect();
            let ids_b: Vec<&str> = b.hits.iter().map(|h| h.object_id.as_str()).collect();
            assert_eq!(ids_a, ids_b);
            for (x, y) in a.hits.iter().zip(&b.hits) {
                assert!((x.score - y.score).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn test_query_matches_full_sort_oracle() {
        let mut rng = SeededRng::new(4);
        let entries = random_entries(&mut rng, 200, 8);
        let idx = build_index(&entries).unwrap();
        for _ in 0..50 {
            let q: Vec<f32> = (0..8).map(|_| rng.range(-1.0, 1.0) as f32).collect();
            let k = 1 + rng.index(20);
            let got = query_topk(&idx, &q, k).unwrap();

            // Independent oracle: normalize, score every record, full sort
            // by (score desc, insertion index asc).
            let qn = q.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            let mut oracle: Vec<(f64, usize)> = (0..idx.len())
                .map(|i| {
                    let dot: f64 = idx
                        .embedding(i)
                        .iter()
                        .zip(&q)
                        .map(|(&e, &qq)| (e as f64) * (qq as f64 / qn))
                        .sum();
                    (dot, i)
                })
                .collect();
            oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            for (hit, &(score, i)) in got.hits.iter().zip(oracle.iter()) {
                assert_eq!(hit.object_id, format!("obj{i:04}"));
                assert_eq!(hit.score, score as f32);
            }
            for w in got.hits.windows(2) {
                assert!(w[0].score >= w[1].score);
            }
        }
    }

    #[test]
    fn test_tie_breaks_by_insertion_order() {
        let entries = vec![
            entry("first", &[1.0, 0.0]),
            entry("second", &[0.0, 1.0]),
            entry("third", &[1.0, 0.0]),
        ];
        let idx = build_index(&entries).unwrap();
        // Equidistant from the two axes: scores for all three tie pairwise
        // exactly (0.7071.. for each), so ranking is insertion order.
        let res = query_topk(&idx, &[0.5, 0.5], 3).unwrap();
        let ids: Vec<&str> = res.hits.iter().map(|h| h.object_id.as_str()).collect();
        assert_eq!(ids, vec!["first", "second", "third"]);
    }

    #[test]
    fn test_query_rejects_bad_inputs() {
        let idx = build_index(&[entry("a", &[1.0, 0.0]), entry("b", &[0.0, 1.0])]).unwrap();
        assert!(query_topk(&idx, &[1.0, 0.0], 0).is_err());
        assert!(query_topk(&idx, &[1.0, 0.0], 3).is_err());
        assert!(query_topk(&idx, &[0.0, 0.0], 1).is_err());
        assert!(query_topk(&idx, &[1.0, 0.0, 0.0], 1).is_err());
        assert!(query_topk(&idx, &[f32::NAN, 0.0], 1).is_err());
    }

    fn result_of(ids: &[&str]) -> QueryResult {
        QueryResult {
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, id)| ScoredHit {
                    object_id: id.to_string(),
                    score: 1.0 - i as f32 * 0.1,
                })
                .collect(),
        }
    }

    #[test]
    fn test_recall_values() {
        let results = vec![
            ("a".to_string(), result_of(&["a", "b", "c"])),
            ("b".to_string(), result_of(&["b", "a", "c"])),
        ];
        let report = recall_at_k(&results, &[1, 2, 3]).unwrap();
        assert_eq!(report.recall(1), Some(1.0));
        assert_eq!(report.queries, 2);

        let rank2 = vec![
            ("a".to_string(), result_of(&["x", "a", "c"])),
            ("b".to_string(), result_of(&["y", "b", "c"])),
        ];
        let report = recall_at_k(&rank2, &[1, 3]).unwrap();
        assert_eq!(report.recall(1), Some(0.0));
        assert_eq!(report.recall(3), Some(1.0));
    }

    #[test]
    fn test_recall_hand_count_and_monotonicity() {
        let results = vec![
            ("a".to_string(), result_of(&["a", "b", "c", "d"])),
            ("b".to_string(), result_of(&["c", "b", "a", "d"])),
            ("c".to_string(), result_of(&["d", "a", "c", "b"])),
            ("d".to_string(), result_of(&["a", "b", "c", "d"])),
        ];
        let report = recall_at_k(&results, &[1, 2, 3, 4]).unwrap();
        // Hand count: rank of truth per query is 1, 2, 3, 4.
        assert_eq!(report.recall(1), Some(0.25));
        assert_eq!(report.recall(2), Some(0.5));
        assert_eq!(report.recall(3), Some(0.75));
        assert_eq!(report.recall(4), Some(1.0));
        let mut prev = 0.0;
        for (_, r) in &report.recalls {
            assert!(*r >= prev);
            prev = *r;
        }
    }

    #[test]
    fn test_recall_rejects_bad_k() {
        let results = vec![("a".to_string(), result_of(&["a", "b"]))];
        assert!(recall_at_k(&results, &[3]).is_err());
        assert!(recall_at_k(&results, &[0]).is_err());
        assert!(recall_at_k(&results, &[]).is_err());
        assert!(recall_at_k(&[], &[1]).is_err());
    }

    #[test]
    fn test_index_roundtrip_bit_identical() {
        let mut rng = SeededRng::new(5);
        let entries = random_entries(&mut rng, 20, 6);
        let idx = build_index(&entries).unwrap();
        let bytes = encode_index(&idx);
        let loaded = decode_index(&bytes).unwrap();
        assert_eq!(encode_index(&loaded), bytes);
        assert_eq!(loaded, idx);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.fbix");
        save_index(&idx, &path).unwrap();
        let from_disk = load_index(&path).unwrap();
        assert_eq!(from_disk, idx);
    }

    #[test]
    fn test_loaded_index_queries_identically() {
        let mut rng = SeededRng::new(6);
        let entries = random_entries(&mut rng, 30, 5);
        let idx = build_index(&entries).unwrap();
        let loaded = decode_index(&encode_index(&idx)).unwrap();
        for _ in 0..10 {
            let q: Vec<f32> = (0..5).map(|_| rng.range(-1.0, 1.0) as f32).collect();
            let a = query_topk(&idx, &q, 7).unwrap();
            let b = query_topk(&loaded, &q, 7).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn test_decode_rejects_corruption() {
        let idx = build_index(&[entry("a", &[1.0, 0.0]), entry("b", &[0.0, 1.0])]).unwrap();
        let bytes = encode_index(&idx);

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_index(&bad_magic).is_err());

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0xff;
        assert!(decode_index(&flipped).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(decode_index(truncated).is_err());
        assert!(decode_index(&bytes[..4]).is_err());

        // A checksum-valid file with a non-unit row is rejected.
        let mut tampered = bytes[..bytes.len() - 8].to_vec();
        let emb_start = tampered.len() - 8;
        tampered[emb_start..emb_start + 4].copy_from_slice(&2.0f32.to_le_bytes());
        let sum = fnv1a(&tampered);
        tampered.extend_from_slice(&sum.to_le_bytes());
        assert!(decode_index(&tampered).unwrap_err().to_string().contains("unit-norm"));
    }
}
