//! The two-stage retrieval paradigm: a fast Hamming scan over compact binary
//! codes proposes top-k candidates, then the candidates are re-ranked by
//! squared L2 distance between high-dimensional float descriptors.
//!
//! Re-ranking is a pure permutation of the candidate set: it never adds or
//! removes entries, so stage-1 recall upper-bounds the final recall at any N.

use std::time::Instant;

use crate::descriptor::{BinaryCode, FloatDescriptor};
use crate::error::{Error, Result};
use crate::index::{BinaryIndex, CandidateList, FloatStore, Neighbor};

/// Knobs for a two-stage search.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalConfig {
    /// Candidates fetched by the binary stage before re-ranking.
    pub k_candidates: usize,
    /// When false the binary-stage order is returned as-is.
    pub rerank_enabled: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_candidates: 100,
            rerank_enabled: true,
        }
    }
}

impl RetrievalConfig {
    fn validate(&self) -> Result<()> {
        if self.k_candidates == 0 {
            return Err(Error::InvalidConfig("k_candidates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of a (one- or two-) stage search over a single query.
#[derive(Debug, Clone)]
pub struct RankedResult {
    /// Final ranking, best first.
    pub final_ids: Vec<u64>,
    /// Stage-1 candidates in Hamming order.
    pub candidates: CandidateList,
    /// Float distances aligned with `final_ids`; empty when re-ranking is off.
    pub rerank_distances: Vec<f64>,
    /// Wall time of the candidate stage in nanoseconds.
    pub initial_nanos: u64,
    /// Wall time of the re-rank stage in nanoseconds (0 when disabled).
    pub rerank_nanos: u64,
}

/// Reorders `candidates` by ascending squared L2 distance to `q_float`,
/// ties by id. Every candidate id must exist in `store`.
pub fn rerank(
    candidates: &CandidateList,
    q_float: &FloatDescriptor,
    store: &FloatStore,
) -> Result<Vec<Neighbor>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for n in candidates.entries() {
        let row = store.row_by_id(n.id).ok_or(Error::MissingId(n.id))?;
        if row.len() != q_float.dim() {
            return Err(Error::DimMismatch {
                expected: row.len(),
                got: q_float.dim(),
            });
        }
        scored.push(Neighbor {
            id: n.id,
            distance: crate::index::squared_l2(row, q_float.values()),
        });
    }
    scored.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    Ok(scored)
}

/// Hamming candidate retrieval followed by float re-ranking.
///
/// `bidx` and `store` must cover the same id set; candidate ids missing from
/// the store surface as [`Error::MissingId`].
pub fn two_stage_search(
    bidx: &BinaryIndex,
    store: &FloatStore,
    q_bin: &BinaryCode,
    q_float: &FloatDescriptor,
    cfg: &RetrievalConfig,
) -> Result<RankedResult> {
    cfg.validate()?;
    if bidx.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "binary index has {} entries but float store has {}",
            bidx.len(),
            store.len()
        )));
    }

    let t0 = Instant::now();
    let candidates = bidx.hamming_topk(q_bin, cfg.k_candidates)?;
    let initial_nanos = t0.elapsed().as_nanos() as u64;

    if !cfg.rerank_enabled {
        return Ok(RankedResult {
            final_ids: candidates.ids(),
            candidates,
            rerank_distances: Vec::new(),
            initial_nanos,
            rerank_nanos: 0,
        });
    }

    let t1 = Instant::now();
    let reranked = rerank(&candidates, q_float, store)?;
    let rerank_nanos = t1.elapsed().as_nanos() as u64;

    Ok(RankedResult {
        final_ids: reranked.iter().map(|n| n.id).collect(),
        candidates,
        rerank_distances: reranked.iter().map(|n| n.distance).collect(),
        initial_nanos,
        rerank_nanos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{l2_normalize, sign_hash};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> FloatDescriptor {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    struct Fixture {
        bidx: BinaryIndex,
        store: FloatStore,
        descs: Vec<FloatDescriptor>,
    }

    /// Floats random on the sphere; codes are sign hashes of the same vectors,
    /// so the two stages agree on coarse structure.
    fn fixture(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Fixture {
        let descs: Vec<FloatDescriptor> = (0..n).map(|_| random_unit(rng, dim)).collect();
        let codes: Vec<BinaryCode> = descs.iter().map(|d| d.sign_hash()).collect();
        let ids: Vec<u64> = (0..n as u64).collect();
        Fixture {
            bidx: BinaryIndex::build(&codes, &ids).unwrap(),
            store: FloatStore::build(&descs, &ids).unwrap(),
            descs,
        }
    }

    #[test]
    fn single_candidate_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = fixture(&mut rng, 30, 32);
        let q = random_unit(&mut rng, 32);
        let candidates = f.bidx.hamming_topk(&q.sign_hash(), 1).unwrap();
        let reranked = rerank(&candidates, &q, &f.store).unwrap();
        assert_eq!(reranked.len(), 1);
        assert_eq!(reranked[0].id, candidates.entries()[0].id);
    }

    #[test]
    fn float_sorted_candidates_keep_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = fixture(&mut rng, 50, 32);
        let q = random_unit(&mut rng, 32);
        let candidates = f.bidx.hamming_topk(&q.sign_hash(), 20).unwrap();
        let once = rerank(&candidates, &q, &f.store).unwrap();
        // Re-ranking an already float-sorted list is idempotent.
        let as_list = f.store.l2_topk(&q, f.store.len()).unwrap();
        let again = rerank(&as_list, &q, &f.store).unwrap();
        assert_eq!(again.iter().map(|n| n.id).collect::<Vec<_>>(), as_list.ids());
        let _ = once;
    }

    #[test]
    fn rerank_equals_l2_topk_restricted_to_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = fixture(&mut rng, 400, 64);
        let q = random_unit(&mut rng, 64);
        let candidates = f.bidx.hamming_topk(&q.sign_hash(), 50).unwrap();
        let reranked = rerank(&candidates, &q, &f.store).unwrap();

        // Brute force over the candidate subset.
        let mut oracle: Vec<(u64, f64)> = candidates
            .entries()
            .iter()
            .map(|n| {
                let row = f.store.row_by_id(n.id).unwrap();
                (n.id, crate::index::squared_l2(row, q.values()))
            })
            .collect();
        oracle.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let got: Vec<(u64, f64)> = reranked.iter().map(|n| (n.id, n.distance)).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn missing_id_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = fixture(&mut rng, 10, 16);
        let tiny = FloatStore::build(
            &f.descs[..2].to_vec(),
            &[0, 1],
        )
        .unwrap();
        let q = random_unit(&mut rng, 16);
        let candidates = f.bidx.hamming_topk(&q.sign_hash(), 10).unwrap();
        assert!(matches!(
            rerank(&candidates, &q, &tiny),
            Err(Error::MissingId(_))
        ));
    }

    #[test]
    fn database_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = fixture(&mut rng, 1, 32);
        let q = random_unit(&mut rng, 32);
        let res = two_stage_search(
            &f.bidx,
            &f.store,
            &q.sign_hash(),
            &q,
            &RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(res.final_ids, vec![0]);
        assert_eq!(res.candidates.ids(), vec![0]);
    }

    #[test]
    fn containment_gives_global_top1() {
        // Whenever the global float NN is among the candidates, the
        // two-stage top-1 equals the one-stage float top-1.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = fixture(&mut rng, 500, 64);
        let cfg = RetrievalConfig {
            k_candidates: 100,
            rerank_enabled: true,
        };
        let mut checked = 0;
        for _ in 0..20 {
            let q = random_unit(&mut rng, 64);
            let global = f.store.l2_topk(&q, 1).unwrap().entries()[0];
            let res = two_stage_search(&f.bidx, &f.store, &q.sign_hash(), &q, &cfg).unwrap();
            if res.candidates.ids().contains(&global.id) {
                assert_eq!(res.final_ids[0], global.id);
                checked += 1;
            }
        }
        assert!(checked > 0, "no query had its float NN among candidates");
    }

    #[test]
    fn permutation_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = fixture(&mut rng, 200, 32);
        let cfg = RetrievalConfig::default();
        for _ in 0..10 {
            let q = random_unit(&mut rng, 32);
            let res = two_stage_search(&f.bidx, &f.store, &q.sign_hash(), &q, &cfg).unwrap();
            let mut a = res.final_ids.clone();
            let mut b = res.candidates.ids();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rerank_disabled_returns_candidate_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = fixture(&mut rng, 100, 32);
        let q = random_unit(&mut rng, 32);
        let cfg = RetrievalConfig {
            k_candidates: 10,
            rerank_enabled: false,
        };
        let res = two_stage_search(&f.bidx, &f.store, &q.sign_hash(), &q, &cfg).unwrap();
        assert_eq!(res.final_ids, res.candidates.ids());
        assert!(res.rerank_distances.is_empty());
        assert_eq!(res.rerank_nanos, 0);
    }
}
