//! Immutable exhaustive-scan indexes: packed binary codes searched by Hamming
//! distance and unit-norm float descriptors searched by squared L2.
//!
//! Both searches stream the database once through a bounded max-heap of size
//! k, so a query costs O(n log k) with no full sort. Results are exact and
//! deterministic: ties break by ascending id.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};

use crate::descriptor::{hamming_words, BinaryCode, FloatDescriptor};
use crate::error::{Error, Result};

/// One search hit. `distance` is an integer Hamming count for binary
/// searches and a squared L2 distance for float searches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f64,
}

/// Ordered search results, ascending by (distance, id).
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    entries: Vec<Neighbor>,
    k: usize,
}

impl CandidateList {
    pub fn entries(&self) -> &[Neighbor] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|n| n.id).collect()
    }

    /// The k that was requested; `len() == min(k, n)`.
    pub fn requested_k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// Heap entry ordered so the worst (largest distance, then largest id)
// candidate sits on top of the max-heap.
#[derive(PartialEq)]
struct HeapEntry {
    distance: f64,
    id: u64,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Streaming top-k selection over (distance, id) pairs.
fn select_topk(items: impl Iterator<Item = (u64, f64)>, k: usize) -> Vec<Neighbor> {
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for (id, distance) in items {
        if heap.len() < k {
            heap.push(HeapEntry { distance, id });
        } else if let Some(worst) = heap.peek() {
            if (HeapEntry { distance, id }) < *worst {
                heap.pop();
                heap.push(HeapEntry { distance, id });
            }
        }
    }
    let mut out: Vec<Neighbor> = heap
        .into_iter()
        .map(|e| Neighbor {
            id: e.id,
            distance: e.distance,
        })
        .collect();
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    out
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    Ok(())
}

fn check_unique_ids(ids: &[u64]) -> Result<()> {
    let mut seen = HashMap::with_capacity(ids.len());
    for &id in ids {
        if seen.insert(id, ()).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(())
}

/// Immutable database of packed binary codes, scanned exhaustively.
#[derive(Debug, Clone)]
pub struct BinaryIndex {
    words: Vec<u64>,
    words_per_row: usize,
    dim: usize,
    ids: Vec<u64>,
}

impl BinaryIndex {
    /// Builds an index over codes of uniform dimension with unique ids.
    pub fn build(codes: &[BinaryCode], ids: &[u64]) -> Result<Self> {
        if codes.len() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} codes but {} ids",
                codes.len(),
                ids.len()
            )));
        }
        check_unique_ids(ids)?;
        let dim = codes.first().map_or(0, |c| c.dim());
        for c in codes {
            if c.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: c.dim(),
                });
            }
        }
        let words_per_row = dim.div_ceil(64);
        let mut words = Vec::with_capacity(codes.len() * words_per_row);
        for c in codes {
            words.extend_from_slice(c.words());
        }
        Ok(Self {
            words,
            words_per_row,
            dim,
            ids: ids.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// The code stored at `row`.
    pub fn code(&self, row: usize) -> BinaryCode {
        let start = row * self.words_per_row;
        BinaryCode::from_words(
            self.words[start..start + self.words_per_row].to_vec(),
            self.dim,
        )
        .expect("stored rows are valid codes")
    }

    /// The k entries nearest to `q` in Hamming distance, ties by id.
    ///
    /// An empty index yields an empty list.
    pub fn hamming_topk(&self, q: &BinaryCode, k: usize) -> Result<CandidateList> {
        check_k(k)?;
        if self.is_empty() {
            return Ok(CandidateList {
                entries: Vec::new(),
                k,
            });
        }
        if q.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: q.dim(),
            });
        }
        let qw = q.words();
        let entries = select_topk(
            self.words
                .chunks_exact(self.words_per_row)
                .zip(&self.ids)
                .map(|(row, &id)| (id, hamming_words(row, qw) as f64)),
            k,
        );
        Ok(CandidateList { entries, k })
    }
}

/// Immutable matrix of unit-norm float descriptors, scanned by squared L2.
#[derive(Debug, Clone)]
pub struct FloatStore {
    data: Vec<f32>,
    dim: usize,
    ids: Vec<u64>,
    by_id: HashMap<u64, usize>,
}

impl FloatStore {
    pub fn build(descriptors: &[FloatDescriptor], ids: &[u64]) -> Result<Self> {
        if descriptors.len() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} descriptors but {} ids",
                descriptors.len(),
                ids.len()
            )));
        }
        let dim = descriptors.first().map_or(0, |d| d.dim());
        let mut data = Vec::with_capacity(descriptors.len() * dim);
        for d in descriptors {
            if d.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: d.dim(),
                });
            }
            data.extend_from_slice(d.values());
        }
        Self::from_raw(data, dim, ids.to_vec())
    }

    /// Builds from a packed row-major `n x dim` matrix, validating that every
    /// row is unit-norm within 1e-5.
    pub fn from_raw(data: Vec<f32>, dim: usize, ids: Vec<u64>) -> Result<Self> {
        if dim == 0 && !ids.is_empty() {
            return Err(Error::EmptyInput("descriptor dimension"));
        }
        if ids.is_empty() {
            if !data.is_empty() {
                return Err(Error::InvalidArgument(
                    "descriptor data present but no ids".into(),
                ));
            }
        } else if data.len() != ids.len() * dim {
            return Err(Error::InvalidArgument(format!(
                "expected {} values ({} rows x {dim}), got {}",
                ids.len() * dim,
                ids.len(),
                data.len()
            )));
        }
        check_unique_ids(&ids)?;
        for (row, chunk) in data.chunks_exact(dim.max(1)).enumerate() {
            let norm: f64 = chunk.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            if (norm.sqrt() - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!(
                    "row {row} has norm {} (must be unit within 1e-5)",
                    norm.sqrt()
                )));
            }
        }
        let by_id = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Ok(Self { data, dim, ids, by_id })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_by_id(&self, id: u64) -> Option<&[f32]> {
        self.by_id.get(&id).map(|&i| self.row(i))
    }

    /// The k entries nearest to `q` in squared L2 distance, ties by id.
    ///
    /// On unit-norm rows this ordering equals descending cosine similarity,
    /// since |x - y|^2 = 2 - 2<x, y>.
    pub fn l2_topk(&self, q: &FloatDescriptor, k: usize) -> Result<CandidateList> {
        check_k(k)?;
        if self.is_empty() {
            return Ok(CandidateList {
                entries: Vec::new(),
                k,
            });
        }
        if q.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: q.dim(),
            });
        }
        let qv = q.values();
        let entries = select_topk(
            self.data
                .chunks_exact(self.dim)
                .zip(&self.ids)
                .map(|(row, &id)| (id, squared_l2(row, qv))),
            k,
        );
        Ok(CandidateList { entries, k })
    }
}

/// Squared Euclidean distance with f64 accumulation in index order.
#[inline]
pub(crate) fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}
