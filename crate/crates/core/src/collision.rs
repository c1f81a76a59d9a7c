//! In-batch collision diagnostics: pairwise Hamming distances between SIDs,
//! cosine distances between normalized embeddings, the valid-pair mask that
//! removes constructed positives and same-item duplicates, and the split of
//! the surviving pairs into full and partial collisions.

use crate::error::{Error, Result};
use crate::numerics::matrix::dot;
use crate::numerics::Matrix;
use crate::rq::SidMatrix;

/// Triggers occupy instances `[0, B)`, their targets `[B, 2B)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pairs: usize,
    item_ids: Vec<usize>,
}

impl BatchLayout {
    pub fn new(trigger_ids: &[usize], target_ids: &[usize]) -> Result<Self> {
        if trigger_ids.len() != target_ids.len() {
            return Err(Error::Shape(format!(
                "{} triggers but {} targets",
                trigger_ids.len(),
                target_ids.len()
            )));
        }
        let mut item_ids = trigger_ids.to_vec();
        item_ids.extend_from_slice(target_ids);
        Ok(Self {
            pairs: trigger_ids.len(),
            item_ids,
        })
    }

    /// Number of trigger/target pairs `B`.
    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// Number of instances `2B`.
    pub fn instances(&self) -> usize {
        self.item_ids.len()
    }

    pub fn item_ids(&self) -> &[usize] {
        &self.item_ids
    }

    /// True when `i` and `j` are the two halves of one constructed pair.
    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        let b = self.pairs;
        (i < b && j == i + b) || (j < b && i == j + b)
    }
}

/// Dense symmetric `n × n` table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairTable<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Copy> PairTable<T> {
    pub fn filled(n: usize, v: T) -> Self {
        Self {
            n,
            data: vec![v; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
}

pub type HammingMatrix = PairTable<u32>;
pub type PairMask = PairTable<bool>;

/// Unordered index pair with `i < j`.
pub type IndexPair = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionView {
    pub hamming: HammingMatrix,
    pub distance: Matrix,
    pub mask: PairMask,
    pub omega_full: Vec<IndexPair>,
    pub omega_partial: Vec<IndexPair>,
}

pub fn hamming_matrix(sids: &SidMatrix) -> HammingMatrix {
    let n = sids.len();
    let mut h = HammingMatrix::filled(n, 0);
    for i in 0..n {
        let a = sids.row(i);
        for j in (i + 1)..n {
            let dist = a.iter().zip(sids.row(j)).filter(|(x, y)| x != y).count() as u32;
            h.set(i, j, dist);
            h.set(j, i, dist);
        }
    }
    h
}

/// Hamming matrix from ragged SID rows; all rows must share one length.
pub fn hamming_matrix_from_rows(rows: &[Vec<u32>]) -> Result<HammingMatrix> {
    Ok(hamming_matrix(&SidMatrix::from_rows(rows)?))
}

/// `D_ij = 1 − e_iᵀ e_j` for unit-norm rows.
pub fn cosine_distance_matrix(e: &Matrix) -> Result<Matrix> {
    for (i, r) in e.row_iter().enumerate() {
        let norm = dot(r, r).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("row {i} has norm {norm}, expected 1")));
        }
    }
    let n = e.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = 1.0 - dot(e.row(i), e.row(j));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// Valid-pair mask: zero on constructed positives `(i, i+B)`, `(i+B, i)` and
/// on every pair of instances sharing an item id (which includes `i = j`).
pub fn cvpm_mask(layout: &BatchLayout) -> PairMask {
    let n = layout.instances();
    let ids = layout.item_ids();
    let mut m = PairMask::filled(n, true);
    for i in 0..n {
        for j in 0..n {
            if ids[i] == ids[j] || layout.is_positive(i, j) {
                m.set(i, j, false);
            }
        }
    }
    m
}

/// Mask used when the valid-pair filter is ablated: everything except the
/// diagonal.
pub fn unfiltered_mask(n: usize) -> PairMask {
    let mut m = PairMask::filled(n, true);
    for i in 0..n {
        m.set(i, i, false);
    }
    m
}

/// Splits valid pairs into full collisions (`H = 0`) and partial collisions
/// (`0 < H ≤ radius`). Each unordered pair is listed once as `(i, j)`, `i < j`.
pub fn partition_collisions(
    h: &HammingMatrix,
    mask: &PairMask,
    radius: u32,
    depth: usize,
) -> Result<(Vec<IndexPair>, Vec<IndexPair>)> {
    if radius < 1 || radius as usize > depth {
        return Err(Error::Config(format!(
            "Hamming radius must lie in [1, {depth}], got {radius}"
        )));
    }
    if h.n() != mask.n() {
        return Err(Error::Shape(format!(
            "Hamming matrix is {0}x{0}, mask is {1}x{1}",
            h.n(),
            mask.n()
        )));
    }
    let mut full = Vec::new();
    let mut partial = Vec::new();
    for i in 0..h.n() {
        for j in (i + 1)..h.n() {
            if !mask.get(i, j) {
                continue;
            }
            match h.get(i, j) {
                0 => full.push((i, j)),
                x if x <= radius => partial.push((i, j)),
                _ => {}
            }
        }
    }
    Ok((full, partial))
}

/// Assembles the full per-batch view. `normalized` holds the unit-normalized
/// pre-quantization embeddings; `use_cvpm = false` swaps in
/// [`unfiltered_mask`].
pub fn build_view(
    sids: &SidMatrix,
    normalized: &Matrix,
    layout: &BatchLayout,
    radius: u32,
    use_cvpm: bool,
) -> Result<CollisionView> {
    if sids.len() != layout.instances() || normalized.rows() != layout.instances() {
        return Err(Error::Shape(format!(
            "{} SIDs and {} embeddings for {} instances",
            sids.len(),
            normalized.rows(),
            layout.instances()
        )));
    }
    let hamming = hamming_matrix(sids);
    let distance = cosine_distance_matrix(normalized)?;
    let mask = if use_cvpm {
        cvpm_mask(layout)
    } else {
        unfiltered_mask(layout.instances())
    };
    let (omega_full, omega_partial) = partition_collisions(&hamming, &mask, radius, sids.depth())?;
    Ok(CollisionView {
        hamming,
        distance,
        mask,
        omega_full,
        omega_partial,
    })
}

/// Counts conflict pairs that the valid-pair mask is supposed to exclude:
/// constructed positives and same-item duplicates.
pub fn excluded_pairs_in_omega(view: &CollisionView, layout: &BatchLayout) -> usize {
    let ids = layout.item_ids();
    view.omega_full
        .iter()
        .chain(&view.omega_partial)
        .filter(|&&(i, j)| ids[i] == ids[j] || layout.is_positive(i, j))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hamming_examples() {
        let h = hamming_matrix_from_rows(&[vec![1, 2, 3], vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert_eq!(h.get(0, 1), 0);
        assert_eq!(h.get(0, 2), 3);
        assert_eq!(h.get(2, 2), 0);
        assert!(matches!(
            hamming_matrix_from_rows(&[vec![1, 2], vec![1]]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn cosine_distance_examples() {
        let s = 0.5f64.sqrt();
        let e = Matrix::from_rows(&[vec![s, s], vec![s, s], vec![-s, s], vec![-s, -s]]).unwrap();
        let d = cosine_distance_matrix(&e).unwrap();
        assert!(d[(0, 1)].abs() < 1e-15);
        assert!((d[(0, 2)] - 1.0).abs() < 1e-15);
        assert!((d[(0, 3)] - 2.0).abs() < 1e-15);
        let bad = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(cosine_distance_matrix(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn cvpm_distinct_ids() {
        let layout = BatchLayout::new(&[10, 11], &[12, 13]).unwrap();
        let m = cvpm_mask(&layout);
        for i in 0..4 {
            for j in 0..4 {
                let zero = i == j || matches!((i, j), (0, 2) | (2, 0) | (1, 3) | (3, 1));
                assert_eq!(m.get(i, j), !zero, "({i},{j})");
            }
        }
    }

    #[test]
    fn cvpm_same_item_exclusion() {
        let layout = BatchLayout::new(&[7, 8], &[9, 8]).unwrap();
        let m = cvpm_mask(&layout);
        assert!(!m.get(1, 3) && !m.get(3, 1));
        assert!(m.get(0, 1) && m.get(0, 3) && m.get(2, 3));
    }

    #[test]
    fn partition_thresholds() {
        let mut h = HammingMatrix::filled(4, 9);
        for (i, j, v) in [(0, 1, 0), (0, 2, 1), (0, 3, 2)] {
            h.set(i, j, v);
            h.set(j, i, v);
        }
        let mut m = PairMask::filled(4, false);
        for j in 1..4 {
            m.set(0, j, true);
            m.set(j, 0, true);
        }
        let (full, partial) = partition_collisions(&h, &m, 1, 3).unwrap();
        assert_eq!(full, vec![(0, 1)]);
        assert_eq!(partial, vec![(0, 2)]);

        let none = PairMask::filled(4, false);
        let (f, p) = partition_collisions(&h, &none, 1, 3).unwrap();
        assert!(f.is_empty() && p.is_empty());

        assert!(matches!(partition_collisions(&h, &m, 0, 3), Err(Error::Config(_))));
        assert!(matches!(partition_collisions(&h, &m, 4, 3), Err(Error::Config(_))));
    }

    type Batch = (Vec<usize>, Vec<usize>, Vec<Vec<u32>>, Vec<Vec<f64>>);

    fn arb_batch() -> impl Strategy<Value = Batch> {
        (1usize..6).prop_flat_map(|b| {
            (
                prop::collection::vec(0usize..5, b),
                prop::collection::vec(0usize..5, b),
                prop::collection::vec(prop::collection::vec(0u32..3, 2), 2 * b),
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2 * b),
            )
        })
    }

    proptest! {
        #[test]
        fn positives_and_duplicates_never_in_omega((t, p, sids, emb) in arb_batch()) {
            prop_assume!(emb.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let layout = BatchLayout::new(&t, &p).unwrap();
            let sids = SidMatrix::from_rows(&sids).unwrap();
            let e = crate::numerics::row_normalize(&Matrix::from_rows(&emb).unwrap());
            let view = build_view(&sids, &e, &layout, 1, true).unwrap();
            prop_assert_eq!(excluded_pairs_in_omega(&view, &layout), 0);
            let b = layout.pairs();
            let bound = b * (2 * b - 1) - b;
            prop_assert!(view.omega_full.len() + view.omega_partial.len() <= bound);
            for i in 0..2 * b {
                prop_assert_eq!(view.hamming.get(i, i), 0);
                prop_assert!(!view.mask.get(i, i));
                prop_assert!(view.distance[(i, i)].abs() <= 1e-9);
                for j in 0..2 * b {
                    prop_assert_eq!(view.hamming.get(i, j), view.hamming.get(j, i));
                    prop_assert_eq!(view.mask.get(i, j), view.mask.get(j, i));
                    prop_assert!((view.distance[(i, j)] - view.distance[(j, i)]).abs() <= 1e-9);
                    prop_assert!(view.distance[(i, j)] >= -1e-12 && view.distance[(i, j)] <= 2.0 + 1e-12);
                }
            }
            for pr in &view.omega_full {
                prop_assert!(!view.omega_partial.contains(pr));
            }
        }

        #[test]
        fn permutation_equivariance((t, p, sids, emb) in arb_batch(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            prop_assume!(emb.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let b = t.len();
            // permute pair order: pair k moves to slot perm[k]
            let mut perm: Vec<usize> = (0..b).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut inst = vec![0usize; 2 * b]; // new index -> old index
            for (old, &new) in perm.iter().enumerate() {
                inst[new] = old;
                inst[new + b] = old + b;
            }
            let t2: Vec<usize> = (0..b).map(|n| t[inst[n]]).collect();
            let p2: Vec<usize> = (0..b).map(|n| p[inst[n] ]).collect();
            let sids2: Vec<Vec<u32>> = inst.iter().map(|&o| sids[o].clone()).collect();
            let emb2: Vec<Vec<f64>> = inst.iter().map(|&o| emb[o].clone()).collect();

            let view = |t: &[usize], p: &[usize], s: &[Vec<u32>], e: &[Vec<f64>]| {
                let layout = BatchLayout::new(t, p).unwrap();
                let e = crate::numerics::row_normalize(&Matrix::from_rows(e).unwrap());
                build_view(&SidMatrix::from_rows(s).unwrap(), &e, &layout, 1, true).unwrap()
            };
            let a = view(&t, &p, &sids, &emb);
            let c = view(&t2, &p2, &sids2, &emb2);
            for i in 0..2 * b {
                for j in 0..2 * b {
                    prop_assert_eq!(c.hamming.get(i, j), a.hamming.get(inst[i], inst[j]));
                    prop_assert_eq!(c.mask.get(i, j), a.mask.get(inst[i], inst[j]));
                    prop_assert!((c.distance[(i, j)] - a.distance[(inst[i], inst[j])]).abs() < 1e-12);
                }
            }
            let remap = |v: &[IndexPair]| {
                let mut out: Vec<IndexPair> = v
                    .iter()
                    .map(|&(i, j)| (inst[i].min(inst[j]), inst[i].max(inst[j])))
                    .collect();
                out.sort_unstable();
                out
            };
            let mut af = a.omega_full.clone();
            af.sort_unstable();
            let mut ap = a.omega_partial.clone();
            ap.sort_unstable();
            prop_assert_eq!(remap(&c.omega_full), af);
            prop_assert_eq!(remap(&c.omega_partial), ap);
        }
    }
}
