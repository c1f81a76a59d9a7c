//! Corpus-level SID statistics: collision rate, radius histogram, entropy.
//!
//! SID table format, one item per line: `item_id<TAB>s1,s2,…,sL`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::ItemCorpus;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::mlp_apply;
use crate::rq::{rq_encode, utilization, SidMatrix, UtilizationStats};

/// Corpora above this size need an explicit opt-in for the quadratic
/// radius scan.
pub const LARGE_CORPUS: usize = 100_000;

const ENCODE_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct SidTable {
    pub item_ids: Vec<String>,
    pub sids: SidMatrix,
}

impl SidTable {
    pub fn new(item_ids: Vec<String>, sids: SidMatrix) -> Result<Self> {
        if item_ids.len() != sids.len() {
            return Err(Error::Shape(format!("{} ids for {} SIDs", item_ids.len(), sids.len())));
        }
        Ok(Self { item_ids, sids })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, row) in self.item_ids.iter().zip(self.sids.rows()) {
            let codes: Vec<String> = row.iter().map(u32::to_string).collect();
            let _ = writeln!(out, "{id}\t{}", codes.join(","));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut ids = Vec::new();
        let mut rows: Vec<Vec<u32>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Line { line: line_no, msg };
            let (id, codes) = line
                .split_once('\t')
                .ok_or_else(|| err("expected item_id<TAB>codes".into()))?;
            let row = codes
                .split(',')
                .map(|c| c.trim().parse::<u32>().map_err(|e| err(format!("bad code {c:?}: {e}"))))
                .collect::<Result<Vec<u32>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(err(format!("{} codes, earlier lines have {}", row.len(), first.len())));
                }
            }
            ids.push(id.to_string());
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Data("SID table is empty".into()));
        }
        Self::new(ids, SidMatrix::from_rows(&rows)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Encodes every corpus item with the trained encoder and codebooks.
pub fn encode_corpus(model: &ModelState, corpus: &ItemCorpus) -> Result<SidTable> {
    if corpus.dim() != model.encoder.in_dim() {
        return Err(Error::ConfigMismatch(format!(
            "corpus has d_in = {}, model expects {}",
            corpus.dim(),
            model.encoder.in_dim()
        )));
    }
    let depth = model.codebooks.depth();
    let mut codes = Vec::with_capacity(corpus.len() * depth);
    let feats = corpus.features();
    let mut start = 0;
    while start < corpus.len() {
        let end = (start + ENCODE_CHUNK).min(corpus.len());
        let (z, _) = mlp_apply(&model.encoder, &feats.slice_rows(start, end))?;
        let q = rq_encode(&model.codebooks, &z)?;
        for row in q.sids.rows() {
            codes.extend_from_slice(row);
        }
        start = end;
    }
    SidTable::new(corpus.item_ids().to_vec(), SidMatrix::new(depth, codes)?)
}

/// Shannon entropy (natural log) of the empirical SID distribution.
pub fn sid_entropy(sids: &SidMatrix) -> Result<f64> {
    if sids.is_empty() {
        return Err(Error::Data("entropy of an empty SID table".into()));
    }
    let n = sids.len() as f64;
    // sorted so the sum does not depend on hash order
    let mut counts: Vec<usize> = sid_counts(sids).into_values().collect();
    counts.sort_unstable();
    let mut h = 0.0;
    for &c in &counts {
        let p = c as f64 / n;
        h -= p * p.ln();
    }
    Ok(h)
}

fn sid_counts(sids: &SidMatrix) -> HashMap<&[u32], usize> {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    for row in sids.rows() {
        *counts.entry(row).or_default() += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionReport {
    pub items: usize,
    pub distinct_sids: usize,
    /// Items whose SID is shared with at least one other item.
    pub colliding_items: usize,
    pub full_collision_rate: f64,
    /// Unordered item pairs at Hamming distance exactly `r`, for `r = 0..=R`.
    pub pairs_at_distance: Vec<u64>,
    /// Items with another item within Hamming distance `r`, for `r = 0..=R`.
    pub items_within: Vec<u64>,
    pub entropy: f64,
    pub utilization: UtilizationStats,
}

/// Collision statistics for a corpus SID table. `radius` must lie in
/// `[0, L]`; radii above 0 scan all pairs and need `allow_large` for
/// corpora above [`LARGE_CORPUS`].
pub fn collision_report(
    sids: &SidMatrix,
    codebook_size: usize,
    radius: u32,
    allow_large: bool,
) -> Result<CollisionReport> {
    let n = sids.len();
    if n == 0 {
        return Err(Error::Data("SID table is empty".into()));
    }
    let depth = sids.depth();
    if radius as usize > depth {
        return Err(Error::Config(format!("radius {radius} exceeds SID depth {depth}")));
    }
    if radius > 0 && n > LARGE_CORPUS && !allow_large {
        return Err(Error::Config(format!(
            "{n} items exceed {LARGE_CORPUS}; the radius scan is quadratic, pass --allow-large"
        )));
    }
    let counts = sid_counts(sids);
    let colliding_items: usize = counts.values().filter(|&&c| c > 1).sum();
    let r = radius as usize;
    let mut pairs_at_distance = vec![0u64; r + 1];
    let mut items_within = vec![0u64; r + 1];
    pairs_at_distance[0] = counts.values().map(|&c| (c as u64) * (c as u64 - 1) / 2).sum();
    if r == 0 {
        items_within[0] = colliding_items as u64;
    } else {
        let mut nearest = vec![u32::MAX; n];
        for i in 0..n {
            let a = sids.row(i);
            for j in (i + 1)..n {
                let h = a.iter().zip(sids.row(j)).filter(|(x, y)| x != y).count() as u32;
                if h as usize <= r {
                    if h > 0 {
                        pairs_at_distance[h as usize] += 1;
                    }
                    nearest[i] = nearest[i].min(h);
                    nearest[j] = nearest[j].min(h);
                }
            }
        }
        for &h in &nearest {
            for slot in items_within.iter_mut().skip(h.min(radius + 1) as usize) {
                *slot += 1;
            }
        }
    }
    Ok(CollisionReport {
        items: n,
        distinct_sids: counts.len(),
        colliding_items,
        full_collision_rate: colliding_items as f64 / n as f64,
        pairs_at_distance,
        items_within,
        entropy: sid_entropy(sids)?,
        utilization: utilization(sids, codebook_size)?,
    })
}

impl CollisionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "items: {}", self.items);
        let _ = writeln!(s, "distinct_sids: {}", self.distinct_sids);
        let _ = writeln!(s, "colliding_items: {}", self.colliding_items);
        let _ = writeln!(s, "full_collision_rate: {:.6}", self.full_collision_rate);
        let _ = writeln!(s, "entropy: {:.6}", self.entropy);
        for (r, (p, w)) in self.pairs_at_distance.iter().zip(&self.items_within).enumerate() {
            let _ = writeln!(s, "radius {r}: pairs_at_distance={p} items_within={w}");
        }
        for (l, (p, dead)) in self
            .utilization
            .perplexity
            .iter()
            .zip(&self.utilization.dead_codes)
            .enumerate()
        {
            let _ = writeln!(s, "layer {}: perplexity={p:.4} dead_codes={dead}", l + 1);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("radius,pairs_at_distance,items_within\n");
        for (r, (p, w)) in self.pairs_at_distance.iter().zip(&self.items_within).enumerate() {
            let _ = writeln!(s, "{r},{p},{w}");
        }
        s
    }
}
