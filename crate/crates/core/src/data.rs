//! Corpus and pair ingestion, the co-occurrence pair builder, the synthetic
//! clustered corpus, and batch sampling.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! "QSID" | version u32 = 1 | N u64 | d_in u32 |
//! N × [ id_len u16 | id bytes (UTF-8) | d_in × f32 ]
//! ```
//!
//! Pairs are text, one `trigger<TAB>target[<TAB>weight]` per line, `#` lines
//! ignored. Interactions are `user<TAB>item` lines.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"QSID";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ItemCorpus {
    item_ids: Vec<String>,
    features: Matrix,
    index: HashMap<String, usize>,
}

impl ItemCorpus {
    pub fn new(item_ids: Vec<String>, features: Matrix) -> Result<Self> {
        if item_ids.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} ids for {} feature rows",
                item_ids.len(),
                features.rows()
            )));
        }
        let mut index = HashMap::with_capacity(item_ids.len());
        for (i, id) in item_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate item id {id:?}")));
            }
        }
        Ok(Self {
            item_ids,
            features,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }
}

pub fn encode_embeddings(corpus: &ItemCorpus) -> Result<Vec<u8>> {
    let d = corpus.dim();
    let mut out = Vec::with_capacity(HEADER_LEN as usize + corpus.len() * (2 + 16 + 4 * d));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for (id, row) in corpus.item_ids.iter().zip(corpus.features.row_iter()) {
        let len =
            u16::try_from(id.len()).map_err(|_| Error::Data(format!("item id of {} bytes exceeds u16", id.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if remaining < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: expected {n} bytes, found {remaining}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_embeddings(buf: &[u8]) -> Result<ItemCorpus> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"QSID\""),
        });
    }
    let version = r.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let n = r.u64("item count")?;
    let d = r.u32("dimension")? as usize;
    if n > 0 && d == 0 {
        return Err(Error::Format {
            offset: 16,
            msg: "dimension-0 rows".into(),
        });
    }
    // each record needs at least its length prefix and features
    let min_record = 2 + 4 * d as u64;
    let left = (buf.len() - r.pos) as u64;
    if n.saturating_mul(min_record) > left {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!(
                "truncated payload: {n} records need at least {} bytes, found {left}",
                n.saturating_mul(min_record)
            ),
        });
    }
    let n = n as usize;
    let mut ids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    let mut seen = HashMap::with_capacity(n);
    for i in 0..n {
        let start = r.pos as u64;
        let len = r.u16("id length")? as usize;
        let raw = r.take(len, "item id")?;
        let id = std::str::from_utf8(raw)
            .map_err(|e| Error::Format {
                offset: start + 2,
                msg: format!("item {i}: id is not UTF-8 ({e})"),
            })?
            .to_owned();
        if seen.insert(id.clone(), i).is_some() {
            return Err(Error::Format {
                offset: start,
                msg: format!("duplicate item id {id:?}"),
            });
        }
        let raw = r.take(4 * d, "feature row")?;
        data.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        );
        ids.push(id);
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    ItemCorpus::new(ids, Matrix::from_vec(n, d, data)?)
}

pub fn write_embeddings(corpus: &ItemCorpus, path: &Path) -> Result<()> {
    fs::write(path, encode_embeddings(corpus)?)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<ItemCorpus> {
    decode_embeddings(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemPair {
    pub trigger: String,
    pub target: String,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<ItemPair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// What to do with pair lines that reference unknown ids or pair an item
/// with itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairPolicy {
    #[default]
    Strict,
    SkipInvalid,
}

pub fn parse_pairs(text: &str, corpus: &ItemCorpus, policy: PairPolicy) -> Result<PairSet> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::Line {
                line: line_no,
                msg: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let weight = match fields.get(2) {
            Some(w) => Some(w.trim().parse::<f64>().map_err(|e| Error::Line {
                line: line_no,
                msg: format!("bad weight {w:?}: {e}"),
            })?),
            None => None,
        };
        let (trigger, target) = (fields[0], fields[1]);
        let problem = if corpus.index_of(trigger).is_none() {
            Some(format!("unknown trigger id {trigger:?}"))
        } else if corpus.index_of(target).is_none() {
            Some(format!("unknown target id {target:?}"))
        } else if trigger == target {
            Some(format!("self-pair {trigger:?}"))
        } else {
            None
        };
        match (problem, policy) {
            (Some(msg), PairPolicy::Strict) => return Err(Error::Line { line: line_no, msg }),
            (Some(msg), PairPolicy::SkipInvalid) => {
                log::debug!("skipping pair line {line_no}: {msg}");
            }
            (None, _) => pairs.push(ItemPair {
                trigger: trigger.to_owned(),
                target: target.to_owned(),
                weight,
            }),
        }
    }
    Ok(PairSet { pairs })
}

pub fn read_pairs(path: &Path, corpus: &ItemCorpus, policy: PairPolicy) -> Result<PairSet> {
    parse_pairs(&fs::read_to_string(path)?, corpus, policy)
}

pub fn format_pairs(pairs: &PairSet) -> String {
    let mut out = String::new();
    for p in &pairs.pairs {
        out.push_str(&p.trigger);
        out.push('\t');
        out.push_str(&p.target);
        if let Some(w) = p.weight {
            out.push('\t');
            out.push_str(&w.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn write_pairs(pairs: &PairSet, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(format_pairs(pairs).as_bytes())?;
    Ok(())
}

pub fn parse_interactions(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split('\t').collect::<Vec<_>>()[..] {
            [user, item] => out.push((user.to_owned(), item.to_owned())),
            ref f => {
                return Err(Error::Line {
                    line: n + 1,
                    msg: format!("expected user<TAB>item, found {} fields", f.len()),
                })
            }
        }
    }
    Ok(out)
}

/// Emits `(i, j)` with `i < j` for every item pair that at least
/// `min_cooccur` distinct users interacted with, weighted by that count, in
/// lexicographic order.
pub fn build_cooccurrence_pairs(interactions: &[(String, String)], min_cooccur: usize) -> PairSet {
    let mut by_user: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (u, i) in interactions {
        by_user.entry(u.as_str()).or_default().insert(i.as_str());
    }
    let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for items in by_user.values() {
        let items: Vec<&str> = items.iter().copied().collect();
        for a in 0..items.len() {
            for b in (a + 1)..items.len() {
                *counts.entry((items[a], items[b])).or_default() += 1;
            }
        }
    }
    let pairs = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_cooccur.max(1))
        .map(|((a, b), c)| ItemPair {
            trigger: a.to_owned(),
            target: b.to_owned(),
            weight: Some(c as f64),
        })
        .collect();
    PairSet { pairs }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: ItemCorpus,
    pub pairs: PairSet,
    /// Cluster index of each item.
    pub labels: Vec<usize>,
    pub centers: Matrix,
}

/// Items scattered around unit-sphere cluster centers with isotropic Gaussian
/// noise; each item is paired with one other member of its cluster.
/// Features are rounded to `f32` so they survive the embedding file exactly.
pub fn synth_clustered_corpus(
    n_clusters: usize,
    per_cluster: usize,
    d_in: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SynthCorpus> {
    if n_clusters < 2 {
        return Err(Error::Config(format!("need at least 2 clusters, got {n_clusters}")));
    }
    if per_cluster == 0 || d_in == 0 {
        return Err(Error::Config("per_cluster and d_in must be positive".into()));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Matrix::zeros(n_clusters, d_in);
    for c in 0..n_clusters {
        let row = centers.row_mut(c);
        loop {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-9 {
                row.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    let noise = Normal::new(0.0, noise_sigma).expect("sigma validated");
    let n = n_clusters * per_cluster;
    let width = (n.max(2) - 1).to_string().len();
    let mut ids = Vec::with_capacity(n);
    let mut feats = Matrix::zeros(n, d_in);
    let mut labels = Vec::with_capacity(n);
    for c in 0..n_clusters {
        for j in 0..per_cluster {
            let idx = c * per_cluster + j;
            ids.push(format!("item{idx:0width$}"));
            labels.push(c);
            for (v, cv) in feats.row_mut(idx).iter_mut().zip(centers.row(c)) {
                let x = if noise_sigma > 0.0 {
                    cv + noise.sample(&mut rng)
                } else {
                    *cv
                };
                *v = x as f32 as f64;
            }
        }
    }
    let mut pairs = Vec::new();
    if per_cluster >= 2 {
        for idx in 0..n {
            let c = labels[idx];
            let mut other = c * per_cluster + rng.random_range(0..per_cluster - 1);
            if other >= idx {
                other += 1;
            }
            pairs.push(ItemPair {
                trigger: ids[idx].clone(),
                target: ids[other].clone(),
                weight: None,
            });
        }
    }
    Ok(SynthCorpus {
        corpus: ItemCorpus::new(ids, feats)?,
        pairs: PairSet { pairs },
        labels,
        centers,
    })
}

/// `B` trigger/target pairs with their features, triggers first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub trigger_features: Matrix,
    pub target_features: Matrix,
    pub trigger_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.trigger_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trigger_ids.is_empty()
    }

    /// Builds a batch from corpus row indices.
    pub fn from_indices(corpus: &ItemCorpus, triggers: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if triggers.len() != targets.len() {
            return Err(Error::Shape("trigger/target count mismatch".into()));
        }
        if let Some(&bad) = triggers.iter().chain(&targets).find(|&&i| i >= corpus.len()) {
            return Err(Error::Data(format!("row {bad} outside corpus of {}", corpus.len())));
        }
        Ok(Self {
            trigger_features: corpus.features().gather_rows(&triggers),
            target_features: corpus.features().gather_rows(&targets),
            trigger_ids: triggers,
            target_ids: targets,
        })
    }
}

/// Uniform sampling of `b` pairs with replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    pairs: &PairSet,
    corpus: &ItemCorpus,
    b: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot sample from an empty pair set".into()));
    }
    let mut triggers = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for _ in 0..b {
        let p = &pairs.pairs[rng.random_range(0..pairs.len())];
        let lookup = |id: &str| {
            corpus
                .index_of(id)
                .ok_or_else(|| Error::Data(format!("pair references unknown id {id:?}")))
        };
        triggers.push(lookup(&p.trigger)?);
        targets.push(lookup(&p.target)?);
    }
    TrainBatch::from_indices(corpus, triggers, targets)
}
