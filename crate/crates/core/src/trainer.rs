//! Training loop, configuration file, checkpoints and the metric log.
//!
//! Config file: `key = value` lines, `#` comments, unknown keys rejected.
//!
//! Checkpoint (little-endian): `"QSCK" | version u32` followed by five
//! sections, each `len u64 | payload`:
//!
//! 1. config echo, UTF-8, exactly [`TrainConfig::to_text`];
//! 2. parameters: `count u32`, then per tensor `rows u32 | cols u32 | f64…`;
//! 3. optimizer: `t u64 | count u32`, first moments, then second moments,
//!    each as `len u64 | f64…`;
//! 4. rng state (opaque);
//! 5. trainer state: `step u64 | L u32 | K u32 | L·K × last-used step u64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::collision::excluded_pairs_in_omega;
use crate::data::{sample_batch, ItemCorpus, PairSet};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossWeights, Objective, ObjectiveOptions};
use crate::model::{ModelDims, ModelState};
use crate::numerics::{mlp_apply, AdamConfig, AdamState};
use crate::rq::{init_codebooks, utilization};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub d_in: usize,
    pub d: usize,
    pub layers: usize,
    pub codebook_size: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup_size: usize,
    pub init_iters: usize,
    pub seed: u64,
    pub enable_hamr: bool,
    pub enable_cvpm: bool,
    pub enable_cl: bool,
    pub mask_target_ids: bool,
    pub codebook_weight_decay: bool,
    pub dead_code_reset: bool,
    pub dead_code_window: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            d: 32,
            layers: 3,
            codebook_size: 256,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            batch_size: 256,
            steps: 1000,
            warmup_size: 4096,
            init_iters: 10,
            seed: 0,
            enable_hamr: true,
            enable_cvpm: true,
            enable_cl: true,
            mask_target_ids: false,
            codebook_weight_decay: false,
            dead_code_reset: false,
            dead_code_window: 50,
            log_every: 10,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "d_in",
    "d",
    "layers",
    "codebook_size",
    "lambda_cl",
    "lambda_full",
    "lambda_partial",
    "m_full",
    "m_partial",
    "beta",
    "tau",
    "eps",
    "radius",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "steps",
    "warmup_size",
    "init_iters",
    "seed",
    "enable_hamr",
    "enable_cvpm",
    "enable_cl",
    "mask_target_ids",
    "codebook_weight_decay",
    "dead_code_reset",
    "dead_code_window",
    "log_every",
];

impl TrainConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.d_in,
            d: self.d,
            depth: self.layers,
            codebook_size: self.codebook_size,
        }
    }

    /// Loss weights after ablation flags are applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.enable_cl {
            w.lambda_cl = 0.0;
        }
        if !self.enable_hamr {
            w.lambda_full = 0.0;
            w.lambda_partial = 0.0;
        }
        w
    }

    pub fn objective_options(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            use_cvpm: self.enable_cvpm,
            mask_target_ids: self.mask_target_ids,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d == 0 || self.layers == 0 || self.codebook_size == 0 {
            return Err(Error::Config(
                "d_in, d, layers and codebook_size must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if self.warmup_size < self.codebook_size {
            return Err(Error::Config(format!(
                "warmup_size {} is smaller than codebook_size {}",
                self.warmup_size, self.codebook_size
            )));
        }
        let a = &self.adam;
        if !(a.lr > 0.0) || !(a.weight_decay >= 0.0) || !(a.eps > 0.0) {
            return Err(Error::Config("lr and adam_eps must be > 0, weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        self.weights.validate(self.layers)
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let a = &self.adam;
        let values: Vec<String> = vec![
            self.d_in.to_string(),
            self.d.to_string(),
            self.layers.to_string(),
            self.codebook_size.to_string(),
            w.lambda_cl.to_string(),
            w.lambda_full.to_string(),
            w.lambda_partial.to_string(),
            w.m_full.to_string(),
            w.m_partial.to_string(),
            w.beta.to_string(),
            w.tau.to_string(),
            w.eps.to_string(),
            w.radius.to_string(),
            a.lr.to_string(),
            a.weight_decay.to_string(),
            a.beta1.to_string(),
            a.beta2.to_string(),
            a.eps.to_string(),
            self.batch_size.to_string(),
            self.steps.to_string(),
            self.warmup_size.to_string(),
            self.init_iters.to_string(),
            self.seed.to_string(),
            self.enable_hamr.to_string(),
            self.enable_cvpm.to_string(),
            self.enable_cl.to_string(),
            self.mask_target_ids.to_string(),
            self.codebook_weight_decay.to_string(),
            self.dead_code_reset.to_string(),
            self.dead_code_window.to_string(),
            self.log_every.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses a config file body. Keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value, found {line:?}")))?;
            c.set(key.trim(), value.trim())
                .map_err(|msg| Error::Config(format!("line {line_no}: {msg}")))?;
        }
        Ok(c)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{key}: cannot parse {v:?}: {e}"))
        }
        let w = &mut self.weights;
        let a = &mut self.adam;
        match key {
            "d_in" => self.d_in = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "codebook_size" => self.codebook_size = num(key, value)?,
            "lambda_cl" => w.lambda_cl = num(key, value)?,
            "lambda_full" => w.lambda_full = num(key, value)?,
            "lambda_partial" => w.lambda_partial = num(key, value)?,
            "m_full" => w.m_full = num(key, value)?,
            "m_partial" => w.m_partial = num(key, value)?,
            "beta" => w.beta = num(key, value)?,
            "tau" => w.tau = num(key, value)?,
            "eps" => w.eps = num(key, value)?,
            "radius" => w.radius = num(key, value)?,
            "lr" => a.lr = num(key, value)?,
            "weight_decay" => a.weight_decay = num(key, value)?,
            "beta1" => a.beta1 = num(key, value)?,
            "beta2" => a.beta2 = num(key, value)?,
            "adam_eps" => a.eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "warmup_size" => self.warmup_size = num(key, value)?,
            "init_iters" => self.init_iters = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "enable_hamr" => self.enable_hamr = num(key, value)?,
            "enable_cvpm" => self.enable_cvpm = num(key, value)?,
            "enable_cl" => self.enable_cl = num(key, value)?,
            "mask_target_ids" => self.mask_target_ids = num(key, value)?,
            "codebook_weight_decay" => self.codebook_weight_decay = num(key, value)?,
            "dead_code_reset" => self.dead_code_reset = num(key, value)?,
            "dead_code_window" => self.dead_code_window = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Equality on everything except the step budget.
    fn compatible_with(&self, other: &TrainConfig) -> std::result::Result<(), String> {
        let a = TrainConfig {
            steps: 0,
            ..self.clone()
        };
        let b = TrainConfig {
            steps: 0,
            ..other.clone()
        };
        if a == b {
            return Ok(());
        }
        let diffs: Vec<String> = a
            .to_text()
            .lines()
            .zip(b.to_text().lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| format!("checkpoint has `{x}`, requested `{y}`"))
            .collect();
        Err(diffs.join("; "))
    }
}

/// Serializable state of the training random stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.seed.to_vec();
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != 56 {
            return None;
        }
        Some(Self {
            seed: b[..32].try_into().ok()?,
            stream: u64::from_le_bytes(b[32..40].try_into().ok()?),
            word_pos: u128::from_le_bytes(b[40..56].try_into().ok()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelState,
    pub adam: AdamState,
    pub step: u64,
    pub rng: RngState,
    /// `code_last_used[l][k]`: last step at which code `k` of layer `l` was
    /// picked in a batch (initialization counts as step 0).
    pub code_last_used: Vec<Vec<u64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let section = |out: &mut Vec<u8>, body: Vec<u8>| {
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        };

        section(&mut out, self.config.to_text().into_bytes());

        let mut params = Vec::new();
        let shapes = self.model.tensor_shapes();
        params.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for ((r, c), t) in shapes.iter().zip(self.model.tensors()) {
            params.extend_from_slice(&(*r as u32).to_le_bytes());
            params.extend_from_slice(&(*c as u32).to_le_bytes());
            t.iter().for_each(|v| params.extend_from_slice(&v.to_le_bytes()));
        }
        section(&mut out, params);

        let mut opt = Vec::new();
        opt.extend_from_slice(&self.adam.step.to_le_bytes());
        opt.extend_from_slice(&(self.adam.m.len() as u32).to_le_bytes());
        for t in self.adam.m.iter().chain(&self.adam.v) {
            opt.extend_from_slice(&(t.len() as u64).to_le_bytes());
            t.iter().for_each(|v| opt.extend_from_slice(&v.to_le_bytes()));
        }
        section(&mut out, opt);

        section(&mut out, self.rng.to_bytes());

        let mut tr = Vec::new();
        tr.extend_from_slice(&self.step.to_le_bytes());
        tr.extend_from_slice(&(self.code_last_used.len() as u32).to_le_bytes());
        tr.extend_from_slice(&(self.code_last_used.first().map_or(0, Vec::len) as u32).to_le_bytes());
        for layer in &self.code_last_used {
            layer.iter().for_each(|v| tr.extend_from_slice(&v.to_le_bytes()));
        }
        section(&mut out, tr);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected \"QSCK\"".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }

        let cfg_section = r.section()?;
        let text = std::str::from_utf8(cfg_section.buf).map_err(|e| Error::Format {
            offset: cfg_section.base as u64,
            msg: format!("config echo is not UTF-8: {e}"),
        })?;
        let config = TrainConfig::parse(text)
            .and_then(|c| c.validate().map(|_| c))
            .map_err(|e| Error::Format {
                offset: cfg_section.base as u64,
                msg: format!("config echo: {e}"),
            })?;

        let mut p = r.section()?;
        let mut model = ModelState::init(config.dims(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let shapes = model.tensor_shapes();
        let count = p.u32()? as usize;
        if count != shapes.len() {
            return Err(p.err(format!("{count} parameter tensors, config implies {}", shapes.len())));
        }
        for (t, &(rows, cols)) in model.tensors_mut().into_iter().zip(&shapes) {
            let (fr, fc) = (p.u32()? as usize, p.u32()? as usize);
            if (fr, fc) != (rows, cols) {
                return Err(p.err(format!("tensor is {fr}x{fc}, expected {rows}x{cols}")));
            }
            for v in t.iter_mut() {
                *v = p.f64()?;
            }
        }
        p.finish()?;

        let mut o = r.section()?;
        let t = o.u64()?;
        let n = o.u32()? as usize;
        let lens: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        if n != lens.len() {
            return Err(o.err(format!("{n} optimizer tensors, expected {}", lens.len())));
        }
        let mut adam = AdamState::new(config.adam, &lens);
        adam.step = t;
        for slot in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            let len = o.u64()? as usize;
            if len != slot.len() {
                return Err(o.err(format!("optimizer tensor of {len}, expected {}", slot.len())));
            }
            for v in slot.iter_mut() {
                *v = o.f64()?;
            }
        }
        o.finish()?;

        let rs = r.section()?;
        let rng = RngState::from_bytes(rs.buf).ok_or_else(|| rs.err_at(0, "bad rng state".into()))?;

        let mut tr = r.section()?;
        let step = tr.u64()?;
        let (l, k) = (tr.u32()? as usize, tr.u32()? as usize);
        if (l, k) != (config.layers, config.codebook_size) {
            return Err(tr.err(format!("usage table {l}x{k} does not match config")));
        }
        let mut code_last_used = vec![vec![0u64; k]; l];
        for layer in code_last_used.iter_mut() {
            for v in layer.iter_mut() {
                *v = tr.u64()?;
            }
        }
        tr.finish()?;
        if r.pos != buf.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Self {
            config,
            model,
            adam,
            step,
            rng,
            code_last_used,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: expected {n} bytes, found {left}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self) -> Result<Section<'a>> {
        let len = self.u64()? as usize;
        let base = self.pos;
        let buf = self.take(len)?;
        Ok(Section { buf, pos: 0, base })
    }
}

struct Section<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Section<'a> {
    fn err_at(&self, at: usize, msg: String) -> Error {
        Error::Format {
            offset: (self.base + at) as u64,
            msg,
        }
    }

    fn err(&self, msg: String) -> Error {
        self.err_at(self.pos, msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "section truncated: expected {n} bytes, found {}",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} unread bytes in section", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub l_rec: f64,
    pub l_rq: f64,
    pub l_cl: f64,
    pub l_hamr: f64,
    pub l_total: f64,
    pub omega_full: usize,
    pub omega_partial: usize,
    pub perplexity: Vec<f64>,
    pub batch_full_collision_rate: f64,
    /// Constructed positives or same-item pairs found in the conflict sets.
    pub excluded_in_omega: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub layers: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn header(layers: usize) -> String {
        let mut h = String::from("step,l_rec,l_rq,l_cl,l_hamr,l_total,omega_full,omega_partial");
        for l in 1..=layers {
            let _ = write!(h, ",perplexity_l{l}");
        }
        h.push_str(",batch_full_collision_rate,excluded_in_omega");
        h
    }

    pub fn row_csv(r: &MetricRow) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{}",
            r.step, r.l_rec, r.l_rq, r.l_cl, r.l_hamr, r.l_total, r.omega_full, r.omega_partial
        );
        for p in &r.perplexity {
            let _ = write!(s, ",{p}");
        }
        let _ = write!(s, ",{},{}", r.batch_full_collision_rate, r.excluded_in_omega);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.layers);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::row_csv(r));
            out.push('\n');
        }
        out
    }

    /// Appends rows of a continuation run.
    pub fn extend(&mut self, other: MetricLog) {
        self.rows.extend(other.rows);
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: MetricLog,
    /// Sum of `excluded_in_omega` over every step run, logged or not.
    pub excluded_in_omega_total: u64,
    /// Steps at which `l_cl` or `l_hamr` was non-zero.
    pub steps_with_aux_loss: u64,
}

/// Fraction of instances sharing their full SID with an instance of a
/// different item.
fn batch_full_collision_rate(obj: &Objective) -> f64 {
    let n = obj.layout.instances();
    if n == 0 {
        return 0.0;
    }
    let ids = obj.layout.item_ids();
    let colliding = (0..n)
        .filter(|&i| (0..n).any(|j| ids[j] != ids[i] && obj.view.hamming.get(i, j) == 0))
        .count();
    colliding as f64 / n as f64
}

/// Initializes a model and codebooks from `config` and trains for
/// `config.steps` steps.
pub fn train(config: &TrainConfig, corpus: &ItemCorpus, pairs: &PairSet) -> Result<TrainOutcome> {
    let ck = initialize(config, corpus)?;
    run_steps(ck, corpus, pairs, config.steps)
}

/// Step-0 checkpoint: random networks, codebooks from k-means over the
/// untrained encoder's outputs on a warmup sample.
pub fn initialize(config: &TrainConfig, corpus: &ItemCorpus) -> Result<Checkpoint> {
    config.validate()?;
    if corpus.dim() != config.d_in {
        return Err(Error::ConfigMismatch(format!(
            "corpus has d_in = {}, config says {}",
            corpus.dim(),
            config.d_in
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ModelState::init(config.dims(), &mut rng)?;
    let n = corpus.len();
    let n_warm = n.min(config.warmup_size);
    if n_warm < config.codebook_size {
        return Err(Error::Data(format!(
            "insufficient warmup: {n_warm} items for {} codewords",
            config.codebook_size
        )));
    }
    let warm_idx: Vec<usize> = if n > n_warm {
        let mut idx = sample(&mut rng, n, n_warm).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let (z_warm, _) = mlp_apply(&model.encoder, &corpus.features().gather_rows(&warm_idx))?;
    let init_seed: u64 = rng.random();
    model.codebooks = init_codebooks(
        &z_warm,
        config.codebook_size,
        config.layers,
        config.init_iters,
        init_seed,
    )?;
    let lens: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    Ok(Checkpoint {
        config: config.clone(),
        adam: AdamState::new(config.adam, &lens),
        model,
        step: 0,
        rng: RngState::capture(&rng),
        code_last_used: vec![vec![0; config.codebook_size]; config.layers],
    })
}

/// Continues training from `checkpoint` for `extra_steps` more steps.
/// `config` must match the checkpoint's own config apart from `steps`; the
/// returned checkpoint's config has `steps` set to the new total.
pub fn resume(
    checkpoint: Checkpoint,
    config: &TrainConfig,
    corpus: &ItemCorpus,
    pairs: &PairSet,
    extra_steps: u64,
) -> Result<TrainOutcome> {
    checkpoint
        .config
        .compatible_with(config)
        .map_err(Error::ConfigMismatch)?;
    if corpus.dim() != checkpoint.config.d_in {
        return Err(Error::ConfigMismatch(format!(
            "corpus has d_in = {}, checkpoint expects {}",
            corpus.dim(),
            checkpoint.config.d_in
        )));
    }
    let mut checkpoint = checkpoint;
    // The echo records the total run length, as a straight run would.
    checkpoint.config.steps = checkpoint.step + extra_steps;
    run_steps(checkpoint, corpus, pairs, extra_steps)
}

fn run_steps(mut ck: Checkpoint, corpus: &ItemCorpus, pairs: &PairSet, steps: u64) -> Result<TrainOutcome> {
    let config = ck.config.clone();
    let weights = config.effective_weights();
    let opts = config.objective_options();
    let decay = ck.model.decay_mask(config.codebook_weight_decay);
    let mut rng = ck.rng.restore();
    let mut log = MetricLog {
        layers: config.layers,
        rows: Vec::new(),
    };
    let mut excluded_total = 0u64;
    let mut aux_steps = 0u64;
    let jitter = Normal::new(0.0, 0.01).expect("valid sigma");

    for _ in 0..steps {
        let step = ck.step + 1;
        let batch = sample_batch(pairs, corpus, config.batch_size, &mut rng)?;
        let obj = match total_loss(&batch, &ck.model, &weights, &opts) {
            Ok(o) => o,
            Err(Error::NonFinite(msg)) => return Err(diverged(ck, step, msg)),
            Err(e) => return Err(e),
        };
        let b = &obj.breakdown;
        let excluded = excluded_pairs_in_omega(&obj.view, &obj.layout);
        excluded_total += excluded as u64;
        if b.l_cl != 0.0 || b.l_hamr != 0.0 {
            aux_steps += 1;
        }
        if step == 1 || step.is_multiple_of(config.log_every) {
            let util = utilization(&obj.quantized.sids, config.codebook_size)?;
            log.rows.push(MetricRow {
                step,
                l_rec: b.l_rec,
                l_rq: b.l_rq,
                l_cl: b.l_cl,
                l_hamr: b.l_hamr,
                l_total: b.l_total,
                omega_full: obj.view.omega_full.len(),
                omega_partial: obj.view.omega_partial.len(),
                perplexity: util.perplexity,
                batch_full_collision_rate: batch_full_collision_rate(&obj),
                excluded_in_omega: excluded,
            });
        }

        let last_good = ck.clone();
        {
            let grads = obj.grads.tensors();
            let mut params = ck.model.tensors_mut();
            if let Err(e) = ck.adam.step(&mut params, &grads, &decay) {
                drop(params);
                return match e {
                    Error::NonFinite(msg) => Err(diverged(last_good, step, msg)),
                    other => Err(other),
                };
            }
        }
        if let Some(bad) = ck.model.tensors().iter().position(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(diverged(
                last_good,
                step,
                format!("parameter tensor {bad} became non-finite"),
            ));
        }

        for (l, layer) in ck.code_last_used.iter_mut().enumerate() {
            for row in obj.quantized.sids.rows() {
                layer[row[l] as usize] = step;
            }
        }
        if config.dead_code_reset {
            reset_dead_codes(&mut ck, &obj, step, &mut rng, &jitter);
        }
        ck.step = step;
    }
    ck.rng = RngState::capture(&rng);
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        excluded_in_omega_total: excluded_total,
        steps_with_aux_loss: aux_steps,
    })
}

/// Codes unused for `dead_code_window` steps are moved onto a random
/// incoming residual of the current batch plus small noise; their optimizer
/// moments are cleared.
fn reset_dead_codes(ck: &mut Checkpoint, obj: &Objective, step: u64, rng: &mut ChaCha8Rng, jitter: &Normal<f64>) {
    let window = ck.config.dead_code_window;
    let d = ck.config.d;
    let n = obj.z.rows();
    let net_tensors = ck.model.encoder.tensors().len() + ck.model.decoder.tensors().len();
    for l in 0..ck.config.layers {
        for k in 0..ck.config.codebook_size {
            if step - ck.code_last_used[l][k] < window {
                continue;
            }
            let src = rng.random_range(0..n);
            let residual = obj.quantized.residuals[l].row(src);
            let row = ck.model.codebooks.layer_mut(l).row_mut(k);
            for (c, r) in row.iter_mut().zip(residual) {
                *c = r + jitter.sample(rng);
            }
            let t = net_tensors + l;
            ck.adam.m[t][k * d..(k + 1) * d].fill(0.0);
            ck.adam.v[t][k * d..(k + 1) * d].fill(0.0);
            ck.code_last_used[l][k] = step;
        }
    }
}

fn diverged(last_good: Checkpoint, step: u64, msg: String) -> Error {
    Error::Diverged {
        step,
        msg,
        last_good: Box::new(last_good),
    }
}
