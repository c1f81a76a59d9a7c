//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    build_cooccurrence_pairs, parse_interactions, read_embeddings, read_pairs, synth_clustered_corpus,
    write_embeddings, write_pairs, PairPolicy,
};
use crate::diagnostics::{collision_report, encode_corpus, SidTable};
use crate::error::{Error, Result};
use crate::gradcheck::{run_all, TOLERANCE};
use crate::numerics::ProbeOptions;
use crate::trainer::{resume, train, Checkpoint, TrainConfig, TrainOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "quasid",
    version,
    about = "Semantic ID learning with collision-aware repulsion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Emit a clustered synthetic corpus and its same-cluster pairs.
    Synth(SynthArgs),
    /// Build item-to-item pairs from user<TAB>item interactions.
    Pairs(PairsArgs),
    /// Train and write a checkpoint plus a metrics CSV.
    Train(TrainArgs),
    /// Assign a SID to every corpus item.
    Encode(EncodeArgs),
    /// Collision report and entropy of a SID table.
    Diagnose(DiagnoseArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    clusters: usize,
    #[arg(long, default_value_t = 40)]
    per_cluster: usize,
    #[arg(long, default_value_t = 64)]
    d_in: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives `embeddings.qsid` and `pairs.tsv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PairsArgs {
    /// user<TAB>item lines.
    interactions: PathBuf,
    #[arg(long, default_value_t = 1)]
    min_cooccur: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    Hamr,
    Cvpm,
    Cl,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    radius: Option<u32>,
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    /// Continue from this checkpoint for `--steps` more steps.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Drop pair lines with unknown ids instead of failing.
    #[arg(long)]
    skip_invalid_pairs: bool,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// SID table (`item_id<TAB>s1,…,sL`).
    table: PathBuf,
    #[arg(long, default_value_t = 1)]
    radius: u32,
    /// Codebook size; defaults to the largest code seen plus one.
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    allow_large: bool,
    /// Also write the radius histogram as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("QUASID_LOG", "error")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.category().exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Pairs(a) => pairs(a),
        Command::Train(a) => train_cmd(a),
        Command::Encode(a) => encode(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    println!(
        "synth: clusters = {} per_cluster = {} d_in = {} noise = {} seed = {}",
        a.clusters, a.per_cluster, a.d_in, a.noise, a.seed
    );
    let s = synth_clustered_corpus(a.clusters, a.per_cluster, a.d_in, a.noise, a.seed)?;
    fs::create_dir_all(&a.out)?;
    write_embeddings(&s.corpus, &a.out.join("embeddings.qsid"))?;
    write_pairs(&s.pairs, &a.out.join("pairs.tsv"))?;
    println!(
        "wrote {} items and {} pairs to {}",
        s.corpus.len(),
        s.pairs.len(),
        a.out.display()
    );
    Ok(())
}

fn pairs(a: PairsArgs) -> Result<()> {
    println!(
        "pairs: interactions = {} min_cooccur = {}",
        a.interactions.display(),
        a.min_cooccur
    );
    let inter = parse_interactions(&fs::read_to_string(&a.interactions)?)?;
    let set = build_cooccurrence_pairs(&inter, a.min_cooccur);
    write_pairs(&set, &a.out)?;
    println!("wrote {} pairs to {}", set.len(), a.out.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(s) = a.steps {
        c.steps = s;
    }
    if let Some(r) = a.radius {
        c.weights.radius = r;
    }
    for ab in &a.ablate {
        match ab {
            Ablation::Hamr => c.enable_hamr = false,
            Ablation::Cvpm => c.enable_cvpm = false,
            Ablation::Cl => c.enable_cl = false,
        }
    }
    c.validate()?;
    Ok(c)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = resolve_config(&a)?;
    print!("{}", config.to_text());
    let corpus = read_embeddings(&a.corpus)?;
    let policy = if a.skip_invalid_pairs {
        PairPolicy::SkipInvalid
    } else {
        PairPolicy::Strict
    };
    let pair_set = read_pairs(&a.pairs, &corpus, policy)?;
    if pair_set.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let result = match &a.resume {
        Some(p) => resume(Checkpoint::load(p)?, &config, &corpus, &pair_set, config.steps),
        None => train(&config, &corpus, &pair_set),
    };
    let out = match result {
        Ok(o) => o,
        Err(Error::Diverged { step, msg, last_good }) => {
            let rescue = sibling(&a.out, "last_good");
            last_good.save(&rescue)?;
            eprintln!(
                "last finite checkpoint (step {}) saved to {}",
                last_good.step,
                rescue.display()
            );
            return Err(Error::Diverged { step, msg, last_good });
        }
        Err(e) => return Err(e),
    };
    finish_training(&a, &out)
}

fn finish_training(a: &TrainArgs, out: &TrainOutcome) -> Result<()> {
    out.checkpoint.save(&a.out)?;
    if let Some(m) = &a.metrics {
        fs::write(m, out.log.to_csv())?;
    }
    if let Some(last) = out.log.rows.last() {
        println!(
            "step {}: l_total = {:.6} l_rec = {:.6} l_rq = {:.6} l_cl = {:.6} l_hamr = {:.6}",
            last.step, last.l_total, last.l_rec, last.l_rq, last.l_cl, last.l_hamr
        );
    }
    println!("excluded pairs in conflict sets: {}", out.excluded_in_omega_total);
    println!(
        "checkpoint at step {} written to {}",
        out.checkpoint.step,
        a.out.display()
    );
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn encode(a: EncodeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    print!("{}", ck.config.to_text());
    let corpus = read_embeddings(&a.corpus)?;
    let table = encode_corpus(&ck.model, &corpus)?;
    table.write(&a.out)?;
    println!("wrote {} SIDs to {}", table.len(), a.out.display());
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let table = SidTable::read(&a.table)?;
    let k = match a.codebook_size {
        Some(k) => k,
        None => table.sids.rows().flatten().max().map_or(1, |&m| m as usize + 1),
    };
    println!(
        "diagnose: table = {} radius = {} codebook_size = {k} allow_large = {}",
        a.table.display(),
        a.radius,
        a.allow_large
    );
    let report = collision_report(&table.sids, k, a.radius, a.allow_large)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let probe = ProbeOptions {
        seed: a.seed,
        ..ProbeOptions::default()
    };
    println!(
        "gradcheck: seed = {} eps = {} abs_floor = {} tolerance = {TOLERANCE}",
        a.seed, probe.eps, probe.abs_floor
    );
    let results = run_all(a.seed, &probe)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!(
            "{:<10} max_rel_error = {:.3e} coords = {} {}",
            r.name,
            r.report.max_rel_error,
            r.report.coords_checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(r.report.max_rel_error);
    }
    println!("max relative error: {worst:.3e}");
    if worst > TOLERANCE {
        return Err(Error::InvalidCheck(format!(
            "max relative error {worst:e} exceeds {TOLERANCE:e}"
        )));
    }
    Ok(())
}
