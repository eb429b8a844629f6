//! `cats`: model lifecycle, generation, sweeps and bytes-per-token tables.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cats_core::adapter::AdapterPair;
use cats_core::distill::{
    generate_corpus, read_corpus, train_adapters, write_corpus, LossMode, TrainConfig,
};
use cats_core::engine::{CycleHooks, Session};
use cats_core::error::{Error, Result};
use cats_core::memsim::cost::VICUNA_7B_LAYERS;
use cats_core::memsim::{bpt_closed_form, BptMode, CostModelParams};
use cats_core::model::format::{read_layout, read_model, write_model};
use cats_core::sweep::{run_sweep, write_sweep_csv};
use cats_core::{AcceptancePolicy, DecodeMode, Model};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{RunConfig, RunManifest};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_INTERNAL: u8 = 5;
const EXIT_DIVERGED: u8 = 6;

#[derive(Parser)]
#[command(name = "cats", version, about = "Cascaded self-speculative decoding on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random model with freshly initialized adapters.
    InitModel(InitArgs),
    /// Print the header of a weight file as JSON.
    Describe {
        weights: PathBuf,
    },
    /// Distill both adapters from the target and rewrite the weight file.
    TrainAdapters(TrainArgs),
    /// Decode one prompt.
    Generate(GenerateArgs),
    /// Run a budget / horizon sweep and write a CSV report.
    Sweep(SweepArgs),
    /// Print closed-form bytes per token.
    Bpt(BptArgs),
}

#[derive(Args)]
struct Common {
    /// TOML file with [model], [engine], [memory], [loss], [train], [corpus] and [sweep] sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    weights: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Support size of the reduced loss.
    #[arg(long)]
    k: Option<usize>,
    /// Train against the whole target distribution instead of its top K.
    #[arg(long)]
    full_loss: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequences: Option<usize>,
    /// Read the corpus from this file if it exists, otherwise generate and save it there.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Loss log; defaults to `<weights>.train.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cats,
    TwoStage,
    Autoregressive,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cats => DecodeMode::Cats,
            ModeArg::TwoStage => DecodeMode::TwoStage,
            ModeArg::Autoregressive => DecodeMode::Autoregressive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Greedy,
    Typical,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    weights: PathBuf,
    /// Comma-separated token ids.
    #[arg(long, conflicts_with = "prompt_bytes", required_unless_present = "prompt_bytes")]
    prompt: Option<String>,
    /// Text prompt mapped byte-by-byte to token ids.
    #[arg(long)]
    prompt_bytes: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    eos: Option<u32>,
    #[arg(long)]
    l_dm: Option<usize>,
    #[arg(long)]
    l_sv: Option<usize>,
    #[arg(long)]
    dram_budget: Option<u64>,
    /// Flash transfer granularity in bytes; one chunk is reserved as working memory.
    #[arg(long)]
    chunk_size: Option<u64>,
    /// JSON-lines file of verification trees.
    #[arg(long)]
    dump_trees: Option<PathBuf>,
    /// JSON-lines file of per-cycle records followed by a summary line.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// CSV of every flash transfer.
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    weights: PathBuf,
    /// Comma-separated DRAM budgets in bytes.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    modes: Option<Vec<ModeArg>>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    chunk_size: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BptArgs {
    /// Vicuna-7B sizes: 32 fp16 layers of d = 4096, d_ff = 11008.
    #[arg(long)]
    paper_vicuna7b: bool,
    #[arg(long, default_value_t = 3)]
    l_dm: usize,
    #[arg(long, default_value_t = 16)]
    l_sv: usize,
    #[arg(long, default_value_t = 5)]
    gamma: usize,
    /// Mean tokens committed per cycle.
    #[arg(long, default_value_t = 2.27)]
    tau: f64,
    /// Tokens per cycle for the cascade row; defaults to `--tau`.
    #[arg(long)]
    tau_cats: Option<f64>,
    #[arg(long, required_unless_present = "paper_vicuna7b")]
    b_draft: Option<f64>,
    #[arg(long, required_unless_present = "paper_vicuna7b")]
    b_verify: Option<f64>,
    #[arg(long, required_unless_present = "paper_vicuna7b")]
    b_sv: Option<f64>,
    #[arg(long, required_unless_present = "paper_vicuna7b")]
    b_target: Option<f64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidInput(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Config(_) => EXIT_CONFIG,
        Error::Internal(_) => EXIT_INTERNAL,
        Error::Divergence { .. } => EXIT_DIVERGED,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::InitModel(a) => init_model(a),
        Command::Describe { weights } => describe(&weights),
        Command::TrainAdapters(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Sweep(a) => sweep(a),
        Command::Bpt(a) => bpt(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io { path: path.into(), source })
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.into(), source }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for it in items {
        let line = serde_json::to_string(&it).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_at(path))?;
    }
    w.flush().map_err(io_at(path))
}

fn load(path: &Path) -> Result<(Model, AdapterPair)> {
    let (model, adapters) = read_model(path)?;
    let adapters = adapters.ok_or_else(|| Error::InvalidInput(format!("{} has no adapters", path.display())))?;
    Ok((model, adapters))
}

fn manifest<'a>(command: &'a str, config_path: Option<PathBuf>, cfg: &RunConfig, seed: u64) -> RunManifest<'a> {
    RunManifest {
        command,
        config_path,
        model: cfg.model,
        engine: cfg.engine,
        memory: cfg.memory,
        loss: cfg.loss,
        train: None,
        corpus: None,
        sweep: None,
        seed,
        outputs: Vec::new(),
        created_unix_seconds: RunManifest::timestamp(),
    }
}

fn init_model(a: InitArgs) -> Result<()> {
    let cfg = RunConfig::load(a.common.config.as_deref())?;
    let model = Model::random(cfg.model, a.seed)?;
    let adapters = AdapterPair::init(&cfg.model, a.seed.wrapping_add(1));
    let layout = write_model(&a.out, &model, Some(&adapters))?;
    let mut m = manifest("init-model", a.common.config, &cfg, a.seed);
    m.outputs.push(a.out.clone());
    m.write_next_to(&a.out)?;
    println!("wrote {} ({} bytes, {} tensors)", a.out.display(), layout.file_len(), layout.entries.len());
    Ok(())
}

fn describe(weights: &Path) -> Result<()> {
    let layout = read_layout(weights)?;
    let on_disk = std::fs::metadata(weights).map_err(io_at(weights))?.len();
    let view = serde_json::json!({
        "path": weights,
        "file_bytes": on_disk,
        "declared_bytes": layout.file_len(),
        "header_bytes": layout.header_len(),
        "layout": layout,
    });
    println!("{}", serde_json::to_string_pretty(&view).map_err(|e| Error::Internal(e.to_string()))?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let (model, adapters) = load(&a.weights)?;
    cfg.model = *model.config();
    if let Some(k) = a.k {
        cfg.loss.k = k;
    }
    if a.full_loss {
        cfg.loss.mode = LossMode::Full;
    }
    let t = TrainConfig {
        steps: a.steps.unwrap_or(cfg.train.steps),
        learning_rate: a.lr.unwrap_or(cfg.train.learning_rate),
        batch_sequences: a.batch.unwrap_or(cfg.train.batch_sequences),
        seed: a.seed.unwrap_or(cfg.train.seed),
        loss: cfg.loss,
    };
    if let Some(n) = a.sequences {
        cfg.corpus.n_sequences = n;
    }
    let corpus = match &a.corpus {
        Some(p) if p.exists() => read_corpus(p)?,
        other => {
            let c = generate_corpus(&model, model.config().boundaries(), &cfg.corpus)?;
            if let Some(p) = other {
                write_corpus(p, &c)?;
            }
            c
        }
    };
    if corpus.boundaries != model.config().boundaries() {
        return Err(Error::InvalidInput("corpus was recorded at different layer boundaries".into()));
    }
    let out = train_adapters(&model, &corpus, &adapters, &t)?;
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| {
        let mut n = a.weights.as_os_str().to_owned();
        n.push(".train.csv");
        PathBuf::from(n)
    });
    let mut w = create(&loss_csv)?;
    out.write_loss_csv(&mut w)?;
    w.flush().map_err(io_at(&loss_csv))?;
    write_model(&a.weights, &model, Some(&out.adapters))?;

    let mut m = manifest("train-adapters", a.common.config, &cfg, t.seed);
    m.train = Some(t);
    m.corpus = Some(cfg.corpus);
    m.outputs = vec![a.weights.clone(), loss_csv.clone()];
    m.write_next_to(&a.weights)?;
    let last = |role: &str| out.log.iter().rev().find(|r| r.adapter.as_str() == role).map(|r| r.loss);
    println!(
        "trained {} steps on {} sequences; final batch loss draft {:?}, shallow verifier {:?}",
        t.steps,
        corpus.len(),
        last("draft"),
        last("shallow_verifier")
    );
    Ok(())
}

fn parse_prompt(a: &GenerateArgs) -> Result<Vec<u32>> {
    if let Some(text) = &a.prompt_bytes {
        return Ok(text.bytes().map(u32::from).collect());
    }
    let raw = a.prompt.as_deref().unwrap_or_default();
    raw.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|_| Error::InvalidInput(format!("bad token id {t:?} in prompt"))))
        .collect()
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let (model, adapters) = load(&a.weights)?;
    cfg.model = *model.config();
    let e = &mut cfg.engine;
    if let Some(m) = a.mode {
        e.mode = m.into();
    }
    if let Some(g) = a.gamma {
        e.gamma = g;
    }
    if let Some(s) = a.seed {
        e.seed = s;
    }
    if let Some(t) = a.max_new_tokens {
        e.max_new_tokens = t;
    }
    if a.eos.is_some() {
        e.eos_token = a.eos;
    }
    match (a.policy, a.temperature) {
        (Some(PolicyArg::Greedy), _) => e.policy = AcceptancePolicy::Greedy,
        (Some(PolicyArg::Typical), t) => e.policy = AcceptancePolicy::typical(t.unwrap_or(1.0)),
        (None, Some(t)) => {
            if let AcceptancePolicy::Typical { temperature, .. } = &mut e.policy {
                *temperature = t;
            } else {
                return Err(Error::InvalidInput("--temperature needs --policy typical".into()));
            }
        }
        (None, None) => {}
    }
    if a.l_dm.is_some() || a.l_sv.is_some() {
        let b = e.boundaries.unwrap_or_else(|| model.config().boundaries());
        e.boundaries = Some(cats_core::Boundaries { l_dm: a.l_dm.unwrap_or(b.l_dm), l_sv: a.l_sv.unwrap_or(b.l_sv) });
    }
    if let Some(b) = a.dram_budget {
        cfg.memory.dram_budget = b;
    }
    if let Some(c) = a.chunk_size {
        cfg.memory.chunk_size = c;
    }
    let e = &mut cfg.engine;
    e.dump_trees = a.dump_trees.is_some();
    let prompt = parse_prompt(&a)?;

    let session = Session::new(&model, &adapters, cfg.engine, cfg.memory, &prompt, CycleHooks::default())?;
    let g = session.run()?;
    let text: Vec<String> = g.tokens.iter().map(u32::to_string).collect();
    println!("{}", text.join(" "));
    eprintln!(
        "{} tokens in {} cycles, tau {}, {} flash bytes/token, {:.3}s wall",
        g.tokens.len(),
        g.stats.cycles,
        g.stats.tau().map_or("-".into(), |t| format!("{t:.3}")),
        g.stats.bpt().map_or("-".into(), |b| format!("{b:.0}")),
        g.stats.wall_clock_seconds
    );

    let mut outputs = Vec::new();
    if let Some(p) = &a.stats {
        let mut lines: Vec<serde_json::Value> = g
            .records
            .iter()
            .map(|r| serde_json::to_value(r).map_err(|e| Error::Internal(e.to_string())))
            .collect::<Result<_>>()?;
        let summary = serde_json::json!({
            "summary": g.stats,
            "tokens": g.tokens,
            "tau": g.stats.tau(),
            "bpt": g.stats.bpt(),
        });
        lines.push(summary);
        write_jsonl(p, lines)?;
        outputs.push(p.clone());
    }
    if let Some(p) = &a.dump_trees {
        write_jsonl(p, &g.trees)?;
        outputs.push(p.clone());
    }
    if let Some(p) = &a.ledger {
        let mut w = create(p)?;
        g.stats.ledger.write_csv(&mut w)?;
        w.flush().map_err(io_at(p))?;
        outputs.push(p.clone());
    }
    if let Some(first) = outputs.first().cloned() {
        let mut m = manifest("generate", a.common.config, &cfg, cfg.engine.seed);
        m.outputs = outputs;
        m.write_next_to(&first)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let (model, adapters) = load(&a.weights)?;
    cfg.model = *model.config();
    let s = &mut cfg.sweep;
    if let Some(b) = a.budgets {
        s.budgets = b;
    }
    if let Some(g) = a.gammas {
        s.gammas = g;
    }
    if let Some(m) = a.modes {
        s.modes = m.into_iter().map(Into::into).collect();
    }
    if let Some(n) = a.prompts {
        s.n_prompts = n;
    }
    if let Some(t) = a.max_new_tokens {
        s.max_new_tokens = t;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if let Some(c) = a.chunk_size {
        cfg.memory.chunk_size = c;
    }
    let rows = run_sweep(&model, &adapters, &cfg.sweep, cfg.engine, cfg.memory)?;
    let mut w = create(&a.out)?;
    write_sweep_csv(&rows, &mut w)?;
    w.flush().map_err(io_at(&a.out))?;
    let mut m = manifest("sweep", a.common.config, &cfg, cfg.sweep.seed);
    m.sweep = Some(&cfg.sweep);
    m.outputs.push(a.out.clone());
    m.write_next_to(&a.out)?;
    let infeasible = rows.iter().filter(|r| r.status != "ok").count();
    println!("wrote {} rows to {} ({infeasible} infeasible)", rows.len(), a.out.display());
    Ok(())
}

fn bpt(a: BptArgs) -> Result<()> {
    let p = if a.paper_vicuna7b {
        if a.l_dm == 0 || a.l_sv <= a.l_dm || a.l_sv >= VICUNA_7B_LAYERS {
            return Err(Error::InvalidInput(format!(
                "need 0 < l_dm < l_sv < {VICUNA_7B_LAYERS}, got l_dm {} l_sv {}",
                a.l_dm, a.l_sv
            )));
        }
        CostModelParams::vicuna_7b(a.gamma, a.l_dm, a.l_sv, a.tau)
    } else {
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::InvalidInput(format!("--{name} is required")));
        CostModelParams {
            gamma: a.gamma,
            b_draft: need(a.b_draft, "b-draft")?,
            b_verify: need(a.b_verify, "b-verify")?,
            b_sv: need(a.b_sv, "b-sv")?,
            b_target: need(a.b_target, "b-target")?,
            tau: a.tau,
        }
    };
    println!("mode,bpt_bytes,bpt_gb");
    for (name, mode) in [("baseline", BptMode::Baseline), ("two-stage", BptMode::TwoStage), ("cats", BptMode::Cats)] {
        let tau = if mode == BptMode::Cats { a.tau_cats.unwrap_or(a.tau) } else { a.tau };
        let b = bpt_closed_form(&CostModelParams { tau, ..p }, mode)?;
        println!("{name},{b:.0},{:.2}", b / 1e9);
    }
    Ok(())
}
