//! Benchmarks over a prompt set and budget / horizon sweeps.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterPair;
use crate::engine::{generate, CycleHooks, DecodeMode, EngineConfig};
use crate::error::{invalid, Error, Result};
use crate::memsim::{
    bpt_closed_form, plan_residency, simulate_walltime, BptMode, CostModelParams, LayerCosts, MemoryConfig, RunCost,
    TransferLedger,
};
use crate::model::{Boundaries, Model};

/// `n` seeded prompts of `len` uniform tokens.
pub fn benchmark_prompts(vocab: usize, n: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()).collect()
}

/// Totals of one configuration over a prompt set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub mode: DecodeMode,
    pub boundaries: Boundaries,
    pub gamma: usize,
    pub cycles: usize,
    pub committed_tokens: u64,
    pub accepted_tokens: u64,
    pub flash_bytes: u64,
    pub transfer_seconds: f64,
    pub compute_seconds: f64,
    /// Every cycle's ledger entries, prompts concatenated.
    #[serde(skip)]
    pub ledger: TransferLedger,
}

impl BenchSummary {
    pub fn tau(&self) -> f64 {
        self.committed_tokens as f64 / self.cycles.max(1) as f64
    }

    pub fn bpt(&self) -> f64 {
        self.flash_bytes as f64 / self.committed_tokens.max(1) as f64
    }

    pub fn run_cost(&self) -> RunCost {
        RunCost {
            transfer_seconds: self.transfer_seconds,
            compute_seconds: self.compute_seconds,
            committed_tokens: self.committed_tokens,
        }
    }

    /// Layers held in DRAM by this mode.
    pub fn pinned_layers(&self) -> usize {
        pinned_layers(self.mode, self.boundaries)
    }

    /// The closed-form bytes per token for this run's mode, boundaries and measured tau.
    pub fn closed_form_bpt(&self, costs: &LayerCosts) -> Result<f64> {
        let b = self.boundaries;
        let p = CostModelParams::streamed(costs, self.pinned_layers(), b.l_dm, b.l_sv, self.gamma, self.tau());
        let mode = match self.mode {
            DecodeMode::Cats => BptMode::Cats,
            DecodeMode::TwoStage => BptMode::TwoStage,
            DecodeMode::Autoregressive => BptMode::Baseline,
        };
        bpt_closed_form(&p, mode)
    }
}

pub fn pinned_layers(mode: DecodeMode, b: Boundaries) -> usize {
    match mode {
        DecodeMode::Cats => b.l_sv,
        DecodeMode::TwoStage => b.l_dm,
        DecodeMode::Autoregressive => 0,
    }
}

/// Decodes every prompt with `cfg` and sums the statistics.
pub fn run_benchmark(
    model: &Model,
    adapters: &AdapterPair,
    prompts: &[Vec<u32>],
    cfg: EngineConfig,
    mem: MemoryConfig,
) -> Result<BenchSummary> {
    let b = cfg.boundaries.unwrap_or_else(|| model.config().boundaries());
    let mut s = BenchSummary {
        mode: cfg.mode,
        boundaries: b,
        gamma: cfg.gamma,
        cycles: 0,
        committed_tokens: 0,
        accepted_tokens: 0,
        flash_bytes: 0,
        transfer_seconds: 0.0,
        compute_seconds: 0.0,
        ledger: TransferLedger::new(),
    };
    for p in prompts {
        let g = generate(model, adapters, cfg, mem, p, CycleHooks::default())?;
        let st = &g.stats;
        s.cycles += st.cycles;
        s.committed_tokens += st.committed_tokens();
        s.accepted_tokens += st.accepted_total as u64;
        s.flash_bytes += st.flash_bytes;
        s.transfer_seconds += st.ledger.total_seconds();
        s.compute_seconds += st.compute_seconds.values().sum::<f64>();
        for r in st.ledger.records() {
            s.ledger.push(r.clone())?;
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// DRAM budgets in bytes; empty means the memory config's budget only.
    pub budgets: Vec<u64>,
    pub gammas: Vec<usize>,
    pub modes: Vec<DecodeMode>,
    pub n_prompts: usize,
    pub prompt_len: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            budgets: Vec::new(),
            gammas: vec![5],
            modes: vec![DecodeMode::Cats, DecodeMode::TwoStage],
            n_prompts: 8,
            prompt_len: 8,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: usize,
    pub budget: u64,
    pub mode: DecodeMode,
    pub l_dm: usize,
    /// `None` for modes without a shallow verifier.
    pub l_sv: Option<usize>,
    pub gamma: usize,
    pub bpt: Option<f64>,
    /// Modeled compute seconds per committed token.
    pub comp_per_tok: Option<f64>,
    /// Mean tokens committed per cycle.
    pub mean_acc: Option<f64>,
    pub tok_per_s: Option<f64>,
    /// Against plain autoregressive decoding of the same prompts.
    pub speedup: Option<f64>,
    /// `ok` or `infeasible: <reason>`.
    pub status: String,
}

pub const SWEEP_COLUMNS: [&str; 12] = [
    "point",
    "budget_bytes",
    "mode",
    "l_dm",
    "l_sv",
    "gamma",
    "bpt",
    "comp_per_tok_s",
    "mean_acc",
    "tok_per_s",
    "speedup",
    "status",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn optf(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| invalid(format!("csv write failed: {e}"));
    out.write_record(SWEEP_COLUMNS).map_err(err)?;
    for r in rows {
        out.write_record([
            r.point.to_string(),
            r.budget.to_string(),
            r.mode.as_str().to_string(),
            r.l_dm.to_string(),
            opt(r.l_sv),
            r.gamma.to_string(),
            optf(r.bpt),
            optf(r.comp_per_tok),
            optf(r.mean_acc),
            optf(r.tok_per_s),
            optf(r.speedup),
            r.status.clone(),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| invalid(format!("csv flush failed: {e}")))
}

/// Runs every (budget, gamma, mode) point in parallel; rows come back in point order.
///
/// An infeasible budget yields a row marked as such; other errors abort the sweep.
pub fn run_sweep(
    model: &Model,
    adapters: &AdapterPair,
    spec: &SweepSpec,
    base: EngineConfig,
    mem: MemoryConfig,
) -> Result<Vec<SweepRow>> {
    if spec.gammas.is_empty() || spec.modes.is_empty() || spec.n_prompts == 0 {
        return Err(invalid("sweep needs at least one gamma, one mode and one prompt"));
    }
    let c = model.config();
    let costs = LayerCosts::from_config(c);
    let prompts = benchmark_prompts(c.vocab_size, spec.n_prompts, spec.prompt_len, spec.seed);
    let budgets = if spec.budgets.is_empty() { vec![mem.dram_budget] } else { spec.budgets.clone() };
    let engine = EngineConfig { max_new_tokens: spec.max_new_tokens, boundaries: None, ..base };

    let baseline = run_benchmark(
        model,
        adapters,
        &prompts,
        EngineConfig { mode: DecodeMode::Autoregressive, ..engine },
        MemoryConfig { dram_budget: u64::MAX, ..mem },
    )?
    .run_cost();

    let mut points = Vec::new();
    for &budget in &budgets {
        for &gamma in &spec.gammas {
            for &mode in &spec.modes {
                points.push((budget, gamma, mode));
            }
        }
    }
    let l_dm = c.l_dm;
    points
        .par_iter()
        .enumerate()
        .map(|(point, &(budget, gamma, mode))| {
            let m = MemoryConfig { dram_budget: budget, ..mem };
            let mut row = SweepRow {
                point,
                budget,
                mode,
                l_dm,
                l_sv: None,
                gamma,
                bpt: None,
                comp_per_tok: None,
                mean_acc: None,
                tok_per_s: None,
                speedup: None,
                status: "ok".into(),
            };
            let b = match mode {
                DecodeMode::Cats => match plan_residency(&m, &costs, l_dm) {
                    Ok(plan) => {
                        row.l_sv = Some(plan.l_sv);
                        Boundaries { l_dm, l_sv: plan.l_sv }
                    }
                    Err(Error::Config(why)) => {
                        row.status = format!("infeasible: {why}");
                        return Ok(row);
                    }
                    Err(e) => return Err(e),
                },
                _ => c.boundaries(),
            };
            let cfg = EngineConfig { mode, gamma, boundaries: Some(b), ..engine };
            let s = match run_benchmark(model, adapters, &prompts, cfg, m) {
                Ok(s) => s,
                Err(Error::Config(why)) => {
                    row.status = format!("infeasible: {why}");
                    return Ok(row);
                }
                Err(e) => return Err(e),
            };
            let wall = simulate_walltime(&s.run_cost(), Some(&baseline))?;
            row.bpt = Some(s.bpt());
            row.comp_per_tok = Some(s.compute_seconds / s.committed_tokens.max(1) as f64);
            row.mean_acc = Some(s.tau());
            row.tok_per_s = Some(wall.tokens_per_second);
            row.speedup = wall.speedup;
            Ok(row)
        })
        .collect()
}
