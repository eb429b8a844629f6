use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ledger::{Stage, TransferLedger, TransferRecord};
use crate::error::{internal, invalid, Error, Result};
use crate::model::format::WeightLayout;
use crate::model::ModelConfig;

/// Device memory hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// DRAM available for pinned weights, in bytes.
    pub dram_budget: u64,
    /// Flash read bandwidth, bytes per second.
    pub flash_bandwidth: f64,
    /// Transfer granularity, bytes. One chunk is also held back as working reserve.
    pub chunk_size: u64,
    /// Fraction of each transfer hidden behind compute, in `[0, 1]`.
    pub overlap_fraction: f64,
    /// Sustained compute throughput used to model compute time, FLOP/s.
    pub compute_flops: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            dram_budget: u64::MAX,
            flash_bandwidth: 2e9,
            chunk_size: 16 << 20,
            overlap_fraction: 0.0,
            compute_flops: 5e10,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dram_budget == 0 || self.chunk_size == 0 {
            return Err(invalid("dram_budget and chunk_size must be positive"));
        }
        if !(self.flash_bandwidth > 0.0) || !(self.compute_flops > 0.0) {
            return Err(invalid("flash_bandwidth and compute_flops must be positive"));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(invalid(format!("overlap_fraction {} outside [0, 1]", self.overlap_fraction)));
        }
        Ok(())
    }

    pub fn transfer_seconds(&self, bytes: u64) -> f64 {
        bytes as f64 / self.flash_bandwidth * (1.0 - self.overlap_fraction)
    }
}

/// Accounted storage and parameter counts per layer, taken from the weight-file layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCosts {
    /// Index 0 is layer 1.
    pub layer_bytes: Vec<u64>,
    pub layer_params: Vec<u64>,
    pub adapter_bytes: u64,
    pub adapter_params: u64,
    pub head_params: u64,
}

impl LayerCosts {
    pub fn from_layout(layout: &WeightLayout) -> Self {
        let c = &layout.config;
        let n = c.n_layers;
        Self {
            layer_bytes: (1..=n).map(|l| layout.accounted_layer_bytes(l)).collect(),
            layer_params: (1..=n).map(|l| layout.layer_extent(l).length / 4).collect(),
            adapter_bytes: layout.accounted_adapter_bytes(),
            adapter_params: c.adapter_params() as u64,
            head_params: (c.d_model * c.vocab_size) as u64,
        }
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        Self::from_layout(&WeightLayout::plan(c, true))
    }

    pub fn n_layers(&self) -> usize {
        self.layer_bytes.len()
    }

    /// Bytes of layers `lo..=hi` (1-based; empty when `lo > hi`).
    pub fn range_bytes(&self, lo: usize, hi: usize) -> u64 {
        if lo > hi {
            return 0;
        }
        self.layer_bytes[lo - 1..hi].iter().sum()
    }

    pub fn range_params(&self, lo: usize, hi: usize) -> u64 {
        if lo > hi {
            return 0;
        }
        self.layer_params[lo - 1..hi].iter().sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.layer_bytes.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResidencyPlan {
    /// Deepest shallow-verifier boundary whose prefix fits.
    pub l_sv: usize,
    /// Layers `1..=l_sv`, both adapters and one chunk of working reserve.
    pub resident_bytes: u64,
}

/// Picks the deepest `L_SV` such that layers `1..=L_SV`, both adapters and
/// one chunk of reserve fit in the DRAM budget. `L_SV` stays below `n_layers`.
pub fn plan_residency(mem: &MemoryConfig, costs: &LayerCosts, l_dm: usize) -> Result<ResidencyPlan> {
    mem.validate()?;
    let n = costs.n_layers();
    if l_dm == 0 || l_dm + 1 >= n {
        return Err(invalid(format!("draft boundary {l_dm} leaves no room for a verifier in {n} layers")));
    }
    let fixed = 2 * costs.adapter_bytes + mem.chunk_size;
    let need = |k: usize| costs.range_bytes(1, k).saturating_add(fixed);
    if need(l_dm) > mem.dram_budget {
        return Err(Error::Config(format!(
            "DRAM budget {} B cannot hold the draft sub-network ({} B with adapters and reserve)",
            mem.dram_budget,
            need(l_dm)
        )));
    }
    let mut l_sv = l_dm;
    while l_sv + 1 < n && need(l_sv + 1) <= mem.dram_budget {
        l_sv += 1;
    }
    if l_sv == l_dm {
        return Err(Error::Config(format!(
            "DRAM budget {} B fits the draft sub-network but no shallow-verifier layer",
            mem.dram_budget
        )));
    }
    Ok(ResidencyPlan { l_sv, resident_bytes: need(l_sv) })
}

/// Session-local model of the flash/DRAM hierarchy: a pinned layer prefix,
/// a transfer ledger for everything else, and modeled compute per stage.
#[derive(Debug, Clone)]
pub struct StreamSim {
    costs: LayerCosts,
    mem: MemoryConfig,
    pinned: usize,
    ledger: TransferLedger,
    flops: BTreeMap<Stage, f64>,
    cycle: usize,
}

impl StreamSim {
    /// Pins layers `1..=pinned` plus `pinned_adapters` adapters; fails when they
    /// do not fit the budget.
    pub fn new(costs: LayerCosts, mem: MemoryConfig, pinned: usize, pinned_adapters: u64) -> Result<Self> {
        mem.validate()?;
        if pinned > costs.n_layers() {
            return Err(invalid("pinned prefix longer than the model"));
        }
        let need = costs
            .range_bytes(1, pinned)
            .saturating_add(pinned_adapters * costs.adapter_bytes)
            .saturating_add(mem.chunk_size);
        if pinned > 0 && need > mem.dram_budget {
            return Err(Error::Config(format!(
                "pinning layers 1..={pinned} needs {need} B but the DRAM budget is {} B",
                mem.dram_budget
            )));
        }
        Ok(Self { costs, mem, pinned, ledger: TransferLedger::new(), flops: BTreeMap::new(), cycle: 0 })
    }

    pub fn pinned_layers(&self) -> usize {
        self.pinned
    }

    pub fn costs(&self) -> &LayerCosts {
        &self.costs
    }

    pub fn memory(&self) -> &MemoryConfig {
        &self.mem
    }

    pub fn ledger(&self) -> &TransferLedger {
        &self.ledger
    }

    pub fn set_cycle(&mut self, cycle: usize) {
        self.cycle = cycle;
    }

    /// Streams layers `lo..=hi` from flash chunk by chunk. Every layer in the
    /// range must be non-resident.
    pub fn record_stream(&mut self, stage: Stage, lo: usize, hi: usize) -> Result<()> {
        if lo < 1 || hi > self.costs.n_layers() || lo > hi {
            return Err(invalid(format!("cannot stream layer range {lo}..={hi}")));
        }
        if lo <= self.pinned {
            return Err(internal(format!(
                "stage {} tried to stream pinned layer {lo} (layers 1..={} are resident)",
                stage.as_str(),
                self.pinned
            )));
        }
        record_chunks(&mut self.ledger, &self.costs, &self.mem, self.cycle, stage, lo, hi)
    }

    /// A pass over `lo..=hi`: the resident part is free, the rest is streamed.
    pub fn pass(&mut self, stage: Stage, lo: usize, hi: usize) -> Result<()> {
        let first_streamed = lo.max(self.pinned + 1);
        if first_streamed <= hi {
            self.record_stream(stage, first_streamed, hi)?;
        }
        Ok(())
    }

    /// A pass that must not touch flash at all.
    pub fn resident_pass(&self, stage: Stage, lo: usize, hi: usize) -> Result<()> {
        if hi > self.pinned {
            return Err(internal(format!(
                "stage {} needs layers up to {hi} but only 1..={} are resident",
                stage.as_str(),
                self.pinned
            )));
        }
        let _ = lo;
        Ok(())
    }

    /// Charges the matmul work of `rows` positions through layers `lo..=hi`.
    pub fn charge_layers(&mut self, stage: Stage, rows: usize, lo: usize, hi: usize) {
        let params = self.costs.range_params(lo, hi);
        *self.flops.entry(stage).or_default() += 2.0 * rows as f64 * params as f64;
    }

    pub fn charge_adapter(&mut self, stage: Stage, rows: usize) {
        *self.flops.entry(stage).or_default() += 2.0 * rows as f64 * self.costs.adapter_params as f64;
    }

    pub fn charge_head(&mut self, stage: Stage, rows: usize) {
        *self.flops.entry(stage).or_default() += 2.0 * rows as f64 * self.costs.head_params as f64;
    }

    /// Modeled compute seconds per stage.
    pub fn compute_seconds(&self) -> BTreeMap<Stage, f64> {
        self.flops.iter().map(|(&s, &f)| (s, f / self.mem.compute_flops)).collect()
    }
}

fn record_chunks(
    ledger: &mut TransferLedger,
    costs: &LayerCosts,
    mem: &MemoryConfig,
    cycle: usize,
    stage: Stage,
    lo: usize,
    hi: usize,
) -> Result<()> {
    // Byte interval of each layer inside the contiguous lo..=hi stream.
    let mut bounds = Vec::with_capacity(hi - lo + 1);
    let mut acc = 0u64;
    for l in lo..=hi {
        let b = costs.layer_bytes[l - 1];
        bounds.push((l, acc, acc + b));
        acc += b;
    }
    let mut start = 0u64;
    while start < acc {
        let end = (start + mem.chunk_size).min(acc);
        let touching = bounds.iter().filter(|&&(_, a, b)| a < end && b > start);
        let layer_lo = touching.clone().map(|t| t.0).min().unwrap_or(lo);
        let layer_hi = touching.map(|t| t.0).max().unwrap_or(hi);
        let bytes = end - start;
        ledger.push(TransferRecord {
            cycle,
            stage,
            layer_lo,
            layer_hi,
            bytes,
            seconds: mem.transfer_seconds(bytes),
        })?;
        start = end;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1 << 20;

    fn costs(layer_bytes: &[u64], adapter: u64) -> LayerCosts {
        LayerCosts {
            layer_bytes: layer_bytes.to_vec(),
            layer_params: layer_bytes.iter().map(|b| b / 2).collect(),
            adapter_bytes: adapter,
            adapter_params: adapter / 2,
            head_params: 0,
        }
    }

    fn mem(budget: u64) -> MemoryConfig {
        MemoryConfig { dram_budget: budget, chunk_size: 16 * MIB, ..MemoryConfig::default() }
    }

    #[test]
    fn chunking_arithmetic() {
        let c = costs(&[10 * MIB, 40 * MIB, 4 * MIB], 0);
        let mut sim = StreamSim::new(c, mem(u64::MAX), 0, 0).unwrap();
        sim.record_stream(Stage::TargetVerify, 1, 1).unwrap();
        assert_eq!(sim.ledger().records().len(), 1);
        assert_eq!(sim.ledger().records()[0].bytes, 10 * MIB);

        let mut sim = StreamSim::new(costs(&[40 * MIB], 0), mem(u64::MAX), 0, 0).unwrap();
        sim.record_stream(Stage::TargetVerify, 1, 1).unwrap();
        let sizes: Vec<u64> = sim.ledger().records().iter().map(|r| r.bytes / MIB).collect();
        assert_eq!(sizes, vec![16, 16, 8]);
        let secs = sim.ledger().total_seconds();
        assert!((secs - 40.0 * MIB as f64 / 2e9).abs() < 1e-12);
    }

    #[test]
    fn chunks_spanning_layers_report_both() {
        let c = costs(&[10 * MIB, 10 * MIB], 0);
        let mut sim = StreamSim::new(c, mem(u64::MAX), 0, 0).unwrap();
        sim.record_stream(Stage::TargetVerify, 1, 2).unwrap();
        let r = sim.ledger().records();
        assert_eq!((r[0].layer_lo, r[0].layer_hi, r[0].bytes), (1, 2, 16 * MIB));
        assert_eq!((r[1].layer_lo, r[1].layer_hi, r[1].bytes), (2, 2, 4 * MIB));
    }

    #[test]
    fn streaming_pinned_layer_is_internal_error() {
        let c = costs(&[MIB; 4], 0);
        let mut sim = StreamSim::new(c, mem(u64::MAX), 2, 0).unwrap();
        assert!(matches!(sim.record_stream(Stage::Reforward, 2, 3), Err(Error::Internal(_))));
        sim.pass(Stage::TargetVerify, 1, 4).unwrap();
        let r = &sim.ledger().records()[0];
        assert_eq!((r.layer_lo, r.layer_hi, r.bytes), (3, 4, 2 * MIB));
        assert!(sim.resident_pass(Stage::Reforward, 1, 2).is_ok());
        assert!(sim.resident_pass(Stage::Reforward, 1, 3).is_err());
    }

    #[test]
    fn overlap_hides_transfer_time() {
        let c = costs(&[MIB], 0);
        let m = MemoryConfig { overlap_fraction: 1.0, ..mem(u64::MAX) };
        let mut sim = StreamSim::new(c, m, 0, 0).unwrap();
        sim.record_stream(Stage::TargetVerify, 1, 1).unwrap();
        assert_eq!(sim.ledger().total_seconds(), 0.0);
        assert_eq!(sim.ledger().total_bytes(), MIB);
    }

    #[test]
    fn planner_boundary_arithmetic() {
        let c = costs(&[10; 8], 3);
        let reserve = 16 * MIB;
        // full model fits: capped one below the top
        let p = plan_residency(&mem(80 + 6 + reserve), &c, 2).unwrap();
        assert_eq!(p.l_sv, 7);
        // exactly layers 1..=5 plus adapters and reserve
        let p = plan_residency(&mem(50 + 6 + reserve), &c, 2).unwrap();
        assert_eq!((p.l_sv, p.resident_bytes), (5, 50 + 6 + reserve));
        let p = plan_residency(&mem(50 + 6 + reserve - 1), &c, 2).unwrap();
        assert_eq!(p.l_sv, 4);
        // draft sub-network alone does not fit
        assert!(matches!(plan_residency(&mem(20 + 6 + reserve - 1), &c, 2), Err(Error::Config(_))));
        // draft fits but no verifier layer
        assert!(matches!(plan_residency(&mem(20 + 6 + reserve), &c, 2), Err(Error::Config(_))));
    }

    #[test]
    fn pinning_beyond_budget_is_config_error() {
        let c = costs(&[MIB; 4], 0);
        assert!(matches!(StreamSim::new(c, mem(2 * MIB), 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn planner_monotone_sweep_on_toy_model() {
        let c = LayerCosts::from_config(&ModelConfig::default());
        let m = MemoryConfig { chunk_size: 64 << 10, ..MemoryConfig::default() };
        let mut last = usize::MAX;
        let full = c.total_bytes() + 2 * c.adapter_bytes + m.chunk_size;
        for step in 0..=200u64 {
            let budget = full - full * step / 200;
            match plan_residency(&MemoryConfig { dram_budget: budget.max(1), ..m }, &c, 2) {
                Ok(p) => {
                    assert!(p.resident_bytes <= budget);
                    assert!(p.l_sv <= last);
                    last = p.l_sv;
                }
                Err(Error::Config(_)) => last = 0,
                Err(e) => panic!("{e}"),
            }
        }
    }
}
