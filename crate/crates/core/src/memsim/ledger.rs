use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Which part of a decode cycle caused a transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Draft,
    ShallowVerify,
    Reforward,
    TargetVerify,
}

impl Stage {
    pub const ALL: [Stage; 5] =
        [Stage::Prefill, Stage::Draft, Stage::ShallowVerify, Stage::Reforward, Stage::TargetVerify];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::Draft => "draft",
            Stage::ShallowVerify => "shallow_verify",
            Stage::Reforward => "reforward",
            Stage::TargetVerify => "target_verify",
        }
    }
}

/// One chunk moved from flash to DRAM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub cycle: usize,
    pub stage: Stage,
    pub layer_lo: usize,
    pub layer_hi: usize,
    pub bytes: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferLedger {
    records: Vec<TransferRecord>,
    total_bytes: u64,
    total_seconds: f64,
}

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: TransferRecord) -> Result<()> {
        if r.bytes == 0 {
            return Err(invalid("zero-byte transfer record"));
        }
        self.total_bytes += r.bytes;
        self.total_seconds += r.seconds;
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[TransferRecord] {
        &self.records
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn total_seconds(&self) -> f64 {
        self.total_seconds
    }

    pub fn bytes_for(&self, stage: Stage) -> u64 {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.bytes).sum()
    }

    pub fn bytes_in_cycle(&self, cycle: usize) -> u64 {
        self.records.iter().filter(|r| r.cycle == cycle).map(|r| r.bytes).sum()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with columns `cycle,stage,layer_lo,layer_hi,bytes,seconds`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| invalid(format!("csv write failed: {e}"));
        out.write_record(["cycle", "stage", "layer_lo", "layer_hi", "bytes", "seconds"]).map_err(io)?;
        for r in &self.records {
            out.write_record([
                r.cycle.to_string(),
                r.stage.as_str().to_string(),
                r.layer_lo.to_string(),
                r.layer_hi.to_string(),
                r.bytes.to_string(),
                format!("{:.9}", r.seconds),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| invalid(format!("csv flush failed: {e}")))?;
        Ok(())
    }
}
