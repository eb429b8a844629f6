use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::stats::{CycleRecord, DecodeStats};
use super::{DecodeMode, EngineConfig};
use crate::adapter::{AdapterKv, AdapterPair};
use crate::error::{internal, invalid, Result};
use crate::memsim::{LayerCosts, MemoryConfig, Stage, StreamSim};
use crate::model::format::WeightLayout;
use crate::model::{Boundaries, HiddenStates, KvCache, Model, QueryBatch, SlotTag};
use crate::tensor::{argmax_tiebreak, softmax_rows, Matrix};
use crate::tree::{
    build_tree, chain_tree, position_ids, tree_mask, walk_longest_prefix, TreeDump, TreeMask, VerificationTree,
};

/// Overrides a proposed token. Called with the committed tokens (prompt,
/// output so far, pending token last) and the draft index.
pub type TokenHook<'a> = Box<dyn FnMut(&[u32], usize) -> Option<u32> + Send + 'a>;

/// Tree to verify, target distributions for the root row and every node, and the correction nodes.
type CycleTree = (VerificationTree, Matrix, Vec<(usize, u32)>);

/// Test hooks replacing the drafter's or the shallow verifier's choice.
#[derive(Default)]
pub struct CycleHooks<'a> {
    pub draft: Option<TokenHook<'a>>,
    pub shallow: Option<TokenHook<'a>>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// New tokens, the prefill token first.
    pub tokens: Vec<u32>,
    pub stats: DecodeStats,
    pub records: Vec<CycleRecord>,
    pub trees: Vec<TreeDump>,
}

/// Decoding state for one prompt.
///
/// The last committed token is pending: it is in `tokens` but not yet in any
/// KV cache, and it is the root of the next cycle's tree.
pub struct Session<'m> {
    model: &'m Model,
    adapters: &'m AdapterPair,
    cfg: EngineConfig,
    b: Boundaries,
    tokens: Vec<u32>,
    prompt_len: usize,
    kv: KvCache,
    dm_kv: AdapterKv,
    sv_kv: AdapterKv,
    sim: StreamSim,
    rng: ChaCha8Rng,
    stats: DecodeStats,
    records: Vec<CycleRecord>,
    trees: Vec<TreeDump>,
    finished: bool,
    hooks: CycleHooks<'m>,
}

impl<'m> Session<'m> {
    /// Prefills the prompt and emits the first new token.
    pub fn new(
        model: &'m Model,
        adapters: &'m AdapterPair,
        cfg: EngineConfig,
        mem: MemoryConfig,
        prompt: &[u32],
        hooks: CycleHooks<'m>,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = model.config();
        let b = cfg.boundaries.unwrap_or_else(|| c.boundaries());
        c.check_boundaries(b)?;
        if adapters.dm.d_model() != c.d_model || adapters.sv.d_model() != c.d_model {
            return Err(invalid("adapter width does not match the model"));
        }
        if prompt.is_empty() {
            return Err(invalid("empty prompt"));
        }
        let lookahead = if cfg.mode == DecodeMode::Autoregressive { 0 } else { cfg.gamma };
        if prompt.len() + cfg.max_new_tokens + lookahead > c.max_seq {
            return Err(invalid(format!(
                "prompt {} + new tokens {} + lookahead {lookahead} exceeds max_seq {}",
                prompt.len(),
                cfg.max_new_tokens,
                c.max_seq
            )));
        }

        let costs = LayerCosts::from_layout(&WeightLayout::plan(c, true));
        let (pinned, pinned_adapters) = match cfg.mode {
            DecodeMode::Cats => (b.l_sv, 2),
            DecodeMode::TwoStage => (b.l_dm, 1),
            DecodeMode::Autoregressive => (0, 0),
        };
        let sim = StreamSim::new(costs, mem, pinned, pinned_adapters)?;
        let prefill_flash_bytes = sim.costs().range_bytes(pinned + 1, c.n_layers);
        let stats = DecodeStats {
            mode: cfg.mode,
            gamma: cfg.gamma,
            l_dm: b.l_dm,
            l_sv: b.l_sv,
            cycles: 0,
            committed_per_cycle: Vec::new(),
            accepted_total: 0,
            corrections_proposed: 0,
            corrections_used: 0,
            ledger: Default::default(),
            flash_bytes: 0,
            prefill_flash_bytes,
            compute_seconds: Default::default(),
            wall_clock_seconds: 0.0,
        };

        let mut s = Self {
            model,
            adapters,
            cfg,
            b,
            tokens: prompt.to_vec(),
            prompt_len: prompt.len(),
            kv: model.new_cache(),
            dm_kv: adapters.dm.new_kv(),
            sv_kv: adapters.sv.new_kv(),
            sim,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            stats,
            records: Vec::new(),
            trees: Vec::new(),
            finished: cfg.max_new_tokens == 0,
            hooks,
        };
        if !s.finished {
            let start = Instant::now();
            s.prefill()?;
            s.stats.wall_clock_seconds += start.elapsed().as_secs_f64();
        }
        Ok(s)
    }

    fn prefill(&mut self) -> Result<()> {
        let pre = self.model.prefill_at(&self.tokens, self.b)?;
        let positions: Vec<usize> = (0..self.tokens.len()).collect();
        let tags = vec![SlotTag::Committed; positions.len()];
        let batch = QueryBatch { positions: &positions, tags: &tags, tree: None };
        if self.cfg.mode != DecodeMode::Autoregressive {
            self.adapters.dm.forward(&pre.at_dm, &batch, &mut self.dm_kv)?;
            self.adapters.sv.forward(&pre.at_sv, &batch, &mut self.sv_kv)?;
        }
        self.kv = pre.kv;
        let last = pre.at_final.select(&[positions.len() - 1]);
        let dist = softmax_rows(&self.model.lm_head_logits(&last)?, self.cfg.policy.temperature())?;
        let y0 = self.pick(dist.row(0))?;
        self.tokens.push(y0 as u32);
        if self.cfg.eos_token == Some(y0 as u32) || self.cfg.max_new_tokens == 1 {
            self.finished = true;
        }
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Prompt followed by every committed output token.
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn output(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }

    pub fn boundaries(&self) -> Boundaries {
        self.b
    }

    pub fn target_kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn dm_kv(&self) -> &AdapterKv {
        &self.dm_kv
    }

    pub fn sv_kv(&self) -> &AdapterKv {
        &self.sv_kv
    }

    pub fn stats(&self) -> &DecodeStats {
        &self.stats
    }

    pub fn records(&self) -> &[CycleRecord] {
        &self.records
    }

    fn remaining(&self) -> usize {
        self.cfg.max_new_tokens - (self.tokens.len() - self.prompt_len)
    }

    /// Runs one cycle; `None` once generation has finished.
    pub fn decode_cycle(&mut self) -> Result<Option<CycleRecord>> {
        if self.finished {
            return Ok(None);
        }
        let start = Instant::now();
        let cycle = self.stats.cycles;
        self.sim.set_cycle(cycle);
        let bytes_before = self.sim.ledger().total_bytes();
        let s = self.tokens.len() - 1;
        if self.kv.committed_len()? != s {
            return Err(internal(format!(
                "target cache holds {} committed slots, expected {s}",
                self.kv.committed_len()?
            )));
        }

        let (tree, dists, corrections) = match self.cfg.mode {
            DecodeMode::Cats => self.cats_tree(s)?,
            DecodeMode::TwoStage => self.two_stage_tree(s)?,
            DecodeMode::Autoregressive => self.ar_step(s)?,
        };

        let walk = walk_longest_prefix(&tree, &dists, &self.cfg.policy)?;
        let bonus = self.pick(dists.row(walk.terminal_row()))? as u32;
        let mut proposed = walk.accepted.clone();
        proposed.push(bonus);

        let mut kept = proposed.len().min(self.remaining());
        if let Some(eos) = self.cfg.eos_token {
            if let Some(at) = proposed[..kept].iter().position(|&t| t == eos) {
                kept = at + 1;
                self.finished = true;
            }
        }
        let committed = proposed[..kept].to_vec();
        let path = &walk.path[..kept - 1];
        let new_len = s + kept;
        self.kv.commit_and_rollback(path, new_len)?;
        if self.cfg.mode != DecodeMode::Autoregressive {
            self.dm_kv.commit_path(path, new_len)?;
        }
        if self.cfg.mode == DecodeMode::Cats {
            self.sv_kv.commit_path(path, new_len)?;
        }
        self.tokens.extend_from_slice(&committed);
        if self.remaining() == 0 {
            self.finished = true;
        }

        if self.cfg.dump_trees && self.cfg.mode != DecodeMode::Autoregressive {
            self.trees.push(TreeDump { cycle, positions: position_ids(&tree), mask: tree_mask(&tree), tree: tree.clone() });
        }
        let flash_bytes = self.sim.ledger().total_bytes() - bytes_before;
        let record = CycleRecord {
            cycle,
            committed_len: s,
            drafts: if self.cfg.mode == DecodeMode::Autoregressive { Vec::new() } else { tree.main_tokens().collect() },
            corrections: corrections.clone(),
            accepted: walk.accepted.len(),
            used_correction: walk.used_correction,
            committed,
            flash_bytes,
        };
        let st = &mut self.stats;
        st.cycles += 1;
        st.committed_per_cycle.push(kept);
        st.accepted_total += walk.accepted.len();
        st.corrections_proposed += corrections.len();
        st.corrections_used += walk.used_correction as usize;
        st.ledger = self.sim.ledger().clone();
        st.flash_bytes = st.ledger.total_bytes();
        st.compute_seconds = self.sim.compute_seconds();
        st.wall_clock_seconds += start.elapsed().as_secs_f64();
        self.records.push(record.clone());
        Ok(Some(record))
    }

    /// Runs cycles until EOS or the token budget.
    pub fn run(mut self) -> Result<Generation> {
        while self.decode_cycle()?.is_some() {}
        let tokens = self.output().to_vec();
        Ok(Generation { tokens, stats: self.stats, records: self.records, trees: self.trees })
    }

    fn pick(&mut self, dist: &[f32]) -> Result<usize> {
        if self.cfg.policy.is_greedy() {
            return argmax_tiebreak(dist);
        }
        let w = WeightedIndex::new(dist).map_err(|e| internal(format!("cannot sample: {e}")))?;
        Ok(w.sample(&mut self.rng))
    }

    fn greedy_token(&self, h: &HiddenStates) -> Result<Vec<u32>> {
        let p = softmax_rows(&self.model.lm_head_logits(h)?, 1.0)?;
        (0..p.rows()).map(|r| argmax_tiebreak(p.row(r)).map(|t| t as u32)).collect()
    }

    fn target_dists(&self, h: &HiddenStates) -> Result<Matrix> {
        softmax_rows(&self.model.lm_head_logits(h)?, self.cfg.policy.temperature())
    }

    /// Stage 1: `gamma` sequential drafting steps through the resident draft
    /// sub-network. Returns the drafts and the layer-`l_dm` state of the root
    /// and of `d_0 .. d_{gamma-2}`.
    fn draft(&mut self, s: usize, chain: &TreeMask) -> Result<(Vec<u32>, HiddenStates)> {
        let g = self.cfg.gamma;
        let l_dm = self.b.l_dm;
        let mut drafts = Vec::with_capacity(g);
        let mut rows: Option<Matrix> = None;
        for k in 0..g {
            let (token, tag) = if k == 0 { (self.tokens[s], SlotTag::Committed) } else { (drafts[k - 1], SlotTag::Node(k - 1)) };
            let pos = [s + k];
            let tags = [tag];
            let batch = QueryBatch { positions: &pos, tags: &tags, tree: Some(chain) };
            self.sim.resident_pass(Stage::Draft, 1, l_dm)?;
            self.sim.charge_layers(Stage::Draft, 1, 1, l_dm);
            self.sim.charge_adapter(Stage::Draft, 1);
            self.sim.charge_head(Stage::Draft, 1);
            let h = self.model.forward_range(1, l_dm, &self.model.embed(&[token], &pos)?, &batch, &mut self.kv)?;
            let a = self.adapters.dm.forward(&h, &batch, &mut self.dm_kv)?;
            let mut d = self.greedy_token(&a)?[0];
            if let Some(hook) = self.hooks.draft.as_mut() {
                if let Some(t) = hook(&self.tokens, k) {
                    d = t;
                }
            }
            drafts.push(d);
            rows = Some(match rows {
                None => h.states,
                Some(m) => m.vstack(&h.states)?,
            });
        }
        let states = rows.ok_or_else(|| internal("no draft rows"))?;
        Ok((drafts, HiddenStates { states, layer: l_dm }))
    }

    fn cats_tree(&mut self, s: usize) -> Result<CycleTree> {
        let g = self.cfg.gamma;
        let (l_dm, l_sv, n) = (self.b.l_dm, self.b.l_sv, self.model.config().n_layers);
        let chain = tree_mask(&chain_tree(&vec![0; g], s)?);
        let (drafts, h_dm) = self.draft(s, &chain)?;

        // Stage 2: shallow verification of the root and d_0 .. d_{gamma-2}.
        let pos: Vec<usize> = (s..s + g).collect();
        let tags: Vec<SlotTag> =
            (0..g).map(|k| if k == 0 { SlotTag::Committed } else { SlotTag::Node(k - 1) }).collect();
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: Some(&chain) };
        self.sim.resident_pass(Stage::ShallowVerify, l_dm + 1, l_sv)?;
        self.sim.charge_layers(Stage::ShallowVerify, g, l_dm + 1, l_sv);
        self.sim.charge_adapter(Stage::ShallowVerify, g);
        self.sim.charge_head(Stage::ShallowVerify, g);
        let h_sv = self.model.forward_range(l_dm + 1, l_sv, &h_dm, &batch, &mut self.kv)?;
        let a = self.adapters.sv.forward(&h_sv, &batch, &mut self.sv_kv)?;
        let mut shallow = self.greedy_token(&a)?;
        if let Some(hook) = self.hooks.shallow.as_mut() {
            for (i, c) in shallow.iter_mut().enumerate() {
                if let Some(t) = hook(&self.tokens, i) {
                    *c = t;
                }
            }
        }
        let corrections: Vec<(usize, u32)> =
            shallow.iter().enumerate().filter(|&(i, &c)| c != drafts[i]).map(|(i, &c)| (i, c)).collect();
        let tree = build_tree(&drafts, &corrections, s)?;
        let mask = tree_mask(&tree);
        let positions = position_ids(&tree);

        // Nodes with no state yet: the last draft and every correction. All of
        // them go through the resident prefix so every cache gets their slots.
        let fresh: Vec<usize> = (g - 1..tree.len()).collect();
        let f_tokens: Vec<u32> = fresh.iter().map(|&i| tree.nodes[i].token).collect();
        let f_pos: Vec<usize> = fresh.iter().map(|&i| positions[i]).collect();
        let f_tags: Vec<SlotTag> = fresh.iter().map(|&i| SlotTag::Node(i)).collect();
        let batch = QueryBatch { positions: &f_pos, tags: &f_tags, tree: Some(&mask) };
        let r = fresh.len();
        self.sim.resident_pass(Stage::Reforward, 1, l_sv)?;
        self.sim.charge_layers(Stage::Reforward, r, 1, l_sv);
        self.sim.charge_adapter(Stage::Reforward, 2 * r);
        let h = self.model.forward_range(1, l_dm, &self.model.embed(&f_tokens, &f_pos)?, &batch, &mut self.kv)?;
        self.adapters.dm.forward(&h, &batch, &mut self.dm_kv)?;
        let h_fresh = self.model.forward_range(l_dm + 1, l_sv, &h, &batch, &mut self.kv)?;
        self.adapters.sv.forward(&h_fresh, &batch, &mut self.sv_kv)?;

        // Stage 3: root plus every node through the streamed deep layers.
        let rows = tree.len() + 1;
        let all_pos: Vec<usize> = std::iter::once(s).chain(positions.iter().copied()).collect();
        let all_tags: Vec<SlotTag> = std::iter::once(SlotTag::Committed).chain((0..tree.len()).map(SlotTag::Node)).collect();
        let batch = QueryBatch { positions: &all_pos, tags: &all_tags, tree: Some(&mask) };
        let h_in = HiddenStates { states: h_sv.states.vstack(&h_fresh.states)?, layer: l_sv };
        self.sim.pass(Stage::TargetVerify, l_sv + 1, n)?;
        self.sim.charge_layers(Stage::TargetVerify, rows, l_sv + 1, n);
        self.sim.charge_head(Stage::TargetVerify, rows);
        let h_out = self.model.forward_range(l_sv + 1, n, &h_in, &batch, &mut self.kv)?;
        let dists = self.target_dists(&h_out)?;
        Ok((tree, dists, corrections))
    }

    fn two_stage_tree(&mut self, s: usize) -> Result<CycleTree> {
        let g = self.cfg.gamma;
        let (l_dm, n) = (self.b.l_dm, self.model.config().n_layers);
        let chain = tree_mask(&chain_tree(&vec![0; g], s)?);
        let (drafts, h_dm) = self.draft(s, &chain)?;
        let tree = chain_tree(&drafts, s)?;

        let pos = [s + g];
        let tags = [SlotTag::Node(g - 1)];
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: Some(&chain) };
        self.sim.resident_pass(Stage::Draft, 1, l_dm)?;
        self.sim.charge_layers(Stage::Draft, 1, 1, l_dm);
        self.sim.charge_adapter(Stage::Draft, 1);
        let h_last = self.model.forward_range(1, l_dm, &self.model.embed(&[drafts[g - 1]], &pos)?, &batch, &mut self.kv)?;
        self.adapters.dm.forward(&h_last, &batch, &mut self.dm_kv)?;

        let rows = g + 1;
        let all_pos: Vec<usize> = (s..=s + g).collect();
        let all_tags: Vec<SlotTag> = std::iter::once(SlotTag::Committed).chain((0..g).map(SlotTag::Node)).collect();
        let batch = QueryBatch { positions: &all_pos, tags: &all_tags, tree: Some(&chain) };
        let h_in = HiddenStates { states: h_dm.states.vstack(&h_last.states)?, layer: l_dm };
        self.sim.pass(Stage::TargetVerify, l_dm + 1, n)?;
        self.sim.charge_layers(Stage::TargetVerify, rows, l_dm + 1, n);
        self.sim.charge_head(Stage::TargetVerify, rows);
        let h_out = self.model.forward_range(l_dm + 1, n, &h_in, &batch, &mut self.kv)?;
        let dists = self.target_dists(&h_out)?;
        Ok((tree, dists, Vec::new()))
    }

    /// Plain decoding expressed as a cycle over an empty tree: the root row is
    /// the only distribution and the bonus token is the whole output.
    fn ar_step(&mut self, s: usize) -> Result<CycleTree> {
        let n = self.model.config().n_layers;
        let pos = [s];
        let tags = [SlotTag::Committed];
        let batch = QueryBatch { positions: &pos, tags: &tags, tree: None };
        self.sim.pass(Stage::TargetVerify, 1, n)?;
        self.sim.charge_layers(Stage::TargetVerify, 1, 1, n);
        self.sim.charge_head(Stage::TargetVerify, 1);
        let h = self.model.forward_range(1, n, &self.model.embed(&[self.tokens[s]], &pos)?, &batch, &mut self.kv)?;
        let dists = self.target_dists(&h)?;
        let tree = VerificationTree { nodes: Vec::new(), committed_len: s, gamma: 0 };
        Ok((tree, dists, Vec::new()))
    }
}

/// Decodes `prompt` to completion.
pub fn generate<'m>(
    model: &'m Model,
    adapters: &'m AdapterPair,
    cfg: EngineConfig,
    mem: MemoryConfig,
    prompt: &[u32],
    hooks: CycleHooks<'m>,
) -> Result<Generation> {
    if cfg.max_new_tokens == 0 {
        cfg.validate()?;
    }
    Session::new(model, adapters, cfg, mem, prompt, hooks)?.run()
}
