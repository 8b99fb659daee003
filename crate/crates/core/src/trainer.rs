//! Training runs with checkpoint logging and dispute answering.
//!
//! A [`Trainer`] executes a [`TrainingProgram`] step by step, committing a
//! Merkle root per checkpoint and logging full (state, trace, commitment)
//! entries at the level-0 bisection positions. During a dispute it answers
//! referee queries from the log, re-executing only the gaps between logged
//! checkpoints on demand; with segment count k per level that caps the
//! re-executed work near n/(k-1) steps instead of all n.
//!
//! Execution is routed through a [`StepRunner`] so a test harness can swap
//! in one that injects faults. Faults injected that way are re-applied
//! identically during re-execution, which keeps a dishonest trainer
//! consistent with its own commitments right up to the step it lied about.

use crate::commit::{commit_initial_state, commit_step_trace, CheckpointCommitment, CommitError};
use crate::detops::{self, det_rand, DetRngKey, Dist, OpCtx, Shape, Tensor};
use crate::graph::{
    build_extended_graph, execute_step_hooked, initial_state, parse_model, Batch, ExecError,
    ExtendedGraph, GraphError, ModelGraph, NodeSpec, OptimizerCfg, ParseError, StepOutcome,
    StepTrace, TrainingState,
};
use crate::protocol::{bisection_positions, schedule_k, Message, Query, TrainerEndpoint};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Synthetic dataset dimensions. The data itself is a pure function of
/// (this config, program seed), so every party materializes identical rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    pub rows: usize,
    pub features: usize,
    pub classes: usize,
}

/// Everything that defines a run. Two trainers given equal programs must
/// produce bitwise-equal commitments; worker count is deliberately not a
/// field.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingProgram {
    pub model_text: String,
    pub steps: u64,
    pub batch_size: usize,
    /// Bisection segment count per level; the last entry repeats. Level 0
    /// also fixes which checkpoints are logged during training.
    pub schedule: Vec<u64>,
    pub seed: u64,
    pub optimizer: OptimizerCfg,
    pub dataset: DatasetCfg,
}

#[derive(Debug, thiserror::Error)]
pub enum ProgramError {
    #[error("model: {0}")]
    Model(#[from] ParseError),
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ProgramError {
    ProgramError::Invalid(msg.into())
}

/// Labeled rows: features `x` as `[rows, features]`, labels `y` as `[rows]`
/// holding integral class ids. Labels come from a hidden linear scorer over
/// the same features, so the task is learnable and losses actually fall.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Tensor,
    y: Tensor,
    rows: usize,
    features: usize,
}

impl Dataset {
    pub fn synthetic(cfg: &DatasetCfg, seed: u64) -> Result<Dataset, ProgramError> {
        if cfg.rows == 0 || cfg.features == 0 {
            return Err(invalid("dataset rows and features must be positive"));
        }
        if cfg.classes < 2 {
            return Err(invalid("dataset needs at least two classes"));
        }
        let xshape = Shape::new(vec![cfg.rows, cfg.features]).map_err(|e| invalid(e.to_string()))?;
        let wshape = Shape::new(vec![cfg.features, cfg.classes]).map_err(|e| invalid(e.to_string()))?;
        let x = det_rand(DetRngKey::for_purpose(seed, "dataset-x"), &xshape, Dist::Normal);
        let w = det_rand(DetRngKey::for_purpose(seed, "dataset-labels"), &wshape, Dist::Normal);
        let scores = detops::matmul(OpCtx::serial(), &x, &w).map_err(|e| invalid(e.to_string()))?;
        let mut y = vec![0.0f32; cfg.rows];
        for (i, label) in y.iter_mut().enumerate() {
            let row = &scores.values()[i * cfg.classes..(i + 1) * cfg.classes];
            let mut best = 0usize;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            *label = best as f32;
        }
        let y = Tensor::new(Shape::new(vec![cfg.rows]).unwrap(), y).unwrap();
        Ok(Dataset { x, y, rows: cfg.rows, features: cfg.features })
    }

    /// Rows `[step * batch, step * batch + batch)` modulo the row count.
    pub fn batch_for_step(&self, step: u64, batch: usize) -> (Tensor, Tensor) {
        let start = (step as usize).wrapping_mul(batch) % self.rows;
        let mut xs = Vec::with_capacity(batch * self.features);
        let mut ys = Vec::with_capacity(batch);
        for i in 0..batch {
            let row = (start + i) % self.rows;
            xs.extend_from_slice(&self.x.values()[row * self.features..(row + 1) * self.features]);
            ys.push(self.y.values()[row]);
        }
        (
            Tensor::new(Shape::new(vec![batch, self.features]).unwrap(), xs).unwrap(),
            Tensor::new(Shape::new(vec![batch]).unwrap(), ys).unwrap(),
        )
    }
}

/// A validated program with everything derived from it: graph, initial
/// state, its commitment, the dataset, and which data declarations receive
/// features and labels.
#[derive(Debug, Clone)]
pub struct PreparedProgram {
    pub program: TrainingProgram,
    pub model: ModelGraph,
    pub graph: ExtendedGraph,
    pub init: TrainingState,
    pub c0: CheckpointCommitment,
    pub dataset: Dataset,
    pub feature_decl: String,
    pub label_decl: String,
}

impl TrainingProgram {
    pub fn prepare(&self) -> Result<PreparedProgram, ProgramError> {
        if self.steps == 0 {
            return Err(invalid("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if self.schedule.is_empty() {
            return Err(invalid("schedule must have at least one level"));
        }
        if let Some(bad) = self.schedule.iter().find(|&&k| k < 2) {
            return Err(invalid(format!("schedule entries must be >= 2, got {bad}")));
        }

        let model = parse_model(&self.model_text)?;
        let graph = build_extended_graph(&model, &self.optimizer)?;

        let mut feature_decl = None;
        let mut label_decl = None;
        for d in &model.data {
            match d.shape.rank() {
                2 if feature_decl.is_none() => feature_decl = Some(d.name.clone()),
                1 if label_decl.is_none() => label_decl = Some(d.name.clone()),
                _ => return Err(invalid(format!("unexpected extra data declaration `{}`", d.name))),
            }
        }
        let feature_decl =
            feature_decl.ok_or_else(|| invalid("model needs a rank-2 data declaration"))?;
        let label_decl =
            label_decl.ok_or_else(|| invalid("model needs a rank-1 label declaration"))?;

        let fshape = &model.data_decl(&feature_decl).unwrap().shape;
        if fshape.dims() != [self.batch_size, self.dataset.features] {
            return Err(invalid(format!(
                "feature declaration `{feature_decl}` is {fshape}, program wants {}x{}",
                self.batch_size, self.dataset.features
            )));
        }
        let lshape = &model.data_decl(&label_decl).unwrap().shape;
        if lshape.dims() != [self.batch_size] {
            return Err(invalid(format!(
                "label declaration `{label_decl}` is {lshape}, program wants {}",
                self.batch_size
            )));
        }

        // the loss must be able to see every class the dataset emits
        let (lsrc, lslot) = graph.resolved_inputs(graph.loss_index)[0];
        let logits = &graph.out_shapes[lsrc][lslot as usize];
        if logits.dims()[1] != self.dataset.classes {
            return Err(invalid(format!(
                "loss sees {} logit columns but the dataset has {} classes",
                logits.dims()[1],
                self.dataset.classes
            )));
        }

        let init = initial_state(&model, &self.optimizer);
        let c0 = commit_initial_state(&init).map_err(|e| invalid(e.to_string()))?;
        let dataset = Dataset::synthetic(&self.dataset, self.seed)?;
        Ok(PreparedProgram {
            program: self.clone(),
            model,
            graph,
            init,
            c0,
            dataset,
            feature_decl,
            label_decl,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("program serializes")
    }

    pub fn from_toml(text: &str) -> Result<TrainingProgram, ProgramError> {
        toml::from_str(text).map_err(|e| invalid(format!("program toml: {e}")))
    }
}

impl PreparedProgram {
    /// Batch tensors for transition `step`, keyed by declaration name.
    pub fn batch(&self, step: u64) -> Batch {
        let (x, y) = self.dataset.batch_for_step(step, self.program.batch_size);
        Batch::new().insert(self.feature_decl.clone(), x).insert(self.label_decl.clone(), y)
    }
}

/// One logged checkpoint: the state, the trace of the transition that
/// produced it (absent only at step 0), and the commitment.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub state: TrainingState,
    pub trace: Option<StepTrace>,
    pub commitment: CheckpointCommitment,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store layout: {0}")]
    Layout(String),
    #[error("store decode: {0}")]
    Decode(String),
}

/// Logged checkpoints, keyed by step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointStore {
    entries: BTreeMap<u64, StoreEntry>,
}

impl CheckpointStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, step: u64, entry: StoreEntry) {
        self.entries.insert(step, entry);
    }

    pub fn get(&self, step: u64) -> Option<&StoreEntry> {
        self.entries.get(&step)
    }

    pub fn contains(&self, step: u64) -> bool {
        self.entries.contains_key(&step)
    }

    /// Greatest logged step <= `step`.
    pub fn floor(&self, step: u64) -> Option<(u64, &StoreEntry)> {
        self.entries.range(..=step).next_back().map(|(s, e)| (*s, e))
    }

    pub fn steps(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes one directory per checkpoint: `step_<t>/state.bin`, optional
    /// `step_<t>/trace.bin`, and `step_<t>/commit.hex`.
    pub fn save(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir)?;
        for (step, e) in &self.entries {
            let sub = dir.join(format!("step_{step}"));
            std::fs::create_dir_all(&sub)?;
            std::fs::write(sub.join("state.bin"), e.state.snapshot_bytes())?;
            if let Some(trace) = &e.trace {
                std::fs::write(sub.join("trace.bin"), trace.to_bytes())?;
            }
            let mut hexline = hex::encode(e.commitment.to_bytes());
            hexline.push('\n');
            std::fs::write(sub.join("commit.hex"), hexline)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<CheckpointStore, StoreError> {
        let mut entries = BTreeMap::new();
        for item in std::fs::read_dir(dir)? {
            let item = item?;
            let name = item.file_name().to_string_lossy().into_owned();
            let Some(rest) = name.strip_prefix("step_") else { continue };
            let step: u64 = rest
                .parse()
                .map_err(|_| StoreError::Layout(format!("bad checkpoint directory `{name}`")))?;
            let sub = item.path();

            let state_bytes = std::fs::read(sub.join("state.bin"))?;
            let state = TrainingState::from_snapshot_bytes(&state_bytes)
                .map_err(|e| StoreError::Decode(format!("step {step} state: {e}")))?;
            if state.step != step {
                return Err(StoreError::Decode(format!(
                    "step {step} state claims step {}",
                    state.step
                )));
            }

            let trace_path = sub.join("trace.bin");
            let trace = if trace_path.exists() {
                let bytes = std::fs::read(trace_path)?;
                let t = StepTrace::from_bytes(&bytes)
                    .map_err(|e| StoreError::Decode(format!("step {step} trace: {e}")))?;
                if t.step != step {
                    return Err(StoreError::Decode(format!(
                        "step {step} trace claims step {}",
                        t.step
                    )));
                }
                Some(t)
            } else {
                None
            };

            let hex_text = std::fs::read_to_string(sub.join("commit.hex"))?;
            let raw = hex::decode(hex_text.trim())
                .map_err(|e| StoreError::Decode(format!("step {step} commit: {e}")))?;
            let commitment = CheckpointCommitment::from_bytes(&raw)
                .ok_or_else(|| StoreError::Decode(format!("step {step} commit: bad length")))?;
            if commitment.step != step {
                return Err(StoreError::Decode(format!(
                    "step {step} commitment claims step {}",
                    commitment.step
                )));
            }

            entries.insert(step, StoreEntry { state, trace, commitment });
        }
        if entries.is_empty() {
            return Err(StoreError::Layout(format!("no checkpoints under {}", dir.display())));
        }
        Ok(CheckpointStore { entries })
    }
}

/// Executes one transition. `observe` sees every node's final outputs (after
/// any fault a dishonest implementation applies), which is what payload
/// answers must match.
pub trait StepRunner {
    fn run(
        &mut self,
        ctx: OpCtx,
        graph: &ExtendedGraph,
        state: &TrainingState,
        batch: &Batch,
        observe: &mut dyn FnMut(usize, &NodeSpec, &[Tensor]),
    ) -> Result<StepOutcome, ExecError>;
}

/// Faithful execution of the shared graph.
pub struct HonestRunner;

impl StepRunner for HonestRunner {
    fn run(
        &mut self,
        ctx: OpCtx,
        graph: &ExtendedGraph,
        state: &TrainingState,
        batch: &Batch,
        observe: &mut dyn FnMut(usize, &NodeSpec, &[Tensor]),
    ) -> Result<StepOutcome, ExecError> {
        execute_step_hooked(ctx, graph, state, batch, &mut |i, spec, outs| {
            observe(i, spec, outs)
        })
    }
}

/// Work counters a trainer reports after a dispute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub steps_executed: u64,
    pub steps_reexecuted: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Commit(#[from] CommitError),
    #[error("{0}")]
    Unanswerable(String),
}

fn unanswerable(msg: impl Into<String>) -> TrainerError {
    TrainerError::Unanswerable(msg.into())
}

pub struct Trainer {
    name: String,
    ctx: OpCtx,
    prep: PreparedProgram,
    runner: Box<dyn StepRunner>,
    store: CheckpointStore,
    stats: TrainStats,
}

impl Trainer {
    pub fn new(name: impl Into<String>, program: TrainingProgram, ctx: OpCtx) -> Result<Self, ProgramError> {
        Self::with_runner(name, program, ctx, Box::new(HonestRunner))
    }

    /// A trainer with a custom step runner; this is the fault-injection
    /// seam used by the scenario harness.
    pub fn with_runner(
        name: impl Into<String>,
        program: TrainingProgram,
        ctx: OpCtx,
        runner: Box<dyn StepRunner>,
    ) -> Result<Self, ProgramError> {
        Ok(Trainer {
            name: name.into(),
            ctx,
            prep: program.prepare()?,
            runner,
            store: CheckpointStore::new(),
            stats: TrainStats::default(),
        })
    }

    /// Rebuilds a trainer from a saved checkpoint store. Gaps are refilled
    /// by honest re-execution; logged entries stay authoritative, so a store
    /// that is internally inconsistent will contradict itself under
    /// questioning and lose.
    pub fn from_store(
        name: impl Into<String>,
        program: TrainingProgram,
        ctx: OpCtx,
        store: CheckpointStore,
    ) -> Result<Self, ProgramError> {
        let mut t = Self::new(name, program, ctx)?;
        t.store = store;
        Ok(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn prepared(&self) -> &PreparedProgram {
        &self.prep
    }

    pub fn store(&self) -> &CheckpointStore {
        &self.store
    }

    pub fn train_stats(&self) -> TrainStats {
        self.stats
    }

    /// Runs the full program, logging checkpoints at the level-0 bisection
    /// positions (including 0 and the final step).
    pub fn train(&mut self) -> Result<(), TrainerError> {
        let n = self.prep.program.steps;
        let k0 = schedule_k(&self.prep.program.schedule, 0);
        let log_at: BTreeSet<u64> = bisection_positions(0, n, k0).into_iter().collect();

        self.store = CheckpointStore::new();
        self.store.insert(
            0,
            StoreEntry { state: self.prep.init.clone(), trace: None, commitment: self.prep.c0 },
        );
        let mut state = self.prep.init.clone();
        for t in 0..n {
            let batch = self.prep.batch(t);
            let out = self.runner.run(self.ctx, &self.prep.graph, &state, &batch, &mut |_, _, _| {})?;
            self.stats.steps_executed += 1;
            let StepOutcome { state: next, trace, .. } = out;
            if log_at.contains(&(t + 1)) {
                let commitment = commit_step_trace(t + 1, &trace.node_hashes())?;
                self.store.insert(
                    t + 1,
                    StoreEntry { state: next.clone(), trace: Some(trace), commitment },
                );
            }
            state = next;
        }
        Ok(())
    }

    /// Makes checkpoint `p` logged, re-executing forward from the nearest
    /// logged predecessor if needed.
    fn ensure_position(&mut self, p: u64) -> Result<(), TrainerError> {
        if p > self.prep.program.steps {
            return Err(unanswerable(format!("checkpoint {p} is past the end of training")));
        }
        if self.store.contains(p) {
            return Ok(());
        }
        let (start, mut state) = {
            let (s, e) = self
                .store
                .floor(p)
                .ok_or_else(|| unanswerable("no logged checkpoints; train first"))?;
            (s, e.state.clone())
        };
        let mut last_trace = None;
        for t in start..p {
            let batch = self.prep.batch(t);
            let out = self.runner.run(self.ctx, &self.prep.graph, &state, &batch, &mut |_, _, _| {})?;
            self.stats.steps_reexecuted += 1;
            let StepOutcome { state: next, trace, .. } = out;
            state = next;
            last_trace = Some(trace);
        }
        let trace = last_trace.expect("p > start since p was not logged");
        let commitment = commit_step_trace(p, &trace.node_hashes())?;
        self.store.insert(p, StoreEntry { state, trace: Some(trace), commitment });
        Ok(())
    }

    /// This trainer's claim for checkpoint `p`, materializing it if it was
    /// never logged.
    pub fn commitment_at(&mut self, p: u64) -> Result<CheckpointCommitment, TrainerError> {
        self.ensure_position(p)?;
        Ok(self.store.get(p).expect("just ensured").commitment)
    }

    /// The trace of transition `d` (logged at checkpoint d + 1).
    fn trace_for_transition(&mut self, d: u64) -> Result<&StepTrace, TrainerError> {
        self.ensure_position(d + 1)?;
        self.store
            .get(d + 1)
            .and_then(|e| e.trace.as_ref())
            .ok_or_else(|| unanswerable(format!("no trace for transition {d}")))
    }

    /// Re-runs transition `d` to capture one tensor that flowed through it.
    fn capture_payload(&mut self, d: u64, node: &str, slot: u32) -> Result<Tensor, TrainerError> {
        self.ensure_position(d)?;
        let state = self.store.get(d).expect("just ensured").state.clone();
        let batch = self.prep.batch(d);
        let mut captured = None;
        self.runner.run(self.ctx, &self.prep.graph, &state, &batch, &mut |_, spec, outs| {
            if spec.id == node {
                captured = outs.get(slot as usize).cloned();
            }
        })?;
        self.stats.steps_reexecuted += 1;
        captured.ok_or_else(|| unanswerable(format!("no output {slot} of node `{node}`")))
    }

    pub fn output_commitment(&mut self) -> Result<CheckpointCommitment, TrainerError> {
        self.commitment_at(self.prep.program.steps)
    }

    fn answer_inner(&mut self, q: &Query) -> Result<Message, TrainerError> {
        match q {
            Query::OutputCommit => Ok(Message::OutputCommit(self.output_commitment()?)),
            Query::HashList { level, lo, hi } => {
                if *lo >= *hi || *hi > self.prep.program.steps {
                    return Err(unanswerable(format!("bad interval [{lo}, {hi}]")));
                }
                let k = schedule_k(&self.prep.program.schedule, *level);
                let mut list = Vec::new();
                for p in bisection_positions(*lo, *hi, k) {
                    list.push(self.commitment_at(p)?);
                }
                Ok(Message::HashList(list))
            }
            Query::NodeHashSeq { step } => {
                let hashes = self.trace_for_transition(*step)?.node_hashes();
                Ok(Message::NodeHashSeq(hashes))
            }
            Query::NodeOpening { step, index } => {
                let trace = self.trace_for_transition(*step)?;
                let node = trace
                    .nodes
                    .get(*index as usize)
                    .ok_or_else(|| unanswerable(format!("no node {index} in transition {step}")))?;
                Ok(Message::NodeOpening(node.clone()))
            }
            Query::TensorPayload { step, node, slot } => {
                Ok(Message::TensorPayload(self.capture_payload(*step, node, *slot)?))
            }
            Query::MembershipProof { step, name } => {
                if *step == 0 {
                    return Err(unanswerable("checkpoint 0 is the referee's own commitment"));
                }
                let (idx, slot) = *self
                    .prep
                    .graph
                    .state_sources
                    .get(name)
                    .ok_or_else(|| unanswerable(format!("`{name}` is not a state tensor")))?;
                let trace = self.trace_for_transition(step - 1)?;
                let node = trace.nodes[idx].clone();
                let leaves = trace.node_hashes();
                let path = crate::commit::merkle_prove(&leaves, idx)
                    .map_err(TrainerError::Commit)?;
                Ok(Message::MembershipProof(crate::protocol::StateProof { node, slot, path }))
            }
        }
    }
}

impl TrainerEndpoint for Trainer {
    fn name(&self) -> &str {
        &self.name
    }

    fn answer(&mut self, q: &Query) -> Message {
        self.answer_inner(q)
            .unwrap_or_else(|e| Message::Refusal { reason: e.to_string() })
    }

    fn stats(&self) -> TrainStats {
        self.stats
    }
}
