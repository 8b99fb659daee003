//! Injectable trainer faults.
//!
//! Each fault models one way a trainer can cheat. Runner-level faults
//! corrupt execution itself and are re-applied identically when the trainer
//! re-executes during a dispute, so the cheater stays consistent with its
//! own commitments everywhere except the lie. Endpoint-level faults corrupt
//! the conversation instead: doctored claims or refusals.

use crate::detops::OpCtx;
use crate::graph::{
    build_extended_graph, execute_step_hooked, parse_model, ExecError, ExtendedGraph, ModelGraph,
    NodeSpec, OpKind, OptimizerCfg, SlotRef, StepOutcome, TrainingState,
};
use crate::protocol::{Message, Query, TrainerEndpoint};
use crate::trainer::{StepRunner, TrainStats, Trainer, TrainingProgram};

use super::HarnessError;

/// How `wrong_output_tensor` bends the first value of the node's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Add 1.0; decisive for anything of typical training magnitude.
    #[default]
    AddOne,
    Negate,
    Zero,
}

impl Perturbation {
    fn apply(&self, v: &mut f32) {
        match self {
            Perturbation::AddOne => *v += 1.0,
            Perturbation::Negate => *v = -*v,
            Perturbation::Zero => *v = 0.0,
        }
    }
}

/// One way to cheat. `step` always names a transition index.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    /// Corrupt one output value of `node` during transition `step`.
    WrongOutputTensor {
        step: u64,
        node: String,
        #[serde(default)]
        perturbation: Perturbation,
    },
    /// For transition `step`, run a graph where input `input` of forward
    /// node `node` reads `replace_with` instead.
    WrongInputWiring { step: u64, node: String, input: usize, replace_with: String },
    /// For transition `step`, run a graph built with a doubled learning
    /// rate.
    WrongGraphStructure { step: u64 },
    /// Leave all parameters (and moments) untouched for the final `count`
    /// transitions.
    SkipSteps { count: u64 },
    /// Train honestly but claim a doctored final commitment. Phase 1 folds
    /// at the first hash-list boundary; phase 2 repeats the lie down the
    /// bisection and folds at trace comparison.
    InconsistentCommitment { phase: u32 },
    /// Corrupt like `wrong_output_tensor` at (`step`, `node`) but refuse
    /// all queries of kind `query` during the dispute.
    NonResponse { step: u64, node: String, query: String },
    /// Compute honestly but commit a doctored input digest for `node`
    /// during transition `step`. Only dents checkpoint `step + 1`, so the
    /// final claim diverges only when `step` is the last transition.
    WrongInputDigest {
        step: u64,
        node: String,
        #[serde(default)]
        slot: u32,
    },
}

impl FaultSpec {
    /// Query kind this fault refuses, if any.
    fn refuses(&self) -> Option<String> {
        match self {
            FaultSpec::NonResponse { query, .. } => Some(query.clone()),
            _ => None,
        }
    }

    /// Commitment-lie phase, if this is an endpoint-level fault.
    fn lie_phase(&self) -> Option<u32> {
        match self {
            FaultSpec::InconsistentCommitment { phase } => Some(*phase),
            _ => None,
        }
    }
}

/// Applies a [`FaultSpec`] during execution. Identical inputs produce
/// identical (mis)behavior, which is what keeps a cheating trainer
/// internally consistent under re-execution.
struct FaultyRunner {
    fault: FaultSpec,
    /// Rebuilt graph for wiring/structure faults.
    alt: Option<ExtendedGraph>,
    steps: u64,
}

impl FaultyRunner {
    fn new(fault: FaultSpec, program: &TrainingProgram) -> Result<FaultyRunner, HarnessError> {
        let bad = |msg: String| HarnessError::Config(msg);
        let steps = program.steps;
        let check_step = |step: u64| {
            if step >= steps {
                return Err(bad(format!("fault step {step} is past the last transition")));
            }
            Ok(())
        };
        let alt = match &fault {
            FaultSpec::WrongOutputTensor { step, .. }
            | FaultSpec::NonResponse { step, .. }
            | FaultSpec::WrongInputDigest { step, .. } => {
                check_step(*step)?;
                None
            }
            FaultSpec::WrongInputWiring { step, node, input, replace_with } => {
                check_step(*step)?;
                let model = parse_model(&program.model_text)
                    .map_err(|e| bad(format!("fault model: {e}")))?;
                let rewired = rewire(model, node, *input, replace_with)?;
                Some(
                    build_extended_graph(&rewired, &program.optimizer)
                        .map_err(|e| bad(format!("rewired graph does not build: {e}")))?,
                )
            }
            FaultSpec::WrongGraphStructure { step } => {
                check_step(*step)?;
                let model = parse_model(&program.model_text)
                    .map_err(|e| bad(format!("fault model: {e}")))?;
                let opt = match program.optimizer {
                    OptimizerCfg::Sgd { lr } => OptimizerCfg::Sgd { lr: lr * 2.0 },
                    OptimizerCfg::Adam { lr, beta1, beta2, eps } => {
                        OptimizerCfg::Adam { lr: lr * 2.0, beta1, beta2, eps }
                    }
                };
                Some(
                    build_extended_graph(&model, &opt)
                        .map_err(|e| bad(format!("altered graph does not build: {e}")))?,
                )
            }
            FaultSpec::SkipSteps { count } => {
                if *count == 0 || *count > steps {
                    return Err(bad(format!("skip count {count} not in 1..={steps}")));
                }
                None
            }
            FaultSpec::InconsistentCommitment { phase } => {
                if !(*phase == 1 || *phase == 2) {
                    return Err(bad(format!("inconsistent_commitment phase {phase} not 1 or 2")));
                }
                None
            }
        };
        Ok(FaultyRunner { fault, alt, steps })
    }
}

fn rewire(
    mut model: ModelGraph,
    node: &str,
    input: usize,
    replace_with: &str,
) -> Result<ModelGraph, HarnessError> {
    let n = model
        .nodes
        .iter_mut()
        .find(|n| n.id == node)
        .ok_or_else(|| HarnessError::Config(format!("fault node `{node}` not in model")))?;
    let slot = n
        .inputs
        .get_mut(input)
        .ok_or_else(|| HarnessError::Config(format!("node `{node}` has no input {input}")))?;
    *slot = SlotRef::new(replace_with, 0);
    Ok(model)
}

impl StepRunner for FaultyRunner {
    fn run(
        &mut self,
        ctx: OpCtx,
        graph: &ExtendedGraph,
        state: &TrainingState,
        batch: &crate::graph::Batch,
        observe: &mut dyn FnMut(usize, &NodeSpec, &[crate::detops::Tensor]),
    ) -> Result<StepOutcome, ExecError> {
        match &self.fault {
            FaultSpec::WrongOutputTensor { step, node, .. }
            | FaultSpec::NonResponse { step, node, .. } => {
                let perturbation = match &self.fault {
                    FaultSpec::WrongOutputTensor { perturbation, .. } => *perturbation,
                    _ => Perturbation::default(),
                };
                let here = state.step == *step;
                execute_step_hooked(ctx, graph, state, batch, &mut |i, spec, outs| {
                    if here && spec.id == *node {
                        perturbation.apply(&mut outs[0].values_mut()[0]);
                    }
                    observe(i, spec, outs);
                })
            }
            FaultSpec::WrongInputWiring { step, .. } | FaultSpec::WrongGraphStructure { step } => {
                let g = if state.step == *step { self.alt.as_ref().unwrap() } else { graph };
                execute_step_hooked(ctx, g, state, batch, &mut |i, spec, outs| {
                    observe(i, spec, outs)
                })
            }
            FaultSpec::SkipSteps { count } => {
                let here = state.step >= self.steps - count;
                execute_step_hooked(ctx, graph, state, batch, &mut |i, spec, outs| {
                    if here && matches!(spec.kind, OpKind::SgdUpdate | OpKind::AdamUpdate) {
                        let param = spec.id.strip_suffix(".upd").expect("update node id");
                        outs[0] = state.tensors[param].clone();
                        if matches!(spec.kind, OpKind::AdamUpdate) {
                            outs[1] = state.tensors[&format!("{param}.m")].clone();
                            outs[2] = state.tensors[&format!("{param}.v")].clone();
                        }
                    }
                    observe(i, spec, outs);
                })
            }
            FaultSpec::InconsistentCommitment { .. } => {
                execute_step_hooked(ctx, graph, state, batch, &mut |i, spec, outs| {
                    observe(i, spec, outs)
                })
            }
            FaultSpec::WrongInputDigest { step, node, slot } => {
                let mut out = execute_step_hooked(ctx, graph, state, batch, &mut |i, spec, outs| {
                    observe(i, spec, outs)
                })?;
                if state.step == *step {
                    let tampered = out
                        .trace
                        .nodes
                        .iter_mut()
                        .find(|n| n.spec.id == *node)
                        .and_then(|n| n.input_hashes.get_mut(*slot as usize));
                    match tampered {
                        Some(digest) => digest.0[0] ^= 0x5a,
                        None => {
                            return Err(ExecError::MissingTensor(format!(
                                "fault target {node} input {slot}"
                            )))
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// A trainer wired into a scenario: the real [`Trainer`] underneath, plus
/// any endpoint-level misbehavior from its fault.
pub struct ScenarioEndpoint {
    trainer: Trainer,
    refuse: Option<String>,
    lie_phase: Option<u32>,
}

impl ScenarioEndpoint {
    /// Builds and trains the endpoint.
    pub fn build(
        name: &str,
        program: &TrainingProgram,
        workers: usize,
        fault: Option<&FaultSpec>,
    ) -> Result<ScenarioEndpoint, HarnessError> {
        let ctx = if workers <= 1 { OpCtx::serial() } else { OpCtx::with_workers(workers) };
        let mut trainer = match fault {
            Some(f) => {
                let runner = FaultyRunner::new(f.clone(), program)?;
                Trainer::with_runner(name, program.clone(), ctx, Box::new(runner))?
            }
            None => Trainer::new(name, program.clone(), ctx)?,
        };
        trainer.train()?;
        Ok(ScenarioEndpoint {
            trainer,
            refuse: fault.and_then(|f| f.refuses()),
            lie_phase: fault.and_then(|f| f.lie_phase()),
        })
    }

    pub fn trainer(&mut self) -> &mut Trainer {
        &mut self.trainer
    }
}

impl TrainerEndpoint for ScenarioEndpoint {
    fn name(&self) -> &str {
        self.trainer.name()
    }

    fn answer(&mut self, q: &Query) -> Message {
        if let Some(kind) = &self.refuse {
            if q.kind_name() == kind {
                return Message::Refusal { reason: "withheld".into() };
            }
        }
        let m = self.trainer.answer(q);
        let Some(phase) = self.lie_phase else { return m };
        let steps = self.trainer.prepared().program.steps;
        match m {
            Message::OutputCommit(mut c) => {
                c.root.0[0] ^= 0x5a;
                Message::OutputCommit(c)
            }
            // keep the lie alive down the bisection so it only collapses
            // at trace comparison
            Message::HashList(mut list) if phase == 2 => {
                if let Query::HashList { hi, .. } = q {
                    if *hi == steps {
                        list.last_mut().expect("hash lists are non-empty").root.0[0] ^= 0x5a;
                    }
                }
                Message::HashList(list)
            }
            m => m,
        }
    }

    fn stats(&self) -> TrainStats {
        self.trainer.train_stats()
    }
}
