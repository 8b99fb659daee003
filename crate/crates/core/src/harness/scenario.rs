//! Scenario files, the scenario runner, and report rendering.

use std::path::Path;

use crate::graph::OptimizerCfg;
use crate::protocol::{verify_evidence, DuelRecord, ExchangeStats, LiveExchange, Referee, Verdict};
use crate::trainer::{DatasetCfg, TrainStats, TrainingProgram};

use super::faults::{FaultSpec, ScenarioEndpoint};
use super::HarnessError;

fn one() -> usize {
    1
}

/// One trainer in a scenario.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSetup {
    pub name: String,
    /// Worker threads for this trainer's operator context. Results are
    /// identical for any count; varying it across trainers exercises that.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub fault: Option<FaultSpec>,
}

impl TrainerSetup {
    pub fn honest(name: &str) -> TrainerSetup {
        TrainerSetup { name: name.into(), workers: 1, fault: None }
    }

    pub fn faulty(name: &str, fault: FaultSpec) -> TrainerSetup {
        TrainerSetup { name: name.into(), workers: 1, fault: Some(fault) }
    }
}

/// What the verdict is expected to say. Unset fields are not checked.
/// `case`, `step`, and `node` must all be explained by a single duel.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    pub outcome: Option<String>,
    pub guilty: Option<Vec<String>>,
    pub case: Option<String>,
    pub step: Option<u64>,
    pub node: Option<String>,
}

/// A fully resolved scenario: program text inline, trainers, expectation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub program: TrainingProgram,
    pub trainers: Vec<TrainerSetup>,
    pub expect: Expect,
}

/// On-disk program description: like [`TrainingProgram`] but referencing
/// the model by path instead of carrying its text.
#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgramSection {
    model: String,
    steps: u64,
    batch_size: usize,
    schedule: Vec<u64>,
    seed: u64,
    optimizer: OptimizerCfg,
    dataset: DatasetCfg,
}

impl ProgramSection {
    /// Loads the referenced model (relative paths resolve against `base`)
    /// and inlines it.
    fn resolve(self, base: &Path) -> Result<TrainingProgram, HarnessError> {
        let model_path = base.join(&self.model);
        let model_text = std::fs::read_to_string(&model_path).map_err(|e| {
            HarnessError::Config(format!("model file {}: {e}", model_path.display()))
        })?;
        Ok(TrainingProgram {
            model_text,
            steps: self.steps,
            batch_size: self.batch_size,
            schedule: self.schedule,
            seed: self.seed,
            optimizer: self.optimizer,
            dataset: self.dataset,
        })
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    program: ProgramSection,
    trainers: Vec<TrainerSetup>,
    #[serde(default)]
    expect: Expect,
}

impl Scenario {
    /// Parses a scenario file. The model path inside `[program]` resolves
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let file: ScenarioFile = toml::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Scenario {
            program: file.program.resolve(base)?,
            trainers: file.trainers,
            expect: file.expect,
        })
    }
}

/// Parses a standalone program file (the `[program]` section layout without
/// the section header). Used by the trainer CLI.
pub fn load_program_file(path: impl AsRef<Path>) -> Result<TrainingProgram, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let section: ProgramSection = toml::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    section.resolve(path.parent().unwrap_or(Path::new(".")))
}

/// Everything a scenario run produced.
pub struct ScenarioOutcome {
    pub verdict: Verdict,
    pub transcript: Vec<u8>,
    pub exchange: ExchangeStats,
    pub trainer_stats: Vec<(String, TrainStats)>,
    /// Expectation and evidence-check failures; empty means the scenario
    /// came out as declared.
    pub mismatches: Vec<String>,
    /// Line-oriented `key = value` rendering, byte-stable across runs.
    pub report: String,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Trains every configured trainer, resolves the dispute, re-verifies the
/// transcript, and checks the expectation.
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioOutcome, HarnessError> {
    if scenario.trainers.len() < 2 {
        return Err(HarnessError::Config("need at least two trainers".into()));
    }
    for (i, t) in scenario.trainers.iter().enumerate() {
        if scenario.trainers[..i].iter().any(|u| u.name == t.name) {
            return Err(HarnessError::Config(format!("duplicate trainer name `{}`", t.name)));
        }
    }

    let mut endpoints = Vec::with_capacity(scenario.trainers.len());
    for t in &scenario.trainers {
        endpoints.push(ScenarioEndpoint::build(
            &t.name,
            &scenario.program,
            t.workers,
            t.fault.as_ref(),
        )?);
    }
    let roster: Vec<String> = scenario.trainers.iter().map(|t| t.name.clone()).collect();

    let mut referee = Referee::new(&scenario.program)?;
    let mut ex = LiveExchange::new(
        endpoints.iter_mut().map(|e| e as &mut dyn crate::protocol::TrainerEndpoint).collect(),
    );
    let verdict = referee.resolve(&mut ex, &roster)?;
    let trainer_stats: Vec<(String, TrainStats)> =
        roster.iter().cloned().zip(ex.endpoint_stats()).collect();
    let (transcript, exchange) = ex.into_transcript();

    let mut mismatches = check_expect(&scenario.expect, &verdict);
    let evidence = match verify_evidence(&transcript) {
        Ok(replayed) if replayed == verdict => "verified".to_string(),
        Ok(_) => {
            mismatches.push("evidence: replay produced a different verdict".into());
            "replay diverged".to_string()
        }
        Err(e) => {
            mismatches.push(format!("evidence: {e}"));
            format!("invalid: {e}")
        }
    };

    let mut report =
        render_report(&verdict, &trainer_stats, &exchange, transcript.len(), &evidence);
    match mismatches.is_empty() {
        true => report.push_str("expect = ok\n"),
        false => report.push_str(&format!("expect = failed: {}\n", mismatches.join("; "))),
    }

    Ok(ScenarioOutcome { verdict, transcript, exchange, trainer_stats, mismatches, report })
}

/// Line-oriented dispute summary: the verdict's canonical text followed by
/// per-trainer and exchange statistics.
pub fn render_report(
    verdict: &Verdict,
    trainer_stats: &[(String, TrainStats)],
    exchange: &ExchangeStats,
    transcript_len: usize,
    evidence: &str,
) -> String {
    let mut report = verdict.canonical_text();
    for (name, stats) in trainer_stats {
        report.push_str(&format!("trainer.{name}.steps_executed = {}\n", stats.steps_executed));
        report.push_str(&format!(
            "trainer.{name}.steps_reexecuted = {}\n",
            stats.steps_reexecuted
        ));
    }
    report.push_str(&format!("exchange.queries = {}\n", exchange.queries));
    report.push_str(&format!(
        "exchange.tensor_payload_bytes = {}\n",
        exchange.tensor_payload_bytes
    ));
    report.push_str(&format!("exchange.max_frame_bytes = {}\n", exchange.max_frame_bytes));
    report.push_str(&format!("exchange.note_bytes = {}\n", exchange.note_bytes));
    report.push_str(&format!("transcript_bytes = {transcript_len}\n"));
    report.push_str(&format!("evidence = {evidence}\n"));
    report
}

fn check_expect(expect: &Expect, verdict: &Verdict) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(want) = &expect.outcome {
        let got = verdict.outcome.name();
        if got != want {
            out.push(format!("outcome: want {want}, got {got}"));
        }
    }
    if let Some(want) = &expect.guilty {
        let mut want = want.clone();
        want.sort();
        let mut got: Vec<String> = verdict.convictions.iter().map(|(p, _)| p.clone()).collect();
        got.sort();
        got.dedup();
        if got != want {
            out.push(format!("guilty: want [{}], got [{}]", want.join(","), got.join(",")));
        }
    }
    if expect.case.is_some() || expect.step.is_some() || expect.node.is_some() {
        let matches = |d: &DuelRecord| {
            expect.case.as_ref().is_none_or(|w| d.case.map(|c| c.name()) == Some(w.as_str()))
                && expect.step.is_none_or(|w| d.step == Some(w))
                && expect.node.as_ref().is_none_or(|w| d.node.as_deref() == Some(w.as_str()))
        };
        if !verdict.duels.iter().any(matches) {
            let fmt = |o: &Option<String>| o.clone().unwrap_or_else(|| "-".into());
            out.push(format!(
                "no duel matched case={} step={} node={}",
                fmt(&expect.case),
                expect.step.map_or("-".into(), |s| s.to_string()),
                fmt(&expect.node),
            ));
        }
    }
    out
}
