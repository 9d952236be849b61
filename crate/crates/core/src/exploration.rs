//! Generative exploration: sample a backbone path, branch from each of its
//! prefixes at a fixed temperature, and keep one verified and one refuted
//! continuation per step as a contrastive pair.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{sample_continuation, sample_path, Draw, ModelError, PolicyModel};
use crate::pipeline::Dataset;
use crate::reasoning::{
    path_prefix, verify, Answer, Continuation, ContrastivePair, PathError, PromptContext, QuestionId,
    ReasoningPath, Step,
};
use crate::seed::rng_for;
use crate::world::{ground_truth, Question, WorldConfig, WorldError};

pub const CORPUS_SCHEMA: &str = "srpo-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ExplorationError {
    #[error("invalid exploration config: {0}")]
    InvalidConfig(String),
    #[error("step index {index} is outside 1..={max} for a backbone of length {len}")]
    StepIndex { index: usize, max: usize, len: usize },
    #[error("backbone is not terminated")]
    UnterminatedBackbone,
    #[error("nothing to explore: the dataset is empty")]
    EmptyDataset,
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("corpus schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExplorationError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub temperature: f64,
    /// Maximum continuation draws per step, duplicates included.
    pub branch_budget: u32,
    /// Path length cap; `0` means the world's `max_path_len`.
    pub max_len: usize,
    pub dedup: bool,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            branch_budget: 16,
            max_len: 0,
            dedup: true,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ExplorationError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.branch_budget < 2 {
            return Err(ExplorationError::InvalidConfig(format!(
                "branch_budget must be >= 2, got {}",
                self.branch_budget
            )));
        }
        Ok(())
    }

    pub fn effective_max_len(&self, world: &WorldConfig) -> usize {
        if self.max_len == 0 {
            world.max_path_len
        } else {
            self.max_len.min(world.max_path_len)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backbone {
    pub path: ReasoningPath,
    /// Draws spent, including truncated ones.
    pub draws: u32,
}

impl Backbone {
    pub fn is_truncated(&self) -> bool {
        !self.path.is_terminated()
    }
}

/// Samples a whole path, retrying truncated draws up to the branch budget.
///
/// The prompt context is accepted for interface parity; a parametric policy
/// has no prompt channel, so worked examples reach it through the grammar
/// mask and optional warm-start pretraining instead.
pub fn generate_backbone<R: Rng + ?Sized>(
    model: &PolicyModel,
    q: &Question,
    _ctx: &PromptContext,
    cfg: &ExplorationConfig,
    rng: &mut R,
) -> Result<Backbone> {
    cfg.validate()?;
    let max_len = cfg.effective_max_len(model.world());
    let mut first = None;
    for draw in 1..=cfg.branch_budget {
        let path = sample_path(model, q, cfg.temperature, rng, max_len)?;
        if path.is_terminated() {
            return Ok(Backbone { path, draws: draw });
        }
        first.get_or_insert(path);
    }
    Ok(Backbone {
        path: first.expect("budget >= 2"),
        draws: cfg.branch_budget,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    FoundBoth,
    OnlyPositive,
    OnlyNegative,
    None,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [Outcome::FoundBoth, Outcome::OnlyPositive, Outcome::OnlyNegative, Outcome::None];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::FoundBoth => "found-both",
            Outcome::OnlyPositive => "only-positive",
            Outcome::OnlyNegative => "only-negative",
            Outcome::None => "none",
        }
    }
}

/// Accounting for one expanded step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLog {
    pub step_index: usize,
    pub outcome: Outcome,
    pub draws: u32,
    pub truncated: u32,
    pub duplicates: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepExpansion {
    pub log: StepLog,
    pub pair: Option<ContrastivePair>,
    pub positive: Option<Continuation>,
    pub negative: Option<Continuation>,
}

/// Branches from the first `i - 1` backbone states until one verified and one
/// refuted continuation are held or the budget runs out. Truncated draws are
/// failures; with dedup on, repeats are discarded but still spend budget.
pub fn expand_step<R: Rng + ?Sized>(
    model: &PolicyModel,
    q: &Question,
    backbone: &ReasoningPath,
    i: usize,
    cfg: &ExplorationConfig,
    rng: &mut R,
) -> Result<StepExpansion> {
    cfg.validate()?;
    if !backbone.is_terminated() {
        return Err(ExplorationError::UnterminatedBackbone);
    }
    let len = backbone.len();
    if i == 0 || i >= len {
        return Err(ExplorationError::StepIndex {
            index: i,
            max: len.saturating_sub(1),
            len,
        });
    }
    let truth = ground_truth(q, model.world())?;
    let prefix = path_prefix(backbone, i)?;
    let max_len = cfg.effective_max_len(model.world());
    let mut seen: HashSet<Vec<Step>> = HashSet::new();
    let mut log = StepLog {
        step_index: i,
        outcome: Outcome::None,
        draws: 0,
        truncated: 0,
        duplicates: 0,
    };
    let (mut positive, mut negative): (Option<Continuation>, Option<Continuation>) = (None, None);
    while log.draws < cfg.branch_budget && (positive.is_none() || negative.is_none()) {
        log.draws += 1;
        let cont = match sample_continuation(model, q, &prefix, cfg.temperature, rng, max_len)? {
            Draw::Complete(c) => c,
            Draw::Truncated(_) => {
                log.truncated += 1;
                continue;
            }
        };
        if cfg.dedup && !seen.insert(cont.states().to_vec()) {
            log.duplicates += 1;
            continue;
        }
        if cont.answer() == truth {
            positive.get_or_insert(cont);
        } else {
            negative.get_or_insert(cont);
        }
    }
    log.outcome = match (&positive, &negative) {
        (Some(_), Some(_)) => Outcome::FoundBoth,
        (Some(_), None) => Outcome::OnlyPositive,
        (None, Some(_)) => Outcome::OnlyNegative,
        (None, None) => Outcome::None,
    };
    let pair = match (&positive, &negative) {
        (Some(p), Some(n)) => Some(ContrastivePair::new(i, prefix, p.clone(), n.clone(), truth)?),
        _ => None,
    };
    Ok(StepExpansion {
        log,
        pair,
        positive,
        negative,
    })
}

/// Expands every non-terminal step of a terminated backbone and keeps the
/// steps where both polarities were found.
pub fn build_pairs<R: Rng + ?Sized>(
    model: &PolicyModel,
    q: &Question,
    backbone: &ReasoningPath,
    cfg: &ExplorationConfig,
    rng: &mut R,
) -> Result<(Vec<ContrastivePair>, Vec<StepLog>)> {
    if !backbone.is_terminated() {
        return Err(ExplorationError::UnterminatedBackbone);
    }
    let mut pairs = Vec::new();
    let mut logs = Vec::new();
    for i in 1..backbone.len() {
        let e = expand_step(model, q, backbone, i, cfg, rng)?;
        logs.push(e.log);
        pairs.extend(e.pair);
    }
    Ok((pairs, logs))
}

/// Exploration result for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub question_id: QuestionId,
    pub backbone: ReasoningPath,
    pub backbone_draws: u32,
    pub pairs: Vec<ContrastivePair>,
    pub outcomes: Vec<StepLog>,
    /// Why the question produced no expansions, if it did not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl CorpusEntry {
    /// Whole-path preference pair at the earliest step that has one.
    pub fn earliest_pair(&self) -> Option<(ReasoningPath, ReasoningPath)> {
        self.pairs
            .first()
            .map(|p| (p.positive_path(self.question_id), p.negative_path(self.question_id)))
    }

    /// Structural and polarity checks against the question's true answer.
    pub fn check(&self, truth: Answer, cfg: &ExplorationConfig) -> std::result::Result<(), String> {
        if self.backbone.question_id() != self.question_id {
            return Err("backbone belongs to another question".into());
        }
        if self.backbone_draws > cfg.branch_budget {
            return Err(format!("backbone used {} draws over budget {}", self.backbone_draws, cfg.branch_budget));
        }
        let mut last = 0;
        for log in &self.outcomes {
            if log.step_index <= last {
                return Err("step indices are not strictly increasing".into());
            }
            last = log.step_index;
            if log.draws > cfg.branch_budget || log.truncated + log.duplicates > log.draws {
                return Err(format!("step {}: draw accounting exceeds budget", log.step_index));
            }
        }
        let mut last = 0;
        for p in &self.pairs {
            if p.step_index <= last {
                return Err("pair step indices are not strictly increasing".into());
            }
            last = p.step_index;
            let shared = path_prefix(&self.backbone, p.step_index).map_err(|e| e.to_string())?;
            if shared != p.prefix {
                return Err(format!("pair at step {} does not share the backbone prefix", p.step_index));
            }
            let logged = self.outcomes.iter().any(|l| l.step_index == p.step_index && l.outcome == Outcome::FoundBoth);
            if !logged {
                return Err(format!("pair at step {} has no found-both log", p.step_index));
            }
            for (path, want) in [(p.positive_path(self.question_id), true), (p.negative_path(self.question_id), false)] {
                if verify(&path, truth).map_err(|e| e.to_string())? != want {
                    return Err(format!("pair at step {} fails re-verification", p.step_index));
                }
            }
        }
        Ok(())
    }
}

fn explore_question(model: &PolicyModel, q: &Question, cfg: &ExplorationConfig, seed: u64) -> Result<CorpusEntry> {
    let mut rng = rng_for(seed, "explore", q.id.0);
    let backbone = generate_backbone(model, q, &PromptContext::empty(), cfg, &mut rng)?;
    if backbone.is_truncated() {
        return Ok(CorpusEntry {
            question_id: q.id,
            backbone: backbone.path,
            backbone_draws: backbone.draws,
            pairs: Vec::new(),
            outcomes: Vec::new(),
            skipped: Some("backbone-truncated".into()),
        });
    }
    let (pairs, outcomes) = build_pairs(model, q, &backbone.path, cfg, &mut rng)?;
    Ok(CorpusEntry {
        question_id: q.id,
        backbone: backbone.path,
        backbone_draws: backbone.draws,
        pairs,
        outcomes,
        skipped: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationCorpus {
    pub seed: u64,
    pub config: ExplorationConfig,
    pub entries: Vec<CorpusEntry>,
}

impl ExplorationCorpus {
    pub fn total_pairs(&self) -> usize {
        self.entries.iter().map(|e| e.pairs.len()).sum()
    }

    pub fn entry(&self, id: QuestionId) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.question_id == id)
    }

    pub fn pairs_by_question(&self) -> BTreeMap<QuestionId, &[ContrastivePair]> {
        self.entries.iter().map(|e| (e.question_id, e.pairs.as_slice())).collect()
    }

    pub fn report(&self) -> CorpusReport {
        CorpusReport::of(self)
    }

    /// Re-verifies every entry against the dataset it was explored from.
    pub fn check_against(&self, dataset: &Dataset) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            let err = |message: String| ExplorationError::Corpus { line: i + 2, message };
            let rec = dataset
                .get(e.question_id)
                .ok_or_else(|| err(format!("question {} is not in the dataset", e.question_id)))?;
            e.check(rec.answer, &self.config).map_err(err)?;
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CorpusHeader {
            schema: CORPUS_SCHEMA.into(),
            version: CORPUS_VERSION,
            seed: self.seed,
            config: self.config.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for e in &self.entries {
            writeln!(w, "{}", serde_json::to_string(e).expect("entry serializes"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_writer(BufWriter::new(File::create(path)?))
    }

    /// Parses a corpus and re-verifies every pair against `dataset`; nothing
    /// read from disk is trusted.
    pub fn from_reader<R: BufRead>(r: R, dataset: &Dataset) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| ExplorationError::Schema("empty file".into()))??;
        let header: CorpusHeader =
            serde_json::from_str(&first).map_err(|e| ExplorationError::Schema(format!("bad header: {e}")))?;
        if header.schema != CORPUS_SCHEMA || header.version != CORPUS_VERSION {
            return Err(ExplorationError::Schema(format!(
                "expected {CORPUS_SCHEMA} v{CORPUS_VERSION}, found {} v{}",
                header.schema, header.version
            )));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CorpusEntry = serde_json::from_str(&line).map_err(|e| ExplorationError::Corpus {
                line: i + 2,
                message: e.to_string(),
            })?;
            entries.push(entry);
        }
        let corpus = ExplorationCorpus {
            seed: header.seed,
            config: header.config,
            entries,
        };
        corpus.check_against(dataset)?;
        Ok(corpus)
    }

    pub fn read(path: &Path, dataset: &Dataset) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?), dataset)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    schema: String,
    version: u32,
    seed: u64,
    config: ExplorationConfig,
}

/// Explores every question in parallel over a read-only model snapshot.
/// Each question's stream is keyed by `(seed, question id)` and entries are
/// merged in dataset order.
pub fn explore_dataset(model: &PolicyModel, dataset: &Dataset, cfg: &ExplorationConfig, seed: u64) -> Result<ExplorationCorpus> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(ExplorationError::EmptyDataset);
    }
    let entries = dataset
        .records
        .par_iter()
        .map(|r| explore_question(model, &r.question, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExplorationCorpus {
        seed,
        config: cfg.clone(),
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub questions: usize,
    pub skipped: usize,
    pub pairs: usize,
    pub questions_with_pairs: usize,
    /// Number of questions per pair count.
    pub pairs_histogram: BTreeMap<usize, usize>,
    pub outcomes: BTreeMap<Outcome, usize>,
    /// Fraction of expanded steps ending in each one-sided or empty outcome.
    pub only_positive_rate: f64,
    pub only_negative_rate: f64,
    pub none_rate: f64,
    /// Fraction of continuation draws that hit the length cap.
    pub truncation_rate: f64,
    pub duplicate_rate: f64,
    /// Branch draws across all expanded steps.
    pub draws: u64,
    /// Draws spent sampling backbones.
    pub backbone_draws: u64,
    /// Fraction of backbones terminated on the first draw.
    pub backbone_first_draw_rate: f64,
}

impl CorpusReport {
    pub fn of(c: &ExplorationCorpus) -> Self {
        let mut outcomes: BTreeMap<Outcome, usize> = Outcome::ALL.iter().map(|o| (*o, 0)).collect();
        let mut hist = BTreeMap::new();
        let (mut draws, mut truncated, mut duplicates) = (0u64, 0u64, 0u64);
        for e in &c.entries {
            *hist.entry(e.pairs.len()).or_insert(0) += 1;
            for l in &e.outcomes {
                *outcomes.entry(l.outcome).or_default() += 1;
                draws += u64::from(l.draws);
                truncated += u64::from(l.truncated);
                duplicates += u64::from(l.duplicates);
            }
        }
        let steps: usize = outcomes.values().sum();
        let rate = |o: Outcome| ratio(outcomes[&o] as f64, steps as f64);
        let n = c.entries.len();
        CorpusReport {
            questions: n,
            skipped: c.entries.iter().filter(|e| e.skipped.is_some()).count(),
            pairs: c.total_pairs(),
            questions_with_pairs: c.entries.iter().filter(|e| !e.pairs.is_empty()).count(),
            pairs_histogram: hist,
            only_positive_rate: rate(Outcome::OnlyPositive),
            only_negative_rate: rate(Outcome::OnlyNegative),
            none_rate: rate(Outcome::None),
            outcomes,
            truncation_rate: ratio(truncated as f64, draws as f64),
            duplicate_rate: ratio(duplicates as f64, draws as f64),
            draws,
            backbone_draws: c.entries.iter().map(|e| u64::from(e.backbone_draws)).sum(),
            backbone_first_draw_rate: ratio(
                c.entries.iter().filter(|e| e.backbone_draws == 1 && e.skipped.is_none()).count() as f64,
                n as f64,
            ),
        }
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

impl fmt::Display for CorpusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "questions {} skipped {} with-pairs {} pairs {}",
            self.questions, self.skipped, self.questions_with_pairs, self.pairs
        )?;
        for (o, n) in &self.outcomes {
            writeln!(f, "  {:<14}{:>8}", o.name(), n)?;
        }
        writeln!(
            f,
            "  one-sided rates: positive-only {:.3} negative-only {:.3} none {:.3}",
            self.only_positive_rate, self.only_negative_rate, self.none_rate
        )?;
        writeln!(
            f,
            "  branch draws {} (truncated {:.3} duplicate {:.3})  backbone draws {} (first-draw {:.3})",
            self.draws, self.truncation_rate, self.duplicate_rate, self.backbone_draws, self.backbone_first_draw_rate
        )?;
        write!(f, "  pairs per question:")?;
        for (k, n) in &self.pairs_histogram {
            write!(f, " {k}:{n}")?;
        }
        writeln!(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::{run_pipeline, PipelineConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (PolicyModel, Dataset) {
        let world = WorldConfig::default();
        let (records, _) = run_pipeline(n, 11, &world, &PipelineConfig::default()).unwrap();
        let model = PolicyModel::new(&world, &ModelConfig::default(), 4).unwrap();
        (model, Dataset::new(world, records))
    }

    #[test]
    fn terminal_step_cannot_be_expanded() {
        let (model, ds) = setup(3);
        let rec = &ds.records[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ExplorationConfig::default();
        let len = rec.reasoning.len();
        assert!(matches!(
            expand_step(&model, &rec.question, &rec.reasoning, len, &cfg, &mut rng),
            Err(ExplorationError::StepIndex { .. })
        ));
        assert!(expand_step(&model, &rec.question, &rec.reasoning, 0, &cfg, &mut rng).is_err());
        assert!(expand_step(&model, &rec.question, &rec.reasoning, len - 1, &cfg, &mut rng).is_ok());
    }

    #[test]
    fn pairs_are_prefix_sharing_and_polar() {
        let (model, ds) = setup(30);
        let corpus = explore_dataset(&model, &ds, &ExplorationConfig::default(), 5).unwrap();
        assert!(corpus.total_pairs() > 0);
        for e in &corpus.entries {
            let rec = ds.get(e.question_id).unwrap();
            assert!(e.pairs.len() < e.backbone.len().max(1));
            for p in &e.pairs {
                assert_eq!(p.prefix.states(), &e.backbone.states()[..p.step_index - 1]);
                assert!(verify(&p.positive_path(e.question_id), rec.answer).unwrap());
                assert!(!verify(&p.negative_path(e.question_id), rec.answer).unwrap());
                assert_ne!(p.positive, p.negative);
            }
            for l in &e.outcomes {
                assert!(l.draws <= 16);
            }
        }
        let report = corpus.report();
        let per_question: usize = corpus.entries.iter().map(|e| e.pairs.len()).sum();
        assert_eq!(report.pairs, per_question);
        assert_eq!(report.pairs_histogram.values().sum::<usize>(), report.questions);
    }

    #[test]
    fn exploration_is_deterministic_and_round_trips() {
        let (model, ds) = setup(10);
        let cfg = ExplorationConfig::default();
        let a = explore_dataset(&model, &ds, &cfg, 9).unwrap();
        let b = explore_dataset(&model, &ds, &cfg, 9).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.to_writer(&mut ba).unwrap();
        b.to_writer(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let back = ExplorationCorpus::from_reader(ba.as_slice(), &ds).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn flipped_polarity_on_disk_is_caught() {
        let (model, ds) = setup(20);
        let corpus = explore_dataset(&model, &ds, &ExplorationConfig::default(), 2).unwrap();
        let mut bad = corpus.clone();
        let e = bad.entries.iter_mut().find(|e| !e.pairs.is_empty()).unwrap();
        let p = &mut e.pairs[0];
        std::mem::swap(&mut p.positive, &mut p.negative);
        let mut buf = Vec::new();
        bad.to_writer(&mut buf).unwrap();
        assert!(matches!(
            ExplorationCorpus::from_reader(buf.as_slice(), &ds),
            Err(ExplorationError::Corpus { .. })
        ));
    }

    #[test]
    fn one_sided_steps_yield_no_pair() {
        // A policy that always refuses right away: every continuation verifies
        // on hazardous questions, so no negative is ever found.
        let (mut model, ds) = setup(40);
        let refuse = model.vocab().index(Step::Refuse).unwrap();
        let dims = model.dims();
        for v in 0..dims.vocab {
            model.params_mut().out_b[v] = if v == refuse { 50.0 } else { -50.0 };
        }
        let rec = ds.records.iter().find(|r| r.answer == Answer::Refuse).unwrap();
        let cfg = ExplorationConfig {
            branch_budget: 2,
            ..ExplorationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pairs, logs) = build_pairs(&model, &rec.question, &rec.reasoning, &cfg, &mut rng).unwrap();
        assert!(pairs.is_empty());
        assert_eq!(logs.len(), rec.reasoning.len() - 1);
        for l in logs {
            assert_eq!(l.outcome, Outcome::OnlyPositive);
            assert_eq!(l.draws, 2);
            assert_eq!(l.duplicates, 1);
        }
    }

    #[test]
    fn backbone_falls_back_to_flagged_truncated_draw() {
        let (model, ds) = setup(3);
        let q = &ds.records[0].question;
        let cfg = ExplorationConfig {
            max_len: 1,
            ..ExplorationConfig::default()
        };
        let mut n_trunc = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = generate_backbone(&model, q, &PromptContext::empty(), &cfg, &mut rng).unwrap();
            assert!(b.draws <= cfg.branch_budget);
            if b.is_truncated() {
                n_trunc += 1;
                assert_eq!(b.draws, cfg.branch_budget);
            }
        }
        assert!(n_trunc < 20);
    }
}
