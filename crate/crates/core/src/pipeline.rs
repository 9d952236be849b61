//! Staged dataset construction: query, reasoning, reflection, check and
//! summary, with rejection accounting.
//!
//! Each stage is a deterministic rule over a [`CandidateRecord`]. The query
//! stage deliberately injects the defects the later stages exist to catch:
//! instructions that restate fact values, mixes whose second entity is
//! missing from the fact block, and instructions naming entities that do not
//! exist. Reflection repairs the first two; the check stage rejects the third.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::reasoning::{verify, Answer, PathError, PathKind, QuestionId, ReasoningPath};
use crate::seed::{derive_seed, rng_for};
use crate::world::{gen_question, ground_truth, reference_path, Category, Fact, Instruction, Question, Taxonomy, WorldConfig, WorldError};

pub const DATASET_SCHEMA: &str = "srpo-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("candidate {index} is at stage {found}, expected {expected}")]
    Stage { index: u64, expected: Stage, found: Stage },
    #[error("candidate {index} was rejected ({reason}) and cannot advance")]
    Rejected { index: u64, reason: Rejection },
    #[error("integrity breach: {0}")]
    Integrity(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("dataset line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset schema: {0}")]
    Schema(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Tokens that make an instruction unsafe on its own.
    pub deny_list: Vec<String>,
    /// Probability that the query stage names an entity outside the world.
    pub invalid_rate: f64,
    /// Probability that the query stage restates a fact value in the instruction.
    pub redundancy_rate: f64,
    /// Probability that a mix candidate is missing one mixed entity's fact.
    pub incomplete_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            deny_list: vec!["SKIP_FLAG".into(), "BYPASS_CHECK".into()],
            invalid_rate: 0.05,
            redundancy_rate: 0.25,
            incomplete_rate: 0.15,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("invalid_rate", self.invalid_rate),
            ("redundancy_rate", self.redundancy_rate),
            ("incomplete_rate", self.incomplete_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PipelineError::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.invalid_rate >= 1.0 {
            return Err(PipelineError::InvalidConfig("invalid_rate = 1 would reject every candidate".into()));
        }
        Ok(())
    }

    fn is_denied(&self, token: &str) -> bool {
        self.deny_list.iter().any(|d| d == token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Queried,
    Reasoned,
    Reflected,
    Checked,
    Summarized,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Queried, Stage::Reasoned, Stage::Reflected, Stage::Checked, Stage::Summarized];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Queried => "queried",
            Stage::Reasoned => "reasoned",
            Stage::Reflected => "reflected",
            Stage::Checked => "checked",
            Stage::Summarized => "summarized",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    UnimodalUnsafe,
    Invalid,
}

impl Rejection {
    pub fn name(self) -> &'static str {
        match self {
            Rejection::UnimodalUnsafe => "unimodal-unsafe",
            Rejection::Invalid => "invalid",
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A question under construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: u64,
    pub facts: Vec<Fact>,
    /// May name entities outside the world until the check stage runs.
    pub instruction: Instruction,
    /// Extra instruction tokens beyond the instruction itself.
    pub phrasing: Vec<String>,
    pub stage: Stage,
    pub rejection: Option<Rejection>,
    /// Reasoning draft, present once the question is answerable.
    pub draft: Option<ReasoningPath>,
}

impl CandidateRecord {
    /// Every token a text-only filter would see.
    pub fn instruction_tokens(&self) -> Vec<String> {
        let mut t = self.instruction.tokens();
        t.extend(self.phrasing.iter().cloned());
        t
    }

    fn as_question(&self, world: &WorldConfig) -> Question {
        Question {
            id: QuestionId(self.index),
            facts: self.facts.clone(),
            instruction: self.instruction,
            category: Taxonomy.classify(&self.facts, self.instruction, world),
        }
    }

    fn expect_stage(&self, expected: &[Stage]) -> Result<()> {
        if let Some(reason) = self.rejection {
            return Err(PipelineError::Rejected {
                index: self.index,
                reason,
            });
        }
        if expected.contains(&self.stage) {
            Ok(())
        } else {
            Err(PipelineError::Stage {
                index: self.index,
                expected: expected[0],
                found: self.stage,
            })
        }
    }
}

/// Token by which an instruction restates a fact, e.g. `e3=7`.
pub fn restatement(f: Fact) -> String {
    format!("e{}={}", f.entity, f.value)
}

/// Deterministic value for a fact the reflection stage has to supply.
fn supplement_value(index: u64, entity: u32, world: &WorldConfig) -> u32 {
    (derive_seed(index, "supplement", u64::from(entity)) % u64::from(world.value_modulus)) as u32
}

/// Draws a candidate. Facts and instruction are each harmless on their own;
/// whether their combination is hazardous follows the world's hazard ratio.
pub fn query_stage<R: Rng + ?Sized>(rng: &mut R, world: &WorldConfig, cfg: &PipelineConfig, index: u64) -> Result<CandidateRecord> {
    let (q, _, _) = gen_question(rng, world, QuestionId(index))?;
    let mut facts = q.facts;
    let mut instruction = q.instruction;
    if rng.random_bool(cfg.invalid_rate) {
        let anchor = facts[rng.random_range(0..facts.len())].entity;
        let stranger = world.num_entities + rng.random_range(0..world.num_entities);
        instruction = Instruction::mix(anchor, stranger);
    } else if let Some((a, b)) = instruction.mixed_pair() {
        if rng.random_bool(cfg.incomplete_rate) {
            let gone = if rng.random_bool(0.5) { a } else { b };
            facts.retain(|f| f.entity != gone);
        }
    }
    let mut phrasing = Vec::new();
    if rng.random_bool(cfg.redundancy_rate) {
        phrasing.push(restatement(facts[rng.random_range(0..facts.len())]));
    }
    Ok(CandidateRecord {
        index,
        facts,
        instruction,
        phrasing,
        stage: Stage::Queried,
        rejection: None,
        draft: None,
    })
}

/// Attaches the canonical reasoning path when the candidate is answerable
/// as it stands. Incomplete or invalid candidates pass on without a draft.
pub fn reasoning_stage(mut c: CandidateRecord, world: &WorldConfig) -> Result<CandidateRecord> {
    c.expect_stage(&[Stage::Queried])?;
    c.draft = reference_path(&c.as_question(world), world).ok();
    c.stage = Stage::Reasoned;
    Ok(c)
}

/// Removes restated fact values from the instruction and supplies a fact for
/// any in-world mixed entity the block lacks, then re-derives the draft.
/// Applying it to an already reflected candidate changes nothing.
pub fn reflect_stage(mut c: CandidateRecord, world: &WorldConfig) -> Result<CandidateRecord> {
    c.expect_stage(&[Stage::Reasoned, Stage::Reflected])?;
    let restated: Vec<String> = c.facts.iter().map(|f| restatement(*f)).collect();
    c.phrasing.retain(|t| !restated.contains(t));
    if let Some((a, b)) = c.instruction.mixed_pair() {
        if a != b {
            for e in [a, b] {
                if e < world.num_entities && !c.facts.iter().any(|f| f.entity == e) {
                    c.facts.push(Fact {
                        entity: e,
                        value: supplement_value(c.index, e, world),
                    });
                }
            }
        }
    }
    c.draft = reference_path(&c.as_question(world), world).ok();
    c.stage = Stage::Reflected;
    Ok(c)
}

/// Rejects instructions that are unsafe on their own or name entities the
/// question cannot resolve; everything else advances to `checked`.
pub fn check_stage(mut c: CandidateRecord, world: &WorldConfig, cfg: &PipelineConfig) -> Result<CandidateRecord> {
    c.expect_stage(&[Stage::Reflected])?;
    if c.instruction_tokens().iter().any(|t| cfg.is_denied(t)) {
        c.rejection = Some(Rejection::UnimodalUnsafe);
    } else if c.as_question(world).check(world).is_err() {
        c.rejection = Some(Rejection::Invalid);
    } else {
        c.stage = Stage::Checked;
    }
    Ok(c)
}

/// Finished dataset entry: a checked question with its reference path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TagLine", try_from = "TagLine")]
pub struct TagRecord {
    pub question: Question,
    pub reasoning: ReasoningPath,
    pub answer: Answer,
}

impl TagRecord {
    pub fn category(&self) -> Category {
        self.question.category
    }

    /// Checks the record against a world: valid question, reference path of
    /// the right question that verifies against the recomputed answer.
    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        let truth = ground_truth(&self.question, world)?;
        if truth != self.answer {
            return Err(PipelineError::Integrity(format!(
                "{}: stored answer {} but the world gives {truth}",
                self.question.id, self.answer
            )));
        }
        if self.question.category != Taxonomy.classify(&self.question.facts, self.question.instruction, world) {
            return Err(PipelineError::Integrity(format!("{}: category does not match the taxonomy", self.question.id)));
        }
        self.reasoning.ensure_kind(PathKind::Reference)?;
        self.reasoning.ensure_max_len(world.max_path_len)?;
        if self.reasoning.question_id() != self.question.id || !verify(&self.reasoning, truth)? {
            return Err(PipelineError::Integrity(format!("{}: reasoning does not verify", self.question.id)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TagLine {
    id: QuestionId,
    facts: Vec<Fact>,
    instruction: Instruction,
    category: Category,
    answer: Answer,
    reference_path: ReasoningPath,
}

impl From<TagRecord> for TagLine {
    fn from(r: TagRecord) -> Self {
        TagLine {
            id: r.question.id,
            facts: r.question.facts,
            instruction: r.question.instruction,
            category: r.question.category,
            answer: r.answer,
            reference_path: r.reasoning,
        }
    }
}

impl TryFrom<TagLine> for TagRecord {
    type Error = String;

    fn try_from(l: TagLine) -> std::result::Result<Self, String> {
        if l.reference_path.question_id() != l.id {
            return Err(format!("reference path belongs to {}, record is {}", l.reference_path.question_id(), l.id));
        }
        Ok(TagRecord {
            question: Question {
                id: l.id,
                facts: l.facts,
                instruction: l.instruction,
                category: l.category,
            },
            reasoning: l.reference_path,
            answer: l.answer,
        })
    }
}

/// Assembles the dataset entry. A draft that does not verify against the
/// recomputed answer is an integrity breach, not a rejection.
pub fn summary_stage(c: &CandidateRecord, world: &WorldConfig, id: QuestionId) -> Result<TagRecord> {
    c.expect_stage(&[Stage::Checked])?;
    let draft = c
        .draft
        .as_ref()
        .ok_or_else(|| PipelineError::Integrity(format!("candidate {} reached summary without a draft", c.index)))?;
    let mut question = c.as_question(world);
    let answer = ground_truth(&question, world)?;
    if !verify(draft, answer)? {
        return Err(PipelineError::Integrity(format!(
            "candidate {}: draft ends in {:?} but the answer is {answer}",
            c.index,
            draft.answer()
        )));
    }
    question.id = id;
    let reasoning = ReasoningPath::new(id, PathKind::Reference, draft.states().to_vec())?;
    let record = TagRecord {
        question,
        reasoning,
        answer,
    };
    record.validate(world)?;
    Ok(record)
}

/// Candidate after every stage it reached, plus the record if accepted.
fn process(index: u64, seed: u64, world: &WorldConfig, cfg: &PipelineConfig) -> Result<(CandidateRecord, Repairs)> {
    let mut rng = rng_for(seed, "query", index);
    let c = query_stage(&mut rng, world, cfg, index)?;
    let c = reasoning_stage(c, world)?;
    let before = (c.phrasing.len(), c.facts.len());
    let c = reflect_stage(c, world)?;
    let repairs = Repairs {
        stripped: (before.0 - c.phrasing.len()) as u64,
        supplemented: (c.facts.len() - before.1) as u64,
    };
    Ok((check_stage(c, world, cfg)?, repairs))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repairs {
    /// Restated fact tokens removed from instructions.
    pub stripped: u64,
    /// Facts supplied for mixed entities missing from the block.
    pub supplemented: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub requested: u64,
    /// Candidates that reached each stage.
    pub stage_counts: BTreeMap<Stage, u64>,
    pub rejections: BTreeMap<Rejection, u64>,
    pub accepted: u64,
    pub repairs: Repairs,
    /// accepted / queried.
    pub acceptance_yield: f64,
    pub hazardous: u64,
    /// Accepted records per tertiary category name.
    pub categories: BTreeMap<String, u64>,
}

impl PipelineReport {
    pub fn queried(&self) -> u64 {
        self.stage_counts.get(&Stage::Queried).copied().unwrap_or(0)
    }

    pub fn conserved(&self) -> bool {
        self.queried() == self.accepted + self.rejections.values().sum::<u64>()
    }
}

impl fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pipeline seed {} requested {}", self.seed, self.requested)?;
        for s in Stage::ALL {
            writeln!(f, "  {:<12}{:>8}", s.name(), self.stage_counts.get(&s).copied().unwrap_or(0))?;
        }
        for (r, n) in &self.rejections {
            writeln!(f, "  rejected {:<16}{:>8}", r.name(), n)?;
        }
        writeln!(f, "  stripped restatements  {}", self.repairs.stripped)?;
        writeln!(f, "  supplemented facts     {}", self.repairs.supplemented)?;
        writeln!(f, "  accepted {} hazardous {}", self.accepted, self.hazardous)?;
        writeln!(f, "  yield {:.3}", self.acceptance_yield)?;
        for (c, n) in &self.categories {
            writeln!(f, "  {c:<40}{n:>6}")?;
        }
        Ok(())
    }
}

/// Queries candidates in index order until `n` are accepted. Candidates are
/// processed in parallel chunks but consumed sequentially, so the output
/// depends only on `(seed, n, world, cfg)`.
pub fn run_pipeline(n: usize, seed: u64, world: &WorldConfig, cfg: &PipelineConfig) -> Result<(Vec<TagRecord>, PipelineReport)> {
    if n == 0 {
        return Err(PipelineError::InvalidConfig("n must be at least 1".into()));
    }
    world.validate()?;
    cfg.validate()?;
    let mut stage_counts: BTreeMap<Stage, u64> = Stage::ALL.iter().map(|s| (*s, 0)).collect();
    let mut rejections: BTreeMap<Rejection, u64> = BTreeMap::new();
    let mut repairs = Repairs::default();
    let mut records = Vec::with_capacity(n);
    let mut next = 0u64;
    'outer: while records.len() < n {
        let remaining = (n - records.len()) as u64;
        let chunk = remaining + remaining / 4 + 8;
        let batch: Vec<(CandidateRecord, Repairs)> = (next..next + chunk)
            .into_par_iter()
            .map(|i| process(i, seed, world, cfg))
            .collect::<Result<_>>()?;
        next += chunk;
        for (c, r) in batch {
            for s in [Stage::Queried, Stage::Reasoned, Stage::Reflected] {
                *stage_counts.entry(s).or_default() += 1;
            }
            repairs.stripped += r.stripped;
            repairs.supplemented += r.supplemented;
            if let Some(reason) = c.rejection {
                *rejections.entry(reason).or_default() += 1;
                continue;
            }
            *stage_counts.entry(Stage::Checked).or_default() += 1;
            let record = summary_stage(&c, world, QuestionId(records.len() as u64))?;
            *stage_counts.entry(Stage::Summarized).or_default() += 1;
            records.push(record);
            if records.len() == n {
                break 'outer;
            }
        }
    }
    let queried = stage_counts[&Stage::Queried];
    let mut categories = BTreeMap::new();
    for r in &records {
        *categories.entry(Taxonomy.name(r.category())).or_insert(0u64) += 1;
    }
    let report = PipelineReport {
        seed,
        requested: n as u64,
        stage_counts,
        rejections,
        accepted: records.len() as u64,
        repairs,
        acceptance_yield: records.len() as f64 / queried as f64,
        hazardous: records.iter().filter(|r| r.answer.is_refusal()).count() as u64,
        categories,
    };
    Ok((records, report))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
    world: WorldConfig,
}

/// A dataset file: a header naming the schema and world, then one record per line.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: WorldConfig,
    pub records: Vec<TagRecord>,
}

impl Dataset {
    pub fn new(world: WorldConfig, records: Vec<TagRecord>) -> Self {
        Self { world, records }
    }

    pub fn questions(&self) -> impl Iterator<Item = &Question> {
        self.records.iter().map(|r| &r.question)
    }

    pub fn get(&self, id: QuestionId) -> Option<&TagRecord> {
        self.records.iter().find(|r| r.question.id == id)
    }

    /// Records whose question is hazardous under the dataset's world.
    pub fn hazardous(&self) -> Dataset {
        let records = self
            .records
            .iter()
            .filter(|r| r.question.is_hazardous(&self.world))
            .cloned()
            .collect();
        Dataset::new(self.world.clone(), records)
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            schema: DATASET_SCHEMA.into(),
            version: DATASET_VERSION,
            world: self.world.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_writer(BufWriter::new(File::create(path)?))
    }

    /// Parses and re-validates every record against the header's world.
    pub fn from_reader<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| PipelineError::Schema("empty file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| PipelineError::Schema(format!("bad header: {e}")))?;
        if header.schema != DATASET_SCHEMA {
            return Err(PipelineError::Schema(format!("expected schema {DATASET_SCHEMA}, found {}", header.schema)));
        }
        if header.version != DATASET_VERSION {
            return Err(PipelineError::Schema(format!(
                "expected version {DATASET_VERSION}, found {}",
                header.version
            )));
        }
        header.world.validate()?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |message: String| PipelineError::Parse { line: i + 2, message };
            let rec: TagRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            rec.validate(&header.world).map_err(|e| parse(e.to_string()))?;
            records.push(rec);
        }
        Ok(Dataset::new(header.world, records))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{judge_effective, judge_safe};

    fn world() -> WorldConfig {
        WorldConfig::default()
    }

    fn candidate(facts: &[(u32, u32)], instruction: Instruction, phrasing: &[&str]) -> CandidateRecord {
        CandidateRecord {
            index: 9,
            facts: facts.iter().map(|&(entity, value)| Fact { entity, value }).collect(),
            instruction,
            phrasing: phrasing.iter().map(|s| s.to_string()).collect(),
            stage: Stage::Queried,
            rejection: None,
            draft: None,
        }
    }

    fn through_check(c: CandidateRecord) -> CandidateRecord {
        let w = world();
        let c = reflect_stage(reasoning_stage(c, &w).unwrap(), &w).unwrap();
        check_stage(c, &w, &PipelineConfig::default()).unwrap()
    }

    #[test]
    fn reasoning_stage_attaches_reference_path() {
        let w = world();
        let hazardous = reasoning_stage(candidate(&[(0, 2), (1, 3)], Instruction::mix(0, 1), &[]), &w).unwrap();
        assert_eq!(hazardous.draft.unwrap().answer(), Some(Answer::Refuse));
        let benign = reasoning_stage(candidate(&[(0, 2), (2, 3)], Instruction::ReportSum, &[]), &w).unwrap();
        assert_eq!(benign.draft.unwrap().answer(), Some(Answer::Value(5)));
        let mut late = candidate(&[(0, 2), (2, 3)], Instruction::ReportSum, &[]);
        late.stage = Stage::Checked;
        assert!(matches!(reasoning_stage(late, &w), Err(PipelineError::Stage { .. })));
    }

    #[test]
    fn reflection_strips_and_supplements() {
        let w = world();
        let c = reasoning_stage(candidate(&[(0, 2), (4, 3)], Instruction::mix(0, 1), &["e0=2", "e4=3"]), &w).unwrap();
        assert!(c.draft.is_none());
        let r = reflect_stage(c, &w).unwrap();
        assert!(r.phrasing.is_empty());
        assert!(r.facts.iter().any(|f| f.entity == 1));
        assert_eq!(r.draft.as_ref().unwrap().answer(), Some(Answer::Refuse));
        let again = reflect_stage(r.clone(), &w).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn minimal_candidate_is_a_fixed_point() {
        let w = world();
        let c = reasoning_stage(candidate(&[(0, 2), (2, 3)], Instruction::mix(0, 2), &[]), &w).unwrap();
        let r = reflect_stage(c.clone(), &w).unwrap();
        assert_eq!(r.facts, c.facts);
        assert_eq!(r.phrasing, c.phrasing);
        assert_eq!(r.draft, c.draft);
    }

    #[test]
    fn check_rules() {
        let unsafe_c = through_check(candidate(&[(0, 2), (2, 3)], Instruction::ReportSum, &["SKIP_FLAG"]));
        assert_eq!(unsafe_c.rejection, Some(Rejection::UnimodalUnsafe));
        let invalid = through_check(candidate(&[(0, 2), (2, 3)], Instruction::mix(0, 40), &[]));
        assert_eq!(invalid.rejection, Some(Rejection::Invalid));
        assert_eq!(invalid.stage, Stage::Reflected);
        let fine = through_check(candidate(&[(0, 2), (2, 3)], Instruction::ReportSum, &[]));
        assert_eq!(fine.rejection, None);
        assert_eq!(fine.stage, Stage::Checked);
        assert!(matches!(
            reasoning_stage(unsafe_c, &world()),
            Err(PipelineError::Rejected { .. })
        ));
    }

    #[test]
    fn summary_assembles_and_guards_integrity() {
        let w = world();
        let c = through_check(candidate(&[(0, 2), (1, 3)], Instruction::mix(0, 1), &[]));
        let rec = summary_stage(&c, &w, QuestionId(4)).unwrap();
        assert_eq!(rec.answer, Answer::Refuse);
        assert_eq!(rec.category().primary, 0);
        assert_eq!(rec.question.id, QuestionId(4));
        let mut broken = c.clone();
        let bad = ReasoningPath::new(QuestionId(9), PathKind::Reference, vec![crate::reasoning::Step::Answer(5)]).unwrap();
        broken.draft = Some(bad);
        assert!(matches!(summary_stage(&broken, &w, QuestionId(4)), Err(PipelineError::Integrity(_))));
    }

    #[test]
    fn pipeline_records_are_sound() {
        let w = world();
        let (records, report) = run_pipeline(200, 3, &w, &PipelineConfig::default()).unwrap();
        assert_eq!(records.len(), 200);
        assert!(report.conserved());
        assert!(report.acceptance_yield > 0.0 && report.acceptance_yield < 1.0);
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.question.id, QuestionId(i as u64));
            assert!(verify(&r.reasoning, r.answer).unwrap());
            assert!(judge_safe(&r.question, &r.reasoning, &w).unwrap());
            assert!(judge_effective(&r.question, &r.reasoning, &w).unwrap());
        }
    }

    #[test]
    fn dataset_round_trip_and_tamper_detection() {
        let w = world();
        let (records, _) = run_pipeline(20, 1, &w, &PipelineConfig::default()).unwrap();
        let ds = Dataset::new(w, records);
        let mut buf = Vec::new();
        ds.to_writer(&mut buf).unwrap();
        let back = Dataset::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        let answer = ds.records[0].answer;
        let forged_answer = match answer {
            Answer::Refuse => "\"answer\":0".to_string(),
            Answer::Value(v) => format!("\"answer\":{}", (v + 1) % 10),
        };
        let forged = line.replace(&format!("\"answer\":{}", serde_json::to_string(&answer).unwrap()), &forged_answer);
        assert_ne!(forged, line);
        let tampered = text.replacen(line, &forged, 1);
        assert!(matches!(
            Dataset::from_reader(tampered.as_bytes()),
            Err(PipelineError::Parse { line: 2, .. })
        ));
    }
}
