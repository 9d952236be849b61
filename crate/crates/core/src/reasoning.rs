//! Reasoning paths over a discrete step vocabulary.
//!
//! A path is an ordered run of [`Step`]s ending (when complete) in a terminal
//! step that carries the answer. Transitions are implicit in adjacency.
//! Prefixes may be empty: the empty prefix is the question-only root, so
//! whole-path sampling and continuation sampling share one code path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::world::Question;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathError {
    #[error("a reasoning path must contain at least one state")]
    Empty,
    #[error("terminal state at position {0} is not the last state")]
    TerminalNotLast(usize),
    #[error("prefix already terminates")]
    TerminatedPrefix,
    #[error("path is not terminated")]
    Unterminated,
    #[error("continuation must end in a terminal state")]
    ContinuationNotTerminated,
    #[error("step index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("expected a {expected} path, got {found}")]
    WrongKind { expected: PathKind, found: PathKind },
    #[error("pair polarity violated: positive verifies {positive}, negative verifies {negative}")]
    Polarity { positive: bool, negative: bool },
    #[error("path length {len} exceeds limit {max}")]
    TooLong { len: usize, max: usize },
    #[error("cannot parse step `{0}`")]
    ParseStep(String),
}

/// Opaque question identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionId(pub u64);

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{:06}", self.0)
    }
}

/// Ground-truth answer: a refusal or an integer residue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Answer {
    Refuse,
    Value(u32),
}

impl Answer {
    pub fn is_refusal(self) -> bool {
        matches!(self, Answer::Refuse)
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Refuse => f.write_str("REFUSE"),
            Answer::Value(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Answer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Answer::Refuse => s.serialize_str("REFUSE"),
            Answer::Value(v) => s.serialize_u32(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Answer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Answer::Value(v)),
            Raw::Text(t) if t == "REFUSE" => Ok(Answer::Refuse),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid answer `{t}`"))),
        }
    }
}

/// One reasoning state. `Answer` and `Refuse` are the terminal steps and the
/// only ones carrying a payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Step {
    /// Observe the fact about an entity.
    Obs(u32),
    /// Check the named entity pair for a hazardous combination.
    Chk(u32, u32),
    Flag,
    Compute,
    Answer(u32),
    Refuse,
}

impl Step {
    pub fn is_terminal(self) -> bool {
        matches!(self, Step::Answer(_) | Step::Refuse)
    }

    pub fn payload(self) -> Option<Answer> {
        match self {
            Step::Answer(v) => Some(Answer::Value(v)),
            Step::Refuse => Some(Answer::Refuse),
            _ => None,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Obs(e) => write!(f, "OBS({e})"),
            Step::Chk(i, j) => write!(f, "CHK({i},{j})"),
            Step::Flag => f.write_str("FLAG"),
            Step::Compute => f.write_str("COMPUTE"),
            Step::Answer(v) => write!(f, "ANSWER({v})"),
            Step::Refuse => f.write_str("REFUSE"),
        }
    }
}

impl FromStr for Step {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PathError::ParseStep(s.to_string());
        let s = s.trim();
        match s {
            "FLAG" => return Ok(Step::Flag),
            "COMPUTE" => return Ok(Step::Compute),
            "REFUSE" => return Ok(Step::Refuse),
            _ => {}
        }
        let open = s.find('(').ok_or_else(bad)?;
        let args = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let nums: Vec<u32> = args
            .split(',')
            .map(|a| a.trim().parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        match (&s[..open], nums.as_slice()) {
            ("OBS", [e]) => Ok(Step::Obs(*e)),
            ("CHK", [i, j]) => Ok(Step::Chk(*i, *j)),
            ("ANSWER", [v]) => Ok(Step::Answer(*v)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Step {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Step {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Role a path plays; carried explicitly so losses can check their inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Reference,
    SampledBackbone,
    Positive,
    Negative,
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathKind::Reference => "reference",
            PathKind::SampledBackbone => "sampled-backbone",
            PathKind::Positive => "positive",
            PathKind::Negative => "negative",
        })
    }
}

fn check_terminal_last(states: &[Step]) -> Result<(), PathError> {
    match states.iter().position(|s| s.is_terminal()) {
        Some(pos) if pos + 1 != states.len() => Err(PathError::TerminalNotLast(pos)),
        _ => Ok(()),
    }
}

/// A non-empty run of states with at most one terminal, which must be last.
///
/// A path whose last state is not terminal is a truncated draw.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ReasoningPath {
    question_id: QuestionId,
    kind: PathKind,
    #[serde(rename = "steps")]
    states: Vec<Step>,
}

impl ReasoningPath {
    pub fn new(question_id: QuestionId, kind: PathKind, states: Vec<Step>) -> Result<Self, PathError> {
        if states.is_empty() {
            return Err(PathError::Empty);
        }
        check_terminal_last(&states)?;
        Ok(Self {
            question_id,
            kind,
            states,
        })
    }

    pub fn question_id(&self) -> QuestionId {
        self.question_id
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn states(&self) -> &[Step] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_terminated(&self) -> bool {
        self.states.last().is_some_and(|s| s.is_terminal())
    }

    /// Terminal answer, if the path terminates.
    pub fn answer(&self) -> Option<Answer> {
        self.states.last().and_then(|s| s.payload())
    }

    pub fn with_kind(mut self, kind: PathKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn ensure_kind(&self, expected: PathKind) -> Result<(), PathError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(PathError::WrongKind {
                expected,
                found: self.kind,
            })
        }
    }

    pub fn ensure_max_len(&self, max: usize) -> Result<(), PathError> {
        if self.states.len() > max {
            Err(PathError::TooLong {
                len: self.states.len(),
                max,
            })
        } else {
            Ok(())
        }
    }
}

impl<'de> Deserialize<'de> for ReasoningPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            question_id: QuestionId,
            kind: PathKind,
            steps: Vec<Step>,
        }
        let raw = Raw::deserialize(d)?;
        ReasoningPath::new(raw.question_id, raw.kind, raw.steps).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for ReasoningPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_steps(f, &self.states)
    }
}

fn write_steps(f: &mut fmt::Formatter<'_>, steps: &[Step]) -> fmt::Result {
    f.write_str("[")?;
    for (i, s) in steps.iter().enumerate() {
        if i > 0 {
            f.write_str(" -> ")?;
        }
        write!(f, "{s}")?;
    }
    f.write_str("]")
}

/// A non-terminated run of states, possibly empty (the question-only root).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prefix {
    states: Vec<Step>,
}

impl Prefix {
    pub fn root() -> Self {
        Self { states: Vec::new() }
    }

    pub fn new(states: Vec<Step>) -> Result<Self, PathError> {
        if states.iter().any(|s| s.is_terminal()) {
            return Err(PathError::TerminatedPrefix);
        }
        Ok(Self { states })
    }

    pub fn states(&self) -> &[Step] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_root(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

impl TryFrom<&ReasoningPath> for Prefix {
    type Error = PathError;

    fn try_from(path: &ReasoningPath) -> Result<Self, Self::Error> {
        Prefix::new(path.states.clone())
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_steps(f, &self.states)
    }
}

/// States from some step to a terminal; only the last one is terminal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Continuation {
    states: Vec<Step>,
}

impl Continuation {
    pub fn new(states: Vec<Step>) -> Result<Self, PathError> {
        if states.is_empty() {
            return Err(PathError::Empty);
        }
        if !states.last().is_some_and(|s| s.is_terminal()) {
            return Err(PathError::ContinuationNotTerminated);
        }
        check_terminal_last(&states)?;
        Ok(Self { states })
    }

    pub fn states(&self) -> &[Step] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn answer(&self) -> Answer {
        self.states
            .last()
            .and_then(|s| s.payload())
            .expect("continuation ends in a terminal")
    }
}

impl<'de> Deserialize<'de> for Continuation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let states = Vec::<Step>::deserialize(d)?;
        Continuation::new(states).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Continuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_steps(f, &self.states)
    }
}

/// `prefix ⊕ cont`.
pub fn concat_path(
    question_id: QuestionId,
    kind: PathKind,
    prefix: &Prefix,
    cont: &Continuation,
) -> Result<ReasoningPath, PathError> {
    let mut states = Vec::with_capacity(prefix.len() + cont.len());
    states.extend_from_slice(&prefix.states);
    states.extend_from_slice(&cont.states);
    ReasoningPath::new(question_id, kind, states)
}

/// 1 if the terminal state's payload equals `truth`, 0 if it differs.
/// Unterminated paths are an error rather than a 0.
pub fn verify(path: &ReasoningPath, truth: Answer) -> Result<bool, PathError> {
    path.answer().map(|a| a == truth).ok_or(PathError::Unterminated)
}

/// First `i - 1` states of `path`, for `1 <= i <= len(path)`.
pub fn path_prefix(path: &ReasoningPath, i: usize) -> Result<Prefix, PathError> {
    if i == 0 || i > path.len() {
        return Err(PathError::IndexOutOfRange {
            index: i,
            max: path.len(),
        });
    }
    Prefix::new(path.states[..i - 1].to_vec())
}

/// States from position `i` (1-based) to the end of a terminated path.
pub fn suffix_of(path: &ReasoningPath, i: usize) -> Result<Continuation, PathError> {
    if i == 0 || i > path.len() {
        return Err(PathError::IndexOutOfRange {
            index: i,
            max: path.len(),
        });
    }
    if !path.is_terminated() {
        return Err(PathError::Unterminated);
    }
    Continuation::new(path.states[i - 1..].to_vec())
}

/// Two paths sharing `prefix` whose continuations verify 1 and 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ContrastivePair {
    pub step_index: usize,
    pub prefix: Prefix,
    pub positive: Continuation,
    pub negative: Continuation,
}

impl ContrastivePair {
    /// Builds a pair, checking polarity against `truth`.
    pub fn new(
        step_index: usize,
        prefix: Prefix,
        positive: Continuation,
        negative: Continuation,
        truth: Answer,
    ) -> Result<Self, PathError> {
        if step_index == 0 || prefix.len() != step_index - 1 {
            return Err(PathError::IndexOutOfRange {
                index: step_index,
                max: prefix.len() + 1,
            });
        }
        let pair = Self {
            step_index,
            prefix,
            positive,
            negative,
        };
        pair.check(truth)?;
        Ok(pair)
    }

    /// Re-verifies polarity against `truth`.
    pub fn check(&self, truth: Answer) -> Result<(), PathError> {
        let positive = self.positive.answer() == truth;
        let negative = self.negative.answer() == truth;
        if positive && !negative {
            Ok(())
        } else {
            Err(PathError::Polarity { positive, negative })
        }
    }

    pub fn positive_path(&self, question_id: QuestionId) -> ReasoningPath {
        concat_path(question_id, PathKind::Positive, &self.prefix, &self.positive)
            .expect("pair prefix is non-terminated")
    }

    pub fn negative_path(&self, question_id: QuestionId) -> ReasoningPath {
        concat_path(question_id, PathKind::Negative, &self.prefix, &self.negative)
            .expect("pair prefix is non-terminated")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    step_index: usize,
    prefix: Prefix,
    positive: Continuation,
    negative: Continuation,
}

impl<'de> Deserialize<'de> for ContrastivePair {
    /// Structural checks only; polarity is re-verified against the dataset
    /// when a corpus is loaded.
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawPair::deserialize(d)?;
        let prefix = Prefix::new(raw.prefix.states).map_err(serde::de::Error::custom)?;
        if raw.step_index == 0 || prefix.len() != raw.step_index - 1 {
            return Err(serde::de::Error::custom(format!(
                "pair step_index {} does not match prefix length {}",
                raw.step_index,
                prefix.len()
            )));
        }
        Ok(Self {
            step_index: raw.step_index,
            prefix,
            positive: raw.positive,
            negative: raw.negative,
        })
    }
}

/// `m` worked examples of reference paths that verify.
#[derive(Debug, Clone, Default)]
pub struct PromptContext {
    examples: Vec<(Question, ReasoningPath)>,
}

impl PromptContext {
    pub fn new(examples: Vec<(Question, ReasoningPath)>, truths: &[Answer]) -> Result<Self, PathError> {
        for ((_, path), truth) in examples.iter().zip(truths) {
            path.ensure_kind(PathKind::Reference)?;
            if !verify(path, *truth)? {
                return Err(PathError::Polarity {
                    positive: false,
                    negative: false,
                });
            }
        }
        Ok(Self { examples })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn examples(&self) -> &[(Question, ReasoningPath)] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q: QuestionId = QuestionId(1);

    fn cont(states: Vec<Step>) -> Continuation {
        Continuation::new(states).unwrap()
    }

    #[test]
    fn concat_joins_prefix_and_continuation() {
        let prefix = Prefix::new(vec![Step::Obs(0)]).unwrap();
        let c = cont(vec![Step::Chk(0, 1), Step::Answer(3)]);
        let path = concat_path(Q, PathKind::Positive, &prefix, &c).unwrap();
        assert_eq!(path.states(), &[Step::Obs(0), Step::Chk(0, 1), Step::Answer(3)]);
        assert_eq!(path.kind(), PathKind::Positive);
    }

    #[test]
    fn empty_path_is_rejected() {
        assert_eq!(ReasoningPath::new(Q, PathKind::Reference, vec![]), Err(PathError::Empty));
    }

    #[test]
    fn terminated_prefix_is_rejected() {
        assert_eq!(
            Prefix::new(vec![Step::Obs(0), Step::Refuse]),
            Err(PathError::TerminatedPrefix)
        );
        let path = ReasoningPath::new(Q, PathKind::Reference, vec![Step::Obs(0), Step::Refuse]).unwrap();
        assert_eq!(Prefix::try_from(&path), Err(PathError::TerminatedPrefix));
    }

    #[test]
    fn terminal_must_be_last() {
        let err = ReasoningPath::new(Q, PathKind::Reference, vec![Step::Refuse, Step::Obs(1)]);
        assert_eq!(err, Err(PathError::TerminalNotLast(0)));
        assert!(Continuation::new(vec![Step::Flag]).is_err());
    }

    #[test]
    fn verify_cases() {
        let p = |s| ReasoningPath::new(Q, PathKind::Reference, s).unwrap();
        assert!(verify(&p(vec![Step::Obs(0), Step::Answer(7)]), Answer::Value(7)).unwrap());
        assert!(verify(&p(vec![Step::Flag, Step::Refuse]), Answer::Refuse).unwrap());
        assert!(!verify(&p(vec![Step::Answer(7)]), Answer::Refuse).unwrap());
        assert_eq!(verify(&p(vec![Step::Obs(0)]), Answer::Refuse), Err(PathError::Unterminated));
    }

    #[test]
    fn prefix_bounds() {
        let path = ReasoningPath::new(
            Q,
            PathKind::Reference,
            vec![Step::Obs(0), Step::Obs(1), Step::Compute, Step::Answer(5)],
        )
        .unwrap();
        assert_eq!(path_prefix(&path, 3).unwrap().states(), &[Step::Obs(0), Step::Obs(1)]);
        assert!(path_prefix(&path, 1).unwrap().is_root());
        assert!(matches!(
            path_prefix(&path, 6),
            Err(PathError::IndexOutOfRange { index: 6, max: 4 })
        ));
        assert!(path_prefix(&path, 0).is_err());
    }

    #[test]
    fn step_text_round_trip() {
        for s in ["OBS(3)", "CHK(1,4)", "FLAG", "COMPUTE", "ANSWER(9)", "REFUSE"] {
            assert_eq!(s.parse::<Step>().unwrap().to_string(), s);
        }
        assert!("OBS(1,2)".parse::<Step>().is_err());
        assert!("JUMP".parse::<Step>().is_err());
    }

    #[test]
    fn path_json_shape() {
        let path = ReasoningPath::new(Q, PathKind::SampledBackbone, vec![Step::Obs(2), Step::Refuse]).unwrap();
        let json = serde_json::to_string(&path).unwrap();
        assert_eq!(json, r#"{"question_id":1,"kind":"sampled-backbone","steps":["OBS(2)","REFUSE"]}"#);
        let back: ReasoningPath = serde_json::from_str(&json).unwrap();
        assert_eq!(back, path);
        assert!(serde_json::from_str::<ReasoningPath>(r#"{"question_id":1,"kind":"reference","steps":[]}"#).is_err());
    }

    #[test]
    fn pair_polarity_checked() {
        let prefix = Prefix::new(vec![Step::Obs(0)]).unwrap();
        let pos = cont(vec![Step::Flag, Step::Refuse]);
        let neg = cont(vec![Step::Answer(2)]);
        assert!(ContrastivePair::new(2, prefix.clone(), pos.clone(), neg.clone(), Answer::Refuse).is_ok());
        assert!(ContrastivePair::new(2, prefix.clone(), neg, pos, Answer::Refuse).is_err());
        let pos = cont(vec![Step::Refuse]);
        let neg = cont(vec![Step::Answer(2)]);
        assert!(ContrastivePair::new(1, prefix, pos, neg, Answer::Refuse).is_err());
    }

    fn arb_nonterminal() -> impl Strategy<Value = Step> {
        prop_oneof![
            (0u32..12).prop_map(Step::Obs),
            (0u32..12, 0u32..12).prop_map(|(i, j)| Step::Chk(i, j)),
            Just(Step::Flag),
            Just(Step::Compute),
        ]
    }

    fn arb_terminal() -> impl Strategy<Value = Step> {
        prop_oneof![(0u32..10).prop_map(Step::Answer), Just(Step::Refuse)]
    }

    proptest! {
        #[test]
        fn prefix_and_suffix_reconstruct(
            body in proptest::collection::vec(arb_nonterminal(), 0..9),
            last in arb_terminal(),
            pick in 0usize..100,
        ) {
            let mut states = body;
            states.push(last);
            let path = ReasoningPath::new(Q, PathKind::Reference, states).unwrap();
            let i = 1 + pick % path.len();
            let rebuilt = concat_path(Q, PathKind::Reference, &path_prefix(&path, i).unwrap(), &suffix_of(&path, i).unwrap()).unwrap();
            prop_assert_eq!(rebuilt, path);
        }

        #[test]
        fn verify_is_pure(body in proptest::collection::vec(arb_nonterminal(), 0..5), last in arb_terminal(), truth in 0u32..3) {
            let mut states = body;
            states.push(last);
            let path = ReasoningPath::new(Q, PathKind::Reference, states).unwrap();
            let truth = if truth == 0 { Answer::Refuse } else { Answer::Value(truth) };
            prop_assert_eq!(verify(&path, truth), verify(&path, truth));
        }
    }
}
