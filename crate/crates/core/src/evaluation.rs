//! Safety and effectiveness rates of a policy's reasoning paths.
//!
//! For `N` judged responses, `SR = Σ f_h / N`, `ER = Σ f_r / N` and
//! `SER = Σ f_h·f_r / N`. [`evaluate`] estimates them by sampling;
//! [`exact_metrics`] computes their expectations under the policy's path
//! distribution by enumerating every legal path.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::exploration::{explore_dataset, ExplorationCorpus, ExplorationError};
use crate::model::{sample_continuation, Draw, ModelError, PolicyModel};
use crate::optimization::{train_dpo, train_orpo, train_sft, train_srpo, warm_start, Method, TrainConfig, TrainError, TrainingLog};
use crate::pipeline::Dataset;
use crate::reasoning::{verify, Answer, PathError, PathKind, Prefix, QuestionId, ReasoningPath, Step};
use crate::seed::{derive_seed, rng_for};
use crate::world::{
    enumerate_paths, ground_truth, judge_effective, judge_safe, judge_safe_partial, legal_steps, Question, Taxonomy,
    WorldConfig, WorldError,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to evaluate: the dataset is empty")]
    EmptyDataset,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("probabilities of question {id} sum to {total}, not 1")]
    Normalization { id: QuestionId, total: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Exploration(#[from] ExplorationError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Labels a terminated path as safe (`f_h`) and effective (`f_r`).
pub trait Judge: Sync {
    fn id(&self) -> &str;
    fn safe(&self, q: &Question, path: &ReasoningPath) -> Result<bool>;
    fn effective(&self, q: &Question, path: &ReasoningPath) -> Result<bool>;
    /// Safety of a draw cut off before its terminal step.
    fn safe_partial(&self, q: &Question, steps: &[Step]) -> bool;
}

/// Exact programmatic judge over the hazard-mix world.
#[derive(Debug, Clone)]
pub struct ToyJudge {
    world: WorldConfig,
}

impl ToyJudge {
    pub fn new(world: WorldConfig) -> Self {
        Self { world }
    }
}

impl Judge for ToyJudge {
    fn id(&self) -> &str {
        "toy-exact"
    }

    fn safe(&self, q: &Question, path: &ReasoningPath) -> Result<bool> {
        Ok(judge_safe(q, path, &self.world)?)
    }

    fn effective(&self, q: &Question, path: &ReasoningPath) -> Result<bool> {
        Ok(judge_effective(q, path, &self.world)?)
    }

    fn safe_partial(&self, q: &Question, steps: &[Step]) -> bool {
        judge_safe_partial(q, steps, &self.world)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Expected rates by path enumeration.
    Exact,
    /// Monte-Carlo rates from sampled paths.
    Sampled,
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(Protocol::Exact),
            "sampled" => Ok(Protocol::Sampled),
            _ => Err(format!("unknown protocol `{s}` (expected exact or sampled)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub temperature: f64,
    pub samples_per_question: usize,
    /// Protocol used inside sweeps and comparisons.
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            samples_per_question: 100,
            protocol: Protocol::Exact,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(EvalError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.samples_per_question == 0 {
            return Err(EvalError::InvalidConfig("samples_per_question must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-question sums of response labels. For sampled evaluation the weights
/// are draw counts; for exact evaluation they are path probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub responses: f64,
    pub safe: f64,
    pub effective: f64,
    pub both: f64,
    pub verified: f64,
    /// Responses ending in a concrete answer rather than a refusal.
    pub answered: f64,
    pub truncated: f64,
}

impl Tally {
    fn add(&mut self, w: f64, l: Labels) {
        self.responses += w;
        self.safe += w * f64::from(u8::from(l.safe));
        self.effective += w * f64::from(u8::from(l.effective));
        self.both += w * f64::from(u8::from(l.safe && l.effective));
        self.verified += w * f64::from(u8::from(l.verified));
        self.answered += w * f64::from(u8::from(l.answered));
        self.truncated += w * f64::from(u8::from(l.truncated));
    }

    fn merge(&mut self, o: &Tally) {
        self.responses += o.responses;
        self.safe += o.safe;
        self.effective += o.effective;
        self.both += o.both;
        self.verified += o.verified;
        self.answered += o.answered;
        self.truncated += o.truncated;
    }

    fn rate(&self, x: f64) -> f64 {
        if self.responses == 0.0 {
            0.0
        } else {
            x / self.responses
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Labels {
    safe: bool,
    effective: bool,
    verified: bool,
    answered: bool,
    truncated: bool,
}

fn label_draw(judge: &dyn Judge, q: &Question, truth: Answer, steps: &[Step], terminated: bool) -> Result<Labels> {
    if !terminated {
        return Ok(Labels {
            safe: judge.safe_partial(q, steps),
            effective: false,
            verified: false,
            answered: false,
            truncated: true,
        });
    }
    let path = ReasoningPath::new(q.id, PathKind::SampledBackbone, steps.to_vec())?;
    Ok(Labels {
        safe: judge.safe(q, &path)?,
        effective: judge.effective(q, &path)?,
        verified: verify(&path, truth)?,
        answered: matches!(path.answer(), Some(Answer::Value(_))),
        truncated: false,
    })
}

/// `(SR, ER, SER)` from per-response judge labels.
pub fn rates(f_h: &[bool], f_r: &[bool]) -> (f64, f64, f64) {
    assert_eq!(f_h.len(), f_r.len(), "one label pair per response");
    let n = f_h.len() as f64;
    let count = |it: &mut dyn Iterator<Item = bool>| it.filter(|b| *b).count() as f64;
    let sr = count(&mut f_h.iter().copied()) / n;
    let er = count(&mut f_r.iter().copied()) / n;
    let ser = count(&mut f_h.iter().zip(f_r).map(|(a, b)| *a && *b)) / n;
    (sr, er, ser)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRow {
    pub id: QuestionId,
    pub category: String,
    pub hazardous: bool,
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub questions: usize,
    pub sr: f64,
    pub er: f64,
    pub ser: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingInfo {
    pub protocol: Protocol,
    /// Draws per question; 0 for exact evaluation.
    pub samples_per_question: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub judge: String,
    pub model_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sr: f64,
    pub er: f64,
    pub ser: f64,
    pub accuracy: f64,
    /// Fraction of responses to hazardous questions that give a concrete answer.
    pub hazard_compliance_rate: f64,
    /// Complement of compliance on hazardous questions: refusals plus
    /// unfinished draws.
    pub hazard_refusal_rate: f64,
    pub truncation_rate: f64,
    /// Number of judged responses.
    pub n: u64,
    /// Safe, effective, and jointly safe-and-effective responses; expected
    /// counts under exact evaluation.
    pub n_h: f64,
    pub n_r: f64,
    pub n_hr: f64,
    pub questions: usize,
    pub hazardous_questions: usize,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub sampling: SamplingInfo,
    #[serde(skip)]
    pub per_question: Vec<QuestionRow>,
}

impl MetricsReport {
    fn from_rows(rows: Vec<QuestionRow>, n: u64, sampling: SamplingInfo) -> Self {
        let mut all = Tally::default();
        let mut hazard = Tally::default();
        let mut cats: BTreeMap<String, (usize, Tally)> = BTreeMap::new();
        for r in &rows {
            all.merge(&r.tally);
            if r.hazardous {
                hazard.merge(&r.tally);
            }
            let e = cats.entry(r.category.clone()).or_default();
            e.0 += 1;
            e.1.merge(&r.tally);
        }
        let per_category = cats
            .into_iter()
            .map(|(k, (questions, t))| {
                (
                    k,
                    CategoryMetrics {
                        questions,
                        sr: t.rate(t.safe),
                        er: t.rate(t.effective),
                        ser: t.rate(t.both),
                    },
                )
            })
            .collect();
        let compliance = hazard.rate(hazard.answered);
        let hazardous_questions = rows.iter().filter(|r| r.hazardous).count();
        let scale = n as f64 / all.responses;
        MetricsReport {
            sr: all.rate(all.safe),
            er: all.rate(all.effective),
            ser: all.rate(all.both),
            accuracy: all.rate(all.verified),
            hazard_compliance_rate: compliance,
            hazard_refusal_rate: if hazardous_questions > 0 { 1.0 - compliance } else { 0.0 },
            truncation_rate: all.rate(all.truncated),
            n,
            n_h: all.safe * scale,
            n_r: all.effective * scale,
            n_hr: all.both * scale,
            questions: rows.len(),
            hazardous_questions,
            per_category,
            sampling,
            per_question: rows,
        }
    }

    /// Identities every report satisfies: `SER <= min(SR, ER)` and
    /// `SER >= SR + ER - 1`.
    pub fn identities_hold(&self) -> bool {
        let tol = 1e-12;
        self.ser <= self.sr.min(self.er) + tol && self.ser >= self.sr + self.er - 1.0 - tol
    }

    /// Delimiter-separated per-question rows.
    pub fn question_tsv(&self) -> String {
        let mut s = String::from("id\tcategory\thazardous\tsr\ter\tser\tanswered\ttruncated\n");
        for r in &self.per_question {
            let t = &r.tally;
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.id,
                r.category,
                r.hazardous,
                t.rate(t.safe),
                t.rate(t.effective),
                t.rate(t.both),
                t.rate(t.answered),
                t.rate(t.truncated)
            ));
        }
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "SR {:.4}  ER {:.4}  SER {:.4}  accuracy {:.4}",
            self.sr, self.er, self.ser, self.accuracy
        )?;
        writeln!(
            f,
            "hazard compliance {:.4}  refusal {:.4}  truncated {:.4}",
            self.hazard_compliance_rate, self.hazard_refusal_rate, self.truncation_rate
        )?;
        writeln!(
            f,
            "N {}  questions {} (hazardous {})  protocol {:?} T={}",
            self.n, self.questions, self.hazardous_questions, self.sampling.protocol, self.sampling.temperature
        )?;
        for (c, m) in &self.per_category {
            writeln!(f, "  {c:<40} n={:<4} SR {:.3} ER {:.3} SER {:.3}", m.questions, m.sr, m.er, m.ser)?;
        }
        Ok(())
    }
}

fn row(q: &Question, world: &WorldConfig, tally: Tally) -> QuestionRow {
    QuestionRow {
        id: q.id,
        category: Taxonomy.name(q.category),
        hazardous: q.is_hazardous(world),
        tally,
    }
}

/// Monte-Carlo rates from `samples_per_q` sampled paths per question. Each
/// question draws from its own stream keyed by `(seed, question id)`.
/// Truncated draws are never effective, and are safe unless an unsafe step
/// was already emitted.
pub fn evaluate(
    model: &PolicyModel,
    dataset: &Dataset,
    judge: &dyn Judge,
    samples_per_q: usize,
    temperature: f64,
    seed: u64,
) -> Result<MetricsReport> {
    if dataset.records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if samples_per_q == 0 {
        return Err(EvalError::InvalidConfig("samples_per_q must be >= 1".into()));
    }
    let world = model.world();
    let max_len = world.max_path_len;
    let rows = dataset
        .records
        .par_iter()
        .map(|r| {
            let q = &r.question;
            let truth = ground_truth(q, world)?;
            let mut rng = rng_for(seed, "eval", q.id.0);
            let mut tally = Tally::default();
            for _ in 0..samples_per_q {
                let draw = sample_continuation(model, q, &Prefix::root(), temperature, &mut rng, max_len)?;
                let terminated = matches!(draw, Draw::Complete(_));
                tally.add(1.0, label_draw(judge, q, truth, draw.steps(), terminated)?);
            }
            Ok(row(q, world, tally))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = (rows.len() * samples_per_q) as u64;
    Ok(MetricsReport::from_rows(
        rows,
        n,
        SamplingInfo {
            protocol: Protocol::Sampled,
            samples_per_question: samples_per_q,
            temperature,
            seed: Some(seed),
            judge: judge.id().into(),
            model_checksum: model.checksum(),
        },
    ))
}

/// Legal step sequences of exactly `len` non-terminal steps.
fn unfinished_sequences(q: &Question, world: &WorldConfig, len: usize) -> Vec<Vec<Step>> {
    fn go(q: &Question, w: &WorldConfig, prefix: &mut Vec<Step>, len: usize, out: &mut Vec<Vec<Step>>) {
        if prefix.len() == len {
            out.push(prefix.clone());
            return;
        }
        for s in legal_steps(q, w, prefix) {
            if !s.is_terminal() {
                prefix.push(s);
                go(q, w, prefix, len, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(q, world, &mut Vec::new(), len, &mut out);
    out
}

/// Expected rates under the policy's path distribution at `temperature`,
/// from every legal terminated path weighted by its probability. Draws that
/// would hit the length cap are enumerated too and labelled as truncated.
pub fn exact_metrics(model: &PolicyModel, dataset: &Dataset, judge: &dyn Judge, temperature: f64) -> Result<MetricsReport> {
    if dataset.records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let world = model.world();
    let rows = dataset
        .records
        .par_iter()
        .map(|r| {
            let q = &r.question;
            let truth = ground_truth(q, world)?;
            let mut tally = Tally::default();
            for lp in enumerate_paths(q, world)? {
                let p = model.path_loglik_at(q, &lp.path, temperature)?.exp();
                tally.add(p, label_draw(judge, q, truth, lp.path.states(), true)?);
            }
            for seq in unfinished_sequences(q, world, world.max_path_len) {
                let p = model.sequence_loglik(q, &[], &seq, temperature)?.exp();
                tally.add(p, label_draw(judge, q, truth, &seq, false)?);
            }
            if (tally.responses - 1.0).abs() > 1e-9 {
                return Err(EvalError::Normalization {
                    id: q.id,
                    total: tally.responses,
                });
            }
            Ok(row(q, world, tally))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as u64;
    Ok(MetricsReport::from_rows(
        rows,
        n,
        SamplingInfo {
            protocol: Protocol::Exact,
            samples_per_question: 0,
            temperature,
            seed: None,
            judge: judge.id().into(),
            model_checksum: model.checksum(),
        },
    ))
}

/// Evaluates with the protocol named in `cfg`.
pub fn evaluate_with(cfg: &crate::evaluation::EvalConfig, model: &PolicyModel, dataset: &Dataset, seed: u64) -> Result<MetricsReport> {
    let judge = ToyJudge::new(model.world().clone());
    match cfg.protocol {
        Protocol::Exact => exact_metrics(model, dataset, &judge, cfg.temperature),
        Protocol::Sampled => evaluate(model, dataset, &judge, cfg.samples_per_question, cfg.temperature, seed),
    }
}

/// Untrained policy for a run seed, warm-started when configured.
pub fn initial_model(cfg: &Config, train: &Dataset, seed: u64) -> Result<PolicyModel> {
    let model = PolicyModel::new(&train.world, &cfg.model, derive_seed(seed, "init", 0))?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    Ok(warm_start(model, train, &tc)?)
}

/// Exploration corpus of the untrained policy for a run seed.
pub fn initial_corpus(cfg: &Config, model: &PolicyModel, train: &Dataset, seed: u64) -> Result<ExplorationCorpus> {
    Ok(explore_dataset(model, train, &cfg.exploration, derive_seed(seed, "explore", 0))?)
}

pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub log: TrainingLog,
    pub model: PolicyModel,
}

/// Trains `method` from `init` and evaluates on `eval`.
pub fn run_method(
    method: Method,
    cfg: &Config,
    init: &PolicyModel,
    corpus: &ExplorationCorpus,
    train: &Dataset,
    eval: &Dataset,
    seed: u64,
) -> Result<RunResult> {
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = match method {
        Method::Srpo => train_srpo(init.clone(), train, corpus, &tc, &cfg.exploration)?,
        Method::Sft => train_sft(init.clone(), train, &tc)?,
        Method::Dpo => train_dpo(init.clone(), train, corpus, &tc)?,
        Method::Orpo => train_orpo(init.clone(), train, corpus, &tc)?,
    };
    let metrics = evaluate_with(&cfg.eval, &out.model, eval, derive_seed(seed, "eval", 0))?;
    Ok(RunResult {
        method,
        seed,
        metrics,
        log: out.log,
        model: out.model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub seed: u64,
    pub sr: f64,
    pub er: f64,
    pub ser: f64,
    pub hazard_compliance_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub mean_ser: f64,
    pub min_ser: f64,
    pub max_ser: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    pub series: Vec<SweepPoint>,
    pub best_lambda: f64,
    /// Whether the best mean SER lies strictly inside the swept range.
    pub interior_optimum: bool,
}

impl SweepReport {
    pub fn rows_tsv(&self) -> String {
        let mut s = String::from("lambda\tseed\tsr\ter\tser\thazard_compliance\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.lambda, r.seed, r.sr, r.er, r.ser, r.hazard_compliance_rate
            ));
        }
        s
    }

    /// Plot-ready mean series with per-seed spread.
    pub fn series_tsv(&self) -> String {
        let mut s = String::from("lambda\tmean_ser\tmin_ser\tmax_ser\n");
        for p in &self.series {
            s.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", p.lambda, p.mean_ser, p.min_ser, p.max_ser));
        }
        s
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8}  {:>8}  {:>8}  {:>8}", "lambda", "mean SER", "min", "max")?;
        for p in &self.series {
            writeln!(f, "{:>8}  {:>8.4}  {:>8.4}  {:>8.4}", p.lambda, p.mean_ser, p.min_ser, p.max_ser)?;
        }
        writeln!(
            f,
            "best lambda {} ({} optimum)",
            self.best_lambda,
            if self.interior_optimum { "interior" } else { "boundary" }
        )
    }
}

/// Trains SRPO for every `(λ, seed)` and evaluates each on `eval`. Every
/// seed shares one initial model and corpus across λ values.
pub fn lambda_sweep(
    cfg: &Config,
    train: &Dataset,
    eval: &Dataset,
    corpus: Option<&ExplorationCorpus>,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepReport> {
    if values.is_empty() || seeds.is_empty() {
        return Err(EvalError::InvalidConfig("sweep needs at least one value and one seed".into()));
    }
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &seed in seeds {
        let init = initial_model(cfg, train, seed)?;
        let explored;
        let corpus = match corpus {
            Some(c) => c,
            None => {
                explored = initial_corpus(cfg, &init, train, seed)?;
                &explored
            }
        };
        for &lambda in values {
            let mut c = cfg.clone();
            c.train.lambda = lambda;
            c.train.validate()?;
            let r = run_method(Method::Srpo, &c, &init, corpus, train, eval, seed)?;
            rows.push(SweepRow {
                lambda,
                seed,
                sr: r.metrics.sr,
                er: r.metrics.er,
                ser: r.metrics.ser,
                hazard_compliance_rate: r.metrics.hazard_compliance_rate,
            });
        }
    }
    rows.sort_by(|a, b| a.lambda.total_cmp(&b.lambda).then(a.seed.cmp(&b.seed)));
    let series: Vec<SweepPoint> = values
        .iter()
        .map(|&lambda| {
            let sers: Vec<f64> = rows.iter().filter(|r| r.lambda == lambda).map(|r| r.ser).collect();
            SweepPoint {
                lambda,
                mean_ser: sers.iter().sum::<f64>() / sers.len() as f64,
                min_ser: sers.iter().copied().fold(f64::INFINITY, f64::min),
                max_ser: sers.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let best = series
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.mean_ser.total_cmp(&b.1.mean_ser))
        .map(|(i, _)| i)
        .expect("non-empty");
    Ok(SweepReport {
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        best_lambda: series[best].lambda,
        interior_optimum: best > 0 && best + 1 < series.len(),
        rows,
        series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: Method,
    pub seed: u64,
    pub sr: f64,
    pub er: f64,
    pub ser: f64,
    pub hazard_compliance_rate: f64,
    pub final_checksum: String,
}

/// `srpo - method` on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub method: Method,
    pub seed: u64,
    pub d_sr: f64,
    pub d_er: f64,
    pub d_ser: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub rows: Vec<CompareRow>,
    pub deltas: Vec<DeltaRow>,
    /// Mean SER delta per baseline; positive means SRPO scored higher.
    pub mean_ser_delta: BTreeMap<Method, f64>,
}

impl ComparisonReport {
    pub fn rows_tsv(&self) -> String {
        let mut s = String::from("method\tseed\tsr\ter\tser\thazard_compliance\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.method, r.seed, r.sr, r.er, r.ser, r.hazard_compliance_rate
            ));
        }
        s
    }

    pub fn deltas_tsv(&self) -> String {
        let mut s = String::from("baseline\tseed\td_sr\td_er\td_ser\n");
        for d in &self.deltas {
            s.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\t{:.6}\n", d.method, d.seed, d.d_sr, d.d_er, d.d_ser));
        }
        s
    }
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>6} {:>8} {:>8} {:>8}", "method", "seed", "SR", "ER", "SER")?;
        for r in &self.rows {
            writeln!(f, "{:<6} {:>6} {:>8.4} {:>8.4} {:>8.4}", r.method, r.seed, r.sr, r.er, r.ser)?;
        }
        for (m, d) in &self.mean_ser_delta {
            writeln!(f, "mean SER delta srpo - {m}: {d:+.4}")?;
        }
        Ok(())
    }
}

/// Trains each method on identical data from the same initial model and
/// corpus per seed, and evaluates all of them on the same questions.
pub fn compare_methods(
    cfg: &Config,
    train: &Dataset,
    eval: &Dataset,
    corpus: Option<&ExplorationCorpus>,
    methods: &[Method],
    seeds: &[u64],
) -> Result<ComparisonReport> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(EvalError::InvalidConfig("compare needs at least one method and one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let init = initial_model(cfg, train, seed)?;
        let explored;
        let corpus = match corpus {
            Some(c) => c,
            None => {
                explored = initial_corpus(cfg, &init, train, seed)?;
                &explored
            }
        };
        for &method in methods {
            let r = run_method(method, cfg, &init, corpus, train, eval, seed)?;
            rows.push(CompareRow {
                method,
                seed,
                sr: r.metrics.sr,
                er: r.metrics.er,
                ser: r.metrics.ser,
                hazard_compliance_rate: r.metrics.hazard_compliance_rate,
                final_checksum: r.log.final_checksum,
            });
        }
    }
    let mut deltas = Vec::new();
    if methods.contains(&Method::Srpo) {
        for &seed in seeds {
            let srpo = rows.iter().find(|r| r.seed == seed && r.method == Method::Srpo).expect("srpo row");
            for r in rows.iter().filter(|r| r.seed == seed && r.method != Method::Srpo) {
                deltas.push(DeltaRow {
                    method: r.method,
                    seed,
                    d_sr: srpo.sr - r.sr,
                    d_er: srpo.er - r.er,
                    d_ser: srpo.ser - r.ser,
                });
            }
        }
    }
    let mut mean_ser_delta = BTreeMap::new();
    for m in methods.iter().filter(|m| **m != Method::Srpo) {
        let ds: Vec<f64> = deltas.iter().filter(|d| d.method == *m).map(|d| d.d_ser).collect();
        if !ds.is_empty() {
            mean_ser_delta.insert(*m, ds.iter().sum::<f64>() / ds.len() as f64);
        }
    }
    Ok(ComparisonReport {
        methods: methods.to_vec(),
        seeds: seeds.to_vec(),
        rows,
        deltas,
        mean_ser_delta,
    })
}
