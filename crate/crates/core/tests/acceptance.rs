//! Acceptance suite. Runs every criterion in the single-worker reference
//! mode and prints one PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srpo_core::config::{parse_config, Config};
use srpo_core::evaluation::{
    compare_methods, evaluate, exact_metrics, initial_corpus, initial_model, lambda_sweep, rates, run_method,
    MetricsReport, ToyJudge,
};
use srpo_core::exploration::{explore_dataset, ExplorationConfig, ExplorationCorpus, Outcome};
use srpo_core::model::{finite_diff_check, sample_step, ModelConfig, PolicyModel};
use srpo_core::optimization::{
    align_step_expr, cancellation_sides, loss_ref, loss_total, ref_expr, total_expr, train_sft, train_srpo, Method,
    TrainConfig,
};
use srpo_core::pipeline::{run_pipeline, Dataset, PipelineConfig};
use srpo_core::reasoning::{verify, Prefix, Step};
use srpo_core::seed::rng_for;
use srpo_core::world::{ground_truth, judge_effective, judge_safe, WorldConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const GOLDEN_CONFIG: &str = include_str!("../../../golden/config.toml");
const TRAIN_SEED: u64 = 1;
const TRAIN_N: usize = 200;
const EVAL_SEED: u64 = 2;
const EVAL_N: usize = 200;
const RUN_SEED: u64 = 0;

type Verdict = Result<String, String>;

struct Golden {
    cfg: Config,
    train: Dataset,
    eval: Dataset,
}

impl Golden {
    fn load() -> Self {
        let cfg = parse_config(GOLDEN_CONFIG).expect("golden config parses");
        let (tr, _) = run_pipeline(TRAIN_N, TRAIN_SEED, &cfg.world, &cfg.pipeline).unwrap();
        let (ev, _) = run_pipeline(EVAL_N, EVAL_SEED, &cfg.world, &cfg.pipeline).unwrap();
        Golden {
            train: Dataset::new(cfg.world.clone(), tr),
            eval: Dataset::new(cfg.world.clone(), ev).hazardous(),
            cfg,
        }
    }
}

/// Every (SR, ER, SER) triple produced during the run, for criterion 5.
#[derive(Default)]
struct Reports(Vec<(String, f64, f64, f64)>);

impl Reports {
    fn add(&mut self, label: impl Into<String>, m: &MetricsReport) {
        self.0.push((label.into(), m.sr, m.er, m.ser));
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_secs: u64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_secs as f64, || {
        format!("{what} took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64())
    })
}

fn random_corpus(world: &WorldConfig, ds: &Dataset, model_seed: u64) -> (PolicyModel, ExplorationCorpus) {
    let model = PolicyModel::new_random(world, &ModelConfig::default(), model_seed).unwrap();
    let corpus = explore_dataset(&model, ds, &ExplorationConfig::default(), model_seed).unwrap();
    (model, corpus)
}

fn gradient_correctness(g: &Golden) -> Verdict {
    let t = Instant::now();
    let ds = Dataset::new(g.train.world.clone(), g.train.records[..40].to_vec());
    let (model, corpus) = random_corpus(&ds.world, &ds, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut run = |e: &srpo_core::model::Expr<'_>, what: String| -> Result<(), String> {
        let r = finite_diff_check(&model, e, 1e-5, 64, &mut rng).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        checks += 1;
        ensure(r.max_rel_error < 1e-4, || format!("{what}: max rel error {:e}", r.max_rel_error))
    };
    for rec in ds.records.iter().take(5) {
        run(&ref_expr(&rec.question, &rec.reasoning, false), format!("J_Ref q{}", rec.question.id))?;
    }
    let entries: Vec<_> = corpus.entries.iter().filter(|e| !e.pairs.is_empty()).take(4).collect();
    ensure(!entries.is_empty(), || "no contrastive pairs to check".into())?;
    for e in &entries {
        let q = &ds.get(e.question_id).unwrap().question;
        for k in [0.5, 1.0, 2.0] {
            run(&align_step_expr(q, &e.pairs[0], k, false), format!("J_Align k={k} q{}", q.id))?;
        }
    }
    for e in &entries {
        let rec = ds.get(e.question_id).unwrap();
        for lambda in [0.0, 0.3, 1.0] {
            let expr = total_expr(&rec.question, &rec.reasoning, &e.pairs, lambda, 1.0, false);
            run(&expr, format!("total lambda={lambda} q{}", rec.question.id))?;
        }
    }
    within(t.elapsed(), 60, "gradient check")?;
    Ok(format!("{checks} losses, worst rel error {worst:.2e}, {:.1}s", t.elapsed().as_secs_f64()))
}

fn cancellation(g: &Golden) -> Verdict {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut seed = 100;
    while checked < 1000 {
        let (model, corpus) = random_corpus(&g.train.world, &g.train, seed);
        seed += 1;
        for e in &corpus.entries {
            let q = &g.train.get(e.question_id).unwrap().question;
            for p in &e.pairs {
                let (full, cont) = cancellation_sides(&model, q, p).map_err(|e| e.to_string())?;
                worst = worst.max((full - cont).abs());
                checked += 1;
            }
        }
        ensure(seed < 200, || format!("only {checked} pairs after 100 models"))?;
    }
    ensure(worst <= 1e-12, || format!("max |full - continuation| = {worst:e}"))?;
    Ok(format!("{checked} pairs on {} random models, max gap {worst:.1e}", seed - 100))
}

fn reductions(g: &Golden) -> Verdict {
    let mut compared = 0;
    for seed in [3, 4] {
        let (model, corpus) = random_corpus(&g.train.world, &g.train, seed);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        for e in &corpus.entries {
            let rec = g.train.get(e.question_id).unwrap();
            let total = loss_total(&model, &rec.question, &rec.reasoning, &e.pairs, &cfg).map_err(|e| e.to_string())?;
            let reference = loss_ref(&model, &rec.question, &rec.reasoning).map_err(|e| e.to_string())?;
            ensure(total.to_bits() == reference.to_bits(), || {
                format!("q{}: loss_total(0) {total} != loss_ref {reference}", rec.question.id)
            })?;
            compared += 1;
        }
    }
    let mut cfg = g.cfg.clone();
    cfg.train.lambda = 0.0;
    cfg.train.epochs = 2;
    let tc = TrainConfig {
        seed: RUN_SEED,
        ..cfg.train.clone()
    };
    let init = initial_model(&cfg, &g.train, RUN_SEED).map_err(|e| e.to_string())?;
    let corpus = initial_corpus(&cfg, &init, &g.train, RUN_SEED).map_err(|e| e.to_string())?;
    let srpo = train_srpo(init.clone(), &g.train, &corpus, &tc, &cfg.exploration).map_err(|e| e.to_string())?;
    let sft = train_sft(init, &g.train, &tc).map_err(|e| e.to_string())?;
    ensure(srpo.log.steps == sft.log.steps, || "step logs differ".into())?;
    ensure(srpo.model.params() == sft.model.params(), || "final parameters differ".into())?;
    Ok(format!(
        "{compared} loss pairs bit-equal; {} training steps bit-identical (checksum {})",
        srpo.log.steps.len(),
        &srpo.log.final_checksum[..12]
    ))
}

fn exploration_contract(g: &Golden) -> Verdict {
    let init = initial_model(&g.cfg, &g.train, RUN_SEED).map_err(|e| e.to_string())?;
    let corpus = initial_corpus(&g.cfg, &init, &g.train, RUN_SEED).map_err(|e| e.to_string())?;
    // The loader re-verifies every pair against the dataset.
    let mut bytes = Vec::new();
    corpus.to_writer(&mut bytes).unwrap();
    let reloaded = ExplorationCorpus::from_reader(&bytes[..], &g.train).map_err(|e| e.to_string())?;
    ensure(reloaded == corpus, || "corpus changed through a file round trip".into())?;
    let budget = corpus.config.branch_budget;
    let (mut draws, mut backbone_draws) = (0u64, 0u64);
    for e in &corpus.entries {
        let truth = g.train.get(e.question_id).unwrap().answer;
        ensure(e.backbone_draws >= 1 && e.backbone_draws <= budget, || {
            format!("q{}: {} backbone draws", e.question_id, e.backbone_draws)
        })?;
        backbone_draws += u64::from(e.backbone_draws);
        for p in &e.pairs {
            let pos = p.positive_path(e.question_id);
            let neg = p.negative_path(e.question_id);
            ensure(verify(&pos, truth).unwrap() && !verify(&neg, truth).unwrap(), || {
                format!("q{} step {}: polarity fails", e.question_id, p.step_index)
            })?;
            let k = p.step_index - 1;
            ensure(
                pos.states()[..k] == e.backbone.states()[..k] && neg.states()[..k] == e.backbone.states()[..k],
                || format!("q{} step {}: prefix differs from backbone", e.question_id, p.step_index),
            )?;
        }
        if e.skipped.is_none() {
            let expected: Vec<usize> = (1..e.backbone.len()).collect();
            let logged: Vec<usize> = e.outcomes.iter().map(|l| l.step_index).collect();
            ensure(logged == expected, || format!("q{}: expanded steps {logged:?}", e.question_id))?;
        }
        for l in &e.outcomes {
            draws += u64::from(l.draws);
            let exact = if l.outcome == Outcome::FoundBoth {
                l.draws >= 2 && l.draws <= budget
            } else {
                l.draws == budget
            };
            ensure(exact && l.truncated + l.duplicates <= l.draws, || {
                format!("q{} step {}: {} draws for {:?}", e.question_id, l.step_index, l.draws, l.outcome)
            })?;
        }
    }
    let report = corpus.report();
    ensure(report.draws == draws && report.backbone_draws == backbone_draws, || {
        format!(
            "report counts {}+{} draws, entries {draws}+{backbone_draws}",
            report.draws, report.backbone_draws
        )
    })?;
    ensure(report.pairs == corpus.total_pairs(), || "pair count mismatch".into())?;
    Ok(format!(
        "{} pairs over {} questions re-verified, {draws} branch and {backbone_draws} backbone draws accounted",
        corpus.total_pairs(),
        corpus.entries.len()
    ))
}

fn metric_identities(reports: &Reports) -> Verdict {
    let (sr, er, ser) = rates(&[true, true, false, true], &[true, false, true, true]);
    ensure((sr, er, ser) == (0.75, 0.75, 0.5), || format!("hand example gave {sr}/{er}/{ser}"))?;
    for (label, sr, er, ser) in &reports.0 {
        ensure(*ser <= sr.min(*er) + 1e-12 && *ser >= sr + er - 1.0 - 1e-12, || {
            format!("{label}: SR {sr} ER {er} SER {ser}")
        })?;
    }
    Ok(format!("hand example 0.75/0.75/0.5 exact; identities hold on {} reports", reports.0.len()))
}

fn oracle_equivalence(reports: &mut Reports) -> Verdict {
    let t = Instant::now();
    let world = WorldConfig {
        num_entities: 6,
        value_modulus: 4,
        hazard_pairs: vec![[0, 1], [2, 3]],
        min_facts: 2,
        max_facts: 3,
        max_path_len: 8,
        hazard_ratio: 0.5,
        benign_mix_ratio: 0.5,
    };
    let (records, _) = run_pipeline(40, 21, &world, &PipelineConfig::default()).unwrap();
    ensure(records.len() >= 20, || "micro-world pipeline yielded fewer than 20 questions".into())?;
    let ds = Dataset::new(world.clone(), records[..20].to_vec());
    // A briefly fitted policy, so SR, ER and SER all sit away from 0 and 1.
    let fit = TrainConfig {
        learning_rate: 1e-2,
        epochs: 8,
        snapshot_questions: 0,
        seed: 22,
        ..TrainConfig::default()
    };
    let start = PolicyModel::new_random(&world, &ModelConfig::default(), 22).unwrap();
    let model = train_sft(start, &ds, &fit).map_err(|e| e.to_string())?.model;
    let judge = ToyJudge::new(world);
    let samples = 1000;
    let exact = exact_metrics(&model, &ds, &judge, 1.0).map_err(|e| e.to_string())?;
    let mc = evaluate(&model, &ds, &judge, samples, 1.0, 23).map_err(|e| e.to_string())?;
    reports.add("micro-world exact", &exact);
    reports.add("micro-world sampled", &mc);
    let n = ds.records.len() as f64;
    let sigma = |pick: fn(&srpo_core::evaluation::Tally) -> f64| {
        let var: f64 = exact.per_question.iter().map(|r| pick(&r.tally) * (1.0 - pick(&r.tally))).sum();
        (var / samples as f64).sqrt() / n
    };
    let checks = [
        ("SR", mc.sr, exact.sr, sigma(|t| t.safe)),
        ("ER", mc.er, exact.er, sigma(|t| t.effective)),
        ("SER", mc.ser, exact.ser, sigma(|t| t.both)),
    ];
    let mut detail = Vec::new();
    for (name, got, want, s) in checks {
        ensure((got - want).abs() <= 3.0 * s, || {
            format!("{name}: sampled {got:.4} vs exact {want:.4}, 3 sigma = {:.4}", 3.0 * s)
        })?;
        detail.push(format!("{name} {got:.4}/{want:.4} ({:.1} sigma)", (got - want).abs() / s.max(1e-300)));
    }
    within(t.elapsed(), 300, "oracle comparison")?;
    Ok(format!("{}, {:.1}s", detail.join(", "), t.elapsed().as_secs_f64()))
}

fn pipeline_integrity() -> Verdict {
    let world = WorldConfig::default();
    let cfg = PipelineConfig::default();
    let emit = || {
        let (records, report) = run_pipeline(500, 7, &world, &cfg).unwrap();
        let mut bytes = Vec::new();
        Dataset::new(world.clone(), records.clone()).to_writer(&mut bytes).unwrap();
        bytes.extend(serde_json::to_vec(&report).unwrap());
        (records, report, bytes)
    };
    let (records, report, a) = emit();
    let (_, _, b) = emit();
    ensure(a == b, || "two runs differ byte-wise".into())?;
    ensure(report.conserved(), || format!("stage counts not conserved: {report:?}"))?;
    for r in &records {
        let q = &r.question;
        ensure(ground_truth(q, &world).unwrap() == r.answer, || format!("q{}: wrong answer", q.id))?;
        ensure(verify(&r.reasoning, r.answer).unwrap(), || format!("q{}: reference fails verification", q.id))?;
        ensure(
            judge_safe(q, &r.reasoning, &world).unwrap() && judge_effective(q, &r.reasoning, &world).unwrap(),
            || format!("q{}: reference is not safe and effective", q.id),
        )?;
    }
    Ok(format!(
        "{} records, byte-identical, yield {:.3}, stages conserved",
        records.len(),
        report.acceptance_yield
    ))
}

fn golden_training(g: &Golden, reports: &mut Reports) -> Verdict {
    let t = Instant::now();
    let init = initial_model(&g.cfg, &g.train, RUN_SEED).map_err(|e| e.to_string())?;
    let corpus = initial_corpus(&g.cfg, &init, &g.train, RUN_SEED).map_err(|e| e.to_string())?;
    let judge = ToyJudge::new(g.cfg.world.clone());
    let before = exact_metrics(&init, &g.eval, &judge, g.cfg.eval.temperature).map_err(|e| e.to_string())?;
    let srpo = run_method(Method::Srpo, &g.cfg, &init, &corpus, &g.train, &g.eval, RUN_SEED).map_err(|e| e.to_string())?;
    reports.add("golden untrained", &before);
    reports.add("golden srpo", &srpo.metrics);
    let gain = srpo.metrics.ser - before.ser;
    ensure(gain >= 0.30, || {
        format!("SER {:.4} -> {:.4}, gain {gain:.4} < 0.30", before.ser, srpo.metrics.ser)
    })?;
    let cmp = compare_methods(&g.cfg, &g.train, &g.eval, None, &Method::ALL, &[RUN_SEED]).map_err(|e| e.to_string())?;
    for r in &cmp.rows {
        reports.0.push((format!("compare {} seed={}", r.method, r.seed), r.sr, r.er, r.ser));
    }
    for m in [Method::Sft, Method::Dpo, Method::Orpo] {
        ensure(cmp.deltas.iter().any(|d| d.method == m && d.seed == RUN_SEED), || format!("no delta for {m}"))?;
    }
    let deltas: Vec<String> = cmp.mean_ser_delta.iter().map(|(m, d)| format!("vs {m} {d:+.3}")).collect();
    within(t.elapsed(), 900, "golden experiment")?;
    Ok(format!(
        "SER {:.3} -> {:.3} (+{gain:.3}) on {} hazardous questions; paired SER deltas {}; {:.1}s",
        before.ser,
        srpo.metrics.ser,
        g.eval.records.len(),
        deltas.join(", "),
        t.elapsed().as_secs_f64()
    ))
}

fn sweep_harness(g: &Golden, reports: &mut Reports) -> Verdict {
    let values = [0.1, 0.3, 0.5, 0.7, 0.9];
    let report = lambda_sweep(&g.cfg, &g.train, &g.eval, None, &values, &[0, 1, 2]).map_err(|e| e.to_string())?;
    ensure(report.rows.len() == 15, || format!("{} rows", report.rows.len()))?;
    ensure(report.series.len() == 5, || format!("{} series points", report.series.len()))?;
    ensure(report.series_tsv().lines().count() == 6, || "series file is not 5 rows plus header".into())?;
    for r in &report.rows {
        reports.0.push((format!("sweep lambda={} seed={}", r.lambda, r.seed), r.sr, r.er, r.ser));
    }
    let series: Vec<String> = report.series.iter().map(|p| format!("{}:{:.3}", p.lambda, p.mean_ser)).collect();
    Ok(format!(
        "15 rows; mean SER {}; best lambda {} ({} optimum)",
        series.join(" "),
        report.best_lambda,
        if report.interior_optimum { "interior" } else { "boundary" }
    ))
}

/// Pearson statistic with cells of expected count below 5 pooled.
fn chi_square_p(observed: &[u64], probs: &[f64], n: u64) -> f64 {
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probs) {
        let e = p * n as f64;
        if e < 5.0 {
            pooled.0 += o as f64;
            pooled.1 += e;
        } else {
            cells.push((o as f64, e));
        }
    }
    if pooled.1 > 0.0 {
        cells.push(pooled);
    }
    if cells.len() < 2 {
        return 1.0;
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dist = ChiSquared::new((cells.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn sampling_fidelity(g: &Golden) -> Verdict {
    let model = PolicyModel::new_random(&g.train.world, &ModelConfig::default(), 31).unwrap();
    let draws = 10_000u64;
    let mut min_p = 1.0f64;
    for (c, rec) in g.train.records.iter().take(10).enumerate() {
        let q = &rec.question;
        let states = rec.reasoning.states();
        let prefix_len = c % states.len();
        let prefix: Vec<Step> = states[..prefix_len].to_vec();
        let logits = model
            .logits(q, &Prefix::new(prefix.clone()).unwrap())
            .map_err(|e| e.to_string())?;
        let vocab = model.vocab();
        for temperature in [0.5, 1.0] {
            let legal: Vec<usize> = (0..logits.len()).filter(|&v| logits[v].is_finite()).collect();
            let scaled: Vec<f64> = legal.iter().map(|&v| logits[v] / temperature).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scaled.iter().map(|x| (x - max).exp()).sum();
            let probs: Vec<f64> = scaled.iter().map(|x| (x - max).exp() / z).collect();
            let mut counts = vec![0u64; legal.len()];
            let mut rng = rng_for(99, "chi-square", (c as u64) * 10 + (temperature * 2.0) as u64);
            for _ in 0..draws {
                let s = sample_step(&model, q, &prefix, temperature, &mut rng).map_err(|e| e.to_string())?;
                let v = vocab.index(s).unwrap();
                let cell = legal.iter().position(|&l| l == v).ok_or_else(|| format!("sampled masked step {s}"))?;
                counts[cell] += 1;
            }
            let p = chi_square_p(&counts, &probs, draws);
            min_p = min_p.min(p);
            ensure(p > 0.01, || format!("context {c} T={temperature}: p = {p:.4}"))?;
        }
    }
    Ok(format!("20 tests at 10^4 draws, min p {min_p:.3}"))
}

fn main() {
    let threads = parse_config(GOLDEN_CONFIG).expect("golden config parses").run.threads;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .expect("single worker pool");
    let golden = Golden::load();
    let mut reports = Reports::default();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Verdict| {
        let line = match &r {
            Ok(d) => format!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => format!("criterion {n:>2} FAIL  {name}: {d}"),
        };
        println!("{line}");
        results.push((n, name, r));
    };
    record(1, "gradient correctness", gradient_correctness(&golden));
    record(2, "continuation cancellation", cancellation(&golden));
    record(3, "objective reductions", reductions(&golden));
    record(4, "exploration contract", exploration_contract(&golden));
    record(6, "oracle equivalence", oracle_equivalence(&mut reports));
    record(7, "pipeline integrity", pipeline_integrity());
    record(8, "golden training experiment", golden_training(&golden, &mut reports));
    record(9, "lambda sweep harness", sweep_harness(&golden, &mut reports));
    record(10, "sampling fidelity", sampling_fidelity(&golden));
    record(5, "metric identities", metric_identities(&reports));

    results.sort_by_key(|r| r.0);
    println!("\nacceptance summary");
    for (n, name, r) in &results {
        println!("  {n:>2} {:<4} {name}", if r.is_ok() { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
