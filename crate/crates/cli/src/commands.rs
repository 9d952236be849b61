use std::fs;
use std::path::Path;

use serde::Serialize;
use srpo_core::config::{load_config, Config};
use srpo_core::evaluation::{
    compare_methods, evaluate_with, initial_corpus, initial_model, lambda_sweep, Protocol,
};
use srpo_core::exploration::{explore_dataset, ExplorationCorpus};
use srpo_core::model::{finite_diff_check, load_checkpoint, save_checkpoint, PolicyModel};
use srpo_core::optimization::{
    align_step_expr, ref_expr, total_expr, train_dpo, train_orpo, train_sft, train_srpo, Method, TrainConfig,
};
use srpo_core::pipeline::{run_pipeline, Dataset};
use srpo_core::seed::{derive_seed, rng_for};

use crate::error::{CliError, Kind, Result};
use crate::manifest::{read_verified, RunDir, SUMMARY_FILE};
use crate::{Command, Common};

pub fn dispatch(cmd: Command, argv: Vec<String>) -> Result<()> {
    match cmd {
        Command::GenData { n, seed, common } => gen_data(n, seed, &common, argv),
        Command::Explore {
            model,
            data,
            seed,
            common,
        } => explore(model.as_deref(), &data, seed, &common, argv),
        Command::Train {
            method,
            data,
            corpus,
            init,
            seed,
            common,
        } => train(method, &data, corpus.as_deref(), init.as_deref(), seed, &common, argv),
        Command::Eval {
            model,
            data,
            samples,
            exact,
            hazardous,
            seed,
            common,
        } => eval(&model, &data, samples, exact, hazardous, seed, &common, argv),
        Command::Sweep {
            data,
            eval_data,
            corpus,
            values,
            seeds,
            seed,
            hazardous,
            common,
        } => {
            let seeds: Vec<u64> = (seed..seed + seeds).collect();
            sweep(&data, &eval_data, corpus.as_deref(), &values, &seeds, hazardous, &common, argv)
        }
        Command::Compare {
            data,
            eval_data,
            corpus,
            methods,
            seeds,
            seed,
            hazardous,
            common,
        } => {
            let seeds: Vec<u64> = (seed..seed + seeds).collect();
            compare(&data, &eval_data, corpus.as_deref(), &methods, &seeds, hazardous, &common, argv)
        }
        Command::Gradcheck {
            data,
            seed,
            epsilon,
            samples,
            tolerance,
            common,
        } => gradcheck(&data, seed, epsilon, samples, tolerance, &common, argv),
        Command::Report { run_dir, plot_out } => report(&run_dir, plot_out.as_deref()),
    }
}

/// Resolved config, with the worker pool sized from it.
fn setup(common: &Common) -> Result<Config> {
    let cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    if cfg.run.threads > 0 {
        // Fails only if a pool already exists; results do not depend on its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.threads).build_global();
    }
    Ok(cfg)
}

fn start(common: &Common, sub: &str, argv: Vec<String>, cfg: &Config, seed: Option<u64>) -> Result<RunDir> {
    let mut run = RunDir::create(&common.out, sub, argv, cfg, seed)?;
    if let Some(p) = &common.config {
        run.input("config", p)?;
    }
    Ok(run)
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    if !path.is_file() {
        return Err(CliError::data(format!("missing input: dataset {} does not exist", path.display())));
    }
    Ok(Dataset::read(path)?)
}

fn read_corpus(path: &Path, dataset: &Dataset) -> Result<ExplorationCorpus> {
    if !path.is_file() {
        return Err(CliError::data(format!("missing input: corpus {} does not exist", path.display())));
    }
    Ok(ExplorationCorpus::read(path, dataset)?)
}

fn read_model(path: &Path, dataset: &Dataset) -> Result<PolicyModel> {
    if !path.is_file() {
        return Err(CliError::data(format!("missing input: checkpoint {} does not exist", path.display())));
    }
    let (model, _) = load_checkpoint(path)?;
    if model.world() != &dataset.world {
        return Err(CliError::data(format!(
            "checkpoint {} was built for a different world than the dataset",
            path.display()
        )));
    }
    Ok(model)
}

fn split(ds: Dataset, hazardous: bool) -> Result<Dataset> {
    if !hazardous {
        return Ok(ds);
    }
    let h = ds.hazardous();
    if h.records.is_empty() {
        return Err(CliError::data("the dataset has no hazardous questions"));
    }
    Ok(h)
}

fn gen_data(n: usize, seed: u64, common: &Common, argv: Vec<String>) -> Result<()> {
    let cfg = setup(common)?;
    let mut run = start(common, "gen-data", argv, &cfg, Some(seed))?;
    let (records, report) = run_pipeline(n, seed, &cfg.world, &cfg.pipeline)?;
    let ds = Dataset::new(cfg.world.clone(), records);
    let mut bytes = Vec::new();
    ds.to_writer(&mut bytes)?;
    run.write("dataset.jsonl", bytes)?;
    run.write_json("pipeline-report.json", &report)?;
    let text = report.to_string();
    run.write(SUMMARY_FILE, &text)?;
    run.finish()?;
    print!("{text}");
    Ok(())
}

fn explore(model: Option<&Path>, data: &Path, seed: u64, common: &Common, argv: Vec<String>) -> Result<()> {
    let cfg = setup(common)?;
    let ds = read_dataset(data)?;
    let mut run = start(common, "explore", argv, &cfg, Some(seed))?;
    run.input("data", data)?;
    let policy = match model {
        Some(p) => {
            let m = read_model(p, &ds)?;
            run.input("model", p)?;
            m
        }
        None => {
            let m = initial_model(&cfg, &ds, seed)?;
            save_checkpoint(&m, &serde_json::json!({ "initial": true, "seed": seed }), &run.path("init.ckpt"))?;
            run.adopt("init.ckpt")?;
            m
        }
    };
    let corpus = initial_corpus(&cfg, &policy, &ds, seed)?;
    let mut bytes = Vec::new();
    corpus.to_writer(&mut bytes)?;
    run.write("corpus.jsonl", bytes)?;
    let report = corpus.report();
    run.write_json("corpus-report.json", &report)?;
    let text = report.to_string();
    run.write(SUMMARY_FILE, &text)?;
    run.finish()?;
    print!("{text}");
    Ok(())
}

fn train(
    method: Method,
    data: &Path,
    corpus: Option<&Path>,
    init: Option<&Path>,
    seed: u64,
    common: &Common,
    argv: Vec<String>,
) -> Result<()> {
    let cfg = setup(common)?;
    if method.needs_corpus() && corpus.is_none() {
        return Err(CliError::data(format!("missing input: method {method} needs --corpus")));
    }
    let ds = read_dataset(data)?;
    let mut run = start(common, "train", argv, &cfg, Some(seed))?;
    run.input("data", data)?;
    let corpus = match corpus {
        Some(p) => {
            let c = read_corpus(p, &ds)?;
            run.input("corpus", p)?;
            Some(c)
        }
        None => None,
    };
    let model = match init {
        Some(p) => {
            let m = read_model(p, &ds)?;
            run.input("init", p)?;
            m
        }
        None => initial_model(&cfg, &ds, seed)?,
    };
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = match (method, &corpus) {
        (Method::Sft, _) => train_sft(model, &ds, &tc)?,
        (Method::Srpo, Some(c)) => train_srpo(model, &ds, c, &tc, &cfg.exploration)?,
        (Method::Dpo, Some(c)) => train_dpo(model, &ds, c, &tc)?,
        (Method::Orpo, Some(c)) => train_orpo(model, &ds, c, &tc)?,
        _ => unreachable!("corpus presence checked above"),
    };
    let settings = serde_json::json!({ "method": method, "train": tc });
    save_checkpoint(&out.model, &settings, &run.path("model.ckpt"))?;
    run.adopt("model.ckpt")?;
    run.write("training-log.tsv", out.log.to_tsv())?;
    run.write_json("training-summary.json", &out.log.summary())?;
    run.plot_data("training-log.tsv");
    let mut text = format!(
        "method {method}  steps {}  final checksum {}\n{:>6} {:>12} {:>12} {:>12} {:>6}\n",
        out.log.steps.len(),
        out.log.final_checksum,
        "epoch",
        "ref",
        "align",
        "total",
        "pairs"
    );
    for e in &out.log.epochs {
        text.push_str(&format!(
            "{:>6} {:>12.6} {:>12.6} {:>12.6} {:>6}\n",
            e.epoch, e.mean_ref, e.mean_align, e.mean_total, e.corpus_pairs
        ));
    }
    run.write(SUMMARY_FILE, &text)?;
    run.finish()?;
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    model: &Path,
    data: &Path,
    samples: Option<usize>,
    exact: bool,
    hazardous: bool,
    seed: u64,
    common: &Common,
    argv: Vec<String>,
) -> Result<()> {
    let mut cfg = setup(common)?;
    if let Some(s) = samples {
        cfg.eval.samples_per_question = s;
        cfg.eval.protocol = Protocol::Sampled;
    }
    if exact {
        cfg.eval.protocol = Protocol::Exact;
    }
    cfg.eval.validate()?;
    let ds = split(read_dataset(data)?, hazardous)?;
    let policy = read_model(model, &ds)?;
    let mut run = start(common, "eval", argv, &cfg, Some(seed))?;
    run.input("data", data)?;
    run.input("model", model)?;
    let metrics = evaluate_with(&cfg.eval, &policy, &ds, seed)?;
    run.write_json("metrics.json", &metrics)?;
    run.write("questions.tsv", metrics.question_tsv())?;
    let text = metrics.to_string();
    run.write(SUMMARY_FILE, &text)?;
    run.finish()?;
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    data: &Path,
    eval_data: &Path,
    corpus: Option<&Path>,
    values: &[f64],
    seeds: &[u64],
    hazardous: bool,
    common: &Common,
    argv: Vec<String>,
) -> Result<()> {
    let cfg = setup(common)?;
    cfg.eval.validate()?;
    let train = read_dataset(data)?;
    let eval = split(read_dataset(eval_data)?, hazardous)?;
    let mut run = start(common, "sweep", argv, &cfg, seeds.first().copied())?;
    run.input("data", data)?;
    run.input("eval-data", eval_data)?;
    let corpus = match corpus {
        Some(p) => {
            let c = read_corpus(p, &train)?;
            run.input("corpus", p)?;
            Some(c)
        }
        None => None,
    };
    let report = lambda_sweep(&cfg, &train, &eval, corpus.as_ref(), values, seeds)?;
    run.write_json("sweep.json", &report)?;
    run.write("sweep-rows.tsv", report.rows_tsv())?;
    run.write("sweep-series.tsv", report.series_tsv())?;
    run.plot_data("sweep-series.tsv");
    let text = report.to_string();
    run.write(SUMMARY_FILE, &text)?;
    run.finish()?;
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn compare(
    data: &Path,
    eval_data: &Path,
    corpus: Option<&Path>,
    methods: &[Method],
    seeds: &[u64],
    hazardous: bool,
    common: &Common,
    argv: Vec<String>,
) -> Result<()> {
    let cfg = setup(common)?;
    let train = read_dataset(data)?;
    let eval = split(read_dataset(eval_data)?, hazardous)?;
    let mut run = start(common, "compare", argv, &cfg, seeds.first().copied())?;
    run.input("data", data)?;
    run.input("eval-data", eval_data)?;
    let corpus = match corpus {
        Some(p) => {
            let c = read_corpus(p, &train)?;
            run.input("corpus", p)?;
            Some(c)
        }
        None => None,
    };
    let report = compare_methods(&cfg, &train, &eval, corpus.as_ref(), methods, seeds)?;
    run.write_json("compare.json", &report)?;
    run.write("compare-rows.tsv", report.rows_tsv())?;
    run.write("compare-deltas.tsv", report.deltas_tsv())?;
    run.plot_data("compare-rows.tsv");
    let text = report.to_string();
    run.write(SUMMARY_FILE, &text)?;
    run.finish()?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradRow {
    loss: String,
    question: u64,
    max_rel_error: f64,
    worst_index: usize,
    checked: usize,
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    data: &Path,
    seed: u64,
    epsilon: f64,
    samples: usize,
    tolerance: f64,
    common: &Common,
    argv: Vec<String>,
) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(CliError::new(Kind::Config, "--epsilon must be positive"));
    }
    let cfg = setup(common)?;
    let ds = read_dataset(data)?;
    let mut run = start(common, "gradcheck", argv, &cfg, Some(seed))?;
    run.input("data", data)?;
    let model = PolicyModel::new_random(&ds.world, &cfg.model, derive_seed(seed, "gradcheck", 0))?;
    let corpus = explore_dataset(&model, &ds, &cfg.exploration, derive_seed(seed, "gradcheck", 1))?;
    let mut rng = rng_for(seed, "gradcheck", 2);
    let mut rows = Vec::new();
    let mut check = |loss: String, question: u64, expr: &srpo_core::model::Expr<'_>| -> Result<()> {
        let r = finite_diff_check(&model, expr, epsilon, samples, &mut rng)?;
        rows.push(GradRow {
            loss,
            question,
            max_rel_error: r.max_rel_error,
            worst_index: r.worst_index,
            checked: r.checked,
        });
        Ok(())
    };
    for rec in ds.records.iter().take(4) {
        check("ref".into(), rec.question.id.0, &ref_expr(&rec.question, &rec.reasoning, false))?;
    }
    let with_pairs: Vec<_> = corpus.entries.iter().filter(|e| !e.pairs.is_empty()).take(3).collect();
    for entry in &with_pairs {
        let rec = ds.get(entry.question_id).expect("corpus built from this dataset");
        for k in [0.5, 1.0, 2.0] {
            check(format!("align k={k}"), rec.question.id.0, &align_step_expr(&rec.question, &entry.pairs[0], k, false))?;
        }
    }
    if let Some(entry) = with_pairs.first() {
        let rec = ds.get(entry.question_id).expect("corpus built from this dataset");
        for lambda in [0.0, 0.3, 1.0] {
            let e = total_expr(&rec.question, &rec.reasoning, &entry.pairs, lambda, cfg.train.k, false);
            check(format!("total lambda={lambda}"), rec.question.id.0, &e)?;
        }
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    run.write_json(
        "gradcheck.json",
        &serde_json::json!({ "epsilon": epsilon, "tolerance": tolerance, "max_rel_error": worst, "rows": rows }),
    )?;
    let mut text = format!("{:<20} {:>8} {:>14} {:>8}\n", "loss", "question", "max rel error", "checked");
    for r in &rows {
        text.push_str(&format!("{:<20} {:>8} {:>14.3e} {:>8}\n", r.loss, r.question, r.max_rel_error, r.checked));
    }
    text.push_str(&format!(
        "worst {worst:.3e} ({} tolerance {tolerance:e})\n",
        if worst < tolerance { "within" } else { "EXCEEDS" }
    ));
    run.write(SUMMARY_FILE, &text)?;
    run.finish()?;
    print!("{text}");
    if worst >= tolerance {
        return Err(CliError::new(
            Kind::Numeric,
            format!("gradient check failed: max relative error {worst:e} >= {tolerance:e}"),
        ));
    }
    Ok(())
}

fn report(dir: &Path, plot_out: Option<&Path>) -> Result<()> {
    let manifest = read_verified(dir)?;
    let summary = fs::read_to_string(dir.join(SUMMARY_FILE)).map_err(|e| CliError::io(&dir.join(SUMMARY_FILE), e))?;
    println!(
        "{} run (srpo {}), seed {}, {} artifacts verified",
        manifest.subcommand,
        manifest.tool_version,
        manifest.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
        manifest.artifacts.len()
    );
    for (role, input) in &manifest.inputs {
        println!("  input {role}: {} ({})", input.path, &input.sha256[..12]);
    }
    println!();
    print!("{summary}");
    if let Some(name) = &manifest.plot_data {
        let src = dir.join(name);
        let plot = fs::read_to_string(&src).map_err(|e| CliError::io(&src, e))?;
        match plot_out {
            Some(dst) => {
                fs::write(dst, &plot).map_err(|e| CliError::io(dst, e))?;
                println!("\nplot data written to {}", dst.display());
            }
            None => println!("\nplot data: {}", src.display()),
        }
    } else if plot_out.is_some() {
        return Err(CliError::data(format!("{} run has no plot data", manifest.subcommand)));
    }
    Ok(())
}
