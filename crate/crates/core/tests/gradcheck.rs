use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srpo_core::exploration::{explore_dataset, ExplorationConfig, ExplorationCorpus};
use srpo_core::model::{finite_diff_check, ModelConfig, PolicyModel};
use srpo_core::optimization::{align_step_expr, dpo_expr, orpo_expr, ref_expr, total_expr};
use srpo_core::pipeline::{run_pipeline, Dataset, PipelineConfig};
use srpo_core::world::WorldConfig;

const EPS: f64 = 1e-5;
const BAR: f64 = 1e-4;

fn setup() -> (PolicyModel, Dataset, ExplorationCorpus) {
    let world = WorldConfig::default();
    let (records, _) = run_pipeline(12, 3, &world, &PipelineConfig::default()).unwrap();
    let ds = Dataset::new(world.clone(), records);
    let model = PolicyModel::new_random(&world, &ModelConfig::default(), 17).unwrap();
    let corpus = explore_dataset(&model, &ds, &ExplorationConfig::default(), 5).unwrap();
    assert!(corpus.total_pairs() > 0);
    (model, ds, corpus)
}

#[test]
fn reference_loss_gradient() {
    let (model, ds, _) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for rec in ds.records.iter().take(4) {
        for normalize in [false, true] {
            let e = ref_expr(&rec.question, &rec.reasoning, normalize);
            let r = finite_diff_check(&model, &e, EPS, 60, &mut rng).unwrap();
            assert!(r.max_rel_error < BAR, "{r:?}");
        }
    }
}

#[test]
fn alignment_loss_gradient_across_k() {
    let (model, ds, corpus) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for entry in corpus.entries.iter().filter(|e| !e.pairs.is_empty()).take(3) {
        let q = &ds.get(entry.question_id).unwrap().question;
        for pair in entry.pairs.iter().take(2) {
            for k in [0.5, 1.0, 2.0] {
                let e = align_step_expr(q, pair, k, false);
                let r = finite_diff_check(&model, &e, EPS, 60, &mut rng).unwrap();
                assert!(r.max_rel_error < BAR, "k={k} {r:?}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 3);
}

#[test]
fn total_loss_gradient_across_lambda() {
    let (model, ds, corpus) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let entry = corpus.entries.iter().find(|e| e.pairs.len() >= 2).expect("an entry with pairs");
    let rec = ds.get(entry.question_id).unwrap();
    for lambda in [0.0, 0.3, 1.0] {
        let e = total_expr(&rec.question, &rec.reasoning, &entry.pairs, lambda, 1.0, false);
        let r = finite_diff_check(&model, &e, EPS, 80, &mut rng).unwrap();
        assert!(r.max_rel_error < BAR, "lambda={lambda} {r:?}");
    }
}

#[test]
fn baseline_loss_gradients() {
    let (model, ds, corpus) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let entry = corpus.entries.iter().find(|e| !e.pairs.is_empty()).unwrap();
    let q = &ds.get(entry.question_id).unwrap().question;
    let (chosen, rejected) = entry.earliest_pair().unwrap();
    let dpo = dpo_expr(q, &chosen, &rejected, -3.0, -4.0, 0.1);
    assert!(finite_diff_check(&model, &dpo, EPS, 60, &mut rng).unwrap().max_rel_error < BAR);
    let orpo = orpo_expr(q, &chosen, &rejected, 1.0, false);
    assert!(finite_diff_check(&model, &orpo, EPS, 60, &mut rng).unwrap().max_rel_error < BAR);
}
