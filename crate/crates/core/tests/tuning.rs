//! Training loops: monotone losses, determinism, and agreement between the
//! sequential and parallel paths.

use hmm_recovery::downstream::*;
use hmm_recovery::model::{random_hmm, random_mem_hmm, HmmParams};
use hmm_recovery::par::Exec;
use hmm_recovery::recovery::masked_first_feature;
use hmm_recovery::tuning::*;
use nalgebra::DVector;

fn splits(n: usize, t_len: usize) -> Splits {
    Splits { n_train: n, n_val: n / 4, n_test: n / 4, t_len }
}

fn vanilla_data(seed: u64) -> (HmmParams, LabeledDataset) {
    let p = random_hmm(seed, 5, 8).unwrap();
    let task = make_task(seed, 5, 4).unwrap();
    let ds = gen_dataset(Source::Vanilla { params: &p, target: VanillaTarget::MaskedFirst }, &task, splits(200, 16), seed, Exec::Sequential).unwrap();
    (p, ds)
}

fn small_config() -> TrainConfig {
    TrainConfig { epochs: 25, prompt_len: 4, seed: 3, ..TrainConfig::default() }
}

fn features(p: &HmmParams, ex: &[Example]) -> (Vec<DVector<f64>>, Vec<u8>) {
    (ex.iter().map(|e| masked_first_feature(p, &e.tokens).unwrap()).collect(), ex.iter().map(|e| e.label).collect())
}

#[test]
fn linear_head_loss_never_increases() {
    for seed in 0..3 {
        let (p, ds) = vanilla_data(seed);
        let (x, y) = features(&p, &ds.train);
        let fit = train_linear_head(Exec::Sequential, &x, &y, &small_config()).unwrap();
        assert!(fit.losses.last().unwrap() <= fit.losses.first().unwrap());
        for w in fit.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", fit.losses);
        }
    }
}

#[test]
fn prompt_training_improves_on_its_warm_start() {
    let (p, ds) = vanilla_data(1);
    let fit = train_prompt(Exec::Sequential, &p, &ds.train, &small_config()).unwrap();
    assert!(fit.losses.last().unwrap() <= fit.losses.first().unwrap());
    assert!(fit.prompts.iter().all(|v| v.entries.iter().all(|x| (0.0..=1.0).contains(x))));
    assert_eq!(fit.prompts.len(), 4);
}

#[test]
fn training_is_deterministic_and_matches_across_executors() {
    let (p, ds) = vanilla_data(2);
    let cfg = small_config();
    let a = train_prompt(Exec::Sequential, &p, &ds.train, &cfg).unwrap();
    let b = train_prompt(Exec::Sequential, &p, &ds.train, &cfg).unwrap();
    let c = train_prompt(Exec::Parallel, &p, &ds.train, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.losses, c.losses);
    assert_eq!(a.head.weights, c.head.weights);
    assert_eq!(a.prompts, c.prompts);

    let par = gen_dataset(Source::Vanilla { params: &p, target: VanillaTarget::MaskedFirst }, &ds.task, splits(200, 16), 2, Exec::Parallel).unwrap();
    assert_eq!(par.train.iter().map(|e| &e.tokens).collect::<Vec<_>>(), ds.train.iter().map(|e| &e.tokens).collect::<Vec<_>>());
}

#[test]
fn analytic_and_numeric_prompt_gradients_train_alike() {
    let (p, ds) = vanilla_data(0);
    let cfg = TrainConfig { epochs: 3, prompt_len: 2, ..small_config() };
    let a = train_prompt(Exec::Sequential, &p, &ds.train[..60], &cfg).unwrap();
    let b = train_prompt(Exec::Sequential, &p, &ds.train[..60], &TrainConfig { grad_mode: GradMode::FiniteDifference, ..cfg }).unwrap();
    for (x, y) in a.losses.iter().zip(&b.losses) {
        assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{:?} vs {:?}", a.losses, b.losses);
    }
}

#[test]
fn attention_training_fits_a_small_memory_task() {
    let p = random_mem_hmm(4, 1, 2, 4, 10).unwrap();
    let task = make_task(4, 2, 2).unwrap().with_cell(0);
    let ds = gen_dataset(Source::Memory { params: &p, target: MemoryTarget::MaskedFirst }, &task, splits(200, 40), 4, Exec::Sequential).unwrap();
    let cfg = TrainConfig { epochs: 30, attention_steps: 2, ..TrainConfig::default() };
    let fit = train_attention_head(Exec::Sequential, &p, &ds.train, &ds.val, &cfg).unwrap();
    assert_eq!(fit.val_accuracy.len(), 1 + cfg.temperatures.len());
    assert!(fit.selected < fit.val_accuracy.len());
    let best = fit.val_accuracy.iter().cloned().fold(0.0, f64::max);
    assert_eq!(fit.val_accuracy[fit.selected], best);
    let again = train_attention_head(Exec::Parallel, &p, &ds.train, &ds.val, &cfg).unwrap();
    assert_eq!(fit.losses, again.losses);
    assert_eq!(fit.val_accuracy, again.val_accuracy);
}
