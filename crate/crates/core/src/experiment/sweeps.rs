//! Tuning sweeps: head-only against prompt tuning on vanilla models, and
//! attention on memory-augmented models against a vanilla baseline.

use nalgebra::DVector;

use super::{digest, Check, MemCase, ModelRecord, Outcome, Settings, TrialRow};
use crate::assumptions::{check_nondegenerate_emissions, check_regularity, check_relaxed_vanilla, Verdict};
use crate::downstream::{gen_dataset, make_task, Example, MemoryTarget, Source, TaskSpec, VanillaTarget};
use crate::families::{build_degenerate_family, TASK_NONZEROS};
use crate::io::Model;
use crate::model::{random_hmm, random_mem_hmm, HmmParams};
use crate::par::{map, Exec};
use crate::recovery::{eval_attention, eval_linear, masked_first_feature, LinearHead};
use crate::rng::{derive_seed, tags};
use crate::tuning::{attention_features, prompt_data, prompt_features, train_attention_head, train_linear_head, train_prompt, TrainConfig};
use crate::{Error, Result};

/// Model redraws allowed when every task draw leaves one class too rare.
pub const MODEL_REDRAWS: usize = 5;

/// Runs `trial` on `seed`, then on derived seeds while the dataset is degenerate.
fn with_redraws(seed: u64, mut trial: impl FnMut(u64) -> Result<Outcome>) -> Result<(Outcome, usize)> {
    let mut last = None;
    for r in 0..MODEL_REDRAWS {
        let s = if r == 0 { seed } else { derive_seed(derive_seed(seed, tags::FAMILY), r as u64) };
        match trial(s) {
            Ok(o) => return Ok((o, r)),
            Err(e @ Error::DegenerateDataset(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw"))
}

fn accuracy(head: &LinearHead, feats: &[DVector<f64>], labels: &[u8]) -> f64 {
    feats.iter().zip(labels).filter(|(f, y)| eval_linear(head, f) == **y).count() as f64 / feats.len() as f64
}

fn trial_config(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed: derive_seed(seed, tags::PROMPT_INIT), ..base.clone() }
}

/// Vanilla model for a sweep size: the rank-deficient family once hidden
/// states outnumber tokens, a plain random model otherwise.
fn vanilla_model(s: &Settings, seed: u64, nh: usize) -> Result<(HmmParams, TaskSpec, Vec<Verdict>)> {
    let tol = s.thresholds.rank_tol;
    let (p, task, extra) = if nh >= s.n_vocab {
        let f = build_degenerate_family(seed, nh, s.n_vocab, s.h_star_size.min(s.n_vocab))?;
        let relaxed = check_relaxed_vanilla(&f.params, &f.task.weights, &f.h_star, &f.b_set, tol).verdict;
        (f.params, f.task, Some(relaxed))
    } else {
        let p = random_hmm(seed, nh, s.n_vocab)?;
        let task = make_task(seed, nh, TASK_NONZEROS.min(nh))?;
        (p, task, None)
    };
    let mut verdicts = vec![check_nondegenerate_emissions(&p.emission, tol).verdict, check_regularity(&p.transition, &p.start)];
    verdicts.extend(extra);
    Ok((p, task, verdicts))
}

pub(super) fn head_vs_prompt(s: &Settings, exec: Exec) -> Result<Outcome> {
    let items: Vec<(usize, usize, usize)> = s.hidden_sizes.iter().enumerate().flat_map(|(g, &nh)| (0..s.trials).map(move |t| (g, nh, t))).collect();
    let results: Vec<Outcome> = map(exec, &items, |&(g, nh, t)| head_vs_prompt_trial(s, s.seed_for(g, t), nh, t, exec).map_err(|e| e.in_context(format!("H{nh} trial {t}"))))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut o = Outcome::default();
    for r in results {
        o.absorb(r);
    }
    let th = &s.thresholds;
    for &size in &th.trend_sizes {
        if !s.hidden_sizes.contains(&size) {
            continue;
        }
        let group = format!("H{size}");
        let (head, prompt) = (super::mean_ci(&o.values(&group, "head")).0, super::mean_ci(&o.values(&group, "prompt")).0);
        o.checks.push(Check::new(format!("prompt >= head at |H| = {size}"), prompt >= head, format!("prompt {prompt:.4} vs head {head:.4} over {} trials", s.trials)));
        if size == th.gap_size {
            o.checks.push(Check::new(
                format!("prompt - head >= {} at |H| = {size}", th.min_gap),
                prompt - head >= th.min_gap,
                format!("gap {:.4}", prompt - head),
            ));
        }
    }
    o.checks.push(Check::new("all trials completed", true, format!("{} trials", items.len())));
    Ok(o)
}

fn head_vs_prompt_trial(s: &Settings, seed: u64, nh: usize, t: usize, exec: Exec) -> Result<Outcome> {
    let (mut o, redraws) = with_redraws(seed, |seed| head_vs_prompt_draw(s, seed, nh, t, exec))?;
    o.rows.push(TrialRow::new(&format!("H{nh}"), t, "redraws", redraws as f64, redraws));
    Ok(o)
}

fn head_vs_prompt_draw(s: &Settings, seed: u64, nh: usize, t: usize, exec: Exec) -> Result<Outcome> {
    let group = format!("H{nh}");
    let (p, task, verdicts) = vanilla_model(s, seed, nh)?;
    let ds = gen_dataset(Source::Vanilla { params: &p, target: VanillaTarget::MaskedFirst }, &task, s.splits, derive_seed(seed, tags::DATA), exec)?;
    let fit = train_prompt(exec, &p, &ds.train, &trial_config(&s.train, seed))?;
    let test = prompt_data(exec, &p, &ds.test)?;
    let base = prompt_features(exec, &test, &[]);
    let entries: Vec<DVector<f64>> = fit.prompts.iter().map(|q| q.entries.clone()).collect();
    let prompted = prompt_features(exec, &test, &entries);
    let n = ds.test.len();
    let rows = vec![
        TrialRow::new(&group, t, "head", accuracy(&fit.head_only.head, &base, &test.labels), n),
        TrialRow::new(&group, t, "prompt", accuracy(&fit.head, &prompted, &test.labels), n),
        TrialRow::new(&group, t, "balance", ds.balance, ds.train.len() + ds.val.len() + n),
    ];
    let models = vec![ModelRecord { group, trial: t, seed, digest: digest(Model::Hmm(p))?, verdicts }];
    Ok(Outcome { rows, models, checks: Vec::new() })
}

pub(super) fn memory(s: &Settings, exec: Exec) -> Result<Outcome> {
    let items: Vec<(usize, MemCase, usize)> = s.mem_cases.iter().enumerate().flat_map(|(g, &c)| (0..s.trials).map(move |t| (g, c, t))).collect();
    let results: Vec<Outcome> = map(exec, &items, |&(g, c, t)| memory_trial(s, s.seed_for(g, t), c, t, exec).map_err(|e| e.in_context(format!("{} trial {t}", c.label()))))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut o = Outcome::default();
    for r in results {
        o.absorb(r);
    }
    let th = &s.thresholds;
    for c in &s.mem_cases {
        let group = c.label();
        let attn = super::mean_ci(&o.values(&group, "attention")).0;
        let van = super::mean_ci(&o.values(&group, "vanilla")).0;
        o.checks.push(Check::new(format!("attention >= {} at {group}", th.min_accuracy), attn >= th.min_accuracy, format!("mean accuracy {attn:.4} over {} trials", s.trials)));
        o.checks.push(Check::new(format!("attention > vanilla baseline at {group}"), attn > van, format!("attention {attn:.4} vs vanilla {van:.4} with |H| = {}", c.mem_size * c.n_hidden())));
    }
    Ok(o)
}

fn memory_trial(s: &Settings, seed: u64, case: MemCase, t: usize, exec: Exec) -> Result<Outcome> {
    let (mut o, redraws) = with_redraws(seed, |seed| memory_draw(s, seed, case, t, exec))?;
    o.rows.push(TrialRow::new(&case.label(), t, "redraws", redraws as f64, redraws));
    Ok(o)
}

fn memory_draw(s: &Settings, seed: u64, case: MemCase, t: usize, exec: Exec) -> Result<Outcome> {
    let group = case.label();
    let tol = s.thresholds.rank_tol;
    let cfg = trial_config(&s.train, seed);

    let p = random_mem_hmm(seed, case.n_cells, case.mem_size, case.syntax_size, s.n_vocab)?;
    let task = make_task(seed, case.mem_size, TASK_NONZEROS.min(case.mem_size))?.with_cell(0);
    let ds = gen_dataset(Source::Memory { params: &p, target: MemoryTarget::MaskedFirst }, &task, s.splits, derive_seed(seed, tags::DATA), exec)?;
    let fit = train_attention_head(exec, &p, &ds.train, &ds.val, &cfg)?;
    let hits = map(exec, &ds.test, |e| -> Result<bool> {
        let inp = attention_features(&p, &e.tokens)?;
        Ok(eval_attention(&fit.head, &inp.outputs, &inp.values)?.label == e.label)
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    let attn = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;

    // vanilla model with as many hidden states as the memory model has emission columns
    let vseed = derive_seed(seed, tags::FAMILY);
    let vh = case.mem_size * case.n_hidden();
    let v = random_hmm(vseed, vh, s.n_vocab)?;
    let vtask = make_task(vseed, vh, TASK_NONZEROS.min(vh))?;
    let vd = gen_dataset(Source::Vanilla { params: &v, target: VanillaTarget::MaskedFirst }, &vtask, s.splits, derive_seed(vseed, tags::DATA), exec)?;
    let feats = |xs: &[Example]| map(exec, xs, |e| masked_first_feature(&v, &e.tokens)).into_iter().collect::<Result<Vec<_>>>();
    let train_f = feats(&vd.train)?;
    let labels: Vec<u8> = vd.train.iter().map(|e| e.label).collect();
    let head = train_linear_head(exec, &train_f, &labels, &cfg)?.head;
    let test_labels: Vec<u8> = vd.test.iter().map(|e| e.label).collect();
    let van = accuracy(&head, &feats(&vd.test)?, &test_labels);

    let n = ds.test.len();
    let rows = vec![
        TrialRow::new(&group, t, "attention", attn, n),
        TrialRow::new(&group, t, "vanilla", van, vd.test.len()),
        TrialRow::new(&group, t, "selected_candidate", fit.selected as f64, fit.val_accuracy.len()),
        TrialRow::new(&group, t, "balance", ds.balance, ds.train.len() + ds.val.len() + n),
    ];
    let mem_verdicts = vec![check_regularity(&p.transition, &p.start), check_nondegenerate_emissions(&p.emission, tol).verdict];
    let van_verdicts = vec![check_regularity(&v.transition, &v.start), check_nondegenerate_emissions(&v.emission, tol).verdict];
    let models = vec![
        ModelRecord { group: group.clone(), trial: t, seed, digest: digest(Model::MemHmm(p))?, verdicts: mem_verdicts },
        ModelRecord { group: format!("{group}_vanilla"), trial: t, seed: vseed, digest: digest(Model::Hmm(v))?, verdicts: van_verdicts },
    ];
    Ok(Outcome { rows, models, checks: Vec::new() })
}
