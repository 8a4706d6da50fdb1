//! Structural properties of the assumption checks and the exact labels.

use hmm_recovery::assumptions::{check_nondegenerate_emissions, check_recoverable, check_span_disjoint};
use hmm_recovery::downstream::*;
use hmm_recovery::enumerate::{enumerate_hidden_posteriors, mem_path_sums};
use hmm_recovery::families::build_marker_mem_family;
use hmm_recovery::linalg::{max_abs_diff, RANK_TOL};
use hmm_recovery::model::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| vals[(i * cols + j) % vals.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_verdict_is_gap_above_tolerance(rows in 1usize..6, cols in 1usize..6, vals in prop::collection::vec(-1.0f64..1.0, 36), dup in any::<bool>()) {
        let mut m = matrix(rows, cols, &vals);
        if dup && cols > 1 {
            let c = m.column(0).clone_owned();
            m.set_column(cols - 1, &c);
        }
        let check = check_nondegenerate_emissions(&m, RANK_TOL);
        let gap = check.verdict.gap.unwrap();
        prop_assert_eq!(check.verdict.pass, gap > RANK_TOL);
        prop_assert_eq!(check.left_inverse.is_some(), check.verdict.pass);
    }

    #[test]
    fn passing_span_certificates_replay(vals in prop::collection::vec(-1.0f64..1.0, 64), split in 1usize..4, comp in 0usize..3) {
        let rows = 8;
        let total = (split + 2 + comp).min(rows);
        let m = matrix(rows, total, &vals);
        let primary = vec![m.columns(0, split).clone_owned(), m.columns(split, 2.min(total - split)).clone_owned()];
        let complement = m.columns(split + 2.min(total - split), total - split - 2.min(total - split)).clone_owned();
        let check = check_span_disjoint(&primary, &complement, RANK_TOL);
        if let Some(cert) = &check.certificate {
            prop_assert!(check.verdict.pass);
            prop_assert!(cert.verify().is_ok(), "{:?}", cert.verify());
        } else {
            prop_assert!(!check.verdict.pass);
        }
    }

    #[test]
    fn concentration_is_monotone_in_the_target_set(seed in any::<u64>(), extra in 1usize..4) {
        let f = build_marker_mem_family(seed % 50, 1, 2, 4, 8).unwrap();
        let x = sample_mem_sequence(&f.params, 10, seed).unwrap().tokens;
        let small = vec![f.target_state];
        let mut big = small.clone();
        big.extend((1..=extra).filter(|&h| h < f.params.n_hidden()));
        let a = concentrated_positions(&f.params, &small, &x).unwrap();
        let b = concentrated_positions(&f.params, &big, &x).unwrap();
        prop_assert!(a.iter().all(|i| b.contains(i)));
        if membership_r(&f.params, &small, &x).unwrap() {
            prop_assert!(membership_r(&f.params, &big, &x).unwrap());
        }
    }

    #[test]
    fn labels_ignore_positive_rescaling_of_the_task(seed in any::<u64>(), c in 1e-3f64..1e3, t in 1usize..10) {
        let p = random_hmm(seed, 4, 6).unwrap();
        let task = make_task(seed, 4, 3).unwrap();
        let mut scaled = task.clone();
        scaled.weights *= c;
        let x = sample_sequence(&p, t, seed).unwrap().tokens;
        for target in [VanillaTarget::InitialState, VanillaTarget::MaskedFirst] {
            let a = label_vanilla(&p, &task, &x, target).unwrap();
            let b = label_vanilla(&p, &scaled, &x, target).unwrap();
            prop_assert_eq!(a.label, b.label);
            let post = vanilla_posterior(&p, &x, target).unwrap();
            prop_assert_eq!(a.label, task.two_row_label(&post));
        }
    }

    #[test]
    fn vanilla_posteriors_match_enumeration(seed in any::<u64>(), nh in 1usize..=5, t in 1usize..=6) {
        let p = random_hmm(seed, nh, 5).unwrap();
        let x = sample_sequence(&p, t, seed).unwrap().tokens;
        let full: Vec<Option<usize>> = x.iter().map(|&z| Some(z)).collect();
        let post = vanilla_posterior(&p, &x, VanillaTarget::InitialState).unwrap();
        prop_assert!((post.sum() - 1.0).abs() <= 1e-12);
        let slow = enumerate_hidden_posteriors(&p, &full, DEFAULT_CAP).unwrap().unwrap();
        prop_assert!(max_abs_diff(&post, &slow[0]) <= 1e-10);

        let mut masked = full.clone();
        masked[0] = None;
        let post = vanilla_posterior(&p, &x, VanillaTarget::MaskedFirst).unwrap();
        let slow = enumerate_hidden_posteriors(&p, &masked, DEFAULT_CAP).unwrap().unwrap();
        prop_assert!(max_abs_diff(&post, &slow[1]) <= 1e-10);
    }

    #[test]
    fn memory_posteriors_match_enumeration(seed in any::<u64>(), n in 1usize..=2, m in 2usize..=3, t in 1usize..=5) {
        let p = random_mem_hmm(seed, n, m, 2, 5).unwrap();
        let x = sample_mem_sequence(&p, t, seed).unwrap().tokens;
        let full: Vec<Option<usize>> = x.iter().map(|&z| Some(z)).collect();
        let sums = mem_path_sums(&p, &full, DEFAULT_CAP).unwrap();
        for cell in 0..n {
            let post = memory_posterior(&p, &x, cell, MemoryTarget::Full).unwrap();
            prop_assert!((post.sum() - 1.0).abs() <= 1e-12);
            let mut slow = DVector::zeros(m);
            for c in 0..p.n_mem_configs() {
                slow[p.cell_value(c, cell)] += sums.joint[0].row(c).sum() / sums.total;
            }
            prop_assert!(max_abs_diff(&post, &slow) <= 1e-10);
        }
        let loo = hidden_loo_posteriors(&p, &x).unwrap();
        for (k, post) in loo.iter().enumerate() {
            let mut obs = full.clone();
            obs[k] = None;
            let s = mem_path_sums(&p, &obs, DEFAULT_CAP).unwrap();
            let slow = s.joint[k + 1].row_sum().transpose() / s.total;
            prop_assert!(max_abs_diff(post, &slow) <= 1e-10);
        }
    }
}

#[test]
fn marker_family_certificate_replays() {
    for seed in 0..5 {
        let f = build_marker_mem_family(seed, 1, 3, 4, 10).unwrap();
        let check = check_recoverable(&f.params, f.j_star, &f.s_star, RANK_TOL);
        assert!(check.verdict.pass);
        check.certificate.unwrap().verify().unwrap();
    }
}

#[test]
fn dataset_round_trips_through_text() {
    let p = random_hmm(3, 4, 6).unwrap();
    let task = make_task(3, 4, 3).unwrap();
    let splits = Splits { n_train: 20, n_val: 5, n_test: 5, t_len: 8 };
    let ds = gen_dataset(Source::Vanilla { params: &p, target: VanillaTarget::InitialState }, &task, splits, 11, hmm_recovery::par::Exec::Sequential).unwrap();
    let mut buf = Vec::new();
    write_dataset(&ds, &mut buf).unwrap();
    let back = read_dataset(&buf[..]).unwrap();
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(buf, again);
}
