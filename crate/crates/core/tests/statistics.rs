mod common;

use approx::assert_abs_diff_eq;
use common::{brute_auc, brute_delong_variance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selective_kd::eval::{auc, delong_ci, delong_paired_test, delong_variance, metrics_from_scores, placements, ScoredStack};
use selective_kd::{Domain, Error, Split};

fn tied_scores(rng: &mut ChaCha8Rng, len: std::ops::Range<usize>, shift: f64) -> Vec<f64> {
    let len = rng.gen_range(len);
    // coarse grid so ties are common
    (0..len).map(|_| ((rng.gen::<f64>() + shift) * 8.0).floor() / 8.0).collect()
}

#[test]
fn auc_matches_pair_counting_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let pos = tied_scores(&mut rng, 1..30, 0.2);
        let neg = tied_scores(&mut rng, 1..30, 0.0);
        assert_eq!(auc(&pos, &neg).unwrap(), brute_auc(&pos, &neg));
    }
}

#[test]
fn placements_average_to_the_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let pos = tied_scores(&mut rng, 2..25, 0.1);
        let neg = tied_scores(&mut rng, 2..25, 0.0);
        let p = placements(&pos, &neg).unwrap();
        let m10 = p.v10.iter().sum::<f64>() / pos.len() as f64;
        let m01 = p.v01.iter().sum::<f64>() / neg.len() as f64;
        assert_abs_diff_eq!(m10, p.auc, epsilon = 1e-12);
        assert_abs_diff_eq!(m01, p.auc, epsilon = 1e-12);
        assert_abs_diff_eq!(delong_variance(&p), brute_delong_variance(&pos, &neg), epsilon = 1e-12);
    }
}

#[test]
fn auc_edge_cases() {
    assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
    assert_eq!(auc(&[0.1], &[0.9]).unwrap(), 0.0);
    assert_eq!(auc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
    assert!(matches!(auc::<f64>(&[], &[0.2]), Err(Error::Statistics(_))));
    assert!(matches!(auc(&[0.3], &[]), Err(Error::Statistics(_))));
}

#[test]
fn interval_brackets_the_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pos: Vec<f64> = (0..40).map(|_| rng.gen::<f64>() + 0.3).collect();
    let neg: Vec<f64> = (0..40).map(|_| rng.gen::<f64>()).collect();
    let ci = delong_ci(&pos, &neg, 0.95).unwrap();
    assert!(!ci.degenerate);
    assert!(ci.ci_low < ci.auc && ci.auc < ci.ci_high);
    let wider = delong_ci(&pos, &neg, 0.99).unwrap();
    assert!(wider.ci_low <= ci.ci_low && wider.ci_high >= ci.ci_high);
    // half-width is z * sd
    assert_abs_diff_eq!((ci.ci_high - ci.ci_low) / 2.0, 1.959_963_985 * ci.variance.sqrt(), epsilon = 1e-6);
}

#[test]
fn perfect_separation_gives_a_degenerate_interval() {
    let ci = delong_ci(&[0.9, 0.8, 0.95], &[0.1, 0.2, 0.3], 0.95).unwrap();
    assert!(ci.degenerate);
    assert_eq!((ci.ci_low, ci.auc, ci.ci_high), (1.0, 1.0, 1.0));
    assert!(delong_ci(&[0.9], &[0.1, 0.2], 0.95).is_err());
}

#[test]
fn paired_test_on_identical_scores_is_not_significant() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let labels: Vec<u8> = (0..60).map(|i| u8::from(i % 3 == 0)).collect();
    let s: Vec<f64> = labels.iter().map(|&l| rng.gen::<f64>() + 0.4 * l as f64).collect();
    let t = delong_paired_test(&s, &s, &labels).unwrap();
    assert_eq!(t.auc_a, t.auc_b);
    assert_eq!(t.z, 0.0);
    assert_eq!(t.p_value, 1.0);
}

#[test]
fn paired_test_detects_a_clear_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 2 == 0)).collect();
    let good: Vec<f64> = labels.iter().map(|&l| rng.gen::<f64>() + 0.8 * l as f64).collect();
    let noise: Vec<f64> = labels.iter().map(|_| rng.gen::<f64>()).collect();
    let t = delong_paired_test(&good, &noise, &labels).unwrap();
    assert!(t.auc_a > t.auc_b);
    assert!(t.z > 0.0);
    assert!(t.p_value < 1e-6);
    let swapped = delong_paired_test(&noise, &good, &labels).unwrap();
    assert_abs_diff_eq!(swapped.z, -t.z, epsilon = 1e-12);
    assert_abs_diff_eq!(swapped.p_value, t.p_value, epsilon = 1e-15);
}

#[test]
fn paired_test_rejects_bad_input() {
    assert!(matches!(delong_paired_test(&[0.1, 0.2], &[0.1], &[0, 1]), Err(Error::InvalidArgument(_))));
    assert!(matches!(delong_paired_test(&[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], &[0, 1, 1]), Err(Error::Statistics(_))));
}

#[test]
fn per_domain_metrics_and_pooled_row() {
    let mk = |id: &str, domain, label, score| ScoredStack { stack_id: id.into(), domain, label, score };
    let scores = vec![
        mk("a1", Domain::A, 1, 0.9),
        mk("a2", Domain::A, 0, 0.2),
        mk("a3", Domain::A, 0, 0.95),
        mk("b1", Domain::B, 1, 0.4),
        mk("b2", Domain::B, 0, 0.6),
        mk("v1", Domain::B, 1, 0.1),
    ];
    let r = metrics_from_scores(&scores[..5], Some(Split::Test)).unwrap();
    assert_eq!(r.auc("A"), Some(0.5));
    assert_eq!(r.auc("B"), Some(0.0));
    let pooled = brute_auc(&[0.9, 0.4], &[0.2, 0.95, 0.6]);
    assert_eq!(r.auc("all"), Some(pooled));
    assert_eq!(r.domains["all"].n_pos, 2);
    assert_eq!(r.domains["all"].n_neg, 3);
    // a domain with one class has no AUC but still reports counts
    let only_pos = metrics_from_scores(&scores[5..], Some(Split::Test)).unwrap();
    assert_eq!(only_pos.auc("B"), None);
    assert_eq!(only_pos.domains["B"].n_pos, 1);
}
