//! Default-scale training runs over five seeds; these take a few minutes.

use selective_kd::eval::{auc, evaluate, ALL_DOMAINS};
use selective_kd::harness::{self, ExperimentConfig};
use selective_kd::synthgen;
use selective_kd::train::{compute_pseudo_labels, train_student, train_teacher, NoObserver};
use selective_kd::{Dataset, Domain, Model, Setting, Split, Subgroup};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Peak lesion slices of held-out A cancer stacks against every slice of
/// held-out A benign and normal stacks.
fn slice_auc_on_a(model: &Model, ds: &Dataset) -> f64 {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for s in ds.stacks_in(Split::Test).filter(|s| s.domain == Domain::A) {
        let score = |k: usize| f64::from(model.forward(&s.slices[k].image).unwrap().clf);
        match (ds.subgroup_of(&s.id).unwrap(), s.annotated_slice_index) {
            (Subgroup::Cancer, Some(k)) => pos.push(score(k)),
            (Subgroup::Cancer, None) => panic!("{} has no annotated slice", s.id),
            _ => neg.extend((0..s.slices.len()).map(score)),
        }
    }
    auc(&pos, &neg).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn generator_is_learnable_shifted_and_distillation_does_not_hurt() {
    let cfg = ExperimentConfig::default();
    let options = cfg.effective_train_options().unwrap();
    let (mut slice_a, mut gap, mut base_all, mut kd_all) = (vec![], vec![], vec![], vec![]);
    for seed in SEEDS {
        let ds = synthgen::generate_dataset(&cfg.synth, seed).unwrap();
        let teacher = train_teacher::<f32>(&ds, &cfg.optimizer, &cfg.loss, &options, seed, &mut NoObserver).unwrap().model;
        slice_a.push(slice_auc_on_a(&teacher, &ds));
        let (metrics, _) = evaluate(&teacher, &ds, Split::Test).unwrap();
        gap.push(metrics.auc("A").unwrap() - metrics.auc("C").unwrap());
        base_all.push(metrics.auc(ALL_DOMAINS).unwrap());

        let cache = compute_pseudo_labels(&teacher, &ds, false).unwrap();
        let student = train_student(&teacher, &ds, Setting::Kd, &cache, &cfg.optimizer, &cfg.loss, &options, seed, &mut NoObserver).unwrap();
        kd_all.push(evaluate(&student.model, &ds, Split::Test).unwrap().0.auc(ALL_DOMAINS).unwrap());
    }
    println!("slice AUC on A {slice_a:.4?}\nA - C stack AUC {gap:.4?}\nall-domain baseline {base_all:.4?} kd {kd_all:.4?}");
    // every seed, not just the mean, must learn the annotated domain
    assert!(slice_a.iter().all(|&a| a >= 0.85), "slice AUC on A {slice_a:?}");
    assert!(mean(&gap) >= 0.03, "A - C gap {gap:?}");
    assert!(mean(&kd_all) >= mean(&base_all), "KD {kd_all:?} vs baseline {base_all:?}");
}

#[test]
fn full_annotation_beats_a_tenth_on_average() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/sweep_a_only.json");
    let cfg = ExperimentConfig::load(std::path::Path::new(path)).unwrap();
    let result = harness::run_sweep_settings(&cfg, &[0.1, 1.0], &SEEDS, &[Setting::Baseline], None, |_| {}).unwrap();
    assert_eq!(result.failures().count(), 0);
    let (low, high) = (result.mean_auc(Setting::Baseline, 0.1).unwrap(), result.mean_auc(Setting::Baseline, 1.0).unwrap());
    println!("baseline mean AUC at 0.1 {low:.4}, at 1.0 {high:.4}");
    assert!(high >= low, "{high} < {low}");
}
