#![allow(dead_code)]

use std::collections::BTreeMap;

use selective_kd::datamodel::SliceRecord;
use selective_kd::image::Image;
use selective_kd::{AnnotationLevel, Dataset, Domain, StackRecord, Subgroup};

/// A small stack with deterministic pixel content; the annotated slice of a
/// FULL positive carries a two-pixel mask.
pub fn stack(id: &str, domain: Domain, group: Subgroup, level: AnnotationLevel, n: usize, side: usize) -> StackRecord {
    let annotated = (level == AnnotationLevel::Full && group == Subgroup::Cancer).then_some(n / 2);
    let slices = (0..n)
        .map(|k| {
            let image = Image::from_fn(side, side, |r, c| ((r * side + c + 3 * k) % 11) as f32 / 16.0);
            let mask = (annotated == Some(k)).then(|| Image::from_fn(side, side, |r, c| u8::from(r == 1 && c < 2)));
            SliceRecord { stack_id: id.to_string(), index: k, image, mask }
        })
        .collect();
    StackRecord {
        id: id.to_string(),
        domain,
        breast_label: (level != AnnotationLevel::None).then_some(group.breast_label()),
        annotation_level: level,
        slices,
        annotated_slice_index: annotated,
    }
}

pub fn dataset(stacks: Vec<(StackRecord, Subgroup)>) -> Dataset {
    let subgroups: BTreeMap<String, Subgroup> = stacks.iter().map(|(s, g)| (s.id.clone(), *g)).collect();
    let truth = stacks.iter().map(|(s, g)| (s.id.clone(), g.breast_label())).collect();
    Dataset::new(stacks.into_iter().map(|(s, _)| s).collect(), subgroups, truth).expect("valid dataset")
}

/// Exhaustive pair count `P(pos > neg) + P(pos == neg) / 2`.
pub fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in pos {
        for &n in neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// DeLong variance from placement values computed by direct double loops.
pub fn brute_delong_variance(pos: &[f64], neg: &[f64]) -> f64 {
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let v10: Vec<f64> = pos.iter().map(|&p| neg.iter().map(|&q| psi(p, q)).sum::<f64>() / n).collect();
    let v01: Vec<f64> = neg.iter().map(|&q| pos.iter().map(|&p| psi(p, q)).sum::<f64>() / m).collect();
    let a = v10.iter().sum::<f64>() / m;
    let s10 = v10.iter().map(|v| (v - a) * (v - a)).sum::<f64>() / (m - 1.0);
    let s01 = v01.iter().map(|v| (v - a) * (v - a)).sum::<f64>() / (n - 1.0);
    s10 / m + s01 / n
}
