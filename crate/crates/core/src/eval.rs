//! Stack scoring, ROC AUC, DeLong confidence intervals and paired DeLong
//! tests, and per-domain evaluation tables.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datamodel::{Dataset, Domain, Split, StackRecord};
use crate::error::{Error, IoContext, Result};
use crate::model::DualHeadModel;
use crate::Scalar;

/// Key of the pooled row in per-domain tables.
pub const ALL_DOMAINS: &str = "all";

/// Maximum slice classification score over the stack.
pub fn stack_score<T: Scalar>(model: &DualHeadModel<T>, stack: &StackRecord) -> Result<T> {
    if stack.slices.is_empty() {
        return Err(Error::InvalidStack { stack_id: stack.id.clone(), reason: "cannot score an empty stack".into() });
    }
    let mut best = T::neg_infinity();
    for s in &stack.slices {
        best = best.max(model.forward(&s.image.cast())?.clf);
    }
    Ok(best)
}

/// Midranks (1-based, ties averaged) of `values`.
fn midranks<T: Scalar>(values: &[T]) -> Result<Vec<T>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Statistics("scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![T::zero(); values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share rank (i + j) / 2 + 1
        let r = T::lit((i + j) as f64 / 2.0 + 1.0);
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    Ok(ranks)
}

/// DeLong structural components.
#[derive(Debug, Clone, PartialEq)]
pub struct Placements<T> {
    pub auc: T,
    /// Per positive: fraction of negatives it outranks (ties count half).
    pub v10: Vec<T>,
    /// Per negative: fraction of positives that outrank it.
    pub v01: Vec<T>,
}

fn check_classes<T>(pos: &[T], neg: &[T]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Statistics(format!("need both classes, got {} positives and {} negatives", pos.len(), neg.len())));
    }
    Ok(())
}

/// Placement values in `O((m + n) log(m + n))` from midranks.
pub fn placements<T: Scalar>(pos: &[T], neg: &[T]) -> Result<Placements<T>> {
    check_classes(pos, neg)?;
    let (m, n) = (pos.len(), neg.len());
    let pooled: Vec<T> = pos.iter().chain(neg).copied().collect();
    let r_all = midranks(&pooled)?;
    let r_pos = midranks(pos)?;
    let r_neg = midranks(neg)?;
    let (mf, nf) = (T::lit(m as f64), T::lit(n as f64));
    // numerators are half-integers, so the Mann-Whitney U below is exact
    let v10_num: Vec<T> = (0..m).map(|i| r_all[i] - r_pos[i]).collect();
    let u: T = v10_num.iter().copied().sum();
    let v10 = v10_num.into_iter().map(|x| x / nf).collect();
    let v01 = (0..n).map(|j| T::one() - (r_all[m + j] - r_neg[j]) / mf).collect();
    Ok(Placements { auc: u / (mf * nf), v10, v01 })
}

/// Mann-Whitney AUC: `P(pos > neg) + 0.5 P(pos == neg)`.
pub fn auc<T: Scalar>(pos: &[T], neg: &[T]) -> Result<T> {
    Ok(placements(pos, neg)?.auc)
}

fn covariance<T: Scalar>(a: &[T], mean_a: T, b: &[T], mean_b: T) -> T {
    let denom = T::lit((a.len().max(2) - 1) as f64);
    a.iter().zip(b).map(|(&x, &y)| (x - mean_a) * (y - mean_b)).sum::<T>() / denom
}

/// DeLong variance `S10 / m + S01 / n` of the AUC estimate.
pub fn delong_variance<T: Scalar>(p: &Placements<T>) -> T {
    let (m, n) = (T::lit(p.v10.len() as f64), T::lit(p.v01.len() as f64));
    covariance(&p.v10, p.auc, &p.v10, p.auc) / m + covariance(&p.v01, p.auc, &p.v01, p.auc) / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucInterval {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub variance: f64,
    /// Zero DeLong variance; the interval collapses to the point estimate.
    pub degenerate: bool,
}

fn z_quantile(level: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0)
}

/// Normal-approximation DeLong interval, clipped to `[0, 1]`.
pub fn delong_ci<T: Scalar>(pos: &[T], neg: &[T], level: f64) -> Result<AucInterval> {
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::Statistics("DeLong intervals need at least two cases per class".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    let p = placements(pos, neg)?;
    let var = delong_variance(&p).as_f64();
    let a = p.auc.as_f64();
    if var <= 0.0 {
        return Ok(AucInterval { auc: a, ci_low: a, ci_high: a, variance: 0.0, degenerate: true });
    }
    let half = z_quantile(level) * var.sqrt();
    Ok(AucInterval { auc: a, ci_low: (a - half).max(0.0), ci_high: (a + half).min(1.0), variance: var, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Two-sided paired DeLong test of `H0: AUC_a = AUC_b` on the same cases.
pub fn delong_paired_test<T: Scalar>(scores_a: &[T], scores_b: &[T], labels: &[u8]) -> Result<PairedTest> {
    if scores_a.len() != scores_b.len() || scores_a.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "paired test needs equal lengths, got {}, {} and {} labels",
            scores_a.len(),
            scores_b.len(),
            labels.len()
        )));
    }
    let split = |s: &[T]| -> (Vec<T>, Vec<T>) {
        let pos = s.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(v, _)| *v).collect();
        let neg = s.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(v, _)| *v).collect();
        (pos, neg)
    };
    let (pa, na) = split(scores_a);
    let (pb, nb) = split(scores_b);
    if pa.len() < 2 || na.len() < 2 {
        return Err(Error::Statistics("paired test needs at least two cases of each label".into()));
    }
    let a = placements(&pa, &na)?;
    let b = placements(&pb, &nb)?;
    let (m, n) = (T::lit(pa.len() as f64), T::lit(na.len() as f64));
    let s10 = covariance(&a.v10, a.auc, &a.v10, a.auc) + covariance(&b.v10, b.auc, &b.v10, b.auc)
        - T::lit(2.0) * covariance(&a.v10, a.auc, &b.v10, b.auc);
    let s01 = covariance(&a.v01, a.auc, &a.v01, a.auc) + covariance(&b.v01, b.auc, &b.v01, b.auc)
        - T::lit(2.0) * covariance(&a.v01, a.auc, &b.v01, b.auc);
    let var = (s10 / m + s01 / n).as_f64();
    let diff = (a.auc - b.auc).as_f64();
    let (z, p_value) = if var > 0.0 {
        let z = diff / var.sqrt();
        (z, 2.0 * Normal::new(0.0, 1.0).expect("standard normal").sf(z.abs()))
    } else if diff == 0.0 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY.copysign(diff), 0.0)
    };
    Ok(PairedTest { auc_a: a.auc.as_f64(), auc_b: b.auc.as_f64(), z, p_value: p_value.clamp(0.0, 1.0) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStack {
    pub stack_id: String,
    pub domain: Domain,
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    /// `None` when the group lacks one of the classes.
    pub auc: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: Option<Split>,
    /// Keyed by domain name plus [`ALL_DOMAINS`].
    pub domains: BTreeMap<String, DomainMetrics>,
    /// `"<model_a> vs <model_b>"` -> p-value.
    #[serde(default)]
    pub pairwise: BTreeMap<String, f64>,
}

impl EvalResult {
    pub fn auc(&self, key: &str) -> Option<f64> {
        self.domains.get(key).and_then(|d| d.auc)
    }

    /// Mean of the per-domain AUCs over `domains`, skipping undefined ones.
    pub fn mean_auc(&self, domains: &[Domain]) -> Option<f64> {
        let v: Vec<f64> = domains.iter().filter_map(|d| self.auc(d.as_str())).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn group_metrics(scored: &[&ScoredStack], level: f64) -> Result<DomainMetrics> {
    let pos: Vec<f64> = scored.iter().filter(|s| s.label == 1).map(|s| s.score).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| s.label != 1).map(|s| s.score).collect();
    let mut out = DomainMetrics { auc: None, ci_low: None, ci_high: None, n_pos: pos.len(), n_neg: neg.len(), degenerate: false };
    if pos.is_empty() || neg.is_empty() {
        return Ok(out);
    }
    if pos.len() >= 2 && neg.len() >= 2 {
        let ci = delong_ci(&pos, &neg, level)?;
        out.auc = Some(ci.auc);
        out.ci_low = Some(ci.ci_low);
        out.ci_high = Some(ci.ci_high);
        out.degenerate = ci.degenerate;
    } else {
        out.auc = Some(auc(&pos, &neg)?);
    }
    Ok(out)
}

/// Per-domain and pooled metrics from stack scores alone.
pub fn metrics_from_scores(scores: &[ScoredStack], split: Option<Split>) -> Result<EvalResult> {
    let mut domains = BTreeMap::new();
    for d in Domain::ALL {
        let group: Vec<&ScoredStack> = scores.iter().filter(|s| s.domain == d).collect();
        if !group.is_empty() {
            domains.insert(d.as_str().to_string(), group_metrics(&group, 0.95)?);
        }
    }
    let all: Vec<&ScoredStack> = scores.iter().collect();
    domains.insert(ALL_DOMAINS.to_string(), group_metrics(&all, 0.95)?);
    Ok(EvalResult { split, domains, pairwise: BTreeMap::new() })
}

/// Scores every stack of `split` with its ground-truth label.
pub fn score_split<T: Scalar>(model: &DualHeadModel<T>, dataset: &Dataset, split: Split) -> Result<Vec<ScoredStack>> {
    let stacks: Vec<&StackRecord> = dataset.stacks_in(split).collect();
    if stacks.is_empty() {
        return Err(Error::InvalidArgument(format!("split {} is empty", split.as_str())));
    }
    stacks
        .par_iter()
        .map(|s| {
            let label = dataset.truth_of(&s.id).ok_or_else(|| Error::InvalidStack { stack_id: s.id.clone(), reason: "no ground truth".into() })?;
            Ok(ScoredStack { stack_id: s.id.clone(), domain: s.domain, label, score: stack_score(model, s)?.as_f64() })
        })
        .collect()
}

pub fn evaluate<T: Scalar>(model: &DualHeadModel<T>, dataset: &Dataset, split: Split) -> Result<(EvalResult, Vec<ScoredStack>)> {
    let scores = score_split(model, dataset, split)?;
    Ok((metrics_from_scores(&scores, Some(split))?, scores))
}

pub fn write_scores_csv(scores: &[ScoredStack], path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Csv { context: path.display().to_string(), message: e.to_string() };
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv { context: path.display().to_string(), message: e.to_string() })?;
    std::fs::File::create(path).at(path)?.write_all(&bytes).at(path)
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredStack>> {
    let err = |e: csv::Error| Error::Csv { context: path.display().to_string(), message: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().collect::<std::result::Result<Vec<ScoredStack>, _>>().map_err(err)
}
