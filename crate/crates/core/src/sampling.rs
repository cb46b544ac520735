//! Slice-selection rules: adjacent-slice expansion of annotations, strided
//! negative sampling, confidence-threshold pseudo-label filtering and the
//! per-setting assembly of the training set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{AnnotationLevel, Dataset, Split, StackRecord};
use crate::error::{Error, IoContext, JsonContext, Result};
use crate::losses::LossConfig;

/// Stride used for slices of cancer-negative stacks.
pub const NEGATIVE_STRIDE: usize = 2;

/// The five training regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Fully annotated data only, no distillation. Also the teacher.
    Baseline,
    /// Distillation on every slice of the added data, labels ignored.
    Kd,
    /// Distillation with weak labels: all slices of weak positives, strided weak negatives.
    KdWeak,
    /// Distillation restricted to added slices the teacher scores above `t_noweak`.
    Selective,
    /// Weak positives filtered at `t_weak`, supervised and distilled.
    SelectiveWeak,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::Baseline, Setting::Kd, Setting::KdWeak, Setting::Selective, Setting::SelectiveWeak];

    pub fn uses_teacher(self) -> bool {
        self != Setting::Baseline
    }

    pub fn uses_weak_labels(self) -> bool {
        matches!(self, Setting::KdWeak | Setting::SelectiveWeak)
    }

    pub fn filters(self) -> bool {
        matches!(self, Setting::Selective | Setting::SelectiveWeak)
    }

    /// Kebab-case name used on the command line.
    pub fn cli_name(self) -> &'static str {
        match self {
            Setting::Baseline => "baseline",
            Setting::Kd => "kd",
            Setting::KdWeak => "kd-weak",
            Setting::Selective => "selective",
            Setting::SelectiveWeak => "selective-weak",
        }
    }

    /// Row label in comparison tables; `*` marks use of weak labels.
    pub fn display_name(self) -> &'static str {
        match self {
            Setting::Baseline => "Baseline",
            Setting::Kd => "KD",
            Setting::KdWeak => "KD*",
            Setting::Selective => "SelectiveKD",
            Setting::SelectiveWeak => "SelectiveKD*",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        Setting::ALL
            .into_iter()
            .find(|v| v.cli_name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown setting {s:?}")))
    }
}

/// Teacher classification scores on non-augmented slices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelCache {
    entries: BTreeMap<(String, usize), f32>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    stack_id: String,
    slice_index: usize,
    score: f32,
}

impl PseudoLabelCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a score; rejects values outside `[0, 1]` and duplicate keys.
    pub fn insert(&mut self, stack_id: &str, slice_index: usize, score: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!("pseudo-label score {score} outside [0, 1]")));
        }
        if self.entries.insert((stack_id.to_string(), slice_index), score).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate pseudo-label for {stack_id}[{slice_index}]")));
        }
        Ok(())
    }

    pub fn get(&self, stack_id: &str, slice_index: usize) -> Option<f32> {
        self.entries.get(&(stack_id.to_string(), slice_index)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.keys().map(|(s, k)| (s.as_str(), *k))
    }

    /// Scores of one stack, keyed by slice index.
    pub fn stack_scores(&self, stack: &StackRecord) -> Result<BTreeMap<usize, f32>> {
        (0..stack.n_slices())
            .map(|k| {
                self.get(&stack.id, k)
                    .map(|s| (k, s))
                    .ok_or_else(|| Error::CacheMiss { stack_id: stack.id.clone(), slice_index: k })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<CacheEntry> = self
            .entries
            .iter()
            .map(|((s, k), v)| CacheEntry { stack_id: s.clone(), slice_index: *k, score: *v })
            .collect();
        std::fs::write(path, crate::datamodel::pretty_json(&rows, "pseudo-label cache")?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<CacheEntry> =
            serde_json::from_slice(&std::fs::read(path).at(path)?).json_ctx("pseudo-label cache")?;
        let mut cache = Self::new();
        for r in rows {
            cache.insert(&r.stack_id, r.slice_index, r.score)?;
        }
        Ok(cache)
    }
}

/// One selected training slice and the loss terms it participates in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSelection {
    pub stack_id: String,
    pub slice_index: usize,
    pub use_sup_clf: bool,
    pub use_sup_seg: bool,
    pub use_kd: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_clf_label: Option<u8>,
}

impl SliceSelection {
    fn check(&self, stack: &StackRecord) -> Result<()> {
        let bad = |reason: &str| Err(Error::InvalidStack { stack_id: self.stack_id.clone(), reason: reason.to_string() });
        if !(self.use_sup_clf || self.use_sup_seg || self.use_kd) {
            return bad("selection with no active loss");
        }
        if self.use_sup_clf != self.hard_clf_label.is_some() {
            return bad("supervised classification flag without a hard label");
        }
        // FULL positives segment against the annotated mask, FULL negatives
        // against an empty map.
        if self.use_sup_seg && stack.annotation_level != AnnotationLevel::Full {
            return bad("supervised segmentation on a stack without slice annotations");
        }
        Ok(())
    }
}

/// `{k-1, k, k+1}` clipped to the stack.
pub fn expand_annotated_indices(annotated_index: usize, n_slices: usize) -> Result<Vec<usize>> {
    if annotated_index >= n_slices {
        return Err(Error::InvalidArgument(format!("annotated index {annotated_index} outside 0..{n_slices}")));
    }
    Ok((annotated_index.saturating_sub(1)..=(annotated_index + 1).min(n_slices - 1)).collect())
}

pub fn strided_indices(n_slices: usize, stride: usize, offset: usize) -> Result<Vec<usize>> {
    if stride == 0 || offset >= stride {
        return Err(Error::InvalidArgument(format!("invalid stride {stride} / offset {offset}")));
    }
    Ok((offset..n_slices).step_by(stride).collect())
}

/// Indices whose score is strictly above `threshold`.
pub fn pl_select(scores: &BTreeMap<usize, f32>, threshold: f32) -> BTreeSet<usize> {
    scores.iter().filter(|(_, &s)| s > threshold).map(|(&k, _)| k).collect()
}

fn sel(stack: &StackRecord, k: usize, sup_clf: Option<u8>, sup_seg: bool, kd: bool) -> SliceSelection {
    SliceSelection {
        stack_id: stack.id.clone(),
        slice_index: k,
        use_sup_clf: sup_clf.is_some(),
        use_sup_seg: sup_seg,
        use_kd: kd,
        hard_clf_label: sup_clf,
    }
}

/// How a train-split stack participates in a setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    AnnotatedPositive,
    AnnotatedNegative,
    WeakNegative,
    WeakPositiveAllKd,
    WeakPositiveFiltered,
    Unannotated,
    Excluded,
}

fn role(stack: &StackRecord, setting: Setting) -> Role {
    use AnnotationLevel as L;
    match (stack.annotation_level, stack.breast_label, setting) {
        (L::Full, Some(1), _) => Role::AnnotatedPositive,
        (L::Full, _, _) => Role::AnnotatedNegative,
        (_, _, Setting::Baseline) => Role::Excluded,
        (L::Weak, Some(0), s) if s.uses_weak_labels() => Role::WeakNegative,
        (L::Weak, Some(1), Setting::KdWeak) => Role::WeakPositiveAllKd,
        (L::Weak, Some(1), Setting::SelectiveWeak) => Role::WeakPositiveFiltered,
        _ => Role::Unannotated,
    }
}

/// Assembles the training selection for `setting` over the train split.
///
/// Settings that distill require `pl_cache` to cover every slice that is
/// subject to filtering.
pub fn build_training_selection(
    dataset: &Dataset,
    setting: Setting,
    pl_cache: Option<&PseudoLabelCache>,
    cfg: &LossConfig,
) -> Result<Vec<SliceSelection>> {
    let teacher = setting.uses_teacher();
    if teacher && pl_cache.is_none() {
        return Err(Error::InvalidArgument(format!("setting {setting} needs a pseudo-label cache")));
    }
    let scores_of = |stack: &StackRecord| pl_cache.expect("checked above").stack_scores(stack);
    let noweak = cfg.t_noweak as f32;
    let weak = cfg.t_weak as f32;
    // strict gating filters annotated data with the setting's threshold too
    let annotated_threshold = if setting.uses_weak_labels() { weak } else { noweak };

    let mut out = Vec::new();
    for stack in dataset.stacks_in(Split::Train) {
        let r = role(stack, setting);
        let gate = |indices: Vec<usize>, threshold: f32| -> Result<Vec<usize>> {
            let scores = scores_of(stack)?;
            let keep = pl_select(&scores, threshold);
            Ok(indices.into_iter().filter(|k| keep.contains(k)).collect())
        };
        let annotated = |indices: Vec<usize>| -> Result<Vec<usize>> {
            if teacher && cfg.strict_eq1_gating {
                gate(indices, annotated_threshold)
            } else {
                Ok(indices)
            }
        };
        let all: Vec<usize> = (0..stack.n_slices()).collect();
        match r {
            Role::AnnotatedPositive => {
                let k = stack.annotated_slice_index.expect("validated FULL positive");
                for i in annotated(expand_annotated_indices(k, stack.n_slices())?)? {
                    out.push(sel(stack, i, Some(1), true, teacher));
                }
            }
            Role::AnnotatedNegative => {
                for i in annotated(strided_indices(stack.n_slices(), NEGATIVE_STRIDE, 0)?)? {
                    out.push(sel(stack, i, Some(0), true, teacher));
                }
            }
            Role::WeakNegative => {
                let idx = strided_indices(stack.n_slices(), NEGATIVE_STRIDE, 0)?;
                let idx = if cfg.strict_eq1_gating { gate(idx, weak)? } else { idx };
                for i in idx {
                    out.push(sel(stack, i, Some(0), false, true));
                }
            }
            Role::WeakPositiveAllKd => {
                for i in all {
                    out.push(sel(stack, i, None, false, true));
                }
            }
            Role::WeakPositiveFiltered => {
                for i in gate(all, weak)? {
                    out.push(sel(stack, i, Some(1), false, true));
                }
            }
            Role::Unannotated => {
                let idx = if setting.filters() { gate(all, noweak)? } else { all };
                for i in idx {
                    out.push(sel(stack, i, None, false, true));
                }
            }
            Role::Excluded => {}
        }
    }
    let positions = dataset.positions();
    for s in &out {
        s.check(&dataset.stacks[positions[s.stack_id.as_str()]])?;
    }
    Ok(out)
}

/// Slices whose teacher score is consulted by the filters: every slice of the
/// train-split WEAK/NONE stacks, plus FULL stacks under strict gating.
pub fn pseudo_label_scope(dataset: &Dataset, strict_eq1_gating: bool) -> Vec<(&StackRecord, usize)> {
    dataset
        .stacks_in(Split::Train)
        .filter(|s| strict_eq1_gating || s.annotation_level != AnnotationLevel::Full)
        .flat_map(|s| (0..s.n_slices()).map(move |k| (s, k)))
        .collect()
}

/// Writes one JSON object per line.
pub fn write_manifest(selections: &[SliceSelection], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in selections {
        serde_json::to_writer(&mut buf, s).json_ctx("selection manifest")?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&buf).at(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SliceSelection>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).json_ctx("selection manifest"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::testutil::{dataset, stack};
    use crate::datamodel::{Domain, Subgroup};

    #[test]
    fn expansion_examples() {
        assert_eq!(expand_annotated_indices(5, 10).unwrap(), vec![4, 5, 6]);
        assert_eq!(expand_annotated_indices(0, 10).unwrap(), vec![0, 1]);
        assert_eq!(expand_annotated_indices(9, 10).unwrap(), vec![8, 9]);
        assert_eq!(expand_annotated_indices(0, 1).unwrap(), vec![0]);
        assert!(expand_annotated_indices(10, 10).is_err());
    }

    #[test]
    fn stride_examples() {
        assert_eq!(strided_indices(7, 2, 0).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(strided_indices(7, 1, 0).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(strided_indices(6, 2, 1).unwrap(), vec![1, 3, 5]);
        assert!(strided_indices(6, 0, 0).is_err());
        assert!(strided_indices(6, 2, 2).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let scores: BTreeMap<usize, f32> = [(0, 0.05), (1, 0.80), (2, 0.71)].into_iter().collect();
        assert_eq!(pl_select(&scores, 0.7), [1, 2].into_iter().collect());
        assert!(pl_select(&scores, 1.0).is_empty());
        let tie: BTreeMap<usize, f32> = [(0, 0.7)].into_iter().collect();
        assert!(pl_select(&tie, 0.7).is_empty());
    }

    #[test]
    fn baseline_selection_by_hand() {
        let ds = dataset(vec![
            (stack("pos", Domain::A, Subgroup::Cancer, AnnotationLevel::Full, 16, Some(6)), Subgroup::Cancer),
            (stack("neg", Domain::A, Subgroup::Normal, AnnotationLevel::Full, 16, None), Subgroup::Normal),
        ]);
        let s = build_training_selection(&ds, Setting::Baseline, None, &LossConfig::default()).unwrap();
        let pos: Vec<_> = s.iter().filter(|x| x.stack_id == "pos").collect();
        let neg: Vec<_> = s.iter().filter(|x| x.stack_id == "neg").collect();
        assert_eq!(pos.iter().map(|x| x.slice_index).collect::<Vec<_>>(), vec![5, 6, 7]);
        assert!(pos.iter().all(|x| x.use_sup_clf && x.use_sup_seg && !x.use_kd && x.hard_clf_label == Some(1)));
        assert_eq!(neg.iter().map(|x| x.slice_index).collect::<Vec<_>>(), (0..16).step_by(2).collect::<Vec<_>>());
        assert!(neg.iter().all(|x| x.use_sup_clf && x.use_sup_seg && !x.use_kd && x.hard_clf_label == Some(0)));
    }

    fn cache_for(ds: &Dataset, score: impl Fn(&str, usize) -> f32) -> PseudoLabelCache {
        let mut c = PseudoLabelCache::new();
        for s in &ds.stacks {
            for k in 0..s.n_slices() {
                c.insert(&s.id, k, score(&s.id, k)).unwrap();
            }
        }
        c
    }

    #[test]
    fn filtered_weak_positive_can_be_empty() {
        let ds = dataset(vec![
            (stack("a", Domain::A, Subgroup::Cancer, AnnotationLevel::Full, 5, Some(2)), Subgroup::Cancer),
            (stack("w", Domain::B, Subgroup::Cancer, AnnotationLevel::Weak, 6, None), Subgroup::Cancer),
        ]);
        let cfg = LossConfig::default();
        let cache = cache_for(&ds, |_, _| cfg.t_weak as f32);
        let s = build_training_selection(&ds, Setting::SelectiveWeak, Some(&cache), &cfg).unwrap();
        assert!(s.iter().all(|x| x.stack_id != "w"));
    }

    #[test]
    fn missing_cache_is_an_error() {
        let ds = dataset(vec![
            (stack("a", Domain::A, Subgroup::Cancer, AnnotationLevel::Full, 5, Some(2)), Subgroup::Cancer),
            (stack("w", Domain::B, Subgroup::Cancer, AnnotationLevel::Weak, 6, None), Subgroup::Cancer),
        ]);
        let cfg = LossConfig::default();
        assert!(build_training_selection(&ds, Setting::Kd, None, &cfg).is_err());
        let mut partial = PseudoLabelCache::new();
        partial.insert("w", 0, 0.9).unwrap();
        assert!(matches!(
            build_training_selection(&ds, Setting::Selective, Some(&partial), &cfg),
            Err(Error::CacheMiss { .. })
        ));
    }

    #[test]
    fn cache_rejects_duplicates_and_out_of_range() {
        let mut c = PseudoLabelCache::new();
        c.insert("s", 0, 0.5).unwrap();
        assert!(c.insert("s", 0, 0.4).is_err());
        assert!(c.insert("s", 1, 1.5).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        c.save(&p).unwrap();
        assert_eq!(PseudoLabelCache::load(&p).unwrap(), c);
    }

    #[test]
    fn setting_names_parse() {
        for s in Setting::ALL {
            assert_eq!(s.cli_name().parse::<Setting>().unwrap(), s);
        }
        assert_eq!("selective_weak".parse::<Setting>().unwrap(), Setting::SelectiveWeak);
        assert!("fancy".parse::<Setting>().is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let sel = vec![
            SliceSelection { stack_id: "a".into(), slice_index: 1, use_sup_clf: true, use_sup_seg: false, use_kd: true, hard_clf_label: Some(1) },
            SliceSelection { stack_id: "b".into(), slice_index: 0, use_sup_clf: false, use_sup_seg: false, use_kd: true, hard_clf_label: None },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&sel, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        assert_eq!(read_manifest(&p).unwrap(), sel);
    }
}
