//! Stack/slice/annotation types, the on-disk dataset layout, stratified
//! splitting and annotation-fraction subsampling.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! index.json                 schema_version + one entry per stack
//! eval_truth.json            stack_id -> breast label (ground truth sidecar)
//! stacks/<id>/slice_<k>.pgm  8-bit binary PGM, value v stored as round(255 v)
//! stacks/<id>/mask_<k>.pgm   {0, 255}; present only where a mask exists
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, JsonContext, Result};
use crate::image::{Image, Mask};
use crate::seed;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AnnotationLevel {
    /// Slice-level lesion contour on the most visible slice.
    Full,
    /// Breast-level label only.
    Weak,
    None,
}

/// Synthetic acquisition device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
    C,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::A, Domain::B, Domain::C];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
            Domain::C => "C",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subgroup {
    Cancer,
    Benign,
    Normal,
}

impl Subgroup {
    pub const ALL: [Subgroup; 3] = [Subgroup::Cancer, Subgroup::Benign, Subgroup::Normal];

    pub fn as_str(self) -> &'static str {
        match self {
            Subgroup::Cancer => "cancer",
            Subgroup::Benign => "benign",
            Subgroup::Normal => "normal",
        }
    }

    pub fn breast_label(self) -> u8 {
        u8::from(self == Subgroup::Cancer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub stack_id: String,
    pub index: usize,
    pub image: Image<f32>,
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackRecord {
    pub id: String,
    pub domain: Domain,
    pub breast_label: Option<u8>,
    pub annotation_level: AnnotationLevel,
    pub slices: Vec<SliceRecord>,
    pub annotated_slice_index: Option<usize>,
}

impl StackRecord {
    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn is_positive(&self) -> bool {
        self.breast_label == Some(1)
    }

    pub fn is_negative(&self) -> bool {
        self.breast_label == Some(0)
    }

    /// Mask of the annotated slice, when this is a fully annotated positive stack.
    pub fn lesion_mask(&self) -> Option<&Mask> {
        self.annotated_slice_index.and_then(|k| self.slices.get(k)).and_then(|s| s.mask.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidStack { stack_id: self.id.clone(), reason });
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            return bad("identifier must be a nonempty path-safe name".into());
        }
        if self.slices.is_empty() {
            return bad("stack has no slices".into());
        }
        let shape = self.slices[0].image.shape();
        for (k, s) in self.slices.iter().enumerate() {
            if s.index != k {
                return bad(format!("slice indices are not contiguous: position {k} holds index {}", s.index));
            }
            if s.stack_id != self.id {
                return bad(format!("slice {k} belongs to stack {:?}", s.stack_id));
            }
            if s.image.shape() != shape {
                return Err(Error::ShapeMismatch {
                    what: format!("{}/slice_{k}", self.id),
                    expected: shape,
                    actual: s.image.shape(),
                });
            }
            if !s.image.all_in_unit_range() {
                return bad(format!("slice {k} has values outside [0, 1]"));
            }
            if let Some(m) = &s.mask {
                if m.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        what: format!("{}/mask_{k}", self.id),
                        expected: shape,
                        actual: m.shape(),
                    });
                }
                if !m.is_binary() {
                    return bad(format!("mask {k} is not binary"));
                }
            }
        }
        if let Some(label) = self.breast_label {
            if label > 1 {
                return bad(format!("breast label {label} not in {{0, 1}}"));
            }
        }
        let masked: Vec<usize> = self.slices.iter().filter(|s| s.mask.is_some()).map(|s| s.index).collect();
        match self.annotation_level {
            AnnotationLevel::Full => match (self.breast_label, self.annotated_slice_index) {
                (None, _) => return bad("FULL stack without breast label".into()),
                (Some(1), None) => return bad("FULL positive stack without annotated slice".into()),
                (Some(1), Some(k)) => {
                    if k >= self.slices.len() {
                        return bad(format!("annotated slice {k} out of range"));
                    }
                    if masked != [k] {
                        return bad(format!("expected a mask exactly on annotated slice {k}, found {masked:?}"));
                    }
                    if self.slices[k].mask.as_ref().is_some_and(|m| m.count_ones() == 0) {
                        return bad(format!("annotated slice {k} has an empty mask"));
                    }
                }
                (Some(_), idx) => {
                    if idx.is_some() || !masked.is_empty() {
                        return bad("FULL negative stack carries lesion annotations".into());
                    }
                }
            },
            AnnotationLevel::Weak => {
                if self.breast_label.is_none() {
                    return bad("WEAK stack without breast label".into());
                }
                if self.annotated_slice_index.is_some() || !masked.is_empty() {
                    return bad("WEAK stack carries slice annotations".into());
                }
            }
            AnnotationLevel::None => {
                if self.breast_label.is_some() || self.annotated_slice_index.is_some() || !masked.is_empty() {
                    return bad("NONE stack exposes labels".into());
                }
            }
        }
        Ok(())
    }

    /// Removes every label and mask, keeping the pixels.
    fn hide_annotations(&mut self) {
        self.annotation_level = AnnotationLevel::None;
        self.breast_label = None;
        self.annotated_slice_index = None;
        for s in &mut self.slices {
            s.mask = None;
        }
    }
}

/// Split and subgroup assignment keyed by stack id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub split: BTreeMap<String, Split>,
    pub subgroup: BTreeMap<String, Subgroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stacks: Vec<StackRecord>,
    pub index: DatasetIndex,
    /// Breast-level ground truth for every stack, including ones whose labels
    /// are hidden from training.
    pub eval_truth: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.as_array();
        if v.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::InvalidArgument(format!("split ratios must be positive, got {v:?}")));
        }
        if (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios must sum to 1, got {v:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl Dataset {
    /// Builds a dataset with every stack in the train split. Ground truth is
    /// taken from `truth` where given, falling back to visible breast labels.
    pub fn new(stacks: Vec<StackRecord>, subgroups: BTreeMap<String, Subgroup>, truth: BTreeMap<String, u8>) -> Result<Self> {
        let split = stacks.iter().map(|s| (s.id.clone(), Split::Train)).collect();
        let mut eval_truth = truth;
        for s in &stacks {
            if let Some(l) = s.breast_label {
                eval_truth.entry(s.id.clone()).or_insert(l);
            }
        }
        let ds = Self { stacks, index: DatasetIndex { split, subgroup: subgroups }, eval_truth };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut shape = None;
        for s in &self.stacks {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidStack { stack_id: s.id.clone(), reason: "duplicate identifier".into() });
            }
            s.validate()?;
            let sh = s.slices[0].image.shape();
            match shape {
                None => shape = Some(sh),
                Some(expected) if expected != sh => {
                    return Err(Error::ShapeMismatch { what: format!("{}/slice_0", s.id), expected, actual: sh });
                }
                _ => {}
            }
            let missing = |what: &str| Error::InvalidStack { stack_id: s.id.clone(), reason: format!("no {what} assignment") };
            if !self.index.split.contains_key(&s.id) {
                return Err(missing("split"));
            }
            let Some(&group) = self.index.subgroup.get(&s.id) else {
                return Err(missing("subgroup"));
            };
            let Some(&truth) = self.eval_truth.get(&s.id) else {
                return Err(missing("ground-truth"));
            };
            if truth != group.breast_label() || s.breast_label.is_some_and(|l| l != truth) {
                return Err(Error::InvalidStack {
                    stack_id: s.id.clone(),
                    reason: format!("labels disagree: visible {:?}, truth {truth}, subgroup {}", s.breast_label, group.as_str()),
                });
            }
        }
        for (what, keys) in [
            ("split", self.index.split.keys().collect::<Vec<_>>()),
            ("subgroup", self.index.subgroup.keys().collect()),
            ("ground-truth", self.eval_truth.keys().collect()),
        ] {
            if let Some(extra) = keys.into_iter().find(|k| !seen.contains(k.as_str())) {
                return Err(Error::InvalidStack { stack_id: extra.clone(), reason: format!("{what} entry for unknown stack") });
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.stacks.first().map(|s| s.slices[0].image.shape())
    }

    pub fn stack(&self, id: &str) -> Option<&StackRecord> {
        self.stacks.iter().find(|s| s.id == id)
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.index.split.get(id).copied()
    }

    pub fn subgroup_of(&self, id: &str) -> Option<Subgroup> {
        self.index.subgroup.get(id).copied()
    }

    pub fn truth_of(&self, id: &str) -> Option<u8> {
        self.eval_truth.get(id).copied()
    }

    pub fn stacks_in(&self, split: Split) -> impl Iterator<Item = &StackRecord> {
        self.stacks.iter().filter(move |s| self.split_of(&s.id) == Some(split))
    }

    /// Id lookup table into `stacks`.
    pub fn positions(&self) -> BTreeMap<&str, usize> {
        self.stacks.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect()
    }

    /// SHA-256 over the exact bytes [`save_dataset`] would write.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (rel, bytes) in self.serialize_tree()? {
            h.update(rel.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(hex::encode(h.finalize()))
    }

    fn serialize_tree(&self) -> Result<Vec<(String, Vec<u8>)>> {
        self.validate()?;
        let entries: Vec<IndexEntry> = self
            .stacks
            .iter()
            .map(|s| IndexEntry {
                id: s.id.clone(),
                domain: s.domain,
                annotation_level: s.annotation_level,
                breast_label: s.breast_label,
                annotated_slice_index: s.annotated_slice_index,
                n_slices: s.n_slices(),
                subgroup: self.index.subgroup[&s.id],
                split: self.index.split[&s.id],
            })
            .collect();
        let index = IndexFile { schema_version: SCHEMA_VERSION, stacks: entries };
        let mut files = vec![
            ("index.json".to_string(), pretty_json(&index, "index.json")?),
            ("eval_truth.json".to_string(), pretty_json(&self.eval_truth, "eval_truth.json")?),
        ];
        for s in &self.stacks {
            for sl in &s.slices {
                let (h, w) = sl.image.shape();
                files.push((format!("stacks/{}/slice_{}.pgm", s.id, sl.index), encode_pgm(w, h, &sl.image.to_u8_levels())));
                if let Some(m) = &sl.mask {
                    let bytes: Vec<u8> = m.data().iter().map(|&v| v * 255).collect();
                    files.push((format!("stacks/{}/mask_{}.pgm", s.id, sl.index), encode_pgm(w, h, &bytes)));
                }
            }
        }
        Ok(files)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    schema_version: u32,
    stacks: Vec<IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    domain: Domain,
    annotation_level: AnnotationLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    breast_label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotated_slice_index: Option<usize>,
    n_slices: usize,
    subgroup: Subgroup,
    split: Split,
}

pub(crate) fn pretty_json<T: Serialize + ?Sized>(value: &T, context: &str) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).json_ctx(context)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses an 8-bit binary PGM, returning `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |reason: &str| Error::Pgm { path: path.to_path_buf(), reason: reason.to_string() };
    let mut pos = 0usize;
    let mut next_token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token()? != "P5" {
        return Err(err("not a binary PGM (P5)"));
    }
    let mut num = || -> Result<usize> { next_token()?.parse().map_err(|_| err("non-numeric header field")) };
    let (width, height, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(err("only 8-bit PGM (maxval 255) is supported"));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let expected = width * height;
    if bytes.len() < start || bytes.len() - start != expected {
        return Err(err("raster size does not match header"));
    }
    Ok((height, width, bytes[start..].to_vec()))
}

/// Writes `dataset` to `dir`, which must be absent or empty.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let files = dataset.serialize_tree()?;
    // stale slices from an earlier dataset would otherwise survive
    if dir.exists() && fs::read_dir(dir).at(dir)?.next().is_some() {
        return Err(Error::InvalidArgument(format!("{} exists and is not empty", dir.display())));
    }
    fs::create_dir_all(dir).at(dir)?;
    for (rel, bytes) in files {
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).at(parent)?;
        }
        fs::write(&path, bytes).at(&path)?;
    }
    Ok(dir.to_path_buf())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.json");
    if !index_path.is_file() {
        return Err(Error::MissingFile(index_path));
    }
    let index: IndexFile = serde_json::from_slice(&fs::read(&index_path).at(&index_path)?).json_ctx("index.json")?;
    if index.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported schema_version {}", index.schema_version)));
    }
    let truth_path = dir.join("eval_truth.json");
    let eval_truth: BTreeMap<String, u8> = if truth_path.is_file() {
        serde_json::from_slice(&fs::read(&truth_path).at(&truth_path)?).json_ctx("eval_truth.json")?
    } else {
        // hand-authored directories may omit the sidecar when nothing is hidden
        index.stacks.iter().filter_map(|e| e.breast_label.map(|l| (e.id.clone(), l))).collect()
    };

    let mut stacks = Vec::with_capacity(index.stacks.len());
    let mut ds_index = DatasetIndex::default();
    for e in index.stacks {
        let stack_dir = dir.join("stacks").join(&e.id);
        let mut slices = Vec::with_capacity(e.n_slices);
        for k in 0..e.n_slices {
            let p = stack_dir.join(format!("slice_{k}.pgm"));
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
            let (h, w, px) = decode_pgm(&fs::read(&p).at(&p)?, &p)?;
            let image = Image::from_vec(h, w, px.into_iter().map(|b| b as f32 / 255.0).collect()).expect("raster size checked");
            slices.push(SliceRecord { stack_id: e.id.clone(), index: k, image, mask: None });
        }
        if stack_dir.is_dir() {
            let mut names: Vec<String> = fs::read_dir(&stack_dir)
                .at(&stack_dir)?
                .filter_map(|d| d.ok().and_then(|d| d.file_name().into_string().ok()))
                .collect();
            names.sort();
            for name in names {
                let Some(rest) = name.strip_suffix(".pgm") else { continue };
                let (kind, k) = match rest.split_once('_') {
                    Some((kind, k)) => (kind, k.parse::<usize>().ok()),
                    None => continue,
                };
                let Some(k) = k else { continue };
                if k >= e.n_slices {
                    return Err(Error::InvalidStack {
                        stack_id: e.id.clone(),
                        reason: format!("{name} lies outside the contiguous range 0..{}", e.n_slices),
                    });
                }
                if kind != "mask" {
                    continue;
                }
                let p = stack_dir.join(&name);
                let (h, w, px) = decode_pgm(&fs::read(&p).at(&p)?, &p)?;
                let expected = slices[k].image.shape();
                if (h, w) != expected {
                    return Err(Error::ShapeMismatch { what: format!("{}/mask_{k}", e.id), expected, actual: (h, w) });
                }
                let bits: Option<Vec<u8>> = px
                    .into_iter()
                    .map(|b| match b {
                        0 => Some(0),
                        255 => Some(1),
                        _ => None,
                    })
                    .collect();
                let bits = bits.ok_or_else(|| Error::Pgm { path: p.clone(), reason: "mask values must be 0 or 255".into() })?;
                slices[k].mask = Some(Image::from_vec(h, w, bits).expect("raster size checked"));
            }
        }
        ds_index.split.insert(e.id.clone(), e.split);
        ds_index.subgroup.insert(e.id.clone(), e.subgroup);
        stacks.push(StackRecord {
            id: e.id,
            domain: e.domain,
            breast_label: e.breast_label,
            annotation_level: e.annotation_level,
            slices,
            annotated_slice_index: e.annotated_slice_index,
        });
    }
    let ds = Dataset { stacks, index: ds_index, eval_truth };
    ds.validate()?;
    Ok(ds)
}

/// Largest-remainder apportionment of `n` items over `ratios`; ties go to the
/// earlier split.
pub fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = (q + 1e-9).floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    let frac = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| frac(b).partial_cmp(&frac(a)).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Stratified split by subgroup.
pub fn split_dataset(dataset: &Dataset, ratios: SplitRatios, seed: u64) -> Result<Dataset> {
    for g in Subgroup::ALL {
        if !dataset.index.subgroup.values().any(|&s| s == g) {
            return Err(Error::InvalidArgument(format!("subgroup {} is empty", g.as_str())));
        }
    }
    split_dataset_by(dataset, ratios, seed, |ds, s| ds.index.subgroup[&s.id].as_str().to_string())
}

/// Stratified split over an arbitrary stratum key.
pub fn split_dataset_by(
    dataset: &Dataset,
    ratios: SplitRatios,
    seed: u64,
    stratum: impl Fn(&Dataset, &StackRecord) -> String,
) -> Result<Dataset> {
    ratios.validate()?;
    let mut strata: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for s in &dataset.stacks {
        strata.entry(stratum(dataset, s)).or_default().push(s.id.as_str());
    }
    let mut split = BTreeMap::new();
    for (key, mut ids) in strata {
        if ids.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "stratum {key} has {} stacks; all three splits need at least one each",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut seed::rng(seed, &[seed::tag(&key)]));
        let [n_train, n_val, _] = apportion(ids.len(), &ratios.as_array());
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            split.insert(id.to_string(), s);
        }
    }
    let mut out = dataset.clone();
    out.index.split = split;
    Ok(out)
}

/// Ids of the train-split FULL stacks that keep annotations at `fraction`.
///
/// Within each subgroup the candidates are put in a seeded order and the first
/// `round(fraction * n)` are kept, so kept sets grow monotonically with
/// `fraction` for a fixed seed.
pub fn kept_annotation_ids(dataset: &Dataset, fraction: f64, seed: u64) -> Result<BTreeSet<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("annotation fraction must lie in (0, 1], got {fraction}")));
    }
    let mut by_group: BTreeMap<Subgroup, Vec<&str>> = BTreeMap::new();
    for s in dataset.stacks_in(Split::Train).filter(|s| s.annotation_level == AnnotationLevel::Full) {
        by_group.entry(dataset.index.subgroup[&s.id]).or_default().push(&s.id);
    }
    let mut kept = BTreeSet::new();
    for (group, mut ids) in by_group {
        ids.sort_unstable();
        ids.shuffle(&mut seed::rng(seed, &[seed::tag("subsample"), group as u64]));
        let k = ((fraction * ids.len() as f64) + 1e-9).round() as usize;
        kept.extend(ids.into_iter().take(k).map(str::to_string));
    }
    Ok(kept)
}

/// Downgrades all but a `fraction` of annotated train stacks (per subgroup) to
/// [`AnnotationLevel::None`]. Ground truth stays in `eval_truth`.
pub fn subsample_annotations(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let kept = kept_annotation_ids(dataset, fraction, seed)?;
    let mut out = dataset.clone();
    for s in &mut out.stacks {
        let candidate = out.index.split[&s.id] == Split::Train && s.annotation_level == AnnotationLevel::Full;
        if candidate && !kept.contains(&s.id) {
            s.hide_annotations();
        }
    }
    Ok(out)
}

/// Exposes the breast-level ground truth of unannotated train stacks as weak
/// labels.
pub fn reveal_weak_labels(dataset: &Dataset) -> Dataset {
    let mut out = dataset.clone();
    for s in &mut out.stacks {
        if s.annotation_level == AnnotationLevel::None && out.index.split[&s.id] == Split::Train {
            if let Some(&label) = out.eval_truth.get(&s.id) {
                s.annotation_level = AnnotationLevel::Weak;
                s.breast_label = Some(label);
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn stack(id: &str, domain: Domain, group: Subgroup, level: AnnotationLevel, n: usize, annotated: Option<usize>) -> StackRecord {
        let slices = (0..n)
            .map(|k| {
                let image = Image::from_fn(4, 4, |r, c| ((r * 4 + c + k) % 7) as f32 / 255.0);
                let mask = (level == AnnotationLevel::Full && annotated == Some(k)).then(|| Image::from_fn(4, 4, |r, c| u8::from(r == 1 && c < 2)));
                SliceRecord { stack_id: id.to_string(), index: k, image, mask }
            })
            .collect();
        let breast_label = (level != AnnotationLevel::None).then_some(group.breast_label());
        StackRecord {
            id: id.to_string(),
            domain,
            breast_label,
            annotation_level: level,
            slices,
            annotated_slice_index: if level == AnnotationLevel::Full { annotated } else { None },
        }
    }

    pub fn dataset(stacks: Vec<(StackRecord, Subgroup)>) -> Dataset {
        let subgroups = stacks.iter().map(|(s, g)| (s.id.clone(), *g)).collect();
        let truth = stacks.iter().map(|(s, g)| (s.id.clone(), g.breast_label())).collect();
        Dataset::new(stacks.into_iter().map(|(s, _)| s).collect(), subgroups, truth).unwrap()
    }

    /// `per_group` FULL stacks of each subgroup in domain A.
    pub fn balanced(per_group: usize) -> Dataset {
        let mut v = Vec::new();
        for g in Subgroup::ALL {
            for i in 0..per_group {
                let annotated = (g == Subgroup::Cancer).then_some(1);
                v.push((stack(&format!("A-{}-{i:04}", g.as_str()), Domain::A, g, AnnotationLevel::Full, 3, annotated), g));
            }
        }
        dataset(v)
    }
}
