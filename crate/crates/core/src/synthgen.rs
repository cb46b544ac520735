//! Synthetic slice-stack generator with per-device appearance shifts.
//!
//! Every slice is a smooth background with a few slowly varying tissue bumps.
//! Cancer stacks add a bright isotropic Gaussian lesion visible on a short run
//! of consecutive slices with a triangular amplitude profile; benign stacks add
//! a dimmer distractor of the same form. Device domains then apply a blur,
//! a gain, a stripe texture and extra noise before the shared detector noise.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    split_dataset_by, AnnotationLevel, Dataset, Domain, SliceRecord, SplitRatios, StackRecord, Subgroup,
};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub contrast_gain: f32,
    /// Stripe cycles across the image width.
    pub texture_frequency: f32,
    pub texture_amplitude: f32,
    pub noise_sigma: f32,
    /// Point-spread blur applied before the gain, pixels.
    #[serde(default)]
    pub blur_sigma: f32,
}

impl DomainShift {
    pub const IDENTITY: DomainShift =
        DomainShift { contrast_gain: 1.0, texture_frequency: 0.0, texture_amplitude: 0.0, noise_sigma: 0.0, blur_sigma: 0.0 };

    fn validate(&self) -> Result<()> {
        if !(self.contrast_gain > 0.0) {
            return Err(Error::Config(format!("contrast gain must be > 0, got {}", self.contrast_gain)));
        }
        if !(self.noise_sigma >= 0.0 && self.texture_amplitude >= 0.0 && self.texture_frequency >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::Config("domain shift sigmas, texture amplitude and frequency must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupCounts {
    pub cancer: usize,
    pub benign: usize,
    pub normal: usize,
}

impl SubgroupCounts {
    pub fn uniform(n: usize) -> Self {
        Self { cancer: n, benign: n, normal: n }
    }

    pub fn get(&self, g: Subgroup) -> usize {
        match g {
            Subgroup::Cancer => self.cancer,
            Subgroup::Benign => self.benign,
            Subgroup::Normal => self.normal,
        }
    }
}

/// Annotation level given to stacks outside the fully annotated domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeakMode {
    Weak,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub slices_per_stack: (usize, usize),
    pub lesion_span: (usize, usize),
    /// Gaussian sigma of the lesion footprint, pixels.
    pub lesion_radius: (f32, f32),
    pub lesion_contrast: (f32, f32),
    pub benign_contrast_ratio: (f32, f32),
    pub background_level: f32,
    pub tissue_bumps: usize,
    pub tissue_amplitude: f32,
    pub noise_floor: f32,
    pub counts: BTreeMap<Domain, SubgroupCounts>,
    pub domain_shift: BTreeMap<Domain, DomainShift>,
    /// Stacks of this domain are fully annotated; all others get `weak_mode`.
    pub annotated_domain: Domain,
    pub weak_mode: WeakMode,
    pub split: SplitRatios,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let counts = Domain::ALL.iter().map(|&d| (d, SubgroupCounts::uniform(40))).collect();
        let domain_shift = [
            (Domain::A, DomainShift { contrast_gain: 1.0, texture_frequency: 0.0, texture_amplitude: 0.0, noise_sigma: 0.0, blur_sigma: 0.0 }),
            (Domain::B, DomainShift { contrast_gain: 0.75, texture_frequency: 3.0, texture_amplitude: 0.04, noise_sigma: 0.04, blur_sigma: 1.2 }),
            (Domain::C, DomainShift { contrast_gain: 0.85, texture_frequency: 5.0, texture_amplitude: 0.05, noise_sigma: 0.05, blur_sigma: 1.6 }),
        ]
        .into_iter()
        .collect();
        Self {
            image_size: (32, 32),
            slices_per_stack: (12, 24),
            lesion_span: (3, 5),
            lesion_radius: (1.5, 3.0),
            lesion_contrast: (0.15, 0.30),
            benign_contrast_ratio: (0.4, 0.6),
            background_level: 0.35,
            tissue_bumps: 4,
            tissue_amplitude: 0.10,
            noise_floor: 0.03,
            counts,
            domain_shift,
            annotated_domain: Domain::A,
            weak_mode: WeakMode::Weak,
            split: SplitRatios { train: 0.4, val: 0.1, test: 0.5 },
        }
    }
}

fn ordered<T: PartialOrd + std::fmt::Debug>(name: &str, r: &(T, T)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::Config(format!("{name} range {r:?} is reversed")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("image size {h}x{w} is too small")));
        }
        ordered("slices_per_stack", &self.slices_per_stack)?;
        ordered("lesion_span", &self.lesion_span)?;
        ordered("lesion_radius", &self.lesion_radius)?;
        ordered("lesion_contrast", &self.lesion_contrast)?;
        ordered("benign_contrast_ratio", &self.benign_contrast_ratio)?;
        if self.lesion_span.0 == 0 {
            return Err(Error::Config("lesion span must be at least one slice".into()));
        }
        if self.lesion_span.1 > self.slices_per_stack.0 {
            return Err(Error::Config(format!(
                "maximum lesion span {} exceeds minimum stack length {}",
                self.lesion_span.1, self.slices_per_stack.0
            )));
        }
        if !(self.lesion_radius.0 > 0.0) || 4.0 * self.lesion_radius.1 + 2.0 >= h.min(w) as f32 {
            return Err(Error::Config("lesion radius must be positive and fit inside the image".into()));
        }
        if !(self.noise_floor >= 0.0 && self.tissue_amplitude >= 0.0) {
            return Err(Error::Config("noise floor and tissue amplitude must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return Err(Error::Config("background level must lie in [0, 1]".into()));
        }
        for shift in self.domain_shift.values() {
            shift.validate()?;
        }
        if !self.counts.contains_key(&self.annotated_domain) {
            return Err(Error::Config(format!("annotated domain {} has no stacks", self.annotated_domain)));
        }
        for (d, c) in &self.counts {
            for g in Subgroup::ALL {
                if c.get(g) == 0 {
                    return Err(Error::Config(format!("domain {d} has zero {} stacks", g.as_str())));
                }
            }
        }
        self.split.validate()
    }

    pub fn shift_for(&self, domain: Domain) -> DomainShift {
        self.domain_shift.get(&domain).copied().unwrap_or(DomainShift::IDENTITY)
    }
}

/// Separable Gaussian blur with edge clamping. `sigma == 0` copies the input.
pub fn gaussian_blur(image: &Image<f32>, sigma: f32) -> Image<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let (h, w) = image.shape();
    let tap = |n: usize, i: usize, d: isize| (i as isize + d).clamp(0, n as isize - 1) as usize;
    let rows = Image::from_fn(h, w, |r, c| {
        (-radius..=radius).zip(&kernel).map(|(d, k)| k * image.get(r, tap(w, c, d))).sum::<f32>() / norm
    });
    Image::from_fn(h, w, |r, c| (-radius..=radius).zip(&kernel).map(|(d, k)| k * rows.get(tap(h, r, d), c)).sum::<f32>() / norm)
}

/// Applies a device appearance shift (blur, gain, stripe texture, noise);
/// output is clipped to `[0, 1]`.
pub fn apply_domain_shift(image: &Image<f32>, shift: &DomainShift, rng: &mut Rng) -> Image<f32> {
    let image = &gaussian_blur(image, shift.blur_sigma);
    let (h, w) = image.shape();
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();
    let k = std::f32::consts::TAU * shift.texture_frequency / w.max(h) as f32;
    Image::from_fn(h, w, |r, c| {
        let mut v = shift.contrast_gain * image.get(r, c);
        if shift.texture_amplitude > 0.0 {
            v += shift.texture_amplitude * (k * (cos_t * c as f32 + sin_t * r as f32) + phase).sin();
        }
        if shift.noise_sigma > 0.0 {
            let z: f32 = StandardNormal.sample(rng);
            v += shift.noise_sigma * z;
        }
        v.clamp(0.0, 1.0)
    })
}

struct Bump {
    row: f32,
    col: f32,
    sigma: f32,
}

impl Bump {
    fn value(&self, r: usize, c: usize) -> f32 {
        let dr = r as f32 - self.row;
        let dc = c as f32 - self.col;
        (-(dr * dr + dc * dc) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

struct TissueBump {
    bump: Bump,
    amplitude: f32,
    center_slice: f32,
    depth_sigma: f32,
}

/// Slice offsets of a span of `len` slices around the peak, and the
/// triangular amplitude profile over them.
fn span_profile(len: usize, peak: usize, n_slices: usize, rng: &mut Rng) -> Vec<(usize, f32)> {
    let before = if len % 2 == 1 { (len - 1) / 2 } else { len / 2 - usize::from(rng.gen_bool(0.5)) };
    let after = len - 1 - before;
    let reach = before.max(after) as f32 + 1.0;
    let start = peak - before;
    debug_assert!(peak + after < n_slices);
    (start..=peak + after).map(|k| (k, 1.0 - (k as f32 - peak as f32).abs() / reach)).collect()
}

fn lesion_placement(cfg: &SynthConfig, n_slices: usize, rng: &mut Rng) -> (Bump, Vec<(usize, f32)>) {
    let (h, w) = cfg.image_size;
    let sigma = rng.gen_range(cfg.lesion_radius.0..=cfg.lesion_radius.1);
    let margin = (2.0 * sigma).ceil() + 1.0;
    let row = rng.gen_range(margin..=(h as f32 - 1.0 - margin));
    let col = rng.gen_range(margin..=(w as f32 - 1.0 - margin));
    let len = rng.gen_range(cfg.lesion_span.0..=cfg.lesion_span.1);
    let before_max = len / 2;
    let after_max = len - 1 - (len - 1) / 2;
    let peak = rng.gen_range(before_max..n_slices - after_max);
    let profile = span_profile(len, peak, n_slices, rng);
    (Bump { row, col, sigma }, profile)
}

/// Generates one stack. Deterministic given `rng_seed`.
pub fn generate_stack(
    cfg: &SynthConfig,
    id: &str,
    subgroup: Subgroup,
    domain: Domain,
    rng_seed: u64,
) -> Result<StackRecord> {
    cfg.validate()?;
    let mut rng = seed::rng(rng_seed, &[]);
    let (h, w) = cfg.image_size;
    let n_slices = rng.gen_range(cfg.slices_per_stack.0..=cfg.slices_per_stack.1);

    let tissue: Vec<TissueBump> = (0..cfg.tissue_bumps)
        .map(|_| TissueBump {
            bump: Bump {
                row: rng.gen_range(0.0..h as f32),
                col: rng.gen_range(0.0..w as f32),
                sigma: rng.gen_range(3.5..7.0),
            },
            amplitude: rng.gen_range(-cfg.tissue_amplitude..=cfg.tissue_amplitude),
            center_slice: rng.gen_range(0.0..n_slices as f32),
            depth_sigma: rng.gen_range(2.0..6.0),
        })
        .collect();

    let finding = match subgroup {
        Subgroup::Normal => None,
        Subgroup::Cancer | Subgroup::Benign => {
            let mut contrast = rng.gen_range(cfg.lesion_contrast.0..=cfg.lesion_contrast.1);
            if subgroup == Subgroup::Benign {
                contrast *= rng.gen_range(cfg.benign_contrast_ratio.0..=cfg.benign_contrast_ratio.1);
            }
            let (bump, profile) = lesion_placement(cfg, n_slices, &mut rng);
            Some((bump, contrast, profile))
        }
    };

    let shift = cfg.shift_for(domain);
    let mut slices = Vec::with_capacity(n_slices);
    for k in 0..n_slices {
        let weights: Vec<f32> = tissue
            .iter()
            .map(|t| {
                let dz = (k as f32 - t.center_slice) / t.depth_sigma;
                t.amplitude * (-0.5 * dz * dz).exp()
            })
            .collect();
        let lesion_amp = finding
            .as_ref()
            .and_then(|(_, contrast, profile)| profile.iter().find(|(s, _)| *s == k).map(|(_, a)| contrast * a));
        let clean = Image::from_fn(h, w, |r, c| {
            let mut v = cfg.background_level;
            for (t, wgt) in tissue.iter().zip(&weights) {
                v += wgt * t.bump.value(r, c);
            }
            if let (Some((bump, _, _)), Some(a)) = (&finding, lesion_amp) {
                v += a * bump.value(r, c);
            }
            v.clamp(0.0, 1.0)
        });
        let mut image = apply_domain_shift(&clean, &shift, &mut rng);
        // detector noise comes after the device point-spread
        if cfg.noise_floor > 0.0 {
            image = image.map(|v| (v + cfg.noise_floor * Distribution::<f32>::sample(&StandardNormal, &mut rng)).clamp(0.0, 1.0));
        }
        let image = image.quantize_u8();
        slices.push(SliceRecord { stack_id: id.to_string(), index: k, image, mask: None });
    }

    let label = subgroup.breast_label();
    let mut annotated_slice_index = None;
    if subgroup == Subgroup::Cancer {
        let (bump, _, profile) = finding.as_ref().expect("cancer stacks carry a lesion");
        let peak = profile.iter().find(|(_, a)| *a == 1.0).map(|(k, _)| *k).expect("profile has a peak");
        // footprint where the bump exceeds half its peak
        let mask: Mask = Image::from_fn(h, w, |r, c| u8::from(bump.value(r, c) > 0.5));
        slices[peak].mask = Some(mask);
        annotated_slice_index = Some(peak);
    }
    Ok(StackRecord {
        id: id.to_string(),
        domain,
        breast_label: Some(label),
        annotation_level: AnnotationLevel::Full,
        slices,
        annotated_slice_index,
    })
}

fn relabel(stack: &mut StackRecord, level: AnnotationLevel) {
    stack.annotation_level = level;
    if level != AnnotationLevel::Full {
        stack.annotated_slice_index = None;
        for s in &mut stack.slices {
            s.mask = None;
        }
    }
    if level == AnnotationLevel::None {
        stack.breast_label = None;
    }
}

pub fn stack_id(domain: Domain, subgroup: Subgroup, i: usize) -> String {
    format!("{domain}-{}-{i:04}", subgroup.as_str())
}

/// Generates every stack of `cfg` and assigns splits stratified by
/// (domain, subgroup).
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut stacks = Vec::new();
    let mut subgroups = BTreeMap::new();
    let mut truth = BTreeMap::new();
    let mut ordinal = 0u64;
    for (&domain, counts) in &cfg.counts {
        for g in Subgroup::ALL {
            for i in 0..counts.get(g) {
                let id = stack_id(domain, g, i);
                let mut stack = generate_stack(cfg, &id, g, domain, seed::derive(seed, &[ordinal]))?;
                ordinal += 1;
                let level = if domain == cfg.annotated_domain {
                    AnnotationLevel::Full
                } else {
                    match cfg.weak_mode {
                        WeakMode::Weak => AnnotationLevel::Weak,
                        WeakMode::None => AnnotationLevel::None,
                    }
                };
                relabel(&mut stack, level);
                subgroups.insert(id.clone(), g);
                truth.insert(id, g.breast_label());
                stacks.push(stack);
            }
        }
    }
    let ds = Dataset::new(stacks, subgroups, truth)?;
    split_dataset_by(&ds, cfg.split, seed, |ds, s| format!("{}/{}", s.domain, ds.index.subgroup[&s.id].as_str()))
}
