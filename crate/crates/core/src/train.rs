//! Teacher training, pseudo-label computation and student training with the
//! gated distillation loss.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Dataset, StackRecord};
use crate::error::{Error, IoContext, Result};
use crate::image::{Image, Mask};
use crate::losses::{batch_mean, combined_loss_with_grad, LossBreakdown, LossConfig};
use crate::model::{lr_at, ArchDescriptor, DualHeadModel, OptimizerConfig, Prediction, Sgd};
use crate::sampling::{build_training_selection, pseudo_label_scope, PseudoLabelCache, Setting, SliceSelection};
use crate::seed;
use crate::Scalar;

/// One slice prepared for a gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<T> {
    pub stack_id: String,
    pub slice_index: usize,
    /// Non-augmented slice.
    pub x: Image<T>,
    /// Augmented view shared by teacher and student.
    pub x_aug: Image<T>,
    pub hard_clf_label: Option<u8>,
    /// Geometrically transformed full-resolution mask.
    pub hard_seg_mask: Option<Mask>,
    pub use_sup_clf: bool,
    pub use_sup_seg: bool,
    pub use_kd: bool,
}

/// Sampled augmentation. Geometric parts also apply to masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

pub const AUG_NOISE_SIGMA: f64 = 0.02;

impl AugmentParams {
    pub const IDENTITY: AugmentParams =
        AugmentParams { hflip: false, vflip: false, quarter_turns: 0, brightness: 0.0, contrast: 1.0, noise_sigma: 0.0 };

    pub fn sample(rng: &mut seed::Rng, square: bool) -> Self {
        let hflip = rng.gen_bool(0.5);
        let vflip = rng.gen_bool(0.5);
        let quarter_turns = if square { rng.gen_range(0..4u8) } else { 2 * rng.gen_range(0..2u8) };
        Self {
            hflip,
            vflip,
            quarter_turns,
            brightness: rng.gen_range(-0.1..0.1),
            contrast: rng.gen_range(0.8..1.2),
            noise_sigma: AUG_NOISE_SIGMA,
        }
    }

    fn geometric<P: Copy>(&self, img: &Image<P>) -> Image<P> {
        let mut out = img.rotate90(self.quarter_turns);
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        out
    }

    /// Applies the transform; `rng` drives the additive noise only.
    pub fn apply<T: Scalar>(&self, x: &Image<T>, mask: Option<&Mask>, rng: &mut seed::Rng) -> (Image<T>, Option<Mask>) {
        let mut out = self.geometric(x);
        let mean = out.data().iter().copied().sum::<T>() / T::lit(out.len().max(1) as f64);
        let (gain, offset, sigma) = (T::lit(self.contrast), T::lit(self.brightness), T::lit(self.noise_sigma));
        let photometric = self.contrast != 1.0 || self.brightness != 0.0 || self.noise_sigma > 0.0;
        if photometric {
            for v in out.data_mut() {
                let mut y = (*v - mean) * gain + mean + offset;
                if self.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    y += sigma * T::lit(z);
                }
                *v = y.max(T::zero()).min(T::one());
            }
        }
        (out, mask.map(|m| self.geometric(m)))
    }
}

/// Draws one augmentation from `rng_seed` and applies it.
pub fn augment<T: Scalar>(x: &Image<T>, mask: Option<&Mask>, rng_seed: u64) -> (Image<T>, Option<Mask>) {
    let mut rng = seed::rng(rng_seed, &[]);
    let params = AugmentParams::sample(&mut rng, x.height() == x.width());
    params.apply(x, mask, &mut rng)
}

/// Batch-averaged losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub sup_clf: f64,
    pub sup_seg: f64,
    pub kd_clf: f64,
    pub kd_seg: f64,
    pub total: f64,
}

pub fn write_train_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Csv { context: "train log".into(), message: e.to_string() })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv { context: "train log".into(), message: e.to_string() })?;
    std::fs::File::create(path).at(path)?.write_all(&bytes).at(path)
}

pub fn read_train_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv { context: path.display().to_string(), message: e.to_string() })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<LogRow>, _>>()
        .map_err(|e| Error::Csv { context: path.display().to_string(), message: e.to_string() })
}

/// Callbacks invoked sequentially, in batch order, from the training loop.
pub trait TrainObserver<T> {
    /// Whether [`shared_view`](Self::shared_view) should receive copies of the inputs.
    fn wants_views(&self) -> bool {
        false
    }

    /// Inputs given to teacher and student for one distilled example.
    fn shared_view(&mut self, _selection: &SliceSelection, _teacher_input: &Image<T>, _student_input: &Image<T>) {}

    fn example_loss(&mut self, _iteration: usize, _selection: &SliceSelection, _loss: &LossBreakdown<T>) {}

    fn iteration(&mut self, _row: &LogRow) {}
}

pub struct NoObserver;

impl<T> TrainObserver<T> for NoObserver {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub arch: ArchDescriptor,
    /// Initialize the student from the teacher's weights.
    pub warm_start: bool,
    /// Sum per-example gradients in a fixed order.
    pub deterministic: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { arch: ArchDescriptor::default(), warm_start: false, deterministic: true }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Frozen trained model.
    pub model: DualHeadModel<T>,
    pub log: Vec<LogRow>,
    pub selections: Vec<SliceSelection>,
}

struct ExampleResult<T> {
    loss: LossBreakdown<T>,
    grad: Vec<T>,
    views: Option<(Image<T>, Image<T>)>,
}

/// Resolved training inputs of one selection, before augmentation.
fn example_source<T: Scalar>(stack: &StackRecord, sel: &SliceSelection) -> Result<(Image<T>, Option<Mask>)> {
    let slice = stack.slices.get(sel.slice_index).ok_or_else(|| Error::InvalidStack {
        stack_id: stack.id.clone(),
        reason: format!("selected slice {} does not exist", sel.slice_index),
    })?;
    let mask = if sel.use_sup_seg {
        match stack.lesion_mask() {
            Some(m) if stack.is_positive() => Some(m.clone()),
            _ => Some(Mask::filled(slice.image.height(), slice.image.width(), 0)),
        }
    } else {
        None
    };
    Ok((slice.image.cast(), mask))
}

pub fn build_example<T: Scalar>(stack: &StackRecord, sel: &SliceSelection, aug_seed: u64) -> Result<TrainingExample<T>> {
    let (x, mask) = example_source::<T>(stack, sel)?;
    let (x_aug, hard_seg_mask) = augment(&x, mask.as_ref(), aug_seed);
    Ok(TrainingExample {
        stack_id: sel.stack_id.clone(),
        slice_index: sel.slice_index,
        x,
        x_aug,
        hard_clf_label: sel.hard_clf_label,
        hard_seg_mask,
        use_sup_clf: sel.use_sup_clf,
        use_sup_seg: sel.use_sup_seg,
        use_kd: sel.use_kd,
    })
}

fn step_example<T: Scalar>(
    student: &DualHeadModel<T>,
    teacher: Option<&DualHeadModel<T>>,
    example: &TrainingExample<T>,
    loss_cfg: &LossConfig,
    keep_views: bool,
) -> Result<ExampleResult<T>> {
    let student_input = &example.x_aug;
    let (teacher_pred, teacher_input): (Option<Prediction<T>>, Option<&Image<T>>) = if example.use_kd {
        let t = teacher.ok_or_else(|| Error::InvalidArgument("distillation example without a teacher".into()))?;
        let input = &example.x_aug;
        (Some(t.forward(input)?), Some(input))
    } else {
        (None, None)
    };
    let (pred, tape) = student.forward_train(student_input)?;
    let (loss, g) = combined_loss_with_grad(example, teacher_pred.as_ref(), &pred, loss_cfg)?;
    let mut grad = vec![T::zero(); student.n_params()];
    student.backward(&tape, g.clf, &g.seg, &mut grad);
    let views = match (keep_views, teacher_input) {
        (true, Some(t)) => Some((t.clone(), student_input.clone())),
        _ => None,
    };
    Ok(ExampleResult { loss, grad, views })
}

/// Seeded per-epoch permutation stream over `n` items.
struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: None, perm: Vec::new() }
    }

    fn item(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut seed::rng(self.seed, &[seed::tag("epoch"), epoch as u64]));
            self.epoch = Some(epoch);
        }
        self.perm[position % self.n]
    }
}

/// Runs the optimization loop on a fixed selection list.
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Scalar>(
    mut student: DualHeadModel<T>,
    teacher: Option<&DualHeadModel<T>>,
    dataset: &Dataset,
    selections: &[SliceSelection],
    opt_cfg: &OptimizerConfig,
    loss_cfg: &LossConfig,
    options: &TrainOptions,
    seed_value: u64,
    observer: &mut dyn TrainObserver<T>,
) -> Result<(DualHeadModel<T>, Vec<LogRow>)> {
    opt_cfg.validate()?;
    loss_cfg.validate()?;
    if selections.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(t) = teacher {
        if !t.is_frozen() {
            return Err(Error::InvalidArgument("teacher must be frozen".into()));
        }
    }
    let positions = dataset.positions();
    let stacks: Vec<&StackRecord> = selections
        .iter()
        .map(|s| {
            positions.get(s.stack_id.as_str()).map(|&i| &dataset.stacks[i]).ok_or_else(|| Error::InvalidStack {
                stack_id: s.stack_id.clone(),
                reason: "selected stack is not in the dataset".into(),
            })
        })
        .collect::<Result<_>>()?;
    let mut opt = Sgd::new(student.n_params(), opt_cfg.momentum, opt_cfg.weight_decay);
    let mut sampler = BatchSampler::new(selections.len(), seed::derive(seed_value, &[seed::tag("batches")]));
    let keep_views = observer.wants_views();
    let batch = opt_cfg.batch_size;
    let inv_batch = T::one() / T::lit(batch as f64);
    let mut log = Vec::with_capacity(opt_cfg.total_iterations);

    for it in 0..opt_cfg.total_iterations {
        let picks: Vec<usize> = (0..batch).map(|b| sampler.item(it * batch + b)).collect();
        let examples: Vec<TrainingExample<T>> = picks
            .iter()
            .enumerate()
            .map(|(b, &i)| build_example(stacks[i], &selections[i], seed::derive(seed_value, &[seed::tag("augment"), it as u64, b as u64])))
            .collect::<Result<_>>()?;
        let student_ref = &student;
        let run = |ex: &TrainingExample<T>| step_example(student_ref, teacher, ex, loss_cfg, keep_views);

        let (losses, grad, views): (Vec<LossBreakdown<T>>, Vec<T>, Vec<Option<(Image<T>, Image<T>)>>) = if options.deterministic {
            let results: Vec<ExampleResult<T>> = examples.par_iter().map(run).collect::<Result<_>>()?;
            let mut grad = vec![T::zero(); student.n_params()];
            let mut losses = Vec::with_capacity(batch);
            let mut views = Vec::with_capacity(batch);
            for r in results {
                for (g, v) in grad.iter_mut().zip(&r.grad) {
                    *g += *v;
                }
                losses.push(r.loss);
                views.push(r.views);
            }
            (losses, grad, views)
        } else {
            let results: Vec<ExampleResult<T>> = examples.par_iter().map(run).collect::<Result<_>>()?;
            let grad = results
                .par_iter()
                .fold(|| vec![T::zero(); student_ref.n_params()], |mut acc, r| {
                    acc.iter_mut().zip(&r.grad).for_each(|(a, g)| *a += *g);
                    acc
                })
                .reduce(|| vec![T::zero(); student_ref.n_params()], |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += *y);
                    a
                });
            let (losses, views) = results.into_iter().map(|r| (r.loss, r.views)).unzip();
            (losses, grad, views)
        };

        for (b, (loss, view)) in losses.iter().zip(views).enumerate() {
            let sel = &selections[picks[b]];
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration: it, detail: format!("non-finite loss on {}[{}]", sel.stack_id, sel.slice_index) });
            }
            if let Some((t, s)) = view {
                observer.shared_view(sel, &t, &s);
            }
            observer.example_loss(it, sel, loss);
        }
        let grad: Vec<T> = grad.into_iter().map(|g| g * inv_batch).collect();
        let lr = lr_at(it, opt_cfg)?;
        opt.step(&mut student, &grad, T::lit(lr))?;
        let m = batch_mean(&losses);
        let row = LogRow {
            iteration: it,
            lr,
            sup_clf: m.sup_clf.as_f64(),
            sup_seg: m.sup_seg.as_f64(),
            kd_clf: m.kd_clf.as_f64(),
            kd_seg: m.kd_seg.as_f64(),
            total: m.total.as_f64(),
        };
        observer.iteration(&row);
        log.push(row);
    }
    Ok((student.freeze(), log))
}

/// Trains the baseline model on fully annotated data; the result serves as teacher.
pub fn train_teacher<T: Scalar>(
    dataset: &Dataset,
    opt_cfg: &OptimizerConfig,
    loss_cfg: &LossConfig,
    options: &TrainOptions,
    seed_value: u64,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    let selections = build_training_selection(dataset, Setting::Baseline, None, loss_cfg)?;
    let init = DualHeadModel::init(options.arch.clone(), seed::derive(seed_value, &[seed::tag("teacher-init")]))?;
    let (model, log) = fit(init, None, dataset, &selections, opt_cfg, loss_cfg, options, seed::derive(seed_value, &[seed::tag("teacher")]), observer)?;
    Ok(TrainOutcome { model, log, selections })
}

/// Teacher classification scores on the non-augmented slices in filtering scope.
pub fn compute_pseudo_labels<T: Scalar>(teacher: &DualHeadModel<T>, dataset: &Dataset, strict_eq1_gating: bool) -> Result<PseudoLabelCache> {
    if !teacher.is_frozen() {
        return Err(Error::InvalidArgument("pseudo-labels require a frozen teacher".into()));
    }
    let scope = pseudo_label_scope(dataset, strict_eq1_gating);
    let scores: Vec<f32> = scope
        .par_iter()
        .map(|(stack, k)| teacher.forward(&stack.slices[*k].image.cast::<T>()).map(|p| p.clf.as_f64() as f32))
        .collect::<Result<_>>()?;
    let mut cache = PseudoLabelCache::new();
    for ((stack, k), s) in scope.iter().zip(scores) {
        cache.insert(&stack.id, *k, s)?;
    }
    Ok(cache)
}

/// Trains a fresh (or warm-started) student for `setting` against a frozen teacher.
#[allow(clippy::too_many_arguments)]
pub fn train_student<T: Scalar>(
    teacher: &DualHeadModel<T>,
    dataset: &Dataset,
    setting: Setting,
    pl_cache: &PseudoLabelCache,
    opt_cfg: &OptimizerConfig,
    loss_cfg: &LossConfig,
    options: &TrainOptions,
    seed_value: u64,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    if !setting.uses_teacher() {
        return Err(Error::InvalidArgument("the baseline setting has no student".into()));
    }
    let selections = build_training_selection(dataset, setting, Some(pl_cache), loss_cfg)?;
    let init = if options.warm_start {
        let mut m = DualHeadModel::init(teacher.arch().clone(), teacher.seed())?;
        m.params_mut()?.copy_from_slice(teacher.params());
        m.set_iteration(0);
        m
    } else {
        DualHeadModel::init(options.arch.clone(), seed::derive(seed_value, &[seed::tag("student-init")]))?
    };
    let (model, log) = fit(
        init,
        Some(teacher),
        dataset,
        &selections,
        opt_cfg,
        loss_cfg,
        options,
        seed::derive(seed_value, &[seed::tag("student"), setting as u64]),
        observer,
    )?;
    Ok(TrainOutcome { model, log, selections })
}

/// Per-setting slice counts split by which loss terms are active.
pub fn selection_summary(selections: &[SliceSelection]) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for s in selections {
        let key = match (s.use_sup_clf || s.use_sup_seg, s.use_kd) {
            (true, true) => "supervised+kd",
            (true, false) => "supervised",
            (false, true) => "kd_only",
            (false, false) => "none",
        };
        *out.entry(key).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_params_leave_image_unchanged() {
        let x = Image::from_fn(8, 8, |r, c| (r * 8 + c) as f64 / 64.0);
        let (y, _) = AugmentParams::IDENTITY.apply(&x, None, &mut seed::rng(0, &[]));
        assert_eq!(y, x);
    }

    #[test]
    fn horizontal_flip_moves_mask_to_opposite_edge() {
        let x = Image::filled(8, 8, 0.5f64);
        let mask = Mask::from_fn(8, 8, |_, c| u8::from(c == 0));
        let params = AugmentParams { hflip: true, ..AugmentParams::IDENTITY };
        let (_, m) = params.apply(&x, Some(&mask), &mut seed::rng(0, &[]));
        let m = m.unwrap();
        assert!((0..8).all(|r| m.get(r, 7) == 1 && m.get(r, 0) == 0));
    }

    #[test]
    fn augment_is_seeded_and_geometry_consistent() {
        let x = Image::from_fn(16, 16, |r, c| if r < 4 && c < 4 { 0.9 } else { 0.2 });
        let mask = Mask::from_fn(16, 16, |r, c| u8::from(r < 4 && c < 4));
        let (a, ma) = augment(&x, Some(&mask), 42);
        let (b, mb) = augment(&x, Some(&mask), 42);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        for seed in 0..20 {
            let (y, m) = augment(&x, Some(&mask), seed);
            let m = m.unwrap();
            assert_eq!(m.count_ones(), 16);
            let inside: f64 = y.data().iter().zip(m.data()).filter(|(_, &b)| b == 1).map(|(v, _)| *v).sum::<f64>() / 16.0;
            let outside: f64 = y.data().iter().zip(m.data()).filter(|(_, &b)| b == 0).map(|(v, _)| *v).sum::<f64>() / 240.0;
            assert!(inside > outside + 0.3, "seed {seed}");
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn batch_sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(7, 3);
        let mut first: Vec<usize> = (0..7).map(|p| s.item(p)).collect();
        first.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        let mut again = BatchSampler::new(7, 3);
        assert_eq!((0..20).map(|p| again.item(p)).collect::<Vec<_>>(), {
            let mut s = BatchSampler::new(7, 3);
            (0..20).map(|p| s.item(p)).collect::<Vec<_>>()
        });
    }

    #[test]
    fn train_log_round_trip() {
        let rows = vec![
            LogRow { iteration: 0, lr: 0.012, sup_clf: 0.7, sup_seg: 0.69, kd_clf: 0.0, kd_seg: 0.0, total: 1.39 },
            LogRow { iteration: 1, lr: 0.011, sup_clf: 0.6, sup_seg: 0.5, kd_clf: 0.01, kd_seg: 0.002, total: 1.16 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train_log.csv");
        write_train_log(&rows, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("iteration,lr,sup_clf,sup_seg,kd_clf,kd_seg,total"));
        assert_eq!(read_train_log(&p).unwrap(), rows);
    }
}
