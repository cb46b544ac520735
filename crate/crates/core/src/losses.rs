//! Supervised (binary cross-entropy) and distillation (mean squared error)
//! losses, and the gated combination applied per training example.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Prediction;
use crate::train::TrainingExample;
use crate::Scalar;

/// Probability clamp applied before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Pseudo-label threshold when weak labels are used.
    pub t_weak: f64,
    /// Pseudo-label threshold without weak labels.
    pub t_noweak: f64,
    pub alpha_clf: f64,
    pub alpha_seg: f64,
    /// Also gate annotated slices on the teacher score.
    pub strict_eq1_gating: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { t_weak: 0.1, t_noweak: 0.7, alpha_clf: 1.0, alpha_seg: 25.0, strict_eq1_gating: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("t_weak", self.t_weak), ("t_noweak", self.t_noweak)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{name} = {t} outside [0, 1]")));
            }
        }
        if !(self.alpha_clf >= 0.0 && self.alpha_seg >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub sup_clf: T,
    pub sup_seg: T,
    pub kd_clf: T,
    pub kd_seg: T,
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn zero() -> Self {
        Self { sup_clf: T::zero(), sup_seg: T::zero(), kd_clf: T::zero(), kd_seg: T::zero(), total: T::zero() }
    }

    pub fn weighted_total(&self, cfg: &LossConfig) -> T {
        self.sup_clf + self.sup_seg + T::lit(cfg.alpha_clf) * self.kd_clf + T::lit(cfg.alpha_seg) * self.kd_seg
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.sup_clf += other.sup_clf;
        self.sup_seg += other.sup_seg;
        self.kd_clf += other.kd_clf;
        self.kd_seg += other.kd_seg;
        self.total += other.total;
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            sup_clf: self.sup_clf * s,
            sup_seg: self.sup_seg * s,
            kd_clf: self.kd_clf * s,
            kd_seg: self.kd_seg * s,
            total: self.total * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.sup_clf, self.sup_seg, self.kd_clf, self.kd_seg, self.total].iter().all(|v| v.is_finite())
    }
}

fn same_len<T>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { what: what.to_string(), expected: (1, a.len()), actual: (1, b.len()) });
    }
    Ok(())
}

/// Mean binary cross-entropy; `target` may be soft.
pub fn bce<T: Scalar>(target: &[T], prediction: &[T]) -> Result<T> {
    same_len(target, prediction, "bce operands")?;
    if target.is_empty() {
        return Ok(T::zero());
    }
    let eps = T::lit(BCE_EPS);
    let one = T::one();
    let sum: T = target
        .iter()
        .zip(prediction)
        .map(|(&y, &p)| {
            let p = p.max(eps).min(one - eps);
            -(y * p.ln() + (one - y) * (one - p).ln())
        })
        .sum();
    Ok((sum / T::lit(target.len() as f64)).max(T::zero()))
}

/// Mean squared difference.
pub fn mse_kd<T: Scalar>(teacher: &[T], student: &[T]) -> Result<T> {
    same_len(teacher, student, "distillation operands")?;
    if teacher.is_empty() {
        return Ok(T::zero());
    }
    let sum: T = teacher.iter().zip(student).map(|(&t, &s)| (s - t) * (s - t)).sum();
    Ok(sum / T::lit(teacher.len() as f64))
}

/// Logit gradient `(p - y) / n` of the unclamped loss. It is kept where the
/// loss value is clamped, so a saturated wrong prediction can still recover.
fn bce_logit_grad<T: Scalar>(target: &[T], prediction: &[T], w: T, out: &mut [T]) {
    let n = T::lit(target.len() as f64);
    for ((&y, &p), o) in target.iter().zip(prediction).zip(out.iter_mut()) {
        *o += w * (p - y) / n;
    }
}

fn mse_logit_grad<T: Scalar>(teacher: &[T], student: &[T], w: T, out: &mut [T]) {
    let two = T::lit(2.0);
    let n = T::lit(teacher.len() as f64);
    for ((&t, &s), o) in teacher.iter().zip(student).zip(out.iter_mut()) {
        *o += w * two * (s - t) / n * s * (T::one() - s);
    }
}

/// Gradient of a combined loss with respect to the student's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrad<T> {
    pub clf: T,
    pub seg: Vec<T>,
}

/// Segmentation target at the prediction's resolution.
fn seg_target<T: Scalar>(example: &TrainingExample<T>, seg_shape: (usize, usize)) -> Result<Image<T>> {
    let mask = example.hard_seg_mask.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("{}[{}]: supervised segmentation without a mask", example.stack_id, example.slice_index))
    })?;
    let factor = mask.height() / seg_shape.0.max(1);
    if factor == 0 || mask.height() != seg_shape.0 * factor || mask.width() != seg_shape.1 * factor {
        return Err(Error::ShapeMismatch { what: "segmentation target".into(), expected: seg_shape, actual: mask.shape() });
    }
    Ok(mask.downsample_fraction(factor))
}

fn evaluate<T: Scalar>(
    example: &TrainingExample<T>,
    teacher: Option<&Prediction<T>>,
    student: &Prediction<T>,
    cfg: &LossConfig,
    mut grad: Option<&mut LogitGrad<T>>,
) -> Result<LossBreakdown<T>> {
    let mut b = LossBreakdown::zero();
    let s_clf = [student.clf];
    if example.use_sup_clf {
        let label = example.hard_clf_label.ok_or_else(|| {
            Error::InvalidArgument(format!("{}[{}]: supervised classification without a label", example.stack_id, example.slice_index))
        })?;
        let y = [T::lit(label as f64)];
        b.sup_clf = bce(&y, &s_clf)?;
        if let Some(g) = grad.as_deref_mut() {
            let mut d = [T::zero()];
            bce_logit_grad(&y, &s_clf, T::one(), &mut d);
            g.clf += d[0];
        }
    }
    if example.use_sup_seg {
        let target = seg_target(example, student.seg.shape())?;
        b.sup_seg = bce(target.data(), student.seg.data())?;
        if let Some(g) = grad.as_deref_mut() {
            bce_logit_grad(target.data(), student.seg.data(), T::one(), &mut g.seg);
        }
    }
    if example.use_kd {
        let t = teacher.ok_or_else(|| {
            Error::InvalidArgument(format!("{}[{}]: distillation without teacher outputs", example.stack_id, example.slice_index))
        })?;
        if t.seg.shape() != student.seg.shape() {
            return Err(Error::ShapeMismatch { what: "teacher segmentation".into(), expected: student.seg.shape(), actual: t.seg.shape() });
        }
        b.kd_clf = mse_kd(&[t.clf], &s_clf)?;
        b.kd_seg = mse_kd(t.seg.data(), student.seg.data())?;
        if let Some(g) = grad {
            let mut d = [T::zero()];
            mse_logit_grad(&[t.clf], &s_clf, T::lit(cfg.alpha_clf), &mut d);
            g.clf += d[0];
            mse_logit_grad(t.seg.data(), student.seg.data(), T::lit(cfg.alpha_seg), &mut g.seg);
        }
    }
    b.total = b.weighted_total(cfg);
    Ok(b)
}

/// Loss of one example. `teacher` and `student` must both be evaluated on the
/// example's augmented view.
pub fn combined_loss<T: Scalar>(
    example: &TrainingExample<T>,
    teacher: Option<&Prediction<T>>,
    student: &Prediction<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    evaluate(example, teacher, student, cfg, None)
}

/// [`combined_loss`] together with its gradient with respect to the student logits.
pub fn combined_loss_with_grad<T: Scalar>(
    example: &TrainingExample<T>,
    teacher: Option<&Prediction<T>>,
    student: &Prediction<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown<T>, LogitGrad<T>)> {
    let mut g = LogitGrad { clf: T::zero(), seg: vec![T::zero(); student.seg.len()] };
    let b = evaluate(example, teacher, student, cfg, Some(&mut g))?;
    Ok((b, g))
}

/// Mean of per-example breakdowns.
pub fn batch_mean<T: Scalar>(items: &[LossBreakdown<T>]) -> LossBreakdown<T> {
    let mut acc = LossBreakdown::zero();
    for b in items {
        acc.add_assign(b);
    }
    if items.is_empty() {
        acc
    } else {
        acc.scale(T::one() / T::lit(items.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bce_examples() {
        assert!(bce(&[1.0f64], &[1.0 - BCE_EPS]).unwrap() < 1e-6);
        assert_relative_eq!(bce(&[1.0f64], &[0.5]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_relative_eq!(bce(&[0.0f64; 16], &[0.5; 16]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(bce(&[0.0f64; 2], &[0.5; 3]).is_err());
        // clamped extremes stay finite
        assert!(bce(&[1.0f32], &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_kd(&[0.3f64, 0.9], &[0.3, 0.9]).unwrap(), 0.0);
        assert_relative_eq!(mse_kd(&[0.8f64], &[0.6]).unwrap(), 0.04, epsilon = 1e-12);
        let t: Vec<f64> = (0..64).map(|i| i as f64 / 100.0).collect();
        let s: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert_relative_eq!(mse_kd(&t, &s).unwrap(), 0.01, epsilon = 1e-12);
        assert!(mse_kd(&[0.1f64], &[]).is_err());
    }

    #[test]
    fn weighted_total_arithmetic() {
        let b = LossBreakdown { sup_clf: 0.3, sup_seg: 0.2, kd_clf: 0.04, kd_seg: 0.01, total: 0.0 };
        assert_relative_eq!(b.weighted_total(&LossConfig::default()), 0.79, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { t_weak: 1.2, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { alpha_seg: -1.0, ..LossConfig::default() }.validate().is_err());
    }
}
