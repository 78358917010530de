//! Classification and distillation objectives with analytic gradients.
//!
//! Loss values are accumulated in `f64` regardless of the tensor scalar type;
//! gradients are returned with respect to the logits.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result, Tensor};

/// Which distribution sits on the left of the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(student ‖ teacher)`
    #[default]
    StudentFirst,
    /// `KL(teacher ‖ student)`
    TeacherFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub kd_weight: f64,
    pub ce_weight: f64,
    pub mmd_weight: f64,
    pub kl_direction: KlDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            kd_weight: 1.0,
            ce_weight: 1.0,
            mmd_weight: 0.0,
            kl_direction: KlDirection::StudentFirst,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, w) in [
            ("kd_weight", self.kd_weight),
            ("ce_weight", self.ce_weight),
            ("mmd_weight", self.mmd_weight),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(alloc::format!(
                    "{name} must be a nonnegative number, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Row-wise `log softmax(z / tau)` in f64 via max-subtracted log-sum-exp.
fn log_softmax_rows<T: Real>(logits: &Tensor<T>, tau: f64) -> Vec<Vec<f64>> {
    (0..logits.batch())
        .map(|i| {
            let z: Vec<f64> = logits.row(i).iter().map(|v| v.f64() / tau).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(z.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            z.iter().map(|v| v - lse).collect()
        })
        .collect()
}

fn check_logits<T: Real>(logits: &Tensor<T>) -> Result<usize> {
    if logits.shape().len() != 2 || logits.batch() == 0 {
        return Err(Error::ShapeMismatch(alloc::format!(
            "logits must be a nonempty [B x K] matrix, got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    if k < 2 {
        return Err(Error::ShapeMismatch(alloc::format!(
            "need at least 2 classes, got {k}"
        )));
    }
    Ok(k)
}

fn check_labels(labels: &[usize], batch: usize, k: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    cross_entropy_grad(logits, labels).map(|(v, _)| v)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_grad<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let k = check_logits(logits)?;
    let b = logits.batch();
    check_labels(labels, b, k)?;
    let logp = log_softmax_rows(logits, 1.0);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, (row, &y)) in logp.iter().zip(labels).enumerate() {
        total -= row[y];
        let g = grad.row_mut(i);
        for (j, lp) in row.iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            g[j] = T::of((libm::exp(*lp) - target) * inv_b);
        }
    }
    Ok((total * inv_b, grad))
}

/// Mean over the batch of the KL divergence between tempered softmaxes, in
/// the order set by `cfg.kl_direction`, scaled by `tau^2`.
pub fn softmax_kl<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    softmax_kl_grad(student, teacher, cfg).map(|(v, _)| v)
}

/// [`softmax_kl`] and its gradient with respect to the student logits.
pub fn softmax_kl_grad<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    check_logits(student)?;
    if student.shape() != teacher.shape() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    cfg.validate()?;
    let tau = cfg.temperature;
    let scale = tau * tau;
    let b = student.batch();
    let ls = log_softmax_rows(student, tau);
    let lt = log_softmax_rows(teacher, tau);
    let mut grad = Tensor::zeros(student.shape());
    let mut total = 0.0;
    for i in 0..b {
        let (s, t) = (&ls[i], &lt[i]);
        let g = grad.row_mut(i);
        match cfg.kl_direction {
            KlDirection::StudentFirst => {
                let kl: f64 = s.iter().zip(t).map(|(a, c)| libm::exp(*a) * (a - c)).sum();
                total += kl;
                for j in 0..s.len() {
                    let p = libm::exp(s[j]);
                    g[j] = T::of(scale / tau * p * ((s[j] - t[j]) - kl) / b as f64);
                }
            }
            KlDirection::TeacherFirst => {
                let kl: f64 = s.iter().zip(t).map(|(a, c)| libm::exp(*c) * (c - a)).sum();
                total += kl;
                for j in 0..s.len() {
                    g[j] = T::of(scale / tau * (libm::exp(s[j]) - libm::exp(t[j])) / b as f64);
                }
            }
        }
    }
    // KL is nonnegative; rounding can leave a tiny negative residue.
    Ok(((total / b as f64 * scale).max(0.0), grad))
}

/// Stage-1 objective: `ce_weight * CE + mmd_weight * mmd_term`.
pub fn reprogram_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    mmd_term: Option<f64>,
    cfg: &LossConfig,
) -> Result<f64> {
    reprogram_loss_grad(logits, labels, mmd_term, cfg).map(|(v, _)| v)
}

/// [`reprogram_loss`] and its gradient with respect to the logits. The MMD
/// term's own gradient is the caller's to propagate (scaled by
/// `cfg.mmd_weight`).
pub fn reprogram_loss_grad<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    mmd_term: Option<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    cfg.validate()?;
    let (ce, mut grad) = cross_entropy_grad(logits, labels)?;
    let w = T::of(cfg.ce_weight);
    grad.data_mut().iter_mut().for_each(|g| *g *= w);
    Ok((
        cfg.ce_weight * ce + cfg.mmd_weight * mmd_term.unwrap_or(0.0),
        grad,
    ))
}

/// Total and per-term values of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLoss {
    pub total: f64,
    pub kl: f64,
    pub ce: f64,
}

/// `kd_weight * KL(student, teacher) + ce_weight * CE(student, labels)`.
pub fn distill_loss<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<DistillLoss> {
    distill_loss_grad(student, teacher, labels, cfg).map(|(v, _)| v)
}

/// [`distill_loss`] and its gradient with respect to the student logits.
pub fn distill_loss_grad<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(DistillLoss, Tensor<T>)> {
    if student.batch() != labels.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} labels for a batch of {}",
            labels.len(),
            student.batch()
        )));
    }
    let (kl, gk) = softmax_kl_grad(student, teacher, cfg)?;
    let (ce, gc) = cross_entropy_grad(student, labels)?;
    let (wk, wc) = (T::of(cfg.kd_weight), T::of(cfg.ce_weight));
    let data: Vec<T> = gk
        .data()
        .iter()
        .zip(gc.data())
        .map(|(a, c)| wk * *a + wc * *c)
        .collect();
    let grad = Tensor::from_vec(student.shape(), data)?;
    Ok((
        DistillLoss {
            total: cfg.kd_weight * kl + cfg.ce_weight * ce,
            kl,
            ce,
        },
        grad,
    ))
}

/// Softmax probabilities of each row, for callers that need them directly.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    log_softmax_rows(logits, 1.0)
        .into_iter()
        .map(|r| r.into_iter().map(libm::exp).collect())
        .collect()
}

/// One-hot rows, handy for constructing synthetic logits.
pub fn one_hot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&l| {
            let mut r = vec![0.0; k];
            r[l] = 1.0;
            r
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_logits(b: usize, k: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "logits", 0);
        Tensor::from_vec(
            &[b, k],
            (0..b * k).map(|_| 2.0 * rng::normal(&mut r)).collect(),
        )
        .unwrap()
    }

    // Independent oracles written from the textbook formulas.
    fn ce_oracle(row: &[f64], y: usize) -> f64 {
        let lse = libm::log(row.iter().map(|v| libm::exp(*v)).sum::<f64>());
        -(row[y] - lse)
    }

    fn kl_oracle(p_logits: &[f64], q_logits: &[f64]) -> f64 {
        let zp: f64 = p_logits.iter().map(|v| libm::exp(*v)).sum();
        let zq: f64 = q_logits.iter().map(|v| libm::exp(*v)).sum();
        p_logits
            .iter()
            .zip(q_logits)
            .map(|(a, b)| {
                let p = libm::exp(*a) / zp;
                let q = libm::exp(*b) / zq;
                p * libm::log(p / q)
            })
            .sum()
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = t(&[&[0.3; 10]]);
        for y in 0..10 {
            let v = cross_entropy(&logits, &[y]).unwrap();
            assert!((v - core::f64::consts::LN_10).abs() < 1e-9);
        }
    }

    #[test]
    fn confident_correct_logit_gives_near_zero() {
        let v = cross_entropy(&t(&[&[0.0, 100.0, 0.0]]), &[1]).unwrap();
        assert!((0.0..1e-12).contains(&v));
    }

    #[test]
    fn cross_entropy_matches_hand_oracle() {
        let v = cross_entropy(&t(&[&[1.0, 2.0, 0.5]]), &[1]).unwrap();
        let lse = libm::log(libm::exp(1.0) + libm::exp(2.0) + libm::exp(0.5));
        assert!((v - -(2.0 - lse)).abs() < 1e-12);
        assert!((v - 0.464_368_784_107_944_7).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        assert!(matches!(
            cross_entropy(&t(&[&[1.0, 2.0]]), &[2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                num_classes: 2
            })
        ));
        assert!(cross_entropy(&t(&[&[1.0]]), &[0]).is_err());
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        for seed in 0..20 {
            let a = random_logits(4, 6, seed);
            for tau in [1.0, 2.0, 4.0] {
                for dir in [KlDirection::StudentFirst, KlDirection::TeacherFirst] {
                    let cfg = LossConfig {
                        temperature: tau,
                        kl_direction: dir,
                        ..Default::default()
                    };
                    assert!(softmax_kl(&a, &a, &cfg).unwrap() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn two_class_kl_matches_direct_formula() {
        let s = t(&[&[0.0, 1.0]]);
        let te = t(&[&[1.0, 0.0]]);
        let p1 = 1.0 / (1.0 + libm::exp(-1.0));
        let p0 = 1.0 - p1;
        // student p = (p0, p1), teacher q = (p1, p0)
        let want = p0 * libm::log(p0 / p1) + p1 * libm::log(p1 / p0);
        let got = softmax_kl(&s, &te, &LossConfig::default()).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.462_117_157_260_009_74).abs() < 1e-12);
    }

    #[test]
    fn kl_direction_and_temperature_follow_definitions() {
        let s = random_logits(3, 4, 1);
        let te = random_logits(3, 4, 2);
        for tau in [1.0, 3.0] {
            let scaled =
                |m: &Tensor<f64>, i: usize| m.row(i).iter().map(|v| v / tau).collect::<Vec<_>>();
            let sf: f64 = (0..3)
                .map(|i| kl_oracle(&scaled(&s, i), &scaled(&te, i)))
                .sum::<f64>()
                / 3.0
                * tau
                * tau;
            let tf: f64 = (0..3)
                .map(|i| kl_oracle(&scaled(&te, i), &scaled(&s, i)))
                .sum::<f64>()
                / 3.0
                * tau
                * tau;
            let base = LossConfig {
                temperature: tau,
                ..Default::default()
            };
            assert!((softmax_kl(&s, &te, &base).unwrap() - sf).abs() < 1e-12);
            let rev = LossConfig {
                kl_direction: KlDirection::TeacherFirst,
                ..base
            };
            assert!((softmax_kl(&s, &te, &rev).unwrap() - tf).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        assert!(matches!(
            softmax_kl(
                &random_logits(2, 3, 0),
                &random_logits(2, 4, 0),
                &LossConfig::default()
            ),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn reprogram_loss_is_a_weighted_sum() {
        let logits = random_logits(4, 5, 3);
        let labels = [0, 1, 4, 2];
        let ce = cross_entropy(&logits, &labels).unwrap();
        assert_eq!(
            reprogram_loss(&logits, &labels, Some(0.7), &LossConfig::default()).unwrap(),
            ce
        );
        let cfg = LossConfig {
            mmd_weight: 1.0,
            ..Default::default()
        };
        let got = reprogram_loss(&logits, &labels, Some(0.5), &cfg).unwrap();
        assert!((got - (ce + 0.5)).abs() < 1e-12);
        let cfg = LossConfig {
            mmd_weight: 2.5,
            ..Default::default()
        };
        assert!(
            (reprogram_loss(&logits, &labels, Some(0.1), &cfg).unwrap() - (ce + 0.25)).abs()
                < 1e-12
        );
    }

    #[test]
    fn distill_loss_matches_component_oracles() {
        let s = random_logits(3, 4, 10);
        let te = random_logits(3, 4, 11);
        let labels = [3, 0, 2];
        let kl: f64 = (0..3).map(|i| kl_oracle(s.row(i), te.row(i))).sum::<f64>() / 3.0;
        let ce: f64 = (0..3).map(|i| ce_oracle(s.row(i), labels[i])).sum::<f64>() / 3.0;
        let got = distill_loss(&s, &te, &labels, &LossConfig::default()).unwrap();
        assert!((got.kl - kl).abs() < 1e-12);
        assert!((got.ce - ce).abs() < 1e-12);
        assert!((got.total - (kl + ce)).abs() < 1e-12);

        let same = distill_loss(&s, &s, &labels, &LossConfig::default()).unwrap();
        assert!((same.total - same.ce).abs() < 1e-12);
        let no_kd = distill_loss(
            &s,
            &te,
            &labels,
            &LossConfig {
                kd_weight: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(no_kd.total, ce_oracle_mean(&s, &labels));
    }

    fn ce_oracle_mean(s: &Tensor<f64>, labels: &[usize]) -> f64 {
        cross_entropy(s, labels).unwrap()
    }

    #[test]
    fn logit_gradients_match_central_differences() {
        let s = random_logits(3, 5, 20);
        let te = random_logits(3, 5, 21);
        let labels = [1, 4, 0];
        for cfg in [
            LossConfig::default(),
            LossConfig {
                temperature: 2.5,
                kd_weight: 0.7,
                ce_weight: 1.3,
                ..Default::default()
            },
            LossConfig {
                kl_direction: KlDirection::TeacherFirst,
                temperature: 1.7,
                ..Default::default()
            },
        ] {
            let (_, g) = distill_loss_grad(&s, &te, &labels, &cfg).unwrap();
            let h = 1e-6;
            for j in 0..s.len() {
                let mut up = s.clone();
                up.data_mut()[j] += h;
                let mut down = s.clone();
                down.data_mut()[j] -= h;
                let num = (distill_loss(&up, &te, &labels, &cfg).unwrap().total
                    - distill_loss(&down, &te, &labels, &cfg).unwrap().total)
                    / (2.0 * h);
                assert!(
                    (g.data()[j] - num).abs() < 1e-8,
                    "{} vs {}",
                    g.data()[j],
                    num
                );
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let s = random_logits(1, 3, 0);
        for cfg in [
            LossConfig {
                temperature: 0.0,
                ..Default::default()
            },
            LossConfig {
                kd_weight: -1.0,
                ..Default::default()
            },
            LossConfig {
                mmd_weight: f64::NAN,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                softmax_kl(&s, &s, &cfg),
                Err(Error::InvalidConfig(_))
            ));
        }
    }
}
