//! Focal loss, center loss, their weighted sum and the center update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focusing exponent of the focal term.
    pub gamma: f64,
    /// Weight of the center term.
    pub c: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 0.5, c: 5e-4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) || !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::Config("loss.gamma and loss.c must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn batch_dims(op: &'static str, t: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    match t.shape() {
        [b, c] if *b == labels.len() && *c >= 1 => Ok((*b, *c)),
        s => Err(Error::dim(op, s, &[labels.len()])),
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(index) => Err(Error::Label {
            index,
            label: labels[index],
            classes,
        }),
        None => Ok(()),
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_probs(logits: &Tensor) -> Result<Tensor> {
    let c = match logits.shape() {
        [_, c] if *c >= 1 => *c,
        s => return Err(Error::shape("softmax_probs", format!("expected [B, C>=1], got {s:?}"))),
    };
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Batch-mean focal loss `-(1 - p_t)^gamma ln p_t` and its gradient w.r.t. the logits.
pub fn focal_loss(logits: &Tensor, labels: &[usize], gamma: f64) -> Result<(f64, Tensor)> {
    let (b, c) = batch_dims("focal_loss", logits, labels)?;
    check_labels(labels, c)?;
    let probs = softmax_probs(logits)?;
    let mut grad = Tensor::zeros(&[b, c]);
    let mut total = 0.0;
    for (i, &t) in labels.iter().enumerate() {
        let z = &logits.data()[i * c..][..c];
        let p = &probs.data()[i * c..][..c];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_pt = z[t] - m - z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        // 1 - p_t summed from the other classes keeps precision when p_t ~ 1.
        let q: f64 = p.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, v)| v).sum();
        let w = q.powf(gamma);
        total += -w * log_pt;

        // d/dz_j = coef * (delta_tj - p_j), coef = gamma p_t q^gamma (ln p_t / q) - q^gamma.
        let ratio = if q == 0.0 {
            -1.0
        } else if q < 0.5 {
            (-q).ln_1p() / q
        } else {
            log_pt / q
        };
        let coef = if gamma == 0.0 { -1.0 } else { gamma * p[t] * w * ratio - w };
        let g = &mut grad.data_mut()[i * c..][..c];
        for j in 0..c {
            let d = if j == t { q } else { -p[j] };
            g[j] = coef * d / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Per-class feature centroids tracked during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    pub centers: Tensor,
    pub alpha: f64,
}

impl CenterBank {
    pub fn new(num_classes: usize, feature_dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("center alpha {alpha} not in (0, 1]")));
        }
        Ok(CenterBank {
            centers: Tensor::zeros(&[num_classes, feature_dim]),
            alpha,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.cols()
    }
}

fn check_bank(op: &'static str, features: &Tensor, labels: &[usize], bank: &CenterBank) -> Result<usize> {
    let (_, d) = batch_dims(op, features, labels)?;
    if d != bank.feature_dim() {
        return Err(Error::dim(op, features.shape(), bank.centers.shape()));
    }
    check_labels(labels, bank.num_classes())?;
    Ok(d)
}

/// `sum_i 0.5 ||F_i - c_{y_i}||^2` (summed, not averaged) and its gradient `F_i - c_{y_i}`.
pub fn center_loss(features: &Tensor, labels: &[usize], bank: &CenterBank) -> Result<(f64, Tensor)> {
    let d = check_bank("center_loss", features, labels, bank)?;
    let mut grad = features.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let c = bank.centers.row(y);
        for (g, cv) in grad.data_mut()[i * d..][..d].iter_mut().zip(c) {
            *g -= cv;
            loss += 0.5 * *g * *g;
        }
    }
    Ok((loss, grad))
}

/// Moves each center present in the batch toward its samples:
/// `c_j -= alpha * sum_{y_i = j}(c_j - F_i) / (1 + n_j)`.
pub fn update_centers(bank: &mut CenterBank, features: &Tensor, labels: &[usize]) -> Result<()> {
    let d = check_bank("update_centers", features, labels, bank)?;
    let k = bank.num_classes();
    let mut delta = vec![0.0; k * d];
    let mut count = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        count[y] += 1;
        let c = bank.centers.row(y);
        for ((acc, cv), f) in delta[y * d..][..d].iter_mut().zip(c).zip(features.row(i)) {
            *acc += cv - f;
        }
    }
    let alpha = bank.alpha;
    for j in 0..k {
        if count[j] == 0 {
            continue;
        }
        let denom = 1.0 + count[j] as f64;
        for (cv, dv) in bank.centers.data_mut()[j * d..][..d].iter_mut().zip(&delta[j * d..][..d]) {
            *cv -= alpha * dv / denom;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridLoss {
    pub loss: f64,
    pub focal: f64,
    pub center: f64,
    pub grad_logits: Tensor,
    pub grad_features: Tensor,
}

/// `L_F + c * L_C`.
pub fn hybrid_loss(
    logits: &Tensor,
    features: &Tensor,
    labels: &[usize],
    bank: &CenterBank,
    cfg: &LossConfig,
) -> Result<HybridLoss> {
    let (focal, grad_logits) = focal_loss(logits, labels, cfg.gamma)?;
    let (center, grad_c) = center_loss(features, labels, bank)?;
    Ok(HybridLoss {
        loss: focal + cfg.c * center,
        focal,
        center,
        grad_logits,
        grad_features: grad_c.scale(cfg.c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{max_relative_error, numeric_gradient};
    use crate::rng::Rng;

    fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
        let mut total = 0.0;
        for (i, &t) in labels.iter().enumerate() {
            let row = logits.row(i);
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            total += -(row[t].exp() / s).ln();
        }
        total / labels.len() as f64
    }

    #[test]
    fn softmax_cases() {
        let p = softmax_probs(&Tensor::full(&[1, 4], 3.0)).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let x = Rng::new(1).normal(&[3, 5]);
        let shifted = x.map(|v| v + 7.5);
        assert!(softmax_probs(&x).unwrap().max_abs_diff(&softmax_probs(&shifted).unwrap()) <= 1e-12);
        let p = softmax_probs(&x).unwrap();
        for i in 0..3 {
            let row = x.row(i);
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..5 {
                assert!((p.at(i, j) - row[j].exp() / s).abs() <= 1e-12);
            }
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn focal_reference_values() {
        let (l, _) = focal_loss(&Tensor::zeros(&[1, 2]), &[0], 0.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, g) = focal_loss(&Tensor::new(&[1, 2], vec![800.0, 0.0]).unwrap(), &[0], 0.5).unwrap();
        assert!(l.abs() < 1e-300 && g.max_abs() < 1e-300);
        // p_t = 0.9 with two classes: logit gap ln 9.
        let z = Tensor::new(&[1, 2], vec![9f64.ln(), 0.0]).unwrap();
        let (l, _) = focal_loss(&z, &[0], 0.5).unwrap();
        assert!((l - 0.033_318).abs() < 5e-7, "{l}");
        assert!((l - (-(0.1f64).sqrt() * 0.9f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let z = rng.normal(&[6, 4]).scale(2.0);
            let labels: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
            let (l, g) = focal_loss(&z, &labels, 0.0).unwrap();
            assert!((l - cross_entropy(&z, &labels)).abs() <= 1e-12);
            let p = softmax_probs(&z).unwrap();
            for (i, &t) in labels.iter().enumerate() {
                for j in 0..4 {
                    let want = (p.at(i, j) - if j == t { 1.0 } else { 0.0 }) / 6.0;
                    assert!((g.at(i, j) - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn focal_monotone_in_pt() {
        for gamma in [0.0, 0.5, 2.0] {
            let mut prev = f64::INFINITY;
            for k in 1..100 {
                let pt = k as f64 / 100.0;
                let z = Tensor::new(&[1, 2], vec![(pt / (1.0 - pt)).ln(), 0.0]).unwrap();
                let (l, _) = focal_loss(&z, &[0], gamma).unwrap();
                assert!(l <= prev + 1e-15);
                prev = l;
            }
        }
    }

    #[test]
    fn focal_finite_differences() {
        let mut rng = Rng::new(4);
        for gamma in [0.0, 0.5, 2.0] {
            let z = rng.normal(&[3, 4]);
            let labels = [1, 3, 0];
            let (_, g) = focal_loss(&z, &labels, gamma).unwrap();
            let num = numeric_gradient(&z, 1e-5, |zp| focal_loss(zp, &labels, gamma).unwrap().0);
            assert!(max_relative_error(&g, &num, 1e-8) <= 1e-6);
        }
    }

    #[test]
    fn focal_bad_label() {
        match focal_loss(&Tensor::zeros(&[2, 3]), &[0, 3], 0.5) {
            Err(Error::Label { index, label, .. }) => assert_eq!((index, label), (1, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn center_loss_cases() {
        let mut bank = CenterBank::new(2, 2, 0.5).unwrap();
        bank.centers = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(center_loss(&f, &[0], &bank).unwrap().0, 0.0);
        let f = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        assert_eq!(center_loss(&f, &[1], &bank).unwrap().0, 2.0);

        let mut rng = Rng::new(5);
        bank.centers = rng.normal(&[2, 2]);
        let f = rng.normal(&[3, 2]);
        let labels = [0, 1, 1];
        let (l, g) = center_loss(&f, &labels, &bank).unwrap();
        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..2 {
                want += 0.5 * (f.at(i, j) - bank.centers.at(y, j)).powi(2);
            }
        }
        assert!((l - want).abs() <= 1e-12);
        let num = numeric_gradient(&f, 1e-5, |fp| center_loss(fp, &labels, &bank).unwrap().0);
        assert!(max_relative_error(&g, &num, 1e-8) <= 1e-6);
        assert!(center_loss(&f, &[0, 2, 1], &bank).is_err());
    }

    #[test]
    fn center_update_rule() {
        let mut bank = CenterBank::new(2, 1, 1.0).unwrap();
        update_centers(&mut bank, &Tensor::full(&[1, 1], 2.0), &[0]).unwrap();
        assert_eq!(bank.centers.data(), &[1.0, 0.0]);

        let mut bank = CenterBank::new(2, 2, 0.5).unwrap();
        bank.centers = Tensor::from_rows(&[vec![1.0, -1.0], vec![3.0, 4.0]]).unwrap();
        let f = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        update_centers(&mut bank, &f, &[0, 0]).unwrap();
        // delta = ((1-2)+(1-0), (-1-0)+(-1-1)) / 3 = (0, -1); c -= 0.5 * delta.
        assert_eq!(bank.centers.row(0), &[1.0, -0.5]);
        assert_eq!(bank.centers.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn hybrid_combination() {
        let mut rng = Rng::new(6);
        let z = rng.normal(&[2, 3]);
        let f = rng.normal(&[2, 4]);
        let labels = [2, 0];
        let mut bank = CenterBank::new(3, 4, 0.5).unwrap();
        bank.centers = rng.normal(&[3, 4]);
        let zero_c = LossConfig { gamma: 0.5, c: 0.0 };
        let h = hybrid_loss(&z, &f, &labels, &bank, &zero_c).unwrap();
        let (fl, fg) = focal_loss(&z, &labels, 0.5).unwrap();
        assert_eq!(h.loss, fl);
        assert_eq!(h.grad_logits, fg);
        assert!(h.grad_features.max_abs() == 0.0);

        assert!((0.5 + 5e-4 * 100.0 - 0.55f64).abs() < 1e-15);

        let cfg = LossConfig { gamma: 0.5, c: 0.3 };
        let h = hybrid_loss(&z, &f, &labels, &bank, &cfg).unwrap();
        assert!((h.loss - (h.focal + 0.3 * h.center)).abs() < 1e-15);
        let nz = numeric_gradient(&z, 1e-5, |zp| hybrid_loss(zp, &f, &labels, &bank, &cfg).unwrap().loss);
        let nf = numeric_gradient(&f, 1e-5, |fp| hybrid_loss(&z, fp, &labels, &bank, &cfg).unwrap().loss);
        assert!(max_relative_error(&h.grad_logits, &nz, 1e-8) <= 1e-5);
        assert!(max_relative_error(&h.grad_features, &nf, 1e-8) <= 1e-5);
    }
}
