//! Training losses.
//!
//! The generative term is contrastive divergence with a weak L2 penalty on
//! both energies,
//!
//! ```text
//! L_gen = mean_i( E+_i - E-_i + reg_coeff * (E+_i² + E-_i²) )
//! ```
//!
//! and the joint model adds softmax cross-entropy on a separate, augmented
//! mini-batch.

use rand_distr::{Distribution, StandardNormal};

use crate::data::{Batch, BatchTag};
use crate::error::{Error, Result};
use crate::net::{Bound, EnergyModel, Mode};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_REG_COEFF: f64 = 0.05;

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub gen_loss: f64,
    pub clf_loss: Option<f64>,
    pub e_pos_mean: f64,
    pub e_neg_mean: f64,
    pub e_pos_sq_mean: f64,
    pub e_neg_sq_mean: f64,
    pub total: f64,
    /// Accuracy on the classification batch.
    pub accuracy: Option<f64>,
}

impl LossBreakdown {
    /// `|mean E+ - mean E-|`.
    pub fn energy_gap(&self) -> f64 {
        (self.e_pos_mean - self.e_neg_mean).abs()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.gen_loss,
            self.clf_loss.unwrap_or(0.0),
            self.e_pos_mean,
            self.e_neg_mean,
            self.e_pos_sq_mean,
            self.e_neg_sq_mean,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `mean(E+ - E- + reg_coeff·(E+² + E-²))` over equally sized energy vectors.
pub fn cd_l2_loss(g: &mut Graph, e_pos: Var, e_neg: Var, reg_coeff: f64) -> Result<Var> {
    if !(reg_coeff >= 0.0) {
        return Err(Error::InvalidArgument(format!("reg_coeff must be non-negative, got {reg_coeff}")));
    }
    if g.shape(e_pos) != g.shape(e_neg) {
        return Err(Error::shape("cd_l2_loss", g.shape(e_pos), g.shape(e_neg)));
    }
    let diff = g.sub(e_pos, e_neg)?;
    let per_row = if reg_coeff > 0.0 {
        let sq_pos = g.square(e_pos);
        let sq_neg = g.square(e_neg);
        let sq = g.add(sq_pos, sq_neg)?;
        let penalty = g.scale(sq, reg_coeff);
        g.add(diff, penalty)?
    } else {
        diff
    };
    Ok(g.mean(per_row))
}

/// Loss node plus its scalar breakdown.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn mean_sq(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
    }
}

fn check_gen_batch(batch: &Batch, allow_augmented: bool) -> Result<()> {
    if batch.tag == BatchTag::Augmented && !allow_augmented {
        return Err(Error::Invariant(
            "likelihood batch was augmented; only the classification batch may be".into(),
        ));
    }
    Ok(())
}

fn gen_terms(
    model: &EnergyModel,
    g: &mut Graph,
    p: &Bound,
    x_pos: &Tensor,
    x_neg: &Tensor,
    reg_coeff: f64,
) -> Result<(Var, LossBreakdown)> {
    if x_pos.rows() != x_neg.rows() {
        return Err(Error::shape("generative batch", x_pos.shape(), x_neg.shape()));
    }
    let pos = g.leaf_with(x_pos, false);
    let neg = g.leaf_with(x_neg, false);
    let e_pos = model.energy_in(g, p, pos)?;
    let e_neg = model.energy_in(g, p, neg)?;
    let gen = cd_l2_loss(g, e_pos, e_neg, reg_coeff)?;
    let (ep, en) = (g.value(e_pos), g.value(e_neg));
    let gen_loss = g.value(gen)[0];
    let b = LossBreakdown {
        gen_loss,
        clf_loss: None,
        e_pos_mean: mean(ep),
        e_neg_mean: mean(en),
        e_pos_sq_mean: mean_sq(ep),
        e_neg_sq_mean: mean_sq(en),
        total: gen_loss,
        accuracy: None,
    };
    Ok((gen, b))
}

/// Cross-entropy of the classifier on `batch` and the batch accuracy.
pub fn classification_loss(model: &EnergyModel, g: &mut Graph, p: &Bound, batch: &Batch) -> Result<(Var, f64)> {
    let y = batch
        .y
        .as_deref()
        .ok_or_else(|| Error::Config("classification batch has no labels".into()))?;
    let x = g.leaf_with(&batch.x, false);
    let logits = model.logits_in(g, p, x)?;
    let xent = g.softmax_cross_entropy(logits, y)?;
    let c = g.shape(logits)[1];
    let correct = g
        .value(logits)
        .chunks_exact(c)
        .zip(y)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            best == label
        })
        .count();
    Ok((xent, correct as f64 / y.len().max(1) as f64))
}

/// Joint objective `xent(x_clf, y) + L_gen(x_pos, x_neg)`.
///
/// `x_clf` is the augmented classification batch and `x_pos` the clean
/// likelihood batch. An augmented `x_pos` is rejected unless
/// `allow_augmented_gen` is set (ablation runs only).
pub fn joint_loss(
    model: &EnergyModel,
    g: &mut Graph,
    p: &Bound,
    clf: &Batch,
    x_pos: &Batch,
    x_neg: &Tensor,
    reg_coeff: f64,
    allow_augmented_gen: bool,
) -> Result<LossTerms> {
    if !model.mode().has_classifier() {
        return Err(Error::Config(format!("joint loss needs a classifier, model mode is {}", model.mode())));
    }
    check_gen_batch(x_pos, allow_augmented_gen)?;
    let (xent, accuracy) = classification_loss(model, g, p, clf)?;
    let (gen, mut b) = gen_terms(model, g, p, &x_pos.x, x_neg, reg_coeff)?;
    let total = g.add(xent, gen)?;
    let clf_loss = g.value(xent)[0];
    b.clf_loss = Some(clf_loss);
    b.accuracy = Some(accuracy);
    b.total = g.value(total)[0];
    Ok(LossTerms { total, breakdown: b })
}

/// Generative-only objective used by unconditional models.
pub fn uncond_loss(
    model: &EnergyModel,
    g: &mut Graph,
    p: &Bound,
    x_pos: &Batch,
    x_neg: &Tensor,
    reg_coeff: f64,
    allow_augmented_gen: bool,
) -> Result<LossTerms> {
    if model.mode() != Mode::Uncond {
        return Err(Error::Config(format!(
            "unconditional loss used with a {} model",
            model.mode()
        )));
    }
    check_gen_batch(x_pos, allow_augmented_gen)?;
    let (gen, b) = gen_terms(model, g, p, &x_pos.x, x_neg, reg_coeff)?;
    Ok(LossTerms { total: gen, breakdown: b })
}

/// `x + N(0, sigma²)` elementwise; `sigma == 0` returns `x` unchanged.
pub fn inject_noise(x: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise level must be non-negative, got {sigma}")));
    }
    let mut out = x.clone();
    if sigma > 0.0 {
        for (v, z) in out.values_mut().iter_mut().zip(StandardNormal.sample_iter(&mut *rng)) {
            let z: f64 = z;
            *v += sigma * z;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Architecture;
    use crate::rng::{stream, Stream};
    use approx::assert_relative_eq;

    fn eval_cd(pos: &[f64], neg: &[f64], reg: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let p = g.leaf(&Tensor::from_slice(pos).with_requires_grad(true));
        let n = g.leaf(&Tensor::from_slice(neg).with_requires_grad(true));
        let l = cd_l2_loss(&mut g, p, n, reg).unwrap();
        g.backward(l).unwrap();
        (g.value(l)[0], g.grad(p).unwrap().to_vec(), g.grad(n).unwrap().to_vec())
    }

    #[test]
    fn cd_examples() {
        assert_eq!(eval_cd(&[0.0, 0.0], &[0.0, 0.0], 0.3).0, 0.0);
        assert_relative_eq!(eval_cd(&[1.0], &[2.0], 0.1).0, -0.5, epsilon = 1e-15);
        for a in [-3.0, 0.0, 7.5] {
            assert_eq!(eval_cd(&[a], &[a], 0.0).0, 0.0);
        }
        let mut g = Graph::new();
        let p = g.leaf(&Tensor::from_slice(&[1.0, 2.0]));
        let n = g.leaf(&Tensor::from_slice(&[1.0]));
        assert!(cd_l2_loss(&mut g, p, n, 0.1).is_err());
    }

    #[test]
    fn cd_gradients_match_closed_form_and_differences() {
        let pos = [0.4, -1.2, 2.0];
        let neg = [1.5, 0.3, -0.7];
        let reg = 0.05;
        let (_, gp, gn) = eval_cd(&pos, &neg, reg);
        let b = pos.len() as f64;
        let h = 1e-6;
        for i in 0..3 {
            assert_relative_eq!(gp[i], (1.0 + 2.0 * reg * pos[i]) / b, epsilon = 1e-14);
            assert_relative_eq!(gn[i], (-1.0 + 2.0 * reg * neg[i]) / b, epsilon = 1e-14);
            let mut up = pos;
            let mut dn = pos;
            up[i] += h;
            dn[i] -= h;
            let fd = (eval_cd(&up, &neg, reg).0 - eval_cd(&dn, &neg, reg).0) / (2.0 * h);
            assert_relative_eq!(gp[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn cd_minimizer() {
        let reg = 0.05;
        let (_, gp, gn) = eval_cd(&[-1.0 / (2.0 * reg)], &[1.0 / (2.0 * reg)], reg);
        assert_relative_eq!(gp[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(gn[0], 0.0, epsilon = 1e-12);
        let at_min = eval_cd(&[-10.0], &[10.0], reg).0;
        assert!(eval_cd(&[-9.0], &[10.5], reg).0 > at_min);
        assert!(eval_cd(&[-1e6], &[1e6], reg).0 > at_min);
    }

    fn zero_mjem(c: usize) -> EnergyModel {
        let mut m = EnergyModel::new(
            Mode::Mjem,
            Architecture {
                input_dim: 2,
                hidden: vec![4],
                num_classes: c,
                slope: 0.2,
            },
            0,
        )
        .unwrap();
        for p in m.parameters_mut() {
            p.values_mut().fill(0.0);
        }
        m
    }

    fn batch(rows: &[[f64; 2]], y: Option<Vec<usize>>, tag: BatchTag) -> Batch {
        Batch {
            x: Tensor::from_rows(rows).unwrap(),
            y,
            tag,
        }
    }

    #[test]
    fn zero_model_joint_loss() {
        let m = zero_mjem(2);
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let clf = batch(&[[0.1, 0.2], [0.3, 0.4]], Some(vec![0, 1]), BatchTag::Augmented);
        let pos = batch(&[[0.5, 0.5]], None, BatchTag::Clean);
        let neg = Tensor::from_rows(&[[-0.5, 0.1]]).unwrap();
        let t = joint_loss(&m, &mut g, &p, &clf, &pos, &neg, 0.05, false).unwrap();
        assert_relative_eq!(t.breakdown.clf_loss.unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(t.breakdown.gen_loss, 0.0);
        assert_relative_eq!(t.breakdown.total, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn joint_loss_recomposes() {
        let m = EnergyModel::new(
            Mode::Mjem,
            Architecture {
                input_dim: 2,
                hidden: vec![8, 8],
                num_classes: 3,
                slope: 0.2,
            },
            21,
        )
        .unwrap();
        let clf = batch(&[[0.1, 0.2], [0.3, -0.4], [0.9, 0.0]], Some(vec![0, 2, 1]), BatchTag::Augmented);
        let pos = batch(&[[0.5, 0.5], [-0.2, 0.1]], None, BatchTag::Clean);
        let neg = Tensor::from_rows(&[[-0.5, 0.1], [0.7, 0.7]]).unwrap();
        let reg = 0.05;
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let t = joint_loss(&m, &mut g, &p, &clf, &pos, &neg, reg, false).unwrap();

        // independent recomposition from plain forward passes
        let logits = m.logits(&clf.x).unwrap();
        let y = clf.y.as_ref().unwrap();
        let xent: f64 = (0..3)
            .map(|i| {
                let row = logits.row(i);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[y[i]]
            })
            .sum::<f64>()
            / 3.0;
        let ep = m.energy(&pos.x).unwrap();
        let en = m.energy(&neg).unwrap();
        let gen: f64 = (0..2).map(|i| ep[i] - en[i] + reg * (ep[i] * ep[i] + en[i] * en[i])).sum::<f64>() / 2.0;
        assert!((t.breakdown.total - (xent + gen)).abs() < 1e-12);
        assert_eq!(t.breakdown.total, t.breakdown.gen_loss + t.breakdown.clf_loss.unwrap());

        // dropping the generative term leaves exactly the classifier loss
        let mut g2 = Graph::new();
        let p2 = m.bind(&mut g2, true);
        let (x2, _) = classification_loss(&m, &mut g2, &p2, &clf).unwrap();
        assert_eq!(g2.value(x2)[0].to_bits(), t.breakdown.clf_loss.unwrap().to_bits());
    }

    #[test]
    fn mode_and_tag_contracts() {
        let m = zero_mjem(2);
        let mut g = Graph::new();
        let p = m.bind(&mut g, true);
        let clf = batch(&[[0.1, 0.2]], Some(vec![0]), BatchTag::Augmented);
        let dirty = batch(&[[0.5, 0.5]], None, BatchTag::Augmented);
        let neg = Tensor::from_rows(&[[-0.5, 0.1]]).unwrap();
        assert!(matches!(
            joint_loss(&m, &mut g, &p, &clf, &dirty, &neg, 0.05, false),
            Err(Error::Invariant(_))
        ));
        assert!(joint_loss(&m, &mut g, &p, &clf, &dirty, &neg, 0.05, true).is_ok());
        assert!(matches!(uncond_loss(&m, &mut g, &p, &clf, &neg, 0.05, false), Err(Error::Config(_))));

        let mut u = EnergyModel::new(
            Mode::Uncond,
            Architecture {
                input_dim: 2,
                hidden: vec![4],
                num_classes: 0,
                slope: 0.2,
            },
            0,
        )
        .unwrap();
        u.energy_head_mut().unwrap().bias.values_mut()[0] = 0.5;
        let mut g = Graph::new();
        let p = u.bind(&mut g, true);
        let pos = batch(&[[0.5, 0.5]], None, BatchTag::Clean);
        let t = uncond_loss(&u, &mut g, &p, &pos, &neg, 0.05, false).unwrap();
        assert!(t.breakdown.clf_loss.is_none());
        assert_eq!(t.breakdown.total, t.breakdown.gen_loss);
        assert!(matches!(joint_loss(&u, &mut g, &p, &clf, &pos, &neg, 0.05, false), Err(Error::Config(_))));
    }

    fn added_moments(x: &Tensor, y: &Tensor) -> (f64, f64) {
        let d: Vec<f64> = x.values().iter().zip(y.values()).map(|(a, b)| b - a).collect();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let v = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64;
        (m, v)
    }

    #[test]
    fn noise_injection_moments() {
        let mut rng = stream(3, Stream::Augment);
        let x = Tensor::from_rows(&[[0.25, -0.5]]).unwrap();
        assert_eq!(inject_noise(&x, 0.0, &mut rng).unwrap(), x);

        let base = Tensor::zeros(vec![1_000_000, 1]);
        let once = inject_noise(&base, 0.1, &mut rng).unwrap();
        let (m, v) = added_moments(&base, &once);
        assert!(m.abs() < 0.001 && (0.0097..=0.0103).contains(&v), "{m} {v}");

        let twice = inject_noise(&once, 0.05, &mut rng).unwrap();
        let (_, v) = added_moments(&base, &twice);
        let want = 0.1f64.powi(2) + 0.05f64.powi(2);
        assert!((v / want - 1.0).abs() < 0.01, "{v} vs {want}");
    }
}
