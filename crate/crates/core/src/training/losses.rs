//! Contrastive and auxiliary losses over feature vectors, with analytic
//! gradients w.r.t. every feature argument.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perceptual::{dot, norm};

use super::{LossKind, TrainConfig};

/// Linear map + sigmoid scoring a feature as "is the instance".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Head {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim], b: 0.0 }
    }

    pub fn logit(&self, f: &[f64]) -> f64 {
        dot(&self.w, f) + self.b
    }

    pub fn predict(&self, f: &[f64]) -> f64 {
        sigmoid(self.logit(f))
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + 1
    }
}

/// Value and gradients of a loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_anchor: Vec<f64>,
    pub d_pos: Vec<Vec<f64>>,
    pub d_neg: Vec<Vec<f64>>,
    /// `(dw, db)` for the cross-entropy head.
    pub d_head: Option<(Vec<f64>, f64)>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cosine similarity and its gradients w.r.t. both arguments. Zero vectors
/// give similarity 0 and zero gradients.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let s = dot(a, b) / (na * nb);
    let da = a.iter().zip(b).map(|(x, y)| y / (na * nb) - s * x / (na * na)).collect();
    let db = a.iter().zip(b).map(|(x, y)| x / (na * nb) - s * y / (nb * nb)).collect();
    (s, da, db)
}

fn check_dims(anchor: &[f64], others: &[&[f64]]) -> Result<()> {
    match others.iter().find(|v| v.len() != anchor.len()) {
        Some(v) => Err(Error::DimensionMismatch(anchor.len(), v.len())),
        None => Ok(()),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau))
    }
}

struct Sims {
    pos: Vec<(f64, Vec<f64>, Vec<f64>)>,
    neg: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

fn sims(anchor: &[f64], pos: &[&[f64]], neg: &[&[f64]]) -> Sims {
    Sims {
        pos: pos.iter().map(|p| cosine_grad(anchor, p)).collect(),
        neg: neg.iter().map(|n| cosine_grad(anchor, n)).collect(),
    }
}

/// Chain per-similarity loss gradients back to the features.
fn assemble(value: f64, sims: &Sims, d_sp: &[f64], d_sn: &[f64], dim: usize) -> LossGrad {
    let mut d_anchor = vec![0.0; dim];
    let mut side = |terms: &[(f64, Vec<f64>, Vec<f64>)], ds: &[f64]| -> Vec<Vec<f64>> {
        terms
            .iter()
            .zip(ds)
            .map(|((_, da, db), g)| {
                for (acc, v) in d_anchor.iter_mut().zip(da) {
                    *acc += g * v;
                }
                db.iter().map(|v| g * v).collect()
            })
            .collect()
    };
    let d_pos = side(&sims.pos, d_sp);
    let d_neg = side(&sims.neg, d_sn);
    LossGrad {
        value,
        d_anchor,
        d_pos,
        d_neg,
        d_head: None,
    }
}

/// `-log(sum_p e^{s_p/tau} / (sum_p e^{s_p/tau} [if included] + sum_n e^{s_n/tau}))`.
fn contrastive_grad(anchor: &[f64], pos: &[&[f64]], neg: &[&[f64]], tau: f64, include_positive: bool) -> Result<LossGrad> {
    check_tau(tau)?;
    if pos.is_empty() {
        return Err(Error::EmptyPositives);
    }
    check_dims(anchor, pos)?;
    check_dims(anchor, neg)?;
    if !include_positive && neg.is_empty() {
        return Err(Error::InsufficientNegatives { needed: 1, available: 0 });
    }
    let s = sims(anchor, pos, neg);
    let lp: Vec<f64> = s.pos.iter().map(|t| t.0 / tau).collect();
    let ln: Vec<f64> = s.neg.iter().map(|t| t.0 / tau).collect();
    let num = log_sum_exp(lp.iter().copied());
    let den = if include_positive {
        log_sum_exp(lp.iter().chain(&ln).copied())
    } else {
        log_sum_exp(ln.iter().copied())
    };
    let value = den - num;
    let d_sp: Vec<f64> = lp
        .iter()
        .map(|&l| {
            let in_den = if include_positive { (l - den).exp() } else { 0.0 };
            (in_den - (l - num).exp()) / tau
        })
        .collect();
    let d_sn: Vec<f64> = ln.iter().map(|&l| (l - den).exp() / tau).collect();
    Ok(assemble(value, &s, &d_sp, &d_sn, anchor.len()))
}

/// InfoNCE over cosine similarities, positive included in the denominator.
pub fn info_nce(anchor: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64) -> Result<f64> {
    Ok(info_nce_grad(anchor, pos, negs, tau, true)?.value)
}

/// InfoNCE value and gradients; `include_positive = false` drops the
/// positive term from the denominator.
pub fn info_nce_grad(anchor: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64, include_positive: bool) -> Result<LossGrad> {
    contrastive_grad(anchor, &[pos], negs, tau, include_positive)
}

fn hinge_grad(anchor: &[f64], pos: &[&[f64]], neg: &[&[f64]], margin: f64) -> Result<LossGrad> {
    if pos.is_empty() {
        return Err(Error::EmptyPositives);
    }
    check_dims(anchor, pos)?;
    check_dims(anchor, neg)?;
    let s = sims(anchor, pos, neg);
    let count = (pos.len() * neg.len()) as f64;
    let mut value = 0.0;
    let mut d_sp = vec![0.0; pos.len()];
    let mut d_sn = vec![0.0; neg.len()];
    for (i, p) in s.pos.iter().enumerate() {
        for (j, n) in s.neg.iter().enumerate() {
            let v = margin - p.0 + n.0;
            if v > 0.0 {
                value += v / count;
                d_sp[i] -= 1.0 / count;
                d_sn[j] += 1.0 / count;
            }
        }
    }
    Ok(assemble(value, &s, &d_sp, &d_sn, anchor.len()))
}

fn cross_entropy_grad(anchor: &[f64], pos: &[&[f64]], neg: &[&[f64]], head: &Head) -> Result<LossGrad> {
    if pos.is_empty() {
        return Err(Error::EmptyPositives);
    }
    check_dims(&head.w, pos)?;
    check_dims(&head.w, neg)?;
    let count = (pos.len() + neg.len()) as f64;
    let mut value = 0.0;
    let mut dw = vec![0.0; head.w.len()];
    let mut db = 0.0;
    let mut side = |fs: &[&[f64]], label: f64| -> Vec<Vec<f64>> {
        fs.iter()
            .map(|f| {
                let z = head.logit(f);
                value += (softplus(z) - label * z) / count;
                let dz = (sigmoid(z) - label) / count;
                for (acc, x) in dw.iter_mut().zip(f.iter()) {
                    *acc += dz * x;
                }
                db += dz;
                head.w.iter().map(|w| dz * w).collect()
            })
            .collect()
    };
    let d_pos = side(pos, 1.0);
    let d_neg = side(neg, 0.0);
    Ok(LossGrad {
        value,
        d_anchor: vec![0.0; anchor.len()],
        d_pos,
        d_neg,
        d_head: Some((dw, db)),
    })
}

/// Any configured loss, value only.
pub fn alt_loss(
    kind: LossKind,
    anchor: &[f64],
    pos: &[&[f64]],
    neg: &[&[f64]],
    params: &TrainConfig,
    head: Option<&Head>,
) -> Result<f64> {
    Ok(alt_loss_grad(kind, anchor, pos, neg, params, head)?.value)
}

/// Any configured loss with gradients. `InfoNce` uses only the first
/// positive.
pub fn alt_loss_grad(
    kind: LossKind,
    anchor: &[f64],
    pos: &[&[f64]],
    neg: &[&[f64]],
    params: &TrainConfig,
    head: Option<&Head>,
) -> Result<LossGrad> {
    let include = params.include_positive_in_denominator;
    match kind {
        LossKind::InfoNce => {
            let first = pos.first().ok_or(Error::EmptyPositives)?;
            let mut g = contrastive_grad(anchor, &[first], neg, params.temperature, include)?;
            g.d_pos.resize(pos.len(), vec![0.0; anchor.len()]);
            Ok(g)
        }
        LossKind::InfoNceMultipos => contrastive_grad(anchor, pos, neg, params.temperature, include),
        LossKind::Hinge => hinge_grad(anchor, pos, neg, params.margin),
        LossKind::CrossEntropy => cross_entropy_grad(anchor, pos, neg, head.ok_or(Error::MissingHead)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unit vector at angle `theta` in the plane, so cosine with (1, 0) is cos(theta).
    fn at(cos: f64) -> Vec<f64> {
        vec![cos, (1.0 - cos * cos).sqrt()]
    }

    #[test]
    fn uniform_similarities() {
        let a = [1.0, 0.0, 0.0, 0.0];
        let p = [0.0, 1.0, 0.0, 0.0];
        let n1 = [0.0, 0.0, 1.0, 0.0];
        let n2 = [0.0, 0.0, 0.0, 1.0];
        let n3 = [0.0, -1.0, 0.0, 0.0];
        // s+ = 0 and all s_i = 0 except n3 which is orthogonal too.
        let v = info_nce(&a, &p, &[&n1, &n2, &n3], 1.0).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn worked_value() {
        let a = [1.0, 0.0];
        let v = info_nce(&a, &at(0.8), &[&at(0.2), &at(-0.4)], 0.5).unwrap();
        let oracle = -((1.6f64).exp() / ((1.6f64).exp() + (0.4f64).exp() + (-0.8f64).exp())).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.3306).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        let a = [1.0, 0.0];
        assert!(matches!(info_nce(&a, &[1.0], &[], 0.1), Err(Error::DimensionMismatch(2, 1))));
        assert!(matches!(info_nce(&a, &a, &[], 0.0), Err(Error::NonPositiveTemperature(_))));
        let cfg = TrainConfig::default();
        assert!(matches!(
            alt_loss(LossKind::CrossEntropy, &a, &[&a], &[], &cfg, None),
            Err(Error::MissingHead)
        ));
        assert!(matches!(
            alt_loss(LossKind::InfoNceMultipos, &a, &[], &[&a], &cfg, None),
            Err(Error::EmptyPositives)
        ));
    }

    #[test]
    fn multipos_reduces_to_info_nce() {
        let cfg = TrainConfig::default();
        let a = [0.3, -0.2, 0.9];
        let p = [0.1, 0.4, 0.5];
        let n = [[-0.3, 0.2, 0.1], [0.9, 0.9, -0.1]];
        let negs: Vec<&[f64]> = n.iter().map(|v| v.as_slice()).collect();
        let m = alt_loss(LossKind::InfoNceMultipos, &a, &[&p], &negs, &cfg, None).unwrap();
        assert_eq!(m, info_nce(&a, &p, &negs, cfg.temperature).unwrap());
    }

    #[test]
    fn hinge_and_cross_entropy_examples() {
        let cfg = TrainConfig::default();
        let a = [1.0, 0.0];
        let zero = alt_loss(LossKind::Hinge, &a, &[&[1.0, 0.0]], &[&[0.0, 1.0]], &cfg, None).unwrap();
        assert_eq!(zero, 0.0);
        let head = Head::zeros(2);
        let ce = alt_loss(LossKind::CrossEntropy, &a, &[&[0.3, 0.1]], &[&[-0.5, 2.0]], &cfg, Some(&head)).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_similarities() {
        let a = [1.0, 0.0];
        let negs = [at(0.1), at(0.3)];
        let nr: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let lo = info_nce(&a, &at(0.5), &nr, 0.2).unwrap();
        let hi = info_nce(&a, &at(0.6), &nr, 0.2).unwrap();
        assert!(hi < lo);
        let up = [at(0.1), at(0.4)];
        let ur: Vec<&[f64]> = up.iter().map(|v| v.as_slice()).collect();
        assert!(info_nce(&a, &at(0.5), &ur, 0.2).unwrap() > lo);
    }
}
