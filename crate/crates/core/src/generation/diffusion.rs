//! Personalized-generator objective: a reconstruction term on the instance
//! images plus a weighted prior-preservation term on category samples.
//! The sampler itself lives behind [`super::external::GeneratorClient`];
//! only the objective is computed here.

use crate::error::{Error, Result};

/// Per-timestep signal scale, noise scale and loss weight.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    weights: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas: Vec<f64>, sigmas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.len() != sigmas.len() || alphas.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "schedule lengths {}/{}/{}",
                alphas.len(),
                sigmas.len(),
                weights.len()
            )));
        }
        if alphas.iter().chain(&sigmas).chain(&weights).any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig("schedule entries must be positive".into()));
        }
        Ok(Self {
            alphas,
            sigmas,
            weights,
        })
    }

    /// Linear variance schedule (beta from 1e-4 to 0.02) with unit weights.
    pub fn linear(steps: usize) -> Self {
        let (b0, b1) = (1e-4, 0.02);
        let mut cum = 1.0;
        let mut alphas = Vec::with_capacity(steps);
        let mut sigmas = Vec::with_capacity(steps);
        for t in 0..steps {
            let beta = if steps == 1 {
                b0
            } else {
                b0 + (b1 - b0) * t as f64 / (steps - 1) as f64
            };
            cum *= 1.0 - beta;
            alphas.push(cum.sqrt());
            sigmas.push((1.0 - cum).sqrt());
        }
        Self {
            alphas,
            sigmas,
            weights: vec![1.0; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    pub fn at(&self, t: usize) -> Result<(f64, f64, f64)> {
        if t >= self.len() {
            return Err(Error::InvalidTimestep { t, len: self.len() });
        }
        Ok((self.alphas[t], self.sigmas[t], self.weights[t]))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000)
    }
}

/// A conditional denoiser `g(noisy, cond) -> clean estimate` with a flat
/// parameter vector.
pub trait Denoiser {
    fn num_params(&self) -> usize;
    fn predict(&self, noisy: &[f64], cond: &[f64]) -> Vec<f64>;
    /// Vector-Jacobian product w.r.t. the parameters.
    fn param_grad(&self, noisy: &[f64], cond: &[f64], grad_out: &[f64]) -> Vec<f64>;
}

/// `g(z, c) = W [z; c] + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDenoiser {
    pub n: usize,
    pub cond_dim: usize,
    /// Row-major `n x (n + cond_dim)` weights followed by `n` biases.
    pub params: Vec<f64>,
}

impl LinearDenoiser {
    pub fn new(n: usize, cond_dim: usize, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), n * (n + cond_dim) + n);
        Self { n, cond_dim, params }
    }
}

impl Denoiser for LinearDenoiser {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn predict(&self, noisy: &[f64], cond: &[f64]) -> Vec<f64> {
        let width = self.n + self.cond_dim;
        (0..self.n)
            .map(|i| {
                let row = &self.params[i * width..(i + 1) * width];
                let mut acc = self.params[self.n * width + i];
                acc += row[..self.n].iter().zip(noisy).map(|(a, b)| a * b).sum::<f64>();
                acc += row[self.n..].iter().zip(cond).map(|(a, b)| a * b).sum::<f64>();
                acc
            })
            .collect()
    }

    fn param_grad(&self, noisy: &[f64], cond: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let width = self.n + self.cond_dim;
        let mut g = vec![0.0; self.params.len()];
        for i in 0..self.n {
            let row = &mut g[i * width..(i + 1) * width];
            for (j, v) in noisy.iter().chain(cond).enumerate() {
                row[j] = grad_out[i] * v;
            }
            g[self.n * width + i] = grad_out[i];
        }
        g
    }
}

/// One noised training example.
#[derive(Clone, Copy, Debug)]
pub struct NoisedSample<'a> {
    pub x: &'a [f64],
    pub cond: &'a [f64],
    pub t: usize,
    pub eps: &'a [f64],
    /// Pixels excluded from the residual are `false` (masked training).
    pub loss_mask: Option<&'a [bool]>,
}

fn term<D: Denoiser>(
    denoiser: &D,
    s: &NoisedSample<'_>,
    schedule: &NoiseSchedule,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    if s.eps.len() != s.x.len() {
        return Err(Error::ShapeMismatch(format!("noise {} vs image {}", s.eps.len(), s.x.len())));
    }
    if let Some(m) = s.loss_mask {
        if m.len() != s.x.len() {
            return Err(Error::ShapeMismatch(format!("mask {} vs image {}", m.len(), s.x.len())));
        }
    }
    let (alpha, sigma, weight) = schedule.at(s.t)?;
    let noisy: Vec<f64> = s.x.iter().zip(s.eps).map(|(x, e)| alpha * x + sigma * e).collect();
    let pred = denoiser.predict(&noisy, s.cond);
    if pred.len() != s.x.len() {
        return Err(Error::ShapeMismatch(format!("prediction {} vs image {}", pred.len(), s.x.len())));
    }
    let keep = |i: usize| s.loss_mask.map_or(true, |m| m[i]);
    let resid: Vec<f64> = pred
        .iter()
        .zip(s.x)
        .enumerate()
        .map(|(i, (p, x))| if keep(i) { p - x } else { 0.0 })
        .collect();
    let value = scale * weight * resid.iter().map(|r| r * r).sum::<f64>();
    if let Some(g) = grad {
        let dpred: Vec<f64> = resid.iter().map(|r| 2.0 * scale * weight * r).collect();
        for (acc, v) in g.iter_mut().zip(denoiser.param_grad(&noisy, s.cond, &dpred)) {
            *acc += v;
        }
    }
    Ok(value)
}

/// Reconstruction loss on `instance` plus `lambda` times the prior
/// preservation loss on `prior`.
pub fn dreambooth_loss<D: Denoiser>(
    denoiser: &D,
    instance: &NoisedSample<'_>,
    prior: &NoisedSample<'_>,
    lambda: f64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    Ok(term(denoiser, instance, schedule, 1.0, None)? + term(denoiser, prior, schedule, lambda, None)?)
}

/// Loss and its gradient w.r.t. the denoiser parameters.
pub fn dreambooth_loss_grad<D: Denoiser>(
    denoiser: &D,
    instance: &NoisedSample<'_>,
    prior: &NoisedSample<'_>,
    lambda: f64,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; denoiser.num_params()];
    let v = term(denoiser, instance, schedule, 1.0, Some(&mut grad))?
        + term(denoiser, prior, schedule, lambda, Some(&mut grad))?;
    Ok((v, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns whatever clean target it was built for.
    struct Oracle(Vec<f64>, Vec<f64>);

    impl Denoiser for Oracle {
        fn num_params(&self) -> usize {
            0
        }
        fn predict(&self, _: &[f64], cond: &[f64]) -> Vec<f64> {
            if cond[0] > 0.0 {
                self.0.clone()
            } else {
                self.1.clone()
            }
        }
        fn param_grad(&self, _: &[f64], _: &[f64], _: &[f64]) -> Vec<f64> {
            vec![]
        }
    }

    /// Predicts a constant grid.
    struct Constant(Vec<f64>);

    impl Denoiser for Constant {
        fn num_params(&self) -> usize {
            0
        }
        fn predict(&self, _: &[f64], _: &[f64]) -> Vec<f64> {
            self.0.clone()
        }
        fn param_grad(&self, _: &[f64], _: &[f64], _: &[f64]) -> Vec<f64> {
            vec![]
        }
    }

    fn sample<'a>(x: &'a [f64], cond: &'a [f64], eps: &'a [f64], t: usize) -> NoisedSample<'a> {
        NoisedSample {
            x,
            cond,
            t,
            eps,
            loss_mask: None,
        }
    }

    #[test]
    fn perfect_reconstructor_is_zero() {
        let x = [0.2, -0.1, 0.4];
        let xp = [0.0, 0.3, -0.3];
        let eps = [1.0, -1.0, 0.5];
        let d = Oracle(x.to_vec(), xp.to_vec());
        let sched = NoiseSchedule::default();
        for lambda in [0.0, 1.0, 7.5] {
            let v = dreambooth_loss(&d, &sample(&x, &[1.0], &eps, 10), &sample(&xp, &[-1.0], &eps, 500), lambda, &sched).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn squared_l2_by_hand() {
        let x = [0.0, 0.0];
        let sched = NoiseSchedule::new(vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let d = Constant(vec![1.0, 1.0]);
        let v = dreambooth_loss(&d, &sample(&x, &[0.0], &[0.3, 0.1], 0), &sample(&x, &[0.0], &[0.0, 0.0], 0), 0.0, &sched)
            .unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn masked_residual_ignores_background() {
        let x = [0.0, 0.0];
        let sched = NoiseSchedule::new(vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let d = Constant(vec![1.0, 3.0]);
        let mask = [true, false];
        let mut inst = sample(&x, &[0.0], &[0.0, 0.0], 0);
        inst.loss_mask = Some(&mask);
        let v = dreambooth_loss(&d, &inst, &sample(&x, &[0.0], &[0.0, 0.0], 0), 0.0, &sched).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn errors() {
        let x = [0.0, 0.0];
        let d = Constant(vec![0.0, 0.0]);
        let sched = NoiseSchedule::linear(10);
        assert!(matches!(
            dreambooth_loss(&d, &sample(&x, &[0.0], &[0.0], 0), &sample(&x, &[0.0], &[0.0, 0.0], 0), 1.0, &sched),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            dreambooth_loss(&d, &sample(&x, &[0.0], &[0.0, 0.0], 10), &sample(&x, &[0.0], &[0.0, 0.0], 0), 1.0, &sched),
            Err(Error::InvalidTimestep { t: 10, len: 10 })
        ));
    }

    #[test]
    fn schedule_is_positive() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        for t in 0..s.len() {
            let (a, sg, w) = s.at(t).unwrap();
            assert!(a > 0.0 && sg > 0.0 && w > 0.0);
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
        }
        assert!(NoiseSchedule::new(vec![1.0], vec![0.0], vec![1.0]).is_err());
    }
}
