//! First-order optimizers over flat parameter lists, plus gradient clipping
//! and the learning-rate schedule used by the trainers.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient for parameter {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("optimizer built for {expected} parameters, got {got}")]
    ParamCountMismatch { expected: usize, got: usize },
    #[error("shape mismatch at parameter {index}")]
    ShapeMismatch { index: usize },
}

fn check_grads<F: Scalar>(params: &[&mut Tensor<F>], grads: &[Tensor<F>]) -> Result<(), OptimError> {
    if params.len() != grads.len() {
        return Err(OptimError::ParamCountMismatch { expected: params.len(), got: grads.len() });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(OptimError::ShapeMismatch { index: i });
        }
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient { index: i });
        }
    }
    Ok(())
}

/// SGD with classical momentum: v <- m*v + g, p <- p - lr*v.
pub struct SgdMomentum<F: Scalar> {
    momentum: f64,
    velocity: Vec<Tensor<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(momentum: f64, shapes: &[[usize; 2]]) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0, 1)");
        let velocity = shapes.iter().map(|&[r, c]| Tensor::zeros(r, c)).collect();
        SgdMomentum { momentum, velocity }
    }

    pub fn for_params(momentum: f64, params: &[&Tensor<F>]) -> Self {
        let shapes: Vec<[usize; 2]> = params.iter().map(|p| p.shape()).collect();
        Self::new(momentum, &shapes)
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[Tensor<F>],
        lr: f64,
    ) -> Result<(), OptimError> {
        check_grads(params, grads)?;
        if params.len() != self.velocity.len() {
            return Err(OptimError::ParamCountMismatch {
                expected: self.velocity.len(),
                got: params.len(),
            });
        }
        let m = F::from_f64(self.momentum);
        let lr = F::from_f64(lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
            {
                *vv = m * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction. Defaults: betas (0.9, 0.999), eps 1e-8.
pub struct Adam<F: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

pub const ADAM_DEFAULT_LR: f64 = 0.001;

impl<F: Scalar> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, shapes: &[[usize; 2]]) -> Self {
        let m: Vec<Tensor<F>> = shapes.iter().map(|&[r, c]| Tensor::zeros(r, c)).collect();
        let v = m.clone();
        Adam { beta1, beta2, eps, t: 0, m, v }
    }

    pub fn with_defaults(shapes: &[[usize; 2]]) -> Self {
        Self::new(0.9, 0.999, 1e-8, shapes)
    }

    pub fn for_params(params: &[&Tensor<F>]) -> Self {
        let shapes: Vec<[usize; 2]> = params.iter().map(|p| p.shape()).collect();
        Self::with_defaults(&shapes)
    }

    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<F>],
        grads: &[Tensor<F>],
        lr: f64,
    ) -> Result<(), OptimError> {
        check_grads(params, grads)?;
        if params.len() != self.m.len() {
            return Err(OptimError::ParamCountMismatch { expected: self.m.len(), got: params.len() });
        }
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = lr / bc1;
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                let gf = gv.into_f64();
                let mf = b1 * mv.into_f64() + (1.0 - b1) * gf;
                let vf = b2 * vv.into_f64() + (1.0 - b2) * gf * gf;
                *mv = F::from_f64(mf);
                *vv = F::from_f64(vf);
                let denom = (vf / bc2).sqrt() + self.eps;
                *pv = *pv - F::from_f64(step * mf / denom);
            }
        }
        Ok(())
    }
}

/// lr(epoch) = lr0 * factor^epoch, epochs counted from zero.
pub fn exp_decay_schedule(lr0: f64, factor: f64, epoch: usize) -> f64 {
    lr0 * factor.powi(epoch as i32)
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> Result<f64, OptimError> {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient { index: i });
        }
        sq += g.sq_sum();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_grad(p: &Tensor<f64>) -> Tensor<f64> {
        // d/dx of 0.5*sum(x^2) is x
        p.clone()
    }

    #[test]
    fn sgd_without_momentum_descends_quadratic() {
        let mut p = Tensor::filled(1, 3, 4.0);
        let mut opt = SgdMomentum::for_params(0.0, &[&p]);
        for _ in 0..50 {
            let g = quad_grad(&p);
            opt.step(&mut [&mut p], &[g], 0.1).unwrap();
        }
        assert!(p.data().iter().all(|&v| v.abs() < 0.1));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // constant gradient 1: after two steps p = -lr*(1 + (1+m))
        let mut p = Tensor::<f64>::zeros(1, 1);
        let mut opt = SgdMomentum::for_params(0.9, &[&p]);
        let g = Tensor::filled(1, 1, 1.0);
        opt.step(&mut [&mut p], &[g.clone()], 0.5).unwrap();
        assert!((p.at(0, 0) - (-0.5)).abs() < 1e-12);
        opt.step(&mut [&mut p], &[g], 0.5).unwrap();
        assert!((p.at(0, 0) - (-0.5 - 0.5 * 1.9)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_size_is_lr() {
        // bias correction makes the very first update exactly lr * sign(g)
        let mut p = Tensor::<f64>::zeros(1, 2);
        let mut opt = Adam::for_params(&[&p]);
        let g = Tensor::from_rows(&[vec![3.0, -7.0]]);
        opt.step(&mut [&mut p], &[g], ADAM_DEFAULT_LR).unwrap();
        assert!((p.at(0, 0) + ADAM_DEFAULT_LR).abs() < 1e-9);
        assert!((p.at(0, 1) - ADAM_DEFAULT_LR).abs() < 1e-9);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = Tensor::filled(1, 4, 2.0);
        let mut opt = Adam::for_params(&[&p]);
        for _ in 0..2000 {
            let g = quad_grad(&p);
            opt.step(&mut [&mut p], &[g], 0.01).unwrap();
        }
        assert!(p.data().iter().all(|&v| v.abs() < 0.01));
    }

    #[test]
    fn schedule_decays_exponentially() {
        assert_eq!(exp_decay_schedule(10.0, 0.5, 0), 10.0);
        assert_eq!(exp_decay_schedule(10.0, 0.5, 3), 1.25);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![Tensor::<f64>::from_rows(&[vec![3.0, 4.0]])];
        let norm = clip_gradients(&mut grads, 10.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads[0].data(), &[3.0, 4.0]);
        let norm = clip_gradients(&mut grads, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = grads[0].sq_sum().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut p = Tensor::zeros(1, 1);
        let mut opt = SgdMomentum::for_params(0.0, &[&p]);
        let g = Tensor::filled(1, 1, f64::NAN);
        let err = opt.step(&mut [&mut p], &[g], 0.1).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { index: 0 });
        let mut grads = vec![Tensor::filled(1, 1, f64::INFINITY)];
        assert!(clip_gradients(&mut grads, 1.0).is_err());
    }
}
