use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    RmsProp { alpha: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    /// Smoothing and epsilon used by the A2C baselines.
    pub fn rmsprop() -> Self {
        OptimizerKind::RmsProp { alpha: 0.99, eps: 1e-5 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, tensor_sizes: &[usize]) -> Self {
        let zeros = || tensor_sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::RmsProp { .. } => (Vec::new(), zeros()),
            OptimizerKind::Adam { .. } => (zeros(), zeros()),
        };
        Self {
            kind,
            first,
            second,
            steps: 0,
        }
    }

    pub fn for_net(kind: OptimizerKind, net: &super::DenseNet) -> Self {
        Self::new(kind, &net.tensor_sizes())
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over parallel lists of parameter and gradient tensors.
    /// Parameters are only written where the computed step is nonzero, so
    /// `lr = 0` leaves them bitwise unchanged.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::mismatch(params.len(), grads.len(), "optimizer tensor count"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::mismatch(p.len(), g.len(), "optimizer tensor length"));
            }
            let expected = match self.kind {
                OptimizerKind::Sgd => None,
                _ => Some(self.second.get(i).map_or(usize::MAX, Vec::len)),
            };
            if let Some(n) = expected {
                if n != p.len() {
                    return Err(Error::mismatch(n, p.len(), "optimizer state shape"));
                }
            }
        }
        if !grads.iter().all(|g| g.iter().all(|x| x.is_finite())) {
            return Err(Error::NonFinite("gradients"));
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Hyperparam(format!("learning rate {lr}")));
        }

        self.steps += 1;
        let t = self.steps as f64;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pj, &gj) in p.iter_mut().zip(g.iter()) {
                        let d = lr * gj;
                        if d != 0.0 {
                            *pj -= d;
                        }
                    }
                }
                OptimizerKind::RmsProp { alpha, eps } => {
                    let v = &mut self.second[i];
                    for ((pj, &gj), vj) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *vj = alpha * *vj + (1.0 - alpha) * gj * gj;
                        let d = lr * gj / (vj.sqrt() + eps);
                        if d != 0.0 {
                            *pj -= d;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let step = lr / (1.0 - beta1.powf(t));
                    let inv_c2 = 1.0 / (1.0 - beta2.powf(t));
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((pj, &gj), mj), vj) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mj = beta1 * *mj + (1.0 - beta1) * gj;
                        *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                        let d = step * *mj / ((*vj * inv_c2).sqrt() + eps);
                        // Branch-free so the loop vectorizes.
                        *pj = if d != 0.0 { *pj - d } else { *pj };
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(kind: OptimizerKind, theta: f64, g: f64, lr: f64) -> f64 {
        let mut opt = OptimizerState::new(kind, &[1]);
        let mut p = [theta];
        opt.step(&mut [&mut p[..]], &[&[g][..]], lr).unwrap();
        p[0]
    }

    #[test]
    fn sgd_definition() {
        assert_eq!(scalar_step(OptimizerKind::Sgd, 1.0, 0.5, 0.1), 0.95);
    }

    #[test]
    fn zero_lr_is_identity() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::rmsprop(), OptimizerKind::adam()] {
            let theta = -0.123456789;
            assert_eq!(scalar_step(kind, theta, 0.7, 0.0).to_bits(), theta.to_bits());
        }
    }

    #[test]
    fn adam_first_step_matches_hand_recurrence() {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let (theta, g, lr) = (0.4, -0.3, 0.01);
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = theta - lr * m_hat / (v_hat.sqrt() + eps);
        let got = scalar_step(OptimizerKind::Adam { beta1: b1, beta2: b2, eps }, theta, g, lr);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, &[2]);
        let mut p = [1.0, 2.0];
        let err = opt.step(&mut [&mut p[..]], &[&[f64::NAN, 0.0][..]], 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(opt.steps(), 0);
    }
}
