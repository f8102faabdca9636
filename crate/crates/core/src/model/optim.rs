use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// First-order optimizer with per-tensor state (Adam moments).
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            p.expect_same_shape(g)?;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::contract("optimizer state does not match the parameter layout"));
        }
        self.steps += 1;
        let OptimizerConfig { kind, lr, weight_decay } = self.config;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let data = p.data_mut();
            for (k, (w, &gk)) in data.iter_mut().zip(g.data()).enumerate() {
                let grad = gk + weight_decay * *w;
                let update = match kind {
                    OptimizerKind::Sgd => grad,
                    OptimizerKind::Adam => {
                        let m = &mut self.m[i][k];
                        let v = &mut self.v[i][k];
                        *m = BETA1 * *m + (1.0 - BETA1) * grad;
                        *v = BETA2 * *v + (1.0 - BETA2) * grad * grad;
                        (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                    }
                };
                *w -= lr * update;
            }
        }
        Ok(())
    }
}
