use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// First-order optimizer over named parameters.
///
/// Adam uses the bias-corrected update with betas (0.9, 0.999) and
/// epsilon 1e-8. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f32,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f32) -> Self {
        Self {
            kind,
            learning_rate,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd(learning_rate: f32) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f32) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter and zeroes its gradient.
    /// Fails before touching anything if a parameter has no gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let mut params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.learning_rate;
        for (name, param) in params.iter_mut() {
            let grad = param.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    param
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .for_each(|(p, g)| *p -= lr * g);
                }
                OptimizerKind::Adam => {
                    let n = grad.len();
                    let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                        first: vec![0.0; n],
                        second: vec![0.0; n],
                    });
                    if m.first.len() != n {
                        return Err(Error::InvalidShape {
                            op: "adam",
                            detail: format!("moment buffer for `{name}` holds {} values, parameter has {n}", m.first.len()),
                        });
                    }
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    for (((p, &g), m1), m2) in param
                        .data_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.first.iter_mut())
                        .zip(m.second.iter_mut())
                    {
                        *m1 = BETA1 * *m1 + (1.0 - BETA1) * g;
                        *m2 = BETA2 * *m2 + (1.0 - BETA2) * g * g;
                        let mhat = *m1 / c1;
                        let vhat = *m2 / c2;
                        *p -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
            param.zero_grad();
        }
        Ok(())
    }
}
