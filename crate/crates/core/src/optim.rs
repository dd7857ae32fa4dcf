//! First-order optimizers over [`GcnParams`].

use serde::{Deserialize, Serialize};

use crate::model::GcnParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(crate::Error::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_DELTA: f64 = 1e-8;

/// Moment accumulators mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: Optimizer,
    pub first_moment: GcnParams,
    pub second_moment: GcnParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, like: &GcnParams) -> Self {
        Self { kind, first_moment: like.zeros_like(), second_moment: like.zeros_like(), step: 0 }
    }

    /// Applies one update `params ← params − lr · direction(grads)`.
    pub fn update(&mut self, params: &mut GcnParams, grads: &GcnParams, learning_rate: f64) {
        self.step += 1;
        match self.kind {
            Optimizer::Sgd => params.add_scaled(grads, -learning_rate),
            Optimizer::Adam => {
                let t = self.step as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(t);
                let bias2 = 1.0 - ADAM_BETA2.powi(t);
                let targets = params.tensors_mut();
                let grads = grads.tensors();
                let ms = self.first_moment.tensors_mut();
                let vs = self.second_moment.tensors_mut();
                for (((p, g), m), v) in targets.into_iter().zip(grads).zip(ms).zip(vs) {
                    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *p -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_DELTA);
                    });
                }
            }
        }
    }
}
