use serde::{Deserialize, Serialize};

use super::config::OptimizerKind;
use crate::params::ParamSet;
use crate::tensor::Tensor;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Rescales all tensors by `max_norm / ‖g‖` when the joint L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_by_global_norm(tensors: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = tensors.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in tensors.iter_mut() {
            t.scale_in_place(s);
        }
    }
    norm
}

/// Per-parameter-set optimizer slots. SGD uses `first` as the momentum
/// buffer; Adam uses `first`/`second` as moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub steps: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<P: ParamSet>(kind: OptimizerKind, params: &P) -> Self {
        let zeros = || params.named().iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect::<Vec<_>>();
        OptimizerState {
            kind,
            steps: 0,
            first: zeros(),
            second: if kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
        }
    }

    pub fn apply<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64, momentum: f64) {
        self.steps += 1;
        let grads = grads.named();
        let t = self.steps as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g = grads[i].1;
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = &mut self.first[i];
                    for ((pv, vv), gv) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((pv, mv), vv), gv) in
                        p.data.iter_mut().zip(m.data.iter_mut()).zip(v.data.iter_mut()).zip(&g.data)
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let mh = *mv / bc1;
                        let vh = *vv / bc2;
                        *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
