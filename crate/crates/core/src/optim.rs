//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `θ ← θ - α g`
    Sgd,
    /// Adaptive moments with decoupled weight decay.
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adamw()
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

/// Optimizer with per-tensor state, allocated only for tensors it updates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    state: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be ≥ 0")));
        }
        Ok(Self {
            kind,
            lr,
            state: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Drops all moment statistics.
    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// Number of tensors currently carrying moment state.
    pub fn tracked_tensors(&self) -> usize {
        self.state.iter().filter(|s| s.is_some()).count()
    }

    /// Updates the tensors whose `active` flag is set. On a non-finite result
    /// nothing (parameters or state) is modified.
    pub fn step(
        &mut self,
        params: &mut ModelParameters,
        grads: &[Tensor],
        active: &[bool],
    ) -> Result<()> {
        let n = params.tensors().len();
        if grads.len() != n || active.len() != n {
            return Err(Error::Shape(format!(
                "{} grads / {} flags for {n} tensors",
                grads.len(),
                active.len()
            )));
        }
        if self.state.len() != n {
            self.state = vec![None; n];
        }
        let lr = self.lr as f32;
        let mut staged: Vec<(usize, Vec<f32>, Option<Moments>)> = Vec::new();
        for i in (0..n).filter(|&i| active[i]) {
            let w = params.tensor(i).data();
            let g = grads[i].data();
            if g.len() != w.len() {
                return Err(Error::Shape(format!("gradient {i} has wrong length")));
            }
            let (new_w, moments) = match self.kind {
                OptimizerKind::Sgd => (w.iter().zip(g).map(|(&w, &g)| w - lr * g).collect(), None),
                OptimizerKind::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let mut st = self.state[i].clone().unwrap_or_else(|| Moments {
                        m: vec![0.0; w.len()],
                        v: vec![0.0; w.len()],
                        t: 0,
                    });
                    st.t += 1;
                    let (b1, b2) = (beta1 as f32, beta2 as f32);
                    let bc1 = 1.0 - (beta1.powi(st.t as i32)) as f32;
                    let bc2 = 1.0 - (beta2.powi(st.t as i32)) as f32;
                    let decay = 1.0 - lr * weight_decay as f32;
                    let mut out = Vec::with_capacity(w.len());
                    for j in 0..w.len() {
                        st.m[j] = b1 * st.m[j] + (1.0 - b1) * g[j];
                        st.v[j] = b2 * st.v[j] + (1.0 - b2) * g[j] * g[j];
                        let mhat = st.m[j] / bc1;
                        let vhat = st.v[j] / bc2;
                        out.push(w[j] * decay - lr * mhat / (vhat.sqrt() + eps as f32));
                    }
                    (out, Some(st))
                }
            };
            if new_w.iter().any(|v: &f32| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "update of {}",
                    params.layout().name(i)
                )));
            }
            staged.push((i, new_w, moments));
        }
        for (i, w, st) in staged {
            params.tensors_mut()[i].data_mut().copy_from_slice(&w);
            if st.is_some() {
                self.state[i] = st;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParameters {
        ModelParameters::init(&ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 4,
            d_ff: 4,
            vocab_size: 5,
            context_len: 4,
            seed: 0,
        })
        .unwrap()
    }

    fn grads_like(p: &ModelParameters, v: f32) -> Vec<Tensor> {
        p.tensors().iter().map(|t| Tensor::full(t.shape(), v)).collect()
    }

    #[test]
    fn sgd_step_and_inactive_untouched() {
        let mut p = tiny();
        let before = p.clone();
        let mut active = vec![false; p.tensors().len()];
        active[0] = true;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        let g = grads_like(&p, 0.5);
        opt.step(&mut p, &g, &active).unwrap();
        for (i, (a, b)) in p.tensors().iter().zip(before.tensors()).enumerate() {
            if i == 0 {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert_eq!(*x, y - 0.05);
                }
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = tiny();
        let before = p.clone();
        let active = vec![true; p.tensors().len()];
        let mut opt = Optimizer::new(OptimizerKind::adamw(), 1e-3).unwrap();
        let g = grads_like(&p, 2.0);
        opt.step(&mut p, &g, &active).unwrap();
        let d = before.tensor(0).data()[0] - p.tensor(0).data()[0];
        assert!((d - 1e-3).abs() < 1e-6);
        assert_eq!(opt.tracked_tensors(), p.tensors().len());
        opt.reset();
        assert_eq!(opt.tracked_tensors(), 0);
    }

    #[test]
    fn non_finite_update_leaves_everything_untouched() {
        let mut p = tiny();
        let before = p.clone();
        let active = vec![true; p.tensors().len()];
        let mut g = grads_like(&p, 0.1);
        g[2].data_mut()[0] = f32::NAN;
        let mut opt = Optimizer::new(OptimizerKind::adamw(), 1e-2).unwrap();
        assert!(opt.step(&mut p, &g, &active).is_err());
        assert_eq!(p, before);
        assert_eq!(opt.tracked_tensors(), 0);
        assert!(Optimizer::new(OptimizerKind::Sgd, -1.0).is_err());
    }
}
