//! AdamW with per-group learning rates and decoupled weight decay.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::params::{check_partition, ParamGroup, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Weight decay applies to matrices only, never to gates, biases or other
/// vectors.
pub fn decays(shape: [usize; 2]) -> bool {
    shape[0] > 1 && shape[1] > 1
}

#[derive(Clone, Debug)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    groups: Vec<ParamGroup>,
    state: Vec<Vec<Moments>>,
    step: u64,
}

impl AdamW {
    /// Fails with a partition error when a tensor name appears in two groups.
    pub fn new(groups: Vec<ParamGroup>, cfg: AdamWConfig) -> Result<Self> {
        check_partition(&groups)?;
        for g in &groups {
            if !(g.learning_rate >= 0.0 && g.learning_rate.is_finite()) {
                return Err(Error::Config(format!("group `{}` has learning rate {}", g.name, g.learning_rate)));
            }
        }
        let state = groups
            .iter()
            .map(|g| {
                g.tensors
                    .iter()
                    .map(|t| Moments {
                        m: Array2::zeros((t.shape[0], t.shape[1])),
                        v: Array2::zeros((t.shape[0], t.shape[1])),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg,
            groups,
            state,
            step: 0,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `sets[i]` and `grads[i]` belong to group `i`; a missing
    /// gradient counts as zero. Frozen groups are left untouched.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], grads: &[Vec<Option<Array2<f64>>>]) -> Result<()> {
        if sets.len() != self.groups.len() || grads.len() != self.groups.len() {
            return Err(Error::shape("optimizer groups", self.groups.len(), sets.len().min(grads.len())));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (gi, group) in self.groups.iter().enumerate() {
            let set = &mut *sets[gi];
            if set.len() != group.tensors.len() || grads[gi].len() != group.tensors.len() {
                return Err(Error::shape("optimizer group size", group.tensors.len(), set.len()));
            }
            if !group.trainable {
                continue;
            }
            let lr = group.learning_rate;
            for (ti, info) in group.tensors.iter().enumerate() {
                if set.name(ti) != info.name {
                    return Err(Error::Validation(format!("optimizer expected `{}`, found `{}`", info.name, set.name(ti))));
                }
                let p = set.get_mut(ti);
                let st = &mut self.state[gi][ti];
                if decays(info.shape) && weight_decay != 0.0 {
                    p.mapv_inplace(|w| w - lr * weight_decay * w);
                }
                match &grads[gi][ti] {
                    Some(g) => {
                        if g.dim() != p.dim() {
                            return Err(Error::shape("gradient", format!("{:?}", p.dim()), format!("{:?}", g.dim())));
                        }
                        Zip::from(p).and(&mut st.m).and(&mut st.v).and(g).for_each(|w, m, v, &g| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        });
                    }
                    None => Zip::from(p).and(&mut st.m).and(&mut st.v).for_each(|w, m, v| {
                        *m *= beta1;
                        *v *= beta2;
                        *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }),
                }
            }
        }
        Ok(())
    }
}
