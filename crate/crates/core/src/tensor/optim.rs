use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub momentum: f32,
}

/// SGD with momentum and L2 weight decay:
/// `v = momentum * v + grad + weight_decay * param; param -= lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// Applies one update to `params` (always visited in the same order) and
    /// zeroes their gradients. Tensors without a gradient buffer are treated
    /// as having zero gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        cfg: SgdConfig,
    ) -> Result<()> {
        for (slot, p) in params.into_iter().enumerate() {
            if slot == self.velocity.len() {
                self.velocity.push(vec![0.0; p.numel()]);
            }
            let v = &mut self.velocity[slot];
            if v.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "optimizer slot {slot} holds {} values but parameter has {}",
                    v.len(),
                    p.numel()
                )));
            }
            let (grad, data) = p.grad_and_data_mut();
            match grad {
                Some(g) => {
                    for ((x, vv), gv) in data.iter_mut().zip(v.iter_mut()).zip(g.iter_mut()) {
                        *vv = cfg.momentum * *vv + *gv + cfg.weight_decay * *x;
                        *x -= cfg.lr * *vv;
                        *gv = 0.0;
                    }
                }
                None => {
                    for (x, vv) in data.iter_mut().zip(v.iter_mut()) {
                        *vv = cfg.momentum * *vv + cfg.weight_decay * *x;
                        *x -= cfg.lr * *vv;
                    }
                }
            }
        }
        Ok(())
    }
}
