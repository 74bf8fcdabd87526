//! Parameter storage and SGD with momentum, weight decay, and a step
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// A named trainable tensor with its momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub momentum: Tensor,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
}

/// A named non-trainable tensor (running statistics and the like).
#[derive(Debug, Clone)]
pub struct NamedBuffer {
    pub name: String,
    pub value: Tensor,
}

/// All parameters and buffers of a model, with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    buffers: Vec<NamedBuffer>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> Result<usize, NnError> {
        self.add_param_with_decay(name, value, true)
    }

    pub fn add_param_with_decay(
        &mut self,
        name: &str,
        value: Tensor,
        decay: bool,
    ) -> Result<usize, NnError> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        let momentum = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            momentum,
            decay,
        });
        Ok(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<usize, NnError> {
        if self.buffers.iter().any(|b| b.name == name) {
            return Err(NnError::DuplicateName(name.to_string()));
        }
        self.buffers.push(NamedBuffer {
            name: name.to_string(),
            value,
        });
        Ok(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn buffers(&self) -> &[NamedBuffer] {
        &self.buffers
    }

    pub fn buffer(&self, i: usize) -> &NamedBuffer {
        &self.buffers[i]
    }

    pub fn buffer_mut(&mut self, i: usize) -> &mut NamedBuffer {
        &mut self.buffers[i]
    }

    /// Two distinct buffers borrowed mutably at once.
    pub fn buffer_pair_mut(&mut self, a: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
        assert_ne!(a, b, "buffer_pair_mut requires distinct indices");
        if a < b {
            let (lo, hi) = self.buffers.split_at_mut(b);
            (&mut lo[a].value, &mut hi[0].value)
        } else {
            let (lo, hi) = self.buffers.split_at_mut(a);
            (&mut hi[0].value, &mut lo[b].value)
        }
    }

    /// Total number of parameter elements.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// SGD hyperparameters and the step schedule that divides the learning rate
/// by `drop_factor` at each listed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub drop_factor: f64,
    pub drop_epochs: Vec<usize>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            drop_factor: 5.0,
            drop_epochs: vec![240, 480, 640, 800, 1000],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.base_lr > 0.0) {
            return Err(NnError::InvalidConfig(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        if !(self.drop_factor > 1.0) {
            return Err(NnError::InvalidConfig(format!(
                "drop_factor must be > 1, got {}",
                self.drop_factor
            )));
        }
        if self.drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NnError::InvalidConfig(
                "drop_epochs must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate in effect at `epoch`: the base rate divided by the drop
/// factor once per schedule entry that has been reached.
pub fn lr_at_epoch(cfg: &SgdConfig, epoch: usize) -> f64 {
    let drops = cfg.drop_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr / cfg.drop_factor.powi(drops as i32)
}

/// One momentum-SGD update with L2 weight decay folded into the gradient:
/// `g' = g + wd * w`, `v' = momentum * v + g'`, `w' = w - lr * v'`.
/// Gradients are cleared afterwards.
pub fn sgd_step(params: &mut ParamSet, cfg: &SgdConfig, lr: f64) -> Result<(), NnError> {
    for p in &mut params.params {
        let grad = p.grad.take().ok_or_else(|| NnError::MissingGradient {
            name: p.name.clone(),
        })?;
        let wd = if p.decay { cfg.weight_decay } else { 0.0 };
        let w = p.value.data_mut();
        let v = p.momentum.data_mut();
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            let g = gi + wd * *wi;
            *vi = cfg.momentum * *vi + g;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}
