use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

/// Linear warmup from 0 to `base_lr`, then a half-cycle cosine down to 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn lr_at(&self, step: u64) -> Result<f64, NumericsError> {
        if step > self.total_steps {
            return Err(NumericsError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let decay = self.total_steps - self.warmup_steps;
        if decay == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / decay as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant { lr: f64 },
    WarmupCosine(WarmupCosine),
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> Result<f64, NumericsError> {
        match self {
            LrSchedule::Constant { lr } => Ok(*lr),
            LrSchedule::WarmupCosine(s) => s.lr_at(step),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam state for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: LrSchedule,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, schedule: LrSchedule, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            schedule,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    /// Rebuild from saved moments (checkpoint resume).
    pub fn from_parts(
        config: AdamConfig,
        schedule: LrSchedule,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
        step: u64,
    ) -> Result<Self, NumericsError> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.shape() != b.shape()) {
            return Err(NumericsError::InvalidArgument("adam moment lists disagree".into()));
        }
        Ok(Self {
            config,
            schedule,
            first,
            second,
            step,
        })
    }

    /// Number of completed updates.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> Result<f64, NumericsError> {
        self.schedule.lr_at(self.step)
    }

    /// One update. `params` and `grads` are matched by position with the
    /// list the optimizer was created for; `names` label errors. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(
        &mut self,
        names: &[&str],
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
    ) -> Result<f64, NumericsError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            if p.shape() != self.first[i].shape() || g.shape() != p.shape() {
                return Err(NumericsError::Shape {
                    op: "adam_step",
                    detail: format!(
                        "parameter '{name}' has shape {:?}, gradient {:?}, state {:?}",
                        p.shape(),
                        g.shape(),
                        self.first[i].shape()
                    ),
                });
            }
            if !g.all_finite() {
                return Err(NumericsError::NonFinite(format!("gradient of parameter '{name}'")));
            }
        }
        let lr = self.schedule.lr_at(self.step)?;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> WarmupCosine {
        WarmupCosine {
            base_lr: 5e-4,
            warmup_steps: 500,
            total_steps: 2000,
        }
    }

    #[test]
    fn warmup_cosine_landmarks() {
        let s = sched();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(250).unwrap() - 2.5e-4).abs() < 1e-18);
        assert!((s.lr_at(500).unwrap() - 5e-4).abs() < 1e-18);
        assert!(s.lr_at(2000).unwrap().abs() < 1e-18);
        assert!(s.lr_at(2001).is_err());
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let s = sched();
        let before = s.lr_at(499).unwrap();
        let at = s.lr_at(500).unwrap();
        let after = s.lr_at(501).unwrap();
        assert!((at - before).abs() <= 5e-4 / 500.0 + 1e-15);
        assert!((at - after).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_fn(&[3], |i| i as f64);
        let orig = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), LrSchedule::Constant { lr: 0.1 }, [&p]);
        let g = Tensor::zeros(&[3]);
        adam.step(&["p"], &mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, orig);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), LrSchedule::Constant { lr: 0.1 }, [&p]);
        adam.step(&["w"], &mut [&mut p], &[&Tensor::scalar(1.0)]).unwrap();
        // m_hat = 1, v_hat = 1: delta = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_refused_with_name() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), LrSchedule::Constant { lr: 0.1 }, [&p]);
        let err = adam
            .step(&["encoder.conv_in.weight"], &mut [&mut p], &[&Tensor::scalar(f64::NAN)])
            .unwrap_err();
        assert!(err.to_string().contains("encoder.conv_in.weight"));
        assert_eq!(p.item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
