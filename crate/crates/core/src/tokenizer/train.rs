use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ForwardMode, LossTerms, TokenizerModel};
use super::{TokenizerError, TrainConfig};
use crate::numerics::{Adam, Graph, LrSchedule, NumericsError, Tensor, WarmupCosine};
use crate::quantizer::QuantizeError;

/// One completed optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

/// Mini-batch Adam on the VQ objective. Batches come from a per-epoch
/// shuffle seeded by `(seed, epoch)`, so any step can be replayed from a
/// checkpoint without saved RNG state.
pub struct Trainer {
    pub model: TokenizerModel,
    pub config: TrainConfig,
    adam: Adam,
    images: Vec<Tensor>,
    globals: Vec<Vec<u32>>,
    steps_per_epoch: u64,
}

fn diverged(step: u64) -> impl Fn(TokenizerError) -> TokenizerError {
    move |e| match e {
        TokenizerError::Numerics(NumericsError::NonFinite(what)) => TokenizerError::Diverged { step, detail: what },
        TokenizerError::Quantize(QuantizeError::NonFinite(row)) => TokenizerError::Diverged {
            step,
            detail: format!("encoder feature row {row} is not finite"),
        },
        other => other,
    }
}

fn schedule_for(config: &TrainConfig, steps_per_epoch: u64) -> WarmupCosine {
    WarmupCosine {
        base_lr: config.base_lr,
        warmup_steps: config.warmup_epochs * steps_per_epoch,
        total_steps: config.epochs * steps_per_epoch,
    }
}

impl Trainer {
    /// `features` holds one global feature vector per image.
    pub fn new(
        model: TokenizerModel,
        config: TrainConfig,
        images: Vec<Tensor>,
        features: &[Vec<f64>],
    ) -> Result<Self, TokenizerError> {
        let adam = Adam::new(config.adam, LrSchedule::Constant { lr: 0.0 }, model.params.tensors());
        Self::resume(model, config, images, features, adam)
    }

    /// Continues from a saved optimizer state.
    pub fn resume(
        model: TokenizerModel,
        config: TrainConfig,
        images: Vec<Tensor>,
        features: &[Vec<f64>],
        mut adam: Adam,
    ) -> Result<Self, TokenizerError> {
        config.validate()?;
        let first = images
            .first()
            .ok_or_else(|| TokenizerError::Config("training set is empty".into()))?;
        if images.iter().any(|im| im.shape() != first.shape()) {
            return Err(TokenizerError::Shape("training images differ in size".into()));
        }
        if features.len() != images.len() {
            return Err(TokenizerError::Shape(format!(
                "{} global features for {} images",
                features.len(),
                images.len()
            )));
        }
        let (m1, _) = adam.moments();
        if m1.len() != model.params.len()
            || m1
                .iter()
                .zip(model.params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TokenizerError::Config(
                "optimizer state does not match the model".into(),
            ));
        }
        let globals = features
            .iter()
            .map(|f| model.global_tokens(f))
            .collect::<Result<Vec<_>, _>>()?;
        let steps_per_epoch = images.len().div_ceil(config.batch_size) as u64;
        adam.schedule = LrSchedule::WarmupCosine(schedule_for(&config, steps_per_epoch));
        Ok(Self {
            model,
            config,
            adam,
            images,
            globals,
            steps_per_epoch,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs * self.steps_per_epoch
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    pub fn schedule(&self) -> WarmupCosine {
        schedule_for(&self.config, self.steps_per_epoch)
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// Dataset indices making up the batch for 0-based `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let within = (step % self.steps_per_epoch) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut rng);
        let b = self.config.batch_size;
        order[within * b..((within + 1) * b).min(order.len())].to_vec()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor), TokenizerError> {
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.images[0].shape());
        let data = idx
            .iter()
            .flat_map(|&i| self.images[i].data().iter().copied())
            .collect();
        let globals: Vec<Vec<u32>> = idx.iter().map(|&i| self.globals[i].clone()).collect();
        Ok((Tensor::new(shape, data)?, self.model.global_embeddings(&globals)?))
    }

    /// Loss terms for a batch at the current weights, without updating.
    pub fn evaluate(&self, idx: &[usize]) -> Result<LossTerms, TokenizerError> {
        let (x, fg) = self.batch(idx)?;
        let mut g = Graph::new();
        let fwd = self
            .model
            .vq_forward(&mut g, &x, &fg, self.config.beta, &ForwardMode::Live)?;
        Ok(fwd.terms(&g))
    }

    pub fn step(&mut self) -> Result<StepLog, TokenizerError> {
        let step = self.step_count();
        if step >= self.total_steps() {
            return Err(TokenizerError::Config(format!(
                "all {} steps already done",
                self.total_steps()
            )));
        }
        let on_nan = diverged(step + 1);
        let lr = self.adam.current_lr()?;
        let idx = self.batch_indices(step);
        let (x, fg) = self.batch(&idx)?;
        let mut g = Graph::new();
        let fwd = self
            .model
            .vq_forward(&mut g, &x, &fg, self.config.beta, &ForwardMode::Live)
            .map_err(&on_nan)?;
        let terms = fwd.terms(&g);
        if !terms.total.is_finite() {
            return Err(on_nan(NumericsError::NonFinite("loss".into()).into()));
        }
        let grads = g.backward(fwd.loss).map_err(|e| on_nan(e.into()))?;
        let grads: Vec<Tensor> = fwd
            .params
            .iter()
            .zip(self.model.params.tensors())
            .map(|(&id, p)| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let names: Vec<String> = self.model.params.names().to_vec();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut params: Vec<&mut Tensor> = self.model.params.tensors_mut().iter_mut().collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        self.adam
            .step(&names, &mut params, &grad_refs)
            .map_err(|e| on_nan(e.into()))?;
        Ok(StepLog {
            step: step + 1,
            epoch: step / self.steps_per_epoch,
            lr,
            loss: terms.total,
            recon: terms.recon,
            codebook: terms.codebook,
            commit: terms.commit,
        })
    }

    /// Runs `steps` more steps (or until the schedule ends), calling
    /// `on_step` after each.
    pub fn run(
        &mut self,
        steps: u64,
        mut on_step: impl FnMut(&Self, &StepLog),
    ) -> Result<Vec<StepLog>, TokenizerError> {
        let end = self.step_count().saturating_add(steps).min(self.total_steps());
        let mut logs = Vec::new();
        while self.step_count() < end {
            let log = self.step()?;
            on_step(self, &log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn into_parts(self) -> (TokenizerModel, Adam) {
        (self.model, self.adam)
    }
}
