//! Adam, the warmup learning-rate schedule and the training loop with
//! validation-perplexity checkpoint selection.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::model::{DialogueExample, ForwardOptions, LossParts, LossWeights, MtnTct};
use crate::params::{Bound, ParamStore};
use crate::rng::keyed_rng;

/// `lr(s) = factor * d^-0.5 * min(s^-0.5, s * warmup^-1.5)`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub d_model: usize,
    pub warmup: usize,
    pub factor: f64,
}

impl WarmupSchedule {
    pub fn new(d_model: usize, warmup: usize) -> Result<Self> {
        if warmup == 0 || d_model == 0 {
            return Err(Error::Config("warmup steps and d_model must be at least 1".into()));
        }
        Ok(WarmupSchedule {
            d_model,
            warmup,
            factor: 1.0,
        })
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step == 0 {
            return Err(Error::Contract("learning rate is defined from step 1".into()));
        }
        let s = step as f64;
        let rise = s * (self.warmup as f64).powf(-1.5);
        let decay = s.powf(-0.5);
        Ok(self.factor * (self.d_model as f64).powf(-0.5) * decay.min(rise))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected Adam over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`. A non-finite
    /// gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        check_grads(store)?;
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = p.grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn check_grads(store: &ParamStore) -> Result<()> {
    for p in store.iter() {
        if let Some(index) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad {
                name: p.name.clone(),
                index,
            });
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// A model the training loop can drive.
pub trait Trainable {
    type Example;

    fn d_model(&self) -> usize;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Token-mean losses for one batch.
    fn batch_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        batch: &[&Self::Example],
        weights: LossWeights,
    ) -> Result<LossParts>;
    /// Summed answer negative log-likelihood and answer token count, with
    /// dropout off.
    fn answer_nll(&self, example: &Self::Example) -> Result<(f64, usize)>;
}

impl Trainable for MtnTct {
    type Example = DialogueExample;

    fn d_model(&self) -> usize {
        self.config().d_model
    }

    fn store(&self) -> &ParamStore {
        MtnTct::store(self)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        MtnTct::store_mut(self)
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        ctx: &mut Ctx,
        batch: &[&DialogueExample],
        weights: LossWeights,
    ) -> Result<LossParts> {
        MtnTct::batch_loss(self, g, b, ctx, batch, weights, ForwardOptions::default())
    }

    fn answer_nll(&self, example: &DialogueExample) -> Result<(f64, usize)> {
        MtnTct::answer_nll(self, example)
    }
}

/// `exp(total answer NLL / answer tokens)` over `examples`.
pub fn perplexity<M: Trainable>(model: &M, examples: &[M::Example]) -> Result<f64> {
    let mut nll = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let (n, c) = model.answer_nll(ex)?;
        nll += n;
        count += c;
    }
    if count == 0 {
        return Err(Error::Config("validation set has no answer tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub validate_every: usize,
    pub warmup: usize,
    pub lr_factor: f64,
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            dropout: 0.1,
            batch_size: 16,
            max_steps: 2000,
            seed: 0,
            validate_every: 100,
            warmup: 400,
            lr_factor: 1.0,
            clip_norm: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.batch_size == 0 || self.validate_every == 0 || self.warmup == 0 {
            return Err(Error::Config(
                "batch_size, validate_every and warmup must be at least 1".into(),
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(Error::Config(format!("lr_factor must be positive, got {}", self.lr_factor)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub answer: f64,
    pub caption: f64,
    pub summary: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    /// `(step, perplexity)` for every validation pass, starting at step 0.
    pub validations: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_perplexity: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub const LOG_FILE: &str = "train.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

struct Log {
    file: File,
    path: PathBuf,
}

impl Log {
    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.file, "{text}").map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains `model` in place. Writes `train.log` and `best.ckpt` into
/// `out_dir`; the checkpoint is rewritten only when validation perplexity
/// strictly improves. On return the model holds the final (not best) weights.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &[M::Example],
    valid_set: &[M::Example],
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    if train_set.is_empty() && config.max_steps > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let checkpoint = out_dir.join(BEST_CHECKPOINT);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = Log {
        file,
        path: log_path.clone(),
    };

    let mut schedule = WarmupSchedule::new(model.d_model(), config.warmup)?;
    schedule.factor = config.lr_factor;
    let mut adam = Adam::new(model.store(), config.adam);
    let mut order_rng = keyed_rng(config.seed, "batches");
    let mut dropout_rng = Some(keyed_rng(config.seed, "dropout"));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();

    let mut steps = Vec::with_capacity(config.max_steps);
    let mut validations = Vec::new();
    let initial = perplexity(&*model, valid_set)?;
    log.line(&format!("valid step 0 perplexity {initial:.9}"))?;
    model.store().save(&checkpoint)?;
    validations.push((0, initial));
    let (mut best_step, mut best_perplexity) = (0, initial);

    for step in 1..=config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let lr = schedule.lr(step)?;
        let abort = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss {
                step,
                checkpoint: checkpoint.clone(),
            },
            other => other,
        };
        let mut g = Graph::new();
        let b = model.store().bind(&mut g);
        let mut ctx = Ctx::train(config.dropout, dropout_rng.take().expect("dropout stream"));
        let parts = model
            .batch_loss(&mut g, &b, &mut ctx, &batch, config.weights)
            .map_err(abort)?;
        dropout_rng = ctx.into_rng();
        let record = StepRecord {
            step,
            lr,
            total: g.value(parts.total).item(),
            answer: g.value(parts.answer).item(),
            caption: g.value(parts.caption).item(),
            summary: g.value(parts.summary).item(),
        };
        g.backward(parts.total).map_err(abort)?;
        let store = model.store_mut();
        store.zero_grads();
        store.accumulate_grads(&g, &b);
        drop(g);
        check_grads(store)?;
        if let Some(max_norm) = config.clip_norm {
            clip_grad_norm(store, max_norm);
        }
        adam.step(store, lr)?;
        log.line(&format!(
            "step {step} lr {lr:.9e} L {:.9} L_Ans {:.9} L_C {:.9} L_S {:.9}",
            record.total, record.answer, record.caption, record.summary
        ))?;
        steps.push(record);

        if step % config.validate_every == 0 || step == config.max_steps {
            let ppl = perplexity(&*model, valid_set).map_err(abort)?;
            log.line(&format!("valid step {step} perplexity {ppl:.9}"))?;
            validations.push((step, ppl));
            if ppl < best_perplexity {
                best_perplexity = ppl;
                best_step = step;
                model.store().save(&checkpoint)?;
            }
        }
    }
    Ok(TrainSummary {
        steps,
        validations,
        best_step,
        best_perplexity,
        checkpoint,
        log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn warmup_examples() {
        let s = WarmupSchedule::new(32, 400).unwrap();
        let at = s.lr(400).unwrap();
        assert!((at - 32f64.powf(-0.5) * 400f64.powf(-0.5)).abs() < 1e-15);
        assert!((at - 0.008839).abs() < 1e-6);
        let ratio = s.lr(800).unwrap() / at;
        assert!((ratio - 2f64.powf(-0.5)).abs() < 1e-12);
        assert!(matches!(s.lr(0), Err(Error::Contract(_))));
        // branches cross at the warmup step
        let w = 400f64;
        assert!((w.powf(-0.5) - w * w.powf(-1.5)).abs() < 1e-15);
    }

    #[test]
    fn warmup_rises_then_decays() {
        let s = WarmupSchedule::new(32, 50).unwrap();
        for t in 1..50 {
            assert!(s.lr(t + 1).unwrap() > s.lr(t).unwrap());
        }
        for t in 50..200 {
            assert!(s.lr(t + 1).unwrap() < s.lr(t).unwrap());
        }
    }

    fn quadratic_store(start: &[f64]) -> ParamStore {
        let mut store = ParamStore::new(0);
        store.add("w", Tensor::vector(start.to_vec()));
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = quadratic_store(&[1.5, -2.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.iter().next().unwrap().value.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = quadratic_store(&[0.0, 0.0, 0.0]);
        store.iter_mut().next().unwrap().grad = vec![3.0, -0.02, 50.0];
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, 0.01).unwrap();
        let w = store.iter().next().unwrap().value.data().to_vec();
        for (x, sign) in w.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - sign * 0.01).abs() < 1e-9, "{w:?}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = sum (w - c)^2, minimum 0 at c
        let c = [0.7, -1.3, 2.2];
        let mut store = quadratic_store(&[0.0, 0.0, 0.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let loss = |s: &ParamStore| -> f64 {
            s.iter().next().unwrap().value.data().iter().zip(&c).map(|(w, c)| (w - c).powi(2)).sum()
        };
        let start = loss(&store);
        for t in 0..100 {
            let p = store.iter_mut().next().unwrap();
            p.grad = p.value.data().iter().zip(&c).map(|(w, c)| 2.0 * (w - c)).collect();
            let lr = 0.2 * 0.96f64.powi(t);
            adam.step(&mut store, lr).unwrap();
        }
        assert!(loss(&store) < 1e-3 * start, "{}", loss(&store));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = quadratic_store(&[1.0, 1.0]);
        store.iter_mut().next().unwrap().grad = vec![0.0, f64::NAN];
        let mut adam = Adam::new(&store, AdamConfig::default());
        match adam.step(&mut store, 0.1) {
            Err(Error::NonFiniteGrad { name, index }) => assert_eq!((name.as_str(), index), ("w", 1)),
            other => panic!("{other:?}"),
        }
        assert_eq!(store.iter().next().unwrap().value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = quadratic_store(&[0.0, 0.0]);
        store.iter_mut().next().unwrap().grad = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = &store.iter().next().unwrap().grad;
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_bad_dropout() {
        let cfg = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
