//! Losses, optimizer, learning-rate schedule and single training steps.

use dtnet_tensor::nn::Mode;
use dtnet_tensor::{Graph, ParamStore, RngState, Scalar, Tensor, Var};

use crate::cells::Ctx;
use crate::decode::{self, Hypothesis};
use crate::encoder::RouteOpts;
use crate::error::{config_err, DtnError, Result};
use crate::metrics::{bleu, NGramStats};
use crate::model::{Captioner, ModelScorer};
use crate::vocab::{CaptionBatch, BOS, EOS, PAD};

/// Summed negative log-likelihood of valid targets, averaged over rows.
pub fn ce_loss<'g, T: Scalar>(logits: Var<'g, T>, batch: &CaptionBatch) -> Result<Var<'g, T>> {
    let valid: usize = batch.lengths.iter().sum();
    if valid == 0 {
        return Err(config_err("cross-entropy over an all-padding batch"));
    }
    let picked = logits.log_softmax()?.pick(&batch.targets)?;
    let mask = Tensor::from_f64(&[batch.batch, batch.steps], &batch.mask())?;
    let total = picked.mul(logits.graph().constant(mask))?.sum();
    Ok(total.scale(-1.0 / batch.batch as f64))
}

/// Correct and total argmax predictions on valid positions.
pub fn token_accuracy<T: Scalar>(logits: &Tensor<T>, batch: &CaptionBatch) -> (usize, usize) {
    let v = *logits.shape().last().unwrap_or(&1);
    let mask = batch.mask();
    let mut correct = 0;
    let mut total = 0;
    for (i, row) in logits.data().chunks(v).enumerate() {
        if mask[i] == 0.0 {
            continue;
        }
        total += 1;
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        if best == batch.targets[i] {
            correct += 1;
        }
    }
    (correct, total)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 5.0;

/// Bias-corrected Adam over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the accumulated gradients in `store`.
    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(config_err("optimizer state does not match the parameter store"));
        }
        for p in store.iter_mut() {
            if let Some(bad) = p.grad.data().iter().find(|g| !g.is_finite()) {
                return Err(DtnError::Numerical(format!("gradient of {} is {bad}", p.name)));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for ((w, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let step = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w = T::of(w.as_f64() - step);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.as_f64() * g.as_f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Ce,
    Scst,
}

/// Piecewise learning-rate table; every value is multiplied by `scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub peak: f64,
    pub scale: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 4,
            peak: 1e-4,
            scale: 1.0,
        }
    }
}

impl Schedule {
    /// `epoch` counts from 0; SCST epochs continue the CE numbering.
    pub fn lr(&self, phase: Phase, epoch: usize) -> f64 {
        let base = match phase {
            Phase::Ce => {
                if epoch < self.warmup_epochs {
                    self.peak * (epoch + 1) as f64 / self.warmup_epochs as f64
                } else if epoch < 10 {
                    self.peak
                } else if epoch < 12 {
                    2e-5
                } else {
                    4e-6
                }
            }
            Phase::Scst => match epoch {
                0..=34 => 5e-6,
                35..=39 => 2.5e-6,
                40..=44 => 5e-7,
                45..=49 => 2.5e-7,
                _ => 5e-8,
            },
        };
        base * self.scale
    }
}

/// `-(1/k) sum_i (r_i - b) log p_i` per image, averaged over images; rows of
/// `log_probs` come in groups of `k` consecutive hypotheses per image and `b`
/// is the group's mean reward.
pub fn scst_surrogate<'g, T: Scalar>(log_probs: Var<'g, T>, rewards: &[f64], k: usize) -> Result<Var<'g, T>> {
    let (coef, images) = scst_coefficients(rewards, k)?;
    if log_probs.shape() != [rewards.len()] {
        return Err(config_err(format!(
            "scst: {:?} log-probs for {} rewards",
            log_probs.shape(),
            rewards.len()
        )));
    }
    let c = log_probs.graph().constant(Tensor::from_f64(&[rewards.len()], &coef)?);
    Ok(log_probs.mul(c)?.sum().scale(1.0 / images as f64))
}

/// `r_i - b` with `b` the mean reward of each group of `k`.
pub fn advantages(rewards: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(config_err("SCST needs at least two sequences per image"));
    }
    if rewards.is_empty() || rewards.len() % k != 0 {
        return Err(config_err(format!("{} rewards do not split into groups of {k}", rewards.len())));
    }
    Ok(rewards
        .chunks(k)
        .flat_map(|group| {
            let b = group.iter().sum::<f64>() / k as f64;
            group.iter().map(move |r| r - b)
        })
        .collect())
}

/// Per-row weights `-(r_i - b)/k` of the surrogate and the image count.
pub fn scst_coefficients(rewards: &[f64], k: usize) -> Result<(Vec<f64>, usize)> {
    let coef = advantages(rewards, k)?.into_iter().map(|a| -a / k as f64).collect();
    Ok((coef, rewards.len() / k))
}

/// Teacher-forcing layout of generated hypotheses; finished ones score the end token.
pub fn hypothesis_batch(hyps: &[&Hypothesis]) -> CaptionBatch {
    let steps = hyps
        .iter()
        .map(|h| h.tokens.len() + usize::from(h.finished))
        .max()
        .unwrap_or(0)
        .max(1);
    let batch = hyps.len();
    let mut inputs = vec![PAD; batch * steps];
    let mut targets = vec![PAD; batch * steps];
    let mut lengths = Vec::with_capacity(batch);
    for (b, h) in hyps.iter().enumerate() {
        let mut seq: Vec<usize> = h.tokens.clone();
        if h.finished {
            seq.push(EOS);
        }
        let row = b * steps;
        inputs[row] = BOS;
        for (t, &w) in seq.iter().enumerate() {
            targets[row + t] = w;
            if t + 1 < steps {
                inputs[row + t + 1] = w;
            }
        }
        lengths.push(seq.len());
    }
    CaptionBatch {
        inputs,
        targets,
        lengths,
        batch,
        steps,
    }
}

/// Sum of masked token log-probabilities per row, `[R]`.
pub fn sequence_log_probs<'g, T: Scalar>(logits: Var<'g, T>, batch: &CaptionBatch) -> Result<Var<'g, T>> {
    let picked = logits.log_softmax()?.pick(&batch.targets)?;
    let mask = Tensor::from_f64(&[batch.batch, batch.steps], &batch.mask())?;
    let masked = picked.mul(logits.graph().constant(mask))?;
    let ones = Tensor::ones(&[batch.steps, 1]);
    Ok(masked.matmul(logits.graph().constant(ones))?.reshape(&[batch.batch])?)
}

/// CIDEr-D plus BLEU-4 of a candidate against its references.
pub fn reward(stats: &NGramStats<usize>, cand: &[usize], refs: &[Vec<usize>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(config_err("reward needs at least one reference"));
    }
    Ok(stats.cider_d(cand, refs)? + bleu(cand, refs, 4))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Mean reward of the scored sequences (SCST only).
    pub reward: Option<f64>,
    pub correct: usize,
    pub total: usize,
    pub grad_norm: f64,
}

fn check_loss(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(DtnError::Numerical(format!("loss is {loss}")))
    }
}

impl<T: Scalar> Captioner<T> {
    /// One cross-entropy step: forward, backward, clip and Adam update.
    pub fn ce_step(
        &mut self,
        feats: &Tensor<T>,
        captions: &[Vec<usize>],
        opt: &mut Adam,
        lr: f64,
        clip: f64,
        rng: &mut RngState,
    ) -> Result<StepStats> {
        let batch = CaptionBatch::from_captions(captions);
        let (loss, logits, grads) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.params, Mode::Train);
            let mut opts = RouteOpts {
                rng: Some(rng),
                ..RouteOpts::default()
            };
            let (enc, _) = self.net.encode(&ctx, g.constant(feats.clone()), &mut opts)?;
            let mem = self.net.decoder.memory(&ctx, enc)?;
            let logits = self.net.decoder.forward(&ctx, &mem, &batch.inputs, batch.steps)?;
            let loss = ce_loss(logits, &batch)?;
            check_loss(loss.item().as_f64())?;
            g.backward(loss)?;
            (loss.item().as_f64(), logits.value(), g.param_grads())
        };
        self.params.zero_grads();
        self.params.accumulate_grads(grads);
        let grad_norm = clip_grad_norm(&mut self.params, clip);
        opt.update(&mut self.params, lr)?;
        let (correct, total) = token_accuracy(&logits, &batch);
        Ok(StepStats {
            loss,
            reward: None,
            correct,
            total,
            grad_norm,
        })
    }

    /// Teacher-forced token accuracy without updating anything.
    pub fn teacher_forced_accuracy(&mut self, feats: &Tensor<T>, captions: &[Vec<usize>]) -> Result<(usize, usize)> {
        let batch = CaptionBatch::from_captions(captions);
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, &self.params, Mode::Eval);
        let (enc, _) = self
            .net
            .encode(&ctx, g.constant(feats.clone()), &mut RouteOpts::default())?;
        let mem = self.net.decoder.memory(&ctx, enc)?;
        let logits = self.net.decoder.forward(&ctx, &mem, &batch.inputs, batch.steps)?;
        Ok(token_accuracy(&logits.value(), &batch))
    }

    /// One self-critical step over the `k` beam hypotheses of every image.
    #[allow(clippy::too_many_arguments)]
    pub fn scst_step(
        &mut self,
        feats: &Tensor<T>,
        refs: &[Vec<Vec<usize>>],
        stats: &NGramStats<usize>,
        k: usize,
        opt: &mut Adam,
        lr: f64,
        clip: f64,
        rng: &mut RngState,
    ) -> Result<StepStats> {
        let images = feats.shape()[0];
        if refs.len() != images {
            return Err(config_err(format!("{} reference sets for {images} images", refs.len())));
        }
        let (memory, _) = self.encode_memory(feats, &mut RouteOpts::default())?;
        let spec = self.spec();
        let beams = {
            let mut scorer = ModelScorer {
                decoder: &self.net.decoder,
                params: &self.params,
                memory: &memory,
            };
            decode::beam(&mut scorer, images, k, spec)?
        };
        let mut rows = Vec::new();
        let mut sources = Vec::new();
        let mut rewards = Vec::new();
        for (i, hs) in beams.iter().enumerate() {
            if hs.is_empty() {
                return Err(DtnError::Numerical("beam search returned no hypothesis".into()));
            }
            for j in 0..k {
                // Short beams repeat their last hypothesis to keep groups of k.
                let h = &hs[j.min(hs.len() - 1)];
                rewards.push(reward(stats, &h.tokens, &refs[i])?);
                rows.push(h);
                sources.push(i);
            }
        }
        let batch = hypothesis_batch(&rows);
        let (loss, grads) = {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.params, Mode::Train);
            let mut opts = RouteOpts {
                rng: Some(rng),
                ..RouteOpts::default()
            };
            let (enc, _) = self.net.encode(&ctx, g.constant(feats.clone()), &mut opts)?;
            let mem = self.net.decoder.memory(&ctx, enc)?.select(&sources)?;
            let logits = self.net.decoder.forward(&ctx, &mem, &batch.inputs, batch.steps)?;
            let lp = sequence_log_probs(logits, &batch)?;
            let loss = scst_surrogate(lp, &rewards, k)?;
            check_loss(loss.item().as_f64())?;
            g.backward(loss)?;
            (loss.item().as_f64(), g.param_grads())
        };
        self.params.zero_grads();
        self.params.accumulate_grads(grads);
        let grad_norm = clip_grad_norm(&mut self.params, clip);
        opt.update(&mut self.params, lr)?;
        Ok(StepStats {
            loss,
            reward: Some(rewards.iter().sum::<f64>() / rewards.len() as f64),
            correct: 0,
            total: 0,
            grad_norm,
        })
    }
}
