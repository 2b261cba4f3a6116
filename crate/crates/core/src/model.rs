//! Full captioner: input projection, dynamic encoder and decoder.

use dtnet_tensor::nn::Mode;
use dtnet_tensor::{Graph, ParamId, ParamStore, RngState, Scalar, Tensor, Var};

use crate::cells::Ctx;
use crate::config::EncoderConfig;
use crate::decode::{self, DecodeSpec, Hypothesis, StepScorer};
use crate::decoder::{Decoder, DecoderConfig, MemoryValues};
use crate::encoder::{Encoder, LayerTrace, RouteOpts};
use crate::error::{config_err, Result};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Channels of the input feature grid.
    pub feature_dim: usize,
    pub decoder_layers: usize,
    pub vocab: usize,
    /// Maximum generated tokens per caption, the end token included.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder_layers,
            d_model: self.encoder.d_model,
            heads: self.encoder.heads,
            vocab: self.vocab,
            max_positions: self.max_len + 1,
            memory_positions: self.encoder.grid_positions(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Sample,
    Beam(usize),
}

/// Model structure; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub in_pos: ParamId,
    pub encoder: Encoder<T>,
    pub decoder: Decoder,
}

impl<T: Scalar> Network<T> {
    /// Projects `[B,H,W,F]` features to `d_model` and runs the encoder.
    pub fn encode<'g>(
        &mut self,
        ctx: &Ctx<'g, T>,
        feats: Var<'g, T>,
        opts: &mut RouteOpts<'_, T>,
    ) -> Result<(Var<'g, T>, Vec<LayerTrace<T>>)> {
        let s = feats.shape();
        let d = self.encoder.cfg.d_model;
        let pos = ctx.p(self.in_pos).reshape(&[s[1], s[2], d])?;
        let x = feats.matmul(ctx.p(self.in_w))?.add(ctx.p(self.in_b))?.add(pos)?;
        self.encoder.forward(ctx, x, opts)
    }
}

#[derive(Clone, Debug)]
pub struct Captioner<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub net: Network<T>,
}

/// Decoder scorer over detached encoder memory.
pub struct ModelScorer<'a, T> {
    pub decoder: &'a Decoder,
    pub params: &'a ParamStore<T>,
    pub memory: &'a MemoryValues<T>,
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn next_log_probs(&mut self, sources: &[usize], prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, self.params, Mode::Eval);
        let mem = self.memory.gather(&g, sources)?;
        let steps = prefixes.first().map_or(0, Vec::len);
        let tokens: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let lp = self.decoder.next_log_probs(&ctx, &mem, &tokens, steps)?.value();
        let v = self.decoder.cfg.vocab;
        Ok(lp.data().chunks(v).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect())
    }
}

impl<T: Scalar> Captioner<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.feature_dim == 0 || cfg.max_len == 0 {
            return Err(config_err("feature_dim and max_len must be positive"));
        }
        let mut rng = RngState::new(seed);
        let mut params = ParamStore::new();
        let d = cfg.encoder.d_model;
        let in_w = params.add_uniform("in_proj.W", &[cfg.feature_dim, d], cfg.feature_dim, &mut rng)?;
        let in_b = params.add_zeros("in_proj.b", &[d])?;
        let in_pos = params.add_uniform("in_proj.pos", &[cfg.encoder.grid_positions(), d], d, &mut rng)?;
        let encoder = Encoder::new(&cfg.encoder, &mut params, &mut rng)?;
        let decoder = Decoder::new(&cfg.decoder(), &mut params, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            net: Network {
                in_w,
                in_b,
                in_pos,
                encoder,
                decoder,
            },
        })
    }

    pub fn spec(&self) -> DecodeSpec {
        DecodeSpec {
            bos: BOS,
            eos: Some(EOS),
            max_len: self.cfg.max_len,
        }
    }

    /// Eval-mode encoding of `[B,H,W,F]` features into detached decoder memory.
    pub fn encode_memory(
        &mut self,
        feats: &Tensor<T>,
        opts: &mut RouteOpts<'_, T>,
    ) -> Result<(MemoryValues<T>, Vec<LayerTrace<T>>)> {
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, &self.params, Mode::Eval);
        let (enc, traces) = self.net.encode(&ctx, g.constant(feats.clone()), opts)?;
        let mem = self.net.decoder.memory(&ctx, enc)?;
        Ok((mem.values(), traces))
    }

    /// Path weights of an eval-mode pass.
    pub fn trace(&mut self, feats: &Tensor<T>) -> Result<Vec<LayerTrace<T>>> {
        Ok(self.encode_memory(feats, &mut RouteOpts::traced())?.1)
    }

    /// Captions for every sample; `Greedy` and `Sample` yield one hypothesis each.
    pub fn generate(
        &mut self,
        feats: &Tensor<T>,
        mode: DecodeMode,
        rng: Option<&mut RngState>,
        opts: &mut RouteOpts<'_, T>,
    ) -> Result<Vec<Vec<Hypothesis>>> {
        let samples = feats.shape()[0];
        let (memory, _) = self.encode_memory(feats, opts)?;
        let spec = self.spec();
        let mut scorer = ModelScorer {
            decoder: &self.net.decoder,
            params: &self.params,
            memory: &memory,
        };
        Ok(match mode {
            DecodeMode::Greedy => decode::greedy(&mut scorer, samples, spec)?
                .into_iter()
                .map(|h| vec![h])
                .collect(),
            DecodeMode::Sample => {
                let rng = rng.ok_or_else(|| config_err("sampling needs an rng"))?;
                decode::sample(&mut scorer, samples, spec, rng)?
                    .into_iter()
                    .map(|h| vec![h])
                    .collect()
            }
            DecodeMode::Beam(k) => decode::beam(&mut scorer, samples, k, spec)?,
        })
    }

    /// Greedy captions over precomputed memory.
    pub fn greedy_from_memory(&self, memory: &MemoryValues<T>, samples: usize) -> Result<Vec<Hypothesis>> {
        let mut scorer = ModelScorer {
            decoder: &self.net.decoder,
            params: &self.params,
            memory,
        };
        decode::greedy(&mut scorer, samples, self.spec())
    }

    /// Best caption per sample.
    pub fn caption(&mut self, feats: &Tensor<T>, mode: DecodeMode) -> Result<Vec<Vec<usize>>> {
        let hyps = self.generate(feats, mode, None, &mut RouteOpts::default())?;
        Ok(hyps
            .into_iter()
            .map(|h| h.into_iter().next().map(|h| h.tokens).unwrap_or_default())
            .collect())
    }
}
