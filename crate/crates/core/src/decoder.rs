//! Post-norm transformer decoder over the encoded grid.

use dtnet_tensor::nn::causal_mask;
use dtnet_tensor::{Graph, ParamId, ParamStore, RngState, Scalar, Tensor, Var};

use crate::cells::{attend, Ctx, FFN_EXPANSION};
use crate::error::{config_err, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    /// Longest token prefix the positional table covers.
    pub max_positions: usize,
    /// Encoder grid positions (H*W).
    pub memory_positions: usize,
}

#[derive(Clone, Debug)]
struct Attn {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl Attn {
    fn new<T: Scalar>(prefix: &str, d: usize, store: &mut ParamStore<T>, rng: &mut RngState) -> Result<Self> {
        let mut w = |m: &str| store.add_uniform(format!("{prefix}.{m}"), &[d, d], d, rng);
        Ok(Self {
            wq: w("Wq")?,
            wk: w("Wk")?,
            wv: w("Wv")?,
            wo: w("Wo")?,
        })
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Scalar>(prefix: &str, d: usize, store: &mut ParamStore<T>) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(format!("{prefix}.gamma"), &[d])?,
            beta: store.add_zeros(format!("{prefix}.beta"), &[d])?,
        })
    }

    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(ctx
            .g
            .layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta), T::of(LN_EPS))?)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attn,
    cross_attn: Attn,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln: [Norm; 3],
}

/// Per-layer cross-attention keys and values, each `[R,N,d]`.
pub struct Memory<'g, T: Scalar> {
    pub kv: Vec<(Var<'g, T>, Var<'g, T>)>,
}

impl<'g, T: Scalar> Memory<'g, T> {
    pub fn rows(&self) -> usize {
        self.kv.first().map_or(0, |(k, _)| k.shape()[0])
    }

    /// Memory rows gathered by sample index (e.g. one row per beam hypothesis).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let kv = self
            .kv
            .iter()
            .map(|(k, v)| Ok((k.index_select(idx)?, v.index_select(idx)?)))
            .collect::<Result<_>>()?;
        Ok(Self { kv })
    }

    pub fn values(&self) -> MemoryValues<T> {
        MemoryValues {
            kv: self.kv.iter().map(|(k, v)| (k.value(), v.value())).collect(),
        }
    }
}

/// Detached copy of a [`Memory`], reusable across graphs.
#[derive(Clone, Debug)]
pub struct MemoryValues<T> {
    pub kv: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> MemoryValues<T> {
    /// Constants holding rows `idx` of every layer's keys and values.
    pub fn gather<'g>(&self, g: &'g Graph<T>, idx: &[usize]) -> Result<Memory<'g, T>> {
        let pick = |t: &Tensor<T>| -> Result<Var<'g, T>> {
            let s = t.shape();
            let row: usize = s[1..].iter().product();
            let mut data = Vec::with_capacity(idx.len() * row);
            for &i in idx {
                data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
            }
            let mut shape = s.to_vec();
            shape[0] = idx.len();
            Ok(g.constant(Tensor::new(&shape, data)?))
        };
        let kv = self
            .kv
            .iter()
            .map(|(k, v)| Ok((pick(k)?, pick(v)?)))
            .collect::<Result<_>>()?;
        Ok(Memory { kv })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    grid_pos: ParamId,
    layers: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Decoder {
    /// Registers parameters under `dec.*`.
    pub fn new<T: Scalar>(cfg: &DecoderConfig, store: &mut ParamStore<T>, rng: &mut RngState) -> Result<Self> {
        let d = cfg.d_model;
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(config_err(format!("decoder d_model {d} not divisible by {} heads", cfg.heads)));
        }
        if cfg.vocab == 0 || cfg.max_positions == 0 {
            return Err(config_err("decoder needs a vocabulary and at least one position"));
        }
        let tok_emb = store.add_uniform("dec.tok_emb", &[cfg.vocab, d], d, rng)?;
        let pos_emb = store.add_uniform("dec.pos_emb", &[cfg.max_positions, d], d, rng)?;
        let grid_pos = store.add_uniform("dec.grid_pos", &[cfg.memory_positions, d], d, rng)?;
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let p = format!("dec.{l}");
            let hid = FFN_EXPANSION * d;
            layers.push(DecoderLayer {
                self_attn: Attn::new(&format!("{p}.self"), d, store, rng)?,
                cross_attn: Attn::new(&format!("{p}.cross"), d, store, rng)?,
                w1: store.add_uniform(format!("{p}.ffn.W1"), &[d, hid], d, rng)?,
                b1: store.add_zeros(format!("{p}.ffn.b1"), &[hid])?,
                w2: store.add_uniform(format!("{p}.ffn.W2"), &[hid, d], hid, rng)?,
                b2: store.add_zeros(format!("{p}.ffn.b2"), &[d])?,
                ln: [
                    Norm::new(&format!("{p}.ln1"), d, store)?,
                    Norm::new(&format!("{p}.ln2"), d, store)?,
                    Norm::new(&format!("{p}.ln3"), d, store)?,
                ],
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            grid_pos,
            layers,
            out_w: store.add_uniform("dec.out.W", &[d, cfg.vocab], d, rng)?,
            out_b: store.add_zeros("dec.out.b", &[cfg.vocab])?,
        })
    }

    /// Cross-attention keys and values from the encoder output `[B,H,W,C]`.
    pub fn memory<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, enc: Var<'g, T>) -> Result<Memory<'g, T>> {
        let s = enc.shape();
        if s.len() != 4 || s[1] * s[2] != self.cfg.memory_positions || s[3] != self.cfg.d_model {
            return Err(config_err(format!(
                "decoder memory expects [B,H,W,{}] with H*W={}, got {s:?}",
                self.cfg.d_model, self.cfg.memory_positions
            )));
        }
        let m = enc.reshape(&[s[0], s[1] * s[2], s[3]])?.add(ctx.p(self.grid_pos))?;
        let kv = self
            .layers
            .iter()
            .map(|l| {
                Ok((
                    m.matmul(ctx.p(l.cross_attn.wk))?,
                    m.matmul(ctx.p(l.cross_attn.wv))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Memory { kv })
    }

    /// Final hidden states `[R,T,d]` for token rows `tokens` (`[R,T]` row-major).
    pub fn hidden<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        mem: &Memory<'g, T>,
        tokens: &[usize],
        steps: usize,
    ) -> Result<Var<'g, T>> {
        let rows = mem.rows();
        if steps == 0 || tokens.len() != rows * steps {
            return Err(config_err(format!(
                "decoder: {} tokens for {rows} rows of {steps} steps",
                tokens.len()
            )));
        }
        if steps > self.cfg.max_positions {
            return Err(config_err(format!(
                "decoder: {steps} steps exceed {} positions",
                self.cfg.max_positions
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(config_err(format!("token id {bad} outside vocabulary")));
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let pos = ctx.p(self.pos_emb).narrow(0, 0, steps)?;
        let mut x = ctx
            .p(self.tok_emb)
            .index_select(tokens)?
            .reshape(&[rows, steps, d])?
            .add(pos)?;
        let mask = causal_mask(ctx.g, steps);
        for (l, (mk, mv)) in self.layers.iter().zip(&mem.kv) {
            let sa = &l.self_attn;
            let a = attend(
                x.matmul(ctx.p(sa.wq))?,
                x.matmul(ctx.p(sa.wk))?,
                x.matmul(ctx.p(sa.wv))?,
                heads,
                Some(mask),
            )?
            .matmul(ctx.p(sa.wo))?;
            x = l.ln[0].forward(ctx, x.add(a)?)?;
            let ca = &l.cross_attn;
            let c = attend(x.matmul(ctx.p(ca.wq))?, *mk, *mv, heads, None)?.matmul(ctx.p(ca.wo))?;
            x = l.ln[1].forward(ctx, x.add(c)?)?;
            let f = x
                .matmul(ctx.p(l.w1))?
                .add(ctx.p(l.b1))?
                .relu()
                .matmul(ctx.p(l.w2))?
                .add(ctx.p(l.b2))?;
            x = l.ln[2].forward(ctx, x.add(f)?)?;
        }
        Ok(x)
    }

    pub fn project<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(h.matmul(ctx.p(self.out_w))?.add(ctx.p(self.out_b))?)
    }

    /// Logits `[R,T,|V|]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        mem: &Memory<'g, T>,
        tokens: &[usize],
        steps: usize,
    ) -> Result<Var<'g, T>> {
        let h = self.hidden(ctx, mem, tokens, steps)?;
        self.project(ctx, h)
    }

    /// Log-probabilities `[R,|V|]` of the token after the last position.
    pub fn next_log_probs<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        mem: &Memory<'g, T>,
        tokens: &[usize],
        steps: usize,
    ) -> Result<Var<'g, T>> {
        let h = self.hidden(ctx, mem, tokens, steps)?;
        let rows = mem.rows();
        let last = h.narrow(1, steps - 1, 1)?.reshape(&[rows, self.cfg.d_model])?;
        Ok(self.project(ctx, last)?.log_softmax()?)
    }

    /// Parameter ids of the cross-attention value projections.
    pub fn cross_value_params(&self) -> Vec<ParamId> {
        self.layers.iter().map(|l| l.cross_attn.wv).collect()
    }
}
