//! Path-weight generation and dynamic combination of cell outputs.

use dtnet_tensor::nn::Mode;
use dtnet_tensor::{global_pool, ParamId, ParamStore, PoolDomain, RngState, Scalar, Tensor, Var};

use crate::cells::Ctx;
use crate::config::{CellKind, RouterVariant, RoutingType};
use crate::error::{config_err, DtnError, Result};

pub const CHANNEL_REDUCTION: usize = 16;
pub const SPATIAL_REDUCTION: usize = 7;
pub const DEFAULT_THRESHOLD: f64 = 0.3;

/// Per-sample path weights of one routing space, `[B,p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathWeights<T> {
    pub space: String,
    pub cells: Vec<CellKind>,
    pub weights: Tensor<T>,
}

impl<T: Scalar> PathWeights<T> {
    pub fn batch(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn arity(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn row(&self, b: usize) -> &[T] {
        let p = self.arity();
        &self.weights.data()[b * p..(b + 1) * p]
    }
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    w2: ParamId,
}

impl Mlp {
    fn new<T: Scalar>(
        prefix: &str,
        tag: &str,
        dims: [usize; 3],
        store: &mut ParamStore<T>,
        rng: &mut RngState,
    ) -> Result<Self> {
        let [i, h, o] = dims;
        Ok(Self {
            w1: store.add_uniform(format!("{prefix}.{tag}1"), &[i, h], i, rng)?,
            w2: store.add_uniform(format!("{prefix}.{tag}2"), &[h, o], h, rng)?,
        })
    }

    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.matmul(ctx.p(self.w1))?.relu().matmul(ctx.p(self.w2))?)
    }
}

/// Router of one routing space in one layer.
#[derive(Clone, Debug)]
pub struct Router {
    pub variant: RouterVariant,
    pub paths: usize,
    pub positions: usize,
    channel: Option<Mlp>,
    spatial: Option<Mlp>,
    joint: Option<Mlp>,
}

impl Router {
    /// Registers parameters named `<prefix>.cha1`, `.spa1`, `.joint1`, ... as the variant needs.
    pub fn new<T: Scalar>(
        variant: RouterVariant,
        prefix: &str,
        channels: usize,
        positions: usize,
        paths: usize,
        store: &mut ParamStore<T>,
        rng: &mut RngState,
    ) -> Result<Self> {
        if paths == 0 {
            return Err(config_err("router needs at least one path"));
        }
        let uses_channel = matches!(variant, RouterVariant::Scjr | RouterVariant::ChannelOnly);
        let uses_spatial = matches!(variant, RouterVariant::Scjr | RouterVariant::SpatialOnly);
        let cr = (channels / CHANNEL_REDUCTION).max(1);
        let sr = (positions / SPATIAL_REDUCTION).max(1);
        let channel = uses_channel
            .then(|| Mlp::new(prefix, "cha", [channels, cr, paths], store, rng))
            .transpose()?;
        let spatial = uses_spatial
            .then(|| Mlp::new(prefix, "spa", [positions, sr, paths], store, rng))
            .transpose()?;
        let joint = (variant == RouterVariant::Scjr)
            .then(|| Mlp::new(prefix, "joint", [2 * paths, paths, paths], store, rng))
            .transpose()?;
        Ok(Self {
            variant,
            paths,
            positions,
            channel,
            spatial,
            joint,
        })
    }

    /// Pre-softmax path scores `[B,p]`; `None` for static summation.
    pub fn logits<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
    ) -> Result<Option<Var<'g, T>>> {
        let s = x.shape();
        if s.len() != 4 || s[1] * s[2] != self.positions {
            return Err(config_err(format!(
                "router built for {} positions, got input {s:?}",
                self.positions
            )));
        }
        let missing = || DtnError::Config(format!("{} router is missing parameters", self.variant));
        let xc = |r: &Self| -> Result<Var<'g, T>> {
            let mlp = r.channel.as_ref().ok_or_else(missing)?;
            mlp.forward(ctx, global_pool(x, PoolDomain::Spatial)?)
        };
        let xs = |r: &Self| -> Result<Var<'g, T>> {
            let mlp = r.spatial.as_ref().ok_or_else(missing)?;
            let pooled = global_pool(x, PoolDomain::Channel)?.reshape(&[s[0], self.positions])?;
            mlp.forward(ctx, pooled)
        };
        Ok(match self.variant {
            RouterVariant::StaticSum => None,
            RouterVariant::ChannelOnly => Some(xc(self)?),
            RouterVariant::SpatialOnly => Some(xs(self)?),
            RouterVariant::Scjr => {
                let joint = self.joint.as_ref().ok_or_else(missing)?;
                let cat = ctx.g.concat(&[xc(self)?, xs(self)?], 1)?;
                Some(joint.forward(ctx, cat)?)
            }
        })
    }

    /// Path weights for `x`. The flag is `true` when the weights carry no
    /// gradient, so zero columns may skip their cells.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        routing: RoutingType,
        rng: Option<&mut RngState>,
    ) -> Result<(Var<'g, T>, bool)> {
        let b = x.shape()[0];
        let logits = self.logits(ctx, x)?;
        match routing {
            RoutingType::Soft => Ok(match logits {
                Some(l) => (l.softmax(1)?, false),
                None => (ctx.g.constant(uniform_weights(b, self.paths)), true),
            }),
            RoutingType::Hard { temperature } => {
                let l = logits.unwrap_or_else(|| ctx.g.constant(Tensor::zeros(&[b, self.paths])));
                let hard = gumbel_hard_route(l, temperature, rng, ctx.mode)?;
                Ok((hard, ctx.mode == Mode::Eval))
            }
        }
    }
}

pub fn uniform_weights<T: Scalar>(batch: usize, paths: usize) -> Tensor<T> {
    Tensor::full(&[batch, paths], T::one() / T::of(paths as f64))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot_rows<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let p = scores.shape()[1];
    let mut out = Tensor::zeros(scores.shape());
    for (src, dst) in scores.data().chunks(p).zip(out.data_mut().chunks_mut(p)) {
        dst[argmax(src)] = T::one();
    }
    out
}

/// `softmax((logits + g) / temperature)` with fresh Gumbel(0,1) noise `g`.
pub fn gumbel_softmax<'g, T: Scalar>(
    logits: Var<'g, T>,
    temperature: f64,
    rng: &mut RngState,
) -> Result<Var<'g, T>> {
    if !(temperature > 0.0) {
        return Err(config_err(format!("temperature must be positive, got {temperature}")));
    }
    let shape = logits.shape();
    let n = shape.iter().product();
    let noise = Tensor::new(&shape, (0..n).map(|_| T::of(rng.gumbel())).collect())?;
    let noisy = logits.add(logits.graph().constant(noise))?;
    Ok(noisy.scale(1.0 / temperature).softmax(1)?)
}

/// One-hot path selection. Train mode draws through [`gumbel_softmax`] and
/// passes the soft gradient straight through. Eval mode takes the argmax, or
/// a Gumbel-max draw (a sample from `softmax(logits)`) when given an rng.
pub fn gumbel_hard_route<'g, T: Scalar>(
    logits: Var<'g, T>,
    temperature: f64,
    rng: Option<&mut RngState>,
    mode: Mode,
) -> Result<Var<'g, T>> {
    if !(temperature > 0.0) {
        return Err(config_err(format!("temperature must be positive, got {temperature}")));
    }
    let g = logits.graph();
    match mode {
        Mode::Eval => {
            let mut scores = logits.value();
            if let Some(rng) = rng {
                for v in scores.data_mut() {
                    *v += T::of(rng.gumbel());
                }
            }
            Ok(g.constant(one_hot_rows(&scores)))
        }
        Mode::Train => {
            let rng = rng.ok_or_else(|| config_err("hard routing in train mode needs an rng"))?;
            let soft = gumbel_softmax(logits, temperature, rng)?;
            let hard = one_hot_rows(&soft.value());
            Ok(g.straight_through(soft, hard)?)
        }
    }
}

/// `out[b] = sum_k w[b,k] * outputs[k][b]`. `w` is `[B,p]` or `[1,p]`.
///
/// Entries of `skip` mark cells whose output was not computed; their
/// weight column must be zero.
pub fn route_combine<'g, T: Scalar>(
    w: Var<'g, T>,
    outputs: &[Option<Var<'g, T>>],
) -> Result<Var<'g, T>> {
    let ws = w.shape();
    if ws.len() != 2 || ws[1] != outputs.len() {
        return Err(config_err(format!(
            "route_combine: weights {ws:?} for {} outputs",
            outputs.len()
        )));
    }
    let mut acc: Option<Var<'g, T>> = None;
    for (k, y) in outputs.iter().enumerate() {
        let Some(y) = y else { continue };
        let mut shape = vec![1; y.shape().len()];
        shape[0] = ws[0];
        let term = y.mul(w.narrow(1, k, 1)?.reshape(&shape)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| config_err("route_combine: no cell output to combine"))
}

/// Convenience form of [`route_combine`] with every output present.
pub fn route_combine_all<'g, T: Scalar>(w: Var<'g, T>, outputs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let all: Vec<_> = outputs.iter().copied().map(Some).collect();
    route_combine(w, &all)
}

/// Cells with weight at least `threshold`, per sample.
pub fn discretize_paths<T: Scalar>(w: &PathWeights<T>, threshold: f64) -> Result<Vec<Vec<usize>>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(config_err(format!("threshold must lie in (0,1), got {threshold}")));
    }
    Ok((0..w.batch())
        .map(|b| {
            w.row(b)
                .iter()
                .enumerate()
                .filter(|(_, v)| v.as_f64() >= threshold)
                .map(|(k, _)| k)
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dtnet_tensor::Graph;

    fn pw(rows: &[&[f64]]) -> PathWeights<f64> {
        let p = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PathWeights {
            space: "spatial".into(),
            cells: vec![],
            weights: Tensor::new(&[rows.len(), p], data).unwrap(),
        }
    }

    #[test]
    fn discretization_examples() {
        let t = DEFAULT_THRESHOLD;
        let third = 1.0 / 3.0;
        assert_eq!(discretize_paths(&pw(&[&[third; 3]]), t).unwrap(), [vec![0, 1, 2]]);
        assert_eq!(discretize_paths(&pw(&[&[0.29, 0.71]]), t).unwrap(), [vec![1]]);
        assert_eq!(discretize_paths(&pw(&[&[0.25, 0.25, 0.5]]), t).unwrap(), [vec![2]]);
        assert!(discretize_paths(&pw(&[&[0.5, 0.5]]), 1.0).is_err());
    }

    #[test]
    fn eval_hard_route_is_argmax() {
        let g = Graph::<f64>::no_grad();
        let l = g.constant(Tensor::new(&[2, 3], vec![5.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap());
        let w = gumbel_hard_route(l, 1.0, None, Mode::Eval).unwrap();
        assert_eq!(w.to_vec(), [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(gumbel_hard_route(l, 0.0, None, Mode::Eval).is_err());
        assert!(gumbel_hard_route(l, 1.0, None, Mode::Train).is_err());
    }

    #[test]
    fn one_hot_weight_selects_output_bitwise() {
        let g = Graph::<f64>::no_grad();
        let a = g.constant(Tensor::from_f64(&[2, 2], &[0.1, 0.2, 0.3, 0.4]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 2], &[7.0, -1.5, 2.25, 9.0]).unwrap());
        let w = g.constant(Tensor::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap());
        let y = route_combine_all(w, &[a, b]).unwrap();
        assert_eq!(y.to_vec(), [7.0, -1.5, 0.3, 0.4]);
        let uniform = g.constant(uniform_weights(2, 2));
        let m = route_combine_all(uniform, &[a, b]).unwrap();
        for (got, want) in m.to_vec().iter().zip([3.55, -0.65, 1.275, 4.7]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(route_combine_all(w, &[a]).is_err());
    }
}
