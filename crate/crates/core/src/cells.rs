//! The five modeling cells. Every cell maps `[B,H,W,C]` to `[B,H,W,C]`.

use dtnet_tensor::nn::Mode;
use dtnet_tensor::{BnState, Graph, ParamId, ParamStore, PoolDomain, RngState, Scalar, Var};

use crate::config::CellKind;
use crate::error::{config_err, Result};

/// Everything a forward pass reads besides its input.
pub struct Ctx<'g, T: Scalar> {
    pub g: &'g Graph<T>,
    pub params: &'g ParamStore<T>,
    pub mode: Mode,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(g: &'g Graph<T>, params: &'g ParamStore<T>, mode: Mode) -> Self {
        Self { g, params, mode }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.g.param(self.params, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellDims {
    pub channels: usize,
    pub heads: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Hidden width of the squeeze-and-excitation bottleneck.
pub fn cac_reduction(channels: usize) -> usize {
    (channels / 16).max(1)
}

pub const FFN_EXPANSION: usize = 4;

/// Multi-head scaled dot-product attention without bias terms or residual.
///
/// `q_in` is `[B,Tq,C]`, `kv_in` is `[B,Tk,C]`; `mask` is an additive
/// `[Tq,Tk]` tensor broadcast over batch and heads.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<'g, T: Scalar>(
    q_in: Var<'g, T>,
    kv_in: Var<'g, T>,
    wq: Var<'g, T>,
    wk: Var<'g, T>,
    wv: Var<'g, T>,
    wo: Var<'g, T>,
    heads: usize,
    mask: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let q = q_in.matmul(wq)?;
    let k = kv_in.matmul(wk)?;
    let v = kv_in.matmul(wv)?;
    Ok(attend(q, k, v, heads, mask)?.matmul(wo)?)
}

/// Attention over already projected queries, keys and values (all `[B,T,C]`);
/// returns the concatenated heads before the output projection.
pub fn attend<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    mask: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let (sq, sk) = (q.shape(), k.shape());
    let (b, tq, c) = (sq[0], sq[1], sq[2]);
    let tk = sk[1];
    if heads == 0 || c % heads != 0 {
        return Err(config_err(format!("{c} channels cannot be split into {heads} heads")));
    }
    let d = c / heads;
    let q = q.reshape(&[b, tq, heads, d])?.permute(&[0, 2, 1, 3])?;
    let k = k.reshape(&[b, tk, heads, d])?.permute(&[0, 2, 3, 1])?;
    let v = v.reshape(&[b, tk, heads, d])?.permute(&[0, 2, 1, 3])?;
    let mut s = q.matmul(k)?.scale(1.0 / (d as f64).sqrt());
    if let Some(m) = mask {
        s = s.add(m)?;
    }
    let a = s.softmax(3)?;
    Ok(a.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, tq, c])?)
}

#[derive(Clone, Debug)]
pub struct Gmc {
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// One multi-branch stage: identity, 1x1 and (1x1 then 3x3) branches, each batch-normalized.
#[derive(Clone, Debug)]
pub struct LmcStage<T> {
    pub conv1: ParamId,
    pub conv3_pre: ParamId,
    pub conv3: ParamId,
    /// gamma/beta for the identity, 1x1 and 3x3 branches.
    pub affine: [(ParamId, ParamId); 3],
    pub bn: [BnState<T>; 3],
}

#[derive(Clone, Debug)]
pub struct Lmc<T> {
    pub stages: [LmcStage<T>; 2],
}

#[derive(Clone, Debug)]
pub struct Amc {
    pub fc_h: ParamId,
    pub fc_w: ParamId,
    pub w_rec: ParamId,
}

#[derive(Clone, Debug)]
pub struct Cpc {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Cac {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug)]
pub enum Cell<T> {
    Gmc(Gmc),
    Lmc(Lmc<T>),
    Amc(Amc),
    Cpc(Cpc),
    Cac(Cac),
}

const BN_BRANCHES: [&str; 3] = ["bn_id", "bn_1x1", "bn_3x3"];

impl<T: Scalar> Cell<T> {
    /// Registers the cell's parameters under `<prefix>.<kind>.*`.
    pub fn new(
        kind: CellKind,
        prefix: &str,
        dims: CellDims,
        store: &mut ParamStore<T>,
        rng: &mut RngState,
    ) -> Result<Self> {
        let c = dims.channels;
        let name = |m: &str| format!("{prefix}.{}.{m}", kind.tag());
        Ok(match kind {
            CellKind::Gmc => {
                if dims.heads == 0 || c % dims.heads != 0 {
                    return Err(config_err(format!(
                        "GMC: {c} channels not divisible by {} heads",
                        dims.heads
                    )));
                }
                Cell::Gmc(Gmc {
                    heads: dims.heads,
                    wq: store.add_uniform(name("Wq"), &[c, c], c, rng)?,
                    wk: store.add_uniform(name("Wk"), &[c, c], c, rng)?,
                    wv: store.add_uniform(name("Wv"), &[c, c], c, rng)?,
                    wo: store.add_uniform(name("Wo"), &[c, c], c, rng)?,
                })
            }
            CellKind::Lmc => {
                let mut stage = |i: usize| -> Result<LmcStage<T>> {
                    let s = |m: &str| name(&format!("s{i}.{m}"));
                    let conv1 = store.add_uniform(s("conv1x1"), &[1, 1, c, c], c, rng)?;
                    let conv3_pre = store.add_uniform(s("conv3x3_pre"), &[1, 1, c, c], c, rng)?;
                    let conv3 = store.add_uniform(s("conv3x3"), &[3, 3, c, c], 9 * c, rng)?;
                    let mut affine = [(ParamId(0), ParamId(0)); 3];
                    for (slot, br) in affine.iter_mut().zip(BN_BRANCHES) {
                        *slot = (
                            store.add_ones(s(&format!("{br}.gamma")), &[c])?,
                            store.add_zeros(s(&format!("{br}.beta")), &[c])?,
                        );
                    }
                    Ok(LmcStage {
                        conv1,
                        conv3_pre,
                        conv3,
                        affine,
                        bn: [BnState::new(c), BnState::new(c), BnState::new(c)],
                    })
                };
                let s0 = stage(0)?;
                let s1 = stage(1)?;
                Cell::Lmc(Lmc { stages: [s0, s1] })
            }
            CellKind::Amc => {
                let (h, w) = (dims.grid_h, dims.grid_w);
                Cell::Amc(Amc {
                    fc_h: store.add_uniform(name("FC_H"), &[h, h], h, rng)?,
                    fc_w: store.add_uniform(name("FC_W"), &[w, w], w, rng)?,
                    w_rec: store.add_uniform(name("W_rec"), &[3 * c, c], 3 * c, rng)?,
                })
            }
            CellKind::Cpc => {
                let hid = FFN_EXPANSION * c;
                Cell::Cpc(Cpc {
                    w1: store.add_uniform(name("W1"), &[c, hid], c, rng)?,
                    b1: store.add_zeros(name("b1"), &[hid])?,
                    w2: store.add_uniform(name("W2"), &[hid, c], hid, rng)?,
                    b2: store.add_zeros(name("b2"), &[c])?,
                })
            }
            CellKind::Cac => {
                let r = cac_reduction(c);
                Cell::Cac(Cac {
                    w1: store.add_uniform(name("W1"), &[c, r], c, rng)?,
                    w2: store.add_uniform(name("W2"), &[r, c], r, rng)?,
                })
            }
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Gmc(_) => CellKind::Gmc,
            Cell::Lmc(_) => CellKind::Lmc,
            Cell::Amc(_) => CellKind::Amc,
            Cell::Cpc(_) => CellKind::Cpc,
            Cell::Cac(_) => CellKind::Cac,
        }
    }

    pub fn forward<'g>(&mut self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(config_err(format!("cell input must be [B,H,W,C], got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        match self {
            Cell::Gmc(p) => {
                let x2 = x.reshape(&[b, h * w, c])?;
                let o = multi_head_attention(
                    x2,
                    x2,
                    ctx.p(p.wq),
                    ctx.p(p.wk),
                    ctx.p(p.wv),
                    ctx.p(p.wo),
                    p.heads,
                    None,
                )?;
                Ok(o.add(x2)?.reshape(&s)?)
            }
            Cell::Lmc(p) => {
                let [s0, s1] = &mut p.stages;
                let x1 = lmc_stage(ctx, s0, x)?.relu();
                let x2 = lmc_stage(ctx, s1, x1)?;
                Ok(x2.sigmoid().mul(x)?)
            }
            Cell::Amc(p) => {
                let xh = x
                    .permute(&[0, 2, 3, 1])?
                    .matmul(ctx.p(p.fc_h))?
                    .permute(&[0, 3, 1, 2])?;
                let xw = x
                    .permute(&[0, 1, 3, 2])?
                    .matmul(ctx.p(p.fc_w))?
                    .permute(&[0, 1, 3, 2])?;
                let con = ctx.g.concat(&[x, xh, xw], 3)?;
                Ok(con.matmul(ctx.p(p.w_rec))?.sigmoid().mul(x)?)
            }
            Cell::Cpc(p) => {
                let hid = x.matmul(ctx.p(p.w1))?.add(ctx.p(p.b1))?.relu();
                Ok(hid.matmul(ctx.p(p.w2))?.add(ctx.p(p.b2))?)
            }
            Cell::Cac(p) => {
                let pooled = dtnet_tensor::global_pool(x, PoolDomain::Spatial)?;
                let gate = pooled
                    .matmul(ctx.p(p.w1))?
                    .relu()
                    .matmul(ctx.p(p.w2))?
                    .sigmoid()
                    .reshape(&[b, 1, 1, c])?;
                Ok(x.mul(gate)?)
            }
        }
    }

    /// Batch-norm running statistics, keyed by a stable name suffix.
    pub fn bn_states(&self) -> Vec<(String, &BnState<T>)> {
        match self {
            Cell::Lmc(p) => p
                .stages
                .iter()
                .enumerate()
                .flat_map(|(i, st)| {
                    st.bn
                        .iter()
                        .zip(BN_BRANCHES)
                        .map(move |(bn, br)| (format!("lmc.s{i}.{br}"), bn))
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn bn_states_mut(&mut self) -> Vec<(String, &mut BnState<T>)> {
        match self {
            Cell::Lmc(p) => p
                .stages
                .iter_mut()
                .enumerate()
                .flat_map(|(i, st)| {
                    st.bn
                        .iter_mut()
                        .zip(BN_BRANCHES)
                        .map(move |(bn, br)| (format!("lmc.s{i}.{br}"), bn))
                })
                .collect(),
            _ => Vec::new(),
        }
    }
}

fn lmc_stage<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    st: &mut LmcStage<T>,
    x: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let branches = [
        x,
        x.conv2d(ctx.p(st.conv1))?,
        x.conv2d(ctx.p(st.conv3_pre))?.conv2d(ctx.p(st.conv3))?,
    ];
    let mut acc: Option<Var<'g, T>> = None;
    for ((y, bn), (gamma, beta)) in branches.into_iter().zip(&mut st.bn).zip(st.affine) {
        let n = bn.forward(y, ctx.p(gamma), ctx.p(beta), ctx.mode)?;
        acc = Some(match acc {
            Some(a) => a.add(n)?,
            None => n,
        });
    }
    Ok(acc.expect("three branches"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dtnet_tensor::Tensor;

    fn dims() -> CellDims {
        CellDims {
            channels: 8,
            heads: 2,
            grid_h: 3,
            grid_w: 3,
        }
    }

    fn random_input(rng: &mut RngState, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    fn run(cell: &mut Cell<f64>, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let g = Graph::no_grad();
        let ctx = Ctx::new(&g, store, Mode::Train);
        cell.forward(&ctx, g.constant(x.clone())).unwrap().value()
    }

    #[test]
    fn every_cell_preserves_shape() {
        let mut rng = RngState::new(3);
        let x = random_input(&mut rng, &[2, 3, 3, 8]);
        for kind in CellKind::ALL {
            let mut store = ParamStore::new();
            let mut cell = Cell::new(kind, "enc.0", dims(), &mut store, &mut rng).unwrap();
            assert_eq!(run(&mut cell, &store, &x).shape(), x.shape(), "{kind}");
        }
    }

    #[test]
    fn gating_cells_never_amplify() {
        let mut rng = RngState::new(4);
        let x = random_input(&mut rng, &[2, 3, 3, 8]);
        for kind in [CellKind::Lmc, CellKind::Amc, CellKind::Cac] {
            let mut store = ParamStore::new();
            let mut cell = Cell::new(kind, "enc.0", dims(), &mut store, &mut rng).unwrap();
            let y = run(&mut cell, &store, &x);
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!(a.abs() <= b.abs(), "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gmc_with_zero_projections_is_identity() {
        let mut rng = RngState::new(5);
        let mut store = ParamStore::new();
        let mut cell = Cell::new(CellKind::Gmc, "enc.0", dims(), &mut store, &mut rng).unwrap();
        for m in ["Wq", "Wk", "Wv"] {
            let id = store.id(&format!("enc.0.gmc.{m}")).unwrap();
            *store.value_mut(id) = Tensor::zeros(&[8, 8]);
        }
        let x = random_input(&mut rng, &[1, 3, 3, 8]);
        assert_eq!(run(&mut cell, &store, &x), x);
    }

    #[test]
    fn cac_with_zero_excitation_halves_input() {
        let mut rng = RngState::new(6);
        let mut store = ParamStore::new();
        let mut cell = Cell::new(CellKind::Cac, "enc.0", dims(), &mut store, &mut rng).unwrap();
        let id = store.id("enc.0.cac.W2").unwrap();
        *store.value_mut(id) = Tensor::zeros(&[1, 8]);
        let x = random_input(&mut rng, &[2, 3, 3, 8]);
        assert!(run(&mut cell, &store, &x).max_abs_diff(&x.map(|v| v / 2.0)) < 1e-15);
    }

    #[test]
    fn cpc_with_zero_weights_outputs_bias() {
        let mut rng = RngState::new(7);
        let mut store = ParamStore::new();
        let mut cell = Cell::new(CellKind::Cpc, "enc.0", dims(), &mut store, &mut rng).unwrap();
        for (m, shape) in [("W1", [8, 32]), ("W2", [32, 8])] {
            let id = store.id(&format!("enc.0.cpc.{m}")).unwrap();
            *store.value_mut(id) = Tensor::zeros(&shape);
        }
        let b2 = store.id("enc.0.cpc.b2").unwrap();
        *store.value_mut(b2) = Tensor::full(&[8], 0.75);
        let x = random_input(&mut rng, &[1, 3, 3, 8]);
        assert!(run(&mut cell, &store, &x).data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn lmc_of_zero_is_zero() {
        let mut rng = RngState::new(8);
        let mut store = ParamStore::new();
        let mut cell = Cell::new(CellKind::Lmc, "enc.0", dims(), &mut store, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 3, 3, 8]);
        assert!(run(&mut cell, &store, &x).data().iter().all(|&v| v == 0.0));
        assert_eq!(cell.bn_states().len(), 6);
    }

    #[test]
    fn gmc_rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        let bad = CellDims { heads: 3, ..dims() };
        assert!(Cell::new(CellKind::Gmc, "e", bad, &mut store, &mut RngState::new(0)).is_err());
        assert_eq!(cac_reduction(8), 1);
        assert_eq!(cac_reduction(64), 4);
    }
}
