//! Stacked dynamically routed encoder layers.

use dtnet_tensor::{BnState, ParamStore, RngState, Scalar, Tensor, Var};

use crate::cells::{Cell, CellDims, Ctx};
use crate::config::{Arrangement, CellKind, EncoderConfig, GroupSpec, RoutingType};
use crate::error::{config_err, Result};
use crate::router::{discretize_paths, route_combine, PathWeights, Router};

/// Cells of one routing space together with their router.
#[derive(Clone, Debug)]
pub struct RoutedBlock<T> {
    pub group: GroupSpec,
    pub router: Router,
    pub cells: Vec<Cell<T>>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<T> {
    pub blocks: Vec<RoutedBlock<T>>,
}

/// Path weights recorded for one layer, one entry per routing space.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    pub layer: usize,
    pub spaces: Vec<PathWeights<T>>,
}

/// Optional inputs of an encoder pass.
pub struct RouteOpts<'a, T> {
    /// Noise source for hard routing in train mode.
    pub rng: Option<&'a mut RngState>,
    /// Fixed weights per layer per routing space (`[B,p]` or `[1,p]`),
    /// replacing the routers.
    pub forced: Option<&'a [Vec<Tensor<T>>]>,
    /// Overrides the configured routing type for this pass.
    pub routing: Option<RoutingType>,
    pub trace: bool,
}

impl<T> Default for RouteOpts<'_, T> {
    fn default() -> Self {
        Self {
            rng: None,
            forced: None,
            routing: None,
            trace: false,
        }
    }
}

impl<'a, T> RouteOpts<'a, T> {
    pub fn traced() -> Self {
        Self {
            trace: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    pub layers: Vec<EncoderLayer<T>>,
}

impl<T: Scalar> Encoder<T> {
    /// Registers parameters as `enc.<layer>.<cell>.*` and `enc.<layer>.router.<space>.*`.
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let dims = CellDims {
            channels: cfg.d_model,
            heads: cfg.heads,
            grid_h: cfg.grid_h,
            grid_w: cfg.grid_w,
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let prefix = format!("enc.{l}");
            let mut blocks = Vec::new();
            for group in cfg.groups() {
                let router = Router::new(
                    cfg.router,
                    &format!("{prefix}.router.{}", group.name),
                    cfg.d_model,
                    cfg.grid_positions(),
                    group.cells.len(),
                    store,
                    rng,
                )?;
                let cells = group
                    .cells
                    .iter()
                    .map(|&k| Cell::new(k, &prefix, dims, store, rng))
                    .collect::<Result<_>>()?;
                blocks.push(RoutedBlock {
                    group,
                    router,
                    cells,
                });
            }
            layers.push(EncoderLayer { blocks });
        }
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    /// Routing-space arities per layer, e.g. `[3, 2]` for the grouped default.
    pub fn space_arities(&self) -> Vec<usize> {
        self.cfg.groups().iter().map(|g| g.cells.len()).collect()
    }

    pub fn forward<'g>(
        &mut self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        opts: &mut RouteOpts<'_, T>,
    ) -> Result<(Var<'g, T>, Vec<LayerTrace<T>>)> {
        let s = x.shape();
        let want = [self.cfg.grid_h, self.cfg.grid_w, self.cfg.d_model];
        if s.len() != 4 || s[1..] != want {
            return Err(config_err(format!(
                "encoder expects [B,{},{},{}], got {s:?}",
                want[0], want[1], want[2]
            )));
        }
        if let Some(f) = opts.forced {
            if f.len() != self.layers.len() {
                return Err(config_err(format!(
                    "forced routes cover {} layers, encoder has {}",
                    f.len(),
                    self.layers.len()
                )));
            }
        }
        let parallel = self.cfg.arrangement == Arrangement::Parallel;
        let routing = opts.routing.unwrap_or(self.cfg.routing);
        routing.validate()?;
        let mut traces = Vec::new();
        let mut h = x;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let input = h;
            let mut spaces = Vec::new();
            for (j, block) in layer.blocks.iter_mut().enumerate() {
                let block_in = if parallel { input } else { h };
                let (w, constant) = match opts.forced {
                    Some(f) => {
                        let t = f[l].get(j).ok_or_else(|| {
                            config_err(format!("forced routes missing space {j} of layer {l}"))
                        })?;
                        (ctx.g.constant(t.clone()), true)
                    }
                    None => block
                        .router
                        .forward(ctx, block_in, routing, opts.rng.as_deref_mut())?,
                };
                let wv = w.value();
                let p = block.cells.len();
                if wv.rank() != 2 || wv.shape()[1] != p {
                    return Err(config_err(format!(
                        "layer {l} space {j}: weights {:?} for {p} cells",
                        wv.shape()
                    )));
                }
                let mut outs = Vec::with_capacity(p);
                for (k, cell) in block.cells.iter_mut().enumerate() {
                    let unused = constant
                        && wv.data().chunks(p).all(|row| row[k] == T::zero());
                    outs.push(if unused {
                        None
                    } else {
                        Some(cell.forward(ctx, block_in)?)
                    });
                }
                // Every weight zero: the block contributes nothing beyond its residual.
                if outs.iter().any(Option::is_some) {
                    h = h.add(route_combine(w, &outs)?)?;
                }
                if opts.trace {
                    spaces.push(PathWeights {
                        space: block.group.name.clone(),
                        cells: block.group.cells.clone(),
                        weights: wv,
                    });
                }
            }
            if opts.trace {
                traces.push(LayerTrace { layer: l, spaces });
            }
        }
        Ok((h, traces))
    }

    pub fn bn_states(&self) -> Vec<(String, &BnState<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for block in &layer.blocks {
                for cell in &block.cells {
                    for (name, st) in cell.bn_states() {
                        out.push((format!("enc.{l}.{name}"), st));
                    }
                }
            }
        }
        out
    }

    pub fn bn_states_mut(&mut self) -> Vec<(String, &mut BnState<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for block in &mut layer.blocks {
                for cell in &mut block.cells {
                    for (name, st) in cell.bn_states_mut() {
                        out.push((format!("enc.{l}.{name}"), st));
                    }
                }
            }
        }
        out
    }

    /// Cell kinds in registration order.
    pub fn cells(&self) -> impl Iterator<Item = CellKind> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.blocks.iter().flat_map(|b| b.cells.iter().map(|c| c.kind())))
    }
}

/// Number of active cells per sample, summed over layers and routing spaces.
pub fn active_cell_counts<T: Scalar>(traces: &[LayerTrace<T>], threshold: f64) -> Result<Vec<usize>> {
    let batch = traces
        .first()
        .and_then(|t| t.spaces.first())
        .map_or(0, |s| s.batch());
    let mut counts = vec![0; batch];
    for t in traces {
        for space in &t.spaces {
            for (c, active) in counts.iter_mut().zip(discretize_paths(space, threshold)?) {
                *c += active.len();
            }
        }
    }
    Ok(counts)
}

/// Concatenated path-weight vector of sample `b` across all layers and spaces.
pub fn path_vector<T: Scalar>(traces: &[LayerTrace<T>], b: usize) -> Vec<f64> {
    traces
        .iter()
        .flat_map(|t| t.spaces.iter())
        .flat_map(|s| s.row(b).iter().map(|v| v.as_f64()).collect::<Vec<_>>())
        .collect()
}
