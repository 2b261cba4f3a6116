//! Helpers shared by the integration tests: random tensors, plain-loop
//! linear algebra and parameter lookup.
#![allow(dead_code)]

use dtnet_tensor::{ParamStore, RngState, Tensor, Tensor64};

pub fn random(rng: &mut RngState, shape: &[usize]) -> Tensor64 {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store
        .by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .value
        .data()
        .to_vec()
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len(), "length differs");
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() <= tol, "index {i}: {a} vs {b} (tol {tol})");
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `[n,k] x [k,m]` on row-major slices.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = s;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Mean over positions of a `[B,N,C]` block, per batch and channel.
pub fn spatial_mean(x: &[f64], b: usize, n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        for p in 0..n {
            for ci in 0..c {
                out[bi * c + ci] += x[(bi * n + p) * c + ci] / n as f64;
            }
        }
    }
    out
}

pub fn te(e: dtnet_core::DtnError) -> dtnet_tensor::TensorError {
    match e {
        dtnet_core::DtnError::Tensor(t) => t,
        other => dtnet_tensor::TensorError::Invalid(other.to_string()),
    }
}

/// Gradient-check tolerance on relative error.
pub const GRAD_TOL: f64 = 1e-4;

pub fn assert_grad(report: dtnet_tensor::gradcheck::GradCheckReport, what: &str) {
    assert!(report.checked > 0, "{what}: nothing checked");
    assert!(
        report.max_rel_err < GRAD_TOL,
        "{what}: max rel err {:.3e} at {}",
        report.max_rel_err,
        report.worst
    );
}

/// Multi-head self-attention over `[B,N,C]` with the internal residual.
pub fn gmc_oracle(store: &ParamStore<f64>, prefix: &str, x: &[f64], b: usize, n: usize, c: usize, heads: usize) -> Vec<f64> {
    let w = |m: &str| param(store, &format!("{prefix}.gmc.{m}"));
    let (wq, wk, wv, wo) = (w("Wq"), w("Wk"), w("Wv"), w("Wo"));
    let d = c / heads;
    let mut out = vec![0.0; b * n * c];
    for bi in 0..b {
        let xb = &x[bi * n * c..(bi + 1) * n * c];
        let q = matmul(xb, &wq, n, c, c);
        let k = matmul(xb, &wk, n, c, c);
        let v = matmul(xb, &wv, n, c, c);
        let mut cat = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..d).map(|t| q[i * c + h * d + t] * k[j * c + h * d + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for t in 0..d {
                    cat[i * c + h * d + t] = (0..n).map(|j| a[j] * v[j * c + h * d + t]).sum();
                }
            }
        }
        let o = matmul(&cat, &wo, n, c, c);
        for i in 0..n * c {
            out[bi * n * c + i] = o[i] + xb[i];
        }
    }
    out
}

/// Position-wise two-layer FFN with expansion 4.
pub fn cpc_oracle(store: &ParamStore<f64>, prefix: &str, x: &[f64], c: usize) -> Vec<f64> {
    let p = |m: &str| param(store, &format!("{prefix}.cpc.{m}"));
    let (w1, b1, w2, b2) = (p("W1"), p("b1"), p("W2"), p("b2"));
    let rows = x.len() / c;
    let mut h = matmul(x, &w1, rows, c, 4 * c);
    for (i, v) in h.iter_mut().enumerate() {
        *v = relu(*v + b1[i % (4 * c)]);
    }
    let mut y = matmul(&h, &w2, rows, 4 * c, c);
    for (i, v) in y.iter_mut().enumerate() {
        *v += b2[i % c];
    }
    y
}

/// MHSA block then FFN block, each inside a residual; the attention output
/// already carries its own `+x`.
pub fn vanilla_layer(store: &ParamStore<f64>, prefix: &str, x: &[f64], b: usize, n: usize, c: usize, heads: usize) -> Vec<f64> {
    let att = gmc_oracle(store, prefix, x, b, n, c, heads);
    let z: Vec<f64> = x.iter().zip(&att).map(|(a, m)| a + m).collect();
    let f = cpc_oracle(store, prefix, &z, c);
    z.iter().zip(&f).map(|(a, m)| a + m).collect()
}

pub mod metric;

/// Tabular two-step policy over three tokens: row 0 holds the first-step
/// logits, row `1 + y1` the second-step logits after `y1`.
pub mod toy {
    use dtnet_core::training::{scst_surrogate, sequence_log_probs};
    use dtnet_core::vocab::CaptionBatch;
    use dtnet_tensor::{Graph, ParamId, ParamStore, RngState, Tensor};

    pub const V: usize = 3;
    pub const ROWS: usize = V + 1;

    pub struct Policy {
        pub store: ParamStore<f64>,
        pub theta: ParamId,
        pub reward: [f64; V * V],
    }

    impl Policy {
        pub fn new(seed: u64) -> Self {
            let mut rng = RngState::new(seed);
            let logits: Vec<f64> = (0..ROWS * V).map(|_| rng.normal()).collect();
            let mut reward = [0.0; V * V];
            reward.iter_mut().for_each(|r| *r = rng.uniform_in(0.0, 2.0));
            let mut store = ParamStore::new();
            let theta = store.add("theta", Tensor::new(&[ROWS, V], logits).unwrap()).unwrap();
            Self { store, theta, reward }
        }

        fn probs(&self, row: usize) -> Vec<f64> {
            super::softmax(&self.store.value(self.theta).data()[row * V..(row + 1) * V])
        }

        /// Gradient of the expected reward by enumeration of all nine sequences.
        pub fn exact_gradient(&self) -> Vec<f64> {
            let p1 = self.probs(0);
            let mut g = vec![0.0; ROWS * V];
            for a in 0..V {
                let p2 = self.probs(1 + a);
                for b in 0..V {
                    let w = p1[a] * p2[b] * self.reward[a * V + b];
                    for j in 0..V {
                        g[j] += w * (f64::from(j == a) - p1[j]);
                        g[(1 + a) * V + j] += w * (f64::from(j == b) - p2[j]);
                    }
                }
            }
            g
        }

        /// One self-critical estimate from `k` sampled sequences, taken as the
        /// negated gradient of the library surrogate.
        pub fn estimate(&self, k: usize, rng: &mut RngState) -> Vec<f64> {
            let p1 = self.probs(0);
            let mut rows = Vec::with_capacity(2 * k);
            let mut targets = Vec::with_capacity(2 * k);
            let mut rewards = Vec::with_capacity(k);
            for _ in 0..k {
                let a = rng.categorical(&p1);
                let b = rng.categorical(&self.probs(1 + a));
                rows.extend([0, 1 + a]);
                targets.extend([a, b]);
                rewards.push(self.reward[a * V + b]);
            }
            let batch = CaptionBatch {
                inputs: vec![0; 2 * k],
                targets,
                lengths: vec![2; k],
                batch: k,
                steps: 2,
            };
            let g = Graph::new();
            let logits = g
                .param(&self.store, self.theta)
                .index_select(&rows)
                .unwrap()
                .reshape(&[k, 2, V])
                .unwrap();
            let lp = sequence_log_probs(logits, &batch).unwrap();
            let loss = scst_surrogate(lp, &rewards, k).unwrap();
            g.backward(loss).unwrap();
            g.param_grads()
                .into_iter()
                .find(|(id, _)| *id == self.theta)
                .map(|(_, t)| t.data().iter().map(|x| -x).collect())
                .unwrap_or_else(|| vec![0.0; ROWS * V])
        }

        /// Mean of `n` estimates.
        pub fn mean_estimate(&self, k: usize, n: usize, rng: &mut RngState) -> Vec<f64> {
            let mut acc = vec![0.0; ROWS * V];
            for _ in 0..n {
                for (a, e) in acc.iter_mut().zip(self.estimate(k, rng)) {
                    *a += e;
                }
            }
            acc.iter().map(|a| a / n as f64).collect()
        }
    }

    /// Largest relative error over coordinates whose magnitude exceeds `floor`.
    pub fn worst_rel_err(got: &[f64], want: &[f64], floor: f64) -> (f64, usize) {
        let mut worst = 0.0;
        let mut checked = 0;
        for (g, w) in got.iter().zip(want) {
            if w.abs() > floor {
                checked += 1;
                worst = f64::max(worst, (g - w).abs() / w.abs());
            }
        }
        (worst, checked)
    }
}
