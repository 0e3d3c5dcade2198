//! Lightweight gating network: GAP, one shared hidden affine, then one
//! affine head per gating vector.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{sample_trunc_normal, TRUNC_NORMAL_STD};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterActivation {
    #[default]
    Softmax,
    Relu,
    Sigmoid,
}

impl fmt::Display for RouterActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouterActivation::Softmax => "softmax",
            RouterActivation::Relu => "relu",
            RouterActivation::Sigmoid => "sigmoid",
        })
    }
}

/// Names of the gating heads, in output order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateHead {
    G1,
    G2,
    GA,
    GB,
    GC,
}

impl GateHead {
    pub const ALL: [GateHead; 5] = [GateHead::G1, GateHead::G2, GateHead::GA, GateHead::GB, GateHead::GC];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for GateHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "").as_str() {
            "G1" => Ok(GateHead::G1),
            "G2" => Ok(GateHead::G2),
            "GA" => Ok(GateHead::GA),
            "GB" => Ok(GateHead::GB),
            "GC" => Ok(GateHead::GC),
            _ => Err(Error::config(format!("unknown gate head {s:?}"))),
        }
    }
}

impl fmt::Display for GateHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateHead::G1 => "G1",
            GateHead::G2 => "G2",
            GateHead::GA => "GA",
            GateHead::GB => "GB",
            GateHead::GC => "GC",
        })
    }
}

/// Optional top-K sparsification applied to every gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    #[serde(default = "default_true")]
    pub renormalize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    /// `C×h`
    pub w_hidden: Tensor,
    /// `h`
    pub b_hidden: Tensor,
    /// One `(h×M, M)` pair per gate: G1, G2, then one per kernel size.
    pub heads: Vec<(Tensor, Tensor)>,
    pub activation: RouterActivation,
    pub top_k: Option<TopK>,
}

#[derive(Clone, Debug)]
pub struct RouterVars {
    pub w_hidden: Var,
    pub b_hidden: Var,
    pub heads: Vec<(Var, Var)>,
}

/// Gate vectors of one router call: G1, G2, then the spatial gates.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingVectors {
    pub gates: Vec<Tensor>,
}

impl GatingVectors {
    pub fn g1(&self) -> &Tensor {
        &self.gates[0]
    }

    pub fn g2(&self) -> &Tensor {
        &self.gates[1]
    }

    pub fn spatial(&self) -> &[Tensor] {
        &self.gates[2..]
    }

    pub fn head(&self, head: GateHead) -> Option<&Tensor> {
        self.gates.get(head.index())
    }
}

impl RouterParams {
    /// Weights drawn from the truncated normal, biases zero.
    pub fn init(
        channels: usize,
        hidden: usize,
        capacity: usize,
        n_heads: usize,
        activation: RouterActivation,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || hidden == 0 || capacity == 0 {
            return Err(Error::config("router extents must be positive"));
        }
        if !(3..=5).contains(&n_heads) {
            return Err(Error::config(format!("router needs 3 to 5 heads, got {n_heads}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tn = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| sample_trunc_normal(TRUNC_NORMAL_STD, &mut rng)).collect();
            Tensor::from_parts(shape.to_vec(), data).with_requires_grad(true)
        };
        let w_hidden = tn(&[channels, hidden]);
        let heads = (0..n_heads)
            .map(|_| {
                (
                    tn(&[hidden, capacity]),
                    Tensor::zeros(&[capacity]).with_requires_grad(true),
                )
            })
            .collect();
        Ok(RouterParams {
            w_hidden,
            b_hidden: Tensor::zeros(&[hidden]).with_requires_grad(true),
            heads,
            activation,
            top_k: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_hidden.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[1]
    }

    pub fn capacity(&self) -> usize {
        self.heads[0].1.len()
    }

    pub fn register(&self, tape: &mut Tape) -> RouterVars {
        RouterVars {
            w_hidden: tape.leaf(&self.w_hidden),
            b_hidden: tape.leaf(&self.b_hidden),
            heads: self
                .heads
                .iter()
                .map(|(w, b)| (tape.leaf(w), tape.leaf(b)))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("w_hidden".to_string(), &self.w_hidden),
            ("b_hidden".to_string(), &self.b_hidden),
        ];
        for (i, (w, b)) in self.heads.iter().enumerate() {
            let name = GateHead::ALL[i];
            out.push((format!("{name}.w"), w));
            out.push((format!("{name}.b"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_hidden, &mut self.b_hidden];
        for (w, b) in self.heads.iter_mut() {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Closed-form router size: `C·h + h + n_heads·(h·M + M)`.
pub fn router_param_count(channels: usize, hidden: usize, capacity: usize, n_heads: usize) -> usize {
    channels * hidden + hidden + n_heads * (hidden * capacity + capacity)
}

/// Runs the router on `x[C×H×W]` and returns one gate per head.
pub fn route_var(
    tape: &mut Tape,
    x: Var,
    vars: &RouterVars,
    activation: RouterActivation,
    top_k: Option<TopK>,
) -> Result<Vec<Var>> {
    let c = tape.shape(x)[0];
    let wc = tape.shape(vars.w_hidden)[0];
    if c != wc {
        return Err(Error::dim("route", tape.shape(x), tape.shape(vars.w_hidden)));
    }
    let pooled = tape.gap2d(x)?;
    let hidden = tape.affine(pooled, vars.w_hidden, vars.b_hidden)?;
    let mut gates = Vec::with_capacity(vars.heads.len());
    for &(w, b) in &vars.heads {
        let logits = tape.affine(hidden, w, b)?;
        let g = match activation {
            RouterActivation::Softmax => tape.softmax(logits)?,
            RouterActivation::Relu => tape.relu(logits)?,
            RouterActivation::Sigmoid => tape.sigmoid(logits)?,
        };
        let g = match top_k {
            Some(tk) => top_k_var(tape, g, tk.k, tk.renormalize)?,
            None => g,
        };
        gates.push(g);
    }
    Ok(gates)
}

pub fn route(x: &Tensor, p: &RouterParams) -> Result<GatingVectors> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = p.register(&mut tape);
    let gates = route_var(&mut tape, xv, &vars, p.activation, p.top_k)?;
    Ok(GatingVectors {
        gates: gates.into_iter().map(|g| tape.value(g).clone()).collect(),
    })
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(g: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Keeps the `k` largest gate entries. `k == M` returns the input node
/// unchanged, so dense and "top-M" routing are the same computation.
pub fn top_k_var(tape: &mut Tape, g: Var, k: usize, renormalize: bool) -> Result<Var> {
    let m = tape.value(g).len();
    if k == 0 || k > m {
        return Err(Error::config(format!("top-k {k} outside 1..={m}")));
    }
    if k == m {
        return Ok(g);
    }
    let mut keep = vec![false; m];
    for i in top_k_indices(tape.value(g).data(), k) {
        keep[i] = true;
    }
    tape.mask(g, keep, renormalize)
}

pub fn top_k_sparsify(g: &Tensor, k: usize, renormalize: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(g);
    let out = top_k_var(&mut tape, v, k, renormalize)?;
    Ok(tape.value(out).clone())
}
