//! Linear centered kernel alignment.

use serde::Serialize;

use crate::backbone::ModelGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column-centred copy of a row-major `n×d` matrix.
fn centered(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean;
        }
    }
    out
}

/// `n×n` Gram matrix `X Xᵀ`.
fn gram(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x[i * d..(i + 1) * d].iter().zip(&x[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::dim("linear_cka", s, &[0, 0])),
    }
}

/// `‖YᶜᵀXᶜ‖²_F / (‖XᶜᵀXᶜ‖_F ‖YᶜᵀYᶜ‖_F)` for `X[n×d1]`, `Y[n×d2]`.
///
/// Evaluated through the `n×n` Gram matrices, using
/// `‖YᵀX‖²_F = tr(XXᵀ YYᵀ)`, so wide feature maps stay cheap.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, dx) = as_matrix(x)?;
    let (ny, dy) = as_matrix(y)?;
    if n != ny {
        return Err(Error::dim("linear_cka", x.shape(), y.shape()));
    }
    if n < 2 {
        return Err(Error::config("linear CKA needs at least two samples"));
    }
    let kx = gram(&centered(x.data(), n, dx), n, dx);
    let ky = gram(&centered(y.data(), n, dy), n, dy);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let (nx, nyy) = (dot(&kx, &kx).sqrt(), dot(&ky, &ky).sqrt());
    if nx == 0.0 || nyy == 0.0 {
        log::warn!("linear CKA of a zero-variance input is defined as 0");
        return Ok(0.0);
    }
    Ok((dot(&kx, &ky) / (nx * nyy)).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CkaMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CkaMatrix {
    /// Pairwise CKA of per-layer feature matrices (`n×d_l`, same `n`).
    pub fn from_features(labels: Vec<String>, features: &[Tensor]) -> Result<Self> {
        let l = features.len();
        let mut values = vec![vec![0.0; l]; l];
        for i in 0..l {
            for j in i..l {
                let v = linear_cka(&features[i], &features[j])?;
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        Ok(CkaMatrix { labels, values })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("layer,{}\n", self.labels.join(","));
        for (label, row) in self.labels.iter().zip(&self.values) {
            s.push_str(&format!("{label},{}\n", super::csv_row(row)));
        }
        s
    }
}

/// CKA between every pair of post-adapter block outputs over `probes`.
pub fn cka_matrix(g: &ModelGraph, probes: &[Tensor]) -> Result<CkaMatrix> {
    if probes.len() < 2 {
        return Err(Error::config("CKA needs at least two probe inputs"));
    }
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); g.blocks.len()];
    let mut dims = vec![0; g.blocks.len()];
    for p in probes {
        let (tape, trace) = g.run(p)?;
        for (l, &v) in trace.block_outputs.iter().enumerate() {
            let t = tape.value(v);
            dims[l] = t.len();
            per_layer[l].extend_from_slice(t.data());
        }
    }
    let features = per_layer
        .into_iter()
        .zip(&dims)
        .map(|(data, &d)| Tensor::new(vec![probes.len(), d], data))
        .collect::<Result<Vec<_>>>()?;
    let labels = g
        .blocks
        .iter()
        .map(|b| format!("s{}b{}", b.stage, b.index_in_stage))
        .collect();
    CkaMatrix::from_features(labels, &features)
}
