//! Effective receptive field maps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelGraph;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Non-negative `H×W` map, max-normalised to 1 unless identically zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ErfMap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Pixels strictly above `threshold`.
    pub fn support(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v > threshold).collect()
    }

    pub fn support_count(&self, threshold: f64) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            s.push_str(&super::csv_row(row));
            s.push('\n');
        }
        s
    }

    /// Binary 8-bit greyscale PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        let pgm = stem.with_extension("pgm");
        let csv = stem.with_extension("csv");
        std::fs::File::create(&pgm)
            .and_then(|mut f| f.write_all(&self.to_pgm()))
            .map_err(|e| Error::io(&pgm, e))?;
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Accumulated `|∂ Σ_c y[c, H/2, W/2] / ∂x|` over probes and input channels,
/// where `f` maps an input `C×H×W` to a spatially resolved `C'×H'×W'`.
pub fn erf_map<F>(probes: &[Tensor], f: F) -> Result<ErfMap>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let first = probes.first().ok_or_else(|| Error::config("ERF needs at least one probe"))?;
    let s = first.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dim("erf_map", &s, &[0, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let mut acc = vec![0.0; h * w];
    for p in probes {
        if p.shape() != s.as_slice() {
            return Err(Error::dim("erf_map", p.shape(), &s));
        }
        let mut tape = Tape::new();
        let x = tape.variable(p);
        let y = f(&mut tape, x)?;
        let ys = tape.shape(y).to_vec();
        if ys.len() != 3 {
            return Err(Error::dim("erf_map output", &ys, &[0, 0, 0]));
        }
        let (c, oh, ow) = (ys[0], ys[1], ys[2]);
        let centre = (oh / 2) * ow + ow / 2;
        let idx = (0..c).map(|ch| ch * oh * ow + centre).collect();
        let picked = tape.gather(y, idx, &[c])?;
        let total = tape.sum(picked)?;
        tape.backward(total)?;
        let g = tape.grad_tensor(x);
        for ch in 0..s[0] {
            for (a, v) in acc.iter_mut().zip(&g.data()[ch * h * w..(ch + 1) * h * w]) {
                *a += v.abs();
            }
        }
    }
    let max = acc.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        acc.iter_mut().for_each(|v| *v /= max);
    }
    Ok(ErfMap {
        height: h,
        width: w,
        values: acc,
    })
}

/// Which model activation the ERF is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErfLayer {
    /// Output of the given stage.
    Stage(usize),
    /// Post-adapter output of the given global block.
    Block(usize),
}

pub fn erf_map_model(g: &ModelGraph, probes: &[Tensor], layer: ErfLayer) -> Result<ErfMap> {
    let n = match layer {
        ErfLayer::Stage(s) => (s, g.config.depths.len()),
        ErfLayer::Block(b) => (b, g.blocks.len()),
    };
    if n.0 >= n.1 {
        return Err(Error::config(format!("{layer:?} is out of range (model has {})", n.1)));
    }
    erf_map(probes, |tape, x| {
        let vars = g.register(tape);
        let trace = g.forward(tape, &vars, x)?;
        Ok(match layer {
            ErfLayer::Stage(s) => trace.stage_outputs[s],
            ErfLayer::Block(b) => trace.block_outputs[b],
        })
    })
}
