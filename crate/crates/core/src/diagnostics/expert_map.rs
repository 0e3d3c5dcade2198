//! Mean gate distributions per adapter site.

use serde::Serialize;

use crate::backbone::ModelGraph;
use crate::error::{Error, Result};
use crate::router::GateHead;
use crate::tensor::Tensor;

/// One row per adapter site of a stage, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationMap {
    pub head: GateHead,
    pub stage: usize,
    pub sites: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
    pub n_images: usize,
}

impl ActivationMap {
    pub fn to_csv(&self) -> String {
        let m = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let header: Vec<String> = (0..m).map(|j| format!("e{j}")).collect();
        let mut s = format!("site,{}\n", header.join(","));
        for (site, row) in self.sites.iter().zip(&self.rows) {
            s.push_str(&format!("{site},{}\n", super::csv_row(row)));
        }
        s
    }
}

pub fn expert_activation_map(g: &ModelGraph, images: &[Tensor], head: GateHead, stage: usize) -> Result<ActivationMap> {
    if images.is_empty() {
        return Err(Error::config("expert map needs at least one image"));
    }
    let sites: Vec<usize> = (0..g.sites.len()).filter(|&i| g.sites[i].stage == stage).collect();
    if sites.is_empty() {
        return Err(Error::config(format!("stage {stage} has no adapters")));
    }
    let n_heads = g.centers[g.sites[sites[0]].module.center].kernel_sizes.len() + 2;
    if head.index() >= n_heads {
        return Err(Error::config(format!("gate head {head} does not exist with {} kernel sizes", n_heads - 2)));
    }
    let mut rows: Vec<Vec<f64>> = sites
        .iter()
        .map(|&i| vec![0.0; g.centers[g.sites[i].module.center].capacity])
        .collect();
    for img in images {
        let (tape, trace) = g.run(img)?;
        for (row, &i) in rows.iter_mut().zip(&sites) {
            let gate = tape.value(trace.site_gates[i][head.index()]);
            for (r, v) in row.iter_mut().zip(gate.data()) {
                *r += v;
            }
        }
    }
    let n = images.len() as f64;
    rows.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(ActivationMap {
        head,
        stage,
        sites,
        rows,
        n_images: images.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::block::AdapterConfig;
    use crate::diagnostics::random_probes;

    fn adapted() -> ModelGraph {
        let mut g = ModelGraph::build(&BackboneConfig::default(), 4).unwrap();
        g.insert_adapters(&AdapterConfig::default(), 5).unwrap();
        g
    }

    #[test]
    fn single_image_rows_equal_its_gates() {
        let g = adapted();
        let img = random_probes(1, 1, 16, 3);
        let map = expert_activation_map(&g, &img, GateHead::GB, 1).unwrap();
        let (tape, trace) = g.run(&img[0]).unwrap();
        assert_eq!(map.sites, vec![4, 5, 6, 7]);
        for (row, &i) in map.rows.iter().zip(&map.sites) {
            let gate = tape.value(trace.site_gates[i][GateHead::GB.index()]);
            assert_eq!(row.as_slice(), gate.data());
        }
    }

    #[test]
    fn rows_are_simplex_and_mean_is_linear() {
        let g = adapted();
        let imgs = random_probes(4, 1, 16, 8);
        let all = expert_activation_map(&g, &imgs, GateHead::G2, 0).unwrap();
        let a = expert_activation_map(&g, &imgs[..2], GateHead::G2, 0).unwrap();
        let b = expert_activation_map(&g, &imgs[2..], GateHead::G2, 0).unwrap();
        for (k, row) in all.rows.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (j, v) in row.iter().enumerate() {
                assert!((v - 0.5 * (a.rows[k][j] + b.rows[k][j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors() {
        let g = adapted();
        let imgs = random_probes(1, 1, 16, 0);
        assert!(expert_activation_map(&g, &imgs, GateHead::G1, 2).is_err());
        assert!(expert_activation_map(&g, &[], GateHead::G1, 0).is_err());
        let plain = ModelGraph::build(&BackboneConfig::default(), 4).unwrap();
        assert!(expert_activation_map(&plain, &imgs, GateHead::G1, 0).is_err());
    }
}
