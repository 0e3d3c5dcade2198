//! One-factor-at-a-time ablation grids.
//!
//! Every axis varies a single setting of the base configuration while the
//! rest stays fixed, so each table of the study becomes one block of rows.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneStyle};
use crate::block::{AdapterConfig, Layout};
use crate::config::RunConfig;
use crate::diagnostics::audit_model;
use crate::error::{Error, Result};
use crate::expert::{CapacityPolicy, InitStrategy};
use crate::optim::OptimState;
use crate::router::{RouterActivation, TopK};
use crate::task::TaskConfig;
use crate::train::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeOff {
    pub capacity: CapacityPolicy,
    pub latent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupValue {
    Size(usize),
    /// `"stage"`: one center per stage.
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopKValue {
    K(usize),
    /// `"all"`: K = M, which must reproduce dense routing exactly.
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSet {
    pub sizes: Vec<usize>,
    pub sa: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Axes {
    pub trade_off: Vec<TradeOff>,
    pub group_size: Vec<GroupValue>,
    pub top_k: Vec<TopKValue>,
    pub kernels: Vec<KernelSet>,
    pub layout: Vec<Layout>,
    pub router_activation: Vec<RouterActivation>,
    pub router_hidden: Vec<usize>,
    pub init: Vec<InitStrategy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub base: RunConfig,
    #[serde(default)]
    pub axes: Axes,
    /// Emit the unmodified base configuration as the first row.
    #[serde(default = "yes")]
    pub include_base: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub axis: &'static str,
    pub value: String,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub index: usize,
    pub axis: &'static str,
    pub value: String,
    pub adapter_params: usize,
    pub final_loss: Option<f64>,
    pub metric: f64,
}

fn compact<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable").replace(',', ";").replace('"', "")
}

impl AblationGrid {
    /// The full study at toy scale. The base uses a 6-block second stage so
    /// that the scope and top-K axes have room for several settings.
    pub fn toy_study() -> Self {
        let base = RunConfig {
            seed: 0,
            backbone: BackboneConfig {
                style: BackboneStyle::ConvnextLike,
                depths: vec![2, 6],
                ..BackboneConfig::default()
            },
            task: TaskConfig {
                eval_samples: 16,
                ..TaskConfig::default()
            },
            train: TrainConfig {
                steps: 30,
                batch_size: 4,
                eval_every: 0,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        };
        let k = |sizes: &[usize], sa| KernelSet {
            sizes: sizes.to_vec(),
            sa,
        };
        let t = |capacity, latent| TradeOff { capacity, latent };
        AblationGrid {
            base,
            axes: Axes {
                trade_off: vec![
                    t(CapacityPolicy::FourL, 3),
                    t(CapacityPolicy::TwoL, 5),
                    t(CapacityPolicy::L, 8),
                    t(CapacityPolicy::HalfL, 12),
                ],
                group_size: vec![
                    GroupValue::Named("stage".into()),
                    GroupValue::Size(3),
                    GroupValue::Size(2),
                    GroupValue::Size(1),
                ],
                top_k: vec![
                    TopKValue::K(1),
                    TopKValue::K(2),
                    TopKValue::K(4),
                    TopKValue::Named("all".into()),
                ],
                kernels: vec![
                    k(&[3], false),
                    k(&[5], false),
                    k(&[7], false),
                    k(&[3, 5, 7], false),
                    k(&[5, 7, 9], false),
                    k(&[3, 5, 7], true),
                    k(&[5, 7, 9], true),
                ],
                layout: vec![Layout::Parallel, Layout::SequentialNores, Layout::SequentialRes],
                router_activation: vec![RouterActivation::Relu, RouterActivation::Sigmoid, RouterActivation::Softmax],
                router_hidden: vec![1, 4, 7],
                init: vec![
                    InitStrategy::TruncNormal,
                    InitStrategy::KaimingNormal,
                    InitStrategy::KaimingUniform,
                ],
            },
            include_base: true,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Expands the grid and validates every cell; nothing runs on error.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        self.base.validate()?;
        let base_adapter = self
            .base
            .adapter
            .clone()
            .ok_or_else(|| Error::config("the ablation base must configure adapters"))?;
        let mut cells = Vec::new();
        let mut add = |axis: &'static str, value: String, f: &dyn Fn(&mut AdapterConfig)| {
            let mut config = self.base.clone();
            let mut a = base_adapter.clone();
            f(&mut a);
            config.adapter = Some(a);
            cells.push(Cell { axis, value, config });
        };
        if self.include_base {
            add("base", "-".into(), &|_| {});
        }
        let ax = &self.axes;
        for v in &ax.trade_off {
            add("trade_off", format!("M={} latent={}", v.capacity, v.latent), &|a| {
                a.capacity = v.capacity;
                a.latent = v.latent;
                a.latent_per_stage = None;
            });
        }
        for v in &ax.group_size {
            let size = match v {
                GroupValue::Size(0) => return Err(Error::config("group size 0")),
                GroupValue::Size(n) => Some(*n),
                GroupValue::Named(s) if s == "stage" => None,
                GroupValue::Named(s) => return Err(Error::config(format!("unknown group size {s:?}"))),
            };
            let label = size.map_or("stage".to_string(), |n| n.to_string());
            add("group_size", label, &|a| a.group_size = size);
        }
        for v in &ax.top_k {
            let k = match v {
                TopKValue::K(0) => return Err(Error::config("top-k 0")),
                TopKValue::K(n) => *n,
                TopKValue::Named(s) if s == "all" => usize::MAX,
                TopKValue::Named(s) => return Err(Error::config(format!("unknown top-k value {s:?}"))),
            };
            let label = if k == usize::MAX { "all".to_string() } else { k.to_string() };
            add("top_k", label, &|a| a.top_k = Some(TopK { k, renormalize: true }));
        }
        for v in &ax.kernels {
            let label = format!("{}{}", compact(&v.sizes), if v.sa { "+SA" } else { "" });
            add("kernels", label, &|a| {
                a.kernel_sizes = v.sizes.clone();
                a.use_sa = v.sa;
            });
        }
        for v in &ax.layout {
            add("layout", v.to_string(), &|a| a.layout = *v);
        }
        for v in &ax.router_activation {
            add("router_activation", v.to_string(), &|a| a.router_activation = *v);
        }
        for v in &ax.router_hidden {
            add("router_hidden", v.to_string(), &|a| a.router_hidden = *v);
        }
        for v in &ax.init {
            add("init", v.to_string(), &|a| a.init = *v);
        }
        for (i, c) in cells.iter().enumerate() {
            c.config
                .validate()
                .map_err(|e| Error::config(format!("cell {i} ({} = {}): {e}", c.axis, c.value)))?;
        }
        Ok(cells)
    }
}

/// Trains and evaluates one cell from scratch.
pub fn run_cell(index: usize, cell: &Cell) -> Result<CellResult> {
    let cfg = &cell.config;
    let mut g = cfg.build_model()?;
    let report = train(
        &mut g,
        &mut OptimState::new(),
        &cfg.task,
        &cfg.train,
        cfg.data_seed(),
        cfg.train.steps,
    )?;
    Ok(CellResult {
        index,
        axis: cell.axis,
        value: cell.value.clone(),
        adapter_params: audit_model(&g).grand_total,
        final_loss: report.losses().last().copied(),
        metric: report
            .final_metric()
            .ok_or_else(|| Error::Usage("training produced no metric".into()))?,
    })
}

/// Runs every cell (in parallel) and returns rows in grid order.
pub fn run_grid(grid: &AblationGrid) -> Result<Vec<CellResult>> {
    let cells = grid.cells()?;
    cells
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_cell(i, c))
        .collect()
}

pub fn results_csv(rows: &[CellResult]) -> String {
    let mut s = String::from("cell,axis,value,adapter_params,final_loss,metric\n");
    for r in rows {
        let loss = r.final_loss.map(|l| format!("{l:e}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{:e}\n",
            r.index, r.axis, r.value, r.adapter_params, loss, r.metric
        ));
    }
    s
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_csv_atomic(path: &Path, csv: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, csv).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
