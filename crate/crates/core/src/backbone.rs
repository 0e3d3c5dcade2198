//! Tiny frozen hierarchical backbones with adapter insertion points.
//!
//! Features are channel-major (`C×H×W`) throughout. Each stage starts with a
//! patch embedding (space-to-depth, linear, layer norm) followed by `L`
//! blocks. A Swin-like block has a full-attention token mixer and an MLP
//! channel mixer, each pre-norm with a residual; an adapter follows each of
//! them. A ConvNeXt-like block is one residual unit (3×3 depthwise conv,
//! norm, pointwise MLP) followed by a single adapter.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{adaroute_forward_var, AdaRouteModule, AdaRouteVars, AdapterConfig};
use crate::error::{Error, Result};
use crate::expert::{partition_scope, CenterVars, ExpertCenter};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneStyle {
    #[default]
    SwinLike,
    ConvnextLike,
}

impl BackboneStyle {
    pub fn sites_per_block(self) -> usize {
        match self {
            BackboneStyle::SwinLike => 2,
            BackboneStyle::ConvnextLike => 1,
        }
    }
}

impl fmt::Display for BackboneStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneStyle::SwinLike => "swin_like",
            BackboneStyle::ConvnextLike => "convnext_like",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub style: BackboneStyle,
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    /// Downsampling factor of each stage's patch embedding.
    pub patch: Vec<usize>,
    pub in_channels: usize,
    /// Attention head width (Swin-like only).
    pub head_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            style: BackboneStyle::SwinLike,
            depths: vec![2, 2],
            dims: vec![16, 32],
            patch: vec![2, 2],
            in_channels: 1,
            head_dim: 8,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.dims.len() || self.patch.len() != self.dims.len() {
            return Err(Error::config(format!(
                "depths {:?}, dims {:?} and patch {:?} must be non-empty and equally long",
                self.depths, self.dims, self.patch
            )));
        }
        if self.dims.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("dims must be strictly increasing: {:?}", self.dims)));
        }
        if self.depths.iter().chain(&self.dims).chain(&self.patch).any(|&v| v == 0) {
            return Err(Error::config("depths, dims and patch factors must be positive"));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.head_dim == 0 {
            return Err(Error::config("in_channels, mlp_ratio and head_dim must be positive"));
        }
        if self.style == BackboneStyle::SwinLike {
            if let Some(&d) = self.dims.iter().find(|&&d| d % self.head_dim != 0) {
                return Err(Error::config(format!("dim {d} not divisible by head_dim {}", self.head_dim)));
            }
        }
        Ok(())
    }

    pub fn n_heads(&self, stage: usize) -> usize {
        self.dims[stage] / self.head_dim
    }

    /// Total downsampling before `stage` runs its blocks.
    pub fn stride(&self, stage: usize) -> usize {
        self.patch[..=stage].iter().product()
    }

    pub fn n_sites(&self) -> usize {
        self.depths.iter().sum::<usize>() * self.style.sites_per_block()
    }
}

/// Where an adapter sits inside its block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteSlot {
    TokenMixer,
    ChannelMixer,
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSite {
    pub stage: usize,
    /// Global block index.
    pub block: usize,
    pub slot: SiteSlot,
    pub module: AdaRouteModule,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub stage: usize,
    pub index_in_stage: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    /// Per-pixel logits at input resolution from every stage.
    Segmentation { n_classes: usize },
    /// Global-average-pooled last stage followed by a linear layer.
    Classification { n_classes: usize },
}

impl HeadKind {
    pub fn n_classes(self) -> usize {
        match self {
            HeadKind::Segmentation { n_classes } | HeadKind::Classification { n_classes } => n_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub params: IndexMap<String, Tensor>,
}

/// Which group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Backbone,
    Center,
    Router,
    Sa,
    Head,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Backbone => "backbone",
            Category::Center => "center",
            Category::Router => "router",
            Category::Sa => "sa",
            Category::Head => "head",
        })
    }
}

/// Frozen backbone, inserted adapters, expert centers and task head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub config: BackboneConfig,
    pub backbone: IndexMap<String, Tensor>,
    pub blocks: Vec<BlockInfo>,
    pub adapter_config: Option<AdapterConfig>,
    pub centers: Vec<ExpertCenter>,
    pub sites: Vec<AdapterSite>,
    pub head: Option<TaskHead>,
}

/// Tape handles for every tensor of a [`ModelGraph`].
pub struct ModelVars {
    backbone: Vec<Var>,
    backbone_index: HashMap<String, usize>,
    pub centers: Vec<CenterVars>,
    pub sites: Vec<AdaRouteVars>,
    head: Vec<Var>,
    head_index: HashMap<String, usize>,
}

impl ModelVars {
    fn bb(&self, name: &str) -> Var {
        self.backbone[self.backbone_index[name]]
    }

    fn hd(&self, name: &str) -> Var {
        self.head[self.head_index[name]]
    }

    /// Handles in the order of [`ModelGraph::tensors_mut`].
    pub fn flat(&self) -> Vec<Var> {
        let mut out = self.backbone.clone();
        for c in &self.centers {
            out.push(c.e_a);
            out.push(c.e_b);
            out.extend(&c.spatial);
        }
        for s in &self.sites {
            if let Some(r) = &s.router {
                out.push(r.w_hidden);
                out.push(r.b_hidden);
                for &(w, b) in &r.heads {
                    out.push(w);
                    out.push(b);
                }
            }
            if let Some((w, b)) = s.sa {
                out.push(w);
                out.push(b);
            }
        }
        out.extend(&self.head);
        out
    }
}

/// Values recorded during one forward pass.
pub struct ForwardTrace {
    pub stage_outputs: Vec<Var>,
    /// Post-adapter output of every block.
    pub block_outputs: Vec<Var>,
    /// Gate vectors per adapter site.
    pub site_gates: Vec<Vec<Var>>,
    pub logits: Option<Var>,
}

/// SplitMix64 step, used to derive independent sub-seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn linear_weight(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng)
}

fn small_bias(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[n], 0.02, rng)
}

impl ModelGraph {
    /// Builds the frozen backbone with deterministic random weights.
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: IndexMap<String, Tensor> = IndexMap::new();
        let mut blocks = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (s, (&depth, &dim)) in cfg.depths.iter().zip(&cfg.dims).enumerate() {
            let pf = cfg.patch[s];
            let fan = in_ch * pf * pf;
            p.insert(format!("s{s}.embed.w"), linear_weight(dim, fan, &mut rng));
            p.insert(format!("s{s}.embed.b"), small_bias(dim, &mut rng));
            p.insert(format!("s{s}.embed.ln.g"), Tensor::ones(&[dim]));
            p.insert(format!("s{s}.embed.ln.b"), Tensor::zeros(&[dim]));
            let hidden = dim * cfg.mlp_ratio;
            for b in 0..depth {
                let pre = format!("s{s}.b{b}");
                match cfg.style {
                    BackboneStyle::SwinLike => {
                        p.insert(format!("{pre}.ln1.g"), Tensor::ones(&[dim]));
                        p.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[dim]));
                        for h in 0..cfg.n_heads(s) {
                            for qkv in ["q", "k", "v"] {
                                p.insert(format!("{pre}.attn.{qkv}{h}"), linear_weight(cfg.head_dim, dim, &mut rng));
                            }
                            p.insert(format!("{pre}.attn.o{h}"), linear_weight(dim, cfg.head_dim, &mut rng));
                        }
                        p.insert(format!("{pre}.attn.ob"), small_bias(dim, &mut rng));
                        p.insert(format!("{pre}.ln2.g"), Tensor::ones(&[dim]));
                        p.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[dim]));
                    }
                    BackboneStyle::ConvnextLike => {
                        p.insert(format!("{pre}.dw.k"), Tensor::randn(&[dim, 3, 3], 1.0 / 3.0, &mut rng));
                        p.insert(format!("{pre}.dw.b"), small_bias(dim, &mut rng));
                        p.insert(format!("{pre}.ln.g"), Tensor::ones(&[dim]));
                        p.insert(format!("{pre}.ln.b"), Tensor::zeros(&[dim]));
                    }
                }
                p.insert(format!("{pre}.mlp.w1"), linear_weight(hidden, dim, &mut rng));
                p.insert(format!("{pre}.mlp.b1"), small_bias(hidden, &mut rng));
                p.insert(format!("{pre}.mlp.w2"), linear_weight(dim, hidden, &mut rng));
                p.insert(format!("{pre}.mlp.b2"), small_bias(dim, &mut rng));
                blocks.push(BlockInfo {
                    stage: s,
                    index_in_stage: b,
                });
            }
            in_ch = dim;
        }
        for t in p.values_mut() {
            t.requires_grad = false;
        }
        Ok(ModelGraph {
            config: cfg.clone(),
            backbone: p,
            blocks,
            adapter_config: None,
            centers: Vec::new(),
            sites: Vec::new(),
            head: None,
        })
    }

    pub fn has_adapters(&self) -> bool {
        self.adapter_config.is_some()
    }

    /// Attaches adapters at every insertion point with one shared center per
    /// stage, or per group of consecutive blocks when `group_size` is set.
    pub fn insert_adapters(&mut self, cfg: &AdapterConfig, seed: u64) -> Result<()> {
        if self.has_adapters() {
            return Err(Error::Usage("adapters are already inserted".into()));
        }
        cfg.validate()?;
        let spb = self.config.style.sites_per_block();
        let mut centers = Vec::new();
        let mut sites = Vec::new();
        let mut block_base = 0;
        for (s, &depth) in self.config.depths.iter().enumerate() {
            let dim = self.config.dims[s];
            let latent = cfg.latent_for_stage(s);
            let stage_blocks: Vec<usize> = (block_base..block_base + depth).collect();
            let groups = partition_scope(&stage_blocks, cfg.group_size.unwrap_or(depth))?;
            for group in groups {
                let m = cfg.capacity.capacity(group.len());
                let ci = centers.len();
                let mut center = ExpertCenter::init(
                    m,
                    dim,
                    latent,
                    &cfg.kernel_sizes,
                    cfg.init,
                    derive_seed(seed, 1000 + ci as u64),
                )?;
                for (rank, &b) in group.iter().enumerate() {
                    for k in 0..spb {
                        let slot = match (self.config.style, k) {
                            (BackboneStyle::SwinLike, 0) => SiteSlot::TokenMixer,
                            (BackboneStyle::SwinLike, _) => SiteSlot::ChannelMixer,
                            (BackboneStyle::ConvnextLike, _) => SiteSlot::Block,
                        };
                        let site_id = sites.len();
                        let module = AdaRouteModule::new(
                            ci,
                            &center,
                            cfg,
                            rank * spb + k,
                            derive_seed(seed, 5000 + site_id as u64),
                        )?;
                        center.scope.push(site_id);
                        sites.push(AdapterSite {
                            stage: s,
                            block: b,
                            slot,
                            module,
                        });
                    }
                }
                centers.push(center);
            }
            block_base += depth;
        }
        self.centers = centers;
        self.sites = sites;
        self.adapter_config = Some(cfg.clone());
        Ok(())
    }

    /// Adds a freshly initialised trainable task head, replacing any other.
    pub fn attach_head(&mut self, kind: HeadKind, seed: u64) -> Result<()> {
        let k = kind.n_classes();
        if k < 2 {
            return Err(Error::config("a task head needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        match kind {
            HeadKind::Segmentation { .. } => {
                for (s, &d) in self.config.dims.iter().enumerate() {
                    params.insert(format!("seg.w{s}"), linear_weight(k, d, &mut rng));
                }
                params.insert("seg.b".to_string(), Tensor::zeros(&[k]));
            }
            HeadKind::Classification { .. } => {
                let d = *self.config.dims.last().unwrap();
                params.insert("cls.w".to_string(), Tensor::randn(&[d, k], 1.0 / (d as f64).sqrt(), &mut rng));
                params.insert("cls.b".to_string(), Tensor::zeros(&[k]));
            }
        }
        for t in params.values_mut() {
            t.requires_grad = true;
        }
        self.head = Some(TaskHead { kind, params });
        Ok(())
    }

    /// Every tensor with its qualified name and category, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Category, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in &self.backbone {
            out.push((format!("backbone.{n}"), Category::Backbone, t));
        }
        for (i, c) in self.centers.iter().enumerate() {
            for (n, t) in c.tensors() {
                out.push((format!("center{i}.{n}"), Category::Center, t));
            }
        }
        for (i, s) in self.sites.iter().enumerate() {
            for (n, t) in s.module.tensors() {
                let cat = if n.starts_with("sa.") { Category::Sa } else { Category::Router };
                out.push((format!("site{i}.{n}"), cat, t));
            }
        }
        if let Some(h) = &self.head {
            for (n, t) in &h.params {
                out.push((format!("head.{n}"), Category::Head, t));
            }
        }
        out
    }

    /// Mutable tensors in the order of [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.backbone.values_mut().collect();
        for c in &mut self.centers {
            out.extend(c.tensors_mut());
        }
        for s in &mut self.sites {
            out.extend(s.module.tensors_mut());
        }
        if let Some(h) = &mut self.head {
            out.extend(h.params.values_mut());
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(_, _, t)| t.requires_grad)
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let backbone: Vec<Var> = self.backbone.values().map(|t| tape.leaf(t)).collect();
        let backbone_index = self.backbone.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let centers = self.centers.iter().map(|c| c.register(tape)).collect();
        let sites = self.sites.iter().map(|s| s.module.register(tape)).collect();
        let (head, head_index) = match &self.head {
            Some(h) => (
                h.params.values().map(|t| tape.leaf(t)).collect(),
                h.params.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect(),
            ),
            None => (Vec::new(), HashMap::new()),
        };
        ModelVars {
            backbone,
            backbone_index,
            centers,
            sites,
            head,
            head_index,
        }
    }

    /// Copies gradients from the tape into the `grad` slot of every trainable
    /// tensor (zeros when unreachable); frozen tensors get none.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        let flat = vars.flat();
        for (t, v) in self.tensors_mut().into_iter().zip(flat) {
            t.grad = if t.requires_grad {
                Some(tape.grad_tensor(v).into_data())
            } else {
                None
            };
        }
    }

    /// Runs the network on one `C_in×H×W` input.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, input: Var) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let s0 = tape.shape(input).to_vec();
        if s0.len() != 3 || s0[0] != cfg.in_channels {
            return Err(Error::dim("model input", &s0, &[cfg.in_channels, 0, 0]));
        }
        let (in_h, in_w) = (s0[1], s0[2]);
        let mut x = input;
        let mut stage_outputs = Vec::new();
        let mut block_outputs = Vec::new();
        let mut site_gates: Vec<Vec<Var>> = vec![Vec::new(); self.sites.len()];
        let mut sites_by_block: Vec<Vec<usize>> = vec![Vec::new(); self.blocks.len()];
        for (i, s) in self.sites.iter().enumerate() {
            sites_by_block[s.block].push(i);
        }
        let mut global = 0;
        for s in 0..cfg.depths.len() {
            x = self.patch_embed(tape, vars, x, s)?;
            for b in 0..cfg.depths[s] {
                let pre = format!("s{s}.b{b}");
                let block_sites = &sites_by_block[global];
                match cfg.style {
                    BackboneStyle::SwinLike => {
                        let a = self.attention(tape, vars, x, s, &pre)?;
                        x = tape.add(x, a)?;
                        x = self.apply_site(tape, vars, x, block_sites.first().copied(), &mut site_gates)?;
                        let n = self.norm(tape, vars, x, &format!("{pre}.ln2"))?;
                        let m = self.mlp(tape, vars, n, &pre)?;
                        x = tape.add(x, m)?;
                        x = self.apply_site(tape, vars, x, block_sites.get(1).copied(), &mut site_gates)?;
                    }
                    BackboneStyle::ConvnextLike => {
                        let d = tape.dwconv2d(x, vars.bb(&format!("{pre}.dw.k")))?;
                        let d = tape.add_channel_bias(d, vars.bb(&format!("{pre}.dw.b")))?;
                        let n = self.norm(tape, vars, d, &format!("{pre}.ln"))?;
                        let m = self.mlp(tape, vars, n, &pre)?;
                        x = tape.add(x, m)?;
                        x = self.apply_site(tape, vars, x, block_sites.first().copied(), &mut site_gates)?;
                    }
                }
                block_outputs.push(x);
                global += 1;
            }
            stage_outputs.push(x);
        }
        let logits = match &self.head {
            Some(h) => Some(self.head_forward(tape, vars, h.kind, &stage_outputs, in_h, in_w)?),
            None => None,
        };
        Ok(ForwardTrace {
            stage_outputs,
            block_outputs,
            site_gates,
            logits,
        })
    }

    fn apply_site(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        site: Option<usize>,
        gates: &mut [Vec<Var>],
    ) -> Result<Var> {
        let Some(i) = site else { return Ok(x) };
        let module = &self.sites[i].module;
        let out = adaroute_forward_var(tape, x, module, &vars.centers[module.center], &vars.sites[i])?;
        gates[i] = out.gates;
        Ok(out.y)
    }

    fn patch_embed(&self, tape: &mut Tape, vars: &ModelVars, x: Var, s: usize) -> Result<Var> {
        let p = self.config.patch[s];
        let sh = tape.shape(x).to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        if h % p != 0 || w % p != 0 {
            return Err(Error::config(format!("spatial size {h}x{w} not divisible by patch {p}")));
        }
        let (ho, wo) = (h / p, w / p);
        let mut idx = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for a in 0..p {
                for b in 0..p {
                    for i in 0..ho {
                        for j in 0..wo {
                            idx.push(ch * h * w + (i * p + a) * w + j * p + b);
                        }
                    }
                }
            }
        }
        let patches = tape.gather(x, idx, &[c * p * p, ho * wo])?;
        let y = tape.matmul(vars.bb(&format!("s{s}.embed.w")), patches)?;
        let y = tape.add_channel_bias(y, vars.bb(&format!("s{s}.embed.b")))?;
        let y = self.norm(tape, vars, y, &format!("s{s}.embed.ln"))?;
        tape.reshape(y, &[self.config.dims[s], ho, wo])
    }

    fn norm(&self, tape: &mut Tape, vars: &ModelVars, x: Var, pre: &str) -> Result<Var> {
        tape.layer_norm_channels(x, vars.bb(&format!("{pre}.g")), vars.bb(&format!("{pre}.b")))
    }

    fn mlp(&self, tape: &mut Tape, vars: &ModelVars, x: Var, pre: &str) -> Result<Var> {
        let sh = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[sh[0], sh[1] * sh[2]])?;
        let h = tape.matmul(vars.bb(&format!("{pre}.mlp.w1")), flat)?;
        let h = tape.add_channel_bias(h, vars.bb(&format!("{pre}.mlp.b1")))?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(vars.bb(&format!("{pre}.mlp.w2")), h)?;
        let o = tape.add_channel_bias(o, vars.bb(&format!("{pre}.mlp.b2")))?;
        tape.reshape(o, &sh)
    }

    fn attention(&self, tape: &mut Tape, vars: &ModelVars, x: Var, s: usize, pre: &str) -> Result<Var> {
        let sh = tape.shape(x).to_vec();
        let (c, p) = (sh[0], sh[1] * sh[2]);
        let n = self.norm(tape, vars, x, &format!("{pre}.ln1"))?;
        let n = tape.reshape(n, &[c, p])?;
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        let mut heads = Vec::new();
        for h in 0..self.config.n_heads(s) {
            let q = tape.matmul(vars.bb(&format!("{pre}.attn.q{h}")), n)?;
            let k = tape.matmul(vars.bb(&format!("{pre}.attn.k{h}")), n)?;
            let v = tape.matmul(vars.bb(&format!("{pre}.attn.v{h}")), n)?;
            let qt = tape.transpose(q)?;
            let scores = tape.matmul(qt, k)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            let at = tape.transpose(attn)?;
            let out = tape.matmul(v, at)?;
            heads.push(tape.matmul(vars.bb(&format!("{pre}.attn.o{h}")), out)?);
        }
        let y = tape.add_all(&heads)?;
        let y = tape.add_channel_bias(y, vars.bb(&format!("{pre}.attn.ob")))?;
        tape.reshape(y, &sh)
    }

    fn head_forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        kind: HeadKind,
        stages: &[Var],
        in_h: usize,
        in_w: usize,
    ) -> Result<Var> {
        match kind {
            HeadKind::Segmentation { n_classes } => {
                let mut terms = Vec::new();
                for (s, &f) in stages.iter().enumerate() {
                    let sh = tape.shape(f).to_vec();
                    let (h, w) = (sh[1], sh[2]);
                    let flat = tape.reshape(f, &[sh[0], h * w])?;
                    let logits = tape.matmul(vars.hd(&format!("seg.w{s}")), flat)?;
                    // nearest-neighbour upsampling to input resolution
                    let mut idx = Vec::with_capacity(n_classes * in_h * in_w);
                    for k in 0..n_classes {
                        for i in 0..in_h {
                            for j in 0..in_w {
                                idx.push(k * h * w + (i * h / in_h) * w + j * w / in_w);
                            }
                        }
                    }
                    terms.push(tape.gather(logits, idx, &[n_classes, in_h * in_w])?);
                }
                let sum = tape.add_all(&terms)?;
                tape.add_channel_bias(sum, vars.hd("seg.b"))
            }
            HeadKind::Classification { .. } => {
                let last = *stages.last().unwrap();
                let pooled = tape.gap2d(last)?;
                tape.affine(pooled, vars.hd("cls.w"), vars.hd("cls.b"))
            }
        }
    }

    /// Forward pass on a detached tape; returns the trace and the tape.
    pub fn run(&self, input: &Tensor) -> Result<(Tape, ForwardTrace)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let x = tape.constant(input);
        let trace = self.forward(&mut tape, &vars, x)?;
        Ok((tape, trace))
    }

    /// Output of the last stage for one input.
    pub fn features(&self, input: &Tensor) -> Result<Tensor> {
        let (tape, trace) = self.run(input)?;
        Ok(tape.value(*trace.stage_outputs.last().unwrap()).clone())
    }

    pub fn snapshot_frozen(&self) -> FrozenSnapshot {
        FrozenSnapshot {
            tensors: self
                .named_tensors()
                .into_iter()
                .filter(|(_, _, t)| !t.requires_grad)
                .map(|(n, _, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
                .collect(),
        }
    }

    /// True iff every tensor frozen at snapshot time is bitwise unchanged.
    pub fn freeze_check(&self, snapshot: &FrozenSnapshot) -> bool {
        let current: HashMap<String, &Tensor> =
            self.named_tensors().into_iter().map(|(n, _, t)| (n, t)).collect();
        snapshot.tensors.iter().all(|(name, bits)| {
            current.get(name).is_some_and(|t| {
                t.len() == bits.len() && t.data().iter().zip(bits).all(|(v, b)| v.to_bits() == *b)
            })
        })
    }

    /// Marks every non-backbone tensor trainable and the backbone frozen.
    pub fn reset_freeze_mask(&mut self) {
        let names: Vec<Category> = self.named_tensors().iter().map(|(_, c, _)| *c).collect();
        for (t, c) in self.tensors_mut().into_iter().zip(names) {
            t.requires_grad = c != Category::Backbone;
        }
    }
}

/// Bit patterns of the frozen tensors at a point in time.
#[derive(Clone, Debug)]
pub struct FrozenSnapshot {
    tensors: Vec<(String, Vec<u64>)>,
}

impl FrozenSnapshot {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(style: BackboneStyle) -> ModelGraph {
        let cfg = BackboneConfig {
            style,
            ..BackboneConfig::default()
        };
        ModelGraph::build(&cfg, 3).unwrap()
    }

    #[test]
    fn block_and_site_counts() {
        let g = toy(BackboneStyle::SwinLike);
        assert_eq!(g.blocks.len(), 4);
        assert_eq!(g.config.n_sites(), 8);
        let mut g = g;
        g.insert_adapters(&AdapterConfig::default(), 1).unwrap();
        assert_eq!(g.sites.len(), 8);
        assert_eq!(g.centers.len(), 2);

        let mut g = toy(BackboneStyle::ConvnextLike);
        g.insert_adapters(&AdapterConfig::default(), 1).unwrap();
        assert_eq!(g.sites.len(), 4);
        assert_eq!(g.centers.len(), 2);
        assert!(g.insert_adapters(&AdapterConfig::default(), 1).is_err());
    }

    #[test]
    fn swin_b_layout_counts() {
        let cfg = BackboneConfig {
            depths: vec![2, 2, 18, 2],
            dims: vec![16, 24, 32, 40],
            patch: vec![1, 1, 1, 1],
            ..BackboneConfig::default()
        };
        let mut g = ModelGraph::build(&cfg, 0).unwrap();
        g.insert_adapters(&AdapterConfig::default(), 0).unwrap();
        assert_eq!(g.sites.len(), 48);
        let m: Vec<usize> = g.centers.iter().map(|c| c.capacity).collect();
        assert_eq!(m, vec![2, 2, 18, 2]);
        let scopes: Vec<usize> = g.centers.iter().map(|c| c.scope.len()).collect();
        assert_eq!(scopes, vec![4, 4, 36, 4]);
    }

    #[test]
    fn grouping_splits_centers() {
        let cfg = BackboneConfig {
            depths: vec![2, 5],
            ..BackboneConfig::default()
        };
        let mut g = ModelGraph::build(&cfg, 0).unwrap();
        let acfg = AdapterConfig {
            group_size: Some(2),
            ..AdapterConfig::default()
        };
        g.insert_adapters(&acfg, 0).unwrap();
        let m: Vec<usize> = g.centers.iter().map(|c| c.capacity).collect();
        assert_eq!(m, vec![2, 2, 2, 1]);
        // every site belongs to exactly one center
        let mut seen: Vec<usize> = g.centers.iter().flat_map(|c| c.scope.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..g.sites.len()).collect::<Vec<_>>());
    }

    #[test]
    fn build_is_deterministic() {
        let a = toy(BackboneStyle::SwinLike);
        let b = toy(BackboneStyle::SwinLike);
        for ((_, _, x), (_, _, y)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn forward_preserves_declared_extents() {
        for style in [BackboneStyle::SwinLike, BackboneStyle::ConvnextLike] {
            let mut g = toy(style);
            g.insert_adapters(&AdapterConfig::default(), 2).unwrap();
            let x = Tensor::randn(&[1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
            let (tape, trace) = g.run(&x).unwrap();
            for (s, &v) in trace.stage_outputs.iter().enumerate() {
                let stride = g.config.stride(s);
                assert_eq!(tape.shape(v), &[g.config.dims[s], 16 / stride, 16 / stride]);
            }
            assert_eq!(trace.block_outputs.len(), 4);
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            BackboneConfig {
                dims: vec![32, 16],
                ..BackboneConfig::default()
            },
            BackboneConfig {
                depths: vec![2],
                ..BackboneConfig::default()
            },
            BackboneConfig {
                dims: vec![12, 32],
                ..BackboneConfig::default()
            },
        ];
        for cfg in bad {
            assert!(ModelGraph::build(&cfg, 0).is_err());
        }
    }

    #[test]
    fn zero_up_projection_reproduces_backbone() {
        let x = Tensor::randn(&[1, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        for style in [BackboneStyle::SwinLike, BackboneStyle::ConvnextLike] {
            let plain = toy(style);
            let mut adapted = plain.clone();
            adapted.insert_adapters(&AdapterConfig::default(), 9).unwrap();
            for c in &mut adapted.centers {
                c.e_b.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let a = plain.features(&x).unwrap();
            let b = adapted.features(&x).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(u, v)| u == v));
        }
    }

    #[test]
    fn freeze_check_detects_changes() {
        let mut g = toy(BackboneStyle::ConvnextLike);
        g.insert_adapters(&AdapterConfig::default(), 0).unwrap();
        let snap = g.snapshot_frozen();
        assert!(g.freeze_check(&snap));
        g.centers[0].e_a.data_mut()[0] += 1.0;
        assert!(g.freeze_check(&snap));
        let v = &mut g.backbone[0].data_mut()[0];
        *v = f64::from_bits(v.to_bits() ^ 1);
        assert!(!g.freeze_check(&snap));
    }
}
