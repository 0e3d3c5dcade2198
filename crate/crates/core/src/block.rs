//! The adapter forward pass: dynamic down-projection, multi-scale dynamic
//! depthwise mixing with spatially-varying aggregation, nonlinearity,
//! dynamic up-projection and a plain residual sum.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{
    compose_channel_weights_var, compose_spatial_kernels_var, sample_trunc_normal, CapacityPolicy, CenterVars,
    ExpertCenter, InitStrategy, TRUNC_NORMAL_STD,
};
use crate::router::{route_var, RouterActivation, RouterParams, RouterVars, TopK};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    SequentialRes,
    SequentialNores,
    Parallel,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::SequentialRes => "sequential_res",
            Layout::SequentialNores => "sequential_nores",
            Layout::Parallel => "parallel",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Gelu,
    None,
}

/// Adapter hyperparameters shared by every site of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub capacity: CapacityPolicy,
    /// Latent width Ĉ used in every stage unless overridden.
    pub latent: usize,
    pub latent_per_stage: Option<Vec<usize>>,
    pub kernel_sizes: Vec<usize>,
    pub layout: Layout,
    pub use_sa: bool,
    pub router_activation: RouterActivation,
    pub router_hidden: usize,
    /// Applied per center as `min(k, M)`.
    pub top_k: Option<TopK>,
    pub init: InitStrategy,
    /// Consecutive blocks sharing one center; `None` shares across the stage.
    pub group_size: Option<usize>,
    pub nonlinearity: Nonlinearity,
    /// Input-agnostic control: each site uses one fixed expert, no router.
    pub static_routing: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            capacity: CapacityPolicy::L,
            latent: 8,
            latent_per_stage: None,
            kernel_sizes: vec![3, 5, 7],
            layout: Layout::SequentialRes,
            use_sa: true,
            router_activation: RouterActivation::Softmax,
            router_hidden: 4,
            top_k: None,
            init: InitStrategy::TruncNormal,
            group_size: None,
            nonlinearity: Nonlinearity::Gelu,
            static_routing: false,
        }
    }
}

impl AdapterConfig {
    /// Full-scale settings: Ĉ = 128, router hidden width 24.
    pub fn full_scale() -> Self {
        AdapterConfig {
            latent: 128,
            router_hidden: crate::router::DEFAULT_HIDDEN,
            ..Self::default()
        }
    }

    pub fn latent_for_stage(&self, stage: usize) -> usize {
        self.latent_per_stage
            .as_ref()
            .and_then(|v| v.get(stage).copied())
            .unwrap_or(self.latent)
    }

    /// SA is only meaningful with more than one scale.
    pub fn sa_active(&self) -> bool {
        self.use_sa && self.kernel_sizes.len() > 1
    }

    pub fn n_heads(&self) -> usize {
        2 + self.kernel_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        crate::expert::validate_kernel_sizes(&self.kernel_sizes)?;
        if self.latent == 0 || self.router_hidden == 0 {
            return Err(Error::config("latent width and router hidden width must be positive"));
        }
        if let Some(v) = &self.latent_per_stage {
            if v.contains(&0) {
                return Err(Error::config("per-stage latent widths must be positive"));
            }
        }
        if let Some(tk) = self.top_k {
            if tk.k == 0 {
                return Err(Error::config("top-k must be at least 1"));
            }
        }
        if self.group_size == Some(0) {
            return Err(Error::config("group size must be positive"));
        }
        Ok(())
    }
}

/// One adapter instance bound to a (possibly shared) center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaRouteModule {
    /// Index of the owning center in the model.
    pub center: usize,
    /// `None` for the static-routing control.
    pub router: Option<RouterParams>,
    /// Expert used by every head under static routing.
    pub static_expert: usize,
    /// `Ĉ×n_scales` 1×1 projection and its bias.
    pub sa: Option<(Tensor, Tensor)>,
    pub layout: Layout,
    pub nonlinearity: Nonlinearity,
}

#[derive(Clone, Debug)]
pub struct AdaRouteVars {
    pub router: Option<RouterVars>,
    pub sa: Option<(Var, Var)>,
}

impl AdaRouteModule {
    pub fn new(
        center_index: usize,
        center: &ExpertCenter,
        cfg: &AdapterConfig,
        static_expert: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let router = if cfg.static_routing {
            None
        } else {
            let mut r = RouterParams::init(
                center.channels,
                cfg.router_hidden,
                center.capacity,
                2 + center.kernel_sizes.len(),
                cfg.router_activation,
                seed,
            )?;
            r.top_k = cfg.top_k.map(|tk| TopK {
                k: tk.k.min(center.capacity),
                renormalize: tk.renormalize,
            });
            Some(r)
        };
        let sa = if cfg.use_sa && center.kernel_sizes.len() > 1 {
            let n = center.kernel_sizes.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A_5A5A);
            let w: Vec<f64> = (0..center.latent * n)
                .map(|_| sample_trunc_normal(TRUNC_NORMAL_STD, &mut rng))
                .collect();
            Some((
                Tensor::from_parts(vec![center.latent, n], w).with_requires_grad(true),
                Tensor::zeros(&[n]).with_requires_grad(true),
            ))
        } else {
            None
        };
        Ok(AdaRouteModule {
            center: center_index,
            router,
            static_expert: static_expert % center.capacity,
            sa,
            layout: cfg.layout,
            nonlinearity: cfg.nonlinearity,
        })
    }

    pub fn register(&self, tape: &mut Tape) -> AdaRouteVars {
        AdaRouteVars {
            router: self.router.as_ref().map(|r| r.register(tape)),
            sa: self.sa.as_ref().map(|(w, b)| (tape.leaf(w), tape.leaf(b))),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(r) = &self.router {
            out.extend(r.tensors().into_iter().map(|(n, t)| (format!("router.{n}"), t)));
        }
        if let Some((w, b)) = &self.sa {
            out.push(("sa.w".into(), w));
            out.push(("sa.b".into(), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(r) = &mut self.router {
            out.extend(r.tensors_mut());
        }
        if let Some((w, b)) = &mut self.sa {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Output of one adapter call.
pub struct AdapterOutput {
    pub y: Var,
    pub gates: Vec<Var>,
}

/// Full adapter forward on `x[C×H×W]`.
pub fn adaroute_forward_var(
    tape: &mut Tape,
    x: Var,
    module: &AdaRouteModule,
    center: &CenterVars,
    vars: &AdaRouteVars,
) -> Result<AdapterOutput> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("adaroute_forward", &s, &[0, 0, 0]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let ea = tape.shape(center.e_a).to_vec();
    let (m, latent) = (ea[0], ea[2]);
    if ea[1] != c {
        return Err(Error::dim("adaroute_forward", &s, &ea));
    }

    let gates = match (&module.router, &vars.router) {
        (Some(params), Some(rv)) => route_var(tape, x, rv, params.activation, params.top_k)?,
        (None, None) => {
            let mut onehot = Tensor::zeros(&[m]);
            onehot.data_mut()[module.static_expert] = 1.0;
            (0..2 + center.spatial.len()).map(|_| tape.constant(&onehot)).collect()
        }
        _ => return Err(Error::Usage("router parameters and tape handles disagree".into())),
    };
    let (w1, w2) = compose_channel_weights_var(tape, center, gates[0], gates[1])?;
    let kernels = compose_spatial_kernels_var(tape, center, &gates[2..])?;

    let flat = tape.reshape(x, &[c, h * w])?;
    let w1t = tape.transpose(w1)?;
    let z = tape.matmul(w1t, flat)?;
    let z = tape.reshape(z, &[latent, h, w])?;
    let mixed = multiscale_mix_var(tape, z, &kernels, module.layout, vars.sa)?;
    let act = match module.nonlinearity {
        Nonlinearity::Gelu => tape.gelu(mixed)?,
        Nonlinearity::None => mixed,
    };
    let act = tape.reshape(act, &[latent, h * w])?;
    let w2t = tape.transpose(w2)?;
    let up = tape.matmul(w2t, act)?;
    let up = tape.reshape(up, &[c, h, w])?;
    let y = tape.add(x, up)?;
    Ok(AdapterOutput { y, gates })
}

/// Eager adapter forward for a standalone module and its center.
pub fn adaroute_forward(x: &Tensor, module: &AdaRouteModule, center: &ExpertCenter) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let cv = center.register(&mut tape);
    let mv = module.register(&mut tape);
    let out = adaroute_forward_var(&mut tape, xv, module, &cv, &mv)?;
    Ok(tape.value(out.y).clone())
}

/// The per-scale outputs `y_i` of the multi-kernel chain.
pub fn scale_outputs_var(tape: &mut Tape, z: Var, kernels: &[Var], layout: Layout) -> Result<Vec<Var>> {
    let mut ys = Vec::with_capacity(kernels.len());
    let mut prev = z;
    for &k in kernels {
        let y = match layout {
            Layout::SequentialRes => {
                let conv = tape.dwconv2d(prev, k)?;
                tape.add(conv, prev)?
            }
            Layout::SequentialNores => tape.dwconv2d(prev, k)?,
            Layout::Parallel => {
                let conv = tape.dwconv2d(z, k)?;
                tape.add(conv, z)?
            }
        };
        ys.push(y);
        prev = y;
    }
    Ok(ys)
}

/// Multi-scale mixing of `z[Ĉ×H×W]`; with `sa` the scales are blended by
/// per-pixel attention maps, otherwise averaged.
pub fn multiscale_mix_var(
    tape: &mut Tape,
    z: Var,
    kernels: &[Var],
    layout: Layout,
    sa: Option<(Var, Var)>,
) -> Result<Var> {
    if kernels.is_empty() {
        return Err(Error::config("multiscale mixing needs at least one kernel"));
    }
    let ys = scale_outputs_var(tape, z, kernels, layout)?;
    if ys.len() == 1 {
        return Ok(ys[0]);
    }
    match sa {
        Some((w, b)) => {
            let u = tape.add_all(&ys)?;
            let maps = sa_maps_var(tape, u, w, b)?;
            let mut terms = Vec::with_capacity(ys.len());
            for (&y, &m) in ys.iter().zip(&maps) {
                terms.push(tape.mul_positions(y, m)?);
            }
            tape.add_all(&terms)
        }
        None => {
            let s = tape.add_all(&ys)?;
            tape.scale(s, 1.0 / ys.len() as f64)
        }
    }
}

/// Per-pixel softmax over the `n` logits of a 1×1 projection of `u[Ĉ×H×W]`.
/// Returns one `[H×W]` map per scale.
pub fn sa_maps_var(tape: &mut Tape, u: Var, w: Var, b: Var) -> Result<Vec<Var>> {
    let s = tape.shape(u).to_vec();
    let ws = tape.shape(w).to_vec();
    if s.len() != 3 || ws.len() != 2 || ws[0] != s[0] {
        return Err(Error::dim("sa_maps", &s, &ws));
    }
    let (h, wd, n) = (s[1], s[2], ws[1]);
    let p = h * wd;
    let flat = tape.reshape(u, &[s[0], p])?;
    let wt = tape.transpose(w)?;
    let logits = tape.matmul(wt, flat)?;
    let logits = tape.add_channel_bias(logits, b)?;
    let per_pixel = tape.transpose(logits)?;
    let probs = tape.softmax(per_pixel)?;
    let maps = tape.transpose(probs)?;
    (0..n)
        .map(|i| tape.gather(maps, (i * p..(i + 1) * p).collect(), &[h, wd]))
        .collect()
}

/// Attention maps of the spatially-varying aggregation for eager callers.
pub fn sa_maps(u: &Tensor, w: &Tensor, b: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let (uv, wv, bv) = (tape.constant(u), tape.constant(w), tape.constant(b));
    let maps = sa_maps_var(&mut tape, uv, wv, bv)?;
    Ok(maps.into_iter().map(|m| tape.value(m).clone()).collect())
}

pub fn multiscale_mix(
    z: &Tensor,
    kernels: &[Tensor],
    layout: Layout,
    sa: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let kv: Vec<Var> = kernels.iter().map(|k| tape.constant(k)).collect();
    let sav = sa.map(|(w, b)| (tape.constant(w), tape.constant(b)));
    let out = multiscale_mix_var(&mut tape, zv, &kv, layout, sav)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_gradients, weighted_sum, GradCheckConfig};

    fn delta(c: usize, k: usize) -> Tensor {
        let mut t = Tensor::zeros(&[c, k, k]);
        for ch in 0..c {
            t.set(&[ch, k / 2, k / 2], 1.0);
        }
        t
    }

    #[test]
    fn delta_kernel_arithmetic() {
        let z = Tensor::randn(&[2, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let ks = [delta(2, 3), delta(2, 5), delta(2, 7)];
        let out = multiscale_mix(&z, &ks, Layout::SequentialRes, None).unwrap();
        assert!(out.max_abs_diff(&z.scaled(14.0 / 3.0)) < 1e-14);

        let mut tape = Tape::new();
        let zv = tape.constant(&z);
        let kv: Vec<Var> = ks.iter().map(|k| tape.constant(k)).collect();
        let ys = scale_outputs_var(&mut tape, zv, &kv, Layout::SequentialRes).unwrap();
        for (y, f) in ys.iter().zip([2.0, 4.0, 8.0]) {
            assert!(tape.value(*y).bit_eq(&z.scaled(f)));
        }
    }

    #[test]
    fn zero_kernels_make_sa_output_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
        let ks = [Tensor::zeros(&[3, 3, 3]), Tensor::zeros(&[3, 5, 5]), Tensor::zeros(&[3, 7, 7])];
        let w = Tensor::randn(&[3, 3], 2.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let out = multiscale_mix(&z, &ks, Layout::SequentialRes, Some((&w, &b))).unwrap();
        assert!(out.max_abs_diff(&z) < 1e-14);
    }

    #[test]
    fn layouts_differ_unless_kernels_are_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[2, 6, 6], 1.0, &mut rng);
        let ks: Vec<Tensor> = [3, 5, 7].iter().map(|&k| Tensor::randn(&[2, k, k], 0.3, &mut rng)).collect();
        let seq = multiscale_mix(&z, &ks, Layout::SequentialRes, None).unwrap();
        let par = multiscale_mix(&z, &ks, Layout::Parallel, None).unwrap();
        let nores = multiscale_mix(&z, &ks, Layout::SequentialNores, None).unwrap();
        assert!(seq.max_abs_diff(&par) > 1e-3);
        assert!(seq.max_abs_diff(&nores) > 1e-3);

        // Direct evaluation: parallel is the mean of conv_i(z) + z.
        let mut expected = Tensor::zeros(z.shape());
        for k in &ks {
            let y = crate::ops::dwconv2d(&z, k).unwrap().add(&z).unwrap();
            expected = expected.add(&y).unwrap();
        }
        assert!(par.max_abs_diff(&expected.scaled(1.0 / 3.0)) < 1e-12);

        // With deltas, every scale is a multiple of z: parallel yields 2z.
        let ds = [delta(2, 3), delta(2, 5), delta(2, 7)];
        let par = multiscale_mix(&z, &ds, Layout::Parallel, None).unwrap();
        assert!(par.max_abs_diff(&z.scaled(2.0)) < 1e-14);
    }

    #[test]
    fn sa_maps_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Tensor::randn(&[4, 5, 6], 3.0, &mut rng);
        let zero = sa_maps(&u, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[3])).unwrap();
        for m in &zero {
            assert!(m.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        let shifted = sa_maps(&u, &Tensor::zeros(&[4, 3]), &Tensor::full(&[3], 7.5)).unwrap();
        for (a, b) in zero.iter().zip(&shifted) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let maps = sa_maps(&u, &w, &b).unwrap();
        for p in 0..30 {
            let vals: Vec<f64> = maps.iter().map(|m| m.data()[p]).collect();
            assert!(vals.iter().all(|&v| v >= 0.0));
            assert!((vals.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    fn toy_module(seed: u64) -> (ExpertCenter, AdaRouteModule) {
        let cfg = AdapterConfig {
            latent: 4,
            router_hidden: 5,
            ..AdapterConfig::default()
        };
        let center = ExpertCenter::init(3, 8, 4, &[3, 5, 7], InitStrategy::TruncNormal, seed).unwrap();
        let module = AdaRouteModule::new(0, &center, &cfg, 0, seed + 1).unwrap();
        (center, module)
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let (mut center, module) = toy_module(5);
        center.e_b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = Tensor::randn(&[8, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let y = adaroute_forward(&x, &module, &center).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a == b));
    }

    #[test]
    fn output_shape_and_channel_check() {
        let (center, module) = toy_module(7);
        let x = Tensor::randn(&[8, 5, 7], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(adaroute_forward(&x, &module, &center).unwrap().shape(), &[8, 5, 7]);
        assert!(adaroute_forward(&Tensor::zeros(&[6, 5, 5]), &module, &center).is_err());
    }

    #[test]
    fn block_gradcheck_small() {
        let (center, module) = toy_module(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[8, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[8, 4, 4], 1.0, &mut rng);
        let mut inputs = vec![x];
        inputs.extend(center.tensors().into_iter().map(|(_, t)| t.clone()));
        inputs.extend(module.tensors().into_iter().map(|(_, t)| t.clone()));
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let cv = CenterVars {
                    e_a: v[1],
                    e_b: v[2],
                    spatial: v[3..6].to_vec(),
                };
                let n = v.len();
                let mv = AdaRouteVars {
                    router: Some(RouterVars {
                        w_hidden: v[6],
                        b_hidden: v[7],
                        heads: (0..5).map(|i| (v[8 + 2 * i], v[9 + 2 * i])).collect(),
                    }),
                    sa: Some((v[n - 2], v[n - 1])),
                };
                let out = adaroute_forward_var(t, v[0], &module, &cv, &mv)?;
                weighted_sum(t, out.y, &w)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
