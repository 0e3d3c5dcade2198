//! Shared expert centers and the composition of dynamic weights from gates.
//!
//! A center holds `M` experts for the down projection (`e_a`, `M×C×Ĉ`), the
//! up projection (`e_b`, `M×Ĉ×C`) and one depthwise kernel bank per kernel
//! size (`M×Ĉ×K²`). Kernel banks are flattened row-major: entry
//! `[m, c, a·K + b]` is tap `(a, b)` of channel `c`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TRUNC_NORMAL_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// `N(0, 0.02²)` truncated to `±2σ`.
    #[default]
    TruncNormal,
    KaimingNormal,
    KaimingUniform,
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitStrategy::TruncNormal => "trunc_normal",
            InitStrategy::KaimingNormal => "kaiming_normal",
            InitStrategy::KaimingUniform => "kaiming_uniform",
        })
    }
}

/// Expert capacity as a multiple of the stage depth `L`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CapacityPolicy {
    #[serde(rename = "4L")]
    FourL,
    #[serde(rename = "2L")]
    TwoL,
    #[default]
    #[serde(rename = "L")]
    L,
    #[serde(rename = "L/2")]
    HalfL,
}

impl CapacityPolicy {
    /// Capacity for a scope of `depth` blocks; never below one.
    pub fn capacity(self, depth: usize) -> usize {
        let m = match self {
            CapacityPolicy::FourL => 4 * depth,
            CapacityPolicy::TwoL => 2 * depth,
            CapacityPolicy::L => depth,
            CapacityPolicy::HalfL => depth / 2,
        };
        m.max(1)
    }
}

impl fmt::Display for CapacityPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CapacityPolicy::FourL => "4L",
            CapacityPolicy::TwoL => "2L",
            CapacityPolicy::L => "L",
            CapacityPolicy::HalfL => "L/2",
        })
    }
}

/// Validates an ascending list of one to three odd kernel sizes.
pub fn validate_kernel_sizes(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.len() > 3 {
        return Err(Error::config(format!("expected 1 to 3 kernel sizes, got {ks:?}")));
    }
    if ks.iter().any(|&k| k % 2 == 0) {
        return Err(Error::config(format!("kernel sizes must be odd: {ks:?}")));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("kernel sizes must be ascending: {ks:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertCenter {
    pub capacity: usize,
    pub channels: usize,
    pub latent: usize,
    pub kernel_sizes: Vec<usize>,
    pub e_a: Tensor,
    pub e_b: Tensor,
    pub spatial: Vec<Tensor>,
    /// Adapter sites that share this center.
    pub scope: Vec<usize>,
}

/// Dynamic weights composed for one adapter invocation.
#[derive(Clone, Debug)]
pub struct DynamicWeights {
    pub down: Tensor,
    pub up: Tensor,
    pub kernels: Vec<Tensor>,
}

/// Tape handles for a center's pools.
#[derive(Clone, Debug)]
pub struct CenterVars {
    pub e_a: Var,
    pub e_b: Var,
    pub spatial: Vec<Var>,
}

impl ExpertCenter {
    pub fn init(
        capacity: usize,
        channels: usize,
        latent: usize,
        kernel_sizes: &[usize],
        init: InitStrategy,
        seed: u64,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("expert capacity must be positive"));
        }
        if latent == 0 || latent >= channels {
            return Err(Error::config(format!(
                "latent width {latent} must satisfy 1 <= latent < channels ({channels})"
            )));
        }
        validate_kernel_sizes(kernel_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e_a = init_pool(&[capacity, channels, latent], init, &mut rng);
        let e_b = init_pool(&[capacity, latent, channels], init, &mut rng);
        let spatial: Vec<Tensor> = kernel_sizes
            .iter()
            .map(|&k| init_pool(&[capacity, latent, k * k], init, &mut rng).with_requires_grad(true))
            .collect();
        Ok(ExpertCenter {
            capacity,
            channels,
            latent,
            kernel_sizes: kernel_sizes.to_vec(),
            e_a: e_a.with_requires_grad(true),
            e_b: e_b.with_requires_grad(true),
            spatial,
            scope: Vec::new(),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> CenterVars {
        CenterVars {
            e_a: tape.leaf(&self.e_a),
            e_b: tape.leaf(&self.e_b),
            spatial: self.spatial.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("e_a".to_string(), &self.e_a), ("e_b".to_string(), &self.e_b)];
        for (i, t) in self.spatial.iter().enumerate() {
            out.push((format!("s_{}", spatial_label(i)), t));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.e_a, &mut self.e_b];
        out.extend(self.spatial.iter_mut());
        out
    }

    pub fn count_params(&self) -> ParamCount {
        ParamCount::closed_form(self.capacity, self.channels, self.latent, &self.kernel_sizes)
    }
}

pub(crate) fn spatial_label(i: usize) -> char {
    (b'a' + i as u8) as char
}

/// Draws from `N(0, σ²)` conditioned on `|x| <= 2σ` by rejection.
pub fn sample_trunc_normal<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// PyTorch-style fan-in: `shape[1] · prod(shape[2..])`.
fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn init_pool(shape: &[usize], init: InitStrategy, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        InitStrategy::TruncNormal => (0..n).map(|_| sample_trunc_normal(TRUNC_NORMAL_STD, rng)).collect(),
        InitStrategy::KaimingNormal => {
            let std = (2.0 / fan_in(shape) as f64).sqrt();
            (0..n)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
        InitStrategy::KaimingUniform => {
            let bound = (6.0 / fan_in(shape) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
    };
    Tensor::from_parts(shape.to_vec(), data)
}

/// `W1 = Σ_m g1[m]·E_A[m]`, `W2 = Σ_m g2[m]·E_B[m]` on the tape.
pub fn compose_channel_weights_var(
    tape: &mut Tape,
    center: &CenterVars,
    g1: Var,
    g2: Var,
) -> Result<(Var, Var)> {
    let w1 = mix_experts(tape, center.e_a, g1)?;
    let w2 = mix_experts(tape, center.e_b, g2)?;
    Ok((w1, w2))
}

/// `kernel_i = Σ_m g_i[m]·S_i[m]`, unflattened to `Ĉ×K_i×K_i`.
pub fn compose_spatial_kernels_var(
    tape: &mut Tape,
    center: &CenterVars,
    gates: &[Var],
) -> Result<Vec<Var>> {
    if gates.len() != center.spatial.len() {
        return Err(Error::dim("compose_spatial_kernels", &[gates.len()], &[center.spatial.len()]));
    }
    center
        .spatial
        .iter()
        .zip(gates)
        .map(|(&bank, &g)| {
            let mixed = mix_experts(tape, bank, g)?;
            let s = tape.shape(mixed).to_vec();
            let k = (s[1] as f64).sqrt().round() as usize;
            tape.reshape(mixed, &[s[0], k, k])
        })
        .collect()
}

/// Gate-weighted sum over the leading expert axis of `pool[M×a×b]` → `a×b`.
fn mix_experts(tape: &mut Tape, pool: Var, gate: Var) -> Result<Var> {
    let ps = tape.shape(pool).to_vec();
    let m = ps[0];
    if tape.shape(gate) != [m] {
        return Err(Error::dim("compose", tape.shape(gate), &ps));
    }
    let rest: usize = ps[1..].iter().product();
    let g = tape.reshape(gate, &[1, m])?;
    let flat = tape.reshape(pool, &[m, rest])?;
    let mixed = tape.matmul(g, flat)?;
    tape.reshape(mixed, &ps[1..])
}

pub fn compose_channel_weights(center: &ExpertCenter, g1: &Tensor, g2: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let cv = center.register(&mut tape);
    let (a, b) = (tape.constant(g1), tape.constant(g2));
    let (w1, w2) = compose_channel_weights_var(&mut tape, &cv, a, b)?;
    Ok((tape.value(w1).clone(), tape.value(w2).clone()))
}

pub fn compose_spatial_kernels(center: &ExpertCenter, gates: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let cv = center.register(&mut tape);
    let gv: Vec<Var> = gates.iter().map(|g| tape.constant(g)).collect();
    let ks = compose_spatial_kernels_var(&mut tape, &cv, &gv)?;
    Ok(ks.into_iter().map(|k| tape.value(k).clone()).collect())
}

/// Splits ordered sites into consecutive groups of `group_size`; the last
/// group holds the remainder.
pub fn partition_scope<T: Clone>(sites: &[T], group_size: usize) -> Result<Vec<Vec<T>>> {
    if group_size == 0 {
        return Err(Error::config("group size must be positive"));
    }
    Ok(sites.chunks(group_size).map(|c| c.to_vec()).collect())
}

/// Trainable scalar counts of one center.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub e_a: usize,
    pub e_b: usize,
    pub spatial: Vec<usize>,
    pub total: usize,
}

impl ParamCount {
    pub fn closed_form(m: usize, c: usize, latent: usize, kernel_sizes: &[usize]) -> Self {
        let e = m * c * latent;
        let spatial: Vec<usize> = kernel_sizes.iter().map(|k| m * latent * k * k).collect();
        let total = 2 * e + spatial.iter().sum::<usize>();
        ParamCount {
            e_a: e,
            e_b: e,
            spatial,
            total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center(m: usize, c: usize, l: usize, ks: &[usize], seed: u64) -> ExpertCenter {
        ExpertCenter::init(m, c, l, ks, InitStrategy::TruncNormal, seed).unwrap()
    }

    fn one_hot(m: usize, j: usize) -> Tensor {
        let mut t = Tensor::zeros(&[m]);
        t.data_mut()[j] = 1.0;
        t
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let a = center(1, 4, 2, &[3], 7);
        let b = center(1, 4, 2, &[3], 7);
        assert_eq!(a.tensors().len(), b.tensors().len());
        for ((_, x), (_, y)) in a.tensors().iter().zip(b.tensors()) {
            assert!(x.bit_eq(y));
        }
        let c = center(3, 8, 4, &[3, 5, 7], 1);
        for (_, t) in c.tensors() {
            assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        }
        assert!(!center(1, 4, 2, &[3], 8).e_a.bit_eq(&a.e_a));
    }

    #[test]
    fn trunc_normal_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_trunc_normal(0.02, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean.abs() <= 3.0 * 0.02 / (n as f64).sqrt(), "mean {mean}");
        // Standard deviation of N(0, σ²) truncated at ±2σ, from the closed form
        // σ·sqrt(1 − 2·2·φ(2)/(2Φ(2) − 1)).
        let phi2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = 0.954_499_736_103_641_6;
        let expected = 0.02 * (1.0 - 4.0 * phi2 / mass).sqrt();
        assert!((std - expected).abs() <= 0.05 * expected, "std {std} vs {expected}");
        assert!(xs.iter().all(|x| x.abs() <= 0.04));
    }

    #[test]
    fn kaiming_variants_have_expected_scale() {
        let c = ExpertCenter::init(64, 32, 16, &[3], InitStrategy::KaimingUniform, 3).unwrap();
        let bound = (6.0f64 / (32.0 * 16.0)).sqrt();
        assert!(c.e_a.data().iter().all(|v| v.abs() <= bound));
        let c = ExpertCenter::init(64, 32, 16, &[3], InitStrategy::KaimingNormal, 3).unwrap();
        let n = c.e_a.len() as f64;
        let var = c.e_a.data().iter().map(|v| v * v).sum::<f64>() / n;
        let expected = 2.0 / (32.0 * 16.0);
        assert!((var - expected).abs() < 0.05 * expected);
    }

    #[test]
    fn init_rejects_bad_config() {
        let bad = [
            ExpertCenter::init(0, 4, 2, &[3], InitStrategy::TruncNormal, 0),
            ExpertCenter::init(1, 4, 4, &[3], InitStrategy::TruncNormal, 0),
            ExpertCenter::init(1, 4, 0, &[3], InitStrategy::TruncNormal, 0),
            ExpertCenter::init(1, 4, 2, &[4], InitStrategy::TruncNormal, 0),
            ExpertCenter::init(1, 4, 2, &[5, 3], InitStrategy::TruncNormal, 0),
            ExpertCenter::init(1, 4, 2, &[], InitStrategy::TruncNormal, 0),
        ];
        for r in bad {
            assert!(matches!(r, Err(Error::Config(_))));
        }
    }

    #[test]
    fn one_hot_gate_selects_expert() {
        let c = center(4, 6, 3, &[3, 5, 7], 11);
        for j in 0..4 {
            let (w1, w2) = compose_channel_weights(&c, &one_hot(4, j), &one_hot(4, (j + 1) % 4)).unwrap();
            assert!(w1.bit_eq(&c.e_a.slice0(j)));
            assert!(w2.bit_eq(&c.e_b.slice0((j + 1) % 4)));
            let ks = compose_spatial_kernels(&c, &[one_hot(4, j), one_hot(4, j), one_hot(4, j)]).unwrap();
            for (k, bank) in ks.iter().zip(&c.spatial) {
                let size = k.shape()[1];
                let expected = bank.slice0(j).reshape(&[3, size, size]).unwrap();
                assert!(k.bit_eq(&expected));
            }
        }
    }

    #[test]
    fn opposite_experts_cancel() {
        let mut c = center(2, 4, 2, &[3], 5);
        let first = c.e_a.slice0(0);
        for (i, v) in first.data().iter().enumerate() {
            c.e_a.data_mut()[8 + i] = -v;
        }
        let half = Tensor::vector(&[0.5, 0.5]);
        let (w1, _) = compose_channel_weights(&c, &half, &half).unwrap();
        assert!(w1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_gives_zero_kernels() {
        let c = center(3, 6, 2, &[3, 5, 7], 5);
        let z = Tensor::zeros(&[3]);
        for k in compose_spatial_kernels(&c, &[z.clone(), z.clone(), z]).unwrap() {
            assert!(k.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gate_length_mismatch() {
        let c = center(3, 6, 2, &[3], 5);
        let g = Tensor::zeros(&[2]);
        assert!(compose_channel_weights(&c, &g, &g).is_err());
        assert!(compose_spatial_kernels(&c, &[g]).is_err());
        assert!(compose_spatial_kernels(&c, &[]).is_err());
    }

    #[test]
    fn partition_examples() {
        let sites: Vec<usize> = (0..18).collect();
        assert_eq!(partition_scope(&sites, 18).unwrap().len(), 1);
        let groups = partition_scope(&sites, 9).unwrap();
        assert_eq!(groups.iter().map(Vec::len).collect::<Vec<_>>(), vec![9, 9]);
        let groups = partition_scope(&[0, 1, 2, 3], 3).unwrap();
        assert_eq!(groups, vec![vec![0, 1, 2], vec![3]]);
        assert!(partition_scope(&sites, 0).is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(ParamCount::closed_form(1, 2, 1, &[3]).total, 13);
        let p = ParamCount::closed_form(18, 512, 128, &[3, 5, 7]);
        assert_eq!(p.e_a + p.e_b, 2_359_296);
        assert_eq!(p.spatial.iter().sum::<usize>(), 191_232);
        assert_eq!(p.total, 2_550_528);
        assert_eq!(ParamCount::closed_form(36, 512, 128, &[3, 5, 7]).total, 2 * p.total);
        let c = center(3, 8, 4, &[3, 5, 7], 0);
        let direct: usize = c.tensors().iter().map(|(_, t)| t.len()).sum();
        assert_eq!(c.count_params().total, direct);
    }

    #[test]
    fn capacity_policy() {
        assert_eq!(CapacityPolicy::TwoL.capacity(18), 36);
        assert_eq!(CapacityPolicy::HalfL.capacity(18), 9);
        assert_eq!(CapacityPolicy::HalfL.capacity(1), 1);
        assert_eq!(CapacityPolicy::L.capacity(2), 2);
    }
}
