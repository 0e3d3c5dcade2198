//! Representation and parameter diagnostics.

pub mod audit;
pub mod cka;
pub mod erf;
pub mod expert_map;

pub use audit::{audit_model, audit_params, ArchSpec, ParamAudit};
pub use cka::{cka_matrix, linear_cka, CkaMatrix};
pub use erf::{erf_map, erf_map_model, ErfLayer, ErfMap};
pub use expert_map::{expert_activation_map, ActivationMap};

/// Seeded standard-normal probe inputs of shape `C×S×S`.
pub fn random_probes(n: usize, channels: usize, size: usize, seed: u64) -> Vec<crate::Tensor> {
    use rand::SeedableRng;
    (0..n as u64)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::backbone::derive_seed(seed, i));
            crate::Tensor::randn(&[channels, size, size], 1.0, &mut rng)
        })
        .collect()
}

pub(crate) fn csv_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}
