use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::scalar::Scalar;

/// Norm of the raw gradient and the factor applied to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub scale: f64,
}

/// Global L2 norm, accumulated in f64 in index order.
pub fn global_norm<T: Scalar>(g: &[T]) -> f64 {
    g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Clip to `clip_norm`, then `v ← μv + g`, `θ ← θ − lr·(g + μv)`.
/// A non-finite gradient leaves `params` and `velocity` untouched.
pub fn sgd_nesterov_step<T: Scalar>(
    params: &mut [T],
    velocity: &mut [T],
    grads: &[T],
    lr: f64,
    mu: f64,
    clip_norm: f64,
) -> Result<StepInfo, TrainError> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(TrainError::Config(format!(
            "optimizer shapes differ: {} params, {} velocity, {} grads",
            params.len(),
            velocity.len(),
            grads.len()
        )));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(TrainError::Divergence);
    }
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    let (s, lr, mu) = (T::lit(scale), T::lit(lr), T::lit(mu));
    for ((p, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let g = g * s;
        *v = mu * *v + g;
        *p -= lr * (g + mu * *v);
    }
    Ok(StepInfo { grad_norm: norm, scale })
}

/// Epoch 0: indices sorted by duration (stable, so ties keep input order),
/// then cut into consecutive batches. Later epochs: seeded shuffle.
pub fn sortagrad_order(durations: &[f64], epoch: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..durations.len()).collect();
    if epoch == 0 {
        idx.sort_by(|&a, &b| durations[a].total_cmp(&durations[b]));
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64));
        idx.shuffle(&mut rng);
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// SplitMix64 finalizer of `(a, b)`; used for counter-based RNG streams.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
