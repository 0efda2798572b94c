//! Generalized advantage estimation.

/// Raw advantages and value targets for one environment's rollout slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Gae {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Backward recursion over TD residuals:
///
///   delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t
///   A_t     = delta_t + gamma * tau * (1 - done_t) * A_{t+1}
///
/// with `bootstrap` standing in for `v_T`. Returns are `A + v` (the value
/// targets). Advantages here are pre-normalization; the update normalizes
/// across the whole batch separately.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    tau: f64,
) -> Gae {
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), dones.len());
    let t = rewards.len();
    let mut advantages = vec![0.0; t];
    let mut carry = 0.0;
    for i in (0..t).rev() {
        let next_value = if i + 1 < t { values[i + 1] } else { bootstrap };
        let mask = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * next_value * mask - values[i];
        carry = delta + gamma * tau * mask * carry;
        advantages[i] = carry;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Gae {
        advantages,
        returns,
    }
}

/// In-place normalization to zero mean / unit variance with an epsilon guard.
pub fn normalize_advantages(advantages: &mut [f64]) {
    if advantages.is_empty() {
        return;
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in advantages.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}
