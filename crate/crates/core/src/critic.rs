//! Value head over histories: mean-pooled encoder states through a two-layer
//! feed-forward head. The critic shares the policy's encoder (held frozen
//! within a critic step) and owns only the head parameters.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::history::History;
use crate::model::{self, PolicyParams};
use crate::tape::{NodeId, Tape, Tensor};

/// Flat parameter store for the value head: w1 (d x d), b1 (d), w2 (d x 1),
/// b2 (1).
#[derive(Debug, Clone)]
pub struct CriticParams {
    pub d_model: usize,
    pub data: Vec<f64>,
}

impl CriticParams {
    pub fn param_count(d_model: usize) -> usize {
        d_model * d_model + d_model + d_model + 1
    }

    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_model as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut data = vec![0.0; Self::param_count(d_model)];
        // Weights random, biases zero.
        for x in data[..d_model * d_model].iter_mut() {
            *x = dist.sample(&mut rng);
        }
        let w2_start = d_model * d_model + d_model;
        for x in data[w2_start..w2_start + d_model].iter_mut() {
            *x = dist.sample(&mut rng);
        }
        CriticParams { d_model, data }
    }

    pub fn from_vec(d_model: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::param_count(d_model) {
            return Err(Error::CheckpointFormat(format!(
                "critic parameter count {} does not match d_model {d_model}",
                data.len()
            )));
        }
        Ok(CriticParams { d_model, data })
    }

    fn offsets(&self) -> (usize, usize, usize, usize) {
        let d = self.d_model;
        (0, d * d, d * d + d, d * d + d + d)
    }
}

/// Builds the value node on `tape` from constant encoder states. `tape` must
/// use the critic's parameter space.
pub fn value_node(
    tape: &mut Tape,
    critic: &CriticParams,
    enc_states: NodeId,
    valid: &[bool],
) -> NodeId {
    let d = critic.d_model;
    let (o_w1, o_b1, o_w2, o_b2) = critic.offsets();
    let w1 = tape.param(&critic.data, o_w1, d, d);
    let b1 = tape.param(&critic.data, o_b1, 1, d);
    let w2 = tape.param(&critic.data, o_w2, d, 1);
    let b2 = tape.param(&critic.data, o_b2, 1, 1);
    let pooled = tape.mean_pool_rows(enc_states, valid.to_vec());
    let h = tape.matmul(pooled, w1);
    let h = tape.add_row(h, b1);
    let h = tape.tanh(h);
    let v = tape.matmul(h, w2);
    tape.add_row(v, b2)
}

/// V(history): encode under the policy, mean-pool unmasked states, apply the
/// head. Deterministic.
pub fn value(policy: &PolicyParams, critic: &CriticParams, history: &History) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::EmptyHistoryForCritic);
    }
    let (states, valid) = model::encode(policy, history)?;
    Ok(value_from_states(critic, &states, &valid))
}

/// Same as [`value`], reusing already-computed encoder states.
pub fn value_from_states(critic: &CriticParams, states: &[Vec<f64>], valid: &[bool]) -> f64 {
    let mut tape = Tape::new(critic.data.len());
    let rows = states.len();
    let cols = states[0].len();
    let mut data = Vec::with_capacity(rows * cols);
    for s in states {
        data.extend_from_slice(s);
    }
    let enc = tape.constant(Tensor::from_vec(rows, cols, data));
    let v = value_node(&mut tape, critic, enc, valid);
    tape.value(v).item()
}

/// Sum of squared errors over turns (batch averaging is the trainer's job).
pub fn critic_loss(values: &[f64], returns: &[f64]) -> Result<f64> {
    if values.len() != returns.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: returns.len(),
        });
    }
    Ok(values
        .iter()
        .zip(returns)
        .map(|(v, g)| (v - g) * (v - g))
        .sum())
}
