//! Offline inspection of a trained policy: per-step modality-impact probing
//! and raw activation export.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{ParamStore, Tape, Tensor};
use crate::grid::Observation;
use crate::policy::{PolicyError, PolicyNet};
use crate::rng::{derive_seed, stream_from_seed};

const IMPACT_TAG: u64 = 0x1A;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no observation records")]
    Empty,
    #[error("unknown layer '{requested}'; available: {available}")]
    UnknownLayer {
        requested: String,
        available: String,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One recorded step: raw observation plus the pre-step hidden state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub episode: u64,
    pub step: usize,
    #[serde(flatten)]
    pub observation: Observation,
    pub h_prev: Vec<f64>,
}

/// Normalized per-step modality contributions (they sum to 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactScore {
    pub step: usize,
    pub visual_impact: f64,
    pub audio_impact: f64,
}

/// Replaces one modality with unit Gaussian noise and measures the L1 shift
/// of the log action probabilities, normalized per step to sum to 1.
///
/// Corruption draws come from streams derived from `noise_seed` only, so
/// probing never perturbs any training stream. One draw per step per modality
/// by default; `repeats` averages the raw impacts over several draws.
pub fn modality_impact(
    net: &PolicyNet,
    store: &ParamStore,
    records: &[ObsRecord],
    noise_seed: u64,
    repeats: usize,
) -> Result<Vec<ImpactScore>, AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let repeats = repeats.max(1);
    let mut scores = Vec::with_capacity(records.len());
    for (idx, rec) in records.iter().enumerate() {
        let intact = log_probs(net, store, &rec.observation, &rec.h_prev)?;
        let mut raw = [0.0f64; 2];
        for (m, slot) in raw.iter_mut().enumerate() {
            let mut total = 0.0;
            for rep in 0..repeats {
                let seed = derive_seed(
                    noise_seed,
                    &[IMPACT_TAG, idx as u64, m as u64, rep as u64],
                );
                let corrupted = corrupt(&rec.observation, m, seed);
                let lp = log_probs(net, store, &corrupted, &rec.h_prev)?;
                total += intact
                    .iter()
                    .zip(&lp)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            }
            *slot = total / repeats as f64;
        }
        let sum = raw[0] + raw[1];
        let (visual_impact, audio_impact) = if sum == 0.0 {
            (0.5, 0.5)
        } else {
            (raw[0] / sum, raw[1] / sum)
        };
        scores.push(ImpactScore {
            step: rec.step,
            visual_impact,
            audio_impact,
        });
    }
    Ok(scores)
}

fn log_probs(
    net: &PolicyNet,
    store: &ParamStore,
    obs: &Observation,
    h_prev: &[f64],
) -> Result<Vec<f64>, AnalysisError> {
    let (depth, audio) = net.obs_to_tensors(&[obs])?;
    let hidden =
        Tensor::new(vec![1, h_prev.len()], h_prev.to_vec()).map_err(PolicyError::from)?;
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, store, depth, audio, hidden)?;
    let lsm = tape.log_softmax_rows(fwd.logits).map_err(PolicyError::from)?;
    Ok(tape.value(lsm).data().to_vec())
}

/// Modality 0 replaces depth, modality 1 replaces audio.
fn corrupt(obs: &Observation, modality: usize, seed: u64) -> Observation {
    let mut rng = stream_from_seed(seed);
    let mut out = obs.clone();
    let target = if modality == 0 {
        &mut out.depth
    } else {
        &mut out.audio
    };
    for v in target.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    out
}

/// One exported activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationDump {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Runs one forward pass and extracts the selected intermediates (all of them
/// when `selectors` is empty). Unknown names report the available set.
pub fn export_activations(
    net: &PolicyNet,
    store: &ParamStore,
    obs: &Observation,
    h_prev: &[f64],
    selectors: &[String],
) -> Result<Vec<ActivationDump>, AnalysisError> {
    let (depth, audio) = net.obs_to_tensors(&[obs])?;
    let hidden =
        Tensor::new(vec![1, h_prev.len()], h_prev.to_vec()).map_err(PolicyError::from)?;
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, store, depth, audio, hidden)?;

    let dump = |name: &str, id: crate::diff::NodeId| {
        let value = tape.value(id);
        // Strip the leading batch axis of this single-observation pass.
        let shape: Vec<usize> = if value.shape().len() > 1 {
            value.shape()[1..].to_vec()
        } else {
            value.shape().to_vec()
        };
        ActivationDump {
            name: name.to_string(),
            shape,
            data: value.data().to_vec(),
        }
    };

    if selectors.is_empty() {
        return Ok(fwd.named.iter().map(|(n, id)| dump(n, *id)).collect());
    }
    let mut out = Vec::with_capacity(selectors.len());
    for sel in selectors {
        match fwd.named.iter().find(|(n, _)| n == sel) {
            Some((n, id)) => out.push(dump(n, *id)),
            None => {
                let available = fwd
                    .named
                    .iter()
                    .map(|(n, _)| n.as_str())
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(AnalysisError::UnknownLayer {
                    requested: sel.clone(),
                    available,
                });
            }
        }
    }
    Ok(out)
}
