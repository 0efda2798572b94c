//! Synthetic sound signatures.
//!
//! A fixed bank of 102 spectral fingerprints stands in for a sound library;
//! each is a unit-normalized absolute Gaussian vector, deterministic in the
//! bank's master seed. Train/val/test splits partition the bank by id.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, stream_from_seed};

/// Size of the signature bank.
pub const SIGNATURE_COUNT: usize = 102;

const SIGNATURE_TAG: u64 = 0x51;

/// One spectral fingerprint; `spectrum` has unit L2 norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundSignature {
    pub id: usize,
    pub spectrum: Vec<f64>,
}

/// All 102 signatures for a given master seed and bin count.
#[derive(Clone, Debug)]
pub struct SignatureBank {
    signatures: Vec<SoundSignature>,
}

impl SignatureBank {
    pub fn generate(master_seed: u64, bins: usize) -> SignatureBank {
        let signatures = (0..SIGNATURE_COUNT)
            .map(|id| {
                let mut rng = stream_from_seed(derive_seed(master_seed, &[SIGNATURE_TAG, id as u64]));
                let mut spectrum: Vec<f64> = (0..bins)
                    .map(|_| {
                        let v: f64 = rng.sample(StandardNormal);
                        v.abs()
                    })
                    .collect();
                let norm = spectrum.iter().map(|v| v * v).sum::<f64>().sqrt();
                spectrum.iter_mut().for_each(|v| *v /= norm);
                SoundSignature { id, spectrum }
            })
            .collect();
        SignatureBank { signatures }
    }

    pub fn get(&self, id: usize) -> &SoundSignature {
        &self.signatures[id]
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.signatures[0].spectrum.len()
    }
}
