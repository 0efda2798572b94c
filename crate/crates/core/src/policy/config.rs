//! Policy configuration, encoder shape resolution, and weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::diff::{ParamStore, Tensor};
use crate::rng::stream_from_seed;

/// One convolution layer: square stride, possibly rectangular kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub channels: usize,
}

/// Audio-visual fusion strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Concat,
    EMul,
    EM,
    Fsa,
}

impl FusionKind {
    pub fn parse(s: &str) -> Option<FusionKind> {
        match s {
            "concat" => Some(FusionKind::Concat),
            "emul" => Some(FusionKind::EMul),
            "em" => Some(FusionKind::EM),
            "fsa" => Some(FusionKind::Fsa),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::EMul => "emul",
            FusionKind::EM => "em",
            FusionKind::Fsa => "fsa",
        }
    }
}

/// Tunable policy knobs. Toy defaults; the canonical large sizes
/// (feature 512, token 256, hidden 512) remain selectable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub feature_dim: usize,
    pub fusion: FusionKind,
    /// Per-token dimension of the self-attention fusion.
    pub token_dim: usize,
    pub hidden_dim: usize,
    /// Overrides for the derived conv stacks; None derives them from the
    /// input shapes.
    pub visual_conv: Option<Vec<ConvLayerSpec>>,
    pub audio_conv: Option<Vec<ConvLayerSpec>>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            feature_dim: 64,
            fusion: FusionKind::Fsa,
            token_dim: 32,
            hidden_dim: 128,
            visual_conv: None,
            audio_conv: None,
        }
    }
}

/// One encoder's resolved shape chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_shape: (usize, usize, usize),
    pub conv: Vec<ConvLayerSpec>,
    pub feature_dim: usize,
    /// Flattened conv output size feeding the linear projection.
    pub flat_dim: usize,
}

impl EncoderConfig {
    /// Resolves the conv stack against the input shape. The default stack is
    /// kernels (8,4),(4,2),(3,1) with 32/32/64 channels; kernels clamp
    /// per-axis to the remaining extent so small inputs stay valid.
    pub fn resolve(
        input_shape: (usize, usize, usize),
        feature_dim: usize,
        conv_override: Option<&[ConvLayerSpec]>,
    ) -> Result<EncoderConfig, PolicyError> {
        let conv = match conv_override {
            Some(spec) => spec.to_vec(),
            None => derive_conv_stack(input_shape.1, input_shape.2),
        };
        let (mut h, mut w) = (input_shape.1, input_shape.2);
        let mut channels = input_shape.0;
        for (i, layer) in conv.iter().enumerate() {
            let (kh, kw) = layer.kernel;
            if kh > h || kw > w || layer.stride == 0 {
                return Err(PolicyError::Config(format!(
                    "conv layer {} kernel {}x{} stride {} does not fit input {}x{}",
                    i, kh, kw, layer.stride, h, w
                )));
            }
            h = (h - kh) / layer.stride + 1;
            w = (w - kw) / layer.stride + 1;
            channels = layer.channels;
        }
        let flat_dim = channels * h * w;
        if flat_dim == 0 || feature_dim == 0 {
            return Err(PolicyError::Config(
                "encoder output dimension must be positive".to_string(),
            ));
        }
        Ok(EncoderConfig {
            input_shape,
            conv,
            feature_dim,
            flat_dim,
        })
    }
}

fn derive_conv_stack(h: usize, w: usize) -> Vec<ConvLayerSpec> {
    let base = [((8, 8), 4, 32), ((4, 4), 2, 32), ((3, 3), 1, 64)];
    let (mut ch, mut cw) = (h, w);
    let mut out = Vec::with_capacity(3);
    for ((bkh, bkw), stride, channels) in base {
        let kernel = (bkh.min(ch), bkw.min(cw));
        out.push(ConvLayerSpec {
            kernel,
            stride,
            channels,
        });
        ch = (ch - kernel.0) / stride + 1;
        cw = (cw - kernel.1) / stride + 1;
    }
    out
}

/// Fully resolved policy shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPolicy {
    pub visual: EncoderConfig,
    pub audio: EncoderConfig,
    pub fusion: FusionKind,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    /// Fusion output width: 2D for Concat/FSA, D for EMul/EM.
    pub fused_dim: usize,
}

impl PolicyConfig {
    pub fn resolve(
        &self,
        depth_res: (usize, usize),
        audio_bins: usize,
    ) -> Result<ResolvedPolicy, PolicyError> {
        let visual = EncoderConfig::resolve(
            (1, depth_res.0, depth_res.1),
            self.feature_dim,
            self.visual_conv.as_deref(),
        )?;
        let audio = EncoderConfig::resolve(
            (2, 1, audio_bins),
            self.feature_dim,
            self.audio_conv.as_deref(),
        )?;
        let fused_dim = match self.fusion {
            FusionKind::Concat | FusionKind::Fsa => 2 * self.feature_dim,
            FusionKind::EMul | FusionKind::EM => self.feature_dim,
        };
        if self.fusion == FusionKind::Fsa
            && (self.token_dim == 0 || fused_dim % self.token_dim != 0)
        {
            return Err(PolicyError::Config(format!(
                "token_dim {} must divide the concatenated width {}",
                self.token_dim, fused_dim
            )));
        }
        if self.hidden_dim == 0 {
            return Err(PolicyError::Config("hidden_dim must be positive".into()));
        }
        Ok(ResolvedPolicy {
            visual,
            audio,
            fusion: self.fusion,
            token_dim: self.token_dim,
            hidden_dim: self.hidden_dim,
            feature_dim: self.feature_dim,
            fused_dim,
        })
    }
}

/// Initializes all trainable weights.
///
/// Conv/linear weights use fan-in scaled uniform draws, GRU matrices are
/// orthogonal, biases start at zero, and the actor head is scaled down by
/// 0.01 so the initial policy is near-uniform.
pub fn init_params(cfg: &ResolvedPolicy, seed: u64) -> Result<ParamStore, PolicyError> {
    let mut rng = stream_from_seed(seed);
    let mut store = ParamStore::new();

    let encoder = |store: &mut ParamStore,
                       rng: &mut ChaCha8Rng,
                       prefix: &str,
                       enc: &EncoderConfig|
     -> Result<(), PolicyError> {
        let mut c_in = enc.input_shape.0;
        for (i, layer) in enc.conv.iter().enumerate() {
            let shape = [layer.channels, c_in, layer.kernel.0, layer.kernel.1];
            let fan_in = c_in * layer.kernel.0 * layer.kernel.1;
            let t = uniform_tensor(rng, &shape, 1.0 / (fan_in as f64).sqrt());
            store.insert(&format!("{prefix}.conv{i}.kernel"), t)?;
            c_in = layer.channels;
        }
        let w = uniform_tensor(
            rng,
            &[enc.flat_dim, enc.feature_dim],
            1.0 / (enc.flat_dim as f64).sqrt(),
        );
        store.insert(&format!("{prefix}.linear.w"), w)?;
        store.insert(
            &format!("{prefix}.linear.b"),
            Tensor::zeros(&[enc.feature_dim]),
        )?;
        Ok(())
    };

    encoder(&mut store, &mut rng, "visual", &cfg.visual)?;
    encoder(&mut store, &mut rng, "audio", &cfg.audio)?;

    if cfg.fusion == FusionKind::Fsa {
        let d = cfg.token_dim;
        let bound = 1.0 / (d as f64).sqrt();
        store.insert("fsa.w1", uniform_tensor(&mut rng, &[d, d], bound))?;
        store.insert("fsa.w2", uniform_tensor(&mut rng, &[d, d], bound))?;
    }

    let (d_in, d_h) = (cfg.fused_dim, cfg.hidden_dim);
    for gate in ["update", "reset", "cand"] {
        store.insert(&format!("gru.w_{gate}"), orthogonal_tensor(&mut rng, d_in, d_h))?;
        store.insert(&format!("gru.u_{gate}"), orthogonal_tensor(&mut rng, d_h, d_h))?;
        store.insert(&format!("gru.b_{gate}"), Tensor::zeros(&[d_h]))?;
    }

    let bound = 1.0 / (d_h as f64).sqrt();
    let mut actor = uniform_tensor(&mut rng, &[d_h, 4], bound);
    actor.data_mut().iter_mut().for_each(|v| *v *= 0.01);
    store.insert("actor.w", actor)?;
    store.insert("actor.b", Tensor::zeros(&[4]))?;
    store.insert("critic.w", uniform_tensor(&mut rng, &[d_h, 1], bound))?;
    store.insert("critic.b", Tensor::zeros(&[1]))?;
    Ok(store)
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Semi-orthogonal `[rows, cols]` matrix via modified Gram-Schmidt on a
/// Gaussian draw.
fn orthogonal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let (n, m) = (rows.max(cols), rows.min(cols));
    // n x m Gaussian, orthonormalize the m columns.
    let mut g: Vec<f64> = (0..n * m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    for j in 0..m {
        for i in 0..j {
            let mut dot = 0.0;
            for r in 0..n {
                dot += g[r * m + i] * g[r * m + j];
            }
            for r in 0..n {
                g[r * m + j] -= dot * g[r * m + i];
            }
        }
        let norm = (0..n).map(|r| g[r * m + j] * g[r * m + j]).sum::<f64>().sqrt();
        for r in 0..n {
            g[r * m + j] /= norm;
        }
    }
    let data = if rows >= cols {
        g // already [rows, cols]
    } else {
        // transpose [n, m] = [cols, rows] into [rows, cols]
        let mut t = vec![0.0; rows * cols];
        for r in 0..n {
            for c in 0..m {
                t[c * cols + r] = g[r * m + c];
            }
        }
        t
    };
    Tensor::new(vec![rows, cols], data).expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_input_reproduces_the_paper_stack() {
        let enc = EncoderConfig::resolve((1, 128, 128), 512, None).unwrap();
        assert_eq!(
            enc.conv,
            vec![
                ConvLayerSpec { kernel: (8, 8), stride: 4, channels: 32 },
                ConvLayerSpec { kernel: (4, 4), stride: 2, channels: 32 },
                ConvLayerSpec { kernel: (3, 3), stride: 1, channels: 64 },
            ]
        );
        assert_eq!(enc.flat_dim, 64 * 12 * 12);
    }

    #[test]
    fn toy_inputs_clamp_kernels_to_fit() {
        let enc = EncoderConfig::resolve((1, 16, 16), 64, None).unwrap();
        assert!(enc.flat_dim > 0);
        let audio = EncoderConfig::resolve((2, 1, 16), 64, None).unwrap();
        assert!(audio.flat_dim > 0);
        assert_eq!(audio.conv[0].kernel.0, 1); // height clamped to the 1-row input
    }

    #[test]
    fn fsa_requires_token_divisibility() {
        let cfg = PolicyConfig {
            token_dim: 48,
            ..PolicyConfig::default()
        };
        assert!(cfg.resolve((16, 16), 16).is_err());
        let ok = PolicyConfig::default().resolve((16, 16), 16).unwrap();
        assert_eq!(ok.fused_dim, 128);
        assert_eq!(ok.fused_dim % ok.token_dim, 0);
    }

    #[test]
    fn fused_width_tracks_fusion_kind() {
        for (kind, expect) in [
            (FusionKind::Concat, 128),
            (FusionKind::Fsa, 128),
            (FusionKind::EMul, 64),
            (FusionKind::EM, 64),
        ] {
            let cfg = PolicyConfig {
                fusion: kind,
                ..PolicyConfig::default()
            };
            assert_eq!(cfg.resolve((16, 16), 16).unwrap().fused_dim, expect);
        }
    }

    #[test]
    fn init_is_deterministic_and_complete() {
        let cfg = PolicyConfig::default().resolve((16, 16), 16).unwrap();
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert!(a.get("fsa.w1").is_some());
        assert!(a.get("gru.u_cand").is_some());
        assert_eq!(a.get("actor.w").unwrap().shape(), &[128, 4]);
        assert_eq!(a.get("critic.w").unwrap().shape(), &[128, 1]);
    }

    #[test]
    fn orthogonal_init_has_orthonormal_columns() {
        let mut rng = stream_from_seed(4);
        let t = orthogonal_tensor(&mut rng, 24, 6);
        for i in 0..6 {
            for j in 0..=i {
                let mut dot = 0.0;
                for r in 0..24 {
                    dot += t.data()[r * 6 + i] * t.data()[r * 6 + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() <= 1e-10);
            }
        }
        // Wide case: orthonormal rows.
        let t = orthogonal_tensor(&mut rng, 4, 10);
        for i in 0..4 {
            let mut dot = 0.0;
            for c in 0..10 {
                dot += t.data()[i * 10 + c] * t.data()[i * 10 + c];
            }
            assert!((dot - 1.0).abs() <= 1e-10);
        }
    }
}
