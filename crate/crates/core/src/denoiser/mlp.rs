use rand::Rng;
use rand_distr::StandardNormal;

use super::{Domain, NoisePredictor};
use crate::io::Reader;
use crate::schedule::NoiseLevel;
use crate::{Error, Result};

const MLP_MAGIC: &[u8; 8] = b"LSBMLP\0\0";
const MLP_VERSION: u32 = 1;

/// Log-SNR is clipped to this magnitude before the feature expansion.
const LOG_SNR_CLIP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn id(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::Format {
                what: "checkpoint",
                detail: format!("unknown activation {id}"),
            }),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

/// Network shape. The input layer sees `d` coordinates, `1 + 2 * freqs`
/// noise-level features and an `emb_dim`-wide learned domain embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpArch {
    pub d: usize,
    pub hidden: Vec<usize>,
    pub emb_dim: usize,
    pub freqs: usize,
    pub activation: Activation,
}

impl MlpArch {
    pub fn new(d: usize, hidden: Vec<usize>) -> Self {
        MlpArch {
            d,
            hidden,
            emb_dim: 8,
            freqs: 4,
            activation: Activation::Silu,
        }
    }

    pub fn noise_features(&self) -> usize {
        1 + 2 * self.freqs
    }

    pub fn input_width(&self) -> usize {
        self.d + self.noise_features() + self.emb_dim
    }

    /// `(fan_in, fan_out)` of each dense layer.
    fn layers(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.d);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        3 * self.emb_dim + self.layers().iter().map(|(i, o)| i * o + o).sum::<usize>()
    }
}

/// Fully connected noise predictor with a flat parameter vector laid out as
/// `[embedding table (3 x emb_dim), W1, b1, W2, b2, ...]`, weights row-major
/// `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: MlpArch,
    layers: Vec<(usize, usize)>,
    params: Vec<f64>,
}

/// Per-sample activations kept for the backward pass.
#[derive(Default)]
pub(crate) struct Tape {
    /// Layer inputs; `inputs[0]` is the feature vector.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    pub(super) out: Vec<f64>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Mlp {
    /// Hidden layers get `N(0, 1/fan_in)` weights, the output layer starts at
    /// zero so an untrained model predicts no noise.
    pub fn init(arch: MlpArch, rng: &mut impl Rng) -> Result<Self> {
        if arch.d == 0 {
            return Err(Error::param("network dimension must be at least 1"));
        }
        let layers = arch.layers();
        let mut params = Vec::with_capacity(arch.param_count());
        for _ in 0..3 * arch.emb_dim {
            params.push(rng.sample::<f64, _>(StandardNormal));
        }
        let last = layers.len() - 1;
        for (k, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let std = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let w = if k == last { 0.0 } else { std * rng.sample::<f64, _>(StandardNormal) };
                params.push(w);
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        debug_assert_eq!(params.len(), arch.param_count());
        Ok(Mlp { arch, layers, params })
    }

    pub fn from_params(arch: MlpArch, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("network parameters must be finite"));
        }
        let layers = arch.layers();
        Ok(Mlp { arch, layers, params })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Conditioning features of a noise level.
    pub fn noise_features(&self, level: NoiseLevel) -> Vec<f64> {
        let lambda = level.snr().ln().clamp(-LOG_SNR_CLIP, LOG_SNR_CLIP);
        let u = lambda / LOG_SNR_CLIP;
        let mut f = Vec::with_capacity(self.arch.noise_features());
        f.push(u);
        for k in 1..=self.arch.freqs {
            let w = k as f64 * std::f64::consts::PI * u;
            f.push(w.sin());
            f.push(w.cos());
        }
        f
    }

    fn features_into(&self, y: &[f64], level: NoiseLevel, token: Domain, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(y);
        out.extend(self.noise_features(level));
        let e = self.arch.emb_dim;
        out.extend_from_slice(&self.params[token.index() * e..(token.index() + 1) * e]);
    }

    fn layer_offset(&self, k: usize) -> usize {
        3 * self.arch.emb_dim + self.layers[..k].iter().map(|(i, o)| i * o + o).sum::<usize>()
    }

    pub(crate) fn forward_tape(&self, y: &[f64], level: NoiseLevel, token: Domain, tape: &mut Tape) {
        let n_layers = self.layers.len();
        tape.inputs.resize_with(n_layers, Vec::new);
        tape.pre.resize_with(n_layers.saturating_sub(1), Vec::new);
        let mut input = std::mem::take(&mut tape.inputs[0]);
        self.features_into(y, level, token, &mut input);
        tape.inputs[0] = input;

        let mut offset = 3 * self.arch.emb_dim;
        for (k, &(fan_in, fan_out)) in self.layers.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let x = &tape.inputs[k];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            if k + 1 < n_layers {
                let a: Vec<f64> = z.iter().map(|&v| self.arch.activation.apply(v)).collect();
                tape.pre[k] = z;
                tape.inputs[k + 1] = a;
            } else {
                tape.out = z;
            }
        }
    }

    /// Predicted noise for one input.
    pub fn forward(&self, y: &[f64], level: NoiseLevel, token: Domain) -> Result<Vec<f64>> {
        if y.len() != self.arch.d {
            return Err(Error::DimensionMismatch {
                expected: self.arch.d,
                got: y.len(),
            });
        }
        let mut tape = Tape::default();
        self.forward_tape(y, level, token, &mut tape);
        Ok(tape.out)
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d output`
    /// for the sample recorded on `tape`.
    pub(crate) fn backward(&self, token: Domain, tape: &mut Tape, d_out: &[f64], grad: &mut [f64]) {
        let n_layers = self.layers.len();
        tape.delta.clear();
        tape.delta.extend_from_slice(d_out);
        for k in (0..n_layers).rev() {
            let (fan_in, fan_out) = self.layers[k];
            let offset = self.layer_offset(k);
            let x = &tape.inputs[k];
            let (gw, gb) = grad[offset..offset + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for o in 0..fan_out {
                let dz = tape.delta[o];
                gb[o] += dz;
                for (g, v) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                    *g += dz * v;
                }
            }
            // gradient w.r.t. this layer's input
            let w = &self.params[offset..offset + fan_in * fan_out];
            tape.next_delta.clear();
            tape.next_delta.resize(fan_in, 0.0);
            for o in 0..fan_out {
                let dz = tape.delta[o];
                for (nd, a) in tape.next_delta.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *nd += dz * a;
                }
            }
            if k > 0 {
                for (nd, z) in tape.next_delta.iter_mut().zip(&tape.pre[k - 1]) {
                    *nd *= self.arch.activation.derivative(*z);
                }
            }
            std::mem::swap(&mut tape.delta, &mut tape.next_delta);
        }
        // tape.delta now holds d loss / d features; the trailing block is the
        // domain embedding.
        let e = self.arch.emb_dim;
        let start = self.arch.d + self.arch.noise_features();
        for (g, dv) in grad[token.index() * e..(token.index() + 1) * e].iter_mut().zip(&tape.delta[start..]) {
            *g += dv;
        }
    }

    /// Versioned binary checkpoint: magic, version, architecture header,
    /// parameter count, parameters. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.arch;
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MLP_MAGIC);
        out.extend_from_slice(&MLP_VERSION.to_le_bytes());
        for v in [a.d, a.emb_dim, a.freqs] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&a.activation.id().to_le_bytes());
        out.extend_from_slice(&(a.hidden.len() as u64).to_le_bytes());
        for h in &a.hidden {
            out.extend_from_slice(&(*h as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.expect_magic(MLP_MAGIC)?;
        let version = r.u32()?;
        if version != MLP_VERSION {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("unsupported version {version}"),
            });
        }
        let d = r.u64()? as usize;
        let emb_dim = r.u64()? as usize;
        let freqs = r.u64()? as usize;
        let activation = Activation::from_id(r.u32()?)?;
        let n_hidden = r.u64()? as usize;
        if n_hidden > 64 {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{n_hidden} hidden layers"),
            });
        }
        let hidden = (0..n_hidden).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let arch = MlpArch {
            d,
            hidden,
            emb_dim,
            freqs,
            activation,
        };
        let count = r.u64()? as usize;
        if count != arch.param_count() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{count} parameters, architecture needs {}", arch.param_count()),
            });
        }
        let params = r.f64s(count)?;
        r.finish()?;
        Mlp::from_params(arch, params)
    }
}

impl NoisePredictor for Mlp {
    fn dim(&self) -> usize {
        self.arch.d
    }

    fn predict_noise(&self, y: &[f64], level: NoiseLevel, token: Domain) -> Vec<f64> {
        let mut tape = Tape::default();
        self.forward_tape(y, level, token, &mut tape);
        tape.out
    }
}
