//! Dense MLPs with hand-written backpropagation, in f64.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU.
    Gelu,
    Tanh,
    /// No nonlinearity; used to build exactly linear networks in tests.
    Identity,
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_B: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_A * (x + GELU_B * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// LeCun-normal weights, zero bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let scale = (1.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Linear {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += row[i] * g;
            }
        }
        dx
    }
}

/// Stack of linear layers with the activation between consecutive layers
/// (not after the last one).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn random<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::random(w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::zeros(w[0], w[1]))
            .collect();
        Mlp { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }

    pub fn zeros_like(&self) -> Self {
        Mlp::zeros(&self.widths(), self.activation)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        h
    }

    pub fn forward_traced(&self, x: &[f64]) -> MlpTrace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&h);
            inputs.push(h);
            if i < last {
                h = out.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(out);
            } else {
                h = out;
            }
        }
        MlpTrace {
            inputs,
            pre,
            output: h,
        }
    }

    /// Backpropagates `dy` through a traced pass, accumulating into `grads`.
    pub fn backward(&self, trace: &MlpTrace, dy: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let mut g = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                for (gv, &p) in g.iter_mut().zip(&trace.pre[i]) {
                    *gv *= self.activation.derivative(p);
                }
            }
            g = self.layers[i].backward(&trace.inputs[i], &g, &mut grads.layers[i]);
        }
        g
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// Encoder mapping raw region features to embeddings.
pub type EncoderParams = Mlp;
/// Projection head mapping embeddings to output logits.
pub type HeadParams = Mlp;

/// Encoder plus projection head. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl Network {
    pub fn random<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        Network {
            encoder: Mlp::random(&cfg.encoder_widths(), cfg.activation, rng),
            head: Mlp::random(&cfg.head_widths(), cfg.activation, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Network {
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward(x)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.encoder.tensors().chain(self.head.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.encoder.tensors_mut().chain(self.head.tensors_mut())
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Vec::len).sum()
    }

    pub fn same_shape(&self, other: &Network) -> bool {
        self.encoder.widths() == other.encoder.widths() && self.head.widths() == other.head.widths()
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &Network) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Widths and nonlinearity of the encoder and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_in: usize,
    pub encoder_hidden: [usize; 2],
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub proj_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 32,
            encoder_hidden: [64, 64],
            embed_dim: 16,
            head_hidden: 64,
            proj_dim: 32,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn encoder_widths(&self) -> Vec<usize> {
        vec![
            self.d_in,
            self.encoder_hidden[0],
            self.encoder_hidden[1],
            self.embed_dim,
        ]
    }

    pub fn head_widths(&self) -> Vec<usize> {
        vec![self.embed_dim, self.head_hidden, self.proj_dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(&[3, 5, 5, 2], Activation::Gelu);
        assert_eq!(mlp.forward(&[1.0, -2.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_configuration_is_identity() {
        let d = 4;
        let mut mlp = Mlp::zeros(&[d, d, d, d], Activation::Identity);
        for layer in &mut mlp.layers {
            for i in 0..d {
                layer.weight[i * d + i] = 1.0;
            }
        }
        let x = [0.5, -1.25, 3.0, 7.0];
        assert_eq!(mlp.forward(&x), x.to_vec());
    }

    /// Straight-line reimplementation of the three-layer forward pass.
    fn reference_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, l) in net.layers.iter().enumerate() {
            let mut out = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                let mut acc = 0.0;
                for i in 0..l.in_dim {
                    acc += l.weight[o * l.in_dim + i] * h[i];
                }
                out[o] = acc + l.bias[o];
                if li + 1 < net.layers.len() {
                    let v = out[o];
                    out[o] = 0.5
                        * v
                        * (1.0
                            + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3)))
                                .tanh());
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mlp = Mlp::random(&[5, 7, 6, 3], Activation::Gelu, &mut rng);
        for l in &mut mlp.layers {
            l.bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-1.0..1.0));
        }
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = mlp.forward(&x);
        let want = reference_forward(&mlp, &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(mlp.forward_traced(&x).output, got);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Gelu, Activation::Tanh, Activation::Identity] {
            for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
            assert_eq!(Activation::from_code(act.code()), Some(act));
        }
    }
}
