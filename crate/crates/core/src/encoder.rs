//! Small multi-layer perceptron feature map with reverse-mode gradients and momentum SGD.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu(0.01)
    }
}

/// Feed-forward encoder. Hidden layers use `activation`; the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    version: u64,
}

/// Per-layer inputs and pre-activations recorded by [`Encoder::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl EncoderGrads {
    pub fn zeros_for(enc: &Encoder) -> Self {
        Self {
            weights: enc.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: enc.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) -> Result<()> {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(1.0, b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Flattened in layer order: weights then biases of layer 0, then layer 1, …
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

/// Momentum SGD hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 30,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Argument(format!(
                "momentum = {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Argument(format!(
                "batch_size = {} must be at least 2",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity(EncoderGrads);

impl Velocity {
    pub fn zeros_for(enc: &Encoder) -> Self {
        Velocity(EncoderGrads::zeros_for(enc))
    }
}

/// `v ← μ·v − η·g; θ ← θ + v` over flat slices.
pub fn momentum_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

impl Encoder {
    /// Random encoder with fan-in scaled Gaussian weights and zero biases.
    pub fn new(dims: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Argument(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let gain = if l + 1 < layers { 2.0 } else { 1.0 };
            let std = (gain / fan_in as f64).sqrt();
            let data = rng
                .gaussian_vec(fan_in * fan_out)
                .into_iter()
                .map(|x| x * std)
                .collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
        }
        let biases = dims[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
            version: 0,
        })
    }

    /// Builds an encoder from explicit parameters; `weights[l]` is `dims[l]×dims[l+1]`.
    pub fn from_parameters(weights: Vec<Matrix>, biases: Vec<Vec<f64>>, activation: Activation) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Argument("need one bias vector per weight matrix".into()));
        }
        let mut dims = vec![weights[0].rows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != *dims.last().unwrap() {
                return Err(Error::Dimension(format!(
                    "layer {l} expects {} inputs but previous layer emits {}",
                    w.rows(),
                    dims.last().unwrap()
                )));
            }
            if b.len() != w.cols() {
                return Err(Error::Dimension(format!(
                    "layer {l} bias has {} entries for {} outputs",
                    b.len(),
                    w.cols()
                )));
            }
            dims.push(w.cols());
        }
        Ok(Self {
            dims,
            weights,
            biases,
            activation,
            version: 0,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Flattened parameters in the same order as [`EncoderGrads::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrites all parameters from a flat vector produced by [`Encoder::flatten`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.rows() * w.cols();
            w.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let m = b.len();
            b.copy_from_slice(&flat[at..at + m]);
            at += m;
        }
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        let layers = self.weights.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(layers),
            pre: Vec::with_capacity(layers),
            version: self.version,
        };
        let mut x = inputs.clone();
        for l in 0..layers {
            let mut z = x.matmul(&self.weights[l])?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&self.biases[l]) {
                    *v += b;
                }
            }
            let out = if l + 1 < layers {
                z.map(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            cache.inputs.push(x);
            cache.pre.push(z);
            x = out;
        }
        Ok((x, cache))
    }

    /// Forward pass without keeping the cache.
    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs).map(|(out, _)| out)
    }

    /// Reverse-mode pass: parameter gradients and the gradient with respect to the inputs.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<(EncoderGrads, Matrix)> {
        if cache.version != self.version || cache.pre.len() != self.weights.len() {
            return Err(Error::StaleCache);
        }
        let layers = self.weights.len();
        let last = &cache.pre[layers - 1];
        last.check_same_shape(grad_output)?;

        let mut grads = EncoderGrads::zeros_for(self);
        let mut delta = grad_output.clone();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                let pre = &cache.pre[l];
                for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= self.activation.derivative(z);
                }
            }
            grads.weights[l] = cache.inputs[l].t_matmul(&delta)?;
            let bias = &mut grads.biases[l];
            for r in 0..delta.rows() {
                for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            delta = delta.matmul_t(&self.weights[l])?;
        }
        Ok((grads, delta))
    }

    /// One momentum step; the cache of any earlier forward pass becomes stale.
    pub fn sgd_step(&mut self, grads: &EncoderGrads, cfg: &SgdConfig, velocity: &mut Velocity) -> Result<()> {
        if grads.weights.len() != self.weights.len() {
            return Err(Error::Dimension("gradient layer count mismatch".into()));
        }
        for l in 0..self.weights.len() {
            self.weights[l].check_same_shape(&grads.weights[l])?;
            momentum_update(
                self.weights[l].as_mut_slice(),
                grads.weights[l].as_slice(),
                velocity.0.weights[l].as_mut_slice(),
                cfg.learning_rate,
                cfg.momentum,
            );
            momentum_update(
                &mut self.biases[l],
                &grads.biases[l],
                &mut velocity.0.biases[l],
                cfg.learning_rate,
                cfg.momentum,
            );
        }
        self.version += 1;
        Ok(())
    }

    /// Versioned text checkpoint; values carry 17 significant digits so reloads are exact.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "etfcd-encoder v1")?;
        match self.activation {
            Activation::LeakyRelu(s) => writeln!(w, "activation leaky_relu {s:.16e}")?,
            Activation::Tanh => writeln!(w, "activation tanh")?,
        }
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        writeln!(w, "dims {}", dims.join(" "))?;
        for (wm, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..wm.rows() {
                writeln!(w, "{}", join_floats(wm.row(r)))?;
            }
            writeln!(w, "{}", join_floats(b))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = LineReader::new(r);
        let (ln, header) = lines.next_line()?;
        if header.trim() != "etfcd-encoder v1" {
            return Err(Error::Parse {
                line: ln,
                message: format!("unsupported checkpoint header `{header}`"),
            });
        }
        let enc = Self::load_body(&mut lines)?;
        Ok(enc)
    }

    pub(crate) fn load_body<R: BufRead>(lines: &mut LineReader<R>) -> Result<Self> {
        let (ln, act) = lines.next_line()?;
        let parts: Vec<&str> = act.split_whitespace().collect();
        let activation = match parts.as_slice() {
            ["activation", "leaky_relu", s] => Activation::LeakyRelu(s.parse().map_err(|e| Error::Parse {
                line: ln,
                message: format!("bad slope: {e}"),
            })?),
            ["activation", "tanh"] => Activation::Tanh,
            _ => {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("bad activation line `{act}`"),
                })
            }
        };
        let (ln, dims_line) = lines.next_line()?;
        let mut it = dims_line.split_whitespace();
        if it.next() != Some("dims") {
            return Err(Error::Parse {
                line: ln,
                message: "expected `dims`".into(),
            });
        }
        let dims = it
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: ln,
                message: format!("bad dims: {e}"),
            })?;
        if dims.len() < 2 {
            return Err(Error::Parse {
                line: ln,
                message: "need at least two dims".into(),
            });
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let mut data = Vec::with_capacity(dims[l] * dims[l + 1]);
            for _ in 0..dims[l] {
                data.extend(lines.next_floats(dims[l + 1])?);
            }
            weights.push(Matrix::from_vec(dims[l], dims[l + 1], data)?);
            biases.push(lines.next_floats(dims[l + 1])?);
        }
        Self::from_parameters(weights, biases, activation)
    }
}

pub(crate) fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ")
}

/// Line cursor that tracks 1-based line numbers for diagnostics.
pub(crate) struct LineReader<R> {
    inner: std::io::Lines<R>,
    line: u64,
}

impl<R: BufRead> LineReader<R> {
    pub(crate) fn new(r: R) -> Self {
        Self {
            inner: r.lines(),
            line: 0,
        }
    }

    pub(crate) fn next_line(&mut self) -> Result<(u64, String)> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok((self.line, l?)),
            None => Err(Error::Parse {
                line: self.line,
                message: "unexpected end of file".into(),
            }),
        }
    }

    pub(crate) fn next_floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let (ln, line) = self.next_line()?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: ln,
                message: format!("bad number: {e}"),
            })?;
        if vals.len() != expected {
            return Err(Error::DimensionMismatch {
                line: ln,
                expected,
                found: vals.len(),
            });
        }
        Ok(vals)
    }
}
