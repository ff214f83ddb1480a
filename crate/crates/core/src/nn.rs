//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Weights are stored row-major as `out_dim x in_dim`. Every layer except the
//! last is followed by the network's activation; the last layer is linear
//! unless `activate_output` is set (used for shared trunks).

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x`.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Per-layer activations recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input fed to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Trace {
    /// Input to the final layer, i.e. the last hidden representation.
    pub fn last_hidden(&self) -> &[f64] {
        self.inputs.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn clear(&mut self) {
        self.weights.iter_mut().flatten().for_each(|g| *g = 0.0);
        self.bias.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<Dense>,
    activation: Activation,
    activate_output: bool,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "layer dims need at least input and output sizes, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("layer dims must be positive, got {dims:?}")));
    }
    Ok(())
}

impl Mlp {
    pub fn zeros(dims: &[usize], activation: Activation, activate_output: bool) -> Result<Self> {
        check_dims(dims)?;
        let layers = dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
            activation,
            activate_output,
        })
    }

    /// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    /// Layers are filled in order, each row-major.
    pub fn init(dims: &[usize], activation: Activation, activate_output: bool, rng: &mut Rng) -> Result<Self> {
        let mut mlp = Self::zeros(dims, activation, activate_output)?;
        for layer in &mut mlp.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims checked at construction")
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_output
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activated(i) {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        h
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = if self.activated(i) {
                z.iter().map(|v| self.activation.apply(*v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Trace {
            inputs,
            pre,
            output: h,
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: self.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`
    /// and returns `d loss / d input`.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grads: &mut Gradients) -> Vec<f64> {
        let mut delta = d_output.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if self.activated(i) {
                for (d, z) in delta.iter_mut().zip(&trace.pre[i]) {
                    *d *= self.activation.derivative(*z);
                }
            }
            let input = &trace.inputs[i];
            let gw = &mut grads.weights[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                grads.bias[i][o] += d;
            }
            let mut next = vec![0.0; layer.in_dim];
            for (row, d) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
                for (n, w) in next.iter_mut().zip(row) {
                    *n += w * d;
                }
            }
            delta = next;
        }
        delta
    }

    /// `params <- params - step * grads`.
    pub fn descend(&mut self, grads: &Gradients, step: f64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&grads.weights[i]) {
                *w -= step * g;
            }
            for (b, g) in layer.bias.iter_mut().zip(&grads.bias[i]) {
                *b -= step * g;
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters flattened layer by layer: weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub(crate) fn write_block(&self, out: &mut String) {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "activation {}", self.activation);
        let _ = writeln!(out, "activate-output {}", self.activate_output);
        let _ = writeln!(out, "dims {}", dims.join(" "));
        for (i, l) in self.layers.iter().enumerate() {
            let _ = writeln!(out, "w{i} {}", join_floats(&l.weights));
            let _ = writeln!(out, "b{i} {}", join_floats(&l.bias));
        }
    }

    pub(crate) fn read_block(lines: &mut LineReader<'_>) -> Result<Self> {
        let activation: Activation = lines.keyed("activation")?.parse().map_err(|e: Error| lines.err(e.to_string()))?;
        let activate_output = match lines.keyed("activate-output")? {
            "true" => true,
            "false" => false,
            other => return Err(lines.err(format!("expected true/false, got `{other}`"))),
        };
        let dims = lines
            .keyed("dims")?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| lines.err(e.to_string()))?;
        let mut mlp = Self::zeros(&dims, activation, activate_output).map_err(|e| lines.err(e.to_string()))?;
        for i in 0..mlp.layers.len() {
            let w = lines.floats(&format!("w{i}"), mlp.layers[i].weights.len())?;
            mlp.layers[i].weights = w;
            let b = lines.floats(&format!("b{i}"), mlp.layers[i].bias.len())?;
            mlp.layers[i].bias = b;
        }
        Ok(mlp)
    }
}

fn join_floats(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:?}")).collect();
    parts.join(" ")
}

/// Line cursor over a weight file that tracks line numbers for errors.
pub(crate) struct LineReader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    line: usize,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            line: 0,
        }
    }

    pub(crate) fn err(&self, message: impl Into<String>) -> Error {
        Error::ModelFormat {
            line: self.line,
            message: message.into(),
        }
    }

    pub(crate) fn next_line(&mut self) -> Result<&'a str> {
        loop {
            match self.lines.next() {
                Some((i, l)) => {
                    self.line = i + 1;
                    if !l.trim().is_empty() {
                        return Ok(l.trim());
                    }
                }
                None => return Err(self.err("unexpected end of file")),
            }
        }
    }

    pub(crate) fn expect(&mut self, exact: &str) -> Result<()> {
        let l = self.next_line()?;
        if l != exact {
            return Err(self.err(format!("expected `{exact}`, found `{l}`")));
        }
        Ok(())
    }

    pub(crate) fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next_line()?;
        match l.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest.trim()),
            _ if l == key => Ok(""),
            _ => Err(self.err(format!("expected `{key} ...`, found `{l}`"))),
        }
    }

    fn floats(&mut self, key: &str, count: usize) -> Result<Vec<f64>> {
        let rest = self.keyed(key)?;
        let values = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| self.err(e.to_string()))?;
        if values.len() != count {
            return Err(self.err(format!("{key}: expected {count} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.err(format!("{key}: non-finite value")));
        }
        Ok(values)
    }

    pub(crate) fn finish(&mut self) -> Result<()> {
        for (i, l) in self.lines.by_ref() {
            if !l.trim().is_empty() {
                self.line = i + 1;
                return Err(self.err(format!("trailing content `{}`", l.trim())));
            }
        }
        Ok(())
    }
}

/// Binary cross-entropy on a logit `z` against a (possibly smoothed) target in
/// `[0, 1]`. Returns `(loss, d loss / d z)`.
#[inline]
pub fn bce_with_logit(z: f64, target: f64) -> (f64, f64) {
    (math::softplus(z) - target * z, math::logistic(z) - target)
}

/// Softmax cross-entropy against a target distribution. Returns
/// `(loss, d loss / d logits)`.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let lse = math::logsumexp(logits);
    let loss = target.iter().zip(logits).map(|(t, z)| t * (lse - z)).sum();
    let probs = math::softmax(logits);
    let grad = probs.iter().zip(target).map(|(p, t)| p - t).collect();
    (loss, grad)
}

/// Vector-Jacobian product of softmax: given `p = softmax(z)` and `dL/dp`,
/// returns `dL/dz`.
pub fn softmax_vjp(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(d_probs).map(|(p, d)| p * d).sum();
    probs.iter().zip(d_probs).map(|(p, d)| p * (d - dot)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_determinism() {
        let a = Mlp::init(&[4, 8, 1], Activation::Relu, false, &mut Rng::new(1)).unwrap();
        let b = Mlp::init(&[4, 8, 1], Activation::Relu, false, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers().len(), 2);
        assert_eq!((a.layers()[0].out_dim, a.layers()[0].in_dim), (8, 4));
        assert_eq!((a.layers()[1].out_dim, a.layers()[1].in_dim), (1, 8));
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= 0.5));
        assert_eq!(a.num_params(), 8 * 4 + 8 + 8 + 1);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(Mlp::zeros(&[4], Activation::Relu, false).is_err());
        assert!(Mlp::zeros(&[4, 0, 1], Activation::Relu, false).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut m = Mlp::init(&[3, 5, 2], Activation::Tanh, false, &mut Rng::new(4)).unwrap();
        let p = m.params();
        let mut q = p.clone();
        q.iter_mut().for_each(|v| *v *= 2.0);
        m.set_params(&q).unwrap();
        assert_eq!(m.params(), q);
        assert!(m.set_params(&p[1..]).is_err());
    }

    #[test]
    fn block_round_trip_is_exact() {
        let m = Mlp::init(&[3, 7, 2], Activation::Tanh, true, &mut Rng::new(8)).unwrap();
        let mut text = String::new();
        m.write_block(&mut text);
        let back = Mlp::read_block(&mut LineReader::new(&text)).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn softmax_vjp_matches_finite_difference() {
        let z = [0.3, -1.2, 0.8];
        let d = [0.5, -0.25, 2.0];
        let analytic = softmax_vjp(&math::softmax(&z), &d);
        let h = 1e-6;
        for i in 0..3 {
            let mut zp = z;
            zp[i] += h;
            let mut zm = z;
            zm[i] -= h;
            let f = |v: &[f64]| -> f64 { math::softmax(v).iter().zip(&d).map(|(p, w)| p * w).sum() };
            let numeric = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-8);
        }
    }
}
