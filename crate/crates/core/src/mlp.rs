//! Small fully connected decoders (three ReLU hidden layers).

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dense layer; `weight` is `outputs × inputs`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// He-uniform weights, so activations keep their scale through ReLU layers.
    fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b = 1.0 / (inputs as f64).sqrt();
        let bias = (0..outputs).map(|_| rng.random_range(-b..b)).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Hidden widths of the shading decoders.
pub const SHADING_HIDDEN: [usize; 3] = [64, 64, 64];
/// Hidden widths of the visibility decoder.
pub const VISIBILITY_HIDDEN: [usize; 3] = [32, 32, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        inputs: usize,
        hidden: [usize; 3],
        outputs: usize,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let widths = [inputs, hidden[0], hidden[1], hidden[2], outputs];
        let layers = widths
            .windows(2)
            .map(|w| Linear::uniform(w[0], w[1], rng))
            .collect();
        Self { layers, output }
    }

    pub fn zeros(inputs: usize, hidden: [usize; 3], outputs: usize, output: Activation) -> Self {
        let widths = [inputs, hidden[0], hidden[1], hidden[2], outputs];
        let layers = widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers, output }
    }

    /// `inputs → 64³ → 3`, logistic output.
    pub fn shading<R: Rng>(inputs: usize, rng: &mut R) -> Self {
        Self::new(inputs, SHADING_HIDDEN, 3, Activation::Sigmoid, rng)
    }

    /// `inputs → 32³ → 1`, tanh output.
    pub fn visibility<R: Rng>(inputs: usize, rng: &mut R) -> Self {
        Self::new(inputs, VISIBILITY_HIDDEN, 1, Activation::Tanh, rng)
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Checks layer chaining and the expected `[in, h, h, h, out]` shape.
    pub fn check_shape(
        &self,
        name: &str,
        inputs: usize,
        hidden: [usize; 3],
        outputs: usize,
        output: Activation,
    ) -> Result<()> {
        let expected = vec![inputs, hidden[0], hidden[1], hidden[2], outputs];
        if self.layers.len() != 4 {
            return Err(Error::dim(format!("decoder {name} layer count"), 4, self.layers.len()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Invalid(format!("decoder {name} layer {i} buffers")));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::Invalid(format!("decoder {name} layer {i} does not chain")));
            }
        }
        let widths = self.widths();
        for (i, (&e, &g)) in expected.iter().zip(&widths).enumerate() {
            if e != g {
                return Err(Error::dim(format!("decoder {name} width {i}"), e, g));
            }
        }
        if self.output != output {
            return Err(Error::Invalid(format!(
                "decoder {name} output activation {} (expected {})",
                self.output.name(),
                output.name()
            )));
        }
        Ok(())
    }

    /// Batched inference over `rows` inputs laid out row-major.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        assert_eq!(x.len(), rows * self.input_width());
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; rows * layer.outputs];
            linear_forward(&cur, rows, layer, &mut next);
            if i == last {
                next.iter_mut().for_each(|v| *v = self.output.apply(*v));
            } else {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = next;
        }
        cur
    }
}

/// `y = x·Wᵀ + b` for `x: rows × inputs`.
pub(crate) fn linear_forward(x: &[f64], rows: usize, layer: &Linear, y: &mut [f64]) {
    let (k, n) = (layer.inputs, layer.outputs);
    for r in 0..rows {
        y[r * n..(r + 1) * n].copy_from_slice(&layer.bias);
    }
    gemm(rows, k, n, x, (k as isize, 1), &layer.weight, (1, k as isize), y, 1.0);
}

/// `c = a·b + beta·c` with explicit (row, col) strides for `a` (m×k) and `b` (k×n);
/// `c` is dense row-major m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_stride: (isize, isize),
    b: &[f64],
    b_stride: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents cover the strided views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_stride.0,
            a_stride.1,
            b.as_ptr(),
            b_stride.0,
            b_stride.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
