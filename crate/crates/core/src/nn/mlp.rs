use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::{Matrix, StyleTensor3D};
use super::tape::{Bind, Tape, Var};
use super::{NnError, Parameters};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Identity,
}

impl Activation {
    /// Slope on the negative half-line.
    fn negative_slope(self) -> f64 {
        match self {
            Activation::LeakyRelu(a) => a,
            Activation::Relu => 0.0,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Dense,
    /// `k` independent per-style blocks; widths are per style.
    PerStyle(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub weight_mode: WeightMode,
}

impl MlpSpec {
    pub fn dense(depth: usize, width: usize, activation: Activation) -> Self {
        Self { depth, width, activation, weight_mode: WeightMode::Dense }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.depth < 1 {
            return Err(NnError::Shape("mlp depth must be at least 1".into()));
        }
        if self.width < 1 {
            return Err(NnError::Shape("mlp width must be at least 1".into()));
        }
        if let Activation::LeakyRelu(a) = self.activation {
            if !(a > 0.0 && a < 1.0) {
                return Err(NnError::Shape(format!("leaky-relu slope {a} outside (0, 1)")));
            }
        }
        if self.weight_mode == WeightMode::PerStyle(0) {
            return Err(NnError::Shape("per-style mode needs at least one style".into()));
        }
        Ok(())
    }

    fn styles(&self) -> usize {
        match self.weight_mode {
            WeightMode::Dense => 1,
            WeightMode::PerStyle(k) => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Weight {
    Dense(Matrix),
    PerStyle(StyleTensor3D),
}

impl Weight {
    fn matrix(&self) -> &Matrix {
        match self {
            Weight::Dense(m) => m,
            Weight::PerStyle(t) => t.as_matrix(),
        }
    }

    fn matrix_mut(&mut self) -> &mut Matrix {
        match self {
            Weight::Dense(m) => m,
            Weight::PerStyle(t) => t.as_matrix_mut(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Weight,
    /// `1 × out` (per-style: `1 × k·out`)
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    in_dim: usize,
    out_dim: usize,
    layers: Vec<Layer>,
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [l.weight.matrix(), &l.bias]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [l.weight.matrix_mut(), &mut l.bias]).collect()
    }
}

impl Mlp {
    /// All-zero network of the given shape.
    pub fn zeros(spec: MlpSpec, in_dim: usize, out_dim: usize) -> Result<Self, NnError> {
        spec.validate()?;
        let k = spec.styles();
        if in_dim % k != 0 || out_dim % k != 0 {
            return Err(NnError::Shape(format!("dims {in_dim}->{out_dim} not divisible into {k} styles")));
        }
        let dims = layer_dims(&spec, in_dim / k, out_dim / k);
        let layers = dims
            .windows(2)
            .map(|d| {
                let (i, o) = (d[0], d[1]);
                let weight = match spec.weight_mode {
                    WeightMode::Dense => Weight::Dense(Matrix::zeros(o, i)),
                    WeightMode::PerStyle(k) => Weight::PerStyle(StyleTensor3D::zeros(k, i, o)),
                };
                Layer { weight, bias: Matrix::zeros(1, k * o) }
            })
            .collect();
        Ok(Self { spec, in_dim, out_dim, layers })
    }

    /// Kaiming-normal weights (gain for the configured activation), zero biases.
    pub fn kaiming<R: Rng + ?Sized>(spec: MlpSpec, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec, in_dim, out_dim)?;
        let a = spec.activation.negative_slope();
        for layer in &mut net.layers {
            let w = layer.weight.matrix_mut();
            let std = (2.0 / (1.0 + a * a) / w.cols() as f64).sqrt();
            for v in w.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        }
        Ok(net)
    }

    /// Every layer set to a rectangular identity plus `noise`-scaled Gaussian perturbation.
    pub fn layer_identity<R: Rng + ?Sized>(
        spec: MlpSpec,
        dim: usize,
        noise: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec, dim, dim)?;
        for layer in &mut net.layers {
            let k = spec.styles();
            let w = layer.weight.matrix_mut();
            let (o, i) = (w.rows() / k, w.cols());
            for s in 0..k {
                for d in 0..o.min(i) {
                    w.set(s * o + d, d, 1.0);
                }
            }
        }
        net.perturb(noise, rng);
        Ok(net)
    }

    /// Weights chosen so the whole network computes the identity map exactly
    /// (before `noise`), using paired `[x, -x]` hidden units.
    pub fn exact_identity<R: Rng + ?Sized>(
        spec: MlpSpec,
        dim: usize,
        noise: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(spec, dim, dim)?;
        let k = spec.styles();
        let d = dim / k;
        if spec.depth > 1 && spec.width < 2 * d {
            return Err(NnError::Shape(format!(
                "exact identity needs hidden width >= {} (got {})",
                2 * d,
                spec.width
            )));
        }
        let gain = 1.0 + spec.activation.negative_slope();
        let depth = spec.depth;
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let w = layer.weight.matrix_mut();
            let o = w.rows() / k;
            for s in 0..k {
                let r0 = s * o;
                for j in 0..d {
                    if depth == 1 {
                        w.set(r0 + j, j, 1.0);
                    } else if l == 0 {
                        w.set(r0 + j, j, 1.0);
                        w.set(r0 + d + j, j, -1.0);
                    } else if l == depth - 1 {
                        w.set(r0 + j, j, 1.0 / gain);
                        w.set(r0 + j, d + j, -1.0 / gain);
                    } else {
                        w.set(r0 + j, j, 1.0 / gain);
                        w.set(r0 + j, d + j, -1.0 / gain);
                        w.set(r0 + d + j, j, -1.0 / gain);
                        w.set(r0 + d + j, d + j, 1.0 / gain);
                    }
                }
            }
        }
        net.perturb(noise, rng);
        Ok(net)
    }

    fn perturb<R: Rng + ?Sized>(&mut self, noise: f64, rng: &mut R) {
        if noise == 0.0 {
            return;
        }
        for layer in &mut self.layers {
            for v in layer.weight.matrix_mut().data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += noise * z;
            }
        }
    }

    /// Zeroes the last layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.matrix_mut().data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Records a forward pass. `params` are this network's tensors as bound on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var, NnError> {
        if params.len() != 2 * self.layers.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameter handles, got {}",
                2 * self.layers.len(),
                params.len()
            )));
        }
        if tape.value(x).cols() != self.in_dim {
            return Err(NnError::Shape(format!(
                "network expects inputs of width {}, got {}",
                self.in_dim,
                tape.value(x).cols()
            )));
        }
        let mut h = x;
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = (params[2 * l], params[2 * l + 1]);
            h = match &layer.weight {
                Weight::Dense(_) => tape.linear(h, w, b)?,
                Weight::PerStyle(t) => tape.style_linear(h, w, b, t.styles())?,
            };
            if l + 1 < n {
                h = match self.spec.activation {
                    Activation::LeakyRelu(a) => tape.leaky_relu(h, a),
                    Activation::Relu => tape.relu(h),
                    Activation::Identity => h,
                };
            }
        }
        Ok(h)
    }

    /// Binds the network and records a forward pass in one call.
    pub fn bind_forward(&self, tape: &mut Tape, x: Var, bind: Bind) -> Result<Var, NnError> {
        let params = tape.bind(self, bind);
        self.forward(tape, x, &params)
    }

    /// Batch inference (`n × in` → `n × out`) on a throwaway tape.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix, NnError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.bind_forward(&mut tape, xv, Bind::Frozen)?;
        Ok(tape.value(y).clone())
    }
}

fn layer_dims(spec: &MlpSpec, in_dim: usize, out_dim: usize) -> Vec<usize> {
    let mut dims = vec![in_dim];
    dims.extend(std::iter::repeat_n(spec.width, spec.depth - 1));
    dims.push(out_dim);
    dims
}

/// `w · Mᵀ + b` for a single vector.
pub fn linear_forward(w: &[f64], m: &Matrix, b: &[f64]) -> Result<Vec<f64>, NnError> {
    if w.len() != m.cols() || b.len() != m.rows() {
        return Err(NnError::Shape(format!(
            "linear_forward: input {} / weight {:?} / bias {}",
            w.len(),
            m.shape(),
            b.len()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::row_vector(w));
    let mv = tape.constant(m.clone());
    let bv = tape.constant(Matrix::row_vector(b));
    let y = tape.linear(x, mv, bv)?;
    Ok(tape.value(y).data().to_vec())
}

/// Row `j` of the output is `w_j · (M*_j)ᵀ + b_j`.
pub fn per_style_linear_forward(w: &Matrix, m: &StyleTensor3D, b: &Matrix) -> Result<Matrix, NnError> {
    let k = m.styles();
    if w.rows() != k || w.cols() != m.in_dim() || b.shape() != (k, m.out_dim()) {
        return Err(NnError::Shape(format!(
            "per_style_linear_forward: {} styles, input {:?}, bias {:?}",
            k,
            w.shape(),
            b.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::row_vector(w.data()));
    let mv = tape.constant(m.as_matrix().clone());
    let bv = tape.constant(Matrix::row_vector(b.data()));
    let y = tape.style_linear(x, mv, bv, k)?;
    Matrix::from_vec(k, m.out_dim(), tape.value(y).data().to_vec())
}
