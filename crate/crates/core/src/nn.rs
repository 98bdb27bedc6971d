//! Fully connected networks over a flat parameter vector laid out as
//! `[W1, b1, ..., WL, bL]`, with `Wl` stored row-major as `n_l x n_{l-1}`.
//! Inputs are batches with one sample per row.

use std::ops::Range;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::regularizers::{Block, BlockKind, GroupLayout};
use crate::{Error, ParamVector, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Relu,
    Tanh,
}

impl HiddenActivation {
    fn apply(self, z: f64) -> f64 {
        match self {
            HiddenActivation::Relu => z.max(0.0),
            HiddenActivation::Tanh => z.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation `z` and the activation `a`.
    /// The ReLU derivative at 0 is taken to be 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            HiddenActivation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            HiddenActivation::Tanh => 1.0 - a * a,
        }
    }
}

impl FromStr for HiddenActivation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(HiddenActivation::Relu),
            "tanh" => Ok(HiddenActivation::Tanh),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `0.5 |out - y|^2` per sample.
    Mse,
    /// Softmax cross-entropy on the output logits.
    CrossEntropy,
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            _ => Err(format!("unknown loss `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizeMode {
    /// Every weight is its own group.
    Entrywise,
    /// Each row of a weight matrix (the incoming weights of one neuron) is a
    /// group.
    Rows,
}

impl FromStr for RegularizeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "entrywise" => Ok(RegularizeMode::Entrywise),
            "rows" => Ok(RegularizeMode::Rows),
            _ => Err(format!("unknown regularization mode `{s}`")),
        }
    }
}

/// Network shape. Hidden layers share one activation, the output layer is
/// linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: HiddenActivation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: HiddenActivation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Layout("a network needs at least an input and an output layer".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Layout(format!("layer sizes must be positive, got {layer_sizes:?}")));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> HiddenActivation {
        self.activation
    }

    /// Number of affine layers `L`.
    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        self.layer_sizes[self.n_layers()]
    }

    /// `(n_out, n_in)` of layer `l` (zero based).
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l + 1], self.layer_sizes[l])
    }

    fn layer_offset(&self, l: usize) -> usize {
        (0..l)
            .map(|i| {
                let (o, n) = self.layer_shape(i);
                o * n + o
            })
            .sum()
    }

    pub fn weight_range(&self, l: usize) -> Range<usize> {
        let (o, n) = self.layer_shape(l);
        let start = self.layer_offset(l);
        start..start + o * n
    }

    pub fn bias_range(&self, l: usize) -> Range<usize> {
        let (o, n) = self.layer_shape(l);
        let start = self.layer_offset(l) + o * n;
        start..start + o
    }

    pub fn n_params(&self) -> usize {
        self.layer_offset(self.n_layers())
    }

    fn weights<'a>(&self, theta: &'a ParamVector, l: usize) -> ArrayView2<'a, f64> {
        theta
            .slice(s![self.weight_range(l)])
            .into_shape_with_order(self.layer_shape(l))
            .expect("contiguous weight block")
    }

    fn bias<'a>(&self, theta: &'a ParamVector, l: usize) -> ArrayView1<'a, f64> {
        theta.slice(s![self.bias_range(l)])
    }

    fn check(&self, theta: &ParamVector, x: &ArrayView2<f64>) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::dim("network parameters", self.n_params(), theta.len()));
        }
        if x.ncols() != self.n_inputs() {
            return Err(Error::dim("network input width", self.n_inputs(), x.ncols()));
        }
        Ok(())
    }
}

/// Supervision for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Array2<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn affine(a: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut z = Array2::zeros((a.nrows(), w.nrows()));
    z.assign(b);
    general_mat_mul(1.0, a, &w.t(), 1.0, &mut z);
    z
}

/// Network output (logits or linear output) for every row of `x`.
pub fn forward(spec: &MlpSpec, theta: &ParamVector, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    spec.check(theta, &x)?;
    let mut a = x.to_owned();
    for l in 0..spec.n_layers() {
        let mut z = affine(&a.view(), &spec.weights(theta, l), &spec.bias(theta, l));
        if l + 1 < spec.n_layers() {
            let act = spec.activation;
            z.mapv_inplace(|v| act.apply(v));
        }
        a = z;
    }
    Ok(a)
}

/// Mean loss over the batch and the derivative of that mean with respect to
/// the outputs.
fn loss_and_output_grad(out: &Array2<f64>, targets: &Targets, loss: LossKind) -> Result<(f64, Array2<f64>)> {
    let n = out.nrows() as f64;
    let classes = out.ncols();
    match (loss, targets) {
        (LossKind::Mse, Targets::Values(y)) => {
            if y.dim() != out.dim() {
                return Err(Error::dim("regression target width", out.ncols(), y.ncols()));
            }
            let diff = out - y;
            let value = 0.5 * diff.iter().map(|d| d * d).sum::<f64>() / n;
            Ok((value, diff / n))
        }
        (LossKind::Mse, Targets::Labels(labels)) => {
            let mut grad = out.clone();
            for (i, &y) in labels.iter().enumerate() {
                if y >= classes {
                    return Err(Error::Label { label: y, classes });
                }
                grad[[i, y]] -= 1.0;
            }
            let value = 0.5 * grad.iter().map(|d| d * d).sum::<f64>() / n;
            Ok((value, grad / n))
        }
        (LossKind::CrossEntropy, Targets::Labels(labels)) => {
            let mut grad = Array2::zeros(out.dim());
            let mut value = 0.0;
            for ((row, mut g), &y) in out.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
                if y >= classes {
                    return Err(Error::Label { label: y, classes });
                }
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                value += lse - row[y];
                Zip::from(&mut g).and(&row).for_each(|g, &v| *g = (v - lse).exp() / n);
                g[y] -= 1.0 / n;
            }
            Ok((value / n, grad))
        }
        (LossKind::CrossEntropy, Targets::Values(_)) => {
            Err(Error::Layout("cross-entropy needs class labels as targets".into()))
        }
    }
}

/// Mean batch loss and its gradient with respect to `theta`.
pub fn loss_and_grad(spec: &MlpSpec, theta: &ParamVector, batch: &Batch, loss: LossKind) -> Result<(f64, ParamVector)> {
    let (value, grad, _) = loss_grad_and_output(spec, theta, batch, loss)?;
    Ok((value, grad))
}

/// Like [`loss_and_grad`], also returning the network output of the batch.
pub fn loss_grad_and_output(
    spec: &MlpSpec,
    theta: &ParamVector,
    batch: &Batch,
    loss: LossKind,
) -> Result<(f64, ParamVector, Array2<f64>)> {
    let x = batch.inputs.view();
    spec.check(theta, &x)?;
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if batch.targets.len() != batch.len() {
        return Err(Error::dim("batch targets", batch.len(), batch.targets.len()));
    }
    let n_layers = spec.n_layers();
    let act = spec.activation;

    // activations[l] is the input of layer l; pre[l] its pre-activation
    let mut activations: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
    let mut pre: Vec<Array2<f64>> = Vec::with_capacity(n_layers);
    activations.push(x.to_owned());
    for l in 0..n_layers {
        let z = affine(&activations[l].view(), &spec.weights(theta, l), &spec.bias(theta, l));
        let a = if l + 1 < n_layers { z.mapv(|v| act.apply(v)) } else { z.clone() };
        pre.push(z);
        activations.push(a);
    }

    let (value, mut delta) = loss_and_output_grad(&activations[n_layers], &batch.targets, loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    let mut grad = ParamVector::zeros(theta.len());
    for l in (0..n_layers).rev() {
        {
            let wr = spec.weight_range(l);
            let mut gw: ArrayViewMut2<f64> = grad
                .slice_mut(s![wr])
                .into_shape_with_order(spec.layer_shape(l))
                .expect("contiguous weight block");
            general_mat_mul(1.0, &delta.t(), &activations[l], 0.0, &mut gw);
        }
        grad.slice_mut(s![spec.bias_range(l)]).assign(&delta.sum_axis(Axis(0)));
        if l > 0 {
            let mut back = delta.dot(&spec.weights(theta, l));
            Zip::from(&mut back)
                .and(&pre[l - 1])
                .and(&activations[l])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            delta = back;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let out = activations.pop().expect("output layer");
    Ok((value, grad, out))
}

/// Mean loss without the gradient.
pub fn loss(spec: &MlpSpec, theta: &ParamVector, batch: &Batch, loss: LossKind) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let out = forward(spec, theta, batch.inputs.view())?;
    Ok(loss_and_output_grad(&out, &batch.targets, loss)?.0)
}

/// Group layout of the network's weights; biases are unregularized.
pub fn default_layout(spec: &MlpSpec, mode: RegularizeMode) -> GroupLayout {
    let kind = match mode {
        RegularizeMode::Entrywise => BlockKind::Entrywise,
        RegularizeMode::Rows => BlockKind::Rows,
    };
    let mut blocks = Vec::with_capacity(2 * spec.n_layers());
    for l in 0..spec.n_layers() {
        let (o, n) = spec.layer_shape(l);
        blocks.push(Block::new(format!("W{}", l + 1), spec.weight_range(l).start, o, n, kind));
        blocks.push(Block::new(format!("b{}", l + 1), spec.bias_range(l).start, 1, o, BlockKind::Bias));
    }
    GroupLayout::new(spec.n_params(), blocks).expect("network blocks tile the parameter vector")
}

/// Indices of the largest entry per row, ties going to the lowest index.
pub fn argmax_rows(out: &Array2<f64>) -> Vec<usize> {
    out.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
