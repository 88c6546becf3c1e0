//! Learned layers, the Adam optimizer and the checkpoint format.

mod adam;
mod checkpoint;
mod gru;

use rand::Rng;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use gru::{DropoutPlacement, Gru, GruCell, GruState};

use crate::autodiff::{relative_error, GradcheckReport, Graph, Param, Tensor, Var};
use crate::error::{Error, Result};

/// Optimisation schedule shared by the training loops.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Anything that owns trainable parameters, listed in declaration order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}

/// Finite-difference check of a scalar function's gradient with respect to
/// every parameter of `module`. At most `max_entries` entries per parameter
/// are probed, evenly strided.
pub fn gradcheck_params<M, F>(
    module: &mut M,
    f: F,
    h: f64,
    tol: f64,
    max_entries: usize,
) -> Result<GradcheckReport>
where
    M: Module,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, module)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = module
        .params()
        .iter()
        .map(|p| {
            g.param_grad(p)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()])
        })
        .collect();
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, m)?;
        Ok(g.value(l).item())
    };
    let mut report = GradcheckReport {
        max_rel_error: Vec::new(),
        tol,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let mut worst: f64 = 0.0;
        for k in (0..n).step_by(stride) {
            let x0 = module.params()[pi].value.data()[k];
            module.params_mut()[pi].value.data_mut()[k] = x0 + h;
            let fp = eval(module)?;
            module.params_mut()[pi].value.data_mut()[k] = x0 - h;
            let fm = eval(module)?;
            module.params_mut()[pi].value.data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(grad[k], numeric));
        }
        report.max_rel_error.push(worst);
    }
    Ok(report)
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
    .unwrap()
}

/// `y = x W^T + b` with `W: [out, in]`. Applied to a `[V, in]` matrix of
/// per-point features it is the shared per-point layer (a 1x1 convolution).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                uniform(&[output, input], bound, rng),
            ),
            bias: Param::new(format!("{name}.bias"), uniform(&[output], bound, rng)),
        }
    }

    pub fn zeros(name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[output, input])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[output])),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_size(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.input_size() {
            return Err(Error::shape(
                "Linear::forward",
                format!(
                    "{:?} into {} inputs ({})",
                    g.shape(x),
                    self.input_size(),
                    self.weight.name
                ),
            ));
        }
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let rows = g.value(x).rows();
        let x2 = if g.shape(x).len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, self.input_size()])?
        };
        let y = g.matmul_t(x2, w, false, true)?;
        g.add_row(y, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of linear layers with ReLU between them (and after the last one
/// when `relu_last` is set).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub relu_last: bool,
}

impl Mlp {
    pub fn new(name: &str, widths: &[usize], relu_last: bool, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, relu_last }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i + 1 < n || self.relu_last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}

/// Predicts a `k x k` matrix from a set of `k`-dimensional point features
/// and right-multiplies the features by it.
///
/// The final layer starts at zero and the identity is added to its output,
/// so a fresh block is the identity transform.
#[derive(Debug, Clone)]
pub struct FeatureTransform {
    pub k: usize,
    pub point_mlp: Mlp,
    pub head: Mlp,
    pub out: Linear,
}

impl FeatureTransform {
    /// `point_widths` are the shared per-point widths, `head_widths` the
    /// fully connected widths after pooling.
    pub fn new(
        name: &str,
        k: usize,
        point_widths: &[usize],
        head_widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut pw = vec![k];
        pw.extend_from_slice(point_widths);
        let pooled = *pw.last().unwrap();
        let mut hw = vec![pooled];
        hw.extend_from_slice(head_widths);
        let last = *hw.last().unwrap();
        Self {
            k,
            point_mlp: Mlp::new(&format!("{name}.point"), &pw, true, rng),
            head: Mlp::new(&format!("{name}.head"), &hw, true, rng),
            out: Linear::zeros(&format!("{name}.out"), last, k * k),
        }
    }

    /// Returns the predicted `[k, k]` matrix for features `[V, k]`.
    pub fn matrix(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.point_mlp.forward(g, x)?;
        let pooled = g.max_rows(h)?;
        let width = g.value(pooled).numel();
        let pooled = g.reshape(pooled, &[1, width])?;
        let h = self.head.forward(g, pooled)?;
        let m = self.out.forward(g, h)?;
        let mut eye = vec![0.0; self.k * self.k];
        for i in 0..self.k {
            eye[i * self.k + i] = 1.0;
        }
        let eye = g.constant(Tensor::vector(eye));
        let m = g.add_row(m, eye)?;
        g.reshape(m, &[self.k, self.k])
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let m = self.matrix(g, x)?;
        g.matmul(x, m)
    }
}

impl Module for FeatureTransform {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.point_mlp.params();
        p.extend(self.head.params());
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.point_mlp.params_mut();
        p.extend(self.head.params_mut());
        p.extend(self.out.params_mut());
        p
    }
}
