use super::elementwise::Axes;
use super::kernel::Kernel;
use super::resample::CorrAxis;
use super::tensor::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<(Kernel, Vec<Var>)>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// A reverse-mode differentiation tape.
///
/// Nodes are appended in construction order, which is a topological order of
/// the DAG; [`Graph::backward`] walks it in reverse, visiting each kernel
/// once. A graph is confined to one thread; separate graphs are independent.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn make_tensor(
        &mut self,
        shape: Shape,
        values: Vec<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?, requires_grad))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::of(v)))
    }

    /// Copies the value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies a catalog kernel, linking the output into the graph.
    pub fn apply(&mut self, kernel: Kernel, inputs: &[Var]) -> Result<Var> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(Error::usage(format!("{v:?} does not belong to this graph")));
            }
        }
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = kernel.forward(&refs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some((kernel, inputs.to_vec())),
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d`loss`/d(node) to every reachable node that requires a
    /// gradient. Leaf gradients accumulate across calls; interior gradients
    /// are released once consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {shape}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::scalar(T::one());
        accumulate(&mut self.nodes[loss.0].grad, seed);
        for i in (0..=loss.0).rev() {
            let Some((kernel, inputs)) = self.nodes[i].op.clone() else {
                continue;
            };
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let needs: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let grads = {
                let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                kernel.backward(&refs, &self.nodes[i].value, &g, &needs)
            };
            for (v, gi) in inputs.iter().zip(grads) {
                if let Some(gi) = gi {
                    if self.nodes[v.0].requires_grad {
                        accumulate(&mut self.nodes[v.0].grad, gi);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // Convenience wrappers over `apply`.

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Kernel::Conv2d { stride, padding }, &[x, w, b])
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        self.apply(Kernel::ConvTranspose2d { stride: 2, padding }, &[x, w, b])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.apply(Kernel::LeakyRelu { slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Tanh, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Softplus, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Kernel::Clamp { lo, hi }, &[x])
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Ln, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Exp, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Div, &[a, b])
    }

    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        self.apply(Kernel::Affine { scale, offset }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Abs, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Square, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Sum { axes: Axes::ALL }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Mean { axes: Axes::ALL }, &[x])
    }

    pub fn sum_axes(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.apply(Kernel::Sum { axes }, &[x])
    }

    pub fn mean_axes(&mut self, x: Var, axes: Axes) -> Result<Var> {
        self.apply(Kernel::Mean { axes }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Kernel::Concat { axis }, parts)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Kernel::Narrow { axis, start, len }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Upsample2, &[x])
    }

    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        self.apply(Kernel::Downsample2, &[x])
    }

    pub fn grid_sample(&mut self, x: Var, grid: Var) -> Result<Var> {
        self.apply(Kernel::GridSample, &[x, grid])
    }

    pub fn correlation(
        &mut self,
        a: Var,
        b: Var,
        axis: CorrAxis,
        min_disp: i32,
        max_disp: i32,
    ) -> Result<Var> {
        self.apply(
            Kernel::Correlation {
                axis,
                min_disp,
                max_disp,
            },
            &[a, b],
        )
    }

    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        self.apply(Kernel::SmoothL1 { beta }, &[a, b])
    }

    pub fn ssim_map(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Ssim, &[a, b])
    }

    pub fn cosine_map(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Kernel::Cosine, &[a, b])
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Kernel::InstanceNorm { eps }, &[x])
    }

    /// Mean absolute difference.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// Weighted sum `sum_i w_i * x_i` of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = if w == 1.0 { v } else { self.scale(v, w)? };
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::usage("weighted sum of zero terms"))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
}
