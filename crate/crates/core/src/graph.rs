//! Reverse-mode automatic differentiation over a fixed operation vocabulary:
//! elementwise arithmetic, exp/log/tanh/sigmoid/sqrt/abs, matmul, slicing,
//! concatenation, reductions, cumulative sum, softmax, depthwise convolution
//! and gather. Operations append nodes to a tape; `backward` walks the tape
//! in reverse, which is a valid topological order by construction.
//!
//! Values are immutable tensors, so saving activations for the backward pass
//! is an `Arc` clone, not a copy.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shapes, broadcast_zip, reduce_to_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub struct BackwardCtx<'a, F: Scalar> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a Tensor<F>,
    /// This node's forward value.
    pub out: &'a Tensor<F>,
    /// Forward values of the parents, in declaration order.
    pub inputs: &'a [Tensor<F>],
    /// Which parents actually need a gradient.
    pub wants: &'a [bool],
}

type GradFn<F> = Box<dyn Fn(&BackwardCtx<'_, F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Scalar> {
    value: Tensor<F>,
    parents: Vec<Var>,
    needs_grad: bool,
    grad_fn: Option<GradFn<F>>,
}

pub struct Graph<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, node: Node<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Non-differentiable input (masks, position tables, token ids).
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push(Node { value, parents: vec![], needs_grad: false, grad_fn: None })
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(F::from_f64(v)))
    }

    /// Differentiable input; `backward` reports a gradient for it.
    pub fn leaf(&self, value: Tensor<F>) -> Var {
        self.push(Node { value, parents: vec![], needs_grad: true, grad_fn: None })
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn needs_grad(&self, parents: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        parents.iter().any(|p| nodes[p.0].needs_grad)
    }

    fn op(&self, value: Tensor<F>, parents: Vec<Var>, grad_fn: GradFn<F>) -> Var {
        let needs = self.needs_grad(&parents);
        self.push(Node {
            value,
            parents,
            needs_grad: needs,
            grad_fn: if needs { Some(grad_fn) } else { None },
        })
    }

    /// Cut the tape: same value, no gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        self.constant(self.value(v))
    }

    // -- elementwise binary (broadcasting) ------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_op(a, b, "add", |x, y| x + y, |g, _a, _b, _out| (g.clone(), g.clone()))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_op(a, b, "sub", |x, y| x - y, |g, _a, _b, _out| {
            (g.clone(), g.map(|v| -v))
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_op(a, b, "mul", |x, y| x * y, |g, a, b, _out| {
            let ga = broadcast_zip(g, b, |g, b| g * b).expect("validated");
            let gb = broadcast_zip(g, a, |g, a| g * a).expect("validated");
            (ga, gb)
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_op(a, b, "div", |x, y| x / y, |g, a, b, _out| {
            let ga = broadcast_zip(g, b, |g, b| g / b).expect("validated");
            let num = broadcast_zip(g, a, |g, a| g * a).expect("validated");
            let gb = broadcast_zip(&num, b, |n, b| -n / (b * b)).expect("validated");
            (ga, gb)
        })
    }

    /// Elementwise max; ties route the gradient to the first argument.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_op(a, b, "maximum", |x, y| if x >= y { x } else { y }, |g, a, b, _out| {
            let mask = broadcast_zip(a, b, |x, y| if x >= y { F::one() } else { F::zero() })
                .expect("validated");
            let ga = g.zip_map(&mask, |g, m| g * m).expect("same shape");
            let gb = g.zip_map(&mask, |g, m| g * (F::one() - m)).expect("same shape");
            (ga, gb)
        })
    }

    #[allow(clippy::type_complexity)]
    fn broadcast_op(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(F, F) -> F + 'static,
        df: impl Fn(&Tensor<F>, &Tensor<F>, &Tensor<F>, &Tensor<F>) -> (Tensor<F>, Tensor<F>) + 'static,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_shapes(va.shape(), vb.shape()).map_err(|_| CoreError::Shape {
            op: name,
            detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
        })?;
        let out = broadcast_zip(&va, &vb, f)?;
        Ok(self.op(
            out,
            vec![a, b],
            Box::new(move |ctx| {
                let (ga, gb) = df(ctx.grad, &ctx.inputs[0], &ctx.inputs[1], ctx.out);
                let mut grads = vec![None, None];
                if ctx.wants[0] {
                    grads[0] = Some(reduce_to_shape(&ga, ctx.inputs[0].shape()));
                }
                if ctx.wants[1] {
                    grads[1] = Some(reduce_to_shape(&gb, ctx.inputs[1].shape()));
                }
                grads
            }),
        ))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let s = F::from_f64(c);
        let out = self.value(a).map(|v| v + s);
        self.op(out, vec![a], Box::new(move |ctx| vec![Some(ctx.grad.clone())]))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let s = F::from_f64(c);
        let out = self.value(a).map(|v| v * s);
        self.op(out, vec![a], Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]))
    }

    // -- elementwise unary -----------------------------------------------------

    fn unary(
        &self,
        a: Var,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static, // (input, output) -> local derivative
    ) -> Var {
        let va = self.value(a);
        let out = va.map(f);
        self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let x = &ctx.inputs[0];
                let data: Vec<F> = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(ctx.out.data().iter()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(x.shape().to_vec(), data).expect("same shape"))]
            }),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -F::one())
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), |x, _| {
            if x > F::zero() {
                F::one()
            } else if x < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        })
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| F::one() / x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |_, y| F::from_f64(0.5) / y)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| F::one() / (F::one() + (-x).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    /// silu(x) = x * sigmoid(x)
    pub fn silu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x / (F::one() + (-x).exp()),
            |x, _| {
                let s = F::one() / (F::one() + (-x).exp());
                s + x * s * (F::one() - s)
            },
        )
    }

    /// Escape hatch for ops outside the fixed vocabulary; the caller supplies
    /// the local derivative as (input, output) -> d out/d in. Also used by the
    /// gradient-checker negative-control tests.
    pub fn custom_unary(
        &self,
        a: Var,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Var {
        self.unary(a, f, df)
    }

    // -- linear algebra ----------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.op(
            out,
            vec![a, b],
            Box::new(move |ctx| {
                let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
                let mut grads = vec![None, None];
                if ctx.wants[0] {
                    grads[0] = Some(
                        ctx.grad.matmul(&b.transpose2d().expect("2d")).expect("shapes validated"),
                    );
                }
                if ctx.wants[1] {
                    grads[1] = Some(
                        a.transpose2d().expect("2d").matmul(ctx.grad).expect("shapes validated"),
                    );
                }
                grads
            }),
        ))
    }

    pub fn transpose2d(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2d()?;
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad.transpose2d().expect("2d"))]),
        ))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        let out = va.reshape(shape)?;
        let orig = va.shape().to_vec();
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad.reshape(orig.clone()).expect("same len"))]),
        ))
    }

    // -- gather / slicing --------------------------------------------------------

    pub fn index_select(&self, a: Var, axis: usize, indices: Arc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let out = va.index_select(axis, &indices)?;
        let base_shape = va.shape().to_vec();
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                vec![Some(Tensor::scatter_add_index(&base_shape, axis, &indices, ctx.grad))]
            }),
        ))
    }

    /// out[i] = a[i, idx[i]] for 2-D `a`.
    pub fn take_per_row(&self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        let out = va.take_per_row(&idx)?;
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let mut data = vec![F::zero(); rows * cols];
                for (i, &j) in idx.iter().enumerate() {
                    data[i * cols + j] += ctx.grad.data()[i];
                }
                vec![Some(Tensor::from_vec(vec![rows, cols], data).expect("sized"))]
            }),
        ))
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<F>> = values.iter().collect();
        let out = Tensor::concat(axis, &refs)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.op(
            out,
            parts.to_vec(),
            Box::new(move |ctx| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for (i, &len) in sizes.iter().enumerate() {
                    if ctx.wants[i] {
                        grads.push(Some(ctx.grad.narrow(axis, off, len).expect("in range")));
                    } else {
                        grads.push(None);
                    }
                    off += len;
                }
                grads
            }),
        ))
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let out = va.narrow(axis, start, len)?;
        let base_shape = va.shape().to_vec();
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let zero = Tensor::zeros(&base_shape);
                vec![Some(zero.add_at_narrow(axis, start, ctx.grad).expect("in range"))]
            }),
        ))
    }

    // -- reductions ----------------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::scalar(va.sum());
        let shape = va.shape().to_vec();
        self.op(
            out,
            vec![a],
            Box::new(move |ctx| vec![Some(Tensor::full(&shape, ctx.grad.item()))]),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len().max(1);
        let out = Tensor::scalar(va.sum() / F::from_usize(n));
        let shape = va.shape().to_vec();
        self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                vec![Some(Tensor::full(&shape, ctx.grad.item() / F::from_usize(n)))]
            }),
        )
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let out = va.sum_axis(axis, true)?;
        let shape = va.shape().to_vec();
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad.broadcast_to(&shape).expect("keepdim"))]),
        ))
    }

    /// Max along an axis, keepdim. Gradient routes to the (first) argmax.
    pub fn max_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let (out, argmax) = va.max_axis(axis)?;
        let shape = va.shape().to_vec();
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let (outer, axis_len, inner) = {
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    (outer, shape[axis], inner)
                };
                let mut data = vec![F::zero(); shape.iter().product()];
                for o in 0..outer {
                    for t in 0..inner {
                        let a_idx = argmax[o * inner + t];
                        data[(o * axis_len + a_idx) * inner + t] += ctx.grad.data()[o * inner + t];
                    }
                }
                vec![Some(Tensor::from_vec(shape.clone(), data).expect("sized"))]
            }),
        ))
    }

    pub fn cumsum(&self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).cumsum(axis)?;
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad.cumsum_rev(axis).expect("same shape"))]),
        ))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).softmax_axis(axis)?;
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |ctx| {
                let y = ctx.out;
                let gy = ctx.grad.mul(y).expect("same shape");
                let s = gy.sum_axis(axis, true).expect("axis valid");
                let centered = broadcast_zip(ctx.grad, &s, |g, s| g - s).expect("keepdim");
                vec![Some(centered.mul(y).expect("same shape"))]
            }),
        ))
    }

    // -- convolution -----------------------------------------------------------------

    pub fn conv1d_depthwise(&self, x: Var, kernel: Var) -> Result<Var> {
        let out = self.value(x).conv1d_depthwise(&self.value(kernel))?;
        let k = self.value(kernel).shape()[1];
        Ok(self.op(
            out,
            vec![x, kernel],
            Box::new(move |ctx| {
                let (x, kernel) = (&ctx.inputs[0], &ctx.inputs[1]);
                let mut grads = vec![None, None];
                if ctx.wants[0] {
                    grads[0] = Some(Tensor::conv1d_depthwise_grad_input(ctx.grad, kernel));
                }
                if ctx.wants[1] {
                    grads[1] = Some(Tensor::conv1d_depthwise_grad_kernel(ctx.grad, x, k));
                }
                grads
            }),
        ))
    }

    // -- backward ------------------------------------------------------------------

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// required them (query leaves through `Gradients::get`).
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(CoreError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), F::one()));

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(grad_fn) = node.grad_fn.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<Tensor<F>> =
                node.parents.iter().map(|p| nodes[p.0].value.clone()).collect();
            let wants: Vec<bool> = node.parents.iter().map(|p| nodes[p.0].needs_grad).collect();
            let ctx = BackwardCtx { grad: &grad, out: &node.value, inputs: &inputs, wants: &wants };
            let parent_grads = grad_fn(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match &mut grads[parent.0] {
                    Some(acc) => *acc = acc.add(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}
