//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D array. Batched mesh features use the
//! layout `[batch * vertices, channels]`, which is row-major identical to
//! `[batch, vertices * channels]`, so flattening is a free reshape.
//!
//! Ops that need more than elementwise algebra (Chebyshev filtering, vertex
//! pooling, spline flows) are registered through [`Tape::custom`].

use std::cell::{Ref, RefCell};

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure can see.
pub struct BackwardCtx<'a> {
    pub grad: &'a Matrix,
    pub inputs: Vec<&'a Matrix>,
    pub output: &'a Matrix,
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Matrix>>>;

struct Node {
    value: Matrix,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = backward.is_some() && parents.iter().any(|&p| nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// A leaf that never receives a gradient (data, frozen statistics).
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&self, value: Matrix) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: true,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub fn scalar_constant(&self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn to_owned(&self, v: Var) -> Matrix {
        self.value(v).clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Register an op with a hand-written backward pass.
    pub fn custom(&self, inputs: &[Var], value: Matrix, backward: BackwardFn) -> Var {
        self.push(value, inputs.iter().map(|v| v.0).collect(), Some(backward))
    }

    /// Reverse sweep from a `1x1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[output.0].value.dim(), (1, 1), "backward expects a scalar output");
        grads[output.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.dim(), nodes[p].value.dim(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep leaf gradients, drop interior ones once consumed.
            if !node.parents.is_empty() {
                grads[idx] = None;
            } else {
                grads[idx] = Some(grad);
            }
        }
        Gradients { grads }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&*self.value(b));
        self.custom(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.dot(&c.inputs[1].t()));
                let gb = c.needs[1].then(|| c.inputs[0].t().dot(c.grad));
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise `a + b`; `b` may also be a `1 x n` row (broadcast over
    /// rows), an `m x 1` column (broadcast over columns) or a `1 x 1` scalar.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) + &*self.value(b);
        self.custom(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.clone());
                let gb = c.needs[1].then(|| reduce_to(c.grad, c.inputs[1].dim()));
                vec![ga, gb]
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) - &*self.value(b);
        self.custom(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad.clone());
                let gb = c.needs[1].then(|| -reduce_to(c.grad, c.inputs[1].dim()));
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) * &*self.value(b);
        self.custom(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad * c.inputs[1]);
                let gb = c.needs[1].then(|| reduce_to(&(c.grad * c.inputs[0]), c.inputs[1].dim()));
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise quotient `a / b`; `b` broadcasts as in [`Tape::add`].
    pub fn div(&self, a: Var, b: Var) -> Var {
        let value = &*self.value(a) / &*self.value(b);
        self.custom(
            &[a, b],
            value,
            Box::new(|c| {
                let ga = c.needs[0].then(|| c.grad / c.inputs[1]);
                let gb = c.needs[1].then(|| {
                    let full = -(c.grad * c.output) / c.inputs[1];
                    reduce_to(&full, c.inputs[1].dim())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let value = &*self.value(a) * k;
        self.custom(&[a], value, Box::new(move |c| vec![Some(c.grad * k)]))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let value = &*self.value(a) + k;
        self.custom(&[a], value, Box::new(|c| vec![Some(c.grad.clone())]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    // ---- elementwise nonlinearities ---------------------------------------

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let value = self.value(a).mapv(f);
        self.custom(
            &[a],
            value,
            Box::new(move |c| {
                let mut g = c.grad.clone();
                Zip::from(&mut g)
                    .and(c.inputs[0])
                    .and(c.output)
                    .for_each(|g, &x, &y| *g *= df(x, y));
                vec![Some(g)]
            }),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }

    // ---- reductions and reshaping -----------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.custom(
            &[a],
            value,
            Box::new(|c| vec![Some(Array2::from_elem(c.inputs[0].dim(), c.grad[[0, 0]]))]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = {
            let v = self.value(a);
            v.len() as f64
        };
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over columns: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.custom(
            &[a],
            value,
            Box::new(|c| {
                let (_, n) = c.inputs[0].dim();
                let g = c.grad.broadcast((c.grad.nrows(), n)).unwrap().to_owned();
                vec![Some(g)]
            }),
        )
    }

    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.custom(
            &[a],
            value,
            Box::new(move |c| {
                let mut g = Array2::zeros(c.inputs[0].dim());
                g.slice_mut(s![.., start..end]).assign(c.grad);
                vec![Some(g)]
            }),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = views.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
        };
        self.custom(
            parts,
            value,
            Box::new(|c| {
                let mut offset = 0;
                c.inputs
                    .iter()
                    .zip(&c.needs)
                    .map(|(inp, &need)| {
                        let w = inp.ncols();
                        let g = need.then(|| c.grad.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = {
            let v = self.value(a);
            assert_eq!(v.len(), rows * cols, "reshape size mismatch");
            Array2::from_shape_vec((rows, cols), v.iter().copied().collect()).unwrap()
        };
        self.custom(
            &[a],
            value,
            Box::new(|c| {
                let shape = c.inputs[0].dim();
                let g = Array2::from_shape_vec(shape, c.grad.iter().copied().collect()).unwrap();
                vec![Some(g)]
            }),
        )
    }
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to(grad: &Matrix, shape: (usize, usize)) -> Matrix {
    if grad.dim() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    assert_eq!(g.dim(), shape, "cannot reduce broadcast gradient");
    g
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
