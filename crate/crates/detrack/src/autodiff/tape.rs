//! Reverse-mode differentiation over dense f64 arrays.
//!
//! A `Tape` records every operation of one forward pass; `Var` is a cheap
//! handle into it. Calling [`Var::backward`] on a scalar output accumulates
//! gradients additively into every reachable node that requires them, then the
//! tape can simply be dropped. A tape is confined to one execution context;
//! independent tapes may run concurrently.
//!
//! The tape also counts multiply-accumulate operations for the matmul-like ops
//! (`matmul`, `weighted_block_sum`); elementwise math, normalization, softmax
//! and interpolation are excluded by convention. This counter is the
//! instrumented-execution oracle for the analytic cost model.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::optim::Parameter;
use crate::tensor::Tensor;

enum Op {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterRows(usize, Rc<Vec<usize>>),
    SliceCols(usize, usize, usize),
    Softmax(usize, Option<Rc<Vec<bool>>>),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Abs(usize),
    Powf(usize, f64),
    Clamp(usize, f64, f64),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    MaskedFill { x: usize, mask: Rc<Vec<bool>> },
    Sum(usize),
    Mean(usize),
    BilinearSample { map: usize, points: usize, height: usize, width: usize },
    WeightedBlockSum { values: usize, weights: usize },
}

struct TapeInner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    macs: u64,
    param_nodes: HashMap<u64, usize>,
}

/// Recording tape for one forward/backward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                ops: Vec::new(),
                requires: Vec::new(),
                grads: Vec::new(),
                macs: 0,
                param_nodes: HashMap::new(),
            })),
        }
    }

    fn push(&self, value: Tensor, op: Op, requires: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        inner.ops.push(op);
        inner.requires.push(requires);
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id: inner.values.len() - 1,
        }
    }

    /// Insert a value that does not need gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Insert a differentiable leaf (gradient input).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a parameter to this tape; repeated calls for the same parameter
    /// return the same node so gradients from every use accumulate together.
    pub fn param(&self, p: &Parameter) -> Var {
        let existing = self.inner.borrow().param_nodes.get(&p.id()).copied();
        if let Some(id) = existing {
            return Var {
                tape: self.clone(),
                id,
            };
        }
        let var = self.push(p.value.clone(), Op::Leaf, true);
        self.inner.borrow_mut().param_nodes.insert(p.id(), var.id);
        var
    }

    /// Gradient accumulated for a bound parameter after a backward pass.
    pub fn grad_of(&self, p: &Parameter) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let id = *inner.param_nodes.get(&p.id())?;
        inner.grads[id].clone()
    }

    /// Multiply-accumulate count of everything recorded so far.
    pub fn macs(&self) -> u64 {
        self.inner.borrow().macs
    }

    pub fn n_nodes(&self) -> usize {
        self.inner.borrow().values.len()
    }
}

/// Handle to one array on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

fn same_tape(a: &Var, b: &Var) {
    assert!(
        Rc::ptr_eq(&a.tape.inner, &b.tape.inner),
        "operands live on different tapes"
    );
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    /// Read the value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.id])
    }

    /// Scalar value of a one-element array.
    pub fn item(&self) -> f64 {
        self.with_value(|t| {
            assert!(t.numel() == 1, "item() on shape {:?}", t.shape());
            t.data()[0]
        })
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().requires[self.id]
    }

    fn un(&self, value: Tensor, op: Op) -> Var {
        let req = self.requires_grad();
        self.tape.push(value, op, req)
    }

    fn bin(&self, other: &Var, value: Tensor, op: Op) -> Var {
        same_tape(self, other);
        let req = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, req)
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.with_value(|a| other.with_value(|b| a.add(b)));
        self.bin(other, v, Op::Add(self.id, other.id))
    }

    /// Add a 1-d bias to every row of a 2-d matrix.
    pub fn add_bias(&self, bias: &Var) -> Var {
        same_tape(self, bias);
        let v = self.with_value(|a| {
            bias.with_value(|b| {
                assert!(
                    a.shape().len() == 2 && b.shape().len() == 1 && a.cols() == b.numel(),
                    "add_bias shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                let mut out = a.clone();
                let cols = a.cols();
                for r in 0..a.rows() {
                    for c in 0..cols {
                        out.data_mut()[r * cols + c] += b.data()[c];
                    }
                }
                out
            })
        });
        self.bin(bias, v, Op::AddBias(self.id, bias.id))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.with_value(|a| {
            other.with_value(|b| {
                assert!(
                    a.shape() == b.shape(),
                    "sub shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                Tensor::new(
                    a.shape(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
                )
            })
        });
        self.bin(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.with_value(|a| {
            other.with_value(|b| {
                assert!(
                    a.shape() == b.shape(),
                    "mul shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                Tensor::new(
                    a.shape(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                )
            })
        });
        self.bin(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var) -> Var {
        let v = self.with_value(|a| {
            other.with_value(|b| {
                assert!(
                    a.shape() == b.shape(),
                    "div shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                Tensor::new(
                    a.shape(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect(),
                )
            })
        });
        self.bin(other, v, Op::Div(self.id, other.id))
    }

    /// Elementwise max; gradient routes to the larger operand (ties to self).
    pub fn maximum(&self, other: &Var) -> Var {
        let v = self.with_value(|a| {
            other.with_value(|b| {
                assert!(
                    a.shape() == b.shape(),
                    "maximum shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                Tensor::new(
                    a.shape(),
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| x.max(*y))
                        .collect(),
                )
            })
        });
        self.bin(other, v, Op::Maximum(self.id, other.id))
    }

    pub fn minimum(&self, other: &Var) -> Var {
        let v = self.with_value(|a| {
            other.with_value(|b| {
                assert!(
                    a.shape() == b.shape(),
                    "minimum shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                );
                Tensor::new(
                    a.shape(),
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| x.min(*y))
                        .collect(),
                )
            })
        });
        self.bin(other, v, Op::Minimum(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.with_value(|a| a.scale(c));
        self.un(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let v = self.with_value(|a| a.map(|x| x + c));
        self.un(v, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn matmul(&self, other: &Var) -> Var {
        same_tape(self, other);
        let v = self.with_value(|a| other.with_value(|b| a.matmul(b)));
        let macs = {
            let (n, k) = (v.rows() as u64, self.shape()[1] as u64);
            n * k * v.cols() as u64
        };
        self.tape.inner.borrow_mut().macs += macs;
        self.bin(other, v, Op::Matmul(self.id, other.id))
    }

    pub fn t(&self) -> Var {
        let v = self.with_value(|a| a.transpose());
        self.un(v, Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self.with_value(|a| a.reshaped(shape));
        self.un(v, Op::Reshape(self.id))
    }

    pub fn concat_rows(vars: &[&Var]) -> Var {
        assert!(!vars.is_empty(), "concat_rows of nothing");
        let first = vars[0];
        let cols = first.shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for v in vars {
            same_tape(first, v);
            v.with_value(|t| {
                assert!(
                    t.shape().len() == 2 && t.cols() == cols,
                    "concat_rows column mismatch: {:?} vs {} cols",
                    t.shape(),
                    cols
                );
                rows += t.rows();
                data.extend_from_slice(t.data());
            });
        }
        let req = vars.iter().any(|v| v.requires_grad());
        first.tape.push(
            Tensor::new(&[rows, cols], data),
            Op::ConcatRows(vars.iter().map(|v| v.id).collect()),
            req,
        )
    }

    pub fn concat_cols(vars: &[&Var]) -> Var {
        assert!(!vars.is_empty(), "concat_cols of nothing");
        let first = vars[0];
        let rows = first.shape()[0];
        let total_cols: usize = vars.iter().map(|v| v.shape()[1]).sum();
        let mut data = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for v in vars {
            same_tape(first, v);
            v.with_value(|t| {
                assert!(
                    t.shape().len() == 2 && t.rows() == rows,
                    "concat_cols row mismatch: {:?} vs {} rows",
                    t.shape(),
                    rows
                );
                let c = t.cols();
                for r in 0..rows {
                    data[r * total_cols + col_off..r * total_cols + col_off + c]
                        .copy_from_slice(t.row(r));
                }
                col_off += c;
            });
        }
        let req = vars.iter().any(|v| v.requires_grad());
        first.tape.push(
            Tensor::new(&[rows, total_cols], data),
            Op::ConcatCols(vars.iter().map(|v| v.id).collect()),
            req,
        )
    }

    /// Select rows by index; duplicate indices are allowed and their gradients
    /// accumulate.
    pub fn gather_rows(&self, idx: &[usize]) -> Var {
        let v = self.with_value(|t| {
            let cols = t.cols();
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                assert!(i < t.rows(), "gather_rows index {} out of {} rows", i, t.rows());
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(&[idx.len(), cols], data)
        });
        self.un(v, Op::GatherRows(self.id, Rc::new(idx.to_vec())))
    }

    /// Place row `i` of self at row `idx[i]` of a zero matrix with `n_out` rows.
    pub fn scatter_rows(&self, idx: &[usize], n_out: usize) -> Var {
        let v = self.with_value(|t| {
            assert!(
                idx.len() == t.rows(),
                "scatter_rows needs one target per row: {} vs {}",
                idx.len(),
                t.rows()
            );
            let cols = t.cols();
            let mut out = Tensor::zeros(&[n_out, cols]);
            for (r, &i) in idx.iter().enumerate() {
                assert!(i < n_out, "scatter_rows target {} out of {}", i, n_out);
                out.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(t.row(r));
            }
            out
        });
        self.un(v, Op::ScatterRows(self.id, Rc::new(idx.to_vec())))
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Var {
        let v = self.with_value(|t| {
            assert!(
                c0 < c1 && c1 <= t.cols(),
                "slice_cols {}..{} out of {:?}",
                c0,
                c1,
                t.shape()
            );
            let mut data = Vec::with_capacity(t.rows() * (c1 - c0));
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row(r)[c0..c1]);
            }
            Tensor::new(&[t.rows(), c1 - c0], data)
        });
        self.un(v, Op::SliceCols(self.id, c0, c1))
    }

    /// Softmax along the last axis of a 2-d array. Masked (blocked) entries get
    /// exactly zero weight; a fully blocked row yields an all-zero row.
    pub fn softmax_last(&self, blocked: Option<&[bool]>) -> Var {
        let mask = blocked.map(|m| Rc::new(m.to_vec()));
        let v = self.with_value(|t| {
            assert!(t.shape().len() == 2, "softmax_last needs 2-d, got {:?}", t.shape());
            if let Some(m) = &mask {
                assert!(
                    m.len() == t.numel(),
                    "softmax mask length {} vs {} entries",
                    m.len(),
                    t.numel()
                );
            }
            let (n, d) = (t.rows(), t.cols());
            let mut out = Tensor::zeros(&[n, d]);
            for r in 0..n {
                let row = t.row(r);
                let allowed = |c: usize| mask.as_ref().map_or(true, |m| !m[r * d + c]);
                let mut mx = f64::NEG_INFINITY;
                for c in 0..d {
                    if allowed(c) {
                        mx = mx.max(row[c]);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue; // fully blocked row stays zero
                }
                let mut sum = 0.0;
                let mut exps = vec![0.0; d];
                for c in 0..d {
                    if allowed(c) {
                        exps[c] = (row[c] - mx).exp();
                        sum += exps[c];
                    }
                }
                for c in 0..d {
                    out.data_mut()[r * d + c] = exps[c] / sum;
                }
            }
            out
        });
        self.un(v, Op::Softmax(self.id, mask))
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.with_value(|t| t.map(|x| 1.0 / (1.0 + (-x).exp())));
        self.un(v, Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var {
        let v = self.with_value(|t| t.map(f64::exp));
        self.un(v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var {
        let v = self.with_value(|t| t.map(f64::ln));
        self.un(v, Op::Log(self.id))
    }

    pub fn relu(&self) -> Var {
        let v = self.with_value(|t| t.map(|x| x.max(0.0)));
        self.un(v, Op::Relu(self.id))
    }

    pub fn gelu(&self) -> Var {
        let v = self.with_value(|t| t.map(gelu_fwd));
        self.un(v, Op::Gelu(self.id))
    }

    pub fn abs(&self) -> Var {
        let v = self.with_value(|t| t.map(f64::abs));
        self.un(v, Op::Abs(self.id))
    }

    /// Elementwise power; intended for non-negative bases.
    pub fn powf(&self, p: f64) -> Var {
        let v = self.with_value(|t| t.map(|x| x.powf(p)));
        self.un(v, Op::Powf(self.id, p))
    }

    /// Elementwise clamp with zero gradient outside the open interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let v = self.with_value(|t| t.map(|x| x.clamp(lo, hi)));
        self.un(v, Op::Clamp(self.id, lo, hi))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        same_tape(self, gamma);
        same_tape(self, beta);
        let v = self.with_value(|x| {
            gamma.with_value(|g| {
                beta.with_value(|b| {
                    assert!(
                        x.shape().len() == 2
                            && g.numel() == x.cols()
                            && b.numel() == x.cols(),
                        "layer_norm shape mismatch: x {:?}, gamma {:?}, beta {:?}",
                        x.shape(),
                        g.shape(),
                        b.shape()
                    );
                    let (n, d) = (x.rows(), x.cols());
                    let mut out = Tensor::zeros(&[n, d]);
                    for r in 0..n {
                        let row = x.row(r);
                        let mu = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for c in 0..d {
                            out.data_mut()[r * d + c] =
                                (row[c] - mu) * inv * g.data()[c] + b.data()[c];
                        }
                    }
                    out
                })
            })
        });
        let req = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            req,
        )
    }

    /// Replace masked entries with a constant; their gradient is exactly zero.
    pub fn masked_fill(&self, mask: &[bool], fill: f64) -> Var {
        let v = self.with_value(|t| {
            assert!(
                mask.len() == t.numel(),
                "masked_fill mask length {} vs {} entries",
                mask.len(),
                t.numel()
            );
            let mut out = t.clone();
            for (x, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
                if m {
                    *x = fill;
                }
            }
            out
        });
        self.un(
            v,
            Op::MaskedFill {
                x: self.id,
                mask: Rc::new(mask.to_vec()),
            },
        )
    }

    pub fn sum(&self) -> Var {
        let v = self.with_value(|t| Tensor::scalar(t.sum()));
        self.un(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var {
        let v = self.with_value(|t| Tensor::scalar(t.sum() / t.numel() as f64));
        self.un(v, Op::Mean(self.id))
    }

    /// Bilinear sampling of a `[H*W, C]` map at continuous grid coordinates.
    ///
    /// `points` is `[P, 2]` with columns `(x, y)` where node `(r, c)` sits at
    /// `(c, r)`. Out-of-bounds neighborhoods read zeros, so the function is
    /// total and its value linear in the map. Differentiable in both the map
    /// values and the coordinates.
    pub fn bilinear_sample(&self, points: &Var, height: usize, width: usize) -> Var {
        same_tape(self, points);
        let v = self.with_value(|map| {
            points.with_value(|pts| {
                assert!(
                    map.shape().len() == 2 && map.rows() == height * width,
                    "bilinear map shape {:?} vs grid {}x{}",
                    map.shape(),
                    height,
                    width
                );
                assert!(
                    pts.shape().len() == 2 && pts.cols() == 2,
                    "bilinear points shape {:?}",
                    pts.shape()
                );
                let c = map.cols();
                let mut out = Tensor::zeros(&[pts.rows(), c]);
                for p in 0..pts.rows() {
                    let gx = pts.at2(p, 0);
                    let gy = pts.at2(p, 1);
                    let orow = &mut out.data_mut()[p * c..(p + 1) * c];
                    for (dx, dy, wgt) in corner_weights(gx, gy) {
                        if wgt == 0.0 {
                            continue;
                        }
                        if let Some(node) = grid_index(dx, dy, height, width) {
                            for (o, &m) in orow.iter_mut().zip(map.row(node)) {
                                *o += wgt * m;
                            }
                        }
                    }
                }
                out
            })
        });
        let req = self.requires_grad() || points.requires_grad();
        self.tape.push(
            v,
            Op::BilinearSample {
                map: self.id,
                points: points.id,
                height,
                width,
            },
            req,
        )
    }

    /// Weighted sum of row blocks: `values` is `[K_pts*Q, C]` laid out as
    /// `K_pts` consecutive blocks of `Q` rows, `weights` is `[Q, K_pts]`, and
    /// `out[q] = sum_k weights[q, k] * values[k*Q + q]`. Counts `Q*K_pts*C`
    /// multiply-accumulates.
    pub fn weighted_block_sum(values: &Var, weights: &Var) -> Var {
        same_tape(values, weights);
        let v = values.with_value(|vals| {
            weights.with_value(|w| {
                let (q, k_pts) = (w.rows(), w.cols());
                assert!(
                    vals.rows() == q * k_pts,
                    "weighted_block_sum: values {:?} vs weights {:?}",
                    vals.shape(),
                    w.shape()
                );
                let c = vals.cols();
                let mut out = Tensor::zeros(&[q, c]);
                for qq in 0..q {
                    let orow = &mut out.data_mut()[qq * c..(qq + 1) * c];
                    for k in 0..k_pts {
                        let wgt = w.at2(qq, k);
                        let vrow = vals.row(k * q + qq);
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += wgt * x;
                        }
                    }
                }
                out
            })
        });
        let macs = {
            let w = weights.shape();
            (w[0] * w[1] * values.shape()[1]) as u64
        };
        values.tape.inner.borrow_mut().macs += macs;
        let req = values.requires_grad() || weights.requires_grad();
        values.tape.push(
            v,
            Op::WeightedBlockSum {
                values: values.id,
                weights: weights.id,
            },
            req,
        )
    }

    /// Backward pass from a scalar output.
    pub fn backward(&self) {
        let inner = &mut *self.tape.inner.borrow_mut();
        assert!(
            inner.values[self.id].numel() == 1,
            "backward from non-scalar shape {:?}",
            inner.values[self.id].shape()
        );
        inner.grads[self.id] = Some(Tensor::scalar(1.0));
        for i in (0..=self.id).rev() {
            if !inner.requires[i] || inner.grads[i].is_none() {
                continue;
            }
            let g = inner.grads[i].clone().unwrap();
            backward_op(&inner.ops[i], i, &g, &inner.values, &inner.requires, &mut inner.grads);
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn corner_weights(gx: f64, gy: f64) -> [(i64, i64, f64); 4] {
    let x0 = gx.floor();
    let y0 = gy.floor();
    let wx = gx - x0;
    let wy = gy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    [
        (x0, y0, (1.0 - wx) * (1.0 - wy)),
        (x0 + 1, y0, wx * (1.0 - wy)),
        (x0, y0 + 1, (1.0 - wx) * wy),
        (x0 + 1, y0 + 1, wx * wy),
    ]
}

fn grid_index(x: i64, y: i64, height: usize, width: usize) -> Option<usize> {
    if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
        None
    } else {
        Some(y as usize * width + x as usize)
    }
}

fn acc(grads: &mut [Option<Tensor>], requires: &[bool], id: usize, delta: Tensor) {
    if !requires[id] {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn backward_op(
    op: &Op,
    node: usize,
    g: &Tensor,
    values: &[Tensor],
    requires: &[bool],
    grads: &mut [Option<Tensor>],
) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, requires, *a, g.clone());
            acc(grads, requires, *b, g.clone());
        }
        Op::AddBias(a, b) => {
            acc(grads, requires, *a, g.clone());
            if requires[*b] {
                let cols = g.cols();
                let mut gb = Tensor::zeros(&[cols]);
                for r in 0..g.rows() {
                    for c in 0..cols {
                        gb.data_mut()[c] += g.at2(r, c);
                    }
                }
                acc(grads, requires, *b, gb);
            }
        }
        Op::Sub(a, b) => {
            acc(grads, requires, *a, g.clone());
            acc(grads, requires, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if requires[*a] {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(values[*b].data())
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
            if requires[*b] {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(values[*a].data())
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                acc(grads, requires, *b, d);
            }
        }
        Op::Div(a, b) => {
            if requires[*a] {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(values[*b].data())
                        .map(|(x, y)| x / y)
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
            if requires[*b] {
                let av = &values[*a];
                let bv = &values[*b];
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(gg, (x, y))| -gg * x / (y * y))
                        .collect(),
                );
                acc(grads, requires, *b, d);
            }
        }
        Op::Maximum(a, b) => {
            let av = &values[*a];
            let bv = &values[*b];
            if requires[*a] {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(gg, (x, y))| if x >= y { *gg } else { 0.0 })
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
            if requires[*b] {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(gg, (x, y))| if x >= y { 0.0 } else { *gg })
                        .collect(),
                );
                acc(grads, requires, *b, d);
            }
        }
        Op::Minimum(a, b) => {
            let av = &values[*a];
            let bv = &values[*b];
            if requires[*a] {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(gg, (x, y))| if x <= y { *gg } else { 0.0 })
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
            if requires[*b] {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(gg, (x, y))| if x <= y { 0.0 } else { *gg })
                        .collect(),
                );
                acc(grads, requires, *b, d);
            }
        }
        Op::Scale(a, c) => acc(grads, requires, *a, g.scale(*c)),
        Op::AddScalar(a) => acc(grads, requires, *a, g.clone()),
        Op::Matmul(a, b) => {
            if requires[*a] {
                acc(grads, requires, *a, g.matmul(&values[*b].transpose()));
            }
            if requires[*b] {
                acc(grads, requires, *b, values[*a].transpose().matmul(g));
            }
        }
        Op::Transpose(a) => acc(grads, requires, *a, g.transpose()),
        Op::Reshape(a) => acc(grads, requires, *a, g.reshaped(values[*a].shape())),
        Op::ConcatRows(parts) => {
            let cols = g.cols();
            let mut row = 0;
            for &p in parts {
                let rows = values[p].rows();
                if requires[p] {
                    let d = Tensor::new(
                        &[rows, cols],
                        g.data()[row * cols..(row + rows) * cols].to_vec(),
                    );
                    acc(grads, requires, p, d);
                }
                row += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let mut col = 0;
            for &p in parts {
                let c = values[p].cols();
                if requires[p] {
                    let mut d = Tensor::zeros(&[rows, c]);
                    for r in 0..rows {
                        d.data_mut()[r * c..(r + 1) * c]
                            .copy_from_slice(&g.row(r)[col..col + c]);
                    }
                    acc(grads, requires, p, d);
                }
                col += c;
            }
        }
        Op::GatherRows(a, idx) => {
            if requires[*a] {
                let cols = g.cols();
                let mut d = Tensor::zeros(&[values[*a].rows(), cols]);
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        d.data_mut()[i * cols + c] += g.at2(r, c);
                    }
                }
                acc(grads, requires, *a, d);
            }
        }
        Op::ScatterRows(a, idx) => {
            if requires[*a] {
                let cols = g.cols();
                let mut d = Tensor::zeros(&[idx.len(), cols]);
                for (r, &i) in idx.iter().enumerate() {
                    d.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.row(i));
                }
                acc(grads, requires, *a, d);
            }
        }
        Op::SliceCols(a, c0, _c1) => {
            if requires[*a] {
                let full_cols = values[*a].cols();
                let mut d = Tensor::zeros(&[g.rows(), full_cols]);
                for r in 0..g.rows() {
                    let w = g.cols();
                    d.data_mut()[r * full_cols + c0..r * full_cols + c0 + w]
                        .copy_from_slice(g.row(r));
                }
                acc(grads, requires, *a, d);
            }
        }
        Op::Softmax(a, _mask) => {
            if requires[*a] {
                // Masked outputs are exactly zero, which also zeroes their
                // gradient through s * (g - <g, s>).
                let s = &values[node];
                let (n, d) = (s.rows(), s.cols());
                let mut gx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    let srow = s.row(r);
                    let grow = g.row(r);
                    let dot: f64 = srow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    for c in 0..d {
                        gx.data_mut()[r * d + c] = srow[c] * (grow[c] - dot);
                    }
                }
                acc(grads, requires, *a, gx);
            }
        }
        Op::Sigmoid(a) => {
            if requires[*a] {
                let s = &values[node];
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(s.data())
                        .map(|(gg, y)| gg * y * (1.0 - y))
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
        }
        Op::Exp(a) => {
            if requires[*a] {
                let y = &values[node];
                let d = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(y.data()).map(|(gg, y)| gg * y).collect(),
                );
                acc(grads, requires, *a, d);
            }
        }
        Op::Log(a) => {
            if requires[*a] {
                let x = &values[*a];
                let d = Tensor::new(
                    g.shape(),
                    g.data().iter().zip(x.data()).map(|(gg, x)| gg / x).collect(),
                );
                acc(grads, requires, *a, d);
            }
        }
        Op::Relu(a) => {
            if requires[*a] {
                let x = &values[*a];
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gg, x)| if *x > 0.0 { *gg } else { 0.0 })
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
        }
        Op::Gelu(a) => {
            if requires[*a] {
                let x = &values[*a];
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gg, x)| gg * gelu_grad(*x))
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
        }
        Op::Abs(a) => {
            if requires[*a] {
                let x = &values[*a];
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gg, x)| gg * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
        }
        Op::Powf(a, p) => {
            if requires[*a] {
                let x = &values[*a];
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gg, x)| gg * p * x.powf(p - 1.0))
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
        }
        Op::Clamp(a, lo, hi) => {
            if requires[*a] {
                let x = &values[*a];
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gg, x)| if *x > *lo && *x < *hi { *gg } else { 0.0 })
                        .collect(),
                );
                acc(grads, requires, *a, d);
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = &values[*x];
            let gv = &values[*gamma];
            let (n, d) = (xv.rows(), xv.cols());
            let mut gx = Tensor::zeros(&[n, d]);
            let mut ggamma = Tensor::zeros(&[d]);
            let mut gbeta = Tensor::zeros(&[d]);
            for r in 0..n {
                let row = xv.row(r);
                let grow = g.row(r);
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mu) * inv).collect();
                let dvec: Vec<f64> = grow
                    .iter()
                    .zip(gv.data())
                    .map(|(gg, gam)| gg * gam)
                    .collect();
                let mean_d = dvec.iter().sum::<f64>() / d as f64;
                let mean_dx = dvec
                    .iter()
                    .zip(xhat.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / d as f64;
                for c in 0..d {
                    gx.data_mut()[r * d + c] = (dvec[c] - mean_d - xhat[c] * mean_dx) * inv;
                    ggamma.data_mut()[c] += grow[c] * xhat[c];
                    gbeta.data_mut()[c] += grow[c];
                }
            }
            acc(grads, requires, *x, gx);
            acc(grads, requires, *gamma, ggamma);
            acc(grads, requires, *beta, gbeta);
        }
        Op::MaskedFill { x, mask } => {
            if requires[*x] {
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(gg, m)| if *m { 0.0 } else { *gg })
                        .collect(),
                );
                acc(grads, requires, *x, d);
            }
        }
        Op::Sum(a) => {
            if requires[*a] {
                acc(grads, requires, *a, Tensor::full(values[*a].shape(), g.data()[0]));
            }
        }
        Op::Mean(a) => {
            if requires[*a] {
                let n = values[*a].numel() as f64;
                acc(grads, requires, *a, Tensor::full(values[*a].shape(), g.data()[0] / n));
            }
        }
        Op::BilinearSample { map, points, height, width } => {
            let mv = &values[*map];
            let pv = &values[*points];
            let c = mv.cols();
            let need_map = requires[*map];
            let need_pts = requires[*points];
            let mut gmap = Tensor::zeros(mv.shape());
            let mut gpts = Tensor::zeros(pv.shape());
            for p in 0..pv.rows() {
                let gx = pv.at2(p, 0);
                let gy = pv.at2(p, 1);
                let grow = g.row(p);
                let x0 = gx.floor();
                let y0 = gy.floor();
                let wx = gx - x0;
                let wy = gy - y0;
                let (x0i, y0i) = (x0 as i64, y0 as i64);
                // value, x-derivative factor, y-derivative factor per corner
                let corners = [
                    (x0i, y0i, (1.0 - wx) * (1.0 - wy), -(1.0 - wy), -(1.0 - wx)),
                    (x0i + 1, y0i, wx * (1.0 - wy), 1.0 - wy, -wx),
                    (x0i, y0i + 1, (1.0 - wx) * wy, -wy, 1.0 - wx),
                    (x0i + 1, y0i + 1, wx * wy, wy, wx),
                ];
                let (mut dx, mut dy) = (0.0, 0.0);
                for (cx, cy, w, dwx, dwy) in corners {
                    if let Some(node_idx) = grid_index(cx, cy, *height, *width) {
                        let vrow = mv.row(node_idx);
                        if need_map {
                            for (gm, &gg) in gmap.data_mut()
                                [node_idx * c..(node_idx + 1) * c]
                                .iter_mut()
                                .zip(grow)
                            {
                                *gm += w * gg;
                            }
                        }
                        if need_pts {
                            let dot: f64 = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            dx += dwx * dot;
                            dy += dwy * dot;
                        }
                    }
                }
                if need_pts {
                    gpts.data_mut()[p * 2] = dx;
                    gpts.data_mut()[p * 2 + 1] = dy;
                }
            }
            if need_map {
                acc(grads, requires, *map, gmap);
            }
            if need_pts {
                acc(grads, requires, *points, gpts);
            }
        }
        Op::WeightedBlockSum { values: vals_id, weights } => {
            let vals = &values[*vals_id];
            let w = &values[*weights];
            let (q, k_pts) = (w.rows(), w.cols());
            let c = vals.cols();
            if requires[*vals_id] {
                let mut gv = Tensor::zeros(vals.shape());
                for qq in 0..q {
                    let grow = g.row(qq);
                    for k in 0..k_pts {
                        let wgt = w.at2(qq, k);
                        let dst = &mut gv.data_mut()[(k * q + qq) * c..(k * q + qq + 1) * c];
                        for (d, &gg) in dst.iter_mut().zip(grow) {
                            *d += wgt * gg;
                        }
                    }
                }
                acc(grads, requires, *vals_id, gv);
            }
            if requires[*weights] {
                let mut gw = Tensor::zeros(w.shape());
                for qq in 0..q {
                    let grow = g.row(qq);
                    for k in 0..k_pts {
                        let vrow = vals.row(k * q + qq);
                        gw.data_mut()[qq * k_pts + k] =
                            grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    }
                }
                acc(grads, requires, *weights, gw);
            }
        }
    }
}
