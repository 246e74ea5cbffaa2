use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use super::{ConvGeometry, Var};
use crate::scalar::Scalar;

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    AddScalar,
    MulConst(ArrayD<T>),
    Exp,
    Log,
    Sqrt,
    Square,
    Tanh,
    LeakyRelu(T),
    Abs,
    ClampMin(T),
    MatMul { trans_a: bool, trans_b: bool },
    Reshape,
    SumAll,
    Expand,
    SumPerSample,
    BroadcastPerSample,
    BroadcastLast,
    SumToLast,
    SumLastKeep,
    SoftmaxLast,
    Im2Col(ConvGeometry),
    Col2Im(ConvGeometry),
    Upsample(usize),
    SumPool(usize),
    ConcatLast(Vec<usize>),
    NarrowLast { start: usize },
    PadLast { start: usize },
}

pub(crate) fn standard<T: Scalar>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor")
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensor needs at least one axis")
}

fn rows_of<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let c = last_dim(a.shape());
    a.view()
        .into_shape_with_order((a.len() / c.max(1), c))
        .expect("standard layout")
}

fn samples_of<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let n = a.shape()[0];
    let rest = if n == 0 { 0 } else { a.len() / n };
    a.view().into_shape_with_order((n, rest)).expect("standard layout")
}

fn mask<T: Scalar>(a: &ArrayD<T>, f: impl Fn(T) -> T) -> ArrayD<T> {
    a.mapv(f)
}

impl<T: Scalar> Var<T> {
    fn assert_same_shape(&self, other: &Var<T>, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        self.assert_same_shape(other, "add");
        Var::from_op(self.value() + other.value(), Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        self.assert_same_shape(other, "sub");
        Var::from_op(self.value() - other.value(), Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        self.assert_same_shape(other, "mul");
        Var::from_op(self.value() * other.value(), Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn div(&self, other: &Var<T>) -> Var<T> {
        self.assert_same_shape(other, "div");
        Var::from_op(self.value() / other.value(), Op::Div, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Var<T> {
        Var::from_op(self.value().mapv(|v| -v), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: T) -> Var<T> {
        Var::from_op(self.value() * c, Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::from_op(self.value() + c, Op::AddScalar, vec![self.clone()])
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&self, m: &ArrayD<T>) -> Var<T> {
        assert_eq!(self.shape(), m.shape(), "mul_const: operand shapes differ");
        Var::from_op(self.value() * m, Op::MulConst(m.clone()), vec![self.clone()])
    }

    pub fn exp(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::ln), Op::Log, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::sqrt), Op::Sqrt, vec![self.clone()])
    }

    pub fn square(&self) -> Var<T> {
        Var::from_op(self.value().mapv(|v| v * v), Op::Square, vec![self.clone()])
    }

    pub fn tanh(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let out = self.value().mapv(|v| if v > T::zero() { v } else { v * slope });
        Var::from_op(out, Op::LeakyRelu(slope), vec![self.clone()])
    }

    pub fn abs(&self) -> Var<T> {
        Var::from_op(self.value().mapv(T::abs), Op::Abs, vec![self.clone()])
    }

    /// `max(x, lo)` elementwise; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, lo: T) -> Var<T> {
        let out = self.value().mapv(|v| if v > lo { v } else { lo });
        Var::from_op(out, Op::ClampMin(lo), vec![self.clone()])
    }

    /// `op(a) · op(b)` for 2-D tensors, where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Var<T>, trans_a: bool, trans_b: bool) -> Var<T> {
        let a = as2(self.value());
        let b = as2(other.value());
        let a = if trans_a { a.reversed_axes() } else { a };
        let b = if trans_b { b.reversed_axes() } else { b };
        assert_eq!(
            a.ncols(),
            b.nrows(),
            "matmul: inner dimensions differ ({:?} x {:?})",
            a.shape(),
            b.shape()
        );
        let out = a.dot(&b).into_dyn();
        Var::from_op(
            out,
            Op::MatMul { trans_a, trans_b },
            vec![self.clone(), other.clone()],
        )
    }

    pub fn matmul(&self, other: &Var<T>) -> Var<T> {
        self.matmul_t(other, false, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let out = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", self.shape(), shape));
        Var::from_op(out, Op::Reshape, vec![self.clone()])
    }

    pub fn sum_all(&self) -> Var<T> {
        let s = self.value().sum();
        Var::from_op(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = T::from_usize(self.len()).unwrap();
        self.sum_all().scale(T::one() / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Var<T> {
        let v = self.item();
        Var::from_op(ArrayD::from_elem(IxDyn(shape), v), Op::Expand, vec![self.clone()])
    }

    /// Sums every axis except the leading batch axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Var<T> {
        let out = samples_of(self.value()).sum_axis(Axis(1)).into_dyn();
        Var::from_op(out, Op::SumPerSample, vec![self.clone()])
    }

    /// `[N] -> shape` where `shape[0] == N`, repeating each entry.
    pub fn broadcast_per_sample(&self, shape: &[usize]) -> Var<T> {
        assert_eq!(self.shape(), &shape[..1]);
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let col = self.value().view().into_shape_with_order((n, 1)).unwrap();
        let out = col
            .broadcast((n, rest))
            .unwrap()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        Var::from_op(out, Op::BroadcastPerSample, vec![self.clone()])
    }

    /// Broadcasts a `[C]` vector along the trailing axis of `shape`.
    pub fn broadcast_last(&self, shape: &[usize]) -> Var<T> {
        assert_eq!(self.shape(), &[last_dim(shape)]);
        let out = self.value().broadcast(IxDyn(shape)).unwrap().to_owned();
        Var::from_op(out, Op::BroadcastLast, vec![self.clone()])
    }

    /// Sums everything but the trailing axis: `[..., C] -> [C]`.
    pub fn sum_to_last(&self) -> Var<T> {
        let out = rows_of(self.value()).sum_axis(Axis(0)).into_dyn();
        Var::from_op(out, Op::SumToLast, vec![self.clone()])
    }

    /// Row sums over the trailing axis, broadcast back to the input shape.
    pub fn sum_last_keep(&self) -> Var<T> {
        let rows = rows_of(self.value());
        let sums = rows.sum_axis(Axis(1)).insert_axis(Axis(1));
        let out = sums
            .broadcast(rows.raw_dim())
            .unwrap()
            .to_owned()
            .into_shape_with_order(self.value().raw_dim())
            .unwrap();
        Var::from_op(out, Op::SumLastKeep, vec![self.clone()])
    }

    pub fn softmax_last(&self) -> Var<T> {
        let mut out = self.value().clone();
        let c = last_dim(out.shape());
        for row in out.as_slice_mut().unwrap().chunks_mut(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Var::from_op(out, Op::SoftmaxLast, vec![self.clone()])
    }

    pub fn im2col(&self, geom: ConvGeometry) -> Var<T> {
        assert_eq!(self.shape(), geom.input_shape(), "im2col: input shape");
        let mut cols = ArrayD::zeros(IxDyn(&geom.cols_shape()));
        geom.im2col(self.value().as_slice().unwrap(), cols.as_slice_mut().unwrap());
        Var::from_op(cols, Op::Im2Col(geom), vec![self.clone()])
    }

    pub fn col2im(&self, geom: ConvGeometry) -> Var<T> {
        assert_eq!(self.shape(), geom.cols_shape(), "col2im: input shape");
        let mut out = ArrayD::zeros(IxDyn(&geom.input_shape()));
        geom.col2im(self.value().as_slice().unwrap(), out.as_slice_mut().unwrap());
        Var::from_op(out, Op::Col2Im(geom), vec![self.clone()])
    }

    /// Nearest-neighbour upsampling of an NHWC map by an integer factor.
    pub fn upsample(&self, factor: usize) -> Var<T> {
        let &[n, h, w, c] = self.shape() else {
            panic!("upsample expects NHWC, got {:?}", self.shape())
        };
        let mut out = ArrayD::zeros(IxDyn(&[n, h * factor, w * factor, c]));
        let src = self.value().as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        let (ho, wo) = (h * factor, w * factor);
        for b in 0..n {
            for y in 0..ho {
                for x in 0..wo {
                    let s = ((b * h + y / factor) * w + x / factor) * c;
                    let d = ((b * ho + y) * wo + x) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        Var::from_op(out, Op::Upsample(factor), vec![self.clone()])
    }

    /// Adjoint of [`Var::upsample`]: sums non-overlapping `factor × factor` windows.
    pub fn sum_pool(&self, factor: usize) -> Var<T> {
        let &[n, h, w, c] = self.shape() else {
            panic!("sum_pool expects NHWC, got {:?}", self.shape())
        };
        assert!(h % factor == 0 && w % factor == 0);
        let (ho, wo) = (h / factor, w / factor);
        let mut out = ArrayD::zeros(IxDyn(&[n, ho, wo, c]));
        let src = self.value().as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let s = ((b * h + y) * w + x) * c;
                    let d = ((b * ho + y / factor) * wo + x / factor) * c;
                    for k in 0..c {
                        dst[d + k] += src[s + k];
                    }
                }
            }
        }
        Var::from_op(out, Op::SumPool(factor), vec![self.clone()])
    }

    pub fn concat_last(parts: &[Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let axis = Axis(parts[0].shape().len() - 1);
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let out = concatenate(axis, &views).expect("concat_last: incompatible shapes");
        let lens = parts.iter().map(|p| last_dim(p.shape())).collect();
        Var::from_op(out, Op::ConcatLast(lens), parts.to_vec())
    }

    pub fn narrow_last(&self, start: usize, len: usize) -> Var<T> {
        let axis = Axis(self.shape().len() - 1);
        let out = self
            .value()
            .slice_axis(axis, ndarray::Slice::from(start..start + len))
            .to_owned();
        Var::from_op(out, Op::NarrowLast { start }, vec![self.clone()])
    }

    /// Embeds this tensor at `start` of a zero tensor whose trailing axis has `total` entries.
    pub fn pad_last(&self, start: usize, total: usize) -> Var<T> {
        let mut shape = self.shape().to_vec();
        let len = *shape.last().unwrap();
        *shape.last_mut().unwrap() = total;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        let axis = Axis(shape.len() - 1);
        out.slice_axis_mut(axis, ndarray::Slice::from(start..start + len))
            .assign(self.value());
        Var::from_op(out, Op::PadLast { start }, vec![self.clone()])
    }
}

/// Parent gradients for one node, expressed as differentiable operations.
pub(crate) fn backward<T: Scalar>(
    op: &Op<T>,
    parents: &[Var<T>],
    out: &Var<T>,
    g: &Var<T>,
    needs: &[bool],
) -> Vec<Option<Var<T>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let one = |v: Var<T>| vec![Some(v)];
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
        Op::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.neg())],
        Op::Mul => vec![
            want(0).then(|| g.mul(&parents[1])),
            want(1).then(|| g.mul(&parents[0])),
        ],
        Op::Div => vec![
            want(0).then(|| g.div(&parents[1])),
            want(1).then(|| g.mul(out).div(&parents[1]).neg()),
        ],
        Op::Neg => one(g.neg()),
        Op::Scale(c) => one(g.scale(*c)),
        Op::AddScalar => one(g.clone()),
        Op::MulConst(m) => one(g.mul_const(m)),
        Op::Exp => one(g.mul(out)),
        Op::Log => one(g.div(&parents[0])),
        Op::Sqrt => one(g.div(out).scale(T::from_f64(0.5).unwrap())),
        Op::Square => one(g.mul(&parents[0]).scale(T::from_f64(2.0).unwrap())),
        Op::Tanh => one(g.sub(&g.mul(&out.square()))),
        Op::LeakyRelu(slope) => {
            let slope = *slope;
            let m = mask(parents[0].value(), |v| if v > T::zero() { T::one() } else { slope });
            one(g.mul_const(&m))
        }
        Op::Abs => {
            let m = mask(parents[0].value(), |v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            one(g.mul_const(&m))
        }
        Op::ClampMin(lo) => {
            let lo = *lo;
            let m = mask(parents[0].value(), |v| if v > lo { T::one() } else { T::zero() });
            one(g.mul_const(&m))
        }
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (&parents[0], &parents[1]);
            let (ta, tb) = (*trans_a, *trans_b);
            let ga = want(0).then(|| {
                if ta {
                    b.matmul_t(g, tb, true)
                } else {
                    g.matmul_t(b, false, !tb)
                }
            });
            let gb = want(1).then(|| {
                if tb {
                    g.matmul_t(a, true, ta)
                } else {
                    a.matmul_t(g, !ta, false)
                }
            });
            vec![ga, gb]
        }
        Op::Reshape => one(g.reshape(parents[0].shape())),
        Op::SumAll => one(g.expand(parents[0].shape())),
        Op::Expand => one(g.sum_all().reshape(parents[0].shape())),
        Op::SumPerSample => one(g.broadcast_per_sample(parents[0].shape())),
        Op::BroadcastPerSample => one(g.sum_per_sample()),
        Op::BroadcastLast => one(g.sum_to_last()),
        Op::SumToLast => one(g.broadcast_last(parents[0].shape())),
        Op::SumLastKeep => one(g.sum_last_keep()),
        Op::SoftmaxLast => one(out.mul(&g.sub(&g.mul(out).sum_last_keep()))),
        Op::Im2Col(geom) => one(g.col2im(*geom)),
        Op::Col2Im(geom) => one(g.im2col(*geom)),
        Op::Upsample(f) => one(g.sum_pool(*f)),
        Op::SumPool(f) => one(g.upsample(*f)),
        Op::ConcatLast(lens) => {
            let mut start = 0;
            lens.iter()
                .enumerate()
                .map(|(i, &len)| {
                    let r = want(i).then(|| g.narrow_last(start, len));
                    start += len;
                    r
                })
                .collect()
        }
        Op::NarrowLast { start } => {
            let total = last_dim(parents[0].shape());
            one(g.pad_last(*start, total))
        }
        Op::PadLast { start } => {
            let len = last_dim(parents[0].shape());
            one(g.narrow_last(*start, len))
        }
    }
}
