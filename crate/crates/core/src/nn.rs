//! Network building blocks: naive inception blocks, convolutional stacks
//! with a dense head, perceptrons, and the upsampling decoder.
//!
//! Architectures are plain descriptions; their parameters live in a
//! [`ParamSet`] and are bound into the graph per forward pass.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ConvGeometry, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Kernel sizes of the three parallel branches of an inception block.
pub const BRANCH_KERNELS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    /// Output channels of the 1×1, 2×2 and 4×4 branches.
    pub branch_channels: [usize; 3],
    pub stride: usize,
}

impl InceptionSpec {
    pub fn new(branch_channels: [usize; 3], stride: usize) -> Result<Self> {
        let spec = InceptionSpec {
            branch_channels,
            stride,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branch_channels.contains(&0) {
            return Err(Error::config(format!(
                "inception branch channels must be >= 1, got {:?}",
                self.branch_channels
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("inception stride must be >= 1"));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.branch_channels.iter().sum()
    }

    /// Output `(height, width, channels)` for an input of `(height, width)`.
    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        (
            height.div_ceil(self.stride),
            width.div_ceil(self.stride),
            self.out_channels(),
        )
    }
}

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar> {
    pub names: Vec<String>,
    pub values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn push(&mut self, name: String, value: ArrayD<T>) {
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.values.iter().map(|v| v.shape().to_vec()).collect()
    }

    /// Graph leaves for a forward pass; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, trainable: bool) -> Vec<Var<T>> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    Var::param(v.clone())
                } else {
                    Var::constant(v.clone())
                }
            })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f64_lossy(x.to_f64_lossy())))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.values[i])
    }
}

/// Sequential reader over bound parameters, in initialization order.
pub struct Cursor<'a, T: Scalar> {
    vars: &'a [Var<T>],
    pos: usize,
}

impl<'a, T: Scalar> Cursor<'a, T> {
    pub fn new(vars: &'a [Var<T>]) -> Self {
        Cursor { vars, pos: 0 }
    }

    fn next(&mut self) -> &'a Var<T> {
        let v = self
            .vars
            .get(self.pos)
            .expect("parameter list shorter than architecture");
        self.pos += 1;
        v
    }

    pub fn finish(self) {
        debug_assert_eq!(self.pos, self.vars.len(), "unused parameters");
    }
}

fn gaussian<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        let z: f64 = rng.sample(StandardNormal);
        T::from_f64_lossy(z * std)
    })
}

fn push_affine<T: Scalar, R: Rng>(
    params: &mut ParamSet<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    params.push(format!("{prefix}/w"), gaussian(&[fan_in, fan_out], std, rng));
    params.push(format!("{prefix}/b"), ArrayD::zeros(IxDyn(&[fan_out])));
}

/// `x · W + b` for `x: [N, F]`.
pub fn dense<T: Scalar>(x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Var<T> {
    let y = x.matmul(w);
    let bias = b.broadcast_last(y.shape());
    y.add(&bias)
}

/// Square-kernel "same" convolution over an NHWC map with weights `[k·k·C_in, C_out]`.
pub fn conv2d<T: Scalar>(x: &Var<T>, w: &Var<T>, b: &Var<T>, kernel: usize, stride: usize) -> Var<T> {
    let &[n, h, wd, c] = x.shape() else {
        panic!("conv2d expects NHWC input, got {:?}", x.shape())
    };
    let geom = ConvGeometry::same(n, h, wd, c, kernel, stride);
    let cout = w.shape()[1];
    let y = dense(&x.im2col(geom), w, b);
    y.reshape(&[n, geom.out_height, geom.out_width, cout])
}

fn init_inception<T: Scalar, R: Rng>(
    params: &mut ParamSet<T>,
    prefix: &str,
    spec: &InceptionSpec,
    in_channels: usize,
    rng: &mut R,
) {
    for (k, &cout) in BRANCH_KERNELS.iter().zip(&spec.branch_channels) {
        push_affine(params, &format!("{prefix}/conv{k}x{k}"), k * k * in_channels, cout, rng);
    }
}

/// Three parallel convolutions (1×1, 2×2, 4×4) with a shared stride,
/// concatenated along channels.
pub fn inception_block<T: Scalar>(x: &Var<T>, params: &mut Cursor<'_, T>, spec: &InceptionSpec) -> Var<T> {
    let branches: Vec<Var<T>> = BRANCH_KERNELS
        .iter()
        .map(|&k| {
            let w = params.next();
            let b = params.next();
            conv2d(x, w, b, k, spec.stride)
        })
        .collect();
    Var::concat_last(&branches)
}

/// Stack of inception blocks (each followed by a leaky ReLU), flattened and
/// optionally projected by an affine head.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub input: [usize; 3],
    pub blocks: Vec<InceptionSpec>,
    pub head: Option<usize>,
    pub slope: f64,
}

impl ConvNet {
    pub fn feature_shape(&self) -> [usize; 3] {
        let [mut h, mut w, mut c] = self.input;
        for b in &self.blocks {
            (h, w, c) = b.output_shape(h, w);
        }
        [h, w, c]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_shape().iter().product()
    }

    pub fn out_dim(&self) -> usize {
        self.head.unwrap_or_else(|| self.feature_dim())
    }

    pub fn init<T: Scalar, R: Rng>(&self, prefix: &str, rng: &mut R) -> ParamSet<T> {
        let mut params = ParamSet::default();
        let mut c = self.input[2];
        for (i, b) in self.blocks.iter().enumerate() {
            init_inception(&mut params, &format!("{prefix}/block{i}"), b, c, rng);
            c = b.out_channels();
        }
        if let Some(out) = self.head {
            push_affine(&mut params, &format!("{prefix}/head"), self.feature_dim(), out, rng);
        }
        params
    }

    pub fn forward<T: Scalar>(&self, params: &[Var<T>], x: &Var<T>) -> Var<T> {
        let mut cur = Cursor::new(params);
        let slope = lit(self.slope);
        let n = x.shape()[0];
        let mut h = x.clone();
        for b in &self.blocks {
            h = inception_block(&h, &mut cur, b).leaky_relu(slope);
        }
        let mut out = h.reshape(&[n, self.feature_dim()]);
        if self.head.is_some() {
            let w = cur.next();
            let b = cur.next();
            out = dense(&out, w, b);
        }
        cur.finish();
        out
    }
}

/// Fully connected network with leaky-ReLU hidden layers and an affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub slope: f64,
}

impl Mlp {
    pub fn init<T: Scalar, R: Rng>(&self, prefix: &str, rng: &mut R) -> ParamSet<T> {
        let mut params = ParamSet::default();
        let mut fan_in = self.input;
        for (i, &h) in self.hidden.iter().enumerate() {
            push_affine(&mut params, &format!("{prefix}/fc{i}"), fan_in, h, rng);
            fan_in = h;
        }
        push_affine(&mut params, &format!("{prefix}/out"), fan_in, self.output, rng);
        params
    }

    pub fn forward<T: Scalar>(&self, params: &[Var<T>], x: &Var<T>) -> Var<T> {
        let mut cur = Cursor::new(params);
        let slope = lit(self.slope);
        let mut h = x.clone();
        for _ in &self.hidden {
            let w = cur.next();
            let b = cur.next();
            h = dense(&h, w, b).leaky_relu(slope);
        }
        let w = cur.next();
        let b = cur.next();
        cur.finish();
        dense(&h, w, b)
    }
}

/// Affine projection to a small base map, then `×2` nearest upsampling and a
/// stride-1 inception block per stage, then a 1×1 convolution to the image
/// channels and `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub input: usize,
    pub output: [usize; 3],
    pub base_channels: usize,
    pub blocks: Vec<InceptionSpec>,
    pub slope: f64,
}

impl Decoder {
    pub fn base_shape(&self) -> [usize; 3] {
        let f = 1 << self.blocks.len();
        [self.output[0] / f, self.output[1] / f, self.base_channels]
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.blocks.len();
        if !self.output[0].is_multiple_of(f) || !self.output[1].is_multiple_of(f) {
            return Err(Error::config(format!(
                "decoder with {} upsampling stages needs image sides divisible by {f}, got {}x{}",
                self.blocks.len(),
                self.output[0],
                self.output[1]
            )));
        }
        if self.blocks.iter().any(|b| b.stride != 1) {
            return Err(Error::config("decoder inception blocks must have stride 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("decoder base channels must be >= 1"));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng>(&self, prefix: &str, rng: &mut R) -> ParamSet<T> {
        let mut params = ParamSet::default();
        let base: usize = self.base_shape().iter().product();
        push_affine(&mut params, &format!("{prefix}/project"), self.input, base, rng);
        let mut c = self.base_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            init_inception(&mut params, &format!("{prefix}/block{i}"), b, c, rng);
            c = b.out_channels();
        }
        push_affine(&mut params, &format!("{prefix}/to_image"), c, self.output[2], rng);
        params
    }

    pub fn forward<T: Scalar>(&self, params: &[Var<T>], input: &Var<T>) -> Var<T> {
        let mut cur = Cursor::new(params);
        let slope = lit(self.slope);
        let n = input.shape()[0];
        let [bh, bw, bc] = self.base_shape();
        let w = cur.next();
        let b = cur.next();
        let mut h = dense(input, w, b).leaky_relu(slope).reshape(&[n, bh, bw, bc]);
        for spec in &self.blocks {
            h = inception_block(&h.upsample(2), &mut cur, spec).leaky_relu(slope);
        }
        let w = cur.next();
        let b = cur.next();
        cur.finish();
        conv2d(&h, w, b, 1, 1).tanh()
    }
}
