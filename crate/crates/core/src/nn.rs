//! Named parameters and the small set of layers the networks are wired
//! from. Layers are stateless between calls: `forward` returns a cache that
//! the matching `backward` consumes, so one network can be applied several
//! times per training step and each application backpropagated separately.
//! Gradients accumulate into `Parameter::grad`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    conv2d, conv2d_backward, conv2d_backward_data, conv3d, conv3d_backward, conv3d_backward_data,
    downsample2x, downsample2x_backward, upsample2x, upsample2x_backward, Activation,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

/// Uniform init with variance 1/fan_in.
fn init_weight<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let limit = (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_c(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

pub struct Conv2d<S: Scalar> {
    pub w: Parameter<S>,
    pub b: Parameter<S>,
    pub stride: [usize; 2],
    pub pad: [usize; 2],
    pub act: Option<Activation>,
}

pub struct Conv2dCache<S: Scalar> {
    input: Tensor<S>,
    output: Option<Tensor<S>>, // activated output, kept when act is Some
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Option<Activation>,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init_weight(&[cout, cin, k, k], cin * k * k, rng);
        Conv2d {
            w: Parameter::new(format!("{name}.w"), w),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride: [stride, stride],
            pad: [k / 2, k / 2],
            act,
        }
    }

    /// Zero both weight and bias so the layer's output is exactly zero.
    pub fn zero_init(mut self) -> Self {
        self.w.value.fill(S::zero());
        self
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Conv2dCache<S>)> {
        let pre = conv2d(x, &self.w.value, &self.b.value, self.stride, self.pad)?;
        let (out, cached_out) = match self.act {
            Some(a) => {
                let y = a.apply(&pre);
                (y.clone(), Some(y))
            }
            None => (pre, None),
        };
        Ok((
            out,
            Conv2dCache {
                input: x.clone(),
                output: cached_out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &Conv2dCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let g_pre = match (self.act, &cache.output) {
            (Some(a), Some(y)) => a.backward(y, grad_out)?,
            _ => grad_out.clone(),
        };
        let (gx, gw, gb) =
            conv2d_backward(&cache.input, &self.w.value, &g_pre, self.stride, self.pad)?;
        self.w.grad.add_assign(&gw)?;
        self.b.grad.add_assign(&gb)?;
        Ok(gx)
    }

    /// Input gradient only; parameter gradients are not accumulated. Used
    /// when a frozen copy of the layer sits inside a larger backward pass.
    pub fn backward_data(&self, cache: &Conv2dCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let g_pre = match (self.act, &cache.output) {
            (Some(a), Some(y)) => a.backward(y, grad_out)?,
            _ => grad_out.clone(),
        };
        conv2d_backward_data(cache.input.shape(), &self.w.value, &g_pre, self.stride, self.pad)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

pub struct Conv3d<S: Scalar> {
    pub w: Parameter<S>,
    pub b: Parameter<S>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub act: Option<Activation>,
}

pub struct Conv3dCache<S: Scalar> {
    input: Tensor<S>,
    output: Option<Tensor<S>>,
}

impl<S: Scalar> Conv3d<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        stride: [usize; 3],
        act: Option<Activation>,
        rng: &mut impl Rng,
    ) -> Self {
        let w = init_weight(&[cout, cin, k[0], k[1], k[2]], cin * k[0] * k[1] * k[2], rng);
        Conv3d {
            w: Parameter::new(format!("{name}.w"), w),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
            pad: [k[0] / 2, k[1] / 2, k[2] / 2],
            act,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.w.value.fill(S::zero());
        self
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Conv3dCache<S>)> {
        let pre = conv3d(x, &self.w.value, &self.b.value, self.stride, self.pad)?;
        let (out, cached_out) = match self.act {
            Some(a) => {
                let y = a.apply(&pre);
                (y.clone(), Some(y))
            }
            None => (pre, None),
        };
        Ok((
            out,
            Conv3dCache {
                input: x.clone(),
                output: cached_out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &Conv3dCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let g_pre = match (self.act, &cache.output) {
            (Some(a), Some(y)) => a.backward(y, grad_out)?,
            _ => grad_out.clone(),
        };
        let (gx, gw, gb) =
            conv3d_backward(&cache.input, &self.w.value, &g_pre, self.stride, self.pad)?;
        self.w.grad.add_assign(&gw)?;
        self.b.grad.add_assign(&gb)?;
        Ok(gx)
    }

    /// Input gradient only; parameter gradients are not accumulated.
    pub fn backward_data(&self, cache: &Conv3dCache<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let g_pre = match (self.act, &cache.output) {
            (Some(a), Some(y)) => a.backward(y, grad_out)?,
            _ => grad_out.clone(),
        };
        conv3d_backward_data(cache.input.shape(), &self.w.value, &g_pre, self.stride, self.pad)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Resize layers (no parameters)
// ---------------------------------------------------------------------------

/// x2 linear upsampling over the trailing `RANK` axes.
pub struct Upsample2x<const RANK: usize>;

impl<const RANK: usize> Upsample2x<RANK> {
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
        Ok((upsample2x(x, RANK)?, x.shape().to_vec()))
    }

    pub fn backward<S: Scalar>(&self, in_shape: &[usize], grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        upsample2x_backward(grad_out, in_shape, RANK)
    }
}

/// x2 average-pool downsampling over the trailing `RANK` axes.
pub struct Downsample2x<const RANK: usize>;

impl<const RANK: usize> Downsample2x<RANK> {
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
        Ok((downsample2x(x, RANK)?, x.shape().to_vec()))
    }

    pub fn backward<S: Scalar>(&self, in_shape: &[usize], grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        downsample2x_backward(grad_out, in_shape, RANK)
    }
}

/// Reject NaNs before they reach the optimizer.
pub fn check_finite<S: Scalar>(t: &Tensor<S>, context: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite {
            context: context.to_string(),
        });
    }
    Ok(())
}
