//! Parameterized layers built on the autograd ops.

use rand::Rng;

use crate::autograd::{Graph, Mode, Parameter, Var};
use crate::error::Result;
use crate::tensor::kernels::ConvSpec;
use crate::tensor::{Scalar, Tensor};

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    /// Visits every parameter (including non-trainable buffers) with a
    /// dotted path name. The order is stable across calls.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>));

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.trainable {
                n += p.value.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Dense 2-D convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialization; zero bias.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f64;
        Ok(Self {
            weight: Parameter::new(Tensor::randn(
                vec![cout, cin, kernel, kernel],
                (2.0 / fan_in).sqrt(),
                rng,
            )?),
            bias: if bias {
                Some(Parameter::new(Tensor::zeros(vec![cout])?))
            } else {
                None
            },
            spec,
        })
    }

    pub fn pointwise(cin: usize, cout: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        Self::new(cin, cout, 1, ConvSpec::default(), bias, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dims()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Per-channel batch normalization with running statistics
/// (momentum 0.1, epsilon 1e-5 by default).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Parameter<T>,
    pub running_var: Parameter<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Parameter::new(Tensor::ones(vec![channels])?),
            beta: Parameter::new(Tensor::zeros(vec![channels])?),
            running_mean: Parameter::buffer(Tensor::zeros(vec![channels])?),
            running_var: Parameter::buffer(Tensor::ones(vec![channels])?),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let (y, stats) = g.batch_norm(
            x,
            gamma,
            beta,
            &self.running_mean.value,
            &self.running_var.value,
            T::from_f64_lossy(self.eps),
            mode,
        )?;
        if let Some(stats) = stats {
            let m = T::from_f64_lossy(self.momentum);
            let keep = T::one() - m;
            let fold = |running: &mut Parameter<T>, batch: &[T]| {
                running
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(batch)
                    .for_each(|(r, &b)| *r = keep * *r + m * b);
            };
            fold(&mut self.running_mean, &stats.mean);
            fold(&mut self.running_var, &stats.var);
        }
        Ok(y)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// `y = x W (+ b)` for `x: B x in`, `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: Parameter::new(Tensor::randn(
                vec![input, output],
                (2.0 / input as f64).sqrt(),
                rng,
            )?),
            bias: if bias {
                Some(Parameter::new(Tensor::zeros(vec![output])?))
            } else {
                None
            },
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Convolution, batch normalization, ReLU. With `norm` off the block is
/// convolution (with bias) and ReLU.
#[derive(Debug, Clone)]
pub struct Cbr<T: Scalar> {
    pub conv: Conv2d<T>,
    pub norm: Option<BatchNorm2d<T>>,
}

impl<T: Scalar> Cbr<T> {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(cin, cout, kernel, spec, !norm, rng)?,
            norm: if norm {
                Some(BatchNorm2d::new(cout)?)
            } else {
                None
            },
        })
    }

    pub fn pointwise(cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(cin, cout, 1, ConvSpec::default(), true, rng)
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = match self.norm.as_mut() {
            Some(bn) => bn.forward(g, y, mode)?,
            None => y,
        };
        g.relu(y)
    }
}

impl<T: Scalar> Module<T> for Cbr<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        if let Some(bn) = self.norm.as_mut() {
            bn.visit_params(&join(prefix, "bn"), f);
        }
    }
}
