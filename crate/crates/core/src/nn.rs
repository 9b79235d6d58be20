//! Parameter containers and the small layer set shared by the blocks.
//!
//! Every parameter is drawn from its own RNG stream, seeded by the model
//! seed and the parameter's full dotted path. Two configurations that
//! share a parameter path therefore share its initial value, which is
//! what makes ablation variants directly comparable.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Anything that owns named parameters.
pub trait Module<T: Element> {
    /// Appends `(path, parameter)` pairs in a fixed order.
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named_params(&mut self) -> Vec<(String, &mut Tensor<T>)>
    where
        Self: Sized,
    {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn param_count(&mut self) -> usize
    where
        Self: Sized,
    {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        if let Some(m) = self {
            m.visit(prefix, out);
        }
    }
}

/// FNV-1a, used only to derive per-parameter seeds.
fn fnv1a(seed: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().iter().chain(text.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Initialization context: a model seed plus the current path.
#[derive(Clone, Debug)]
pub struct Init {
    seed: u64,
    path: String,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed, path: String::new() }
    }

    pub fn child(&self, name: &str) -> Init {
        Init { seed: self.seed, path: join(&self.path, name) }
    }

    /// RNG stream for the parameter `name` under this path.
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(fnv1a(self.seed, &join(&self.path, name)))
    }

    pub fn uniform<T: Element>(&self, name: &str, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let values = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut rng = self.rng(name);
            (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
        } else {
            vec![T::zero(); n]
        };
        Tensor::param(shape, values).expect("shape matches generated data")
    }

    pub fn constant<T: Element>(&self, shape: &[usize], value: f64) -> Tensor<T> {
        Tensor::full(shape, T::of(value)).requires_grad_(true)
    }
}

/// Weight multiplied by `factor`, bias zeroed: for the last layer of a
/// residual branch, so a deep stack starts close to the identity.
fn shrink<T: Element>(weight: &Tensor<T>, bias: &mut Option<Tensor<T>>, factor: f64) -> Tensor<T> {
    if let Some(b) = bias {
        *b = Tensor::zeros(b.shape()).requires_grad_(true);
    }
    let data = weight.data().iter().map(|&w| T::of(w.f64() * factor)).collect();
    Tensor::param(weight.shape(), data).expect("same shape")
}

/// Convolution layer with `±1/√fan_in` uniform initialization.
pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new(init: &Init, cin: usize, cout: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        let fan_in = cin / groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: init.uniform("weight", &[cout, cin / groups, kernel, kernel], bound),
            bias: Some(init.uniform("bias", &[cout], bound)),
            stride,
            padding: kernel / 2,
            groups,
        }
    }

    pub fn shrunk(mut self, factor: f64) -> Self {
        self.weight = shrink(&self.weight, &mut self.bias, factor);
        self
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding, self.groups)
    }

    /// Output channels.
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Channel-mixing linear map over axis 1 (a 1×1 convolution).
pub struct Dense<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Element> Dense<T> {
    pub fn new(init: &Init, cin: usize, cout: usize, bias: bool) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        Dense {
            weight: init.uniform("weight", &[cout, cin], bound),
            bias: bias.then(|| init.uniform("bias", &[cout], bound)),
        }
    }

    pub fn shrunk(mut self, factor: f64) -> Self {
        self.weight = shrink(&self.weight, &mut self.bias, factor);
        self
    }

    /// `[B, Cin, ...] -> [B, Cout, ...]`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.pointwise(&self.weight, self.bias.as_ref())
    }

    /// `[..., Cin] -> [..., Cout]`
    pub fn forward_last(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, self.bias.as_ref())
    }
}

impl<T: Element> Module<T> for Dense<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// LayerNorm over the channel axis at every position, eps 1e-5.
pub struct ChannelNorm<T: Element> {
    pub gain: Tensor<T>,
    pub offset: Tensor<T>,
}

impl<T: Element> ChannelNorm<T> {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &Init, channels: usize) -> Self {
        ChannelNorm { gain: init.constant(&[channels], 1.0), offset: init.constant(&[channels], 0.0) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm_channels(&self.gain, &self.offset, Self::EPS)
    }
}

impl<T: Element> Module<T> for ChannelNorm<T> {
    fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "gain"), &mut self.gain));
        out.push((join(prefix, "offset"), &mut self.offset));
    }
}

/// Copies every parameter of `src` into the same-named parameter of `dst`,
/// converting precision. Both must have identical parameter lists.
pub fn copy_params<A: Element, B: Element>(src: &mut impl Module<A>, dst: &mut impl Module<B>) -> Result<()> {
    let from = src.named_params();
    let to = dst.named_params();
    if from.len() != to.len() {
        return Err(crate::Error::ConfigMismatch {
            field: "parameters".into(),
            detail: format!("{} vs {} tensors", from.len(), to.len()),
        });
    }
    for ((name_a, a), (name_b, b)) in from.into_iter().zip(to) {
        if name_a != name_b || a.shape() != b.shape() {
            return Err(crate::Error::ConfigMismatch {
                field: name_b,
                detail: format!("{name_a} {:?} vs {:?}", a.shape(), b.shape()),
            });
        }
        *b = a.cast::<B>().requires_grad_(true);
    }
    Ok(())
}
