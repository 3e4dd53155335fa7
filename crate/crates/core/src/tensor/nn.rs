use rand::Rng;

use super::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors owned by one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        t.requires_grad = true;
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the graph. With `trainable == false` they are
    /// recorded as constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Collects per-parameter gradients for vars produced by [`ParamSet::bind`].
    pub fn grads(&self, vars: &[Var], grads: &Gradients) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.get(v)).collect()
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be present.
    pub fn load_named<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let Some(i) = self.names.iter().position(|n| n == name) else {
                continue;
            };
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_params",
                    left: self.tensors[i].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t.clone().with_grad();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter `{}`", self.names[i])));
        }
        Ok(())
    }

    /// `self <- tau * online + (1 - tau) * self`, elementwise. Written as
    /// `self + tau * (online - self)` so equal tensors stay bit-identical.
    pub fn ema_from(&mut self, online: &ParamSet, tau: f64) {
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            if tau == 1.0 {
                t.data_mut().copy_from_slice(o.data());
                continue;
            }
            for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
                *a += tau * (b - *a);
            }
        }
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Affine layer `x W + b` with `x: [n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
        let b = ps.add(format!("{name}.b"), uniform(rng, &[fan_out], bound));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let h = g.matmul(x, p[self.w.0])?;
        g.add_row(h, p[self.b.0])
    }
}

/// Layer norm with learned gain and bias over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let s = g.mul_row(n, p[self.gain.0])?;
        g.add_row(s, p[self.bias.0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

/// ReLU multilayer perceptron with a configurable output activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: &[usize],
        out: usize,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(out);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        match self.output {
            Activation::Identity => Ok(h),
            Activation::Tanh => g.tanh(h),
        }
    }

    /// Gradient-free evaluation on a `[n, in]` batch.
    pub fn eval(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}
