use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{channel_shape, Graph, ParamId, ParamKind, Real, Tensor, Var, VarStore};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Uniform Xavier initialisation, `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<F: Real, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.random_range(-a..=a))).collect();
    Tensor::from_vec(shape, data)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng>(
        vs: &mut VarStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = xavier_uniform(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng);
        let weight = vs.add(format!("{name}.w"), w, ParamKind::Weight);
        let bias = bias.then(|| {
            vs.add(
                format!("{name}.b"),
                Tensor::zeros(&channel_shape(c_out)),
                ParamKind::Weight,
            )
        });
        Self { weight, bias, stride, pad }
    }

    /// 3×3, stride 1, same padding, no bias.
    pub fn same3<F: Real, R: Rng>(
        vs: &mut VarStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(vs, name, c_in, c_out, 3, 1, 1, false, rng)
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        let w = g.param(vs, self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad);
        match self.bias {
            Some(b) => {
                let b = g.param(vs, b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

/// 2×2 stride-2 transposed convolution with bias.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<F: Real, R: Rng>(
        vs: &mut VarStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = xavier_uniform(&[c_in, c_out, 2, 2], c_out * 4, c_in * 4, rng);
        Self {
            weight: vs.add(format!("{name}.w"), w, ParamKind::Weight),
            bias: vs.add(
                format!("{name}.b"),
                Tensor::zeros(&channel_shape(c_out)),
                ParamKind::Weight,
            ),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        let w = g.param(vs, self.weight);
        let b = g.param(vs, self.bias);
        let y = g.conv_transpose2x2(x, w);
        g.add(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Switchable,
}

/// Mean and biased variance over `axes`, plus the centred input.
fn moments<F: Real>(g: &mut Graph<F>, x: Var, axes: &[usize]) -> (Var, Var, Var) {
    let m = g.mean_axes(x, axes);
    let d = g.sub(x, m);
    let d2 = g.square(d);
    let v = g.mean_axes(d2, axes);
    (m, v, d)
}

/// Mean and variance over batch and space, as plain tensors, for running
/// statistic updates (variance unbiased).
fn running_update<F: Real>(
    g: &mut Graph<F>,
    vs: &VarStore<F>,
    running_mean: ParamId,
    running_var: ParamId,
    mean: Var,
    var: Var,
    count: usize,
) {
    let m = F::of(NORM_MOMENTUM);
    let keep = F::one() - m;
    let unbias = F::of(count as f64 / (count.max(2) - 1) as f64);
    let new_mean = vs
        .get(running_mean)
        .zip_map(g.value(mean), |r, b| keep * r + m * b);
    let new_var = vs
        .get(running_var)
        .zip_map(g.value(var), |r, b| keep * r + m * b * unbias);
    g.record_buffer_update(running_mean, new_mean);
    g.record_buffer_update(running_var, new_var);
}

#[derive(Debug, Clone)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    fn new<F: Real>(vs: &mut VarStore<F>, name: &str, c: usize) -> Self {
        Self {
            gamma: vs.add(format!("{name}.gamma"), Tensor::ones(&channel_shape(c)), ParamKind::Weight),
            beta: vs.add(format!("{name}.beta"), Tensor::zeros(&channel_shape(c)), ParamKind::Weight),
        }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        let gamma = g.param(vs, self.gamma);
        let beta = g.param(vs, self.beta);
        let y = g.mul(x, gamma);
        g.add(y, beta)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub affine: Affine,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<F: Real>(vs: &mut VarStore<F>, name: &str, c: usize) -> Self {
        Self {
            affine: Affine::new(vs, name, c),
            running_mean: vs.add(format!("{name}.running_mean"), Tensor::zeros(&channel_shape(c)), ParamKind::Buffer),
            running_var: vs.add(format!("{name}.running_var"), Tensor::ones(&channel_shape(c)), ParamKind::Buffer),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        let normed = if g.is_training() {
            let (n, _, h, w) = g.value(x).dims4();
            let (m, v, d) = moments(g, x, &[0, 2, 3]);
            running_update(g, vs, self.running_mean, self.running_var, m, v, n * h * w);
            let ve = g.add_scalar(v, NORM_EPS);
            let sd = g.sqrt(ve);
            g.div(d, sd)
        } else {
            let m = g.constant(vs.get(self.running_mean).clone());
            let sd = g.constant(vs.get(self.running_var).map(|v| (v + F::of(NORM_EPS)).sqrt()));
            let d = g.sub(x, m);
            g.div(d, sd)
        };
        self.affine.forward(g, vs, normed)
    }
}

/// Switchable normalisation: instance, layer and batch statistics mixed by
/// softmax-weighted importance (separately for means and variances).
#[derive(Debug, Clone)]
pub struct SwitchNorm {
    pub affine: Affine,
    pub mean_weight: ParamId,
    pub var_weight: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl SwitchNorm {
    pub fn new<F: Real>(vs: &mut VarStore<F>, name: &str, c: usize) -> Self {
        Self {
            affine: Affine::new(vs, name, c),
            mean_weight: vs.add(format!("{name}.mean_weight"), Tensor::ones(&[1, 3, 1, 1]), ParamKind::Weight),
            var_weight: vs.add(format!("{name}.var_weight"), Tensor::ones(&[1, 3, 1, 1]), ParamKind::Weight),
            running_mean: vs.add(format!("{name}.running_mean"), Tensor::zeros(&channel_shape(c)), ParamKind::Buffer),
            running_var: vs.add(format!("{name}.running_var"), Tensor::ones(&channel_shape(c)), ParamKind::Buffer),
        }
    }

    fn mix<F: Real>(g: &mut Graph<F>, weights: Var, parts: [Var; 3]) -> Var {
        let sm = g.softmax_channels(weights);
        let mut acc = None;
        for (k, p) in parts.into_iter().enumerate() {
            let wk = g.slice_channels(sm, k, 1);
            let t = g.mul(wk, p);
            acc = Some(match acc {
                None => t,
                Some(a) => g.add(a, t),
            });
        }
        acc.unwrap()
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        let (m_in, v_in, _) = moments(g, x, &[2, 3]);
        let (m_ln, v_ln, _) = moments(g, x, &[1, 2, 3]);
        let (m_bn, v_bn) = if g.is_training() {
            let (n, _, h, w) = g.value(x).dims4();
            let (m, v, _) = moments(g, x, &[0, 2, 3]);
            running_update(g, vs, self.running_mean, self.running_var, m, v, n * h * w);
            (m, v)
        } else {
            (
                g.constant(vs.get(self.running_mean).clone()),
                g.constant(vs.get(self.running_var).clone()),
            )
        };
        let mw = g.param(vs, self.mean_weight);
        let vw = g.param(vs, self.var_weight);
        let mean = Self::mix(g, mw, [m_in, m_ln, m_bn]);
        let var = Self::mix(g, vw, [v_in, v_ln, v_bn]);
        let d = g.sub(x, mean);
        let ve = g.add_scalar(var, NORM_EPS);
        let sd = g.sqrt(ve);
        let normed = g.div(d, sd);
        self.affine.forward(g, vs, normed)
    }
}

#[derive(Debug, Clone)]
pub enum Norm {
    Batch(BatchNorm),
    Switch(SwitchNorm),
}

impl Norm {
    pub fn new<F: Real>(vs: &mut VarStore<F>, name: &str, c: usize, kind: NormKind) -> Self {
        match kind {
            NormKind::Batch => Norm::Batch(BatchNorm::new(vs, name, c)),
            NormKind::Switchable => Norm::Switch(SwitchNorm::new(vs, name, c)),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        match self {
            Norm::Batch(n) => n.forward(g, vs, x),
            Norm::Switch(n) => n.forward(g, vs, x),
        }
    }
}

pub const SE_REDUCTION: usize = 16;
pub const SE_MIN_HIDDEN: usize = 4;

/// Squeeze-and-excitation: spatial mean, C→R→C gating, channel rescaling.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl SeBlock {
    pub fn hidden(c: usize) -> usize {
        (c / SE_REDUCTION).max(SE_MIN_HIDDEN)
    }

    pub fn new<F: Real, R: Rng>(vs: &mut VarStore<F>, name: &str, c: usize, rng: &mut R) -> Self {
        let r = Self::hidden(c);
        Self {
            fc1: Conv2d::new(vs, &format!("{name}.fc1"), c, r, 1, 1, 0, true, rng),
            fc2: Conv2d::new(vs, &format!("{name}.fc2"), r, c, 1, 1, 0, true, rng),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        let s = g.mean_axes(x, &[2, 3]);
        let h = self.fc1.forward(g, vs, s);
        let h = g.relu(h);
        let h = self.fc2.forward(g, vs, h);
        let gate = g.sigmoid(h);
        g.mul(x, gate)
    }
}

/// `[conv3×3 → norm → ReLU] ×2`, optionally followed by SE.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub norm1: Norm,
    pub conv2: Conv2d,
    pub norm2: Norm,
    pub se: Option<SeBlock>,
}

impl ConvBlock {
    pub fn new<F: Real, R: Rng>(
        vs: &mut VarStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        norm: NormKind,
        se: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv2d::same3(vs, &format!("{name}.conv1"), c_in, c_out, rng),
            norm1: Norm::new(vs, &format!("{name}.norm1"), c_out, norm),
            conv2: Conv2d::same3(vs, &format!("{name}.conv2"), c_out, c_out, rng),
            norm2: Norm::new(vs, &format!("{name}.norm2"), c_out, norm),
            se: se.then(|| SeBlock::new(vs, &format!("{name}.se"), c_out, rng)),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, vs: &VarStore<F>, x: Var) -> Var {
        let h = self.conv1.forward(g, vs, x);
        let h = self.norm1.forward(g, vs, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, vs, h);
        let h = self.norm2.forward(g, vs, h);
        let h = g.relu(h);
        match &self.se {
            Some(se) => se.forward(g, vs, h),
            None => h,
        }
    }
}
