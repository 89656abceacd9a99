//! Convolution, group-norm, and residual-module building blocks.

use crate::tensor::{TensorError, TensorId};

use super::params::{Forward, Init, ParamId, ParamStore};

/// Largest group count that is at most `cap` and divides `channels`; group
/// normalization is applied per layer with this count so narrow layers
/// (e.g. bottlenecks of tiny configurations) stay valid.
pub fn gn_groups(channels: usize, cap: usize) -> usize {
    (1..=cap.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// A 3-d convolution layer: weight, optional bias, fixed stride and
/// same-style padding chosen at build time.
#[derive(Debug, Clone)]
pub struct Conv3 {
    w: ParamId,
    b: Option<ParamId>,
    padding: [usize; 3],
    out_channels: usize,
}

impl Conv3 {
    /// Builds a unit-stride convolution with `kernel` same-padding. Layers
    /// followed by a norm skip the bias; the norm's shift absorbs it.
    pub fn build(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        bias: bool,
    ) -> Conv3 {
        let [kd, kh, kw] = kernel;
        let fan_in = c_in * kd * kh * kw;
        let w = init.fan_in_uniform(
            store,
            format!("{name}.w"),
            vec![c_out, c_in, kd, kh, kw],
            fan_in,
        );
        let b = bias.then(|| Init::constant(store, format!("{name}.b"), vec![c_out], 0.0));
        Conv3 { w, b, padding: [kd / 2, kh / 2, kw / 2], out_channels: c_out }
    }

    pub fn forward(&self, fwd: &mut Forward, x: TensorId) -> Result<TensorId, TensorError> {
        let w = fwd.param(self.w)?;
        let b = match self.b {
            Some(b) => fwd.param(b)?,
            None => fwd.tape.constant(vec![0.0; self.out_channels], vec![self.out_channels])?,
        };
        fwd.tape.conv3d(x, w, b, [1, 1, 1], self.padding)
    }
}

/// Group normalization with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl Norm {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize, group_cap: usize) -> Norm {
        Norm {
            gamma: Init::constant(store, format!("{name}.gamma"), vec![channels], 1.0),
            beta: Init::constant(store, format!("{name}.beta"), vec![channels], 0.0),
            groups: gn_groups(channels, group_cap),
        }
    }

    pub fn forward(&self, fwd: &mut Forward, x: TensorId) -> Result<TensorId, TensorError> {
        let gamma = fwd.param(self.gamma)?;
        let beta = fwd.param(self.beta)?;
        fwd.tape.group_norm(x, self.groups, gamma, beta, 1e-5)
    }
}

/// Residual module: a channel bottleneck of 1×1×1 → 3×3×3 → 1×1×1
/// convolutions (norm after each, activation after the first two), summed
/// with an identity skip — or a 1×1×1 projection when the channel count
/// changes — before a final activation. Spatial extents pass through
/// untouched.
#[derive(Debug, Clone)]
pub struct Residual {
    conv1: Conv3,
    n1: Norm,
    conv2: Conv3,
    n2: Norm,
    conv3: Conv3,
    n3: Norm,
    proj: Option<Conv3>,
}

impl Residual {
    pub fn build(
        init: &mut Init,
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        group_cap: usize,
    ) -> Residual {
        let mid = (c_out / 2).max(1);
        Residual {
            conv1: Conv3::build(init, store, &format!("{name}.conv1"), c_in, mid, [1; 3], false),
            n1: Norm::build(store, &format!("{name}.norm1"), mid, group_cap),
            conv2: Conv3::build(init, store, &format!("{name}.conv2"), mid, mid, [3; 3], false),
            n2: Norm::build(store, &format!("{name}.norm2"), mid, group_cap),
            conv3: Conv3::build(init, store, &format!("{name}.conv3"), mid, c_out, [1; 3], false),
            n3: Norm::build(store, &format!("{name}.norm3"), c_out, group_cap),
            proj: (c_in != c_out)
                .then(|| Conv3::build(init, store, &format!("{name}.skip"), c_in, c_out, [1; 3], true)),
        }
    }

    pub fn forward(&self, fwd: &mut Forward, x: TensorId) -> Result<TensorId, TensorError> {
        let y = self.conv1.forward(fwd, x)?;
        let y = self.n1.forward(fwd, y)?;
        let y = fwd.tape.relu(y);
        let y = self.conv2.forward(fwd, y)?;
        let y = self.n2.forward(fwd, y)?;
        let y = fwd.tape.relu(y);
        let y = self.conv3.forward(fwd, y)?;
        let y = self.n3.forward(fwd, y)?;
        let s = match &self.proj {
            Some(p) => p.forward(fwd, x)?,
            None => x,
        };
        let out = fwd.tape.add(y, s)?;
        Ok(fwd.tape.relu(out))
    }
}
