//! 3-d spatial operations: direct-loop convolution, max-pooling with argmax
//! routing, nearest-neighbor upsampling, group normalization, slice pooling,
//! and the coordinate ops used by the localization head.
//!
//! Volumes are laid out `[C, D, H, W]` with `x` (the `W` axis) fastest.
//! Convolution uses zero padding and floor output extents. All loops run in a
//! fixed order so results are bitwise deterministic on a single thread.

use super::{
    accumulate, arg_err, checked_numel, shape_err, take_grad, Element, Op, Tape, Tensor, TensorError,
    TensorId,
};

/// Valid output range `[lo, hi)` along one axis: the output positions whose
/// sampled input index `x*stride + k - pad` lands inside `[0, in_len)`.
fn axis_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let s = stride as isize;
    let num_lo = pad as isize - k as isize;
    let lo = if num_lo <= 0 { 0 } else { ((num_lo + s - 1) / s) as usize };
    let num_hi = in_len as isize - 1 + pad as isize - k as isize;
    if num_hi < 0 {
        return (0, 0);
    }
    let hi = (num_hi / s).min(out_len as isize - 1);
    if hi < lo as isize {
        (0, 0)
    } else {
        (lo, hi as usize + 1)
    }
}

fn expect_4d<'a>(
    op: &'static str,
    what: &str,
    shape: &'a [usize],
) -> Result<[usize; 4], TensorError> {
    if shape.len() != 4 {
        return Err(shape_err(op, format!("{what} must be 4-d [C,D,H,W], got {shape:?}")));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

impl<E: Element> Tape<E> {
    /// 3-d convolution with zero padding.
    ///
    /// `input` is `[C_in, D, H, W]`, `weight` is `[C_out, C_in, kd, kh, kw]`,
    /// `bias` is `[C_out]`. Output extents follow the floor rule
    /// `D' = (D + 2*pad - k) / stride + 1` per axis.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<TensorId, TensorError> {
        let [ci_n, d, h, w] = expect_4d("conv3d", "input", self.shape(input))?;
        let wshape = self.shape(weight);
        if wshape.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("weight must be 5-d [C_out,C_in,kd,kh,kw], got {wshape:?}"),
            ));
        }
        let [co_n, wci, kd, kh, kw] = [wshape[0], wshape[1], wshape[2], wshape[3], wshape[4]];
        if wci != ci_n {
            return Err(shape_err(
                "conv3d",
                format!("weight expects {wci} input channels, input has {ci_n}"),
            ));
        }
        if self.shape(bias) != [co_n] {
            return Err(shape_err(
                "conv3d",
                format!("bias must be [{co_n}], got {:?}", self.shape(bias)),
            ));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(arg_err("conv3d", format!("stride must be >= 1, got {stride:?}")));
        }
        if kd == 0 || kh == 0 || kw == 0 {
            return Err(arg_err("conv3d", "kernel extents must be >= 1".into()));
        }
        let out_extent = |n: usize, k: usize, s: usize, p: usize| -> Result<usize, TensorError> {
            let padded = n + 2 * p;
            if padded < k {
                return Err(shape_err(
                    "conv3d",
                    format!("kernel extent {k} exceeds padded input extent {padded}"),
                ));
            }
            Ok((padded - k) / s + 1)
        };
        let od = out_extent(d, kd, stride[0], padding[0])?;
        let oh = out_extent(h, kh, stride[1], padding[1])?;
        let ow = out_extent(w, kw, stride[2], padding[2])?;
        let out_shape = vec![co_n, od, oh, ow];
        checked_numel("conv3d", &out_shape)?;

        let x = &self.node(input).data;
        let wt = &self.node(weight).data;
        let b = &self.node(bias).data;
        let mut out = vec![E::ZERO; co_n * od * oh * ow];
        for co in 0..co_n {
            let fill = b[co];
            for v in &mut out[co * od * oh * ow..(co + 1) * od * oh * ow] {
                *v = fill;
            }
        }
        let [sd, sh, sw] = stride;
        let [pd, ph, pw] = padding;
        for co in 0..co_n {
            for ci in 0..ci_n {
                for kz in 0..kd {
                    let (zlo, zhi) = axis_range(od, d, sd, pd, kz);
                    for ky in 0..kh {
                        let (ylo, yhi) = axis_range(oh, h, sh, ph, ky);
                        for kx in 0..kw {
                            let (xlo, xhi) = axis_range(ow, w, sw, pw, kx);
                            if xlo >= xhi {
                                continue;
                            }
                            let wv = wt[(((co * ci_n + ci) * kd + kz) * kh + ky) * kw + kx];
                            for z in zlo..zhi {
                                let iz = z * sd + kz - pd;
                                for y in ylo..yhi {
                                    let iy = y * sh + ky - ph;
                                    let ob = ((co * od + z) * oh + y) * ow;
                                    let ib = ((ci * d + iz) * h + iy) * w;
                                    let orow = &mut out[ob + xlo..ob + xhi];
                                    if sw == 1 {
                                        // Contiguous input row: axis_range
                                        // guarantees xlo + kx >= pw.
                                        let lo = ib + xlo + kx - pw;
                                        let irow = &x[lo..lo + orow.len()];
                                        for (o, &xv) in orow.iter_mut().zip(irow) {
                                            *o += wv * xv;
                                        }
                                    } else {
                                        for (k, o) in orow.iter_mut().enumerate() {
                                            let xq = xlo + k;
                                            *o += wv * x[ib + xq * sw + kx - pw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(&[input, weight, bias]);
        Ok(self.derive(
            out_shape,
            out,
            rg,
            Op::Conv3d { input: input.0, weight: weight.0, bias: bias.0, stride, padding },
        ))
    }

    /// Max-pooling over 3-d windows. Output extents use the floor rule with
    /// no padding; gradient routes entirely to each window's argmax voxel,
    /// with ties broken toward the lowest linear index.
    pub fn maxpool3d(
        &mut self,
        input: TensorId,
        window: [usize; 3],
        stride: [usize; 3],
    ) -> Result<TensorId, TensorError> {
        let [c_n, d, h, w] = expect_4d("maxpool3d", "input", self.shape(input))?;
        if window.iter().any(|&v| v == 0) || stride.iter().any(|&v| v == 0) {
            return Err(arg_err(
                "maxpool3d",
                format!("window {window:?} and stride {stride:?} must be >= 1"),
            ));
        }
        let [wd, wh, ww] = window;
        if wd > d || wh > h || ww > w {
            return Err(shape_err(
                "maxpool3d",
                format!("window {window:?} larger than input extents {:?}", [d, h, w]),
            ));
        }
        let [sd, sh, sw] = stride;
        let od = (d - wd) / sd + 1;
        let oh = (h - wh) / sh + 1;
        let ow = (w - ww) / sw + 1;
        let x = &self.node(input).data;
        let mut out = Vec::with_capacity(c_n * od * oh * ow);
        let mut argmax = Vec::with_capacity(c_n * od * oh * ow);
        for c in 0..c_n {
            for z in 0..od {
                for y in 0..oh {
                    for xq in 0..ow {
                        let mut best = E::lit(f64::NEG_INFINITY);
                        let mut best_idx = 0usize;
                        let mut first = true;
                        for kz in 0..wd {
                            for ky in 0..wh {
                                for kx in 0..ww {
                                    let idx = ((c * d + z * sd + kz) * h + y * sh + ky) * w
                                        + xq * sw
                                        + kx;
                                    let v = x[idx];
                                    if first || v > best {
                                        best = v;
                                        best_idx = idx;
                                        first = false;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let rg = self.node(input).requires_grad;
        Ok(self.derive(vec![c_n, od, oh, ow], out, rg, Op::MaxPool3d { input: input.0, argmax }))
    }

    /// Nearest-neighbor upsampling: each voxel is replicated into an
    /// `fd x fh x fw` block. Backward sums the gradients over each block.
    pub fn upsample_nearest3d(
        &mut self,
        input: TensorId,
        factor: [usize; 3],
    ) -> Result<TensorId, TensorError> {
        let [c_n, d, h, w] = expect_4d("upsample_nearest3d", "input", self.shape(input))?;
        if factor.iter().any(|&f| f == 0) {
            return Err(arg_err("upsample_nearest3d", format!("factor must be >= 1, got {factor:?}")));
        }
        let [fd, fh, fw] = factor;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let out_shape = vec![c_n, od, oh, ow];
        checked_numel("upsample_nearest3d", &out_shape)?;
        let x = &self.node(input).data;
        let mut out = vec![E::ZERO; c_n * od * oh * ow];
        for c in 0..c_n {
            for z in 0..od {
                for y in 0..oh {
                    let ib = ((c * d + z / fd) * h + y / fh) * w;
                    let ob = ((c * od + z) * oh + y) * ow;
                    for xq in 0..ow {
                        out[ob + xq] = x[ib + xq / fw];
                    }
                }
            }
        }
        let rg = self.node(input).requires_grad;
        Ok(self.derive(out_shape, out, rg, Op::Upsample3d { input: input.0, factor }))
    }

    /// Group normalization over `[C, D, H, W]`: channels are split into
    /// `groups` contiguous groups, each normalized to zero mean and unit
    /// variance over (channels-in-group, D, H, W), then scaled per channel by
    /// `gamma` and shifted by `beta`. Differentiable through the statistics.
    pub fn group_norm(
        &mut self,
        input: TensorId,
        groups: usize,
        gamma: TensorId,
        beta: TensorId,
        eps: E,
    ) -> Result<TensorId, TensorError> {
        let [c_n, d, h, w] = expect_4d("group_norm", "input", self.shape(input))?;
        if groups == 0 || c_n % groups != 0 {
            return Err(arg_err(
                "group_norm",
                format!("channel count {c_n} not divisible by groups {groups}"),
            ));
        }
        if self.shape(gamma) != [c_n] || self.shape(beta) != [c_n] {
            return Err(shape_err(
                "group_norm",
                format!(
                    "gamma {:?} and beta {:?} must both be [{c_n}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if !(eps > E::ZERO) {
            return Err(arg_err("group_norm", format!("eps must be positive, got {eps}")));
        }
        let spatial = d * h * w;
        let cpg = c_n / groups;
        let m = E::lit((cpg * spatial) as f64);
        let x = &self.node(input).data;
        let ga = &self.node(gamma).data;
        let be = &self.node(beta).data;
        let mut out = vec![E::ZERO; x.len()];
        let mut stats = Vec::with_capacity(groups);
        for grp in 0..groups {
            let lo = grp * cpg * spatial;
            let hi = lo + cpg * spatial;
            let mut mean = E::ZERO;
            for &v in &x[lo..hi] {
                mean += v;
            }
            mean = mean / m;
            let mut var = E::ZERO;
            for &v in &x[lo..hi] {
                let dmu = v - mean;
                var += dmu * dmu;
            }
            var = var / m;
            let inv = E::ONE / (var + eps).sqrt();
            stats.push((mean, inv));
            for c in grp * cpg..(grp + 1) * cpg {
                let (g, b) = (ga[c], be[c]);
                let base = c * spatial;
                for k in 0..spatial {
                    out[base + k] = g * (x[base + k] - mean) * inv + b;
                }
            }
        }
        let rg = self.requires(&[input, gamma, beta]);
        Ok(self.derive(
            vec![c_n, d, h, w],
            out,
            rg,
            Op::GroupNorm { input: input.0, gamma: gamma.0, beta: beta.0, groups, stats },
        ))
    }

    /// Averages each depth slice's spatial extent per channel, producing a
    /// `[D, C]` sequence of channel vectors ordered along the depth axis.
    pub fn depth_sequence_mean(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let [c_n, d, h, w] = expect_4d("depth_sequence_mean", "input", self.shape(input))?;
        let spatial = h * w;
        if spatial == 0 || d == 0 {
            return Err(arg_err("depth_sequence_mean", "input extents must be nonzero".into()));
        }
        let x = &self.node(input).data;
        let inv = E::ONE / E::lit(spatial as f64);
        let mut out = vec![E::ZERO; d * c_n];
        for c in 0..c_n {
            for z in 0..d {
                let base = (c * d + z) * spatial;
                let mut acc = E::ZERO;
                for k in 0..spatial {
                    acc += x[base + k];
                }
                out[z * c_n + c] = acc * inv;
            }
        }
        let rg = self.node(input).requires_grad;
        Ok(self.derive(vec![d, c_n], out, rg, Op::DepthSequenceMean(input.0)))
    }

    /// Mean over all spatial positions per channel: `[C, D, H, W] -> [C]`.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let [c_n, d, h, w] = expect_4d("global_avg_pool", "input", self.shape(input))?;
        let spatial = d * h * w;
        if spatial == 0 {
            return Err(arg_err("global_avg_pool", "input extents must be nonzero".into()));
        }
        let x = &self.node(input).data;
        let inv = E::ONE / E::lit(spatial as f64);
        let mut out = vec![E::ZERO; c_n];
        for c in 0..c_n {
            let mut acc = E::ZERO;
            for k in 0..spatial {
                acc += x[c * spatial + k];
            }
            out[c] = acc * inv;
        }
        let rg = self.node(input).requires_grad;
        Ok(self.derive(vec![c_n], out, rg, Op::GlobalAvgPool(input.0)))
    }

    /// Expected voxel coordinate per channel under the probability mass
    /// `probs[j, z, y, x]`: row `j` of the output is `(sum p*x, sum p*y,
    /// sum p*z)`, i.e. coordinates are ordered `(x, y, z)` in voxel units.
    /// Differentiable in the probabilities.
    pub fn integrate_coords(&mut self, probs: TensorId) -> Result<TensorId, TensorError> {
        let [n, d, h, w] = expect_4d("integrate_coords", "probs", self.shape(probs))?;
        let p = &self.node(probs).data;
        let mut out = vec![E::ZERO; n * 3];
        for j in 0..n {
            let mut ax = E::ZERO;
            let mut ay = E::ZERO;
            let mut az = E::ZERO;
            for z in 0..d {
                let mut plane = E::ZERO;
                for y in 0..h {
                    let base = ((j * d + z) * h + y) * w;
                    let mut row = E::ZERO;
                    let mut row_x = E::ZERO;
                    for x in 0..w {
                        let v = p[base + x];
                        row += v;
                        row_x += v * E::lit(x as f64);
                    }
                    ax += row_x;
                    ay += row * E::lit(y as f64);
                    plane += row;
                }
                az += plane * E::lit(z as f64);
            }
            out[j * 3] = ax;
            out[j * 3 + 1] = ay;
            out[j * 3 + 2] = az;
        }
        let rg = self.node(probs).requires_grad;
        Ok(self.derive(vec![n, 3], out, rg, Op::IntegrateCoords(probs.0)))
    }

    /// Voxel coordinate `(x, y, z)` of the maximum per channel, with ties
    /// broken toward the lowest linear index. Not differentiable: backward
    /// through this node is an explicit error.
    pub fn hard_argmax(&mut self, heatmap: TensorId) -> Result<TensorId, TensorError> {
        let [n, d, h, w] = expect_4d("hard_argmax", "heatmap", self.shape(heatmap))?;
        let x = &self.node(heatmap).data;
        let spatial = d * h * w;
        if spatial == 0 {
            return Err(arg_err("hard_argmax", "heatmap extents must be nonzero".into()));
        }
        let mut out = vec![E::ZERO; n * 3];
        for j in 0..n {
            let slab = &x[j * spatial..(j + 1) * spatial];
            let mut best = 0usize;
            for (k, &v) in slab.iter().enumerate() {
                if v > slab[best] {
                    best = k;
                }
            }
            let z = best / (h * w);
            let y = (best / w) % h;
            let xc = best % w;
            out[j * 3] = E::lit(xc as f64);
            out[j * 3 + 1] = E::lit(y as f64);
            out[j * 3 + 2] = E::lit(z as f64);
        }
        let rg = self.node(heatmap).requires_grad;
        Ok(self.derive(vec![n, 3], out, rg, Op::HardArgmax))
    }
}

pub(crate) fn conv3d_backward<E: Element>(
    head: &mut [Tensor<E>],
    g: &[E],
    out_shape: &[usize],
    input: usize,
    weight: usize,
    bias: usize,
    stride: [usize; 3],
    padding: [usize; 3],
) {
    let [co_n, od, oh, ow] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
    let ishape = head[input].shape.clone();
    let [ci_n, d, h, w] = [ishape[0], ishape[1], ishape[2], ishape[3]];
    let wshape = head[weight].shape.clone();
    let [kd, kh, kw] = [wshape[2], wshape[3], wshape[4]];
    let [sd, sh, sw] = stride;
    let [pd, ph, pw] = padding;

    if head[bias].requires_grad {
        accumulate(head, bias, |buf| {
            for co in 0..co_n {
                let mut acc = E::ZERO;
                for &gv in &g[co * od * oh * ow..(co + 1) * od * oh * ow] {
                    acc += gv;
                }
                buf[co] += acc;
            }
        });
    }

    if head[weight].requires_grad {
        let mut wbuf = take_grad(&mut head[weight]);
        {
            let x = &head[input].data;
            for co in 0..co_n {
                for ci in 0..ci_n {
                    for kz in 0..kd {
                        let (zlo, zhi) = axis_range(od, d, sd, pd, kz);
                        for ky in 0..kh {
                            let (ylo, yhi) = axis_range(oh, h, sh, ph, ky);
                            for kx in 0..kw {
                                let (xlo, xhi) = axis_range(ow, w, sw, pw, kx);
                                if xlo >= xhi {
                                    continue;
                                }
                                let mut acc = E::ZERO;
                                for z in zlo..zhi {
                                    let iz = z * sd + kz - pd;
                                    for y in ylo..yhi {
                                        let iy = y * sh + ky - ph;
                                        let ob = ((co * od + z) * oh + y) * ow;
                                        let ib = ((ci * d + iz) * h + iy) * w;
                                        if sw == 1 {
                                            let lo = ib + xlo + kx - pw;
                                            let grow = &g[ob + xlo..ob + xhi];
                                            let irow = &x[lo..lo + grow.len()];
                                            for (&gv, &xv) in grow.iter().zip(irow) {
                                                acc += gv * xv;
                                            }
                                        } else {
                                            for xq in xlo..xhi {
                                                acc += g[ob + xq] * x[ib + xq * sw + kx - pw];
                                            }
                                        }
                                    }
                                }
                                wbuf[(((co * ci_n + ci) * kd + kz) * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
        head[weight].grad = Some(wbuf);
    }

    if head[input].requires_grad {
        let mut xbuf = take_grad(&mut head[input]);
        {
            let wt = &head[weight].data;
            for co in 0..co_n {
                for ci in 0..ci_n {
                    for kz in 0..kd {
                        let (zlo, zhi) = axis_range(od, d, sd, pd, kz);
                        for ky in 0..kh {
                            let (ylo, yhi) = axis_range(oh, h, sh, ph, ky);
                            for kx in 0..kw {
                                let (xlo, xhi) = axis_range(ow, w, sw, pw, kx);
                                if xlo >= xhi {
                                    continue;
                                }
                                let wv = wt[(((co * ci_n + ci) * kd + kz) * kh + ky) * kw + kx];
                                for z in zlo..zhi {
                                    let iz = z * sd + kz - pd;
                                    for y in ylo..yhi {
                                        let iy = y * sh + ky - ph;
                                        let ob = ((co * od + z) * oh + y) * ow;
                                        let ib = ((ci * d + iz) * h + iy) * w;
                                        if sw == 1 {
                                            let lo = ib + xlo + kx - pw;
                                            let grow = &g[ob + xlo..ob + xhi];
                                            let xrow = &mut xbuf[lo..lo + grow.len()];
                                            for (xg, &gv) in xrow.iter_mut().zip(grow) {
                                                *xg += wv * gv;
                                            }
                                        } else {
                                            for xq in xlo..xhi {
                                                xbuf[ib + xq * sw + kx - pw] += wv * g[ob + xq];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        head[input].grad = Some(xbuf);
    }
}

pub(crate) fn upsample_backward<E: Element>(
    head: &mut [Tensor<E>],
    g: &[E],
    out_shape: &[usize],
    input: usize,
    factor: [usize; 3],
) {
    if !head[input].requires_grad {
        return;
    }
    let [c_n, od, oh, ow] = [out_shape[0], out_shape[1], out_shape[2], out_shape[3]];
    let [fd, fh, fw] = factor;
    let (d, h, w) = (od / fd, oh / fh, ow / fw);
    accumulate(head, input, |buf| {
        for c in 0..c_n {
            for z in 0..od {
                for y in 0..oh {
                    let ib = ((c * d + z / fd) * h + y / fh) * w;
                    let ob = ((c * od + z) * oh + y) * ow;
                    for xq in 0..ow {
                        buf[ib + xq / fw] += g[ob + xq];
                    }
                }
            }
        }
    });
}

pub(crate) fn group_norm_backward<E: Element>(
    head: &mut [Tensor<E>],
    g: &[E],
    input: usize,
    gamma: usize,
    beta: usize,
    groups: usize,
    stats: &[(E, E)],
) {
    let ishape = head[input].shape.clone();
    let [c_n, d, h, w] = [ishape[0], ishape[1], ishape[2], ishape[3]];
    let spatial = d * h * w;
    let cpg = c_n / groups;
    let m = E::lit((cpg * spatial) as f64);

    if head[beta].requires_grad {
        accumulate(head, beta, |buf| {
            for c in 0..c_n {
                let mut acc = E::ZERO;
                for &gv in &g[c * spatial..(c + 1) * spatial] {
                    acc += gv;
                }
                buf[c] += acc;
            }
        });
    }

    if head[gamma].requires_grad {
        let mut gbuf = take_grad(&mut head[gamma]);
        {
            let x = &head[input].data;
            for c in 0..c_n {
                let (mean, inv) = stats[c / cpg];
                let mut acc = E::ZERO;
                for k in 0..spatial {
                    acc += g[c * spatial + k] * (x[c * spatial + k] - mean) * inv;
                }
                gbuf[c] += acc;
            }
        }
        head[gamma].grad = Some(gbuf);
    }

    if head[input].requires_grad {
        let mut xbuf = take_grad(&mut head[input]);
        {
            let x = &head[input].data;
            let ga = &head[gamma].data;
            for grp in 0..groups {
                let (mean, inv) = stats[grp];
                let mut s1 = E::ZERO;
                let mut s2 = E::ZERO;
                for c in grp * cpg..(grp + 1) * cpg {
                    let gc = ga[c];
                    for k in 0..spatial {
                        let idx = c * spatial + k;
                        let dxhat = g[idx] * gc;
                        s1 += dxhat;
                        s2 += dxhat * (x[idx] - mean) * inv;
                    }
                }
                let s1m = s1 / m;
                let s2m = s2 / m;
                for c in grp * cpg..(grp + 1) * cpg {
                    let gc = ga[c];
                    for k in 0..spatial {
                        let idx = c * spatial + k;
                        let xhat = (x[idx] - mean) * inv;
                        xbuf[idx] += inv * (g[idx] * gc - s1m - xhat * s2m);
                    }
                }
            }
        }
        head[input].grad = Some(xbuf);
    }
}

pub(crate) fn depth_sequence_mean_backward<E: Element>(head: &mut [Tensor<E>], g: &[E], input: usize) {
    if !head[input].requires_grad {
        return;
    }
    let ishape = head[input].shape.clone();
    let [c_n, d, h, w] = [ishape[0], ishape[1], ishape[2], ishape[3]];
    let spatial = h * w;
    let inv = E::ONE / E::lit(spatial as f64);
    accumulate(head, input, |buf| {
        for c in 0..c_n {
            for z in 0..d {
                let gv = g[z * c_n + c] * inv;
                let base = (c * d + z) * spatial;
                for k in 0..spatial {
                    buf[base + k] += gv;
                }
            }
        }
    });
}

pub(crate) fn global_avg_pool_backward<E: Element>(head: &mut [Tensor<E>], g: &[E], input: usize) {
    if !head[input].requires_grad {
        return;
    }
    let ishape = head[input].shape.clone();
    let [c_n, d, h, w] = [ishape[0], ishape[1], ishape[2], ishape[3]];
    let spatial = d * h * w;
    let inv = E::ONE / E::lit(spatial as f64);
    accumulate(head, input, |buf| {
        for c in 0..c_n {
            let gv = g[c] * inv;
            for k in 0..spatial {
                buf[c * spatial + k] += gv;
            }
        }
    });
}

pub(crate) fn integrate_coords_backward<E: Element>(head: &mut [Tensor<E>], g: &[E], input: usize) {
    if !head[input].requires_grad {
        return;
    }
    let ishape = head[input].shape.clone();
    let [n, d, h, w] = [ishape[0], ishape[1], ishape[2], ishape[3]];
    accumulate(head, input, |buf| {
        for j in 0..n {
            let gx = g[j * 3];
            let gy = g[j * 3 + 1];
            let gz = g[j * 3 + 2];
            for z in 0..d {
                let gzc = gz * E::lit(z as f64);
                for y in 0..h {
                    let gyc = gy * E::lit(y as f64) + gzc;
                    let base = ((j * d + z) * h + y) * w;
                    for x in 0..w {
                        buf[base + x] += gx * E::lit(x as f64) + gyc;
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, TensorError};

    #[test]
    fn conv3d_identity_kernel() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![1.0; 27], vec![1, 3, 3, 3], false).unwrap();
        let w = t.constant(vec![1.0], vec![1, 1, 1, 1, 1]).unwrap();
        let b = t.constant(vec![0.0], vec![1]).unwrap();
        let y = t.conv3d(x, w, b, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(t.shape(y), &[1, 3, 3, 3]);
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn conv3d_single_voxel_with_padding_hits_center_tap() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![5.0], vec![1, 1, 1, 1], false).unwrap();
        let w = t.constant(vec![1.0; 27], vec![1, 1, 3, 3, 3]).unwrap();
        let b = t.constant(vec![0.0], vec![1]).unwrap();
        let y = t.conv3d(x, w, b, [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.data(y), &[5.0]);
    }

    #[test]
    fn conv3d_rejects_channel_mismatch_and_oversized_kernel() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![0.0; 8], vec![2, 2, 2, 1], false).unwrap();
        let w = t.constant(vec![0.0; 3], vec![1, 3, 1, 1, 1]).unwrap();
        let b = t.constant(vec![0.0], vec![1]).unwrap();
        assert!(matches!(
            t.conv3d(x, w, b, [1, 1, 1], [0, 0, 0]),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let w2 = t.constant(vec![0.0; 6], vec![1, 2, 3, 1, 1]).unwrap();
        assert!(t.conv3d(x, w2, b, [1, 1, 1], [0, 0, 0]).is_err());
    }

    #[test]
    fn maxpool_takes_block_maximum() {
        let mut t: Tape = Tape::new();
        let x = t
            .leaf((1..=8).map(|v| v as f64).collect(), vec![1, 2, 2, 2], false)
            .unwrap();
        let y = t.maxpool3d(x, [2, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.data(y), &[8.0]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_lowest_index() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![7.0; 8], vec![1, 2, 2, 2], true).unwrap();
        let y = t.maxpool3d(x, [2, 2, 2], [2, 2, 2]).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![0.0; 8], vec![1, 2, 2, 2], false).unwrap();
        assert!(t.maxpool3d(x, [3, 2, 2], [1, 1, 1]).is_err());
    }

    #[test]
    fn upsample_replicates_and_backward_sums_blocks() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![3.0], vec![1, 1, 1, 1], true).unwrap();
        let y = t.upsample_nearest3d(x, [2, 2, 2]).unwrap();
        assert_eq!(t.shape(y), &[1, 2, 2, 2]);
        assert!(t.data(y).iter().all(|&v| v == 3.0));
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
    }

    #[test]
    fn upsample_identity_factor() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2], false).unwrap();
        let y = t.upsample_nearest3d(x, [1, 1, 1]).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn group_norm_constant_input_is_guarded_by_eps() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![4.0; 16], vec![2, 2, 2, 2], false).unwrap();
        let gamma = t.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let beta = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let y = t.group_norm(x, 1, gamma, beta, 1e-5).unwrap();
        assert!(t.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_zero_gamma_yields_beta() {
        let mut t: Tape = Tape::new();
        let x = t.leaf((0..16).map(|v| v as f64).collect(), vec![2, 2, 2, 2], false).unwrap();
        let gamma = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let beta = t.constant(vec![2.5, -1.0], vec![2]).unwrap();
        let y = t.group_norm(x, 2, gamma, beta, 1e-5).unwrap();
        let d = t.data(y);
        assert!(d[..8].iter().all(|&v| v == 2.5));
        assert!(d[8..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![0.0; 24], vec![3, 2, 2, 2], false).unwrap();
        let gamma = t.constant(vec![1.0; 3], vec![3]).unwrap();
        let beta = t.constant(vec![0.0; 3], vec![3]).unwrap();
        assert!(t.group_norm(x, 2, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn group_norm_normalizes_per_group() {
        let mut t: Tape = Tape::new();
        let vals: Vec<f64> = (0..64).map(|v| ((v * 37 + 11) % 23) as f64 * 0.7 - 3.0).collect();
        let x = t.leaf(vals, vec![8, 2, 2, 2], false).unwrap();
        let gamma = t.constant(vec![1.0; 8], vec![8]).unwrap();
        let beta = t.constant(vec![0.0; 8], vec![8]).unwrap();
        let y = t.group_norm(x, 4, gamma, beta, 1e-10).unwrap();
        let d = t.data(y);
        for grp in 0..4 {
            let slab = &d[grp * 16..(grp + 1) * 16];
            let mean: f64 = slab.iter().sum::<f64>() / 16.0;
            let var: f64 = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10, "group {grp} mean {mean}");
            assert!((var - 1.0).abs() < 1e-8, "group {grp} var {var}");
        }
    }

    #[test]
    fn depth_sequence_mean_orders_by_depth() {
        let mut t: Tape = Tape::new();
        // Two channels, two depth slices of 1x2 rows.
        let x = t
            .leaf(vec![1.0, 3.0, 5.0, 7.0, 10.0, 30.0, 50.0, 70.0], vec![2, 2, 1, 2], true)
            .unwrap();
        let y = t.depth_sequence_mean(x).unwrap();
        assert_eq!(t.shape(y), &[2, 2]);
        assert_eq!(t.data(y), &[2.0, 20.0, 6.0, 60.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0], vec![2, 1, 2, 2], false).unwrap();
        let y = t.global_avg_pool(x).unwrap();
        assert_eq!(t.data(y), &[2.5, 25.0]);
    }

    #[test]
    fn integrate_coords_on_point_mass() {
        let mut t: Tape = Tape::new();
        let mut p = vec![0.0; 2 * 3 * 4 * 5];
        // Channel 0: all mass at (x=2, y=3, z=1). Channel 1: split between
        // (0,0,0) and (4,3,2) equally.
        p[(0 * 3 + 1) * 4 * 5 + 3 * 5 + 2] = 1.0;
        p[(1 * 3 + 0) * 4 * 5 + 0 * 5 + 0] = 0.5;
        p[(1 * 3 + 2) * 4 * 5 + 3 * 5 + 4] = 0.5;
        let pid = t.leaf(p, vec![2, 3, 4, 5], false).unwrap();
        let c = t.integrate_coords(pid).unwrap();
        assert_eq!(t.shape(c), &[2, 3]);
        let d = t.data(c);
        assert_eq!(&d[..3], &[2.0, 3.0, 1.0]);
        assert_eq!(&d[3..], &[2.0, 1.5, 1.0]);
    }

    #[test]
    fn hard_argmax_breaks_ties_low_and_refuses_backward() {
        let mut t: Tape = Tape::new();
        let x = t.leaf(vec![1.0, 1.0, 1.0, 1.0, 0.0, 2.0, 0.0, 0.0], vec![2, 1, 2, 2], true).unwrap();
        let c = t.hard_argmax(x).unwrap();
        let d = t.data(c);
        assert_eq!(&d[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&d[3..], &[1.0, 0.0, 0.0]);
        let r = t.reshape(c, vec![6]).unwrap();
        let s = t.sum(r);
        let err = t.backward(s).unwrap_err();
        assert!(matches!(err, TensorError::NonDifferentiable));
    }
}
