use super::{ConvBlock, NnError, Real, Tensor3, KERNEL};

/// Unfolded input kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// `(in · 9) × (H · W)`, row-major.
    cols: Vec<T>,
    channels: usize,
    height: usize,
    width: usize,
}

/// Gradients have the same layout as the parameters.
pub type ConvGrads<T> = ConvBlock<T>;

#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<u32>,
    channels: usize,
    height: usize,
    width: usize,
}

fn im2col<T: Real>(x: &Tensor3<T>) -> Vec<T> {
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let mut cols = vec![T::zero(); x.channels * KERNEL * KERNEL * plane];
    for c in 0..x.channels {
        let src = &x.data[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                // output (y, x) reads input (y + ky − 1, x + kx − 1)
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let srow = (sy - 1) * w;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&src[srow + x_lo + kx - 1..srow + x_hi + kx - 1]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], channels: usize, h: usize, w: usize) -> Tensor3<T> {
    let plane = h * w;
    let mut out = Tensor3::zeros(channels, h, w);
    for c in 0..channels {
        let dst = &mut out.data[c * plane..(c + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let drow = (sy - 1) * w;
                    for x in x_lo..x_hi {
                        dst[drow + x + kx - 1] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// 3×3 cross-correlation, stride 1, zero same-padding.
pub fn conv2d_forward<T: Real>(
    x: &Tensor3<T>,
    block: &ConvBlock<T>,
) -> Result<(Tensor3<T>, ConvCache<T>), NnError> {
    if x.channels != block.in_channels {
        return Err(NnError::Shape(format!(
            "conv expects {} input channels, got {}",
            block.in_channels, x.channels
        )));
    }
    let plane = x.plane();
    let fan_in = block.fan_in();
    let cols = im2col(x);
    let mut out = Tensor3::zeros(block.out_channels, x.height, x.width);
    for (o, &b) in block.bias.iter().enumerate() {
        out.data[o * plane..(o + 1) * plane].fill(b);
    }
    T::gemm(
        block.out_channels,
        fan_in,
        plane,
        &block.weight,
        fan_in as isize,
        1,
        &cols,
        plane as isize,
        1,
        T::one(),
        &mut out.data,
        plane as isize,
        1,
    );
    let cache = ConvCache {
        cols,
        channels: x.channels,
        height: x.height,
        width: x.width,
    };
    Ok((out, cache))
}

/// Accumulates kernel and bias gradients into `grads`; returns the input
/// gradient when `need_input_grad` is set.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    block: &ConvBlock<T>,
    grad_out: &Tensor3<T>,
    grads: &mut ConvGrads<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor3<T>>, NnError> {
    let plane = cache.height * cache.width;
    if grad_out.channels != block.out_channels || grad_out.plane() != plane {
        return Err(NnError::Shape("conv output gradient shape".into()));
    }
    if !grads.same_shape(block) {
        return Err(NnError::Shape("conv gradient accumulator shape".into()));
    }
    let fan_in = block.fan_in();
    // dW += dY · colsᵀ
    T::gemm(
        block.out_channels,
        plane,
        fan_in,
        &grad_out.data,
        plane as isize,
        1,
        &cache.cols,
        1,
        plane as isize,
        T::one(),
        &mut grads.weight,
        fan_in as isize,
        1,
    );
    for (o, gb) in grads.bias.iter_mut().enumerate() {
        *gb += grad_out.data[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
    }
    if !need_input_grad {
        return Ok(None);
    }
    // dcols = Wᵀ · dY
    let mut grad_cols = vec![T::zero(); fan_in * plane];
    T::gemm(
        fan_in,
        block.out_channels,
        plane,
        &block.weight,
        1,
        fan_in as isize,
        &grad_out.data,
        plane as isize,
        1,
        T::zero(),
        &mut grad_cols,
        plane as isize,
        1,
    );
    Ok(Some(col2im(&grad_cols, cache.channels, cache.height, cache.width)))
}

pub fn relu<T: Real>(x: &Tensor3<T>) -> Tensor3<T> {
    Tensor3 {
        channels: x.channels,
        height: x.height,
        width: x.width,
        data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
    }
}

/// `activation` may be either the relu input or its output; the mask `> 0`
/// is the same. The subgradient at 0 is 0.
pub fn relu_backward<T: Real>(activation: &Tensor3<T>, grad: &Tensor3<T>) -> Tensor3<T> {
    Tensor3 {
        channels: grad.channels,
        height: grad.height,
        width: grad.width,
        data: activation
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
            .collect(),
    }
}

/// 2×2 max pooling, stride 2, ceiling mode: border windows may be partial.
pub fn maxpool2_ceil<T: Real>(x: &Tensor3<T>) -> (Tensor3<T>, PoolCache) {
    let (h, w) = (x.height, x.width);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor3::zeros(x.channels, oh, ow);
    let mut argmax = vec![0u32; x.channels * oh * ow];
    for c in 0..x.channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x.data[best_idx];
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let idx = base + y * w + xx;
                        // strict: first index wins ties
                        if x.data[idx] > best {
                            best = x.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    let cache = PoolCache {
        argmax,
        channels: x.channels,
        height: h,
        width: w,
    };
    (out, cache)
}

pub fn maxpool2_ceil_backward<T: Real>(cache: &PoolCache, grad_out: &Tensor3<T>) -> Tensor3<T> {
    let mut grad = Tensor3::zeros(cache.channels, cache.height, cache.width);
    for (&idx, &g) in cache.argmax.iter().zip(&grad_out.data) {
        grad.data[idx as usize] += g;
    }
    grad
}
