use super::Tensor;
use crate::error::{Error, Result};

/// Output pixels handled per im2col panel; bounds scratch memory on large tiles.
const PANEL_PIXELS: usize = 2048;

/// Logistic inputs are clamped to this magnitude so the result stays strictly
/// inside (0, 1) in f64.
const LOGISTIC_CLAMP: f64 = 36.0;

/// 2-D cross-correlation with symmetric zero padding.
///
/// `input` is `[Cin,H,W]`, `kernel` is `[Cout,Cin,kh,kw]`. The kernel is not
/// flipped. Output extent is `floor((H + 2*padding - kh) / stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_padded(input, kernel, bias, stride, (padding, padding))
}

/// [`conv2d`] with independent vertical and horizontal padding, as the
/// 1x3 and 3x1 branches of an asymmetric block need.
pub fn conv2d_padded(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    stride: usize,
    (pad_h, pad_w): (usize, usize),
) -> Result<Tensor> {
    let (cin, h, w) = input.dims3()?;
    let [cout, kcin, kh, kw] = kernel.shape()[..] else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [Cout,Cin,kh,kw], got {:?}", kernel.shape()),
        ));
    };
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?} has {cin} channels but kernel {:?} expects {kcin}",
                input.shape(),
                kernel.shape()
            ),
        ));
    }
    if bias.len() != cout {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries for {cout} output channels", bias.len()),
        ));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
        return Err(Error::shape(
            "conv2d",
            format!(
                "padded input {:?} (pad {pad_h},{pad_w}) smaller than kernel {:?}",
                input.shape(),
                kernel.shape()
            ),
        ));
    }

    let oh = (h + 2 * pad_h - kh) / stride + 1;
    let ow = (w + 2 * pad_w - kw) / stride + 1;
    let npix = oh * ow;
    let kdim = cin * kh * kw;
    let src = input.data();
    let weights = kernel.data();

    let mut out = vec![0.0; cout * npix];
    for (o, &b) in bias.iter().enumerate() {
        out[o * npix..(o + 1) * npix].fill(b);
    }

    let rows_per_panel = (PANEL_PIXELS / ow).max(1);
    let mut cols = Vec::new();
    let mut oy0 = 0;
    while oy0 < oh {
        let oy1 = (oy0 + rows_per_panel).min(oh);
        let nb = (oy1 - oy0) * ow;
        cols.clear();
        cols.resize(kdim * nb, 0.0);

        // im2col: one row per (ci, ky, kx), one column per output pixel.
        for ci in 0..cin {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let r = (ci * kh + ky) * kw + kx;
                    let row = &mut cols[r * nb..(r + 1) * nb];
                    for oy in oy0..oy1 {
                        let iy = (oy * stride + ky) as isize - pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad_w as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = line[ix as usize];
                            }
                        }
                    }
                }
            }
        }

        let base = oy0 * ow;
        for o in 0..cout {
            let acc = &mut out[o * npix + base..o * npix + base + nb];
            let wrow = &weights[o * kdim..(o + 1) * kdim];
            for (r, &wv) in wrow.iter().enumerate() {
                let col = &cols[r * nb..(r + 1) * nb];
                for (a, &c) in acc.iter_mut().zip(col) {
                    *a += wv * c;
                }
            }
        }
        oy0 = oy1;
    }

    Tensor::new(vec![cout, oh, ow], out)
}

/// Max pooling over `k x k` windows. Padded cells count as negative
/// infinity, so they never win a window.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if k == 0 {
        return Err(Error::invalid("maxpool2d", "window size must be positive"));
    }
    if stride == 0 {
        return Err(Error::invalid("maxpool2d", "stride must be positive"));
    }
    if padding >= k {
        return Err(Error::invalid(
            "maxpool2d",
            format!("padding {padding} must be smaller than window {k}"),
        ));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(
            "maxpool2d",
            format!("padded input {:?} smaller than window {k}", input.shape()),
        ));
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = input.channel(ch);
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - padding as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize) as usize).min(h);
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - padding as isize;
                let xs = x0.max(0) as usize..((x0 + k as isize) as usize).min(w);
                let mut m = f64::NEG_INFINITY;
                for y in ys.clone() {
                    for &v in &plane[y * w + xs.start..y * w + xs.end] {
                        m = m.max(v);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Per-channel arithmetic mean of a `[C,H,W]` tensor.
pub fn global_avg_pool(input: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = input.dims3()?;
    let n = (h * w) as f64;
    Ok((0..c)
        .map(|ch| input.channel(ch).iter().sum::<f64>() / n)
        .collect())
}

/// Replicates each cell into a `factor x factor` block.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(input.clone());
    }
    let (uh, uw) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * uh * uw);
    for ch in 0..c {
        let plane = input.channel(ch);
        for y in 0..uh {
            let line = &plane[(y / factor) * w..(y / factor + 1) * w];
            for x in 0..uw {
                out.push(line[x / factor]);
            }
        }
    }
    Tensor::new(vec![c, uh, uw], out)
}

/// Affine map `weight * input + bias` with `weight` shaped `[m, n]`.
pub fn linear(input: &[f64], weight: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let [m, n] = weight.shape()[..] else {
        return Err(Error::shape(
            "linear",
            format!("weight must be [m,n], got {:?}", weight.shape()),
        ));
    };
    if n != input.len() || bias.len() != m {
        return Err(Error::shape(
            "linear",
            format!(
                "weight {:?} with input of length {} and bias of length {}",
                weight.shape(),
                input.len(),
                bias.len()
            ),
        ));
    }
    Ok(weight
        .data()
        .chunks_exact(n)
        .zip(bias)
        .map(|(row, &b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect())
}

/// Stacks `[Ci,H,W]` tensors along the channel axis, in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (_, h, w) = first.dims3()?;
    let mut total = 0;
    for t in inputs {
        let (c, th, tw) = t.dims3()?;
        if (th, tw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", first.shape(), t.shape()),
            ));
        }
        total += c;
    }
    let mut data = Vec::with_capacity(total * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![total, h, w], data)
}

pub(crate) fn logistic(x: f64) -> f64 {
    let x = x.clamp(-LOGISTIC_CLAMP, LOGISTIC_CLAMP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function; outputs lie strictly inside (0, 1).
pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(logistic)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "resize_bilinear",
            format!("target extent {out_h}x{out_w} must be positive"),
        ));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = input.channel(ch);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
