//! Spatial resampling kernels: 2×2 max pooling, bilinear resize
//! (align-corners false) and nearest-neighbour resize.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2×2 max pool with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element.
pub fn max_pool_2x2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "max_pool_2x2",
            format!("spatial extent {h}x{w} is not even"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let data = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + 2 * oh * w + 2 * ow;
                for idx in [
                    base + 2 * oh * w + 2 * ow + 1,
                    base + (2 * oh + 1) * w + 2 * ow,
                    base + (2 * oh + 1) * w + 2 * ow + 1,
                ] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, ho, wo], out)?, arg))
}

pub fn max_pool_2x2_backward(input_shape: &[usize], argmax: &[usize], grad: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&g, &idx) in grad.data().iter().zip(argmax) {
        dx.data_mut()[idx] += g;
    }
    dx
}

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<Tap> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            let frac = pos - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear resize of every plane of a 4-D tensor to `out_h × out_w`,
/// sampling at pixel centres (align-corners false). Resizing to the same
/// extent is the identity.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "zero target extent"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for r in &rows {
            let top = &plane[r.lo * w..(r.lo + 1) * w];
            let bottom = &plane[r.hi * w..(r.hi + 1) * w];
            for t in &cols {
                let upper = t.w_lo * top[t.lo] + t.w_hi * top[t.hi];
                let lower = t.w_lo * bottom[t.lo] + t.w_hi * bottom[t.hi];
                out.push(r.w_lo * upper + r.w_hi * lower);
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients back onto the
/// input grid.
pub fn resize_bilinear_backward(input_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let (b, c, out_h, out_w) = grad.dims4()?;
    let (h, w) = (input_shape[2], input_shape[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(grad.clone());
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    for (plane, g) in dx
        .data_mut()
        .chunks_mut(h * w)
        .zip(grad.data().chunks(out_h * out_w))
    {
        for (ri, r) in rows.iter().enumerate() {
            for (ci, t) in cols.iter().enumerate() {
                let v = g[ri * out_w + ci];
                plane[r.lo * w + t.lo] += r.w_lo * t.w_lo * v;
                plane[r.lo * w + t.hi] += r.w_lo * t.w_hi * v;
                plane[r.hi * w + t.lo] += r.w_hi * t.w_lo * v;
                plane[r.hi * w + t.hi] += r.w_hi * t.w_hi * v;
            }
        }
    }
    Ok(dx)
}

fn nearest_index(i: usize, src_len: usize, dst_len: usize) -> usize {
    let pos = ((i as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    pos.min(src_len - 1)
}

/// Nearest-neighbour resize (pixel-centre aligned). Never creates values
/// that are not present in the input.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_nearest", "zero target extent"));
    }
    let rows: Vec<usize> = (0..out_h).map(|i| nearest_index(i, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|j| nearest_index(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &r in &rows {
            for &col in &cols {
                out.push(plane[r * w + col]);
            }
        }
    }
    Tensor::new(vec![b, c, out_h, out_w], out)
}
