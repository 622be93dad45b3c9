//! 2-D convolution with stride, zero padding and dilation, lowered to
//! im2col + GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride-1 convolution whose zero padding `d·(k−1)/2` preserves the
    /// spatial extent. `kernel` must be odd.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        debug_assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let pad = dilation * (kernel - 1) / 2;
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (pad, pad),
            dilation,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1, 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if self.in_channels == 0
            || self.out_channels == 0
            || kh == 0
            || kw == 0
            || sh == 0
            || sw == 0
            || self.dilation == 0
        {
            return Err(Error::shape("conv2d", format!("degenerate spec {self:?}")));
        }
        Ok(())
    }

    /// `floor((H + 2p − d(k−1) − 1)/s) + 1` per axis; errors when an axis
    /// would be empty.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = len + 2 * p;
            (padded >= span).then(|| (padded - span) / s + 1)
        };
        match (
            axis(h, self.kernel.0, self.stride.0, self.padding.0),
            axis(w, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} too small for {self:?}"),
            )),
        }
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` over row-major buffers, where `op` is an
/// optional transpose. `op(a)` is `m × k`, `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every index reachable through
    // these strides lies inside the borrowed slices, and `c` does not alias
    // `a` or `b` because of the exclusive borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], g: &Geometry, spec: &ConvSpec, cols: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let d = spec.dilation as isize;
    let p = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let col_off = kj as isize * d - pw;
                for oh in 0..g.ho {
                    let ih = (oh * sh) as isize + ki as isize * d - ph;
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * sw) as isize + col_off;
                        *o = if iw >= 0 && iw < g.w as isize {
                            src[iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, spec: &ConvSpec, x: &mut [f64]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = (spec.padding.0 as isize, spec.padding.1 as isize);
    let d = spec.dilation as isize;
    let p = g.ho * g.wo;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let col_off = kj as isize * d - pw;
                for oh in 0..g.ho {
                    let ih = (oh * sh) as isize + ki as isize * d - ph;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in src[oh * g.wo..(oh + 1) * g.wo].iter().enumerate() {
                        let iw = (ow * sw) as isize + col_off;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_operands(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    spec.validate()?;
    let (_, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight shape {:?}, expected {:?}",
                weight.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels),
            ));
        }
    }
    let (ho, wo) = spec.output_extent(h, w)?;
    Ok(Geometry { c, h, w, ho, wo })
}

pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = check_operands(input, weight, bias, spec)?;
    let b = input.shape()[0];
    let cout = spec.out_channels;
    let kdim = spec.fan_in();
    let p = g.ho * g.wo;
    let mut out = vec![0.0; b * cout * p];
    let mut cols = if spec.is_plain_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kdim * p]
    };
    let in_stride = g.c * g.h * g.w;
    for bi in 0..b {
        let x = &input.data()[bi * in_stride..(bi + 1) * in_stride];
        let cols_ref: &[f64] = if spec.is_plain_pointwise() {
            x
        } else {
            im2col(x, &g, spec, &mut cols);
            &cols
        };
        let y = &mut out[bi * cout * p..(bi + 1) * cout * p];
        if let Some(bias) = bias {
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.fill(bias.data()[o]);
            }
        }
        gemm(cout, kdim, p, weight.data(), false, cols_ref, false, 1.0, y);
    }
    Tensor::new(vec![b, cout, g.ho, g.wo], out)
}

pub struct ConvGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = check_operands(input, weight, None, spec)?;
    let b = input.shape()[0];
    let cout = spec.out_channels;
    let kdim = spec.fan_in();
    let p = g.ho * g.wo;
    if grad_out.shape() != [b, cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad shape {:?}", grad_out.shape()),
        ));
    }
    let pointwise = spec.is_plain_pointwise();
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kdim * p] };
    let mut dcols = vec![0.0; kdim * p];
    let in_stride = g.c * g.h * g.w;
    for bi in 0..b {
        let gy = &grad_out.data()[bi * cout * p..(bi + 1) * cout * p];
        for (o, row) in gy.chunks(p).enumerate() {
            db.data_mut()[o] += row.iter().sum::<f64>();
        }
        let x = &input.data()[bi * in_stride..(bi + 1) * in_stride];
        let cols_ref: &[f64] = if pointwise {
            x
        } else {
            im2col(x, &g, spec, &mut cols);
            &cols
        };
        gemm(cout, p, kdim, gy, false, cols_ref, true, 1.0, dw.data_mut());
        if !need_input {
            continue;
        }
        let dx_b = &mut dx.data_mut()[bi * in_stride..(bi + 1) * in_stride];
        if pointwise {
            gemm(kdim, cout, p, weight.data(), true, gy, false, 1.0, dx_b);
        } else {
            gemm(kdim, cout, p, weight.data(), true, gy, false, 0.0, &mut dcols);
            col2im(&dcols, &g, spec, dx_b);
        }
    }
    Ok(ConvGrads {
        input: need_input.then_some(dx),
        weight: dw,
        bias: db,
    })
}
