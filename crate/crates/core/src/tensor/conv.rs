use super::ops::{matmul_raw, transpose_raw};
use super::{Result, Tensor, TensorError};
use crate::rng::{uniform_param, Prng};

/// Grouped 2D convolution layer over a single `[C, H, W]` map.
#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub groups: usize,
    pub padding: usize,
    pub stride: usize,
    /// `[out, in/groups, kh, kw]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Option<Tensor>,
}

impl Conv2dParams {
    /// Uniform `±sqrt(1/fan_in)` init with a bias.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        rng: &mut Prng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        groups: usize,
        padding: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        check_groups(in_channels, out_channels, groups)?;
        let fan_in = in_channels / groups * kernel * kernel;
        let weight = uniform_param(rng, &[out_channels, in_channels / groups, kernel, kernel], fan_in);
        let bias = bias.then(|| uniform_param(rng, &[out_channels], fan_in));
        Ok(Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            groups,
            padding,
            stride,
            weight,
            bias,
        })
    }

    /// Layer with explicit weights (tracked) and optional bias.
    pub fn from_weights(
        weight: Tensor,
        bias: Option<Tensor>,
        groups: usize,
        padding: usize,
        stride: usize,
    ) -> Result<Self> {
        let shape = weight.shape().to_vec();
        if shape.len() != 4 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("weight must be rank 4, got {shape:?}"),
            });
        }
        let in_channels = shape[1] * groups;
        check_groups(in_channels, shape[0], groups)?;
        if let Some(b) = &bias {
            if b.numel() != shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: shape,
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            in_channels,
            out_channels: shape[0],
            kernel_h: shape[2],
            kernel_w: shape[3],
            groups,
            padding,
            stride,
            weight,
            bias,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = self.bias.as_mut() {
            out.push(b);
        }
        out
    }
}

fn check_groups(in_channels: usize, out_channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("channels {in_channels}->{out_channels} not divisible by {groups} groups"),
        });
    }
    Ok(())
}

fn out_dim(input: usize, pad: usize, kernel: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!(
                "non-integral output size for input {input}, pad {pad}, kernel {kernel}, stride {stride}"
            ),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Direct-loop convolution of `[C_in, H, W]` into `[C_out, H', W']`.
pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[0] != p.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: p.weight.shape().to_vec(),
        });
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let geo = Geometry {
        cin_g: p.in_channels / p.groups,
        cout_g: p.out_channels / p.groups,
        cout: p.out_channels,
        h,
        w,
        kh: p.kernel_h,
        kw: p.kernel_w,
        oh: out_dim(h, p.padding, p.kernel_h, p.stride)?,
        ow: out_dim(w, p.padding, p.kernel_w, p.stride)?,
        pad: p.padding as isize,
        stride: p.stride,
    };

    let mut out = vec![0.0; geo.cout * geo.oh * geo.ow];
    if let Some(b) = &p.bias {
        for (co, &bv) in b.data().iter().enumerate() {
            out[co * geo.oh * geo.ow..(co + 1) * geo.oh * geo.ow].fill(bv);
        }
    }
    if p.groups == 1 {
        return dense_conv(x, p, geo, out);
    }
    let xd = x.data();
    let wd = p.weight.data();
    geo.for_each_tap(|co, ci, wi, oi, ii| out[co * geo.oh * geo.ow + oi] += wd[wi] * xd[ci * h * w + ii]);

    let mut parents = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    let has_bias = p.bias.is_some();
    let (xs, ws) = (x.clone(), p.weight.clone());
    let shape = vec![geo.cout, geo.oh, geo.ow];
    Tensor::from_op(
        "conv2d",
        out,
        shape,
        parents,
        Box::new(move |g| {
            let xd = xs.data();
            let wd = ws.data();
            let plane = geo.oh * geo.ow;
            let dx = xs.requires_grad().then(|| {
                let mut dx = vec![0.0; xd.len()];
                geo.for_each_tap(|co, ci, wi, oi, ii| dx[ci * geo.h * geo.w + ii] += wd[wi] * g[co * plane + oi]);
                dx
            });
            let dw = ws.requires_grad().then(|| {
                let mut dw = vec![0.0; wd.len()];
                geo.for_each_tap(|co, ci, wi, oi, ii| dw[wi] += xd[ci * geo.h * geo.w + ii] * g[co * plane + oi]);
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(Some(g.chunks(plane).map(|c| c.iter().sum()).collect()));
            }
            grads
        }),
    )
}

/// Ungrouped convolution as a product with the patch matrix.
fn dense_conv(x: &Tensor, p: &Conv2dParams, geo: Geometry, mut out: Vec<f64>) -> Result<Tensor> {
    let k = geo.cin_g * geo.kh * geo.kw;
    let plane = geo.oh * geo.ow;
    let cols = geo.im2col(x.data());
    let prod = matmul_raw(p.weight.data(), &cols, geo.cout, k, plane);
    for (o, v) in out.iter_mut().zip(&prod) {
        *o += v;
    }
    let mut parents = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    let has_bias = p.bias.is_some();
    let (xs, ws) = (x.clone(), p.weight.clone());
    Tensor::from_op(
        "conv2d",
        out,
        vec![geo.cout, geo.oh, geo.ow],
        parents,
        Box::new(move |g| {
            let dx = xs.requires_grad().then(|| {
                let wt = transpose_raw(ws.data(), geo.cout, k);
                geo.col2im(&matmul_raw(&wt, g, k, geo.cout, plane))
            });
            let dw = ws
                .requires_grad()
                .then(|| matmul_raw(g, &transpose_raw(&cols, k, plane), geo.cout, plane, k));
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(Some(g.chunks(plane).map(|c| c.iter().sum()).collect()));
            }
            grads
        }),
    )
}

#[derive(Clone, Copy)]
struct Geometry {
    cin_g: usize,
    cout_g: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: isize,
    stride: usize,
}

impl Geometry {
    /// `[cin * kh * kw, oh * ow]` patches of an ungrouped input; padding
    /// reads as zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut cols = vec![0.0; self.cin_g * self.kh * self.kw * plane];
        self.for_each_patch(|row, oi, ii| cols[row * plane + oi] = x[ii]);
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let plane = self.oh * self.ow;
        let mut x = vec![0.0; self.cin_g * self.h * self.w];
        self.for_each_patch(|row, oi, ii| x[ii] += cols[row * plane + oi]);
        x
    }

    /// `f(patch_row, output_pixel, flat_input_index)` for in-bounds taps.
    #[inline]
    fn for_each_patch<F: FnMut(usize, usize, usize)>(&self, mut f: F) {
        for ci in 0..self.cin_g {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride) as isize + ky as isize - self.pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride) as isize + kx as isize - self.pad;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.ow + ox, (ci * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    /// Visits every (output, weight, input) triple that contributes:
    /// `f(out_channel, in_channel, weight_index, output_pixel, input_pixel)`.
    #[inline]
    fn for_each_tap<F: FnMut(usize, usize, usize, usize, usize)>(&self, mut f: F) {
        for co in 0..self.cout {
            let group = co / self.cout_g;
            for cl in 0..self.cin_g {
                let ci = group * self.cin_g + cl;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let wi = ((co * self.cin_g + cl) * self.kh + ky) * self.kw + kx;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride) as isize + ky as isize - self.pad;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride) as isize + kx as isize - self.pad;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(co, ci, wi, oy * self.ow + ox, iy as usize * self.w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}
