use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided, zero-padded window; errors unless it is integral.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    let span = input + 2 * pad;
    if kernel == 0 || kernel > span {
        return Err(Error::Shape(format!("kernel {kernel} does not fit input {input} with pad {pad}")));
    }
    if (span - kernel) % stride != 0 {
        return Err(Error::Shape(format!(
            "non-integral output size: ({input} + 2*{pad} - {kernel}) / {stride}"
        )));
    }
    Ok((span - kernel) / stride + 1)
}

fn dims4(t: &[usize], what: &str) -> Result<[usize; 4]> {
    match t {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(Error::Shape(format!("{what} must be rank 4, got {t:?}"))),
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, c, h, w] = dims4(input, "conv input")?;
        let [o, kc, kh, kw] = dims4(kernel, "conv kernel")?;
        if kc != c {
            return Err(Error::Shape(format!("conv channels: input {c}, kernel expects {kc}")));
        }
        let oh = conv_output_extent(h, kh, stride, pad)?;
        let ow = conv_output_extent(w, kw, stride, pad)?;
        Ok(Self { n, c, h, w, o, kh, kw, oh, ow, stride, pad })
    }

    /// Input coordinate touched by output `out` and kernel tap `tap`, if inside the image.
    #[inline]
    fn src(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// 2-D cross-correlation: `out[n,o,y,x] = Σ_{c,i,j} in[n,c,y·s+i−p, x·s+j−p] · k[o,c,i,j]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.n * g.o * g.oh * g.ow];
    for n in 0..g.n {
        for o in 0..g.o {
            let obase = (n * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let kbase = (o * g.c + c) * g.kh * g.kw;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let kv = k[kbase + i * g.kw + j];
                        if kv == T::zero() {
                            continue;
                        }
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, i, g.h) else { continue };
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, j, g.w) {
                                    let slot = &mut out[obase + oy * g.ow + ox];
                                    *slot = *slot + kv * x[xbase + iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Gradient of a [`conv2d`] output w.r.t. its input.
pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input_shape, kernel.shape(), stride, pad)?;
    let dy = grad_out.data();
    let k = kernel.data();
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for o in 0..g.o {
            let obase = (n * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let kbase = (o * g.c + c) * g.kh * g.kw;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let kv = k[kbase + i * g.kw + j];
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, i, g.h) else { continue };
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, j, g.w) {
                                    let slot = &mut dx[xbase + iy * g.w + ix];
                                    *slot = *slot + kv * dy[obase + oy * g.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Gradient of a [`conv2d`] output w.r.t. its kernel.
pub fn conv2d_grad_kernel<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), kernel_shape, stride, pad)?;
    let dy = grad_out.data();
    let x = input.data();
    let mut dk = vec![T::zero(); g.o * g.c * g.kh * g.kw];
    for n in 0..g.n {
        for o in 0..g.o {
            let obase = (n * g.o + o) * g.oh * g.ow;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let kbase = (o * g.c + c) * g.kh * g.kw;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let mut acc = T::zero();
                        for oy in 0..g.oh {
                            let Some(iy) = g.src(oy, i, g.h) else { continue };
                            for ox in 0..g.ow {
                                if let Some(ix) = g.src(ox, j, g.w) {
                                    acc = acc + dy[obase + oy * g.ow + ox] * x[xbase + iy * g.w + ix];
                                }
                            }
                        }
                        dk[kbase + i * g.kw + j] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(kernel_shape.to_vec(), dk)
}

/// Non-overlapping `k × k` average pooling over the spatial axes of an `NCHW` tensor.
pub fn avg_pool2d<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(input.shape(), "pool input")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Shape(format!("pool size {k} does not divide {h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::lit((k * k) as f64);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..k {
                    for j in 0..k {
                        acc = acc + x[plane * h * w + (oy * k + i) * w + ox * k + j];
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool2d_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize], k: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(input_shape, "pool input")?;
    let (oh, ow) = (h / k, w / k);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::Shape(format!("pool grad shape {:?}", grad_out.shape())));
    }
    let inv = T::one() / T::lit((k * k) as f64);
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                dx[plane * h * w + y * w + x] = dy[plane * oh * ow + (y / k) * ow + x / k] * inv;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}
