use crate::scalar::gemm;
use crate::Scalar;

/// Stride and zero-padding of a square-kernel convolution.
///
/// For transposed convolutions `output_padding` adds extra rows/columns on the
/// bottom/right edge so that odd output sizes are reachable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dSpec {
            stride,
            pad,
            output_padding: 0,
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec::new(1, 0)
    }
}

pub fn conv_output_size(input: usize, kernel: usize, spec: Conv2dSpec) -> usize {
    assert!(
        input + 2 * spec.pad >= kernel,
        "kernel {kernel} larger than padded input {input}"
    );
    (input + 2 * spec.pad - kernel) / spec.stride + 1
}

pub fn conv_transpose_output_size(input: usize, kernel: usize, spec: Conv2dSpec) -> usize {
    assert!(input >= 1);
    ((input - 1) * spec.stride + kernel + spec.output_padding)
        .checked_sub(2 * spec.pad)
        .expect("transposed convolution output would be negative")
}

/// Geometry shared by im2col and col2im: an image of `[b, c, h, w]` seen
/// through a `k x k` window sliding over a `[ho, wo]` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.b * self.ho * self.wo
    }
}

/// Unfolds `x` into `cols[c*k*k, b*ho*wo]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Geom, cols: &mut [T]) {
    let n = g.cols();
    debug_assert_eq!(cols.len(), g.rows() * n);
    debug_assert_eq!(x.len(), g.b * g.c * g.h * g.w);
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for bi in 0..g.b {
                    let plane = &x[(bi * g.c + ci) * g.h * g.w..(bi * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let d = &mut dst[(bi * g.ho + oy) * g.wo..(bi * g.ho + oy + 1) * g.wo];
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            d.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, dv) in d.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *dv = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back into `x`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Geom, x: &mut [T]) {
    let n = g.cols();
    debug_assert_eq!(cols.len(), g.rows() * n);
    debug_assert_eq!(x.len(), g.b * g.c * g.h * g.w);
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for bi in 0..g.b {
                    let base = (bi * g.c + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let s = &src[(bi * g.ho + oy) * g.wo..(bi * g.ho + oy + 1) * g.wo];
                        let rowbase = base + iy as usize * g.w;
                        for (ox, &sv) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[rowbase + ix as usize] += sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[b, c, n]` -> `[c, b*n]`.
pub(crate) fn to_channel_major<T: Scalar>(x: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * c * n];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * n + bi * n..ci * b * n + (bi + 1) * n]
                .copy_from_slice(&x[(bi * c + ci) * n..(bi * c + ci + 1) * n]);
        }
    }
    out
}

/// `[c, b*n]` -> `[b, c, n]`.
pub(crate) fn from_channel_major<T: Scalar>(x: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * c * n];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * n..(bi * c + ci + 1) * n]
                .copy_from_slice(&x[ci * b * n + bi * n..ci * b * n + (bi + 1) * n]);
        }
    }
    out
}

pub(crate) struct ConvForward<T> {
    pub out: Vec<T>,
    pub cols: Vec<T>,
    pub geom: Geom,
    pub cout: usize,
}

/// `x[b,cin,h,w] * w[cout,cin,k,k] (+ bias)`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    xshape: &[usize],
    w: &[T],
    wshape: &[usize],
    bias: Option<&[T]>,
    spec: Conv2dSpec,
) -> ConvForward<T> {
    let (b, cin, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (cout, wcin, k, k2) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    assert_eq!(cin, wcin, "conv2d: input channels {cin} vs weight {wcin}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    let geom = Geom {
        b,
        c: cin,
        h,
        w: wd,
        k,
        stride: spec.stride,
        pad: spec.pad,
        ho: conv_output_size(h, k, spec),
        wo: conv_output_size(wd, k, spec),
    };
    let mut cols = vec![T::zero(); geom.rows() * geom.cols()];
    im2col(x, &geom, &mut cols);
    let mut y = vec![T::zero(); cout * geom.cols()];
    gemm(false, false, cout, geom.cols(), geom.rows(), w, &cols, T::zero(), &mut y);
    let n = geom.ho * geom.wo;
    let mut out = from_channel_major(&y, b, cout, n);
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, b, cout, n);
    }
    ConvForward {
        out,
        cols,
        geom,
        cout,
    }
}

pub(crate) fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], b: usize, c: usize, n: usize) {
    assert_eq!(bias.len(), c, "bias length");
    for bi in 0..b {
        for (ci, &bv) in bias.iter().enumerate() {
            for v in &mut out[(bi * c + ci) * n..(bi * c + ci + 1) * n] {
                *v += bv;
            }
        }
    }
}

pub(crate) fn channel_bias_grad<T: Scalar>(dy: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut g = vec![T::zero(); c];
    for bi in 0..b {
        for (ci, gv) in g.iter_mut().enumerate() {
            *gv += dy[(bi * c + ci) * n..(bi * c + ci + 1) * n].iter().copied().sum::<T>();
        }
    }
    g
}

/// Returns `(dx, dw)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    dy: &[T],
    cols: &[T],
    geom: &Geom,
    w: &[T],
    cout: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = geom.ho * geom.wo;
    let dyc = to_channel_major(dy, geom.b, cout, n);
    let dw = want_dw.then(|| {
        let mut dw = vec![T::zero(); cout * geom.rows()];
        gemm(false, true, cout, geom.rows(), geom.cols(), &dyc, cols, T::zero(), &mut dw);
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); geom.rows() * geom.cols()];
        gemm(true, false, geom.rows(), geom.cols(), cout, w, &dyc, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); geom.b * geom.c * geom.h * geom.w];
        col2im(&dcols, geom, &mut dx);
        dx
    });
    (dx, dw)
}

/// Geometry of a transposed convolution `x[b,cin,h,w] -> [b,cout,ho,wo]` with
/// weight `[cin,cout,k,k]`. The returned [`Geom`] describes the *output* image
/// seen through the kernel sliding over the input grid.
pub(crate) fn conv_transpose_geom(xshape: &[usize], wshape: &[usize], spec: Conv2dSpec) -> Geom {
    let (b, cin, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (wcin, cout, k, k2) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    assert_eq!(cin, wcin, "conv_transpose2d: input channels {cin} vs weight {wcin}");
    assert_eq!(k, k2, "conv_transpose2d: square kernels only");
    let ho = conv_transpose_output_size(h, k, spec);
    let wo = conv_transpose_output_size(wd, k, spec);
    Geom {
        b,
        c: cout,
        h: ho,
        w: wo,
        k,
        stride: spec.stride,
        pad: spec.pad,
        ho: h,
        wo: wd,
    }
}

pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    xshape: &[usize],
    w: &[T],
    wshape: &[usize],
    bias: Option<&[T]>,
    spec: Conv2dSpec,
) -> (Vec<T>, Geom) {
    let g = conv_transpose_geom(xshape, wshape, spec);
    let cin = xshape[1];
    let xc = to_channel_major(x, g.b, cin, g.ho * g.wo);
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    gemm(true, false, g.rows(), g.cols(), cin, w, &xc, T::zero(), &mut cols);
    let mut out = vec![T::zero(); g.b * g.c * g.h * g.w];
    col2im(&cols, &g, &mut out);
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, g.b, g.c, g.h * g.w);
    }
    (out, g)
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    cin: usize,
    w: &[T],
    g: &Geom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dcols = vec![T::zero(); g.rows() * g.cols()];
    im2col(dy, g, &mut dcols);
    let n = g.ho * g.wo;
    let dx = want_dx.then(|| {
        let mut dxc = vec![T::zero(); cin * g.cols()];
        gemm(false, false, cin, g.cols(), g.rows(), w, &dcols, T::zero(), &mut dxc);
        from_channel_major(&dxc, g.b, cin, n)
    });
    let dw = want_dw.then(|| {
        let xc = to_channel_major(x, g.b, cin, n);
        let mut dw = vec![T::zero(); cin * g.rows()];
        gemm(false, true, cin, g.rows(), g.cols(), &xc, &dcols, T::zero(), &mut dw);
        dw
    });
    (dx, dw)
}
