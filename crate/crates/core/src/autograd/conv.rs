//! GEMM-backed 2-d convolution and transposed convolution.
//!
//! Both directions share one im2col/col2im pair. The transposed convolution
//! is the adjoint of a convolution whose *input* is the transposed
//! convolution's output, so forward/backward swap the two primitives.

use ndarray::{Array2, ArrayD, IxDyn};

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `(C, H, W)` into `(C*k*k, Ho*Wo)` columns.
fn im2col(x: &ArrayD<f64>, kernel: usize, stride: usize, pad: usize) -> Array2<f64> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    let xf = x.as_slice().expect("contiguous input");
    let mut cols = Array2::<f64>::zeros((c * kernel * kernel, ho * wo));
    let cf = cols.as_slice_mut().unwrap();
    let l = ho * wo;
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let base = row * l;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cf[base + oy * wo + ox] = xf[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold `(C*k*k, Ho*Wo)` columns back onto `(C, H, W)`, accumulating overlaps.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    debug_assert_eq!(cols.shape(), &[c * kernel * kernel, ho * wo]);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
    let of = out.as_slice_mut().unwrap();
    let copied;
    let cf = match cols.as_slice() {
        Some(s) => s,
        None => {
            copied = cols.iter().copied().collect::<Vec<f64>>();
            &copied
        }
    };
    let l = ho * wo;
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let base = row * l;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        of[dst_row + ix as usize] += cf[base + oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

fn as_2d(a: &ArrayD<f64>, rows: usize, cols: usize) -> Array2<f64> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("contiguous reshape")
        .to_owned()
}

/// Reshape a matmul result, copying when the layout is not contiguous.
fn reshape(a: Array2<f64>, shape: &[usize]) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a.into_shape_with_order(IxDyn(shape)).unwrap()
    } else {
        let v: Vec<f64> = a.iter().copied().collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }
}

pub fn conv2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: Option<&ArrayD<f64>>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    assert_eq!(xs.len(), 3, "conv2d input must be (C,H,W)");
    assert_eq!(ws.len(), 4, "conv2d weight must be (Co,Ci,k,k)");
    assert_eq!(ws[1], xs[0], "conv2d: channel mismatch");
    assert_eq!(ws[2], ws[3], "conv2d: square kernels only");
    let (co, ci, k) = (ws[0], ws[1], ws[2]);
    let ho = conv_out_size(xs[1], k, stride, pad);
    let wo = conv_out_size(xs[2], k, stride, pad);
    let cols = im2col(x, k, stride, pad);
    let w2 = as_2d(w, co, ci * k * k);
    let mut y2 = w2.dot(&cols);
    if let Some(b) = b {
        for c in 0..co {
            let bc = b[[c]];
            y2.row_mut(c).mapv_inplace(|v| v + bc);
        }
    }
    reshape(y2, &[co, ho, wo])
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let (xs, ws, gs) = (x.shape(), w.shape(), g.shape());
    let (co, ci, k) = (ws[0], ws[1], ws[2]);
    let l = gs[1] * gs[2];
    let g2 = as_2d(g, co, l);
    let dx = if need_dx {
        let w2 = as_2d(w, co, ci * k * k);
        let cols = w2.t().dot(&g2);
        Some(col2im(&cols, ci, xs[1], xs[2], k, stride, pad))
    } else {
        None
    };
    let dw = if need_dw {
        let cols = im2col(x, k, stride, pad);
        let dw2 = g2.dot(&cols.t());
        Some(reshape(dw2, &[co, ci, k, k]))
    } else {
        None
    };
    let db = if need_db {
        let mut db = ArrayD::<f64>::zeros(IxDyn(&[co]));
        for c in 0..co {
            db[[c]] = g2.row(c).sum();
        }
        Some(db)
    } else {
        None
    };
    (dx, dw, db)
}

/// Forward transposed convolution with weight `(Ci, Co, k, k)` onto an
/// explicit `(Ho, Wo)`, which must satisfy the adjoint-size relation
/// `conv_out_size(Ho) == Hi` (likewise for width).
pub fn conv_transpose2d_forward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: Option<&ArrayD<f64>>,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> ArrayD<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    assert_eq!(xs.len(), 3);
    assert_eq!(ws.len(), 4, "conv_transpose2d weight must be (Ci,Co,k,k)");
    assert_eq!(ws[0], xs[0], "conv_transpose2d: channel mismatch");
    let (ci, co, k) = (ws[0], ws[1], ws[2]);
    let (ho, wo) = out_hw;
    assert_eq!(
        conv_out_size(ho, k, stride, pad),
        xs[1],
        "conv_transpose2d: target height inconsistent with stride/pad"
    );
    assert_eq!(
        conv_out_size(wo, k, stride, pad),
        xs[2],
        "conv_transpose2d: target width inconsistent with stride/pad"
    );
    let x2 = as_2d(x, ci, xs[1] * xs[2]);
    let w2 = as_2d(w, ci, co * k * k);
    let cols = w2.t().dot(&x2);
    let mut y = col2im(&cols, co, ho, wo, k, stride, pad);
    if let Some(b) = b {
        for c in 0..co {
            let bc = b[[c]];
            y.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| v + bc);
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (ci, co, k) = (ws[0], ws[1], ws[2]);
    let gcols = im2col(g, k, stride, pad);
    let dx = if need_dx {
        let w2 = as_2d(w, ci, co * k * k);
        let dx2 = w2.dot(&gcols);
        Some(reshape(dx2, &[ci, xs[1], xs[2]]))
    } else {
        None
    };
    let dw = if need_dw {
        let x2 = as_2d(x, ci, xs[1] * xs[2]);
        let dw2 = x2.dot(&gcols.t());
        Some(reshape(dw2, &[ci, co, k, k]))
    } else {
        None
    };
    let db = if need_db {
        let mut db = ArrayD::<f64>::zeros(IxDyn(&[co]));
        for c in 0..co {
            db[[c]] = g.index_axis(ndarray::Axis(0), c).sum();
        }
        Some(db)
    } else {
        None
    };
    (dx, dw, db)
}
