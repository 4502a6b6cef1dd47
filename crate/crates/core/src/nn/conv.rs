//! Stride-1 "same" convolution via im2col.

use ndarray::{Array2, Array4, Axis, Ix4, IxDyn};

use super::{Activation, ForwardCache, LayerParams, Tensor, VjpResult};
use crate::{Error, Result};

fn im2col(x: &ndarray::ArrayView4<f64>, kernel: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let pad = kernel / 2;
    let kk = kernel * kernel;
    let mut cols = Array2::<f64>::zeros((b * h * w, c * kk));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = (bi * h + i) * w + j;
                let mut out = cols.row_mut(row);
                for ci in 0..c {
                    for di in 0..kernel {
                        let r = i + di;
                        if r < pad || r - pad >= h {
                            continue;
                        }
                        for dj in 0..kernel {
                            let s = j + dj;
                            if s < pad || s - pad >= w {
                                continue;
                            }
                            out[ci * kk + di * kernel + dj] = x[[bi, ci, r - pad, s - pad]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize, usize), kernel: usize) -> Array4<f64> {
    let (b, c, h, w) = shape;
    let pad = kernel / 2;
    let kk = kernel * kernel;
    let mut x = Array4::<f64>::zeros(shape);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = cols.row((bi * h + i) * w + j);
                for ci in 0..c {
                    for di in 0..kernel {
                        let r = i + di;
                        if r < pad || r - pad >= h {
                            continue;
                        }
                        for dj in 0..kernel {
                            let s = j + dj;
                            if s < pad || s - pad >= w {
                                continue;
                            }
                            x[[bi, ci, r - pad, s - pad]] += row[ci * kk + di * kernel + dj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn weight_matrix(params: &LayerParams) -> Array2<f64> {
    let co = params.weight.shape()[0];
    let rest = params.weight.len() / co;
    params
        .weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, rest))
        .unwrap()
}

pub(super) fn forward(
    act: Activation,
    kernel: usize,
    params: &LayerParams,
    x: &Tensor,
) -> Result<(Tensor, ForwardCache)> {
    let x4 = x
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let (b, _, h, w) = x4.dim();
    let cols = im2col(&x4, kernel);
    let wm = weight_matrix(params);
    let co = wm.nrows();
    // (b*h*w, co) -> (b, co, h, w)
    let mut out = cols.dot(&wm.t());
    out += &params
        .bias
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let pre = out
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, h, w, co))
        .unwrap()
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .into_owned()
        .into_dyn();
    let y = pre.mapv(|z| act.apply(z));
    Ok((y, ForwardCache::Conv2d { cols, pre }))
}

pub(super) fn vjp(
    act: Activation,
    kernel: usize,
    params: &LayerParams,
    cols: &Array2<f64>,
    pre: &Tensor,
    v: &Tensor,
) -> Result<VjpResult> {
    if v.shape() != pre.shape() {
        return Err(Error::Contract(format!(
            "conv cotangent shape {:?} does not match output {:?}",
            v.shape(),
            pre.shape()
        )));
    }
    let mut dz = v.to_owned();
    if act != Activation::Identity {
        dz.zip_mut_with(pre, |d, &z| *d *= act.derivative(z));
    }
    let dz4 = dz.into_dimensionality::<Ix4>().unwrap();
    let (b, co, h, w) = dz4.dim();
    let dz_mat = dz4
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * h * w, co))
        .unwrap();
    let wm = weight_matrix(params);
    let grad_w = dz_mat
        .t()
        .dot(cols)
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(params.weight.shape()))
        .unwrap();
    let grad_b = dz_mat.sum_axis(Axis(0)).into_dyn();
    let grad_cols = dz_mat.dot(&wm);
    let ci = cols.ncols() / (kernel * kernel);
    let grad_input = col2im(&grad_cols, (b, ci, h, w), kernel).into_dyn();
    Ok(VjpResult {
        grad_input,
        grad_params: LayerParams {
            weight: grad_w,
            bias: grad_b,
        },
    })
}
