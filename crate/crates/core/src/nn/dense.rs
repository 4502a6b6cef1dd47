use ndarray::{Array2, Axis, Ix2};

use super::{Activation, ForwardCache, LayerParams, Tensor, VjpResult};
use crate::{Error, Result};

pub(super) fn forward(
    act: Activation,
    params: &LayerParams,
    x: &Tensor,
) -> Result<(Tensor, ForwardCache)> {
    let input = x
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::Dimension(e.to_string()))?
        .to_owned();
    let w = params.weight.view().into_dimensionality::<Ix2>().unwrap();
    let b = params
        .bias
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap();
    let mut pre = input.dot(&w.t());
    pre += &b;
    let y = pre.mapv(|z| act.apply(z)).into_dyn();
    Ok((y, ForwardCache::Dense { input, pre }))
}

pub(super) fn vjp(
    act: Activation,
    params: &LayerParams,
    input: &Array2<f64>,
    pre: &Array2<f64>,
    v: &Tensor,
) -> Result<VjpResult> {
    if v.shape() != pre.shape() {
        return Err(Error::Contract(format!(
            "dense cotangent shape {:?} does not match output {:?}",
            v.shape(),
            pre.shape()
        )));
    }
    let v = v.view().into_dimensionality::<Ix2>().unwrap();
    let dz = if act == Activation::Identity {
        v.to_owned()
    } else {
        let mut dz = v.to_owned();
        dz.zip_mut_with(pre, |d, &z| *d *= act.derivative(z));
        dz
    };
    let w = params.weight.view().into_dimensionality::<Ix2>().unwrap();
    let grad_input = dz.dot(&w).into_dyn();
    let grad_w = dz.t().dot(input).into_dyn();
    let grad_b = dz.sum_axis(Axis(0)).into_dyn();
    Ok(VjpResult {
        grad_input,
        grad_params: LayerParams {
            weight: grad_w,
            bias: grad_b,
        },
    })
}
