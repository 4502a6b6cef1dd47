use ndarray::{Array4, Ix4, IxDyn};

use super::{ForwardCache, Tensor};
use crate::{Error, Result};

pub(super) fn forward(window: usize, stride: usize, x: &Tensor) -> (Tensor, ForwardCache) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = x4.dim();
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut y = Array4::<f64>::zeros((b, c, ho, wo));
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for di in 0..window {
                        for dj in 0..window {
                            let (r, s) = (i * stride + di, j * stride + dj);
                            let val = x4[[bi, ci, r, s]];
                            // first maximum wins on ties
                            if val > best {
                                best = val;
                                at = ((bi * c + ci) * h + r) * w + s;
                            }
                        }
                    }
                    y[[bi, ci, i, j]] = best;
                    argmax.push(at);
                }
            }
        }
    }
    (
        y.into_dyn(),
        ForwardCache::MaxPool2d {
            argmax,
            input_shape: x.shape().to_vec(),
        },
    )
}

pub(super) fn vjp(argmax: &[usize], input_shape: &[usize], v: &Tensor) -> Result<Tensor> {
    if v.len() != argmax.len() {
        return Err(Error::Contract(format!(
            "max-pool cotangent has {} entries, forward produced {}",
            v.len(),
            argmax.len()
        )));
    }
    let mut g = Tensor::zeros(IxDyn(input_shape));
    let flat = g.as_slice_mut().unwrap();
    for (&idx, &val) in argmax.iter().zip(v.iter()) {
        flat[idx] += val;
    }
    Ok(g)
}
