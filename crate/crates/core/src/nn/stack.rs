use rand::Rng;

use super::{layer_forward, layer_vjp, ForwardCache, LayerParams, LayerSpec, Tensor};
use crate::{Error, Result};

fn check_lengths(specs: &[LayerSpec], params: &[LayerParams]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Contract("empty layer stack".into()));
    }
    if specs.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} layer specs but {} parameter blocks",
            specs.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Per-sample output shape of a stack, validating every layer along the way.
pub fn stack_output_shape(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for spec in specs {
        spec.validate()?;
        shape = spec.output_shape(&shape)?;
    }
    Ok(shape)
}

pub fn init_stack<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Vec<LayerParams> {
    specs.iter().map(|s| LayerParams::init(s, rng)).collect()
}

pub fn stack_forward<R: Rng + ?Sized>(
    specs: &[LayerSpec],
    params: &[LayerParams],
    x: &Tensor,
    rng: &mut R,
    dropout_active: bool,
) -> Result<(Tensor, Vec<ForwardCache>)> {
    check_lengths(specs, params)?;
    let mut caches = Vec::with_capacity(specs.len());
    let mut iter = specs.iter().zip(params);
    let (s0, p0) = iter.next().unwrap();
    let (mut y, c0) = layer_forward(s0, p0, x, rng, dropout_active)?;
    caches.push(c0);
    for (spec, p) in iter {
        let (next, cache) = layer_forward(spec, p, &y, rng, dropout_active)?;
        caches.push(cache);
        y = next;
    }
    Ok((y, caches))
}

/// Reverse-order composition of the layer VJPs.
pub fn stack_vjp(
    specs: &[LayerSpec],
    params: &[LayerParams],
    caches: &[ForwardCache],
    v: &Tensor,
) -> Result<(Tensor, Vec<LayerParams>)> {
    check_lengths(specs, params)?;
    if caches.len() != specs.len() {
        return Err(Error::Contract(format!(
            "{} caches for a {}-layer stack",
            caches.len(),
            specs.len()
        )));
    }
    let mut grads = Vec::with_capacity(specs.len());
    let mut g = v.clone();
    for ((spec, p), cache) in specs.iter().zip(params).zip(caches).rev() {
        let r = layer_vjp(spec, p, cache, &g)?;
        grads.push(r.grad_params);
        g = r.grad_input;
    }
    grads.reverse();
    Ok((g, grads))
}
