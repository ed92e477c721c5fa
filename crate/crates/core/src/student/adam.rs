use super::mlp::{Params, StudentNet};
use super::real::Real;
use crate::error::{Error, Result};

/// One bias-corrected Adam update of every parameter of `net`.
pub fn adam_step<T: Real>(
    net: &mut StudentNet<T>,
    grads: &Params<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if !net.params.same_shape(grads) {
        return Err(Error::Shape("gradient shape differs from network".into()));
    }
    for (name, block) in grads.blocks() {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { block: name });
        }
    }
    net.adam.step += 1;
    let t = net.adam.step as i32;
    let (b1, b2) = (T::from_f64(betas.0), T::from_f64(betas.1));
    let one = T::one();
    let correction1 = T::from_f64(1.0 - betas.0.powi(t));
    let correction2 = T::from_f64(1.0 - betas.1.powi(t));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(eps);

    let StudentNet { params, adam } = net;
    let blocks = params
        .blocks_mut()
        .into_iter()
        .zip(adam.m.blocks_mut())
        .zip(adam.v.blocks_mut())
        .zip(grads.blocks());
    for ((((_, p), (_, m)), (_, v)), (_, g)) in blocks {
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    for (name, block) in net.params.blocks() {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: block.iter().position(|v| !v.is_finite()).unwrap(),
                context: format!("parameter block {name} after Adam step"),
            });
        }
    }
    Ok(())
}
