use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Parameter, Scalar};

/// Parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn sgd(lr: f64) -> Self {
        UpdateRule::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        UpdateRule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one update to every parameter. Gradients are left in place; call
/// `zero_grad` explicitly before the next accumulation.
pub fn optimizer_step<T: Scalar>(params: &mut [&mut Parameter<T>], rule: &UpdateRule) -> Result<()> {
    // Validate first so a missing gradient leaves every parameter untouched.
    for p in params.iter() {
        p.require_grad()?;
    }
    for p in params.iter_mut() {
        step_one(p, rule)?;
    }
    Ok(())
}

fn step_one<T: Scalar>(p: &mut Parameter<T>, rule: &UpdateRule) -> Result<()> {
    p.step += 1;
    match *rule {
        UpdateRule::Sgd { lr } => {
            let lr = T::of(lr);
            let Parameter { value, .. } = p;
            let g = value.grad().map(<[T]>::to_vec).unwrap_or_default();
            value.data_mut().iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * *g);
        }
        UpdateRule::Adam { lr, beta1, beta2, eps } => {
            let t = p.step as i32;
            let c1 = T::of(1.0 - beta1.powi(t));
            let c2 = T::of(1.0 - beta2.powi(t));
            let (b1, b2, lr, eps) = (T::of(beta1), T::of(beta2), T::of(lr), T::of(eps));
            let Parameter { value, first_moment, second_moment, .. } = p;
            let g = value.grad().map(<[T]>::to_vec).unwrap_or_default();
            for (((w, m), v), &g) in value
                .data_mut()
                .iter_mut()
                .zip(first_moment.iter_mut())
                .zip(second_moment.iter_mut())
                .zip(&g)
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    Ok(())
}
