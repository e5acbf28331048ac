use crate::model::ModelParams;

use super::backward::Gradients;

/// Rescales `g` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(mut g: Gradients, max_norm: f64) -> (Gradients, f64) {
    let norm = g.global_norm();
    if norm > max_norm {
        g.scale(max_norm / norm);
    }
    (g, norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(p: &ModelParams, lr: f64) -> Self {
        Self {
            m: ModelParams::zeros(p.arch),
            v: ModelParams::zeros(p.arch),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(p: &mut ModelParams, g: &Gradients, st: &mut AdamState) {
    st.step += 1;
    let (b1, b2) = (st.beta1, st.beta2);
    let c1 = 1.0 - b1.powi(st.step as i32);
    let c2 = 1.0 - b2.powi(st.step as i32);
    let (lr, eps) = (st.lr, st.eps_hat);
    let tensors = p.tensors_mut().into_iter().zip(g.tensors()).zip(st.m.tensors_mut()).zip(st.v.tensors_mut());
    for (((mut pt, gt), mut mt), mut vt) in tensors {
        ndarray::Zip::from(&mut pt).and(&gt).and(&mut mt).and(&mut vt).for_each(|w, &gr, m, v| {
            *m = b1 * *m + (1.0 - b1) * gr;
            *v = b2 * *v + (1.0 - b2) * gr * gr;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        });
    }
}
