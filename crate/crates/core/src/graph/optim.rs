use crate::detops::{OpCtx, OpError, Tensor};

/// Optimizer selection; the values become attributes on every update node,
/// so they are hashed into traces like any other structure.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerCfg {
    Sgd {
        lr: f32,
    },
    Adam {
        lr: f32,
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_eps")]
        eps: f32,
    },
}

fn default_beta1() -> f32 {
    0.9
}

fn default_beta2() -> f32 {
    0.999
}

fn default_eps() -> f32 {
    1e-8
}

impl OptimizerCfg {
    pub fn adam(lr: f32) -> Self {
        OptimizerCfg::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Number of extra state tensors per parameter (Adam moments).
    pub fn moment_count(&self) -> usize {
        match self {
            OptimizerCfg::Sgd { .. } => 0,
            OptimizerCfg::Adam { .. } => 2,
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), OpError> {
    if a.shape() != b.shape() {
        return Err(OpError::ShapeMismatch {
            op,
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// p' = p - lr * g, elementwise.
pub fn sgd_update(ctx: OpCtx, param: &Tensor, grad: &Tensor, lr: f32) -> Result<Tensor, OpError> {
    check_same("sgd_update", param, grad)?;
    let pv = param.values();
    let gv = grad.values();
    let mut out = vec![0.0f32; pv.len()];
    ctx.run_partitioned(pv.len(), 1, &mut out, |first, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = first + k;
            *o = pv[i] - lr * gv[i];
        }
    });
    Tensor::new(param.shape().clone(), out)
}

// beta^t by serial multiplication: f32::powi makes no rounding guarantees,
// an explicit ascending fold does.
fn pow_serial(base: f32, t: u64) -> f32 {
    let mut acc = 1.0f32;
    for _ in 0..t {
        acc *= base;
    }
    acc
}

/// One Adam step at 1-based time `t`, written exactly as the recurrence:
/// m' = b1*m + (1-b1)*g, v' = b2*v + (1-b2)*g*g, then bias-corrected
/// mhat/vhat and p' = p - lr * mhat / (sqrt(vhat) + eps). Everything is
/// elementwise in a fixed per-element order; `sqrt` is correctly rounded.
/// Returns (p', m', v').
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    ctx: OpCtx,
    param: &Tensor,
    grad: &Tensor,
    m: &Tensor,
    v: &Tensor,
    t: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) -> Result<(Tensor, Tensor, Tensor), OpError> {
    check_same("adam_update", param, grad)?;
    check_same("adam_update", param, m)?;
    check_same("adam_update", param, v)?;
    if t == 0 {
        return Err(OpError::InvalidShape("adam time index is 1-based".into()));
    }
    let c1 = 1.0 - pow_serial(beta1, t);
    let c2 = 1.0 - pow_serial(beta2, t);
    let om_b1 = 1.0 - beta1;
    let om_b2 = 1.0 - beta2;
    let (pv, gv, mv, vv) = (param.values(), grad.values(), m.values(), v.values());
    let n = pv.len();

    let mut m_out = vec![0.0f32; n];
    ctx.run_partitioned(n, 1, &mut m_out, |first, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = first + k;
            *o = beta1 * mv[i] + om_b1 * gv[i];
        }
    });
    let mut v_out = vec![0.0f32; n];
    ctx.run_partitioned(n, 1, &mut v_out, |first, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = first + k;
            *o = beta2 * vv[i] + om_b2 * (gv[i] * gv[i]);
        }
    });
    let mut p_out = vec![0.0f32; n];
    {
        let (m_ref, v_ref) = (&m_out, &v_out);
        ctx.run_partitioned(n, 1, &mut p_out, |first, chunk| {
            for (k, o) in chunk.iter_mut().enumerate() {
                let i = first + k;
                let mhat = m_ref[i] / c1;
                let vhat = v_ref[i] / c2;
                *o = pv[i] - lr * (mhat / (vhat.sqrt() + eps));
            }
        });
    }
    let shape = param.shape().clone();
    Ok((
        Tensor::new(shape.clone(), p_out)?,
        Tensor::new(shape.clone(), m_out)?,
        Tensor::new(shape, v_out)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detops::Shape;

    fn t1(v: &[f32]) -> Tensor {
        Tensor::new(Shape::new(vec![v.len()]).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let p = t1(&[1.0, -2.0]);
        let g = t1(&[0.5, -0.5]);
        let p2 = sgd_update(OpCtx::serial(), &p, &g, 0.1).unwrap();
        assert_eq!(p2.values(), &[1.0 - 0.1 * 0.5, -2.0 + 0.1 * 0.5]);
    }

    #[test]
    fn adam_scalar_matches_recurrence_at_t1() {
        // independent recomputation of the t=1 recurrence on one element
        let (lr, b1, b2, eps) = (0.1f32, 0.9f32, 0.999f32, 1e-8f32);
        let (p0, g0) = (2.0f32, 0.5f32);
        let m1 = b1 * 0.0 + (1.0 - b1) * g0;
        let v1 = b2 * 0.0 + (1.0 - b2) * (g0 * g0);
        let mhat = m1 / (1.0 - b1);
        let vhat = v1 / (1.0 - b2);
        let want = p0 - lr * (mhat / (vhat.sqrt() + eps));

        let (p, m, v) = (t1(&[p0]), t1(&[0.0]), t1(&[0.0]));
        let g = t1(&[g0]);
        let (p1, m_new, v_new) =
            adam_update(OpCtx::serial(), &p, &g, &m, &v, 1, lr, b1, b2, eps).unwrap();
        assert_eq!(p1.values()[0].to_bits(), want.to_bits());
        assert_eq!(m_new.values()[0], m1);
        assert_eq!(v_new.values()[0], v1);
    }

    #[test]
    fn adam_zero_lr_freezes_params_but_not_moments() {
        let p = t1(&[1.0, 2.0, 3.0]);
        let g = t1(&[0.3, -0.2, 0.9]);
        let z = Tensor::zeros(p.shape().clone());
        let (p1, m1, v1) =
            adam_update(OpCtx::serial(), &p, &g, &z, &z, 1, 0.0, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p1, p);
        assert_ne!(m1, z);
        assert_ne!(v1, z);
    }

    #[test]
    fn adam_rejects_t_zero() {
        let p = t1(&[1.0]);
        let z = Tensor::zeros(p.shape().clone());
        assert!(adam_update(OpCtx::serial(), &p, &z, &z, &z, 0, 0.1, 0.9, 0.999, 1e-8).is_err());
    }
}
