//! Adaptive Dormand-Prince 5(4) integration of the plant between samples.
//! The dynamics are autonomous, so the node times are not needed.

use nalgebra::{Vector2, Vector4};

use ellada_core::DomainError;

use crate::model::TankModel;

const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights (also the last row of `A`).
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Integration {
    pub state: Vector4<f64>,
    pub steps: usize,
    pub rejected: usize,
}

/// Integrates `dh/dt = f(h, v)` over `[0, span]` with mixed
/// absolute/relative error control at `tol`.
pub fn integrate(
    model: &TankModel,
    h0: &Vector4<f64>,
    v: &Vector2<f64>,
    span: f64,
    tol: f64,
) -> Result<Integration, DomainError> {
    assert!(span >= 0.0 && tol > 0.0);
    let mut h = *h0;
    let mut t = 0.0;
    let mut step = (span * 1e-2).max(1e-6).min(span);
    let (mut steps, mut rejected) = (0, 0);
    let mut k = [Vector4::zeros(); 7];
    k[0] = model.rhs(&h, v)?;
    while t < span {
        if span - t < step {
            step = span - t;
        }
        for s in 1..7 {
            let mut y = h;
            for (j, kj) in k.iter().enumerate().take(s) {
                y += kj * (step * A[s][j]);
            }
            // trial states may dip below zero on rejected steps
            k[s] = model.rhs_unchecked(&y, v);
        }
        let mut y5 = h;
        let mut err = Vector4::zeros();
        for s in 0..7 {
            y5 += k[s] * (step * B5[s]);
            err += k[s] * (step * (B5[s] - B4[s]));
        }
        let scale = Vector4::from_fn(|i, _| tol * (1.0 + h[i].abs().max(y5[i].abs())));
        let ratio = err.component_div(&scale).amax();
        if ratio <= 1.0 {
            t += step;
            h = y5;
            steps += 1;
            // first-same-as-last
            k[0] = model.rhs(&h, v)?;
        } else {
            rejected += 1;
        }
        let factor = if ratio == 0.0 {
            5.0
        } else {
            (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
        };
        step *= factor;
        if step < 1e-12 * span.max(1.0) {
            return Err(DomainError(
                "step size underflow in plant integration".into(),
            ));
        }
    }
    Ok(Integration {
        state: h,
        steps,
        rejected,
    })
}
