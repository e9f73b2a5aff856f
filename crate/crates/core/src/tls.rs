//! Two-level-system limit of the resonator (|K| → ∞) in closed form.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{DriveField, FrequencyGrid, SystemParams};
use crate::spectrum::SpectrumSeries;

const I: C64 = C64::new(0.0, 1.0);

/// Steady state `<σ>` and `<σ†σ>` of the driven two-level system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TlsSteadyState {
    pub sigma: C64,
    pub excitation: f64,
    /// `κ / (κ_ex + κ_in)`, equal to 1 without dephasing.
    pub rbar: f64,
}

pub fn tls_steady_state(params: &SystemParams, drive: &DriveField) -> TlsSteadyState {
    let kex = params.kappa_ex();
    let f = drive.amplitude();
    let rbar = params.kappa_total() / params.kappa_loss();
    let z = C64::new(params.kappa_total() / 2.0, drive.omega_d() - params.omega0());
    let denom = 2.0 * rbar * kex * f.norm_sqr() + z.norm_sqr();
    TlsSteadyState {
        sigma: -I * kex.sqrt() * z * f / denom,
        excitation: rbar * kex * f.norm_sqr() / denom,
        rbar,
    }
}

/// Weight `|F - i sqrt(κ_ex) <σ>|²` of the elastic peak.
pub fn tls_coherent_power(params: &SystemParams, drive: &DriveField) -> f64 {
    let ss = tls_steady_state(params, drive);
    (drive.amplitude() - I * params.kappa_ex().sqrt() * ss.sigma).norm_sqr()
}

fn det3(m: &[[C64; 3]; 3]) -> C64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Laplace transforms `(β̄1, β̄2, β̄3)` of the connected correlators of
/// `σ†` with `σ`, `σ†` and `σ†σ`, solved by Cramer's rule.
pub fn tls_correlators(params: &SystemParams, drive: &DriveField, ss: &TlsSteadyState, s: C64) -> Result<[C64; 3]> {
    let sk = params.kappa_ex().sqrt();
    let f = drive.amplitude();
    let delta = drive.omega_d() - params.omega0();
    let half = params.kappa_total() / 2.0;
    let m = [
        [s - I * delta + half, C64::new(0.0, 0.0), -2.0 * I * sk * f],
        [C64::new(0.0, 0.0), s + I * delta + half, 2.0 * I * sk * f.conj()],
        [-I * sk * f.conj(), I * sk * f, s + params.kappa_loss()],
    ];
    let sc = ss.sigma.conj();
    let b = [
        C64::new(ss.excitation - ss.sigma.norm_sqr(), 0.0),
        -sc * sc,
        -sc * ss.excitation,
    ];
    let det = det3(&m);
    let scale = m.iter().flatten().map(|v| v.norm()).fold(0.0, f64::max);
    if det.norm() <= f64::EPSILON * scale.powi(3) {
        return Err(Error::Singular {
            context: "two-level correlator system",
            condition: f64::INFINITY,
        });
    }
    let mut out = [C64::new(0.0, 0.0); 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = b[r];
        }
        *o = det3(&mk) / det;
    }
    Ok(out)
}

/// Mollow fluorescence spectrum of the two-level system.
pub fn tls_incoherent_spectrum(params: &SystemParams, drive: &DriveField, grid: &FrequencyGrid) -> Result<SpectrumSeries> {
    let ss = tls_steady_state(params, drive);
    let pre = params.kappa_ex() / PI;
    let values = grid
        .points()
        .par_iter()
        .map(|&w| {
            let s = C64::new(0.0, drive.omega_d() - w);
            Ok(pre * tls_correlators(params, drive, &ss, s)?[0].re)
        })
        .collect::<Result<Vec<_>>>()?;
    SpectrumSeries::new(grid.clone(), values, tls_coherent_power(params, drive), drive.omega_d())
}
