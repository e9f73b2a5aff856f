//! Physical parameters, unit conversions and the (m, n) moment index map.
//!
//! Every quantity is stored as an angular frequency (rad/s) or a rate (1/s).
//! Conversions to and from the Hz/MHz/GHz values used at the CLI boundary
//! live here so the rest of the crate never sees a `2π`.

use std::f64::consts::TAU;

use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Reduced Planck constant in J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// Angular frequency (rad/s) for a value given in MHz.
pub fn mhz(f: f64) -> f64 {
    TAU * f * 1e6
}

/// Angular frequency (rad/s) for a value given in GHz.
pub fn ghz(f: f64) -> f64 {
    TAU * f * 1e9
}

/// Frequency in MHz of an angular frequency.
pub fn to_mhz(omega: f64) -> f64 {
    omega / TAU / 1e6
}

/// Frequency in Hz of an angular frequency.
pub fn to_hz(omega: f64) -> f64 {
    omega / TAU
}

/// Resonator parameters.
///
/// `kerr` carries its sign; the remaining rates are non-negative with a
/// strictly positive external coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    omega0: f64,
    kerr: f64,
    kappa_ex: f64,
    kappa_in: f64,
    gamma_p: f64,
}

impl SystemParams {
    /// All arguments in rad/s.
    pub fn new(omega0: f64, kerr: f64, kappa_ex: f64, kappa_in: f64, gamma_p: f64) -> Result<Self> {
        let all = [omega0, kerr, kappa_ex, kappa_in, gamma_p];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("system parameters must be finite".into()));
        }
        if omega0 <= 0.0 {
            return Err(Error::InvalidParameter(format!("omega0 must be positive, got {omega0}")));
        }
        if kappa_ex <= 0.0 {
            return Err(Error::InvalidParameter(format!("kappa_ex must be positive, got {kappa_ex}")));
        }
        if kappa_in < 0.0 || gamma_p < 0.0 {
            return Err(Error::InvalidParameter(
                "kappa_in and gamma_p must be non-negative".into(),
            ));
        }
        Ok(Self {
            omega0,
            kerr,
            kappa_ex,
            kappa_in,
            gamma_p,
        })
    }

    /// Same as [`SystemParams::new`] but with `omega0` in GHz and every
    /// rate in MHz (values divided by 2π).
    pub fn from_mhz(
        omega0_ghz: f64,
        kerr_mhz: f64,
        kappa_ex_mhz: f64,
        kappa_in_mhz: f64,
        gamma_p_mhz: f64,
    ) -> Result<Self> {
        Self::new(
            ghz(omega0_ghz),
            mhz(kerr_mhz),
            mhz(kappa_ex_mhz),
            mhz(kappa_in_mhz),
            mhz(gamma_p_mhz),
        )
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }

    pub fn kerr(&self) -> f64 {
        self.kerr
    }

    pub fn kappa_ex(&self) -> f64 {
        self.kappa_ex
    }

    pub fn kappa_in(&self) -> f64 {
        self.kappa_in
    }

    pub fn gamma_p(&self) -> f64 {
        self.gamma_p
    }

    /// Energy-loss rate `kappa_ex + kappa_in`.
    pub fn kappa_loss(&self) -> f64 {
        self.kappa_ex + self.kappa_in
    }

    /// Total linewidth `kappa_ex + kappa_in + 2 gamma_p`.
    pub fn kappa_total(&self) -> f64 {
        self.kappa_ex + self.kappa_in + 2.0 * self.gamma_p
    }

    /// Apparent internal loss seen by a weak reflection probe.
    pub fn kappa_in_star(&self) -> f64 {
        self.kappa_in + 2.0 * self.gamma_p
    }

    pub fn with_kerr(self, kerr: f64) -> Result<Self> {
        Self::new(self.omega0, kerr, self.kappa_ex, self.kappa_in, self.gamma_p)
    }

    pub fn with_kappa_in(self, kappa_in: f64) -> Result<Self> {
        Self::new(self.omega0, self.kerr, self.kappa_ex, kappa_in, self.gamma_p)
    }

    pub fn with_gamma_p(self, gamma_p: f64) -> Result<Self> {
        Self::new(self.omega0, self.kerr, self.kappa_ex, self.kappa_in, gamma_p)
    }
}

/// Coherent drive injected through the signal port.
///
/// `|amplitude|²` is the incident photon rate; the phase is a gauge choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveField {
    omega_d: f64,
    amplitude: C64,
}

impl DriveField {
    pub fn new(omega_d: f64, amplitude: C64) -> Result<Self> {
        if !omega_d.is_finite() || omega_d <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "drive frequency must be positive and finite, got {omega_d}"
            )));
        }
        if !amplitude.re.is_finite() || !amplitude.im.is_finite() {
            return Err(Error::InvalidParameter("drive amplitude must be finite".into()));
        }
        Ok(Self { omega_d, amplitude })
    }

    /// Resonant drive (`omega_d = omega0`) with a real amplitude.
    pub fn resonant(params: &SystemParams, amplitude: f64) -> Result<Self> {
        Self::new(params.omega0, C64::new(amplitude, 0.0))
    }

    /// Resonant drive specified by `F / sqrt(kappa_ex)`.
    pub fn resonant_normalized(params: &SystemParams, f_over_sqrt_kex: f64) -> Result<Self> {
        Self::resonant(params, f_over_sqrt_kex * params.kappa_ex.sqrt())
    }

    /// Drive at `omega_d` with the amplitude set by the at-chip power.
    pub fn from_power_dbm(omega_d: f64, power_dbm: f64) -> Result<Self> {
        Self::new(omega_d, amplitude_from_power(power_dbm, omega_d)?)
    }

    pub fn omega_d(&self) -> f64 {
        self.omega_d
    }

    pub fn amplitude(&self) -> C64 {
        self.amplitude
    }

    /// Incident photon rate `|F|²`.
    pub fn photon_rate(&self) -> f64 {
        self.amplitude.norm_sqr()
    }

    /// Copy with the amplitude multiplied by `exp(i phi)`.
    pub fn with_phase(self, phi: f64) -> Self {
        Self {
            amplitude: self.amplitude * C64::from_polar(1.0, phi),
            ..self
        }
    }

    pub fn with_amplitude(self, amplitude: C64) -> Self {
        Self { amplitude, ..self }
    }

    pub fn with_omega(self, omega_d: f64) -> Result<Self> {
        Self::new(omega_d, self.amplitude)
    }

    /// Rotating-frame detuning `omega0 - omega_d`.
    pub fn detuning(&self, params: &SystemParams) -> f64 {
        params.omega0 - self.omega_d
    }

    /// Two-level Rabi frequency `2 sqrt(kappa_ex) |F|`.
    pub fn rabi_frequency(&self, params: &SystemParams) -> f64 {
        2.0 * params.kappa_ex.sqrt() * self.amplitude.norm()
    }
}

/// Drive amplitude (1/√s, zero phase) for an at-chip power in dBm.
///
/// `-inf` dBm is accepted as the zero-power limit.
pub fn amplitude_from_power(power_dbm: f64, omega_d: f64) -> Result<C64> {
    if power_dbm.is_nan() || power_dbm == f64::INFINITY {
        return Err(Error::InvalidParameter(format!("drive power must be finite, got {power_dbm}")));
    }
    if !omega_d.is_finite() || omega_d <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "drive frequency must be positive and finite, got {omega_d}"
        )));
    }
    let watts = 10f64.powf((power_dbm - 30.0) / 10.0);
    let rate = watts / (HBAR * omega_d);
    Ok(C64::new(rate.sqrt(), 0.0))
}

/// Inverse of [`amplitude_from_power`]; returns `-inf` for zero amplitude.
pub fn power_from_amplitude(amplitude: C64, omega_d: f64) -> f64 {
    let watts = amplitude.norm_sqr() * HBAR * omega_d;
    10.0 * watts.log10() + 30.0
}

/// Free-evolution rate of the normally ordered moment `a†^m a^n` in the
/// laboratory frame.
pub fn epsilon(m: usize, n: usize, params: &SystemParams) -> C64 {
    rate(m, n, params, params.omega0)
}

/// Same as [`epsilon`] in the frame rotating at the drive frequency.
pub fn epsilon_detuned(m: usize, n: usize, params: &SystemParams, omega_d: f64) -> C64 {
    rate(m, n, params, params.omega0 - omega_d)
}

fn rate(m: usize, n: usize, params: &SystemParams, frequency: f64) -> C64 {
    let (mf, nf) = (m as f64, n as f64);
    let diff = mf - nf;
    let im = diff * frequency + diff * (mf + nf - 1.0) * params.kerr / 2.0;
    let re = -(mf + nf) * params.kappa_loss() / 2.0 - diff * diff * params.gamma_p;
    C64::new(re, im)
}

/// Position `(m, n)` on the truncated moment grid `0 <= m, n <= n_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MomentIndex {
    pub m: usize,
    pub n: usize,
    pub n_max: usize,
}

impl MomentIndex {
    pub fn new(m: usize, n: usize, n_max: usize) -> Option<Self> {
        (m <= n_max && n <= n_max).then_some(Self { m, n, n_max })
    }

    /// Row-major flat position `m (n_max + 1) + n`.
    pub fn flat(&self) -> usize {
        self.m * (self.n_max + 1) + self.n
    }

    pub fn from_flat(flat: usize, n_max: usize) -> Option<Self> {
        let side = n_max + 1;
        (flat < side * side).then(|| Self {
            m: flat / side,
            n: flat % side,
            n_max,
        })
    }
}

/// Number of unknowns on the `(n_max + 1)²` moment grid.
pub fn grid_dim(n_max: usize) -> usize {
    (n_max + 1) * (n_max + 1)
}

/// Flat index of `(m, n)` without bounds checking.
#[inline]
pub(crate) fn flat(m: usize, n: usize, n_max: usize) -> usize {
    m * (n_max + 1) + n
}

/// Strictly increasing list of angular frequencies (rad/s).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyGrid {
    points: Vec<f64>,
}

impl FrequencyGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter("frequency grid is empty".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("frequency grid has non-finite points".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "frequency grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { points })
    }

    /// `count` equally spaced points on `[center - half_span, center + half_span]`.
    pub fn uniform(center: f64, half_span: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParameter("grid needs at least one point".into()));
        }
        if count == 1 {
            return Self::new(vec![center]);
        }
        if !(half_span > 0.0) {
            return Err(Error::InvalidParameter("grid span must be positive".into()));
        }
        let step = 2.0 * half_span / (count - 1) as f64;
        let start = center - half_span;
        Self::new((0..count).map(|k| start + step * k as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Spacing of a uniform grid; `None` if the spacing varies by more
    /// than one part in 1e6 or the grid has a single point.
    pub fn uniform_step(&self) -> Option<f64> {
        if self.points.len() < 2 {
            return None;
        }
        let step = (self.points[self.points.len() - 1] - self.points[0]) / (self.points.len() - 1) as f64;
        let ok = self
            .points
            .windows(2)
            .all(|w| ((w[1] - w[0]) - step).abs() <= 1e-6 * step);
        ok.then_some(step)
    }

    /// Index of the point closest to `omega`.
    pub fn nearest(&self, omega: f64) -> usize {
        match self.points.binary_search_by(|p| p.total_cmp(&omega)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i >= self.points.len() => self.points.len() - 1,
            Err(i) => {
                if (self.points[i] - omega).abs() < (omega - self.points[i - 1]).abs() {
                    i
                } else {
                    i - 1
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kerr_regime() -> SystemParams {
        SystemParams::from_mhz(10.0, -20.0, 0.5, 0.5, 0.1).unwrap()
    }

    #[test]
    fn power_conversion_matches_hand_arithmetic() {
        let omega = ghz(10.3653);
        let f = amplitude_from_power(-112.8, omega).unwrap();
        // P = 10^(-14.28) W, hbar*omega = 6.868e-24 J
        let rate = 10f64.powf(-14.28) / (HBAR * omega);
        assert!((f.norm_sqr() - rate).abs() / rate < 1e-12);
        assert!((f.norm_sqr() - 7.64e8).abs() / 7.64e8 < 2e-3);
        assert!((f.re - 2.764e4).abs() < 10.0);
        assert_eq!(f.im, 0.0);
    }

    #[test]
    fn zero_power_gives_zero_amplitude() {
        let f = amplitude_from_power(f64::NEG_INFINITY, ghz(10.0)).unwrap();
        assert_eq!(f, C64::new(0.0, 0.0));
    }

    #[test]
    fn power_roundtrip() {
        let omega = ghz(10.0);
        let p = -140.0;
        let back = power_from_amplitude(amplitude_from_power(p, omega).unwrap(), omega);
        assert!(((back - p) / p).abs() < 1e-12);
    }

    #[test]
    fn non_finite_power_is_rejected() {
        assert!(amplitude_from_power(f64::NAN, ghz(10.0)).is_err());
        assert!(amplitude_from_power(f64::INFINITY, ghz(10.0)).is_err());
        assert!(amplitude_from_power(-100.0, 0.0).is_err());
    }

    #[test]
    fn epsilon_examples() {
        let p = kerr_regime();
        assert_eq!(epsilon(0, 0, &p), C64::new(0.0, 0.0));

        let linear = SystemParams::from_mhz(10.0, 0.0, 0.5, 0.5, 0.1).unwrap();
        let e10 = epsilon(1, 0, &linear);
        assert!((e10.im - ghz(10.0)).abs() < 1e-6);
        assert!((e10.re + mhz(0.6)).abs() < 1e-6);

        let e11 = epsilon(1, 1, &p);
        assert_eq!(e11.im, 0.0);
        assert!((e11.re + p.kappa_loss()).abs() < 1e-9);
    }

    #[test]
    fn detuned_rate_subtracts_drive_rotation() {
        let p = kerr_regime();
        let wd = p.omega0() - mhz(3.0);
        for (m, n) in [(0, 1), (2, 0), (3, 5)] {
            let lhs = epsilon_detuned(m, n, &p, wd);
            let rhs = epsilon(m, n, &p) - C64::new(0.0, (m as f64 - n as f64) * wd);
            assert!((lhs - rhs).norm() < 1e-3, "{m},{n}");
        }
    }

    #[test]
    fn moment_index_roundtrip() {
        let n_max = 7;
        for flat in 0..grid_dim(n_max) {
            let idx = MomentIndex::from_flat(flat, n_max).unwrap();
            assert_eq!(idx.flat(), flat);
        }
        assert!(MomentIndex::new(8, 0, n_max).is_none());
        assert!(MomentIndex::from_flat(64, n_max).is_none());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SystemParams::from_mhz(10.0, -20.0, 0.0, 0.5, 0.1).is_err());
        assert!(SystemParams::from_mhz(10.0, -20.0, 0.5, -0.1, 0.1).is_err());
        assert!(SystemParams::from_mhz(0.0, -20.0, 0.5, 0.1, 0.1).is_err());
        assert!(SystemParams::from_mhz(10.0, f64::NAN, 0.5, 0.1, 0.1).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(FrequencyGrid::new(vec![]).is_err());
        assert!(FrequencyGrid::new(vec![1.0, 1.0]).is_err());
        assert!(FrequencyGrid::new(vec![1.0, f64::NAN]).is_err());
        let g = FrequencyGrid::uniform(10.0, 2.0, 5).unwrap();
        assert_eq!(g.points(), &[8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(g.uniform_step(), Some(1.0));
        assert_eq!(g.nearest(10.4), 2);
        assert_eq!(g.nearest(-3.0), 0);
        assert_eq!(g.nearest(99.0), 4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn epsilon_conjugate_symmetry(m in 0usize..25, n in 0usize..25,
                                          k in -50.0f64..50.0, g in 0.0f64..1.0) {
                let p = SystemParams::from_mhz(10.0, k, 0.5, 0.3, g).unwrap();
                let a = epsilon(m, n, &p);
                let b = epsilon(n, m, &p).conj();
                prop_assert!((a - b).norm() <= 1e-12 * a.norm().max(1.0));
            }

            #[test]
            fn epsilon_is_damped(m in 0usize..25, n in 0usize..25, g in 0.0f64..1.0) {
                prop_assume!((m, n) != (0, 0));
                let p = SystemParams::from_mhz(10.0, -20.0, 0.5, 0.0, g).unwrap();
                prop_assert!(epsilon(m, n, &p).re < 0.0);
            }

            #[test]
            fn power_amplitude_bijection(p in -200.0f64..-60.0) {
                let w = ghz(10.0);
                let back = power_from_amplitude(amplitude_from_power(p, w).unwrap(), w);
                prop_assert!((back - p).abs() < 1e-9);
            }
        }
    }
}
