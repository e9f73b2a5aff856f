//! Reflection coefficient of the resonator: the linear response used for
//! device characterization and the power-dependent coherent reflection used
//! to calibrate the input line.

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{to_hz, DriveField, SystemParams};
use crate::moments::solve_steady_moments;

const I: C64 = C64::new(0.0, 1.0);

/// `Γ = 1 - κ_ex / [i(ω_p - Ω₀) + (κ_ex + κ_in*)/2]`.
pub fn linear_reflection(omega_p: f64, omega0: f64, kappa_ex: f64, kappa_in_star: f64) -> C64 {
    let d = C64::new((kappa_ex + kappa_in_star) / 2.0, omega_p - omega0);
    C64::new(1.0, 0.0) - kappa_ex / d
}

/// Coherent reflection `1 - i sqrt(κ_ex) <a>/F` of a single (possibly
/// strong) probe, reported in the same convention as
/// [`linear_reflection`]. A vanishing probe returns the linear limit with
/// `κ_in* = κ_in + 2γ_p`.
pub fn nonlinear_reflection(params: &SystemParams, probe: &DriveField, n_max: usize) -> Result<C64> {
    let f = probe.amplitude();
    if f.norm() == 0.0 {
        return Ok(linear_reflection(
            probe.omega_d(),
            params.omega0(),
            params.kappa_ex(),
            params.kappa_in_star(),
        ));
    }
    let table = solve_steady_moments(params, probe, n_max)?;
    if table.truncation_warning() {
        return Err(Error::Truncation {
            n_max,
            detail: format!("edge population {:.2e} at probe power", table.edge_population()),
        });
    }
    let g = C64::new(1.0, 0.0) - I * params.kappa_ex().sqrt() * table.get(0, 1) / f;
    // the moment hierarchy uses e^{-iωt} fields; the fitting convention
    // has the opposite sign of the detuning
    Ok(g.conj())
}

/// `|Γ|` at `omega_p` for each at-chip probe power.
pub fn reflection_power_sweep(params: &SystemParams, omega_p: f64, powers_dbm: &[f64], n_max: usize) -> Result<Vec<f64>> {
    powers_dbm
        .par_iter()
        .map(|&p| {
            let probe = DriveField::from_power_dbm(omega_p, p)?;
            Ok(nonlinear_reflection(params, &probe, n_max)?.norm())
        })
        .collect()
}

/// Probe frequencies with measured complex reflection.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionTrace {
    omegas: Vec<f64>,
    gamma: Vec<C64>,
}

impl ReflectionTrace {
    pub fn new(omegas: Vec<f64>, gamma: Vec<C64>) -> Result<Self> {
        if omegas.len() != gamma.len() || omegas.len() < 8 {
            return Err(Error::InvalidParameter(
                "reflection trace needs at least 8 points with matching lengths".into(),
            ));
        }
        if omegas.windows(2).any(|w| !(w[1] > w[0])) || omegas.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("probe frequencies must be finite and increasing".into()));
        }
        if gamma.iter().any(|g| !g.re.is_finite() || !g.im.is_finite()) {
            return Err(Error::InvalidParameter("reflection values must be finite".into()));
        }
        Ok(Self { omegas, gamma })
    }

    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    pub fn gamma(&self) -> &[C64] {
        &self.gamma
    }

    /// Columns `freq_hz,re_gamma,im_gamma`; `#` lines are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut omegas = Vec::new();
        let mut gamma = Vec::new();
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                header_seen = true;
                if line.replace(' ', "") != "freq_hz,re_gamma,im_gamma" {
                    return Err(Error::Csv(format!("unexpected header '{line}'")));
                }
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(Error::Csv(format!("line {}: expected 3 columns", lineno + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Csv(format!("line {}: {e}", lineno + 1)))
            };
            omegas.push(std::f64::consts::TAU * num(cols[0])?);
            gamma.push(C64::new(num(cols[1])?, num(cols[2])?));
        }
        Self::new(omegas, gamma)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq_hz,re_gamma,im_gamma\n");
        for (w, g) in self.omegas.iter().zip(&self.gamma) {
            out.push_str(&format!("{},{},{}\n", to_hz(*w), g.re, g.im));
        }
        out
    }
}

/// Result of fitting the linear reflection model with a background
/// `a · exp(iτ(ω - ω_ref))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearReflectionFit {
    pub omega0: f64,
    pub kappa_ex: f64,
    pub kappa_in_star: f64,
    pub background: C64,
    pub delay: f64,
    pub omega_ref: f64,
    /// One-sigma uncertainties of `(Ω₀, κ_ex, κ_in*)`.
    pub sigma: [f64; 3],
    /// Root-mean-square complex residual.
    pub rms_residual: f64,
    pub iterations: usize,
}

impl LinearReflectionFit {
    pub fn model(&self, omega: f64) -> C64 {
        self.background
            * C64::from_polar(1.0, self.delay * (omega - self.omega_ref))
            * linear_reflection(omega, self.omega0, self.kappa_ex, self.kappa_in_star)
    }
}

// parameters in scaled units: [(Ω₀ - ω_ref)/σ, κ_ex/σ, κ_in*/σ, Re a, Im a, τσ]
struct Scaled {
    omega_ref: f64,
    sigma: f64,
}

impl Scaled {
    fn residuals(&self, trace: &ReflectionTrace, p: &[f64; 6], jac: Option<&mut Mat<f64>>) -> Vec<f64> {
        let n = trace.omegas.len();
        let mut r = vec![0.0; 2 * n];
        let mut jac = jac;
        let a = C64::new(p[3], p[4]);
        for k in 0..n {
            let x = (trace.omegas[k] - self.omega_ref) / self.sigma;
            let d = C64::new((p[1] + p[2]) / 2.0, x - p[0]);
            let g = C64::new(1.0, 0.0) - p[1] / d;
            let phase = C64::from_polar(1.0, p[5] * x);
            let b = a * phase;
            let m = b * g;
            let res = m - trace.gamma[k];
            r[2 * k] = res.re;
            r[2 * k + 1] = res.im;
            if let Some(j) = jac.as_deref_mut() {
                let d2 = d * d;
                let derivs = [
                    b * (-I * p[1] / d2),
                    b * (-1.0 / d + p[1] / (2.0 * d2)),
                    b * (p[1] / (2.0 * d2)),
                    phase * g,
                    I * phase * g,
                    I * x * m,
                ];
                for (c, dv) in derivs.iter().enumerate() {
                    j[(2 * k, c)] = dv.re;
                    j[(2 * k + 1, c)] = dv.im;
                }
            }
        }
        r
    }
}

fn initial_guess(trace: &ReflectionTrace) -> Result<(f64, [f64; 6])> {
    let w = &trace.omegas;
    let z = &trace.gamma;
    let n = w.len();
    let omega_ref = 0.5 * (w[0] + w[n - 1]);
    let edge = (n / 20).max(2);
    let avg = |range: std::ops::Range<usize>| -> (C64, f64) {
        let len = range.len() as f64;
        let zs: C64 = range.clone().map(|k| z[k]).sum::<C64>() / len;
        let ws: f64 = range.map(|k| w[k]).sum::<f64>() / len;
        (zs, ws)
    };
    let (z_lo, w_lo) = avg(0..edge);
    let (z_hi, w_hi) = avg(n - edge..n);
    let tau = (z_hi / z_lo).arg() / (w_hi - w_lo);
    let a = 0.5
        * (z_lo * C64::from_polar(1.0, -tau * (w_lo - omega_ref)) + z_hi * C64::from_polar(1.0, -tau * (w_hi - omega_ref)));
    let depth: Vec<f64> = (0..n)
        .map(|k| (C64::new(1.0, 0.0) - z[k] / (a * C64::from_polar(1.0, tau * (w[k] - omega_ref)))).norm())
        .collect();
    let (kmax, peak) = depth
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
    if peak < 0.05 || kmax < 2 || kmax + 2 >= n {
        return Err(Error::Fit("no resonance dip inside the probe span".into()));
    }
    // |1 - Γ|² is a Lorentzian of full width κ_ex + κ_in*
    let half = peak * peak / 2.0;
    let mut lo = kmax;
    while lo > 0 && depth[lo] * depth[lo] > half {
        lo -= 1;
    }
    let mut hi = kmax;
    while hi + 1 < n && depth[hi] * depth[hi] > half {
        hi += 1;
    }
    let kappa = (w[hi] - w[lo]).max(w[1] - w[0]);
    let kappa_ex = (peak * kappa / 2.0).min(kappa);
    let kappa_in = (kappa - kappa_ex).max(0.02 * kappa);
    let sigma = kappa;
    Ok((
        sigma,
        [
            (w[kmax] - omega_ref) / sigma,
            kappa_ex / sigma,
            kappa_in / sigma,
            a.re,
            a.im,
            tau * sigma,
        ],
    ))
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Levenberg-Marquardt fit of the linear reflection model plus complex
/// background to a measured trace.
pub fn fit_linear_reflection(trace: &ReflectionTrace) -> Result<LinearReflectionFit> {
    let (sigma, mut p) = initial_guess(trace)?;
    let omega_ref = 0.5 * (trace.omegas[0] + trace.omegas[trace.omegas.len() - 1]);
    let sc = Scaled { omega_ref, sigma };
    let m = 2 * trace.omegas.len();
    let mut jac = Mat::<f64>::zeros(m, 6);
    let mut r = sc.residuals(trace, &p, Some(&mut jac));
    let mut cost = sum_sq(&r);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for it in 0..200 {
        iterations = it + 1;
        let jtj = jac.transpose() * &jac;
        let jtr: Vec<f64> = (0..6).map(|c| (0..m).map(|k| jac[(k, c)] * r[k]).sum()).collect();
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for c in 0..6 {
                a[(c, c)] += lambda * jtj[(c, c)].max(1e-12);
            }
            let mut rhs = Mat::from_fn(6, 1, |i, _| -jtr[i]);
            a.partial_piv_lu().solve_in_place(&mut rhs);
            let mut trial = p;
            for c in 0..6 {
                trial[c] += rhs[(c, 0)];
            }
            trial[1] = trial[1].max(1e-9);
            trial[2] = trial[2].max(0.0);
            let tr = sc.residuals(trace, &trial, None);
            let tc = sum_sq(&tr);
            if tc.is_finite() && tc < cost {
                let rel = (cost - tc) / cost.max(1e-300);
                p = trial;
                r = sc.residuals(trace, &p, Some(&mut jac));
                cost = tc;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-15 {
                    lambda = f64::INFINITY;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved || !lambda.is_finite() || cost < 1e-30 {
            break;
        }
    }
    if !cost.is_finite() {
        return Err(Error::Fit("reflection fit diverged".into()));
    }
    let dof = (m as f64 - 6.0).max(1.0);
    let jtj = jac.transpose() * &jac;
    let mut cov = Mat::<f64>::identity(6, 6);
    jtj.partial_piv_lu().solve_in_place(&mut cov);
    let var = cost / dof;
    let sig = |c: usize| (cov[(c, c)].abs() * var).sqrt() * sigma;
    Ok(LinearReflectionFit {
        omega0: omega_ref + p[0] * sigma,
        kappa_ex: p[1] * sigma,
        kappa_in_star: p[2] * sigma,
        background: C64::new(p[3], p[4]),
        delay: p[5] / sigma,
        omega_ref,
        sigma: [sig(0), sig(1), sig(2)],
        rms_residual: (cost / trace.omegas.len() as f64).sqrt(),
        iterations,
    })
}

/// Searches the input-line attenuation (dB, negative for loss) that maps
/// generator powers onto at-chip powers such that the modeled `|Γ(ω_p)|`
/// best matches the measured values.
pub fn calibrate_input_attenuation(
    params: &SystemParams,
    omega_p: f64,
    generator_dbm: &[f64],
    measured_abs: &[f64],
    search_db: (f64, f64),
    n_max: usize,
) -> Result<f64> {
    if generator_dbm.len() != measured_abs.len() || generator_dbm.is_empty() {
        return Err(Error::InvalidParameter("calibration needs matching, non-empty power and |Γ| lists".into()));
    }
    let (lo, hi) = search_db;
    if !(lo < hi) {
        return Err(Error::InvalidParameter("calibration search range is empty".into()));
    }
    let cost = |att: f64| -> Result<f64> {
        let chip: Vec<f64> = generator_dbm.iter().map(|p| p + att).collect();
        let model = reflection_power_sweep(params, omega_p, &chip, n_max)?;
        Ok(model.iter().zip(measured_abs).map(|(a, b)| (a - b) * (a - b)).sum())
    };
    let steps = ((hi - lo) / 0.5).ceil() as usize;
    let mut best = (lo, f64::INFINITY);
    for k in 0..=steps {
        let att = (lo + k as f64 * 0.5).min(hi);
        let c = cost(att)?;
        if c < best.1 {
            best = (att, c);
        }
    }
    // golden section inside the bracketing cell pair
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = (best.0 - 0.5).max(lo);
    let mut b = (best.0 + 0.5).min(hi);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = cost(x1)?;
    let mut f2 = cost(x2)?;
    while b - a > 1e-4 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = cost(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = cost(x2)?;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mhz;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn device() -> SystemParams {
        SystemParams::from_mhz(10.3653, -9.7, 0.260, 0.046, 0.0035).unwrap()
    }

    fn synthetic(omega0: f64, kex: f64, kin: f64, noise: f64, seed: u64) -> ReflectionTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, noise).unwrap();
        let omegas: Vec<f64> = (0..2001).map(|k| omega0 + mhz(-2.0 + 0.002 * k as f64)).collect();
        let a = C64::from_polar(0.8, 0.4);
        let tau = 2e-8;
        let gamma = omegas
            .iter()
            .map(|&w| {
                let clean = a * C64::from_polar(1.0, tau * (w - omega0)) * linear_reflection(w, omega0, kex, kin);
                clean + C64::new(n.sample(&mut rng), n.sample(&mut rng)) * clean.norm().max(0.05)
            })
            .collect();
        ReflectionTrace::new(omegas, gamma).unwrap()
    }

    #[test]
    fn linear_examples() {
        let w0 = mhz(10_365.3);
        assert!((linear_reflection(w0 + mhz(1e4), w0, mhz(0.26), mhz(0.053)) - 1.0).norm() < 1e-4);
        let g = linear_reflection(w0, w0, mhz(0.260), mhz(0.053));
        assert!((g.re - (1.0 - 2.0 * 0.260 / 0.313)).abs() < 1e-12);
        assert!(g.re < -0.6);
        assert!(linear_reflection(w0, w0, mhz(0.3), mhz(0.3)).norm() < 1e-15);
    }

    #[test]
    fn weak_probe_matches_linear_model() {
        let p = device();
        for det in [-0.5, -0.1, 0.0, 0.2, 0.7] {
            let w = p.omega0() + mhz(det);
            let probe = DriveField::new(w, C64::new(1e-5 * p.kappa_ex().sqrt(), 0.0)).unwrap();
            let g = nonlinear_reflection(&p, &probe, 6).unwrap();
            let lin = linear_reflection(w, p.omega0(), p.kappa_ex(), p.kappa_in_star());
            assert!((g - lin).norm() < 1e-6, "{det}: {g} vs {lin}");
        }
        let zero = DriveField::new(p.omega0(), C64::new(0.0, 0.0)).unwrap();
        let g0 = nonlinear_reflection(&p, &zero, 6).unwrap();
        assert_eq!(g0, linear_reflection(p.omega0(), p.omega0(), p.kappa_ex(), p.kappa_in_star()));
    }

    #[test]
    fn linear_resonator_is_power_independent() {
        let p = SystemParams::from_mhz(10.0, 0.0, 0.5, 0.2, 0.0).unwrap();
        let want = (0.2 - 0.5) / (0.2 + 0.5);
        for x in [0.01, 0.3, 0.6] {
            let d = DriveField::resonant_normalized(&p, x).unwrap();
            let g = nonlinear_reflection(&p, &d, 16).unwrap();
            assert!((g - C64::new(want, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn dip_becomes_shallower_with_power() {
        let p = device();
        let powers: Vec<f64> = (0..12).map(|k| -150.0 + 4.0 * k as f64).collect();
        let g = reflection_power_sweep(&p, p.omega0(), &powers, 20).unwrap();
        assert!(g.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{g:?}");
        assert!(g[0] < 0.7 && *g.last().unwrap() > 0.9);
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let w0 = mhz(10_365.3);
        let t = synthetic(w0, mhz(0.260), mhz(0.053), 0.0, 1);
        let f = fit_linear_reflection(&t).unwrap();
        assert!(((f.omega0 - w0) / w0).abs() < 1e-9);
        assert!((f.kappa_ex / mhz(0.260) - 1.0).abs() < 1e-6);
        assert!((f.kappa_in_star / mhz(0.053) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn flat_trace_has_no_dip() {
        let omegas: Vec<f64> = (0..100).map(|k| mhz(10_000.0 + 0.01 * k as f64)).collect();
        let t = ReflectionTrace::new(omegas, vec![C64::new(0.9, 0.1); 100]).unwrap();
        assert!(matches!(fit_linear_reflection(&t), Err(Error::Fit(_))));
    }

    #[test]
    fn csv_roundtrip() {
        let t = synthetic(mhz(10_000.0), mhz(0.3), mhz(0.1), 0.0, 2);
        let back = ReflectionTrace::from_csv(&t.to_csv()).unwrap();
        for (a, b) in back.omegas().iter().zip(t.omegas()) {
            assert!((a - b).abs() <= 1e-9 * b);
        }
        assert_eq!(back.gamma(), t.gamma());
        assert!(ReflectionTrace::from_csv("f,g\n1,2\n").is_err());
    }

    #[test]
    fn calibration_recovers_attenuation() {
        let p = device();
        let truth = -80.5;
        let generator: Vec<f64> = (0..10).map(|k| -60.0 + 3.0 * k as f64).collect();
        let chip: Vec<f64> = generator.iter().map(|g| g + truth).collect();
        let measured = reflection_power_sweep(&p, p.omega0(), &chip, 20).unwrap();
        let got = calibrate_input_attenuation(&p, p.omega0(), &generator, &measured, (-90.0, -70.0), 20).unwrap();
        assert!((got - truth).abs() < 0.1, "{got}");
    }

    proptest! {
        #[test]
        fn passive_reflection_bounded(det in -5.0f64..5.0, kex in 0.01f64..2.0, kin in 0.0f64..2.0) {
            let g = linear_reflection(mhz(det), 0.0, mhz(kex), mhz(kin));
            prop_assert!(g.norm_sqr() <= 1.0 + 1e-12);
        }

        #[test]
        fn weak_limit_uses_effective_internal_loss(kex in 0.1f64..1.0, kin in 0.0f64..0.5, gp in 0.0f64..0.2, k in -30.0f64..30.0, det in -1.0f64..1.0) {
            let p = SystemParams::from_mhz(10.0, k, kex, kin, gp).unwrap();
            let w = p.omega0() + mhz(det);
            let probe = DriveField::new(w, C64::new(1e-5 * p.kappa_ex().sqrt(), 0.0)).unwrap();
            let g = nonlinear_reflection(&p, &probe, 6).unwrap();
            let lin = linear_reflection(w, p.omega0(), p.kappa_ex(), p.kappa_in_star());
            prop_assert!((g - lin).norm() < 1e-6);
        }
    }
}
