//! Brute-force reference: Lindblad generator on a truncated Fock space,
//! its steady state, and the regression-theorem fluorescence spectrum.
//!
//! Density matrices are vectorized column by column, `vec(ρ)[i + j d] = ρ_ij`,
//! so that `vec(A ρ B) = (Bᵀ ⊗ A) vec(ρ)`.

use std::f64::consts::PI;

use faer::{Mat, Side};
use log::warn;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::dressed::{annihilation, rotating_hamiltonian};
use crate::error::{Error, Result};
use crate::linalg::{adjoint, norm1, CMat, DenseLu, HessenbergResolvent, PoleExpansion};
use crate::model::{mhz, DriveField, FrequencyGrid, SystemParams};
use crate::moments::{solve_steady_moments, MomentTable};
use crate::spectrum::{compute_spectrum, ResolventMethod, SpectrumOptions, SpectrumSeries};

/// Largest Fock truncation accepted (superoperator dimension 961).
pub const MAX_N_FOCK: usize = 30;

/// Relative residual accepted for the steady state.
pub const STEADY_STATE_RESIDUAL: f64 = 1e-10;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Lindblad generator acting on vectorized density matrices of Fock states
/// `0..=n_fock`.
#[derive(Debug, Clone)]
pub struct Liouvillian {
    dim: usize,
    superop: CMat,
}

impl Liouvillian {
    /// `-i[H, ρ] + Σ_c (c ρ c† - {c†c, ρ}/2)`.
    pub fn from_operators(hamiltonian: &CMat, collapse: &[CMat]) -> Result<Self> {
        let d = hamiltonian.nrows();
        if d < 2 || hamiltonian.ncols() != d || collapse.iter().any(|c| c.nrows() != d || c.ncols() != d) {
            return Err(Error::InvalidParameter("operators must be square and share a dimension ≥ 2".into()));
        }
        let n = d * d;
        let mut l = Mat::<C64>::zeros(n, n);
        let id = Mat::<C64>::identity(d, d);
        let mi = C64::new(0.0, -1.0);
        // A ρ B contributes A_ik B_lj at ((i, j), (k, l))
        let mut add = |a: &CMat, b: &CMat, w: C64| {
            for k in 0..d {
                for i in 0..d {
                    let aik = a[(i, k)];
                    if aik == ZERO {
                        continue;
                    }
                    for l_ in 0..d {
                        for j in 0..d {
                            let blj = b[(l_, j)];
                            if blj != ZERO {
                                l[(i + j * d, k + l_ * d)] += w * aik * blj;
                            }
                        }
                    }
                }
            }
        };
        add(hamiltonian, &id, mi);
        add(&id, hamiltonian, -mi);
        for c in collapse {
            let cd = adjoint(c);
            let cdc = &cd * c;
            add(c, &cd, ONE);
            add(&cdc, &id, C64::new(-0.5, 0.0));
            add(&id, &cdc, C64::new(-0.5, 0.0));
        }
        Ok(Self { dim: d, superop: l })
    }

    /// Hilbert-space dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn superop(&self) -> &CMat {
        &self.superop
    }

    pub fn vectorize(rho: &CMat) -> Vec<C64> {
        let d = rho.nrows();
        (0..d * d).map(|p| rho[(p % d, p / d)]).collect()
    }

    pub fn unvectorize(&self, v: &[C64]) -> CMat {
        let d = self.dim;
        Mat::from_fn(d, d, |i, j| v[i + j * d])
    }

    /// `L(ρ)`.
    pub fn apply(&self, rho: &CMat) -> CMat {
        let v = Self::vectorize(rho);
        self.unvectorize(&crate::linalg::matvec(&self.superop, &v))
    }

    /// All eigenvalues of the generator.
    pub fn eigenvalues(&self) -> Result<Vec<C64>> {
        self.superop
            .eigenvalues()
            .map_err(|e| Error::Eigen(format!("{e:?}")))
    }
}

/// Generator in the frame rotating at the drive with collapse operators
/// `sqrt(κ_ex + κ_in) a` and `sqrt(2 γ_p) a†a`.
pub fn build_liouvillian(params: &SystemParams, drive: &DriveField, n_fock: usize) -> Result<Liouvillian> {
    if n_fock == 0 || n_fock > MAX_N_FOCK {
        return Err(Error::InvalidParameter(format!(
            "oracle Fock truncation must lie in 1..={MAX_N_FOCK}, got {n_fock}"
        )));
    }
    let h = rotating_hamiltonian(params, drive, n_fock);
    let a = annihilation(n_fock);
    let mut collapse = vec![Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * params.kappa_loss().sqrt())];
    if params.gamma_p() > 0.0 {
        let num = &adjoint(&a) * &a;
        let g = (2.0 * params.gamma_p()).sqrt();
        collapse.push(Mat::from_fn(num.nrows(), num.ncols(), |i, j| num[(i, j)] * g));
    }
    Liouvillian::from_operators(&h, &collapse)
}

/// Steady state density matrix and diagnostics.
#[derive(Debug, Clone)]
pub struct SteadyDensity {
    pub rho: CMat,
    /// `||L ρ||_∞ / ||L||_1`.
    pub residual: f64,
    pub min_eigenvalue: f64,
}

impl SteadyDensity {
    /// `tr(a†^m a^n ρ)`.
    pub fn moment(&self, m: usize, n: usize) -> C64 {
        let d = self.rho.nrows();
        let a = annihilation(d - 1);
        let ad = adjoint(&a);
        // tr(a†^m a^n ρ) = tr(a^n ρ a†^m)
        let mut y = self.rho.clone();
        for _ in 0..n {
            y = &a * &y;
        }
        let mut z = y;
        for _ in 0..m {
            z = &z * &ad;
        }
        (0..d).map(|i| z[(i, i)]).sum()
    }
}

fn normalize_density(l: &Liouvillian, v: &[C64]) -> CMat {
    let r = l.unvectorize(v);
    let h = Mat::from_fn(l.dim, l.dim, |i, j| 0.5 * (r[(i, j)] + r[(j, i)].conj()));
    let tr: C64 = (0..l.dim).map(|i| h[(i, i)]).sum();
    Mat::from_fn(l.dim, l.dim, |i, j| h[(i, j)] / tr)
}

fn inverse_iteration(lu: &DenseLu, start: Vec<C64>) -> Vec<C64> {
    let mut x = start;
    for _ in 0..60 {
        let y = lu.solve(&x);
        let nrm = y.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let next: Vec<C64> = y.iter().map(|v| v / nrm).collect();
        let change = next.iter().zip(&x).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        x = next;
        if change < 1e-15 {
            break;
        }
    }
    x
}

/// Null vector of the generator by shifted inverse iteration, started from
/// several states to detect a degenerate null space.
pub fn steady_density(l: &Liouvillian) -> Result<SteadyDensity> {
    let n = l.superop.nrows();
    let scale = norm1(&l.superop);
    let shift = 1e-9 * scale;
    let mut shifted = l.superop.clone();
    for i in 0..n {
        shifted[(i, i)] -= C64::new(shift, 0.0);
    }
    let lu = DenseLu::new(&shifted);
    let d = l.dim;
    let mut vacuum = vec![ZERO; n];
    vacuum[0] = ONE;
    let mut top = vec![ZERO; n];
    top[n - 1] = ONE;
    let mut mixed: Vec<C64> = (0..n).map(|p| if p % (d + 1) == 0 { ONE } else { ZERO }).collect();
    mixed[1] = C64::new(0.3, 0.1);
    mixed[d] = C64::new(0.3, -0.1);

    let r1 = normalize_density(l, &inverse_iteration(&lu, vacuum));
    let r2 = normalize_density(l, &inverse_iteration(&lu, top));
    let r3 = normalize_density(l, &inverse_iteration(&lu, mixed));
    let mut spread: f64 = 0.0;
    for i in 0..d {
        for j in 0..d {
            spread = spread.max((r1[(i, j)] - r2[(i, j)]).norm());
            spread = spread.max((r1[(i, j)] - r3[(i, j)]).norm());
        }
    }
    if spread > 1e-6 {
        return Err(Error::SteadyState(format!(
            "null space is degenerate (states from different starts differ by {spread:.2e})"
        )));
    }
    let lr = l.apply(&r1);
    let residual = (0..d)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| lr[(i, j)].norm())
        .fold(0.0, f64::max)
        / scale;
    if residual > STEADY_STATE_RESIDUAL {
        return Err(Error::Residual {
            context: "oracle steady state",
            residual,
            tolerance: STEADY_STATE_RESIDUAL,
        });
    }
    let evals = r1
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let min_eigenvalue = evals.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SteadyDensity {
        rho: r1,
        residual,
        min_eigenvalue,
    })
}

/// Regression-theorem fluorescence density
/// `(κ_ex/π) Re tr[a (s - L)⁻¹ (ρ a† - <a†> ρ)]` at `s = i(ω_d - ω)`.
///
/// The zero eigenvalue is moved to `-c` by the rank-one update
/// `L - c vec(ρ_ss) vec(I)†`; the initial vector is traceless, so the
/// resolvent applied to it is unchanged while `s = 0` becomes regular.
pub fn regression_spectrum(
    l: &Liouvillian,
    steady: &SteadyDensity,
    params: &SystemParams,
    drive: &DriveField,
    grid: &FrequencyGrid,
    method: ResolventMethod,
) -> Result<SpectrumSeries> {
    let d = l.dim;
    let n = d * d;
    let rho = &steady.rho;
    let a = annihilation(d - 1);
    let ad = adjoint(&a);
    let mean_ad: C64 = {
        let x = &ad * rho;
        (0..d).map(|i| x[(i, i)]).sum()
    };
    let x0m = Mat::from_fn(d, d, |i, j| (rho * &ad)[(i, j)] - mean_ad * rho[(i, j)]);
    let x0 = Liouvillian::vectorize(&x0m);
    // tr(a X) = Σ_ij a_ji X_ij
    let left: Vec<C64> = (0..n).map(|p| a[(p / d, p % d)]).collect();

    let c = params.kappa_total();
    let rv = Liouvillian::vectorize(rho);
    let mut reg = l.superop.clone();
    for i in 0..d {
        let col = i + i * d;
        for (row, r) in rv.iter().enumerate() {
            reg[(row, col)] -= c * r;
        }
    }

    let pre = params.kappa_ex() / PI;
    let s_at = |w: f64| C64::new(0.0, drive.omega_d() - w);
    let mut values = None;
    if method != ResolventMethod::PointwiseLu {
        match PoleExpansion::new(&reg, &left, &x0) {
            Ok(p) if method == ResolventMethod::Eigen || p.condition() <= SpectrumOptions::default().eigen_condition_limit => {
                values = Some(grid.points().par_iter().map(|&w| pre * p.eval(s_at(w)).re).collect::<Vec<_>>());
            }
            Ok(p) => warn!("oracle eigenvector condition {:.2e}; using Hessenberg solves", p.condition()),
            Err(e) if method == ResolventMethod::Eigen => return Err(e),
            Err(e) => warn!("oracle eigendecomposition failed ({e}); using Hessenberg solves"),
        }
    }
    let values = match values {
        Some(v) => v,
        None if method == ResolventMethod::PointwiseLu => grid
            .points()
            .par_iter()
            .map(|&w| {
                let s = s_at(w);
                let m = Mat::from_fn(n, n, |i, j| if i == j { s - reg[(i, j)] } else { -reg[(i, j)] });
                let x = DenseLu::new(&m).solve(&x0);
                Ok(pre * left.iter().zip(&x).map(|(a, b)| a * b).sum::<C64>().re)
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            let h = HessenbergResolvent::new(&reg, &left, &x0);
            grid.points().par_iter().map(|&w| pre * h.eval(s_at(w)).re).collect()
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular {
            context: "oracle resolvent",
            condition: f64::INFINITY,
        });
    }
    let mean_a = mean_ad.conj();
    let coherent = (drive.amplitude() - C64::new(0.0, params.kappa_ex().sqrt()) * mean_a).norm_sqr();
    SpectrumSeries::new(grid.clone(), values, coherent, drive.omega_d())
}

/// Largest relative deviation between hierarchy moments and
/// `tr(a†^m a^n ρ)` over `m + n ≤ order`.
pub fn moment_deviation(table: &MomentTable, steady: &SteadyDensity, order: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for m in 0..=order {
        for n in 0..=(order - m) {
            let a = table.get(m, n);
            let b = steady.moment(m, n);
            let dev = (a - b).norm() / b.norm().max(1e-300);
            worst = worst.max(if b.norm() < 1e-14 { (a - b).norm() } else { dev });
        }
    }
    worst
}

/// Settings of the cross-module equivalence run.
#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub params: SystemParams,
    pub drive_ratios: Vec<f64>,
    pub n_max: usize,
    pub n_fock: usize,
    pub grid_half_span: f64,
    pub grid_points: usize,
    pub moment_tolerance: f64,
    pub spectrum_tolerance: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            params: SystemParams::from_mhz(10.0, -20.0, 0.5, 0.5, 0.1).expect("valid parameters"),
            drive_ratios: vec![1.0, 3.0, 5.0, 10.0],
            n_max: 20,
            n_fock: 20,
            grid_half_span: mhz(60.0),
            grid_points: 1001,
            moment_tolerance: 1e-8,
            spectrum_tolerance: 1e-6,
        }
    }
}

/// One drive point of the equivalence run.
#[derive(Debug, Clone, Copy)]
pub struct SuiteEntry {
    pub f_over_sqrt_kex: f64,
    pub moment_deviation: f64,
    /// Pointwise deviation relative to the series maximum.
    pub spectrum_deviation: f64,
    pub steady_residual: f64,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub config: SuiteConfig,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn max_moment_deviation(&self) -> f64 {
        self.entries.iter().map(|e| e.moment_deviation).fold(0.0, f64::max)
    }

    pub fn max_spectrum_deviation(&self) -> f64 {
        self.entries.iter().map(|e| e.spectrum_deviation).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_moment_deviation() <= self.config.moment_tolerance
            && self.max_spectrum_deviation() <= self.config.spectrum_tolerance
            && self.entries.iter().all(|e| e.min_eigenvalue >= -1e-9)
    }
}

/// Compares moments and spectra of the hierarchy with the Lindblad
/// reference at each drive ratio.
pub fn equivalence_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    let p = &config.params;
    let mut entries = Vec::new();
    for &x in &config.drive_ratios {
        let drive = DriveField::resonant_normalized(p, x)?;
        let grid = FrequencyGrid::uniform(drive.omega_d(), config.grid_half_span, config.grid_points)?;
        let l = build_liouvillian(p, &drive, config.n_fock)?;
        let steady = steady_density(&l)?;
        let table = solve_steady_moments(p, &drive, config.n_max)?;
        let moment_dev = moment_deviation(&table, &steady, 4);
        let hier = compute_spectrum(p, &drive, &grid, config.n_max, &SpectrumOptions::default())?.series;
        let reference = regression_spectrum(&l, &steady, p, &drive, &grid, ResolventMethod::Auto)?;
        let max = reference.max_value().abs().max(hier.max_value().abs());
        let spec_dev = hier
            .values()
            .iter()
            .zip(reference.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / if max > 0.0 { max } else { 1.0 };
        entries.push(SuiteEntry {
            f_over_sqrt_kex: x,
            moment_deviation: moment_dev,
            spectrum_deviation: spec_dev,
            steady_residual: steady.residual,
            min_eigenvalue: steady.min_eigenvalue,
        });
    }
    Ok(SuiteReport {
        config: config.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tls::tls_incoherent_spectrum;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kerr_regime(gamma: f64) -> SystemParams {
        SystemParams::from_mhz(10.0, -20.0, 0.5, 0.5, gamma).unwrap()
    }

    fn random_hermitian(d: usize, rng: &mut ChaCha8Rng) -> CMat {
        let g = Mat::from_fn(d, d, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        Mat::from_fn(d, d, |i, j| g[(i, j)] + g[(j, i)].conj())
    }

    #[test]
    fn trace_and_hermiticity_preserved() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 3.0).unwrap();
        let l = build_liouvillian(&p, &d, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scale = norm1(l.superop());
        for _ in 0..5 {
            let r = random_hermitian(7, &mut rng);
            let out = l.apply(&r);
            let tr: C64 = (0..7).map(|i| out[(i, i)]).sum();
            assert!(tr.norm() < 1e-12 * scale);
            for i in 0..7 {
                for j in 0..7 {
                    assert!((out[(i, j)] - out[(j, i)].conj()).norm() < 1e-12 * scale);
                }
            }
        }
    }

    #[test]
    fn undriven_coherence_decay_rates() {
        for gamma in [0.0, 0.1] {
            let p = kerr_regime(gamma);
            let d = DriveField::resonant(&p, 0.0).unwrap();
            let ev = build_liouvillian(&p, &d, 4).unwrap().eigenvalues().unwrap();
            for (m, n) in [(1, 0), (2, 0)] {
                let want = crate::model::epsilon(m, n, &p).re;
                assert!(ev.iter().any(|e| (e.re - want).abs() < 1e-9 * p.kappa_total()), "{m},{n}");
            }
        }
    }

    #[test]
    fn vacuum_steady_state() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant(&p, 0.0).unwrap();
        let s = steady_density(&build_liouvillian(&p, &d, 5).unwrap()).unwrap();
        assert!((s.rho[(0, 0)] - ONE).norm() < 1e-12);
    }

    #[test]
    fn linear_resonator_reaches_coherent_state() {
        let p = SystemParams::from_mhz(10.0, 0.0, 0.5, 0.3, 0.0).unwrap();
        let d = DriveField::resonant_normalized(&p, 0.8)
            .unwrap()
            .with_omega(p.omega0() + mhz(0.2))
            .unwrap();
        let s = steady_density(&build_liouvillian(&p, &d, 20).unwrap()).unwrap();
        let alpha = C64::new(0.0, -p.kappa_ex().sqrt()) * d.amplitude()
            / C64::new(p.kappa_total() / 2.0, p.omega0() - d.omega_d());
        // fidelity <α|ρ|α>
        let mut coh = vec![ZERO; 21];
        let mut c = (-alpha.norm_sqr() / 2.0).exp();
        for (k, slot) in coh.iter_mut().enumerate() {
            if k > 0 {
                c /= (k as f64).sqrt();
            }
            *slot = alpha.powu(k as u32) * c;
        }
        let mut fid = ZERO;
        for i in 0..21 {
            for j in 0..21 {
                fid += coh[i].conj() * s.rho[(i, j)] * coh[j];
            }
        }
        assert!(fid.re > 1.0 - 1e-8, "{fid}");
        let g = FrequencyGrid::uniform(d.omega_d(), mhz(5.0), 41).unwrap();
        let l = build_liouvillian(&p, &d, 20).unwrap();
        let spec = regression_spectrum(&l, &s, &p, &d, &g, ResolventMethod::Auto).unwrap();
        let scale = d.photon_rate() / p.kappa_total();
        assert!(spec.values().iter().all(|v| v.abs() < 1e-9 * scale));
    }

    #[test]
    fn degenerate_null_space_detected() {
        // no dissipation at all: every Fock projector is stationary
        let h = Mat::from_fn(3, 3, |i, j| if i == j { C64::new(i as f64, 0.0) } else { ZERO });
        let l = Liouvillian::from_operators(&h, &[]).unwrap();
        assert!(matches!(steady_density(&l), Err(Error::SteadyState(_))));
    }

    #[test]
    fn moments_match_hierarchy() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 5.0).unwrap();
        let s = steady_density(&build_liouvillian(&p, &d, 20).unwrap()).unwrap();
        let t = solve_steady_moments(&p, &d, 20).unwrap();
        let dev = moment_deviation(&t, &s, 4);
        assert!(dev < 1e-8, "{dev}");
        assert!(s.min_eigenvalue > -1e-9);
    }

    #[test]
    fn two_level_restriction_is_the_closed_form() {
        let p = SystemParams::from_mhz(10.0, -200.0, 0.5, 0.5, 0.1).unwrap();
        let d = DriveField::resonant_normalized(&p, 4.0).unwrap();
        let g = FrequencyGrid::uniform(d.omega_d(), mhz(10.0), 201).unwrap();
        let tls = tls_incoherent_spectrum(&p, &d, &g).unwrap();
        let max = tls.max_value();
        let l1 = build_liouvillian(&p, &d, 1).unwrap();
        let s1 = steady_density(&l1).unwrap();
        let exact = regression_spectrum(&l1, &s1, &p, &d, &g, ResolventMethod::PointwiseLu).unwrap();
        for (a, b) in exact.values().iter().zip(tls.values()) {
            assert!((a - b).abs() < 1e-9 * max);
        }
        let huge = p.with_kerr(mhz(-100_000.0)).unwrap();
        let l2 = build_liouvillian(&huge, &d, 2).unwrap();
        let s2 = steady_density(&l2).unwrap();
        let near = regression_spectrum(&l2, &s2, &huge, &d, &g, ResolventMethod::Auto).unwrap();
        for (a, b) in near.values().iter().zip(tls.values()) {
            assert!((a - b).abs() < 0.02 * max);
        }
    }

    #[test]
    fn undriven_spectrum_is_zero() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant(&p, 0.0).unwrap();
        let l = build_liouvillian(&p, &d, 4).unwrap();
        let s = steady_density(&l).unwrap();
        let g = FrequencyGrid::uniform(d.omega_d(), mhz(10.0), 21).unwrap();
        let spec = regression_spectrum(&l, &s, &p, &d, &g, ResolventMethod::Auto).unwrap();
        assert!(spec.values().iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn truncation_limits() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant(&p, 0.0).unwrap();
        assert!(build_liouvillian(&p, &d, 0).is_err());
        assert!(build_liouvillian(&p, &d, MAX_N_FOCK + 1).is_err());
    }
}
