//! Steady-state normally ordered moments `<a†^m a^n>` of the driven
//! resonator, obtained from the truncated linear hierarchy that couples
//! `(m, n)` to `(m+1, n+1)` through the Kerr term and to `(m, n-1)`,
//! `(m-1, n)` through the drive.

use faer::Mat;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::model::{epsilon_detuned, flat, grid_dim, DriveField, SystemParams};

/// Truncation order used when none is given.
pub const DEFAULT_N_MAX: usize = 20;

/// Tolerance used by [`check_truncation`] when none is given.
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-8;

/// Population estimate of the highest retained Fock level above which a
/// solved table is flagged as possibly unconverged.
pub const EDGE_POPULATION_WARNING: f64 = 1e-9;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Calls `emit(row, col, coefficient)` for every coupling of the moment
/// hierarchy at truncation `n_max`. Couplings that leave the grid are
/// dropped.
pub(crate) fn for_each_coupling(
    params: &SystemParams,
    drive: &DriveField,
    n_max: usize,
    mut emit: impl FnMut(usize, usize, C64),
) {
    let f = drive.amplitude();
    let sk = params.kappa_ex().sqrt();
    let kerr = params.kerr();
    let i = C64::new(0.0, 1.0);
    for m in 0..=n_max {
        for n in 0..=n_max {
            let row = flat(m, n, n_max);
            emit(row, row, epsilon_detuned(m, n, params, drive.omega_d()));
            if m != n && m < n_max && n < n_max {
                emit(row, flat(m + 1, n + 1, n_max), i * kerr * (m as f64 - n as f64));
            }
            if n > 0 {
                emit(row, flat(m, n - 1, n_max), -i * sk * n as f64 * f);
            }
            if m > 0 {
                emit(row, flat(m - 1, n, n_max), i * sk * m as f64 * f.conj());
            }
        }
    }
}

/// Dense operator of the steady-state moment equations. The `(0, 0)` row
/// carries the normalization `<a†^0 a^0> = 1`.
pub fn build_moment_operator(params: &SystemParams, drive: &DriveField, n_max: usize) -> Result<CMat> {
    if n_max == 0 {
        return Err(Error::InvalidParameter(
            "moment truncation n_max must be at least 1".into(),
        ));
    }
    let dim = grid_dim(n_max);
    let mut a = Mat::<C64>::zeros(dim, dim);
    for_each_coupling(params, drive, n_max, |r, c, v| {
        if r != 0 {
            a[(r, c)] += v;
        }
    });
    a[(0, 0)] = C64::new(1.0, 0.0);
    Ok(a)
}

/// Solved moment table `alpha[m][n] = <a†^m a^n>_s` in the frame rotating
/// at the drive frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    n_max: usize,
    values: Vec<C64>,
    condition: f64,
    edge_population: f64,
    truncation_warning: bool,
}

impl MomentTable {
    /// Builds a table from raw values; used for tables that come from
    /// somewhere other than [`solve_steady_moments`].
    pub fn from_values(n_max: usize, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid_dim(n_max) {
            return Err(Error::InvalidParameter(format!(
                "moment table for n_max = {n_max} needs {} values, got {}",
                grid_dim(n_max),
                values.len()
            )));
        }
        let edge_population = edge_population(&values, n_max);
        Ok(Self {
            n_max,
            values,
            condition: 1.0,
            edge_population,
            truncation_warning: false,
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// `<a†^m a^n>`; zero outside the grid.
    pub fn get(&self, m: usize, n: usize) -> C64 {
        if m > self.n_max || n > self.n_max {
            ZERO
        } else {
            self.values[flat(m, n, self.n_max)]
        }
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    /// `<a>_s`.
    pub fn mean_field(&self) -> C64 {
        self.get(0, 1)
    }

    /// `<a†a>_s`.
    pub fn photon_number(&self) -> f64 {
        self.get(1, 1).re
    }

    /// `<a†a> - |<a>|²`.
    pub fn connected_photon_number(&self) -> f64 {
        self.photon_number() - self.mean_field().norm_sqr()
    }

    /// Condition estimate of the solved operator.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Estimated population of the highest Fock level representable on the
    /// grid, `alpha[n_max][n_max] / n_max!`.
    pub fn edge_population(&self) -> f64 {
        self.edge_population
    }

    /// Set when the edge population suggests the truncation is too small.
    /// [`check_truncation`] gives the certified answer.
    pub fn truncation_warning(&self) -> bool {
        self.truncation_warning
    }

    /// Largest `|alpha[m][n] - conj(alpha[n][m])|`, relative to `max(1, |alpha|)`.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in 0..=self.n_max {
            for n in m..=self.n_max {
                let a = self.get(m, n);
                let b = self.get(n, m).conj();
                worst = worst.max((a - b).norm() / a.norm().max(1.0));
            }
        }
        worst
    }

    /// CSV with columns `m,n,re,im`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,n,re,im\n");
        for m in 0..=self.n_max {
            for n in 0..=self.n_max {
                let v = self.get(m, n);
                out.push_str(&format!("{m},{n},{},{}\n", v.re, v.im));
            }
        }
        out
    }

    /// Parses the CSV produced by [`MomentTable::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("m,") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Csv(format!("line {}: expected 4 columns", lineno + 1)));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Csv(format!("line {}: {e}", lineno + 1)))
            };
            let m = parse(cols[0])? as usize;
            let n = parse(cols[1])? as usize;
            rows.push((m, n, C64::new(parse(cols[2])?, parse(cols[3])?)));
        }
        let n_max = rows.iter().map(|r| r.0.max(r.1)).max().unwrap_or(0);
        let mut values = vec![ZERO; grid_dim(n_max)];
        for (m, n, v) in rows {
            values[flat(m, n, n_max)] = v;
        }
        Self::from_values(n_max, values)
    }
}

fn edge_population(values: &[C64], n_max: usize) -> f64 {
    let log_fact: f64 = (1..=n_max).map(|k| (k as f64).ln()).sum();
    let top = values[flat(n_max, n_max, n_max)].norm();
    if top == 0.0 {
        0.0
    } else {
        (top.ln() - log_fact).exp()
    }
}

/// Solves the truncated steady-state hierarchy.
pub fn solve_steady_moments(params: &SystemParams, drive: &DriveField, n_max: usize) -> Result<MomentTable> {
    let a = build_moment_operator(params, drive, n_max)?;
    let mut b = vec![ZERO; grid_dim(n_max)];
    b[0] = C64::new(1.0, 0.0);
    let (mut values, condition) = linalg::solve_checked(&a, &b, "moment hierarchy")?;
    values[0] = C64::new(1.0, 0.0);
    let edge = edge_population(&values, n_max);
    let table = MomentTable {
        n_max,
        values,
        condition,
        edge_population: edge,
        truncation_warning: edge > EDGE_POPULATION_WARNING,
    };
    let asym = table.conjugate_asymmetry();
    if asym > 1e-9 {
        return Err(Error::Residual {
            context: "moment conjugate symmetry",
            residual: asym,
            tolerance: 1e-9,
        });
    }
    Ok(table)
}

/// Outcome of a truncation convergence check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationReport {
    pub n_max: usize,
    pub converged: bool,
    /// Largest relative change of `<a>` and `<a†a>` between `n_max` and `n_max + 4`.
    pub max_relative_change: f64,
    /// Smallest truncation (in steps of 4 from `n_max`, up to
    /// [`TRUNCATION_SEARCH_LIMIT`]) that passes the check.
    pub recommended_n_max: Option<usize>,
}

/// Largest truncation tried when searching for a converged `n_max`.
pub const TRUNCATION_SEARCH_LIMIT: usize = 40;

const TRUNCATION_STEP: usize = 4;

fn relative_change(a: C64, b: C64) -> f64 {
    let d = (a - b).norm();
    let scale = b.norm().max(a.norm());
    if scale == 0.0 {
        0.0
    } else {
        d / scale
    }
}

fn probe_change(params: &SystemParams, drive: &DriveField, low: &MomentTable, n_max: usize) -> Result<(f64, MomentTable)> {
    let high = solve_steady_moments(params, drive, n_max + TRUNCATION_STEP)?;
    let change = relative_change(low.get(0, 1), high.get(0, 1)).max(relative_change(low.get(1, 1), high.get(1, 1)));
    Ok((change, high))
}

/// Re-solves at `n_max + 4` and compares `<a>` and `<a†a>`.
pub fn check_truncation(params: &SystemParams, drive: &DriveField, n_max: usize, tol: f64) -> Result<TruncationReport> {
    let low = solve_steady_moments(params, drive, n_max)?;
    let (change, mut high) = probe_change(params, drive, &low, n_max)?;
    let converged = change <= tol;
    let mut recommended = converged.then_some(n_max);
    let mut level = n_max + TRUNCATION_STEP;
    while recommended.is_none() && level + TRUNCATION_STEP <= TRUNCATION_SEARCH_LIMIT {
        let (c, next) = probe_change(params, drive, &high, level)?;
        if c <= tol {
            recommended = Some(level);
        }
        high = next;
        level += TRUNCATION_STEP;
    }
    Ok(TruncationReport {
        n_max,
        converged,
        max_relative_change: change,
        recommended_n_max: recommended,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mhz;

    fn kerr_regime(gamma_mhz: f64) -> SystemParams {
        SystemParams::from_mhz(10.0, -20.0, 0.5, 0.5, gamma_mhz).unwrap()
    }

    #[test]
    fn zero_truncation_rejected() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant(&p, 0.0).unwrap();
        assert!(build_moment_operator(&p, &d, 0).is_err());
    }

    #[test]
    fn undriven_vacuum() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant(&p, 0.0).unwrap();
        let t = solve_steady_moments(&p, &d, 8).unwrap();
        for m in 0..=8 {
            for n in 0..=8 {
                let expect = if m == 0 && n == 0 { 1.0 } else { 0.0 };
                assert!((t.get(m, n) - C64::new(expect, 0.0)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn undriven_operator_is_graded_lower_triangular() {
        // With F = 0 no row couples to an index of lower total order m + n.
        let p = kerr_regime(0.1);
        let d = DriveField::resonant(&p, 0.0).unwrap();
        let n_max = 5;
        let a = build_moment_operator(&p, &d, n_max).unwrap();
        for r in 0..grid_dim(n_max) {
            for c in 0..grid_dim(n_max) {
                if a[(r, c)].norm() > 0.0 {
                    let (rm, rn) = (r / (n_max + 1), r % (n_max + 1));
                    let (cm, cn) = (c / (n_max + 1), c % (n_max + 1));
                    assert!(cm + cn >= rm + rn);
                }
            }
        }
    }

    #[test]
    fn operator_sparsity() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 3.0).unwrap();
        let n_max = 6;
        let a = build_moment_operator(&p, &d, n_max).unwrap();
        for r in 0..grid_dim(n_max) {
            let off = (0..grid_dim(n_max)).filter(|&c| c != r && a[(r, c)].norm() > 0.0).count();
            assert!(off <= 4);
        }
    }

    #[test]
    fn linear_resonator_coherent_state() {
        let p = SystemParams::from_mhz(10.0, 0.0, 0.5, 0.3, 0.0).unwrap();
        let d = DriveField::resonant_normalized(&p, 0.7).unwrap();
        let t = solve_steady_moments(&p, &d, 12).unwrap();
        let abar = -C64::new(0.0, 1.0) * p.kappa_ex().sqrt() * d.amplitude() / (p.kappa_total() / 2.0);
        for m in 0..=12 {
            for n in 0..=12 {
                let expect = abar.conj().powu(m as u32) * abar.powu(n as u32);
                let got = t.get(m, n);
                assert!((got - expect).norm() <= 1e-10 * expect.norm().max(1e-300), "({m},{n}) {got} vs {expect}");
            }
        }
    }

    #[test]
    fn gauge_covariance() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 4.0).unwrap();
        let phi = 0.731;
        let a = solve_steady_moments(&p, &d, 16).unwrap();
        let b = solve_steady_moments(&p, &d.with_phase(phi), 16).unwrap();
        assert!((a.get(1, 1) - b.get(1, 1)).norm() <= 1e-12 * a.get(1, 1).norm());
        for (m, n) in [(0, 1), (2, 0), (1, 3), (3, 3)] {
            let rot = C64::from_polar(1.0, (n as f64 - m as f64) * phi);
            let expect = a.get(m, n) * rot;
            assert!((b.get(m, n) - expect).norm() <= 1e-10 * expect.norm().max(1e-12));
        }
    }

    #[test]
    fn driven_table_invariants() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 5.0).unwrap();
        let t = solve_steady_moments(&p, &d, 20).unwrap();
        assert_eq!(t.get(0, 0), C64::new(1.0, 0.0));
        assert!(t.conjugate_asymmetry() < 1e-9);
        assert!(t.photon_number() >= 0.0);
        assert!(t.connected_photon_number() >= -1e-12);
        assert!(!t.truncation_warning());
    }

    #[test]
    fn mean_field_linear_in_weak_drive() {
        let p = kerr_regime(0.1);
        let small = |x: f64| {
            let d = DriveField::resonant_normalized(&p, x).unwrap();
            solve_steady_moments(&p, &d, 10).unwrap().get(0, 1)
        };
        let r = small(2e-4) / small(1e-4);
        assert!((r - C64::new(2.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn truncation_checks() {
        let p = kerr_regime(0.1);
        let zero = DriveField::resonant(&p, 0.0).unwrap();
        assert!(check_truncation(&p, &zero, 1, 1e-8).unwrap().converged);

        let weak = DriveField::resonant_normalized(&p, 1.0).unwrap();
        let r = check_truncation(&p, &weak, 12, 1e-8).unwrap();
        assert!(r.converged, "{r:?}");

        let strong = DriveField::resonant_normalized(&p, 30.0).unwrap();
        let r = check_truncation(&p, &strong, 5, 1e-8).unwrap();
        assert!(!r.converged, "{r:?}");
    }

    #[test]
    fn csv_roundtrip() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 2.0).unwrap();
        let t = solve_steady_moments(&p, &d, 4).unwrap();
        let back = MomentTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back.values(), t.values());
    }

    #[test]
    fn off_resonant_drive_is_supported() {
        let p = kerr_regime(0.0);
        let d = DriveField::new(p.omega0() + mhz(2.0), C64::new(p.kappa_ex().sqrt(), 0.0)).unwrap();
        let t = solve_steady_moments(&p, &d, 16).unwrap();
        assert!(t.photon_number() > 0.0);
        assert!(t.conjugate_asymmetry() < 1e-9);
    }
}
