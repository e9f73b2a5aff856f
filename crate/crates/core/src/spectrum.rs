//! Incoherent (fluorescence) and coherent output spectra.
//!
//! The connected correlator `<a†(t), a†^m a^n (t+τ)>` obeys the same
//! hierarchy as the one-time moments. Its Laplace transform at
//! `s = i(ω_d - ω)` gives the fluorescence density through the `(0, 1)`
//! component. All spectral densities are reported multiplied by the
//! waveguide velocity: `values` are photons per second per rad/s and the
//! coherent weight is a photon rate.

use std::f64::consts::{PI, TAU};

use faer::Mat;
use log::info;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{CMat, DenseLu, PoleExpansion};
use crate::model::{flat, grid_dim, to_hz, DriveField, FrequencyGrid, SystemParams, HBAR};
use crate::moments::{for_each_coupling, solve_steady_moments, MomentTable};

const ZERO: C64 = C64::new(0.0, 0.0);

/// Sampled fluorescence density plus the weight of the elastic peak at the
/// drive frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSeries {
    grid: FrequencyGrid,
    values: Vec<f64>,
    coherent_weight: f64,
    drive_omega: f64,
}

impl SpectrumSeries {
    pub fn new(grid: FrequencyGrid, values: Vec<f64>, coherent_weight: f64, drive_omega: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidParameter(format!(
                "spectrum has {} values for {} grid points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) || !coherent_weight.is_finite() {
            return Err(Error::InvalidParameter("spectrum values must be finite".into()));
        }
        if coherent_weight < 0.0 {
            return Err(Error::InvalidParameter("coherent weight must be non-negative".into()));
        }
        Ok(Self {
            grid,
            values,
            coherent_weight,
            drive_omega,
        })
    }

    pub fn grid(&self) -> &FrequencyGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Photon rate carried by the elastic `δ(ω - ω_d)` peak.
    pub fn coherent_weight(&self) -> f64 {
        self.coherent_weight
    }

    pub fn drive_omega(&self) -> f64 {
        self.drive_omega
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        let p = self.grid.points();
        p.windows(2)
            .zip(self.values.windows(2))
            .map(|(w, v)| 0.5 * (w[1] - w[0]) * (v[0] + v[1]))
            .sum()
    }

    /// Value at the grid point nearest to `omega`.
    pub fn value_near(&self, omega: f64) -> f64 {
        self.values[self.grid.nearest(omega)]
    }

    /// Indices of strict interior local maxima.
    pub fn local_maxima(&self) -> Vec<usize> {
        let v = &self.values;
        (1..v.len().saturating_sub(1))
            .filter(|&k| v[k] > v[k - 1] && v[k] >= v[k + 1])
            .collect()
    }

    /// Power spectral density in W/Hz (`ħω · 2π · v S(ω)`).
    pub fn psd_watts_per_hz(&self) -> Vec<f64> {
        self.grid
            .points()
            .iter()
            .zip(&self.values)
            .map(|(&w, &v)| flux_to_watts_per_hz(w, v))
            .collect()
    }

    /// CSV with columns `frequency_hz,flux_density`, preceded by `#`
    /// metadata lines.
    pub fn to_csv(&self, metadata: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in metadata {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out.push_str(&format!("# coherent_weight = {}\n", self.coherent_weight));
        out.push_str(&format!("# drive_frequency_hz = {}\n", to_hz(self.drive_omega)));
        out.push_str("frequency_hz,flux_density\n");
        for (w, v) in self.grid.points().iter().zip(&self.values) {
            out.push_str(&format!("{},{}\n", to_hz(*w), v));
        }
        out
    }
}

/// Converts a photon-flux density (per rad/s) at `omega` to W/Hz.
pub fn flux_to_watts_per_hz(omega: f64, flux: f64) -> f64 {
    HBAR * omega * TAU * flux
}

/// dBm for a power in watts.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Watts for a power in dBm.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Initial values `β_{m,n}(0) = <α_{m+1,n}> - <α_{1,0}><α_{m,n}>` of the
/// correlator hierarchy, flattened like the moment grid. The `(0, 0)`
/// entry is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorRhs(Vec<C64>);

impl CorrelatorRhs {
    pub fn from_moments(moments: &MomentTable) -> Self {
        let n_max = moments.n_max();
        let a10 = moments.get(1, 0);
        let mut v = vec![ZERO; grid_dim(n_max)];
        for m in 0..=n_max {
            for n in 0..=n_max {
                v[flat(m, n, n_max)] = moments.get(m + 1, n) - a10 * moments.get(m, n);
            }
        }
        v[0] = ZERO;
        Self(v)
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.0
    }

    pub fn get(&self, m: usize, n: usize, n_max: usize) -> C64 {
        self.0[flat(m, n, n_max)]
    }
}

/// Linear system `rhs = (s I - M0) β̄(s)` for the Laplace-transformed
/// correlators, with `β̄_{0,0} = 0` imposed.
#[derive(Debug, Clone)]
pub struct BetaSystem {
    n_max: usize,
    m0: CMat,
    rhs: CorrelatorRhs,
}

/// Assembles the correlator hierarchy from a solved moment table.
pub fn build_beta_operator(params: &SystemParams, drive: &DriveField, moments: &MomentTable) -> Result<BetaSystem> {
    let n_max = moments.n_max();
    if n_max == 0 {
        return Err(Error::InvalidParameter("correlator truncation must be at least 1".into()));
    }
    if moments.truncation_warning() {
        return Err(Error::Truncation {
            n_max,
            detail: format!("edge population {:.2e}", moments.edge_population()),
        });
    }
    let dim = grid_dim(n_max);
    let mut m0 = Mat::<C64>::zeros(dim, dim);
    for_each_coupling(params, drive, n_max, |r, c, v| m0[(r, c)] += v);
    Ok(BetaSystem {
        n_max,
        m0,
        rhs: CorrelatorRhs::from_moments(moments),
    })
}

impl BetaSystem {
    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn m0(&self) -> &CMat {
        &self.m0
    }

    pub fn rhs(&self) -> &CorrelatorRhs {
        &self.rhs
    }

    fn shifted(&self, s: C64) -> CMat {
        let dim = self.m0.nrows();
        let mut a = Mat::from_fn(dim, dim, |i, j| -self.m0[(i, j)]);
        for i in 0..dim {
            a[(i, i)] += s;
        }
        for j in 0..dim {
            a[(0, j)] = ZERO;
        }
        a[(0, 0)] = C64::new(1.0, 0.0);
        a
    }

    /// Full solution vector `β̄(s)` by direct LU.
    pub fn solve_at(&self, s: C64) -> Result<Vec<C64>> {
        let a = self.shifted(s);
        let lu = DenseLu::new(&a);
        let x = lu.solve(self.rhs.as_slice());
        if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::Singular {
                context: "correlator resolvent",
                condition: f64::INFINITY,
            });
        }
        Ok(x)
    }

    /// `β̄_{0,1}(s)` by direct LU.
    pub fn beta01_lu(&self, s: C64) -> Result<C64> {
        Ok(self.solve_at(s)?[1])
    }

    /// Diagonalizes the hierarchy once (with the `(0, 0)` unknown removed)
    /// and returns the pole expansion of `β̄_{0,1}(s)`.
    pub fn eigen_resolvent(&self) -> Result<PoleExpansion> {
        let dim = self.m0.nrows() - 1;
        let reduced = Mat::from_fn(dim, dim, |i, j| self.m0[(i + 1, j + 1)]);
        // reduced index 0 is the (0, 1) correlator
        let mut left = vec![ZERO; dim];
        left[0] = C64::new(1.0, 0.0);
        PoleExpansion::new(&reduced, &left, &self.rhs.as_slice()[1..])
    }
}

/// How the per-frequency resolvent is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolventMethod {
    /// Eigendecomposition, falling back to LU when badly conditioned.
    Auto,
    Eigen,
    PointwiseLu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumOptions {
    pub method: ResolventMethod,
    /// Eigenvector condition numbers above this switch `Auto` to LU.
    pub eigen_condition_limit: f64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            method: ResolventMethod::Auto,
            eigen_condition_limit: 1e6,
        }
    }
}

/// Spectrum together with the intermediate results that produced it.
#[derive(Debug, Clone)]
pub struct SpectrumSolution {
    pub series: SpectrumSeries,
    pub moments: MomentTable,
    /// `Eigen` or `PointwiseLu`, whichever was actually used.
    pub method: ResolventMethod,
    pub eigen_condition: Option<f64>,
}

fn laplace_point(drive: &DriveField, omega: f64) -> C64 {
    C64::new(0.0, drive.omega_d() - omega)
}

/// Evaluates the fluorescence density for an already solved moment table.
pub fn spectrum_from_moments(
    params: &SystemParams,
    drive: &DriveField,
    grid: &FrequencyGrid,
    moments: MomentTable,
    options: &SpectrumOptions,
) -> Result<SpectrumSolution> {
    let system = build_beta_operator(params, drive, &moments)?;
    let prefactor = params.kappa_ex() / PI;

    let mut method = options.method;
    let mut eigen_condition = None;
    let mut values = None;
    if method != ResolventMethod::PointwiseLu {
        match system.eigen_resolvent() {
            Ok(res) => {
                eigen_condition = Some(res.condition());
                if method == ResolventMethod::Eigen || res.condition() <= options.eigen_condition_limit {
                    values = Some(
                        grid.points()
                            .par_iter()
                            .map(|&w| prefactor * res.eval(laplace_point(drive, w)).re)
                            .collect::<Vec<_>>(),
                    );
                    method = ResolventMethod::Eigen;
                } else {
                    info!(
                        "eigenvector condition {:.2e} above {:.1e}; using per-point LU",
                        res.condition(),
                        options.eigen_condition_limit
                    );
                }
            }
            Err(e) if method == ResolventMethod::Eigen => return Err(e),
            Err(e) => info!("eigendecomposition failed ({e}); using per-point LU"),
        }
    }
    let values = match values {
        Some(v) => v,
        None => {
            method = ResolventMethod::PointwiseLu;
            grid.points()
                .par_iter()
                .map(|&w| Ok(prefactor * system.beta01_lu(laplace_point(drive, w))?.re))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let coherent = coherent_power(params, drive, &moments);
    let series = SpectrumSeries::new(grid.clone(), values, coherent, drive.omega_d())?;
    Ok(SpectrumSolution {
        series,
        moments,
        method,
        eigen_condition,
    })
}

/// Solves the moments and evaluates the fluorescence spectrum.
pub fn compute_spectrum(
    params: &SystemParams,
    drive: &DriveField,
    grid: &FrequencyGrid,
    n_max: usize,
    options: &SpectrumOptions,
) -> Result<SpectrumSolution> {
    let moments = solve_steady_moments(params, drive, n_max)?;
    spectrum_from_moments(params, drive, grid, moments, options)
}

/// Fluorescence spectrum with default options; the coherent weight is
/// filled in as well.
pub fn incoherent_spectrum(
    params: &SystemParams,
    drive: &DriveField,
    grid: &FrequencyGrid,
    n_max: usize,
) -> Result<SpectrumSeries> {
    Ok(compute_spectrum(params, drive, grid, n_max, &SpectrumOptions::default())?.series)
}

/// Weight `|F - i sqrt(κ_ex) <a>|²` of the elastic peak.
pub fn coherent_power(params: &SystemParams, drive: &DriveField, moments: &MomentTable) -> f64 {
    let out = drive.amplitude() - C64::new(0.0, params.kappa_ex().sqrt()) * moments.get(0, 1);
    out.norm_sqr()
}

/// Total fluorescence photon rate `κ_ex (<a†a> - |<a>|²)`.
pub fn total_incoherent_rate(moments: &MomentTable, params: &SystemParams) -> f64 {
    params.kappa_ex() * moments.connected_photon_number()
}

/// Boxcar average over a resolution bandwidth `rbw_hz`, as seen by a
/// swept analyzer. The elastic peak is materialized as a boxcar of the same
/// width centred on the drive; the returned series has zero coherent
/// weight. Sample mass is conserved exactly (edge cells renormalize their
/// kernel).
pub fn convolve_resolution(series: &SpectrumSeries, rbw_hz: f64) -> Result<SpectrumSeries> {
    let step = series
        .grid
        .uniform_step()
        .ok_or_else(|| Error::InvalidParameter("resolution convolution needs a uniform grid".into()))?;
    let width = TAU * rbw_hz;
    if !(width.is_finite()) || width < step * (1.0 - 1e-9) {
        return Err(Error::InvalidParameter(format!(
            "resolution bandwidth {rbw_hz} Hz is narrower than the grid step {} Hz",
            step / TAU
        )));
    }
    let n = series.values.len();
    let pts = series.grid.points();
    let half = width / 2.0;
    let reach = (half / step).ceil() as isize + 1;
    // overlap of the unit cell at offset j with [-half, half], in cell units
    let kernel: Vec<f64> = (-reach..=reach)
        .map(|j| {
            let lo = (j as f64 - 0.5) * step;
            let hi = (j as f64 + 0.5) * step;
            ((hi.min(half) - lo.max(-half)).max(0.0)) / width
        })
        .collect();

    let mut out = vec![0.0; n];
    for k in 0..n {
        let mut norm = 0.0;
        for (idx, w) in kernel.iter().enumerate() {
            let t = k as isize + idx as isize - reach;
            if t >= 0 && (t as usize) < n {
                norm += w;
            }
        }
        if norm == 0.0 {
            continue;
        }
        for (idx, w) in kernel.iter().enumerate() {
            let t = k as isize + idx as isize - reach;
            if t >= 0 && (t as usize) < n {
                out[t as usize] += series.values[k] * w / norm;
            }
        }
    }

    if series.coherent_weight > 0.0 {
        let lo = series.drive_omega - half;
        let hi = series.drive_omega + half;
        let mut shares: Vec<(usize, f64)> = Vec::new();
        for (k, &w) in pts.iter().enumerate() {
            let overlap = ((w + step / 2.0).min(hi) - (w - step / 2.0).max(lo)).max(0.0);
            if overlap > 0.0 {
                shares.push((k, overlap));
            }
        }
        let total: f64 = shares.iter().map(|s| s.1).sum();
        if total > 0.0 {
            for (k, o) in shares {
                out[k] += series.coherent_weight * (o / total) / step;
            }
        }
    }
    SpectrumSeries::new(series.grid.clone(), out, 0.0, series.drive_omega)
}
