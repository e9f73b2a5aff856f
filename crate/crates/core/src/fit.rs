//! Bounded derivative-free fitting of measured fluorescence spectra for
//! (κ_in, γ_p, A), with the resonator frequency, Kerr coefficient, external
//! coupling and drive held fixed.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{mhz, power_from_amplitude, to_hz, DriveField, FrequencyGrid, SystemParams};
use crate::spectrum::{
    compute_spectrum, convolve_resolution, dbm_to_watts, flux_to_watts_per_hz, watts_to_dbm, SpectrumOptions,
};

/// Fitted parameters and their order in the normalized search space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub kappa_in: f64,
    pub gamma_p: f64,
    pub scale: f64,
}

/// Closed interval for one fitted parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
}

impl Bound {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidParameter(format!("degenerate bound [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    fn to_unit(self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    fn from_unit(self, u: f64) -> f64 {
        self.lo + u.clamp(0.0, 1.0) * (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub kappa_in: Bound,
    pub gamma_p: Bound,
    pub scale: Bound,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            kappa_in: Bound { lo: 0.0, hi: mhz(0.07) },
            gamma_p: Bound { lo: 0.0, hi: mhz(0.01) },
            scale: Bound { lo: 0.7, hi: 1.1 },
        }
    }
}

impl Bounds {
    fn to_unit(&self, c: Candidate) -> [f64; 3] {
        [
            self.kappa_in.to_unit(c.kappa_in),
            self.gamma_p.to_unit(c.gamma_p),
            self.scale.to_unit(c.scale),
        ]
    }

    fn from_unit(&self, u: [f64; 3]) -> Candidate {
        Candidate {
            kappa_in: self.kappa_in.from_unit(u[0]),
            gamma_p: self.gamma_p.from_unit(u[1]),
            scale: self.scale.from_unit(u[2]),
        }
    }

    pub fn contains(&self, c: Candidate) -> bool {
        let inside = |b: Bound, x: f64| x >= b.lo && x <= b.hi;
        inside(self.kappa_in, c.kappa_in) && inside(self.gamma_p, c.gamma_p) && inside(self.scale, c.scale)
    }
}

/// Search strategy of [`fit_spectrum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Tree-structured Parzen estimator over the bounded box.
    Tpe,
    /// Nelder-Mead simplex from the initial guess, clamped to the box.
    NelderMead,
}

/// How residuals are weighted in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Plain linear-power residuals.
    Uniform,
    /// Residuals divided by the data value.
    Relative,
}

/// Measured power spectral density.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredSpectrum {
    freqs_hz: Vec<f64>,
    psd: Vec<f64>,
    pub drive_power_dbm: f64,
    pub rbw_hz: f64,
}

impl MeasuredSpectrum {
    /// `psd` in linear W/Hz.
    pub fn new(freqs_hz: Vec<f64>, psd: Vec<f64>, drive_power_dbm: f64, rbw_hz: f64) -> Result<Self> {
        if freqs_hz.len() != psd.len() || freqs_hz.len() < 4 {
            return Err(Error::InvalidParameter(
                "measured spectrum needs at least 4 points with matching lengths".into(),
            ));
        }
        if freqs_hz.windows(2).any(|w| !(w[1] > w[0])) || freqs_hz.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidParameter("frequencies must be finite and strictly increasing".into()));
        }
        if psd.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("spectral density values must be finite".into()));
        }
        if !(rbw_hz > 0.0 && rbw_hz.is_finite()) {
            return Err(Error::InvalidParameter("resolution bandwidth must be positive".into()));
        }
        Ok(Self {
            freqs_hz,
            psd,
            drive_power_dbm,
            rbw_hz,
        })
    }

    pub fn freqs_hz(&self) -> &[f64] {
        &self.freqs_hz
    }

    /// Linear W/Hz.
    pub fn psd(&self) -> &[f64] {
        &self.psd
    }

    /// Columns `freq_hz,psd_dbm_per_hz`. Drive power and resolution
    /// bandwidth come from `# drive_power_dbm = ..` and `# rbw_hz = ..`
    /// lines unless given explicitly.
    pub fn from_csv(text: &str, drive_power_dbm: Option<f64>, rbw_hz: Option<f64>) -> Result<Self> {
        let mut power = drive_power_dbm;
        let mut rbw = rbw_hz;
        let mut f = Vec::new();
        let mut v = Vec::new();
        let mut header = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Csv(format!("line {}: '{}': {e}", lineno + 1, s.trim())))
            };
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, val)) = meta.split_once('=') {
                    match k.trim() {
                        "drive_power_dbm" if drive_power_dbm.is_none() => power = Some(parse(val)?),
                        "rbw_hz" if rbw_hz.is_none() => rbw = Some(parse(val)?),
                        _ => {}
                    }
                }
                continue;
            }
            if !header {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols != ["freq_hz", "psd_dbm_per_hz"] {
                    return Err(Error::Csv(format!("expected header freq_hz,psd_dbm_per_hz, got '{line}'")));
                }
                header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 2 {
                return Err(Error::Csv(format!("line {}: expected 2 columns", lineno + 1)));
            }
            f.push(parse(cols[0])?);
            v.push(dbm_to_watts(parse(cols[1])?));
        }
        let power = power.ok_or_else(|| Error::Csv("drive power not given".into()))?;
        let rbw = rbw.ok_or_else(|| Error::Csv("resolution bandwidth not given".into()))?;
        Self::new(f, v, power, rbw)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# drive_power_dbm = {}\n# rbw_hz = {}\nfreq_hz,psd_dbm_per_hz\n",
            self.drive_power_dbm, self.rbw_hz
        );
        for (f, v) in self.freqs_hz.iter().zip(&self.psd) {
            out.push_str(&format!("{},{}\n", f, watts_to_dbm(*v)));
        }
        out
    }
}

/// Fixed model parameters, bounds and search settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub omega0: f64,
    pub kerr: f64,
    pub kappa_ex: f64,
    pub drive: DriveField,
    pub bounds: Bounds,
    pub budget: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub initial: Candidate,
    pub weighting: Weighting,
    /// Half width (Hz) of the window around the drive left out of the
    /// residual; `None` means three resolution bandwidths.
    pub exclusion_half_width_hz: Option<f64>,
    pub n_max: usize,
}

impl FitConfig {
    pub fn new(omega0: f64, kerr: f64, kappa_ex: f64, drive: DriveField) -> Self {
        Self {
            omega0,
            kerr,
            kappa_ex,
            drive,
            bounds: Bounds::default(),
            budget: 500,
            seed: 0,
            strategy: Strategy::Tpe,
            initial: Candidate {
                kappa_in: mhz(0.05),
                gamma_p: mhz(0.0025),
                scale: 1.0,
            },
            weighting: Weighting::Uniform,
            exclusion_half_width_hz: None,
            n_max: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidParameter("trial budget must be at least 1".into()));
        }
        for b in [self.bounds.kappa_in, self.bounds.gamma_p, self.bounds.scale] {
            Bound::new(b.lo, b.hi)?;
        }
        if self.bounds.kappa_in.lo < 0.0 || self.bounds.gamma_p.lo < 0.0 {
            return Err(Error::InvalidParameter("rate bounds must be non-negative".into()));
        }
        if !self.bounds.contains(self.initial) {
            return Err(Error::InvalidParameter("initial guess lies outside the bounds".into()));
        }
        SystemParams::new(self.omega0, self.kerr, self.kappa_ex, 0.0, 0.0)?;
        Ok(())
    }

    pub fn params_for(&self, c: Candidate) -> Result<SystemParams> {
        SystemParams::new(self.omega0, self.kerr, self.kappa_ex, c.kappa_in, c.gamma_p)
    }
}

/// Model power spectral density (W/Hz, unit scale) as an analyzer with the
/// data's resolution bandwidth would record it at the data frequencies.
pub fn model_psd(params: &SystemParams, drive: &DriveField, data: &MeasuredSpectrum, n_max: usize) -> Result<Vec<f64>> {
    let rbw = TAU * data.rbw_hz;
    let f = data.freqs_hz();
    let lo = TAU * f[0] - rbw;
    let hi = TAU * f[f.len() - 1] + rbw;
    let step = rbw / 2.0;
    let count = (((hi - lo) / step).ceil() as usize + 1).max(3);
    let grid = FrequencyGrid::uniform(0.5 * (lo + hi), 0.5 * (hi - lo), count)?;
    let series = compute_spectrum(params, drive, &grid, n_max, &SpectrumOptions::default())?.series;
    let smooth = convolve_resolution(&series, data.rbw_hz)?;
    let pts = grid.points();
    let vals = smooth.values();
    let h = pts[1] - pts[0];
    Ok(f.iter()
        .map(|&fhz| {
            let w = TAU * fhz;
            let x = ((w - pts[0]) / h).clamp(0.0, (pts.len() - 1) as f64);
            let k = (x.floor() as usize).min(pts.len() - 2);
            let t = x - k as f64;
            let flux = vals[k] * (1.0 - t) + vals[k + 1] * t;
            flux_to_watts_per_hz(w, flux)
        })
        .collect())
}

fn excluded(config: &FitConfig, data: &MeasuredSpectrum) -> Vec<bool> {
    let half = config.exclusion_half_width_hz.unwrap_or(3.0 * data.rbw_hz);
    let fd = to_hz(config.drive.omega_d());
    data.freqs_hz.iter().map(|f| (f - fd).abs() <= half).collect()
}

/// Normalized residual `Σ w (A·model - data)² / Σ w data²` outside the
/// drive-leakage window. Non-convergent candidates give `+∞`.
pub fn objective(candidate: Candidate, data: &MeasuredSpectrum, config: &FitConfig) -> f64 {
    let mask = excluded(config, data);
    objective_masked(candidate, data, config, &mask)
}

fn objective_masked(c: Candidate, data: &MeasuredSpectrum, config: &FitConfig, mask: &[bool]) -> f64 {
    let Ok(params) = config.params_for(c) else {
        return f64::INFINITY;
    };
    let Ok(model) = model_psd(&params, &config.drive, data, config.n_max) else {
        return f64::INFINITY;
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..model.len() {
        if mask[k] {
            continue;
        }
        let d = data.psd[k];
        let w = match config.weighting {
            Weighting::Uniform => 1.0,
            Weighting::Relative => 1.0 / (d * d).max(f64::MIN_POSITIVE),
        };
        let r = c.scale * model[k] - d;
        num += w * r * r;
        den += w * d * d;
    }
    if den > 0.0 && num.is_finite() {
        num / den
    } else {
        f64::INFINITY
    }
}

/// One objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub candidate: Candidate,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub best: Candidate,
    pub objective: f64,
    pub history: Vec<Trial>,
    pub strategy: Strategy,
    /// Best value within 0.1% of the range from the lower or upper bound,
    /// for `(κ_in, γ_p, A)`.
    pub saturated: [bool; 3],
    /// Relative objective rise when γ_p is moved to either bound.
    pub gamma_p_sensitivity: f64,
    pub gamma_p_reliable: bool,
}

impl FitResult {
    /// `κ_in + 2γ_p`.
    pub fn kappa_in_star(&self) -> f64 {
        self.best.kappa_in + 2.0 * self.best.gamma_p
    }

    pub fn failed_trials(&self) -> usize {
        self.history.iter().filter(|t| !t.objective.is_finite()).count()
    }

    /// `key = value` report.
    pub fn report(&self) -> String {
        let strategy = match self.strategy {
            Strategy::Tpe => "tpe",
            Strategy::NelderMead => "nelder-mead",
        };
        let mut out = String::new();
        out.push_str(&format!("strategy = {strategy}\n"));
        out.push_str(&format!("kappa_in_mhz = {}\n", self.best.kappa_in / mhz(1.0)));
        out.push_str(&format!("gamma_p_mhz = {}\n", self.best.gamma_p / mhz(1.0)));
        out.push_str(&format!("scale = {}\n", self.best.scale));
        out.push_str(&format!("kappa_in_star_mhz = {}\n", self.kappa_in_star() / mhz(1.0)));
        out.push_str(&format!("objective = {}\n", self.objective));
        out.push_str(&format!("trials = {}\n", self.history.len()));
        out.push_str(&format!("failed_trials = {}\n", self.failed_trials()));
        out.push_str(&format!("saturated_kappa_in = {}\n", self.saturated[0]));
        out.push_str(&format!("saturated_gamma_p = {}\n", self.saturated[1]));
        out.push_str(&format!("saturated_scale = {}\n", self.saturated[2]));
        out.push_str(&format!("gamma_p_sensitivity = {}\n", self.gamma_p_sensitivity));
        out.push_str(&format!("gamma_p_reliable = {}\n", self.gamma_p_reliable));
        out
    }
}

/// Objective rise (relative to the best value) below which γ_p is reported
/// as poorly constrained.
pub const GAMMA_P_FLATNESS: f64 = 0.05;

struct Evaluator<'a> {
    data: &'a MeasuredSpectrum,
    config: &'a FitConfig,
    mask: Vec<bool>,
    history: Vec<Trial>,
}

impl Evaluator<'_> {
    fn eval(&mut self, u: [f64; 3]) -> f64 {
        let c = self.config.bounds.from_unit(u);
        let v = objective_masked(c, self.data, self.config, &self.mask);
        self.history.push(Trial {
            candidate: c,
            objective: v,
        });
        v
    }

    fn exhausted(&self) -> bool {
        self.history.len() >= self.config.budget
    }
}

/// Fits `(κ_in, γ_p, A)` with the configured strategy.
pub fn fit_spectrum(data: &MeasuredSpectrum, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let mut ev = Evaluator {
        data,
        config,
        mask: excluded(config, data),
        history: Vec::with_capacity(config.budget),
    };
    if ev.mask.iter().all(|m| *m) {
        return Err(Error::Fit("every data point lies inside the exclusion window".into()));
    }
    match config.strategy {
        Strategy::Tpe => run_tpe(&mut ev),
        Strategy::NelderMead => run_nelder_mead(&mut ev),
    }
    let best = ev
        .history
        .iter()
        .filter(|t| t.objective.is_finite())
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .copied()
        .ok_or_else(|| Error::Fit("every trial failed to evaluate".into()))?;
    let u = config.bounds.to_unit(best.candidate);
    let saturated = [u[0], u[1], u[2]].map(|x| x < 1e-3 || x > 1.0 - 1e-3);

    let gamma_p_sensitivity = gamma_p_profile_rise(data, config, &ev.mask, best);
    Ok(FitResult {
        best: best.candidate,
        objective: best.objective,
        history: ev.history,
        strategy: config.strategy,
        saturated,
        gamma_p_sensitivity,
        gamma_p_reliable: gamma_p_sensitivity >= GAMMA_P_FLATNESS,
    })
}

/// Evaluations spent re-optimizing `(κ_in, A)` at each γ_p bound.
const PROFILE_EVALS: usize = 60;

/// Smallest relative objective rise over the two γ_p bounds, with κ_in and
/// A re-optimized at each bound.
fn gamma_p_profile_rise(data: &MeasuredSpectrum, config: &FitConfig, mask: &[bool], best: Trial) -> f64 {
    let b = config.bounds;
    let u = b.to_unit(best.candidate);
    let rise = [b.gamma_p.lo, b.gamma_p.hi]
        .iter()
        .map(|&g| {
            let f = |v: [f64; 2]| {
                let c = Candidate {
                    kappa_in: b.kappa_in.from_unit(v[0]),
                    gamma_p: g,
                    scale: b.scale.from_unit(v[1]),
                };
                objective_masked(c, data, config, mask)
            };
            let (_, v) = simplex_minimize(f, [u[0], u[2]], 0.1, PROFILE_EVALS);
            (v - best.objective) / best.objective.max(f64::MIN_POSITIVE)
        })
        .filter(|r| r.is_finite())
        .fold(f64::INFINITY, f64::min);
    if rise.is_finite() {
        rise.max(0.0)
    } else {
        0.0
    }
}

const TPE_STARTUP: usize = 20;
const TPE_CANDIDATES: usize = 24;
const TPE_GOOD_FRACTION: f64 = 0.1;
const TPE_GOOD_MAX: usize = 25;

fn run_tpe(ev: &mut Evaluator) {
    let mut rng = ChaCha8Rng::seed_from_u64(ev.config.seed);
    let startup = TPE_STARTUP.min(ev.config.budget);
    for _ in 0..startup {
        let u = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        ev.eval(u);
    }
    while !ev.exhausted() {
        let mut ranked: Vec<([f64; 3], f64)> = ev
            .history
            .iter()
            .map(|t| (ev.config.bounds.to_unit(t.candidate), t.objective))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        let n_good = ((TPE_GOOD_FRACTION * ranked.len() as f64).ceil() as usize)
            .min(TPE_GOOD_MAX)
            .clamp(1, ranked.len() - 1);
        let good: Vec<[f64; 3]> = ranked[..n_good].iter().map(|r| r.0).collect();
        let bad: Vec<[f64; 3]> = ranked[n_good..].iter().map(|r| r.0).collect();
        let l = Parzen::new(&good);
        let g = Parzen::new(&bad);
        let mut best_u = good[0];
        let mut best_score = f64::NEG_INFINITY;
        for _ in 0..TPE_CANDIDATES {
            let u = l.sample(&mut rng);
            let score = l.log_density(u) - g.log_density(u);
            if score > best_score {
                best_score = score;
                best_u = u;
            }
        }
        ev.eval(best_u);
    }
}

/// Gaussian mixture on the unit cube: one component per observation plus a
/// broad prior component, with bandwidths from the neighbour spacing.
struct Parzen {
    mu: Vec<[f64; 3]>,
    sigma: Vec<[f64; 3]>,
}

impl Parzen {
    fn new(points: &[[f64; 3]]) -> Self {
        let mut mu: Vec<[f64; 3]> = points.to_vec();
        mu.push([0.5; 3]);
        let n = mu.len();
        let min_bw = 1.0 / (n.min(100) as f64);
        let mut sigma = vec![[1.0; 3]; n];
        for d in 0..3 {
            let mut order: Vec<usize> = (0..n - 1).collect();
            order.sort_by(|&a, &b| mu[a][d].total_cmp(&mu[b][d]));
            for (rank, &k) in order.iter().enumerate() {
                let left = if rank == 0 { 0.0 } else { mu[order[rank - 1]][d] };
                let right = if rank + 1 == order.len() { 1.0 } else { mu[order[rank + 1]][d] };
                let x = mu[k][d];
                sigma[k][d] = (x - left).max(right - x).clamp(min_bw, 1.0);
            }
        }
        Self { mu, sigma }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let k = rng.random_range(0..self.mu.len());
        let mut u = [0.0; 3];
        for (d, x) in u.iter_mut().enumerate() {
            let n = Normal::new(self.mu[k][d], self.sigma[k][d]).expect("positive bandwidth");
            // truncated normal by rejection, falling back to clamping
            let mut v = n.sample(rng);
            let mut tries = 0;
            while !(0.0..=1.0).contains(&v) && tries < 32 {
                v = n.sample(rng);
                tries += 1;
            }
            *x = v.clamp(0.0, 1.0);
        }
        u
    }

    fn log_density(&self, u: [f64; 3]) -> f64 {
        let terms: Vec<f64> = self
            .mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| (0..3).map(|d| -0.5 * ((u[d] - m[d]) / s[d]).powi(2) - s[d].ln()).sum())
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln() - (terms.len() as f64).ln()
    }
}

fn run_nelder_mead(ev: &mut Evaluator) {
    let start = ev.config.bounds.to_unit(ev.config.initial);
    let budget = ev.config.budget;
    simplex_minimize(|u| ev.eval(u), start, 0.1, budget);
}

/// Nelder-Mead on the unit cube with points clamped to the faces. Returns
/// the best vertex after at most `max_evals` evaluations.
fn simplex_minimize<const D: usize>(
    mut f: impl FnMut([f64; D]) -> f64,
    start: [f64; D],
    step: f64,
    max_evals: usize,
) -> ([f64; D], f64) {
    let mut evals = 0;
    let mut eval = |u: [f64; D], evals: &mut usize| {
        *evals += 1;
        f(u)
    };
    let mut simplex: Vec<([f64; D], f64)> = Vec::with_capacity(D + 1);
    simplex.push((start, eval(start, &mut evals)));
    for d in 0..D {
        if evals >= max_evals {
            break;
        }
        let mut u = start;
        u[d] = if u[d] + step <= 1.0 { u[d] + step } else { u[d] - step };
        simplex.push((u, eval(u, &mut evals)));
    }
    let best_of = |s: &[([f64; D], f64)]| *s.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
    if simplex.len() <= D {
        return best_of(&simplex);
    }
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let size = simplex[1..]
            .iter()
            .map(|s| (0..D).map(|d| (s.0[d] - simplex[0].0[d]).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let spread = (simplex[D].1 - simplex[0].1).abs();
        if size < 1e-7 || (spread.is_finite() && spread <= 1e-12 * simplex[0].1.abs()) {
            break;
        }
        let mut centroid = [0.0; D];
        for s in &simplex[..D] {
            for d in 0..D {
                centroid[d] += s.0[d] / D as f64;
            }
        }
        let worst = simplex[D];
        let along = |t: f64| {
            let mut x = [0.0; D];
            for d in 0..D {
                x[d] = (centroid[d] + t * (worst.0[d] - centroid[d])).clamp(0.0, 1.0);
            }
            x
        };
        let xr = along(-1.0);
        let fr = eval(xr, &mut evals);
        if fr < simplex[0].1 {
            if evals >= max_evals {
                simplex[D] = (xr, fr);
                break;
            }
            let xe = along(-2.0);
            let fe = eval(xe, &mut evals);
            simplex[D] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[D - 1].1 {
            simplex[D] = (xr, fr);
        } else {
            if evals >= max_evals {
                break;
            }
            let xc = if fr < worst.1 { along(-0.5) } else { along(0.5) };
            let fc = eval(xc, &mut evals);
            if fc < worst.1.min(fr) {
                simplex[D] = (xc, fc);
            } else {
                let best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    if evals >= max_evals {
                        break;
                    }
                    let mut x = best;
                    for d in 0..D {
                        x[d] = best[d] + 0.5 * (s.0[d] - best[d]);
                    }
                    *s = (x, eval(x, &mut evals));
                }
            }
        }
    }
    best_of(&simplex)
}

/// Noise of a synthetic analyzer trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Standard deviation of the multiplicative Gaussian factor.
    pub relative: f64,
    /// Standard deviation (W/Hz) of the additive background after
    /// subtraction of its mean.
    pub floor: f64,
}

/// Synthetic measured spectrum: the model at `truth` scaled by `A`, with
/// multiplicative and additive Gaussian noise.
pub fn synthetic_spectrum(
    config: &FitConfig,
    truth: Candidate,
    freqs_hz: Vec<f64>,
    rbw_hz: f64,
    noise: NoiseModel,
    seed: u64,
) -> Result<MeasuredSpectrum> {
    let power = power_from_amplitude(config.drive.amplitude(), config.drive.omega_d());
    let n = freqs_hz.len();
    let template = MeasuredSpectrum::new(freqs_hz, vec![0.0; n], power, rbw_hz)?;
    let params = config.params_for(truth)?;
    let model = model_psd(&params, &config.drive, &template, config.n_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bad = |e: rand_distr::NormalError| Error::InvalidParameter(e.to_string());
    let rel = Normal::new(0.0, noise.relative).map_err(bad)?;
    let floor = Normal::new(0.0, noise.floor).map_err(bad)?;
    let psd = model
        .iter()
        .map(|m| truth.scale * m * (1.0 + rel.sample(&mut rng)) + floor.sample(&mut rng))
        .collect();
    MeasuredSpectrum::new(template.freqs_hz, psd, power, rbw_hz)
}

/// Overlay of model and data as CSV (`freq_hz,data_w_per_hz,model_w_per_hz`).
pub fn overlay_csv(data: &MeasuredSpectrum, config: &FitConfig, best: Candidate) -> Result<String> {
    let params = config.params_for(best)?;
    let model = model_psd(&params, &config.drive, data, config.n_max)?;
    let mask = excluded(config, data);
    let mut out = String::from("freq_hz,data_w_per_hz,model_w_per_hz,excluded\n");
    for k in 0..model.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            data.freqs_hz[k],
            data.psd[k],
            best.scale * model[k],
            mask[k] as u8
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn setup(x: f64, n_points: usize) -> (FitConfig, Vec<f64>) {
        let p = SystemParams::from_mhz(10.3653, -9.7, 0.260, 0.046, 0.0065).unwrap();
        let d = DriveField::resonant_normalized(&p, x).unwrap();
        let mut cfg = FitConfig::new(p.omega0(), p.kerr(), p.kappa_ex(), d);
        cfg.n_max = 12;
        let fd = to_hz(d.omega_d());
        let step = 30e6 / (n_points - 1) as f64;
        let freqs = (0..n_points).map(|k| fd - 15e6 + step * k as f64).collect();
        (cfg, freqs)
    }

    fn truth() -> Candidate {
        Candidate {
            kappa_in: mhz(0.046),
            gamma_p: mhz(0.0065),
            scale: 0.83,
        }
    }

    const QUIET: NoiseModel = NoiseModel {
        relative: 0.0,
        floor: 0.0,
    };

    #[test]
    fn noiseless_data_has_zero_objective_at_truth() {
        let (cfg, f) = setup(10.0, 301);
        let data = synthetic_spectrum(&cfg, truth(), f, 1e5, QUIET, 0).unwrap();
        assert!(objective(truth(), &data, &cfg) <= 1e-16);
        let doubled = Candidate {
            scale: 2.0 * truth().scale,
            ..truth()
        };
        assert!(objective(doubled, &data, &cfg) > objective(truth(), &data, &cfg));
        assert!(objective(doubled, &data, &cfg) > 0.5);
    }

    #[test]
    fn relative_weighting_also_vanishes_at_truth() {
        let (mut cfg, f) = setup(10.0, 301);
        cfg.weighting = Weighting::Relative;
        let data = synthetic_spectrum(&cfg, truth(), f, 1e5, QUIET, 0).unwrap();
        assert!(objective(truth(), &data, &cfg) <= 1e-16);
    }

    #[test]
    fn truncation_failure_is_infinite() {
        let (mut cfg, f) = setup(10.0, 301);
        let data = synthetic_spectrum(&cfg, truth(), f, 1e5, QUIET, 0).unwrap();
        cfg.n_max = 2;
        assert_eq!(objective(truth(), &data, &cfg), f64::INFINITY);
        cfg.budget = 5;
        cfg.strategy = Strategy::NelderMead;
        assert!(matches!(fit_spectrum(&data, &cfg), Err(Error::Fit(_))));
    }

    #[test]
    fn saturated_bound_is_flagged() {
        let (mut cfg, f) = setup(10.0, 301);
        let data = synthetic_spectrum(&cfg, truth(), f, 1e5, QUIET, 0).unwrap();
        cfg.bounds.kappa_in = Bound::new(0.0, mhz(0.03)).unwrap();
        cfg.bounds.gamma_p = Bound::new(0.0, mhz(0.002)).unwrap();
        cfg.initial.kappa_in = mhz(0.02);
        cfg.initial.gamma_p = mhz(0.001);
        cfg.strategy = Strategy::NelderMead;
        cfg.budget = 150;
        let r = fit_spectrum(&data, &cfg).unwrap();
        assert!(r.saturated[0] || r.saturated[1], "{}", r.report());
        assert!(cfg.bounds.contains(r.best));
        assert!(r.objective.is_finite());
    }

    #[test]
    fn everything_excluded_is_an_error() {
        let (mut cfg, f) = setup(10.0, 301);
        let data = synthetic_spectrum(&cfg, truth(), f, 1e5, QUIET, 0).unwrap();
        cfg.exclusion_half_width_hz = Some(1e9);
        assert!(matches!(fit_spectrum(&data, &cfg), Err(Error::Fit(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let (mut cfg, _) = setup(10.0, 11);
        cfg.initial.scale = 2.0;
        assert!(cfg.validate().is_err());
        cfg.initial.scale = 1.0;
        cfg.budget = 0;
        assert!(cfg.validate().is_err());
        assert!(Bound::new(1.0, 1.0).is_err());
    }

    #[test]
    fn same_seed_same_history() {
        let (mut cfg, f) = setup(10.0, 201);
        let data = synthetic_spectrum(
            &cfg,
            truth(),
            f,
            1e5,
            NoiseModel {
                relative: 0.05,
                floor: 0.0,
            },
            3,
        )
        .unwrap();
        cfg.budget = 30;
        cfg.seed = 11;
        let a = fit_spectrum(&data, &cfg).unwrap();
        let b = fit_spectrum(&data, &cfg).unwrap();
        assert_eq!(a.report(), b.report());
        assert_eq!(a.history, b.history);
        cfg.seed = 12;
        let c = fit_spectrum(&data, &cfg).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn history_respects_budget_and_bounds() {
        let (mut cfg, f) = setup(10.0, 201);
        let data = synthetic_spectrum(&cfg, truth(), f, 1e5, QUIET, 0).unwrap();
        for strategy in [Strategy::Tpe, Strategy::NelderMead] {
            cfg.strategy = strategy;
            cfg.budget = 40;
            let r = fit_spectrum(&data, &cfg).unwrap();
            assert!(r.history.len() <= 40 && !r.history.is_empty());
            assert!(r.history.iter().all(|t| cfg.bounds.contains(t.candidate)));
            let min = r.history.iter().map(|t| t.objective).fold(f64::INFINITY, f64::min);
            assert_eq!(r.objective, min);
            assert!((r.kappa_in_star() - r.best.kappa_in - 2.0 * r.best.gamma_p).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_roundtrip() {
        let (cfg, f) = setup(10.0, 51);
        let data = synthetic_spectrum(&cfg, truth(), f, 1e5, QUIET, 0).unwrap();
        let back = MeasuredSpectrum::from_csv(&data.to_csv(), None, None).unwrap();
        assert_eq!(back.freqs_hz(), data.freqs_hz());
        assert_eq!(back.rbw_hz, data.rbw_hz);
        assert_eq!(back.drive_power_dbm, data.drive_power_dbm);
        for (a, b) in back.psd().iter().zip(data.psd()) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
        let overridden = MeasuredSpectrum::from_csv(&data.to_csv(), Some(-100.0), Some(2e5)).unwrap();
        assert_eq!(overridden.drive_power_dbm, -100.0);
        assert_eq!(overridden.rbw_hz, 2e5);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            MeasuredSpectrum::from_csv("freq_hz,psd_dbm_per_hz\n1,2\n2,3\n3,4\n4,5\n", None, Some(1.0)),
            Err(Error::Csv(_))
        ));
        assert!(matches!(
            MeasuredSpectrum::from_csv("f,p\n", Some(0.0), Some(1.0)),
            Err(Error::Csv(_))
        ));
        assert!(matches!(
            MeasuredSpectrum::from_csv("freq_hz,psd_dbm_per_hz\n1,x\n", Some(0.0), Some(1.0)),
            Err(Error::Csv(_))
        ));
    }

    #[test]
    fn simplex_finds_quadratic_minimum() {
        let (u, v) = simplex_minimize(
            |x: [f64; 3]| (x[0] - 0.3).powi(2) + 2.0 * (x[1] - 0.7).powi(2) + (x[2] - 0.1).powi(2),
            [0.5; 3],
            0.1,
            1000,
        );
        assert!(v < 1e-12);
        assert!((u[0] - 0.3).abs() < 1e-5 && (u[1] - 0.7).abs() < 1e-5 && (u[2] - 0.1).abs() < 1e-5);
        // minimum outside the cube lands on the face
        let (u, _) = simplex_minimize(|x: [f64; 2]| (x[0] + 1.0).powi(2) + (x[1] - 0.5).powi(2), [0.5; 2], 0.1, 500);
        assert!(u[0] < 1e-6 && (u[1] - 0.5).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn unit_mapping_roundtrip(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            let bounds = Bounds::default();
            let cand = bounds.from_unit([a, b, c]);
            prop_assert!(bounds.contains(cand));
            let back = bounds.to_unit(cand);
            prop_assert!((back[0] - a).abs() < 1e-12 && (back[1] - b).abs() < 1e-12 && (back[2] - c).abs() < 1e-12);
        }

        #[test]
        fn objective_non_negative(k in 0.0f64..0.07, g in 0.0f64..0.01, s in 0.7f64..1.1) {
            let (cfg, f) = setup(5.0, 101);
            let data = synthetic_spectrum(&cfg, truth(), f, 1e5, NoiseModel { relative: 0.05, floor: 0.0 }, 1).unwrap();
            let v = objective(Candidate { kappa_in: mhz(k), gamma_p: mhz(g), scale: s }, &data, &cfg);
            prop_assert!(v >= 0.0);
        }
    }
}
