//! Run configuration as flat `key = value` text. The same format is used
//! for config files and for the `#` metadata header of every emitted CSV.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fit::{Bound, Bounds, Candidate, FitConfig, Strategy, Weighting};
use crate::model::{ghz, mhz, DriveField, FrequencyGrid, SystemParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Spectrum,
    TlsSpectrum,
    Dressed,
    Populations,
    Peaks,
    Reflection,
    Fit,
    OracleCheck,
    Figure,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::Spectrum,
        Command::TlsSpectrum,
        Command::Dressed,
        Command::Populations,
        Command::Peaks,
        Command::Reflection,
        Command::Fit,
        Command::OracleCheck,
        Command::Figure,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::TlsSpectrum => "tls-spectrum",
            Command::Dressed => "dressed",
            Command::Populations => "populations",
            Command::Peaks => "peaks",
            Command::Reflection => "reflection",
            Command::Fit => "fit",
            Command::OracleCheck => "oracle-check",
            Command::Figure => "figure",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown command '{s}'")))
    }
}

/// How the drive strength is given.
#[derive(Debug, Clone, PartialEq)]
pub enum DriveSpec {
    /// `F / sqrt(κ_ex)` values.
    Normalized(Vec<f64>),
    /// At-chip powers in dBm.
    PowerDbm(Vec<f64>),
}

impl DriveSpec {
    pub fn len(&self) -> usize {
        match self {
            DriveSpec::Normalized(v) | DriveSpec::PowerDbm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        match self {
            DriveSpec::Normalized(v) | DriveSpec::PowerDbm(v) => v,
        }
    }
}

/// Complete description of one CLI run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub omega0_ghz: f64,
    pub kerr_mhz: f64,
    pub kappa_ex_mhz: f64,
    pub kappa_in_mhz: f64,
    pub gamma_p_mhz: f64,
    /// `(ω_d - Ω₀) / 2π`.
    pub drive_detuning_mhz: f64,
    pub drive: DriveSpec,
    /// Half width of the frequency grid around the drive.
    pub grid_span_mhz: f64,
    pub grid_points: usize,
    pub n_max: usize,
    pub n_fock: usize,
    pub i_max: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub rbw_hz: Option<f64>,
    pub data: Option<PathBuf>,
    pub strategy: Strategy,
    pub budget: usize,
    pub weighting: Weighting,
    pub exclusion_hz: Option<f64>,
    pub kappa_in_max_mhz: f64,
    pub gamma_p_max_mhz: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub initial_kappa_in_mhz: f64,
    pub initial_gamma_p_mhz: f64,
    pub initial_scale: f64,
    pub figure: String,
    /// Emit `|Γ|` at the drive frequency versus drive power.
    pub power_sweep: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Spectrum,
            omega0_ghz: 10.0,
            kerr_mhz: -20.0,
            kappa_ex_mhz: 0.5,
            kappa_in_mhz: 0.5,
            gamma_p_mhz: 0.1,
            drive_detuning_mhz: 0.0,
            drive: DriveSpec::Normalized(vec![5.0]),
            grid_span_mhz: 60.0,
            grid_points: 1001,
            n_max: 20,
            n_fock: 20,
            i_max: 3,
            seed: 0,
            out: PathBuf::from("."),
            rbw_hz: None,
            data: None,
            strategy: Strategy::Tpe,
            budget: 500,
            weighting: Weighting::Uniform,
            exclusion_hz: None,
            kappa_in_max_mhz: 0.07,
            gamma_p_max_mhz: 0.01,
            scale_min: 0.7,
            scale_max: 1.1,
            initial_kappa_in_mhz: 0.05,
            initial_gamma_p_mhz: 0.0025,
            initial_scale: 1.0,
            figure: "all".into(),
            power_sweep: false,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{v}': {e}")))?;
    if !x.is_finite() {
        return Err(Error::Config(format!("{key}: value must be finite")));
    }
    Ok(x)
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse '{v}': {e}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    let out = v
        .split(',')
        .map(|s| parse_f64(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(out)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Tpe => "tpe",
        Strategy::NelderMead => "nelder-mead",
    }
}

fn weighting_name(w: Weighting) -> &'static str {
    match w {
        Weighting::Uniform => "uniform",
        Weighting::Relative => "relative",
    }
}

/// Metadata keys written by result emitters that are not configuration.
const RESULT_KEYS: [&str; 5] = ["version", "model", "coherent_weight", "drive_frequency_hz", "f_over_sqrt_kex_value"];

impl RunConfig {
    /// Parses config text. Unknown keys, duplicates and conflicting drive
    /// specifications are errors.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_lines(text.lines().map(|l| l.trim()).filter(|l| !l.is_empty() && !l.starts_with('#')), false)
    }

    /// Recovers the configuration from the `#` header of an emitted CSV.
    pub fn from_metadata(csv: &str) -> Result<Self> {
        Self::parse_lines(
            csv.lines()
                .map(str::trim)
                .take_while(|l| l.starts_with('#'))
                .map(|l| l.trim_start_matches('#').trim()),
            true,
        )
    }

    fn parse_lines<'a>(lines: impl Iterator<Item = &'a str>, skip_results: bool) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut drive_keys = 0;
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got '{line}'")))?;
            let key = key.trim();
            let v = value.trim();
            if skip_results && RESULT_KEYS.contains(&key) {
                continue;
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
            match key {
                "command" => c.command = v.parse()?,
                "omega0_ghz" => c.omega0_ghz = parse_f64(key, v)?,
                "kerr_mhz" => c.kerr_mhz = parse_f64(key, v)?,
                "kappa_ex_mhz" => c.kappa_ex_mhz = parse_f64(key, v)?,
                "kappa_in_mhz" => c.kappa_in_mhz = parse_f64(key, v)?,
                "gamma_p_mhz" => c.gamma_p_mhz = parse_f64(key, v)?,
                "drive_detuning_mhz" => c.drive_detuning_mhz = parse_f64(key, v)?,
                "f_over_sqrt_kex" => {
                    drive_keys += 1;
                    c.drive = DriveSpec::Normalized(parse_list(key, v)?);
                }
                "drive_power_dbm" => {
                    drive_keys += 1;
                    c.drive = DriveSpec::PowerDbm(parse_list(key, v)?);
                }
                "grid_span_mhz" => c.grid_span_mhz = parse_f64(key, v)?,
                "grid_points" => c.grid_points = parse_usize(key, v)?,
                "n_max" => c.n_max = parse_usize(key, v)?,
                "n_fock" => c.n_fock = parse_usize(key, v)?,
                "i_max" => c.i_max = parse_usize(key, v)?,
                "seed" => {
                    c.seed = v
                        .parse()
                        .map_err(|e| Error::Config(format!("seed: cannot parse '{v}': {e}")))?
                }
                "out" => c.out = PathBuf::from(v),
                "rbw_hz" => c.rbw_hz = if v == "none" { None } else { Some(parse_f64(key, v)?) },
                "data" => c.data = if v == "none" { None } else { Some(PathBuf::from(v)) },
                "strategy" => {
                    c.strategy = match v {
                        "tpe" => Strategy::Tpe,
                        "nelder-mead" => Strategy::NelderMead,
                        _ => return Err(Error::Config(format!("unknown strategy '{v}'"))),
                    }
                }
                "budget" => c.budget = parse_usize(key, v)?,
                "weighting" => {
                    c.weighting = match v {
                        "uniform" => Weighting::Uniform,
                        "relative" => Weighting::Relative,
                        _ => return Err(Error::Config(format!("unknown weighting '{v}'"))),
                    }
                }
                "exclusion_hz" => c.exclusion_hz = if v == "none" { None } else { Some(parse_f64(key, v)?) },
                "kappa_in_max_mhz" => c.kappa_in_max_mhz = parse_f64(key, v)?,
                "gamma_p_max_mhz" => c.gamma_p_max_mhz = parse_f64(key, v)?,
                "scale_min" => c.scale_min = parse_f64(key, v)?,
                "scale_max" => c.scale_max = parse_f64(key, v)?,
                "initial_kappa_in_mhz" => c.initial_kappa_in_mhz = parse_f64(key, v)?,
                "initial_gamma_p_mhz" => c.initial_gamma_p_mhz = parse_f64(key, v)?,
                "initial_scale" => c.initial_scale = parse_f64(key, v)?,
                "figure" => c.figure = v.to_string(),
                "power_sweep" => {
                    c.power_sweep = v
                        .parse()
                        .map_err(|_| Error::Config(format!("power_sweep: expected true or false, got '{v}'")))?
                }
                _ => return Err(Error::Config(format!("unknown key '{key}'"))),
            }
        }
        if drive_keys > 1 {
            return Err(Error::Config(
                "f_over_sqrt_kex and drive_power_dbm are mutually exclusive".into(),
            ));
        }
        Ok(c)
    }

    /// `(key, value)` pairs; [`RunConfig::parse`] inverts them exactly.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |o: Option<f64>| o.map_or("none".to_string(), |x| x.to_string());
        let mut out = vec![
            ("command", self.command.to_string()),
            ("omega0_ghz", self.omega0_ghz.to_string()),
            ("kerr_mhz", self.kerr_mhz.to_string()),
            ("kappa_ex_mhz", self.kappa_ex_mhz.to_string()),
            ("kappa_in_mhz", self.kappa_in_mhz.to_string()),
            ("gamma_p_mhz", self.gamma_p_mhz.to_string()),
            ("drive_detuning_mhz", self.drive_detuning_mhz.to_string()),
        ];
        match &self.drive {
            DriveSpec::Normalized(v) => out.push(("f_over_sqrt_kex", join(v))),
            DriveSpec::PowerDbm(v) => out.push(("drive_power_dbm", join(v))),
        }
        out.extend([
            ("grid_span_mhz", self.grid_span_mhz.to_string()),
            ("grid_points", self.grid_points.to_string()),
            ("n_max", self.n_max.to_string()),
            ("n_fock", self.n_fock.to_string()),
            ("i_max", self.i_max.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("rbw_hz", opt(self.rbw_hz)),
            (
                "data",
                self.data.as_ref().map_or("none".to_string(), |p| p.display().to_string()),
            ),
            ("strategy", strategy_name(self.strategy).to_string()),
            ("budget", self.budget.to_string()),
            ("weighting", weighting_name(self.weighting).to_string()),
            ("exclusion_hz", opt(self.exclusion_hz)),
            ("kappa_in_max_mhz", self.kappa_in_max_mhz.to_string()),
            ("gamma_p_max_mhz", self.gamma_p_max_mhz.to_string()),
            ("scale_min", self.scale_min.to_string()),
            ("scale_max", self.scale_max.to_string()),
            ("initial_kappa_in_mhz", self.initial_kappa_in_mhz.to_string()),
            ("initial_gamma_p_mhz", self.initial_gamma_p_mhz.to_string()),
            ("initial_scale", self.initial_scale.to_string()),
            ("figure", self.figure.clone()),
            ("power_sweep", self.power_sweep.to_string()),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Checks values and that input files exist.
    pub fn validate(&self) -> Result<()> {
        self.params()?;
        if self.drive.is_empty() {
            return Err(Error::Config("no drive values given".into()));
        }
        if let DriveSpec::Normalized(v) = &self.drive {
            if v.iter().any(|x| *x < 0.0) {
                return Err(Error::Config("f_over_sqrt_kex must be non-negative".into()));
            }
        }
        if !(self.grid_span_mhz > 0.0) || self.grid_points < 2 {
            return Err(Error::Config("grid needs a positive span and at least 2 points".into()));
        }
        if self.n_max < 1 || self.n_fock < 1 {
            return Err(Error::Config("n_max and n_fock must be at least 1".into()));
        }
        if let Some(r) = self.rbw_hz {
            if !(r > 0.0) {
                return Err(Error::Config("rbw_hz must be positive".into()));
            }
        }
        if let Some(p) = &self.data {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        if self.command == Command::Fit {
            if self.data.is_none() {
                return Err(Error::Config("fit needs a data file".into()));
            }
            if self.drive.len() != 1 {
                return Err(Error::Config("fit needs exactly one drive value".into()));
            }
            self.fit_config(self.drive_fields()?[0])?.validate()?;
        }
        Ok(())
    }

    pub fn params(&self) -> Result<SystemParams> {
        SystemParams::new(
            ghz(self.omega0_ghz),
            mhz(self.kerr_mhz),
            mhz(self.kappa_ex_mhz),
            mhz(self.kappa_in_mhz),
            mhz(self.gamma_p_mhz),
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn drive_omega(&self) -> Result<f64> {
        Ok(self.params()?.omega0() + mhz(self.drive_detuning_mhz))
    }

    /// One drive per configured value, in order.
    pub fn drive_fields(&self) -> Result<Vec<DriveField>> {
        let p = self.params()?;
        let w = self.drive_omega()?;
        self.drive
            .values()
            .iter()
            .map(|&x| match self.drive {
                DriveSpec::Normalized(_) => DriveField::resonant_normalized(&p, x)?.with_omega(w),
                DriveSpec::PowerDbm(_) => DriveField::from_power_dbm(w, x),
            })
            .collect()
    }

    /// `F / sqrt(κ_ex)` for each drive.
    pub fn normalized_drives(&self) -> Result<Vec<f64>> {
        if let DriveSpec::Normalized(v) = &self.drive {
            return Ok(v.clone());
        }
        let sk = mhz(self.kappa_ex_mhz).sqrt();
        Ok(self.drive_fields()?.iter().map(|d| d.amplitude().norm() / sk).collect())
    }

    pub fn grid(&self) -> Result<FrequencyGrid> {
        FrequencyGrid::uniform(self.drive_omega()?, mhz(self.grid_span_mhz), self.grid_points)
    }

    pub fn fit_config(&self, drive: DriveField) -> Result<FitConfig> {
        let p = self.params()?;
        let mut f = FitConfig::new(p.omega0(), p.kerr(), p.kappa_ex(), drive);
        f.bounds = Bounds {
            kappa_in: Bound::new(0.0, mhz(self.kappa_in_max_mhz))?,
            gamma_p: Bound::new(0.0, mhz(self.gamma_p_max_mhz))?,
            scale: Bound::new(self.scale_min, self.scale_max)?,
        };
        f.initial = Candidate {
            kappa_in: mhz(self.initial_kappa_in_mhz),
            gamma_p: mhz(self.initial_gamma_p_mhz),
            scale: self.initial_scale,
        };
        f.budget = self.budget;
        f.seed = self.seed;
        f.strategy = self.strategy;
        f.weighting = self.weighting;
        f.exclusion_half_width_hz = self.exclusion_hz;
        f.n_max = self.n_max;
        Ok(f)
    }

    /// Copy restricted to a single drive value, used for per-file metadata.
    pub fn with_single_drive(&self, value: f64) -> Self {
        let mut c = self.clone();
        c.drive = match self.drive {
            DriveSpec::Normalized(_) => DriveSpec::Normalized(vec![value]),
            DriveSpec::PowerDbm(_) => DriveSpec::PowerDbm(vec![value]),
        };
        c
    }
}
