//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{Command, DriveSpec, RunConfig};
use crate::dressed::{dressed_density_matrix, dressed_sweep, peak_intensity_estimates, transition_table};
use crate::error::{Error, Result};
use crate::fit::{fit_spectrum, overlay_csv, MeasuredSpectrum, Strategy, Weighting};
use crate::model::{mhz, power_from_amplitude, to_hz, to_mhz};
use crate::moments::solve_steady_moments;
use crate::oracle::{equivalence_suite, SuiteConfig};
use crate::reflection::{fit_linear_reflection, linear_reflection, reflection_power_sweep, ReflectionTrace};
use crate::spectrum::{compute_spectrum, convolve_resolution, SpectrumOptions, SpectrumSeries};
use crate::tls::tls_incoherent_spectrum;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "knr-spectra", version, about = "Resonance fluorescence of driven Kerr nonlinear resonators")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Incoherent spectrum and coherent weight from the moment hierarchy.
    Spectrum(Common),
    /// Closed-form two-level-system spectrum.
    TlsSpectrum(Common),
    /// Dressed energies, transition frequencies and matrix elements.
    Dressed(Common),
    /// Dressed-state populations.
    Populations(Common),
    /// Peak-intensity estimates from populations and matrix elements.
    Peaks(Common),
    /// Linear reflection trace, nonlinear power sweep, optional linear fit.
    Reflection(Common),
    /// Fit (κ_in, γ_p, A) to a measured spectrum.
    Fit(Common),
    /// Compare moments and spectra with the Lindblad reference.
    OracleCheck(Common),
    /// Regenerate the CSV bundle of one figure: fig2a, fig2b, fig2c,
    /// fig3a, fig3b, fig3c, fig4 or all.
    Figure {
        name: String,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nmax: Option<usize>,
    #[arg(long)]
    nfock: Option<usize>,
    #[arg(long)]
    imax: Option<usize>,
    /// Half width of the frequency grid around the drive.
    #[arg(long)]
    grid_span_mhz: Option<f64>,
    #[arg(long)]
    grid_points: Option<usize>,
    /// Comma-separated at-chip drive powers.
    #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true, conflicts_with = "f_over_sqrt_kex")]
    power_dbm: Option<Vec<f64>>,
    /// Comma-separated drive amplitudes F/sqrt(κ_ex).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    f_over_sqrt_kex: Option<Vec<f64>>,
    /// Resolution bandwidth of the analyzer.
    #[arg(long)]
    rbw_hz: Option<f64>,
    /// Input CSV (measured spectrum or reflection trace).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fit strategy: tpe or nelder-mead.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Residual weighting: uniform or relative.
    #[arg(long)]
    weighting: Option<String>,
    /// Also emit |Γ| at the drive frequency versus drive power.
    #[arg(long)]
    power_sweep: bool,
}

impl Common {
    fn resolve(&self, command: Command) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                // An output file carries its own configuration in the header.
                if text.trim_start().starts_with('#') {
                    RunConfig::from_metadata(&text)?
                } else {
                    RunConfig::parse(&text)?
                }
            }
            None => RunConfig::default(),
        };
        c.command = command;
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.nmax {
            c.n_max = v;
        }
        if let Some(v) = self.nfock {
            c.n_fock = v;
        }
        if let Some(v) = self.imax {
            c.i_max = v;
        }
        if let Some(v) = self.grid_span_mhz {
            c.grid_span_mhz = v;
        }
        if let Some(v) = self.grid_points {
            c.grid_points = v;
        }
        if let Some(v) = &self.power_dbm {
            c.drive = DriveSpec::PowerDbm(v.clone());
        }
        if let Some(v) = &self.f_over_sqrt_kex {
            c.drive = DriveSpec::Normalized(v.clone());
        }
        if let Some(v) = self.rbw_hz {
            c.rbw_hz = Some(v);
        }
        if let Some(v) = &self.data {
            c.data = Some(v.clone());
        }
        if let Some(v) = &self.strategy {
            c.strategy = match v.as_str() {
                "tpe" => Strategy::Tpe,
                "nelder-mead" => Strategy::NelderMead,
                _ => return Err(Error::Config(format!("unknown strategy '{v}'"))),
            };
        }
        if self.power_sweep {
            c.power_sweep = true;
        }
        if let Some(v) = self.budget {
            c.budget = v;
        }
        if let Some(v) = &self.weighting {
            c.weighting = match v.as_str() {
                "uniform" => Weighting::Uniform,
                "relative" => Weighting::Relative,
                _ => return Err(Error::Config(format!("unknown weighting '{v}'"))),
            };
        }
        Ok(c)
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error [config]: {e}");
            return e.exit_code();
        }
    };
    match execute(&cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", module_of(cfg.command, &e));
            e.exit_code()
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let c = match &cli.command {
        Sub::Spectrum(c) => c.resolve(Command::Spectrum)?,
        Sub::TlsSpectrum(c) => c.resolve(Command::TlsSpectrum)?,
        Sub::Dressed(c) => c.resolve(Command::Dressed)?,
        Sub::Populations(c) => c.resolve(Command::Populations)?,
        Sub::Peaks(c) => c.resolve(Command::Peaks)?,
        Sub::Reflection(c) => c.resolve(Command::Reflection)?,
        Sub::Fit(c) => c.resolve(Command::Fit)?,
        Sub::OracleCheck(c) => c.resolve(Command::OracleCheck)?,
        Sub::Figure { name, common } => {
            let mut c = common.resolve(Command::Figure)?;
            c.figure = name.clone();
            c
        }
    };
    c.validate()?;
    Ok(c)
}

fn module_of(command: Command, e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Csv(_) | Error::Io(_) => "io",
        Error::Fit(_) => "fit",
        _ => match command {
            Command::Spectrum => "spectrum",
            Command::TlsSpectrum => "tls",
            Command::Dressed | Command::Populations | Command::Peaks => "dressed",
            Command::Reflection => "reflection",
            Command::Fit => "fit",
            Command::OracleCheck => "oracle",
            Command::Figure => "figure",
        },
    }
}

/// Runs an already validated configuration.
pub fn execute(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    match cfg.command {
        Command::Spectrum => write_spectra(cfg, false, "spectrum"),
        Command::TlsSpectrum => write_spectra(cfg, true, "tls_spectrum"),
        Command::Dressed => write(&cfg.out.join("dressed.csv"), &dressed_csv(cfg)?),
        Command::Populations => write(&cfg.out.join("populations.csv"), &populations_csv(cfg, false)?),
        Command::Peaks => write(&cfg.out.join("peaks.csv"), &populations_csv(cfg, true)?),
        Command::Reflection => run_reflection(cfg),
        Command::Fit => run_fit(cfg),
        Command::OracleCheck => run_oracle(cfg),
        Command::Figure => run_figure(cfg),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    println!("{}", path.display());
    Ok(())
}

/// Metadata header lines for `cfg`.
pub fn header(cfg: &RunConfig) -> String {
    let mut out = format!("# version = {VERSION}\n");
    for (k, v) in cfg.to_pairs() {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    out
}

fn metadata(cfg: &RunConfig) -> Vec<(String, String)> {
    let mut m = vec![("version".to_string(), VERSION.to_string())];
    m.extend(cfg.to_pairs());
    m
}

fn one_spectrum(cfg: &RunConfig, index: usize, tls: bool) -> Result<SpectrumSeries> {
    let p = cfg.params()?;
    let drive = cfg.drive_fields()?[index];
    let grid = cfg.grid()?;
    let series = if tls {
        tls_incoherent_spectrum(&p, &drive, &grid)?
    } else {
        compute_spectrum(&p, &drive, &grid, cfg.n_max, &SpectrumOptions::default())?.series
    };
    match cfg.rbw_hz {
        Some(rbw) => convolve_resolution(&series, rbw),
        None => Ok(series),
    }
}

fn write_spectra(cfg: &RunConfig, tls: bool, stem: &str) -> Result<()> {
    let values = cfg.drive.values().to_vec();
    for (k, &v) in values.iter().enumerate() {
        let series = one_spectrum(cfg, k, tls)?;
        let single = cfg.with_single_drive(v);
        let mut meta = metadata(&single);
        if tls {
            meta.insert(1, ("model".to_string(), "tls".to_string()));
        }
        let name = if values.len() == 1 {
            format!("{stem}.csv")
        } else {
            format!("{stem}_{k}.csv")
        };
        write(&cfg.out.join(name), &series.to_csv(&meta))?;
    }
    Ok(())
}

/// Long-format spectra, one block per drive value.
fn spectrum_sweep_csv(cfg: &RunConfig, tls: bool) -> Result<String> {
    let xs = cfg.normalized_drives()?;
    let mut out = header(cfg);
    if tls {
        out.push_str("# model = tls\n");
    }
    out.push_str("f_over_sqrt_kex,frequency_hz,flux_density,coherent_weight\n");
    for (k, x) in xs.iter().enumerate() {
        let s = one_spectrum(cfg, k, tls)?;
        for (w, v) in s.grid().points().iter().zip(s.values()) {
            out.push_str(&format!("{x},{},{v},{}\n", to_hz(*w), s.coherent_weight()));
        }
    }
    Ok(out)
}

fn dressed_csv(cfg: &RunConfig) -> Result<String> {
    let p = cfg.params()?;
    let drives = cfg.drive_fields()?;
    let xs = cfg.normalized_drives()?;
    let bases = dressed_sweep(&p, &drives, cfg.n_fock)?;
    let mut out = header(cfg);
    out.push_str("f_over_sqrt_kex,quantity,value\n");
    for (x, basis) in xs.iter().zip(&bases) {
        for i in 0..=cfg.i_max.min(basis.max_reportable()) {
            out.push_str(&format!("{x},energy_{i}_mhz,{}\n", to_mhz(basis.energies()[i])));
        }
        for t in transition_table(basis, cfg.i_max)? {
            if t.from != t.to {
                out.push_str(&format!("{x},transition_{}_{}_mhz,{}\n", t.from, t.to, to_mhz(t.detuning)));
            }
            out.push_str(&format!("{x},element_{}_{},{}\n", t.from, t.to, t.matrix_element));
        }
    }
    Ok(out)
}

/// Populations, or peak-intensity estimates when `peaks` is set.
fn populations_csv(cfg: &RunConfig, peaks: bool) -> Result<String> {
    let p = cfg.params()?;
    let drives = cfg.drive_fields()?;
    let xs = cfg.normalized_drives()?;
    let bases = dressed_sweep(&p, &drives, cfg.n_fock)?;
    let mut out = header(cfg);
    out.push_str("f_over_sqrt_kex,quantity,value\n");
    for ((x, basis), drive) in xs.iter().zip(&bases).zip(&drives) {
        let moments = solve_steady_moments(&p, drive, cfg.n_max)?;
        let rho = dressed_density_matrix(&moments, basis)?;
        if peaks {
            let est = peak_intensity_estimates(&rho, basis, &moments, cfg.i_max)?;
            for (i, j, v) in &est.sidebands {
                out.push_str(&format!("{x},sideband_{i}_{j},{}\n", v + 0.0));
            }
            out.push_str(&format!("{x},center,{}\n", est.center));
            out.push_str(&format!("{x},coherence_01,{}\n", est.coherence_01));
            out.push_str(&format!("{x},unreliable,{}\n", est.unreliable as u8));
        } else {
            for i in 0..=cfg.i_max.min(basis.max_reportable()) {
                out.push_str(&format!("{x},population_{i},{}\n", rho.population(i)));
            }
            out.push_str(&format!("{x},population_sum,{}\n", rho.trace()));
            out.push_str(&format!("{x},coherence_01,{}\n", rho.rho()[(0, 1)].norm()));
        }
    }
    Ok(out)
}

fn run_reflection(cfg: &RunConfig) -> Result<()> {
    let p = cfg.params()?;
    let grid = cfg.grid()?;
    let gamma = grid
        .points()
        .iter()
        .map(|&w| linear_reflection(w, p.omega0(), p.kappa_ex(), p.kappa_in_star()))
        .collect();
    let trace = ReflectionTrace::new(grid.points().to_vec(), gamma)?;
    write(&cfg.out.join("reflection_linear.csv"), &format!("{}{}", header(cfg), trace.to_csv()))?;

    if cfg.power_sweep {
        power_sweep(cfg)?;
    }
    if let Some(path) = &cfg.data {
        let measured = ReflectionTrace::from_csv(&fs::read_to_string(path)?)?;
        let f = fit_linear_reflection(&measured)?;
        let mut rep = header(cfg);
        rep.push_str(&format!("omega0_ghz = {}\n", to_mhz(f.omega0) / 1e3));
        rep.push_str(&format!("kappa_ex_mhz = {}\n", to_mhz(f.kappa_ex)));
        rep.push_str(&format!("kappa_in_star_mhz = {}\n", to_mhz(f.kappa_in_star)));
        rep.push_str(&format!("sigma_omega0_mhz = {}\n", to_mhz(f.sigma[0])));
        rep.push_str(&format!("sigma_kappa_ex_mhz = {}\n", to_mhz(f.sigma[1])));
        rep.push_str(&format!("sigma_kappa_in_star_mhz = {}\n", to_mhz(f.sigma[2])));
        rep.push_str(&format!("rms_residual = {}\n", f.rms_residual));
        rep.push_str(&format!("iterations = {}\n", f.iterations));
        write(&cfg.out.join("reflection_fit.txt"), &rep)?;
    }
    Ok(())
}

fn power_sweep(cfg: &RunConfig) -> Result<()> {
    let p = cfg.params()?;
    let w = cfg.drive_omega()?;
    let powers: Vec<f64> = match &cfg.drive {
        DriveSpec::PowerDbm(v) => v.clone(),
        DriveSpec::Normalized(_) => cfg
            .drive_fields()?
            .iter()
            .map(|d| power_from_amplitude(d.amplitude(), w))
            .collect(),
    };
    let finite: Vec<f64> = powers.iter().copied().filter(|x| x.is_finite()).collect();
    let abs = reflection_power_sweep(&p, w, &finite, cfg.n_max)?;
    let mut sweep = header(cfg);
    sweep.push_str("power_dbm,abs_gamma\n");
    for (pw, g) in finite.iter().zip(&abs) {
        sweep.push_str(&format!("{pw},{g}\n"));
    }
    write(&cfg.out.join("reflection_sweep.csv"), &sweep)
}

fn run_fit(cfg: &RunConfig) -> Result<()> {
    let path = cfg.data.as_ref().ok_or_else(|| Error::Config("fit needs a data file".into()))?;
    let drive = cfg.drive_fields()?[0];
    let power = match &cfg.drive {
        DriveSpec::PowerDbm(v) => Some(v[0]),
        DriveSpec::Normalized(_) => None,
    };
    let data = MeasuredSpectrum::from_csv(&fs::read_to_string(path)?, power, cfg.rbw_hz)?;
    let fc = cfg.fit_config(drive)?;
    let result = fit_spectrum(&data, &fc)?;
    let report = format!("{}{}", header(cfg), result.report());
    print!("{}", result.report());
    write(&cfg.out.join("fit_report.txt"), &report)?;
    let overlay = overlay_csv(&data, &fc, result.best)?;
    write(&cfg.out.join("fit_overlay.csv"), &format!("{}{}", header(cfg), overlay))?;
    let mut history = header(cfg);
    history.push_str("trial,kappa_in_mhz,gamma_p_mhz,scale,objective\n");
    for (k, t) in result.history.iter().enumerate() {
        history.push_str(&format!(
            "{k},{},{},{},{}\n",
            to_mhz(t.candidate.kappa_in),
            to_mhz(t.candidate.gamma_p),
            t.candidate.scale,
            t.objective
        ));
    }
    write(&cfg.out.join("fit_history.csv"), &history)
}

fn run_oracle(cfg: &RunConfig) -> Result<()> {
    let suite = SuiteConfig {
        params: cfg.params()?,
        drive_ratios: cfg.normalized_drives()?,
        n_max: cfg.n_max,
        n_fock: cfg.n_fock,
        grid_half_span: mhz(cfg.grid_span_mhz),
        grid_points: cfg.grid_points,
        ..SuiteConfig::default()
    };
    if cfg.drive_detuning_mhz != 0.0 {
        return Err(Error::Config("oracle-check runs resonant drives only".into()));
    }
    let report = equivalence_suite(&suite)?;
    let mut text = header(cfg);
    for e in &report.entries {
        text.push_str(&format!(
            "f_over_sqrt_kex = {}: moment_deviation = {:.3e}, spectrum_deviation = {:.3e}, steady_residual = {:.3e}\n",
            e.f_over_sqrt_kex, e.moment_deviation, e.spectrum_deviation, e.steady_residual
        ));
    }
    text.push_str(&format!("max_moment_deviation = {:.3e}\n", report.max_moment_deviation()));
    text.push_str(&format!("max_spectrum_deviation = {:.3e}\n", report.max_spectrum_deviation()));
    text.push_str(&format!("passed = {}\n", report.passed()));
    print!("{}", text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect::<String>());
    write(&cfg.out.join("oracle_report.txt"), &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Residual {
            context: "oracle equivalence",
            residual: report.max_moment_deviation().max(report.max_spectrum_deviation()),
            tolerance: suite.moment_tolerance,
        })
    }
}

pub const FIGURES: [&str; 7] = ["fig2a", "fig2b", "fig2c", "fig3a", "fig3b", "fig3c", "fig4"];

fn sweep(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| lo + step * k as f64).collect()
}

/// Configuration of one figure panel on top of the user's numerical
/// settings (truncation, grid, output directory).
pub fn figure_config(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut c = RunConfig {
        command: Command::Figure,
        figure: name.to_string(),
        omega0_ghz: 10.0,
        kerr_mhz: -20.0,
        kappa_ex_mhz: 0.5,
        kappa_in_mhz: 0.5,
        gamma_p_mhz: 0.1,
        drive_detuning_mhz: 0.0,
        ..base.clone()
    };
    match name {
        "fig2a" | "fig2c" => c.drive = DriveSpec::Normalized(sweep(1.0, 10.0, 1.0)),
        "fig2b" => {
            c.kerr_mhz = -200.0;
            c.drive = DriveSpec::Normalized(sweep(1.0, 10.0, 1.0));
        }
        "fig3a" | "fig3c" | "fig4" => c.drive = DriveSpec::Normalized(sweep(0.0, 10.0, 0.25)),
        "fig3b" => {
            c.gamma_p_mhz = 0.0;
            c.drive = DriveSpec::Normalized(sweep(0.0, 10.0, 0.25));
        }
        _ => return Err(Error::Config(format!("unknown figure '{name}'; expected one of {FIGURES:?} or all"))),
    }
    Ok(c)
}

fn run_figure(cfg: &RunConfig) -> Result<()> {
    let names: Vec<&str> = if cfg.figure == "all" {
        FIGURES.to_vec()
    } else {
        vec![cfg.figure.as_str()]
    };
    for name in names {
        let c = figure_config(cfg, name)?;
        match name {
            "fig2a" => write(&cfg.out.join("fig2a.csv"), &spectrum_sweep_csv(&c, true)?)?,
            "fig2b" | "fig2c" | "fig3b" | "fig3c" => {
                write(&cfg.out.join(format!("{name}.csv")), &spectrum_sweep_csv(&c, false)?)?
            }
            "fig3a" => write(&cfg.out.join("fig3a.csv"), &dressed_csv(&c)?)?,
            "fig4" => {
                write(&cfg.out.join("fig4a.csv"), &dressed_csv(&c)?)?;
                for (gamma, pop, peak) in [(0.0, "fig4b.csv", "fig4d.csv"), (0.1, "fig4c.csv", "fig4e.csv")] {
                    let g = RunConfig {
                        gamma_p_mhz: gamma,
                        ..c.clone()
                    };
                    write(&cfg.out.join(pop), &populations_csv(&g, false)?)?;
                    write(&cfg.out.join(peak), &populations_csv(&g, true)?)?;
                }
            }
            _ => unreachable!("validated by figure_config"),
        }
    }
    Ok(())
}
