//! Dressed states of the driven resonator in the frame rotating at the
//! drive frequency, and dressed-state populations rebuilt from moments.

use faer::{Mat, Side};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};
use crate::linalg::{adjoint, CMat};
use crate::model::{DriveField, SystemParams};
use crate::moments::MomentTable;

/// Top eigenvectors of a truncated Fock space that are never reported.
pub const EDGE_BUFFER: usize = 5;

/// Off-diagonal ratio above which population-based peak estimates are
/// marked unreliable.
pub const COHERENCE_RELIABILITY_RATIO: f64 = 0.1;

const ZERO: C64 = C64::new(0.0, 0.0);

/// Annihilation operator on Fock states `0..=n_fock`.
pub fn annihilation(n_fock: usize) -> CMat {
    let dim = n_fock + 1;
    Mat::from_fn(dim, dim, |i, j| {
        if j == i + 1 {
            C64::new((j as f64).sqrt(), 0.0)
        } else {
            ZERO
        }
    })
}

/// `(Ω₀ - ω_d) a†a + (K/2) a†a†aa + sqrt(κ_ex) (F a† + F* a)` on Fock
/// states `0..=n_fock`.
pub fn rotating_hamiltonian(params: &SystemParams, drive: &DriveField, n_fock: usize) -> CMat {
    let dim = n_fock + 1;
    let det = drive.detuning(params);
    let k = params.kerr();
    let g = params.kappa_ex().sqrt() * drive.amplitude();
    Mat::from_fn(dim, dim, |i, j| {
        if i == j {
            let n = i as f64;
            C64::new(det * n + 0.5 * k * n * (n - 1.0), 0.0)
        } else if i == j + 1 {
            g * (i as f64).sqrt()
        } else if j == i + 1 {
            g.conj() * (j as f64).sqrt()
        } else {
            ZERO
        }
    })
}

/// Eigenbasis of the rotating-frame Hamiltonian with dressed labels.
///
/// Column `i` of `unitary` is the dressed state `|ĩ>` in the Fock basis and
/// `energies[i]` its energy. Labels follow the bare ladder: `|0̃>` connects
/// to vacuum, and higher labels move away from it in the direction set by
/// the sign of K.
#[derive(Debug, Clone)]
pub struct DressedBasis {
    n_fock: usize,
    energies: Vec<f64>,
    unitary: CMat,
    /// `labels[i]` is the position of `|ĩ>` in the solver's ascending order.
    labels: Vec<usize>,
    drive_omega: f64,
}

impl DressedBasis {
    pub fn n_fock(&self) -> usize {
        self.n_fock
    }

    pub fn dim(&self) -> usize {
        self.n_fock + 1
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn unitary(&self) -> &CMat {
        &self.unitary
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn drive_omega(&self) -> f64 {
        self.drive_omega
    }

    /// Largest label outside the truncation-edge buffer.
    pub fn max_reportable(&self) -> usize {
        self.dim().saturating_sub(EDGE_BUFFER + 1)
    }

    /// Emission frequency of the transition `ĩ → j̃` in the lab frame.
    pub fn transition_omega(&self, i: usize, j: usize) -> f64 {
        self.drive_omega + self.energies[i] - self.energies[j]
    }

    /// `U† a U`, the annihilation operator in the dressed basis.
    pub fn dressed_annihilation(&self) -> CMat {
        let a = annihilation(self.n_fock);
        adjoint(&self.unitary) * (&a * &self.unitary)
    }

    /// `max |U†U - I|`.
    pub fn unitarity_error(&self) -> f64 {
        let p = adjoint(&self.unitary) * &self.unitary;
        let mut e: f64 = 0.0;
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                e = e.max((p[(i, j)] - C64::new(target, 0.0)).norm());
            }
        }
        e
    }

    fn relabeled(mut self, order: Vec<usize>) -> Self {
        let raw_e = self.energies.clone();
        let raw_u = self.unitary.clone();
        let dim = self.dim();
        self.energies = order.iter().map(|&k| raw_e[k]).collect();
        self.unitary = Mat::from_fn(dim, dim, |r, c| raw_u[(r, order[c])]);
        self.labels = order;
        self
    }
}

fn raw_eigenbasis(params: &SystemParams, drive: &DriveField, n_fock: usize) -> Result<DressedBasis> {
    if n_fock < 4 {
        return Err(Error::InvalidParameter(format!("Fock truncation {n_fock} is below 4")));
    }
    let h = rotating_hamiltonian(params, drive, n_fock);
    let evd = h
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let dim = n_fock + 1;
    let energies: Vec<f64> = (0..dim).map(|k| evd.S()[k].re).collect();
    let unitary: CMat = evd.U().to_owned();
    Ok(DressedBasis {
        n_fock,
        energies,
        unitary,
        labels: (0..dim).collect(),
        drive_omega: drive.omega_d(),
    })
}

/// Diagonalizes the rotating-frame Hamiltonian on Fock states
/// `0..=n_fock`.
///
/// The Hamiltonian is tridiagonal with non-vanishing off-diagonal entries
/// whenever F ≠ 0, so its levels never cross as F grows from zero. The
/// k-th lowest level therefore carries the label of the k-th lowest bare
/// Fock level. Bare levels degenerate at F = 0 (`|0>` and `|1>` on
/// resonance) are split in the direction of the Kerr shift. At F = 0 the
/// labels are the Fock states of maximal overlap.
pub fn dressed_basis(params: &SystemParams, drive: &DriveField, n_fock: usize) -> Result<DressedBasis> {
    let raw = raw_eigenbasis(params, drive, n_fock)?;
    let order = if drive.amplitude().norm() == 0.0 {
        fock_order(&raw)
    } else {
        adiabatic_order(params, drive, raw.dim())
    };
    Ok(raw.relabeled(order))
}

fn adiabatic_order(params: &SystemParams, drive: &DriveField, dim: usize) -> Vec<usize> {
    let det = drive.detuning(params);
    let k = params.kerr();
    let tie = if k < 0.0 { -1.0 } else { 1.0 };
    let bare = |n: usize| {
        let x = n as f64;
        det * x + 0.5 * k * x * (x - 1.0)
    };
    let mut fock: Vec<usize> = (0..dim).collect();
    fock.sort_by(|&a, &b| {
        bare(a)
            .total_cmp(&bare(b))
            .then((tie * a as f64).total_cmp(&(tie * b as f64)))
    });
    let mut order = vec![0; dim];
    for (rank, &n) in fock.iter().enumerate() {
        order[n] = rank;
    }
    order
}

/// Assigns each eigenvector to the Fock state it overlaps most.
fn fock_order(raw: &DressedBasis) -> Vec<usize> {
    let dim = raw.dim();
    let mut order = vec![usize::MAX; dim];
    let mut taken = vec![false; dim];
    for fock in 0..dim {
        let best = (0..dim)
            .filter(|&k| !taken[k])
            .max_by(|&a, &b| {
                raw.unitary[(fock, a)]
                    .norm_sqr()
                    .total_cmp(&raw.unitary[(fock, b)].norm_sqr())
            })
            .expect("free eigenvector");
        taken[best] = true;
        order[fock] = best;
    }
    order
}

/// Dressed bases along a sweep of drive amplitudes with labels carried
/// forward by maximal eigenvector overlap with the previous step. The first
/// entry is labeled by [`dressed_basis`].
pub fn dressed_sweep(params: &SystemParams, drives: &[DriveField], n_fock: usize) -> Result<Vec<DressedBasis>> {
    let mut out: Vec<DressedBasis> = Vec::with_capacity(drives.len());
    for d in drives {
        let next = match out.last() {
            None => dressed_basis(params, d, n_fock)?,
            Some(prev) => {
                let raw = raw_eigenbasis(params, d, n_fock)?;
                let dim = raw.dim();
                let overlap = adjoint(&prev.unitary) * &raw.unitary;
                let mut taken = vec![false; dim];
                let mut order = vec![0; dim];
                for (label, slot) in order.iter_mut().enumerate() {
                    let best = (0..dim)
                        .filter(|&k| !taken[k])
                        .max_by(|&a, &b| overlap[(label, a)].norm().total_cmp(&overlap[(label, b)].norm()))
                        .expect("free eigenvector");
                    taken[best] = true;
                    *slot = best;
                }
                raw.relabeled(order)
            }
        };
        out.push(next);
    }
    Ok(out)
}

/// One dressed transition `ĩ → j̃`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
    /// `E_ĩ - E_j̃` in rad/s (offset from the drive frequency).
    pub detuning: f64,
    /// `|<j̃|a|ĩ>|²`.
    pub matrix_element: f64,
}

/// All transitions among labels `0..=i_max`, including `i = j`.
pub fn transition_table(basis: &DressedBasis, i_max: usize) -> Result<Vec<Transition>> {
    if i_max > basis.max_reportable() {
        return Err(Error::InvalidParameter(format!(
            "dressed index {i_max} lies in the truncation buffer (largest allowed {})",
            basis.max_reportable()
        )));
    }
    let ad = basis.dressed_annihilation();
    let mut out = Vec::new();
    for i in 0..=i_max {
        for j in 0..=i_max {
            out.push(Transition {
                from: i,
                to: j,
                detuning: basis.energies[i] - basis.energies[j],
                matrix_element: ad[(j, i)].norm_sqr(),
            });
        }
    }
    Ok(out)
}

/// Density matrix in the dressed basis.
#[derive(Debug, Clone)]
pub struct DressedDensityMatrix {
    rho: CMat,
}

impl DressedDensityMatrix {
    pub fn rho(&self) -> &CMat {
        &self.rho
    }

    pub fn population(&self, i: usize) -> f64 {
        self.rho[(i, i)].re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.rho.nrows()).map(|i| self.rho[(i, i)].re).collect()
    }

    pub fn trace(&self) -> f64 {
        self.populations().iter().sum()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let n = self.rho.nrows();
        let mut e: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                e = e.max((self.rho[(i, j)] - self.rho[(j, i)].conj()).norm());
            }
        }
        e
    }
}

/// Fock-basis density matrix `<m|ρ|n>` on states `0..=n_fock` from
/// normally ordered moments, using
/// `|n><m| = Σ_k (-1)^k / (k! sqrt(m! n!)) a†^{n+k} a^{m+k}`.
pub fn fock_density_from_moments(moments: &MomentTable, n_fock: usize) -> Result<CMat> {
    let n_max = moments.n_max();
    if n_fock > n_max {
        return Err(Error::InvalidParameter(format!(
            "Fock truncation {n_fock} exceeds moment truncation {n_max}"
        )));
    }
    let dim = n_fock + 1;
    // ln k! up to n_max
    let mut lnfact = vec![0.0f64; n_max + 2];
    for k in 1..lnfact.len() {
        lnfact[k] = lnfact[k - 1] + (k as f64).ln();
    }
    Ok(Mat::from_fn(dim, dim, |m, n| {
        let mut acc = ZERO;
        let base = 0.5 * (lnfact[m] + lnfact[n]);
        let mut k = 0;
        while n + k <= n_max && m + k <= n_max {
            let w = (-(lnfact[k] + base)).exp();
            let term = moments.get(n + k, m + k) * w;
            acc += if k % 2 == 0 { term } else { -term };
            k += 1;
        }
        acc
    }))
}

/// `ρ̃ = U† ρ U` with `ρ` rebuilt from the moments.
pub fn dressed_density_matrix(moments: &MomentTable, basis: &DressedBasis) -> Result<DressedDensityMatrix> {
    let rho = fock_density_from_moments(moments, basis.n_fock())?;
    Ok(DressedDensityMatrix {
        rho: adjoint(&basis.unitary) * (&rho * &basis.unitary),
    })
}

/// Population-based fluorescence estimates for one drive point.
#[derive(Debug, Clone)]
pub struct PeakEstimates {
    /// `(ĩ, j̃, P_i |<j̃|a|ĩ>|²)` for `i ≠ j`.
    pub sidebands: Vec<(usize, usize, f64)>,
    /// `Σ_i P_i |<ĩ|a|ĩ>|² - |<a>|²`.
    pub center: f64,
    /// `|ρ̃_01|`.
    pub coherence_01: f64,
    /// Set when `|ρ̃_01|` exceeds 10% of `max(|ρ̃_00|, |ρ̃_11|)`.
    pub unreliable: bool,
}

pub fn peak_intensity_estimates(
    rho: &DressedDensityMatrix,
    basis: &DressedBasis,
    moments: &MomentTable,
    i_max: usize,
) -> Result<PeakEstimates> {
    let table = transition_table(basis, i_max)?;
    let p = rho.populations();
    let mut sidebands = Vec::new();
    let mut center = -moments.get(0, 1).norm_sqr();
    for t in &table {
        if t.from == t.to {
            center += p[t.from] * t.matrix_element;
        } else {
            sidebands.push((t.from, t.to, p[t.from] * t.matrix_element));
        }
    }
    let r = rho.rho();
    let coherence_01 = r[(0, 1)].norm();
    let reference = r[(0, 0)].norm().max(r[(1, 1)].norm());
    Ok(PeakEstimates {
        sidebands,
        center,
        coherence_01,
        unreliable: coherence_01 > COHERENCE_RELIABILITY_RATIO * reference,
    })
}

impl PeakEstimates {
    pub fn sideband(&self, from: usize, to: usize) -> Option<f64> {
        self.sidebands.iter().find(|s| s.0 == from && s.1 == to).map(|s| s.2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mhz, to_mhz};
    use crate::moments::solve_steady_moments;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kerr_regime(gamma: f64) -> SystemParams {
        SystemParams::from_mhz(10.0, -20.0, 0.5, 0.5, gamma).unwrap()
    }

    /// `tr(a†^p a^q ρ)` from the Fock matrix elements of `a†^p a^q`.
    fn forward_moments(rho: &CMat, n_max: usize) -> MomentTable {
        let dim = rho.nrows();
        let falling = |n: usize, k: usize| -> f64 { (0..k).map(|i| (n - i) as f64).product::<f64>() };
        let mut values = vec![ZERO; (n_max + 1) * (n_max + 1)];
        for p in 0..=n_max {
            for q in 0..=n_max {
                let mut acc = ZERO;
                for n in q..dim {
                    let m = n - q + p;
                    if m >= dim {
                        continue;
                    }
                    // <m| a†^p a^q |n>
                    let el = (falling(n, q) * falling(m, p)).sqrt();
                    acc += rho[(n, m)] * el;
                }
                values[p * (n_max + 1) + q] = acc;
            }
        }
        MomentTable::from_values(n_max, values).unwrap()
    }

    #[test]
    fn undriven_energies_are_kerr_ladder() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant(&p, 0.0).unwrap();
        let b = dressed_basis(&p, &d, 10).unwrap();
        for n in 0..=10 {
            let e = to_mhz(b.energies()[n]);
            assert!((e - (-10.0) * (n * n.saturating_sub(1)) as f64).abs() < 1e-9, "{n}: {e}");
            assert!((b.unitary()[(n, n)].norm() - 1.0).abs() < 1e-12);
        }
        let t = transition_table(&b, 4).unwrap();
        for tr in t {
            let expect = if tr.to + 1 == tr.from { tr.from as f64 } else { 0.0 };
            assert!((tr.matrix_element - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_resonator_levels_are_degenerate_in_rotating_frame() {
        let p = SystemParams::from_mhz(10.0, 0.0, 0.5, 0.5, 0.0).unwrap();
        let d = DriveField::resonant_normalized(&p, 0.0).unwrap();
        let b = dressed_basis(&p, &d, 8).unwrap();
        assert!(b.energies().iter().all(|e| e.abs() < 1e-9));
    }

    #[test]
    fn displaced_oscillator_diagonal_elements() {
        // K = 0, drive only: eigenstates are displaced Fock states with
        // <ĩ|a|ĩ> = -sqrt(κ_ex)F / (Ω₀ - ω_d)
        let p = SystemParams::from_mhz(10.0, 0.0, 0.5, 0.5, 0.0).unwrap();
        let det = mhz(-5.0);
        let d = DriveField::resonant_normalized(&p, 2.0)
            .unwrap()
            .with_omega(p.omega0() - det)
            .unwrap();
        let b = dressed_basis(&p, &d, 40).unwrap();
        let shift = p.kappa_ex().sqrt() * d.amplitude().norm() / det.abs();
        let t = transition_table(&b, 2).unwrap();
        for tr in t.iter().filter(|t| t.from == t.to) {
            assert!((tr.matrix_element - shift * shift).abs() < 1e-8, "{tr:?}");
        }
    }

    #[test]
    fn basis_is_unitary_and_diagonalizes() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 7.0).unwrap();
        let b = dressed_basis(&p, &d, 20).unwrap();
        assert!(b.unitarity_error() < 1e-10);
        let h = rotating_hamiltonian(&p, &d, 20);
        let hu = &h * b.unitary();
        let scale = crate::linalg::norm1(&h);
        for c in 0..b.dim() {
            for r in 0..b.dim() {
                let res = hu[(r, c)] - b.unitary()[(r, c)] * b.energies()[c];
                assert!(res.norm() <= 1e-9 * scale);
            }
        }
        let mut sorted = b.labels().to_vec();
        sorted.sort();
        assert_eq!(sorted, (0..b.dim()).collect::<Vec<_>>());
    }

    #[test]
    fn negative_kerr_orders_levels_downward() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 4.0).unwrap();
        let b = dressed_basis(&p, &d, 20).unwrap();
        assert!(b.energies().windows(2).all(|w| w[0] > w[1]));
        let pos = SystemParams::from_mhz(10.0, 20.0, 0.5, 0.5, 0.1).unwrap();
        let b2 = dressed_basis(&pos, &d, 20).unwrap();
        assert!(b2.energies().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn kerr_sign_mirrors_transitions() {
        let p = kerr_regime(0.1);
        let q = p.with_kerr(-p.kerr()).unwrap();
        let d = DriveField::resonant_normalized(&p, 5.0).unwrap();
        let a = transition_table(&dressed_basis(&p, &d, 20).unwrap(), 4).unwrap();
        let b = transition_table(&dressed_basis(&q, &d, 20).unwrap(), 4).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.detuning + y.detuning).abs() < 1e-6 * p.kerr().abs());
            assert!((x.matrix_element - y.matrix_element).abs() < 1e-9);
        }
    }

    #[test]
    fn sweep_labels_match_energy_labels() {
        let p = kerr_regime(0.1);
        let drives: Vec<DriveField> = (1..=40)
            .map(|k| DriveField::resonant_normalized(&p, 0.25 * k as f64).unwrap())
            .collect();
        let sweep = dressed_sweep(&p, &drives, 20).unwrap();
        for (d, s) in drives.iter().zip(&sweep) {
            let direct = dressed_basis(&p, d, 20).unwrap();
            for i in 0..=s.max_reportable() {
                assert!((s.energies()[i] - direct.energies()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn transition_buffer_enforced() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 1.0).unwrap();
        let b = dressed_basis(&p, &d, 10).unwrap();
        assert!(transition_table(&b, 5).is_ok());
        assert!(transition_table(&b, 6).is_err());
        assert!(dressed_basis(&p, &d, 3).is_err());
    }

    #[test]
    fn matrix_elements_follow_drive() {
        let p = kerr_regime(0.1);
        let elems = |x: f64| {
            let d = DriveField::resonant_normalized(&p, x).unwrap();
            let ad = dressed_basis(&p, &d, 20).unwrap().dressed_annihilation();
            (ad[(1, 0)].norm_sqr(), ad[(0, 1)].norm_sqr())
        };
        let (a2, b2) = elems(2.0);
        let (a8, b8) = elems(8.0);
        assert!(a8 < a2, "<1|a|0> should fall: {a2} -> {a8}");
        assert!(b8 > b2, "<0|a|1> should rise: {b2} -> {b8}");
    }

    #[test]
    fn vacuum_density_matrix() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant(&p, 0.0).unwrap();
        let t = solve_steady_moments(&p, &d, 20).unwrap();
        let b = dressed_basis(&p, &d, 20).unwrap();
        let r = dressed_density_matrix(&t, &b).unwrap();
        assert!((r.population(0) - 1.0).abs() < 1e-14);
        assert!((r.trace() - 1.0).abs() < 1e-14);
        let e = peak_intensity_estimates(&r, &b, &t, 4).unwrap();
        assert!(e.center.abs() < 1e-14);
        assert!(e.sidebands.iter().all(|s| s.2.abs() < 1e-14));
    }

    #[test]
    fn reconstruction_needs_enough_moments() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 1.0).unwrap();
        let t = solve_steady_moments(&p, &d, 8).unwrap();
        let b = dressed_basis(&p, &d, 10).unwrap();
        assert!(dressed_density_matrix(&t, &b).is_err());
    }

    #[test]
    fn roundtrip_random_dressed_states() {
        let p = kerr_regime(0.1);
        let d = DriveField::resonant_normalized(&p, 5.0).unwrap();
        let b = dressed_basis(&p, &d, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let k = rng.random_range(1..=6);
            let g = Mat::from_fn(k, k, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            let mut small = adjoint(&g) * &g;
            let tr: f64 = (0..k).map(|i| small[(i, i)].re).sum();
            small = Mat::from_fn(k, k, |i, j| small[(i, j)] / tr);
            let dim = b.dim();
            let rho_t = Mat::from_fn(dim, dim, |i, j| if i < k && j < k { small[(i, j)] } else { ZERO });
            let rho = b.unitary() * (&rho_t * adjoint(b.unitary()));
            let moments = forward_moments(&rho, 20);
            let back = dressed_density_matrix(&moments, &b).unwrap();
            for i in 0..dim {
                for j in 0..dim {
                    worst = worst.max((back.rho()[(i, j)] - rho_t[(i, j)]).norm());
                }
            }
        }
        assert!(worst <= 1e-10, "{worst}");
    }

    #[test]
    fn driven_populations_sum_to_one() {
        for g in [0.0, 0.1] {
            let p = kerr_regime(g);
            let d = DriveField::resonant_normalized(&p, 6.0).unwrap();
            let t = solve_steady_moments(&p, &d, 20).unwrap();
            let b = dressed_basis(&p, &d, 20).unwrap();
            let r = dressed_density_matrix(&t, &b).unwrap();
            assert!((r.trace() - 1.0).abs() < 1e-4);
            assert!(r.hermiticity_error() < 1e-9);
            assert!(r.populations().iter().all(|x| *x > -1e-9));
        }
    }
}
