//! Dirichlet-box Fermi seas: per-cube ground-state Slater determinants, their
//! densities, kinetic sums, and interaction expectations.
//!
//! The Dirichlet Laplacian on a cube `[0,L]^d` has eigenvalues `|πk/L|²`,
//! `k ∈ N_{>=1}^d`, with eigenfunctions `∏_i sqrt(2/L) sin(πk_i x_i / L)`.
//! A Fermi sea occupies the `M_Q` lowest modes in each cube of a partition;
//! the associated Slater determinant is the recovery state whose density
//! tracks a step approximation of a target density.

use crate::densities::{Cube, CubePartition, GridDensity, GridSpec, StepDensity};
use crate::error::{Error, Result};
use crate::potentials::{grid_pair_energy, kernel_offset_table, RadialKernel};
use crate::densities;
use rayon::prelude::*;
use serde::Deserialize;
use std::f64::consts::PI;

/// One Dirichlet box mode: multi-index `k` (all components >= 1) on a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxMode {
    pub index: Vec<u32>,
    pub cube: Cube,
}

impl BoxMode {
    /// Integer `|k|²`; the eigenvalue is `π² |k|² / L²`.
    pub fn index_norm_sq(&self) -> u64 {
        self.index.iter().map(|&k| k as u64 * k as u64).sum()
    }

    pub fn eigenvalue(&self) -> f64 {
        PI * PI * self.index_norm_sq() as f64 / (self.cube.side * self.cube.side)
    }

    /// Closed-form eigenfunction value, zero outside the cube.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let l = self.cube.side;
        let mut out = 1.0;
        for (a, &k) in self.index.iter().enumerate() {
            let t = x[a] - self.cube.corner[a];
            if t <= 0.0 || t >= l {
                return 0.0;
            }
            out *= (2.0 / l).sqrt() * (PI * k as f64 * t / l).sin();
        }
        out
    }
}

/// Per-cube lists of occupied box modes defining a Slater determinant.
#[derive(Debug, Clone)]
pub struct FermiSea {
    partition: CubePartition,
    occupations: Vec<Vec<BoxMode>>,
    total_particles: usize,
}

impl FermiSea {
    pub fn new(partition: CubePartition, occupations: Vec<Vec<BoxMode>>) -> Result<Self> {
        if occupations.len() != partition.len() {
            return Err(Error::Invalid(format!(
                "{} occupation lists for {} cubes",
                occupations.len(),
                partition.len()
            )));
        }
        let mut total = 0usize;
        for (q, modes) in partition.cubes().iter().zip(&occupations) {
            total += modes.len();
            for m in modes {
                if m.cube != *q {
                    return Err(Error::Invalid("mode attached to the wrong cube".into()));
                }
                if m.index.len() != partition.dimension() {
                    return Err(Error::DimensionMismatch(m.index.len(), partition.dimension()));
                }
                if m.index.iter().any(|&k| k == 0) {
                    return Err(Error::Invalid("box mode indices start at 1".into()));
                }
            }
            let mut seen: Vec<&[u32]> = modes.iter().map(|m| m.index.as_slice()).collect();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Invalid("duplicate mode in a cube".into()));
            }
        }
        if total == 0 {
            return Err(Error::Invalid("a Fermi sea needs at least one particle".into()));
        }
        Ok(FermiSea { partition, occupations, total_particles: total })
    }

    pub fn partition(&self) -> &CubePartition {
        &self.partition
    }

    pub fn occupations(&self) -> &[Vec<BoxMode>] {
        &self.occupations
    }

    pub fn total_particles(&self) -> usize {
        self.total_particles
    }

    pub fn iter_modes(&self) -> impl Iterator<Item = &BoxMode> {
        self.occupations.iter().flatten()
    }

    /// Serialization per the external interface:
    /// `{cubes:[{corner, side, modes:[[k1,...,kd],...]}]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let cubes: Vec<serde_json::Value> = self
            .partition
            .cubes()
            .iter()
            .zip(&self.occupations)
            .map(|(q, modes)| {
                let idx: Vec<&Vec<u32>> = modes.iter().map(|m| &m.index).collect();
                serde_json::json!({ "corner": q.corner, "side": q.side, "modes": idx })
            })
            .collect();
        serde_json::json!({ "cubes": cubes })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct CubeRow {
            corner: Vec<f64>,
            side: f64,
            modes: Vec<Vec<u32>>,
        }
        #[derive(Deserialize)]
        struct Doc {
            cubes: Vec<CubeRow>,
        }
        let doc: Doc = serde_json::from_value(value.clone())
            .map_err(|e| Error::Invalid(format!("bad Fermi sea JSON: {e}")))?;
        let dim = doc
            .cubes
            .first()
            .map(|c| c.corner.len())
            .ok_or_else(|| Error::Invalid("empty Fermi sea".into()))?;
        let mut cubes = Vec::new();
        let mut occupations = Vec::new();
        for row in doc.cubes {
            let cube = Cube::new(row.corner, row.side)?;
            occupations.push(
                row.modes
                    .into_iter()
                    .map(|index| BoxMode { index, cube: cube.clone() })
                    .collect(),
            );
            cubes.push(cube);
        }
        FermiSea::new(CubePartition::new(dim, cubes)?, occupations)
    }
}

/// The scaling `h = N^{-1/d}`, `λ = 1/N` that balances kinetic, external and
/// interaction energies per particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRegime {
    pub n_particles: usize,
    pub h: f64,
    pub lambda: f64,
}

impl ScalingRegime {
    pub fn canonical(n_particles: usize, dimension: usize) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::Invalid("need at least one particle".into()));
        }
        let n = n_particles as f64;
        Ok(ScalingRegime {
            n_particles,
            h: n.powf(-1.0 / dimension as f64),
            lambda: 1.0 / n,
        })
    }

    pub fn new(n_particles: usize, h: f64, lambda: f64) -> Result<Self> {
        if !(h > 0.0) || lambda < 0.0 {
            return Err(Error::Invalid(format!(
                "need h > 0 and lambda >= 0, got ({h}, {lambda})"
            )));
        }
        Ok(ScalingRegime { n_particles, h, lambda })
    }
}

/// The `m` lowest Dirichlet modes of a cube, ordered by eigenvalue with
/// lexicographic tie-breaking on the multi-index.
///
/// Candidates are enumerated with every component below a ball-volume bound;
/// the bound doubles until the cheapest excluded mode provably exceeds the
/// selected ones.
pub fn box_spectrum(cube: &Cube, m: usize) -> Result<Vec<BoxMode>> {
    if m == 0 {
        return Err(Error::Invalid("box_spectrum needs m >= 1".into()));
    }
    let d = cube.dimension();
    let vd = crate::geom::unit_ball_volume(d);
    let mut cap = ((m as f64 * 2.0f64.powi(d as i32) / vd).powf(1.0 / d as f64)).ceil() as u64
        + d as u64;
    loop {
        let total = (cap as f64).powi(d as i32);
        if total > 5e8 {
            return Err(Error::SizeCap {
                got: m,
                cap: 100_000_000,
                context: "box spectrum candidate enumeration",
            });
        }
        let mut cands: Vec<(u64, Vec<u32>)> = Vec::with_capacity(total as usize);
        let mut index = vec![1u32; d];
        'enumerate: loop {
            let norm: u64 = index.iter().map(|&k| k as u64 * k as u64).sum();
            cands.push((norm, index.clone()));
            let mut a = d;
            loop {
                if a == 0 {
                    break 'enumerate;
                }
                a -= 1;
                index[a] += 1;
                if index[a] as u64 <= cap {
                    break;
                }
                index[a] = 1;
            }
        }
        if cands.len() < m {
            cap *= 2;
            continue;
        }
        cands.sort_unstable_by(|x, y| x.0.cmp(&y.0).then_with(|| x.1.cmp(&y.1)));
        // every mode outside the candidate box has |k|² >= (cap+1)² + (d-1)
        let outside_min = (cap + 1) * (cap + 1) + (d as u64 - 1);
        if cands[m - 1].0 >= outside_min {
            cap *= 2;
            continue;
        }
        return Ok(cands
            .into_iter()
            .take(m)
            .map(|(_, index)| BoxMode { index, cube: cube.clone() })
            .collect());
    }
}

/// `Σ_occupied |πk/L|²`, unscaled; the caller applies `h²` or `N^{-1-2/d}`.
/// The integer sums `Σ|k|²` are accumulated exactly per cube.
pub fn sea_kinetic(sea: &FermiSea) -> f64 {
    sea.partition()
        .cubes()
        .iter()
        .zip(sea.occupations())
        .map(|(q, modes)| {
            let ksq: u128 = modes.iter().map(|m| m.index_norm_sq() as u128).sum();
            PI * PI * ksq as f64 / (q.side * q.side)
        })
        .sum()
}

/// `Σ_{k<=m} k² = m(m+1)(2m+1)/6`, the d=1 closed form behind kinetic sums.
pub fn sum_of_squares(m: u64) -> u128 {
    let m = m as u128;
    m * (m + 1) * (2 * m + 1) / 6
}

/// Occupation density `ρ(x) = Σ_occupied |u_k(x)|²` sampled on a grid.
pub fn sea_density(sea: &FermiSea, spec: &GridSpec) -> Result<GridDensity> {
    if spec.dimension() != sea.partition().dimension() {
        return Err(Error::DimensionMismatch(
            spec.dimension(),
            sea.partition().dimension(),
        ));
    }
    let cubes = sea.partition().cubes();
    let values: Vec<f64> = (0..spec.len())
        .into_par_iter()
        .map(|flat| {
            let x = spec.node_of(&spec.multi_of(flat));
            for (q, modes) in cubes.iter().zip(sea.occupations()) {
                if q.contains(&x) {
                    return modes.iter().map(|m| m.eval(&x).powi(2)).sum();
                }
            }
            0.0
        })
        .collect();
    GridDensity::new(spec.clone(), values)
}

/// Integer particle counts `M_Q ∈ (N|Q|f̄_Q - 1, N|Q|f̄_Q + 1]` summing to `N`
/// exactly, by largest-remainder rounding with index tie-breaking.
pub fn allocate_particles(step: &StepDensity, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Invalid("cannot allocate zero particles".into()));
    }
    let mass = step.mass();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "allocate_particles expects unit mass, got {mass}"
        )));
    }
    let targets: Vec<f64> = step
        .partition()
        .cubes()
        .iter()
        .zip(step.levels())
        .map(|(q, &l)| n as f64 * l * q.volume())
        .collect();
    let mut counts: Vec<usize> = targets.iter().map(|&t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned > n {
        return Err(Error::Allocation(format!(
            "floor counts already exceed N ({assigned} > {n})"
        )));
    }
    let deficit = n - assigned;
    if deficit > counts.len() {
        return Err(Error::Allocation(format!(
            "cannot place {deficit} remainder particles into {} cubes",
            counts.len()
        )));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = targets[i] - targets[i].floor();
        let rj = targets[j] - targets[j].floor();
        rj.total_cmp(&ri).then(i.cmp(&j))
    });
    for &i in order.iter().take(deficit) {
        counts[i] += 1;
    }
    for (i, (&m, &t)) in counts.iter().zip(&targets).enumerate() {
        let m = m as f64;
        if !(m > t - 1.0 - 1e-9 && m <= t + 1.0 + 1e-9) {
            return Err(Error::Allocation(format!(
                "count {m} for cube {i} misses the window ({}, {}]",
                t - 1.0,
                t + 1.0
            )));
        }
    }
    Ok(counts)
}

/// Fermi sea realizing a step density: `M_Q` particles from
/// [`allocate_particles`], filled with the lowest box modes per cube. Cubes
/// allocated zero particles are dropped.
pub fn recovery_from_step(step: &StepDensity, n: usize) -> Result<FermiSea> {
    let counts = allocate_particles(step, n)?;
    let mut cubes = Vec::new();
    let mut occupations = Vec::new();
    for (q, &m) in step.partition().cubes().iter().zip(&counts) {
        if m == 0 {
            continue;
        }
        occupations.push(box_spectrum(q, m)?);
        cubes.push(q.clone());
    }
    FermiSea::new(
        CubePartition::new_unchecked(step.partition().dimension(), cubes),
        occupations,
    )
}

/// The recovery Slater state for a density `f` (unit mass) at refinement `k`:
/// step-approximate, allocate, and fill per-cube Fermi seas.
pub fn build_recovery(f: &GridDensity, n: usize, k: u32) -> Result<FermiSea> {
    let approx = densities::step_approximate(f, k)?;
    recovery_from_step(&approx.step, n)
}

/// Refinement ladder `M_k = round(m0 · growth^k)` for the diagonal argument.
#[derive(Debug, Clone, Copy)]
pub struct Ladder {
    pub m0: usize,
    pub growth: f64,
}

impl Default for Ladder {
    fn default() -> Self {
        Ladder { m0: 100, growth: 2.0 }
    }
}

impl Ladder {
    pub fn threshold(&self, k: u32) -> usize {
        (self.m0 as f64 * self.growth.powi(k as i32)).round() as usize
    }

    /// Largest `k` with `M_k <= n`, and 0 when even `M_0` exceeds `n`.
    pub fn level_for(&self, n: usize) -> u32 {
        if self.threshold(0) > n {
            return 0;
        }
        let mut k = 0u32;
        while self.threshold(k + 1) <= n {
            k += 1;
        }
        k
    }
}

#[derive(Debug, Clone)]
pub struct DiagonalEntry {
    pub n: usize,
    pub k: u32,
    pub sea: FermiSea,
}

/// The diagonal recovery sequence: for each `N` in the increasing list, pick
/// `k_N` from the ladder and build the recovery sea. `k_N` is nondecreasing.
pub fn diagonal_sequence(
    f: &GridDensity,
    n_list: &[usize],
    ladder: &Ladder,
) -> Result<Vec<DiagonalEntry>> {
    if n_list.is_empty() {
        return Err(Error::Invalid("empty N list".into()));
    }
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("N list must be strictly increasing".into()));
    }
    if !(ladder.growth > 1.0) || ladder.m0 == 0 {
        return Err(Error::Invalid("ladder needs m0 >= 1 and growth > 1".into()));
    }
    n_list
        .iter()
        .map(|&n| {
            let k = ladder.level_for(n);
            Ok(DiagonalEntry { n, k, sea: build_recovery(f, n, k)? })
        })
        .collect()
}

/// Hartree direct term of a Slater state: `(λ/2) ∬ ρ(x) ρ(y) w(x-y)`.
pub fn slater_direct_interaction(
    rho: &GridDensity,
    w: &RadialKernel,
    lambda: f64,
) -> Result<f64> {
    Ok(0.5 * lambda * grid_pair_energy(rho, rho, w)?)
}

const EXCHANGE_CAP: usize = 16;

/// Exchange term of the Hartree-Fock pair energy for real orbitals:
/// `-(λ/2) ∬ w(x-y) [Σ_i u_i(x) u_i(y)]² dx dy`, nonpositive for `w >= 0`,
/// by grid quadrature. Capped at 16 particles; this is a diagnostic, not part
/// of the recovery upper bound.
pub fn slater_exchange_interaction(
    sea: &FermiSea,
    spec: &GridSpec,
    w: &RadialKernel,
    lambda: f64,
) -> Result<f64> {
    let n = sea.total_particles();
    if n > EXCHANGE_CAP {
        return Err(Error::SizeCap { got: n, cap: EXCHANGE_CAP, context: "exchange term" });
    }
    if w.is_zero() {
        return Ok(0.0);
    }
    let orbitals = orbital_samples(sea, spec);
    let cells = spec.len();
    let d = spec.dimension();
    let exts = spec.extents.clone();
    let dims: Vec<i64> = exts.iter().map(|&m| m as i64).collect();
    let table_dims: Vec<usize> = exts.iter().map(|&m| 2 * m - 1).collect();
    let table = kernel_offset_table(spec, w);
    let vol2 = spec.cell_volume().powi(2);

    let total: f64 = (0..cells)
        .into_par_iter()
        .map(|i| {
            let ui: Vec<f64> = orbitals.iter().map(|o| o[i]).collect();
            if ui.iter().all(|&v| v == 0.0) {
                return 0.0;
            }
            let mut mi = vec![0usize; d];
            let mut rem = i;
            for a in (0..d).rev() {
                mi[a] = rem % exts[a];
                rem /= exts[a];
            }
            let mut acc = 0.0;
            let mut mj = vec![0usize; d];
            for j in 0..cells {
                let mut rem = j;
                for a in (0..d).rev() {
                    mj[a] = rem % exts[a];
                    rem /= exts[a];
                }
                let mut tidx = 0usize;
                for a in 0..d {
                    let o = mi[a] as i64 - mj[a] as i64 + (dims[a] - 1);
                    tidx = tidx * table_dims[a] + o as usize;
                }
                let wv = table[tidx];
                if wv == 0.0 {
                    continue;
                }
                let mut dm = 0.0;
                for (o, &uiv) in orbitals.iter().zip(&ui) {
                    dm += uiv * o[j];
                }
                acc += wv * dm * dm;
            }
            acc
        })
        .sum();
    Ok(-0.5 * lambda * total * vol2)
}

fn orbital_samples(sea: &FermiSea, spec: &GridSpec) -> Vec<Vec<f64>> {
    sea.iter_modes()
        .map(|mode| {
            let mut samples = vec![0.0; spec.len()];
            spec.for_each_node(|flat, x| {
                samples[flat] = mode.eval(x);
            });
            samples
        })
        .collect()
}

/// Gram matrix of all occupied orbitals by per-cube aligned quadrature with
/// `nodes_per_axis` midpoint nodes (raised internally above twice the largest
/// mode index, where the midpoint rule is alias-free). Cross-cube entries
/// vanish by disjoint supports.
pub fn gram_matrix(sea: &FermiSea, nodes_per_axis: usize) -> nalgebra::DMatrix<f64> {
    let n = sea.total_particles();
    let mut gram = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut base = 0usize;
    for (q, modes) in sea.partition().cubes().iter().zip(sea.occupations()) {
        let m = modes.len();
        if m == 0 {
            continue;
        }
        let kmax = modes
            .iter()
            .flat_map(|mode| mode.index.iter().copied())
            .max()
            .unwrap_or(1) as usize;
        let nodes = nodes_per_axis.max(2 * kmax + 2);
        let spec = GridSpec::cube(&q.corner, q.side, nodes).expect("valid cube grid");
        let samples: Vec<Vec<f64>> = modes
            .iter()
            .map(|mode| {
                let mut s = vec![0.0; spec.len()];
                spec.for_each_node(|flat, x| s[flat] = mode.eval(x));
                s
            })
            .collect();
        let vol = spec.cell_volume();
        for i in 0..m {
            for j in i..m {
                let dot: f64 = samples[i]
                    .iter()
                    .zip(&samples[j])
                    .map(|(&a, &b)| a * b)
                    .sum::<f64>()
                    * vol;
                gram[(base + i, base + j)] = dot;
                gram[(base + j, base + i)] = dot;
            }
        }
        base += m;
    }
    gram
}

/// Largest deviation of the orbital Gram matrix from the identity; the
/// quadrature realization of the Pauli bound for Slater states.
pub fn pauli_deviation(sea: &FermiSea, nodes_per_axis: usize) -> f64 {
    let gram = gram_matrix(sea, nodes_per_axis);
    let n = gram.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((gram[(i, j)] - target).abs());
        }
    }
    dev
}

/// `sea_kinetic - ∫ |∇√ρ|²` with the gradient by central differences on the
/// given grid; nonnegative up to discretization error.
pub fn hoffmann_ostenhof_gap(sea: &FermiSea, spec: &GridSpec) -> Result<f64> {
    let rho = sea_density(sea, spec)?;
    let sqrt_rho: Vec<f64> = rho.values().iter().map(|&v| v.sqrt()).collect();
    let grad_sq = gradient_square_integral(spec, &sqrt_rho);
    Ok(sea_kinetic(sea) - grad_sq)
}

/// Midpoint integral of `|∇s|²` with central differences (one-sided at the
/// grid edge, where box-state fields vanish anyway).
pub(crate) fn gradient_square_integral(spec: &GridSpec, s: &[f64]) -> f64 {
    let d = spec.dimension();
    let dx = spec.spacing;
    let vol = spec.cell_volume();
    let exts = &spec.extents;
    let mut total = 0.0;
    for flat in 0..spec.len() {
        let multi = spec.multi_of(flat);
        let mut g2 = 0.0;
        for a in 0..d {
            let mut lo = multi.clone();
            let mut hi = multi.clone();
            let (back, fwd, denom) = if multi[a] == 0 {
                hi[a] = multi[a] + 1;
                (flat, spec.flat_of(&hi), dx)
            } else if multi[a] == exts[a] - 1 {
                lo[a] = multi[a] - 1;
                (spec.flat_of(&lo), flat, dx)
            } else {
                lo[a] = multi[a] - 1;
                hi[a] = multi[a] + 1;
                (spec.flat_of(&lo), spec.flat_of(&hi), 2.0 * dx)
            };
            let gr = (s[fwd] - s[back]) / denom;
            g2 += gr * gr;
        }
        total += g2;
    }
    total * vol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{lp_distance_fn, step_approximate, Density};

    fn unit_cube(d: usize) -> Cube {
        Cube::new(vec![0.0; d], 1.0).unwrap()
    }

    fn single_cube_sea(d: usize, l: f64, m: usize) -> FermiSea {
        let cube = Cube::new(vec![0.0; d], l).unwrap();
        let modes = box_spectrum(&cube, m).unwrap();
        FermiSea::new(CubePartition::new(d, vec![cube]).unwrap(), vec![modes]).unwrap()
    }

    #[test]
    fn spectrum_d1_first_three() {
        let modes = box_spectrum(&unit_cube(1), 3).unwrap();
        let eig: Vec<f64> = modes.iter().map(|m| m.eigenvalue()).collect();
        assert!((eig[0] - PI * PI).abs() < 1e-12);
        assert!((eig[1] - 4.0 * PI * PI).abs() < 1e-12);
        assert!((eig[2] - 9.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn spectrum_d2_ties_lexicographic() {
        let modes = box_spectrum(&unit_cube(2), 3).unwrap();
        let idx: Vec<Vec<u32>> = modes.iter().map(|m| m.index.clone()).collect();
        assert_eq!(idx, vec![vec![1, 1], vec![1, 2], vec![2, 1]]);
        let eig: Vec<f64> = modes.iter().map(|m| m.eigenvalue()).collect();
        assert!((eig[0] - 2.0 * PI * PI).abs() < 1e-12);
        assert!((eig[1] - 5.0 * PI * PI).abs() < 1e-12);
        assert!((eig[2] - 5.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn spectrum_d3_ground_mode() {
        let modes = box_spectrum(&unit_cube(3), 1).unwrap();
        assert_eq!(modes[0].index, vec![1, 1, 1]);
        assert!((modes[0].eigenvalue() - 3.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn spectrum_is_genuinely_sorted_for_large_m() {
        // the candidate cap must not clip near-axis modes like (1, k_max)
        let modes = box_spectrum(&unit_cube(2), 500).unwrap();
        let norms: Vec<u64> = modes.iter().map(|m| m.index_norm_sq()).collect();
        assert!(norms.windows(2).all(|w| w[0] <= w[1]));
        // brute-force oracle over a generous box
        let mut all: Vec<u64> = Vec::new();
        for a in 1..=60u64 {
            for b in 1..=60u64 {
                all.push(a * a + b * b);
            }
        }
        all.sort_unstable();
        assert_eq!(norms[499], all[499]);
    }

    #[test]
    fn kinetic_small_cases() {
        assert!((sea_kinetic(&single_cube_sea(1, 1.0, 2)) - 5.0 * PI * PI).abs() < 1e-12);
        assert!((sea_kinetic(&single_cube_sea(1, 2.0, 1)) - PI * PI / 4.0).abs() < 1e-14);
    }

    #[test]
    fn kinetic_closed_form_m1000() {
        let m = 1000u64;
        let sea = single_cube_sea(1, 1.0, m as usize);
        let scaled = sea_kinetic(&sea) / (m as f64).powi(3);
        let exact = PI * PI * sum_of_squares(m) as f64 / (m as f64).powi(3);
        assert_eq!(scaled, exact);
        let kcl_1 = PI * PI / 3.0;
        assert!((scaled - kcl_1).abs() / kcl_1 < 5e-3);
    }

    #[test]
    fn density_single_mode_peak() {
        let sea = single_cube_sea(1, 1.0, 1);
        let spec = GridSpec::interval(0.0, 1.0, 1024).unwrap();
        let rho = sea_density(&sea, &spec).unwrap();
        let peak = rho.value_at(&[0.5]);
        assert!((peak - 2.0 * (PI / 2.0).sin().powi(2)).abs() < 1e-4);
    }

    #[test]
    fn density_mass_equals_particle_number() {
        let sea = single_cube_sea(1, 1.0, 7);
        let spec = GridSpec::interval(-0.5, 1.5, 4096).unwrap();
        let rho = sea_density(&sea, &spec).unwrap();
        assert!((rho.mass() - 7.0).abs() < 1e-10, "mass {}", rho.mass());
    }

    #[test]
    fn density_converges_to_uniform() {
        let m = 50;
        let sea = single_cube_sea(1, 1.0, m);
        let spec = GridSpec::interval(0.0, 1.0, 5000).unwrap();
        let rho = sea_density(&sea, &spec).unwrap();
        let scaled = rho.scaled(1.0 / m as f64).unwrap();
        let dist = lp_distance_fn(&scaled, |_| 1.0, 1.0);
        assert!(dist <= 0.06, "L1 distance {dist}");
    }

    #[test]
    fn allocate_even_split() {
        let part = CubePartition::new(
            1,
            vec![
                Cube::new(vec![0.0], 1.0).unwrap(),
                Cube::new(vec![1.0], 1.0).unwrap(),
            ],
        )
        .unwrap();
        let step = StepDensity::new(part, vec![0.5, 0.5]).unwrap();
        assert_eq!(allocate_particles(&step, 7).unwrap(), vec![4, 3]);
    }

    #[test]
    fn allocate_single_cube_exact() {
        let part = CubePartition::new(1, vec![Cube::new(vec![0.0], 1.0).unwrap()]).unwrap();
        let step = StepDensity::new(part, vec![1.0]).unwrap();
        assert_eq!(allocate_particles(&step, 10).unwrap(), vec![10]);
    }

    #[test]
    fn allocate_exact_proportions() {
        let part = CubePartition::new(
            1,
            vec![
                Cube::new(vec![0.0], 1.0).unwrap(),
                Cube::new(vec![1.0], 1.0).unwrap(),
                Cube::new(vec![2.0], 1.0).unwrap(),
            ],
        )
        .unwrap();
        let step = StepDensity::new(part, vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(allocate_particles(&step, 10).unwrap(), vec![2, 3, 5]);
    }

    #[test]
    fn allocate_windows_and_sum_random_steps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let cubes = rng.random_range(1..=8usize);
            let mut part = Vec::new();
            let mut levels: Vec<f64> = Vec::new();
            for i in 0..cubes {
                part.push(Cube::new(vec![2.0 * i as f64], 1.0).unwrap());
                levels.push(rng.random_range(0.01..1.0));
            }
            let total: f64 = levels.iter().sum();
            for l in &mut levels {
                *l /= total;
            }
            let step =
                StepDensity::new(CubePartition::new(1, part).unwrap(), levels.clone()).unwrap();
            let n = rng.random_range(1..=500usize);
            let counts = allocate_particles(&step, n).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), n, "trial {trial}");
            for (m, &l) in counts.iter().zip(&levels) {
                let t = n as f64 * l;
                assert!((*m as f64) > t - 1.0 - 1e-9 && (*m as f64) <= t + 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn recovery_single_cube() {
        let spec = GridSpec::interval(0.0, 1.0, 1024).unwrap();
        let f = GridDensity::sample(spec, |_| 1.0).unwrap();
        let sea = build_recovery(&f, 12, 1).unwrap();
        assert_eq!(sea.partition().len(), 1);
        assert_eq!(sea.total_particles(), 12);
    }

    #[test]
    fn recovery_two_equal_cubes_ground_modes() {
        let part = CubePartition::new(
            1,
            vec![
                Cube::new(vec![0.0], 1.0).unwrap(),
                Cube::new(vec![1.0], 1.0).unwrap(),
            ],
        )
        .unwrap();
        let step = StepDensity::new(part, vec![0.5, 0.5]).unwrap();
        let sea = recovery_from_step(&step, 2).unwrap();
        assert_eq!(sea.total_particles(), 2);
        assert!((sea_kinetic(&sea) - 2.0 * PI * PI).abs() < 1e-12);
    }

    #[test]
    fn recovery_gaussian_windows() {
        let spec = GridSpec::centered_1d(6.0, 4096).unwrap();
        let norm = 1.0 / (2.0 * PI).sqrt();
        let f = GridDensity::sample_normalized(spec, |x| norm * (-0.5 * x[0] * x[0]).exp(), 1.0)
            .unwrap();
        let n = 2000;
        let approx = step_approximate(&f, 8).unwrap();
        let counts = allocate_particles(&approx.step, n).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), n);
        let sea = recovery_from_step(&approx.step, n).unwrap();
        assert_eq!(sea.total_particles(), n);
    }

    #[test]
    fn ladder_levels() {
        let ladder = Ladder { m0: 100, growth: 2.0 };
        assert_eq!(ladder.level_for(250), 1);
        assert_eq!(ladder.level_for(50), 0);
        assert_eq!(ladder.level_for(100), 0);
        assert_eq!(ladder.level_for(400), 2);
    }

    #[test]
    fn diagonal_sequence_monotone_k() {
        let spec = GridSpec::interval(0.0, 1.0, 1024).unwrap();
        let f = GridDensity::sample(spec, |_| 1.0).unwrap();
        let ladder = Ladder { m0: 50, growth: 2.0 };
        let entries = diagonal_sequence(&f, &[60, 150, 400], &ladder).unwrap();
        let ks: Vec<u32> = entries.iter().map(|e| e.k).collect();
        assert!(ks.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(entries[0].k, 0);
    }

    #[test]
    fn direct_interaction_cases() {
        let spec = GridSpec::interval(0.0, 1.0, 512).unwrap();
        let rho = GridDensity::sample(spec, |_| 3.0).unwrap(); // mass 3
        assert_eq!(
            slater_direct_interaction(&rho, &RadialKernel::zero(), 1.0).unwrap(),
            0.0
        );
        // w = 1 over the support: (1/2) mass²
        let w = RadialKernel::ball(2.0, 1.0).unwrap();
        let v = slater_direct_interaction(&rho, &w, 1.0).unwrap();
        assert!((v - 4.5).abs() < 1e-10, "{v}");
        // rho = 1_{[0,1]}, w = 1_{[-1,1]}: (1/2) ∬ = 1/2
        let rho1 = rho.scaled(1.0 / 3.0).unwrap();
        let w1 = RadialKernel::ball(1.0, 1.0).unwrap();
        let v1 = slater_direct_interaction(&rho1, &w1, 1.0).unwrap();
        assert!((v1 - 0.5).abs() < 1e-10, "{v1}");
    }

    #[test]
    fn exchange_constant_kernel_identity() {
        // w = 1 over the support: direct + exchange = λ N(N-1)/2 and
        // exchange = -λN/2 by orthonormality
        let m = 4usize;
        let sea = single_cube_sea(1, 1.0, m);
        let spec = GridSpec::interval(0.0, 1.0, 512).unwrap();
        let w = RadialKernel::ball(2.0, 1.0).unwrap();
        let rho = sea_density(&sea, &spec).unwrap();
        let direct = slater_direct_interaction(&rho, &w, 1.0).unwrap();
        let exchange = slater_exchange_interaction(&sea, &spec, &w, 1.0).unwrap();
        assert!(exchange <= 0.0);
        assert!((exchange + m as f64 / 2.0).abs() < 1e-6, "exchange {exchange}");
        let pair = direct + exchange;
        let expect = m as f64 * (m as f64 - 1.0) / 2.0;
        assert!((pair - expect).abs() < 1e-6, "{pair} vs {expect}");
    }

    #[test]
    fn exchange_zero_kernel_and_cap() {
        let sea = single_cube_sea(1, 1.0, 2);
        let spec = GridSpec::interval(0.0, 1.0, 64).unwrap();
        assert_eq!(
            slater_exchange_interaction(&sea, &spec, &RadialKernel::zero(), 1.0).unwrap(),
            0.0
        );
        let big = single_cube_sea(1, 1.0, 17);
        assert!(matches!(
            slater_exchange_interaction(&big, &spec, &RadialKernel::ball(1.0, 1.0).unwrap(), 1.0),
            Err(Error::SizeCap { .. })
        ));
    }

    #[test]
    fn exchange_single_particle_cancels_direct() {
        // N = 1: no pairs, so exchange = -direct for any w >= 0
        let sea = single_cube_sea(1, 1.0, 1);
        let spec = GridSpec::interval(0.0, 1.0, 512).unwrap();
        let w = RadialKernel::ball(0.4, 1.3).unwrap();
        let rho = sea_density(&sea, &spec).unwrap();
        let direct = slater_direct_interaction(&rho, &w, 1.0).unwrap();
        let exchange = slater_exchange_interaction(&sea, &spec, &w, 1.0).unwrap();
        assert!((direct + exchange).abs() < 1e-8, "{direct} + {exchange}");
    }

    #[test]
    fn pauli_gram_identity() {
        let sea = single_cube_sea(1, 1.0, 20);
        assert!(pauli_deviation(&sea, 256) < 1e-8);
        let sea3 = single_cube_sea(3, 1.5, 5);
        assert!(pauli_deviation(&sea3, 32) < 1e-8);
    }

    #[test]
    fn hoffmann_ostenhof_single_mode_equality() {
        let sea = single_cube_sea(1, 1.0, 1);
        let spec = GridSpec::interval(0.0, 1.0, 4096).unwrap();
        let gap = hoffmann_ostenhof_gap(&sea, &spec).unwrap();
        let kinetic = sea_kinetic(&sea);
        assert!(gap.abs() < 1e-2 * kinetic, "gap {gap}");
        assert!(gap >= -1e-6 * kinetic);
    }

    #[test]
    fn hoffmann_ostenhof_two_modes_positive() {
        let sea = single_cube_sea(1, 1.0, 2);
        let spec = GridSpec::interval(0.0, 1.0, 4096).unwrap();
        let gap = hoffmann_ostenhof_gap(&sea, &spec).unwrap();
        assert!(gap > 0.0, "gap {gap}");
        // quadrature oracle on the closed-form two-mode density
        let rho =
            |x: f64| 2.0 * (PI * x).sin().powi(2) + 2.0 * (2.0 * PI * x).sin().powi(2);
        let n = 20000;
        let dx = 1.0 / n as f64;
        let mut grad_sq = 0.0;
        for i in 1..n - 1 {
            let xm = (i as f64 - 0.5) * dx;
            let xp = (i as f64 + 1.5) * dx;
            let g = (rho(xp).sqrt() - rho(xm).sqrt()) / (2.0 * dx);
            grad_sq += g * g * dx;
        }
        let oracle_gap = 5.0 * PI * PI - grad_sq;
        assert!((gap - oracle_gap).abs() < 0.05 * oracle_gap, "{gap} vs {oracle_gap}");
    }

    #[test]
    fn step_limit_kinetic_bound() {
        // N^{-3}·kinetic ≈ K_cl ∫ step³ <= K_cl ∫ f³ (d=1, Jensen on averages)
        let spec = GridSpec::centered_1d(5.0, 4096).unwrap();
        let norm = 1.0 / (2.0 * PI).sqrt();
        let f = GridDensity::sample_normalized(spec, |x| norm * (-0.5 * x[0] * x[0]).exp(), 1.0)
            .unwrap();
        let approx = step_approximate(&f, 6).unwrap();
        let n = 4000;
        let sea = recovery_from_step(&approx.step, n).unwrap();
        let kcl = PI * PI / 3.0;
        let per_particle = sea_kinetic(&sea) / (n as f64).powi(3);
        let step_kinetic = kcl * approx.step.power_integral(3.0);
        let f_kinetic = kcl * f.power_integral(3.0);
        assert!(step_kinetic <= f_kinetic + 1e-12);
        // finite-M excess per cube is (1+1/M)(2+1/M)/2; 5% is conservative here
        assert!(
            (per_particle - step_kinetic).abs() <= 0.05 * step_kinetic,
            "{per_particle} vs {step_kinetic}"
        );
    }

    #[test]
    fn sea_json_round_trip() {
        let sea = single_cube_sea(2, 1.25, 5);
        let json = sea.to_json();
        let back = FermiSea::from_json(&json).unwrap();
        assert_eq!(back.total_particles(), 5);
        assert!((sea_kinetic(&back) - sea_kinetic(&sea)).abs() < 1e-12);
    }
}
