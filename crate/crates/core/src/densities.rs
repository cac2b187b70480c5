//! Densities on uniform grids and cube partitions: masses, L^p distances,
//! and the dyadic step-function approximation used by the recovery sequence.
//!
//! Grid quadrature is the midpoint rule throughout: a `GridDensity` stores
//! cell-center samples and every integral is `Σ value · spacing^d`. This is
//! positivity-preserving and exact on step functions aligned with the grid.

use crate::error::{Error, Result};
use crate::geom::unit_sphere_area;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Geometry of a uniform cell-centered grid: `extents[a]` cells along axis
/// `a`, cell centers at `origin[a] + (i + 1/2) spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub extents: Vec<usize>,
}

impl GridSpec {
    pub fn new(origin: Vec<f64>, spacing: f64, extents: Vec<usize>) -> Result<Self> {
        if origin.len() != extents.len() {
            return Err(Error::DimensionMismatch(origin.len(), extents.len()));
        }
        if origin.is_empty() {
            return Err(Error::Invalid("zero-dimensional grid".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Invalid(format!("spacing must be positive, got {spacing}")));
        }
        if extents.iter().any(|&n| n == 0) {
            return Err(Error::Invalid("empty grid axis".into()));
        }
        Ok(GridSpec { origin, spacing, extents })
    }

    /// Symmetric 1-d grid on `[-radius, radius]` with `n` cells.
    pub fn centered_1d(radius: f64, n: usize) -> Result<Self> {
        GridSpec::new(vec![-radius], 2.0 * radius / n as f64, vec![n])
    }

    /// 1-d grid on `[a, b]` with `n` cells.
    pub fn interval(a: f64, b: f64, n: usize) -> Result<Self> {
        if b <= a {
            return Err(Error::Invalid(format!("empty interval [{a}, {b}]")));
        }
        GridSpec::new(vec![a], (b - a) / n as f64, vec![n])
    }

    /// Cube grid `[corner, corner+side]^d` with `n` cells per axis.
    pub fn cube(corner: &[f64], side: f64, n: usize) -> Result<Self> {
        GridSpec::new(corner.to_vec(), side / n as f64, vec![n; corner.len()])
    }

    pub fn dimension(&self) -> usize {
        self.origin.len()
    }

    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dimension() as i32)
    }

    /// Coordinates of the cell center with the given multi-index.
    pub fn node_of(&self, multi: &[usize]) -> Vec<f64> {
        multi
            .iter()
            .zip(&self.origin)
            .map(|(&i, &o)| o + (i as f64 + 0.5) * self.spacing)
            .collect()
    }

    pub fn multi_of(&self, mut flat: usize) -> Vec<usize> {
        let d = self.dimension();
        let mut multi = vec![0usize; d];
        for a in (0..d).rev() {
            multi[a] = flat % self.extents[a];
            flat /= self.extents[a];
        }
        multi
    }

    pub fn flat_of(&self, multi: &[usize]) -> usize {
        let mut flat = 0usize;
        for (a, &i) in multi.iter().enumerate() {
            flat = flat * self.extents[a] + i;
        }
        flat
    }

    /// Cell containing `x`, or `None` outside the grid box.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut flat = 0usize;
        for a in 0..self.dimension() {
            let t = (x[a] - self.origin[a]) / self.spacing;
            if t < 0.0 {
                return None;
            }
            let i = t as usize;
            if i >= self.extents[a] {
                return None;
            }
            flat = flat * self.extents[a] + i;
        }
        Some(flat)
    }

    /// Lower and upper corners of the grid box.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let hi = self
            .origin
            .iter()
            .zip(&self.extents)
            .map(|(&o, &n)| o + n as f64 * self.spacing)
            .collect();
        (self.origin.clone(), hi)
    }

    /// Visit every cell as `(flat, center)` in flat order.
    pub fn for_each_node(&self, mut visit: impl FnMut(usize, &[f64])) {
        let d = self.dimension();
        let mut multi = vec![0usize; d];
        let mut x = self.node_of(&multi);
        let n = self.len();
        for flat in 0..n {
            visit(flat, &x);
            for a in (0..d).rev() {
                multi[a] += 1;
                if multi[a] < self.extents[a] {
                    x[a] = self.origin[a] + (multi[a] as f64 + 0.5) * self.spacing;
                    break;
                }
                multi[a] = 0;
                x[a] = self.origin[a] + 0.5 * self.spacing;
            }
        }
    }

    fn same_geometry(&self, other: &GridSpec) -> bool {
        let eps = 1e-12 * self.spacing;
        self.extents == other.extents
            && (self.spacing - other.spacing).abs() <= eps
            && self
                .origin
                .iter()
                .zip(&other.origin)
                .all(|(a, b)| (a - b).abs() <= eps)
    }
}

/// Pointwise evaluable density with a known support box.
pub trait Density {
    fn dimension(&self) -> usize;
    fn value_at(&self, x: &[f64]) -> f64;
    fn bounding_box(&self) -> (Vec<f64>, Vec<f64>);
    fn mass(&self) -> f64;
}

/// Nonnegative density sampled at the cell centers of a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    spec: GridSpec,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::Invalid(format!(
                "value count {} does not match grid size {}",
                values.len(),
                spec.len()
            )));
        }
        for &v in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!("density values must be finite and >= 0, got {v}")));
            }
        }
        Ok(GridDensity { spec, values })
    }

    /// Sample a function at the cell centers. Values in `[-1e-12, 0)` are
    /// clamped to zero; anything more negative is an error.
    pub fn sample(spec: GridSpec, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut values = vec![0.0; spec.len()];
        let mut bad: Option<f64> = None;
        spec.for_each_node(|flat, x| {
            let v = f(x);
            if v < 0.0 {
                if v < -1e-12 {
                    bad = Some(v);
                }
                values[flat] = 0.0;
            } else {
                values[flat] = v;
            }
        });
        if let Some(v) = bad {
            return Err(Error::Invalid(format!("negative density sample {v}")));
        }
        GridDensity::new(spec, values)
    }

    /// Sample and rescale so the midpoint-rule mass is exactly `mass`.
    pub fn sample_normalized(spec: GridSpec, f: impl Fn(&[f64]) -> f64, mass: f64) -> Result<Self> {
        let g = GridDensity::sample(spec, f)?;
        let m = g.mass();
        if m <= 0.0 {
            return Err(Error::Invalid("cannot normalize a zero-mass density".into()));
        }
        g.scaled(mass / m)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension()
    }

    pub fn spacing(&self) -> f64 {
        self.spec.spacing
    }

    /// Midpoint-rule mass `Σ f_i · spacing^d`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_volume()
    }

    /// Midpoint-rule integral of `f^p`.
    pub fn power_integral(&self, p: f64) -> f64 {
        let vol = self.spec.cell_volume();
        self.values.iter().map(|&v| v.powf(p)).sum::<f64>() * vol
    }

    /// Midpoint-rule integral of `f · g` for samples `g` on the same grid.
    pub fn weighted_integral(&self, g: &[f64]) -> Result<f64> {
        if g.len() != self.values.len() {
            return Err(Error::GridMismatch("weight sample count differs".into()));
        }
        let vol = self.spec.cell_volume();
        Ok(self.values.iter().zip(g).map(|(&a, &b)| a * b).sum::<f64>() * vol)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        GridDensity::new(
            self.spec.clone(),
            self.values.iter().map(|&v| v * c).collect(),
        )
    }

    /// Pointwise convex/linear combination on a shared grid.
    pub fn affine_combination(&self, other: &GridDensity, a: f64, b: f64) -> Result<Self> {
        if !self.spec.same_geometry(&other.spec) {
            return Err(Error::GridMismatch("affine combination needs a shared grid".into()));
        }
        GridDensity::new(
            self.spec.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        )
    }

    /// CSV with header `x1,...,xd,value`, one row per cell.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let d = self.dimension();
        let mut header: Vec<String> = (1..=d).map(|a| format!("x{a}")).collect();
        header.push("value".into());
        writeln!(out, "{}", header.join(","))?;
        let mut err = None;
        self.spec.for_each_node(|flat, x| {
            if err.is_some() {
                return;
            }
            let mut row: Vec<String> = x.iter().map(|c| format!("{c}")).collect();
            row.push(format!("{}", self.values[flat]));
            if let Err(e) = writeln!(out, "{}", row.join(",")) {
                err = Some(e);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Parse the CSV format written by [`GridDensity::write_csv`]. The rows
    /// must form a complete uniform grid (any row order).
    pub fn read_csv(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Invalid("empty density CSV".into()))?
            .map_err(|e| Error::io("<density csv>", e))?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 2 || cols.last() != Some(&"value") {
            return Err(Error::Invalid("density CSV header must be x1,...,xd,value".into()));
        }
        let d = cols.len() - 1;
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<density csv>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::Invalid(format!("bad CSV row: {line}")));
            }
            let mut x = Vec::with_capacity(d);
            for field in &fields[..d] {
                x.push(
                    field
                        .parse::<f64>()
                        .map_err(|_| Error::Invalid(format!("bad coordinate {field}")))?,
                );
            }
            let v = fields[d]
                .parse::<f64>()
                .map_err(|_| Error::Invalid(format!("bad value {}", fields[d])))?;
            rows.push((x, v));
        }
        if rows.is_empty() {
            return Err(Error::Invalid("density CSV has no rows".into()));
        }
        // recover per-axis sorted unique coordinates
        let mut axes: Vec<Vec<f64>> = vec![Vec::new(); d];
        for (x, _) in &rows {
            for a in 0..d {
                axes[a].push(x[a]);
            }
        }
        let mut spacing = f64::INFINITY;
        let mut lows = vec![0.0; d];
        let mut extents = vec![0usize; d];
        for a in 0..d {
            axes[a].sort_by(f64::total_cmp);
            axes[a].dedup_by(|p, q| (*p - *q).abs() < 1e-9 * (q.abs() + 1.0));
            extents[a] = axes[a].len();
            lows[a] = axes[a][0];
            if axes[a].len() > 1 {
                spacing = spacing.min(axes[a][1] - axes[a][0]);
            }
        }
        if !spacing.is_finite() {
            return Err(Error::Invalid("cannot infer grid spacing from one sample".into()));
        }
        let origin: Vec<f64> = lows.iter().map(|&c| c - 0.5 * spacing).collect();
        let spec = GridSpec::new(origin, spacing, extents)?;
        if spec.len() != rows.len() {
            return Err(Error::Invalid(format!(
                "CSV rows {} do not fill the {}-cell grid",
                rows.len(),
                spec.len()
            )));
        }
        let mut values = vec![f64::NAN; spec.len()];
        for (x, v) in rows {
            let flat = spec
                .locate(&x)
                .ok_or_else(|| Error::Invalid(format!("row {x:?} off the inferred grid")))?;
            values[flat] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Invalid("CSV does not cover every grid cell".into()));
        }
        GridDensity::new(spec, values)
    }
}

impl Density for GridDensity {
    fn dimension(&self) -> usize {
        self.spec.dimension()
    }

    fn value_at(&self, x: &[f64]) -> f64 {
        match self.spec.locate(x) {
            Some(flat) => self.values[flat],
            None => 0.0,
        }
    }

    fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        self.spec.bounding_box()
    }

    fn mass(&self) -> f64 {
        GridDensity::mass(self)
    }
}

/// Axis-aligned cube `[corner, corner + side]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub corner: Vec<f64>,
    pub side: f64,
}

impl Cube {
    pub fn new(corner: Vec<f64>, side: f64) -> Result<Self> {
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::Invalid(format!("cube side must be positive, got {side}")));
        }
        Ok(Cube { corner, side })
    }

    pub fn dimension(&self) -> usize {
        self.corner.len()
    }

    pub fn volume(&self) -> f64 {
        self.side.powi(self.dimension() as i32)
    }

    /// Half-open containment `[corner, corner + side)`, so points on shared
    /// faces belong to exactly one cube of a partition.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.corner
            .iter()
            .zip(x)
            .all(|(&c, &xi)| xi >= c && xi < c + self.side)
    }

    fn interior_overlaps(&self, other: &Cube) -> bool {
        self.corner.iter().zip(&other.corner).all(|(&a, &b)| {
            let hi_a = a + self.side;
            let hi_b = b + other.side;
            a.max(b) < hi_a.min(hi_b) - 1e-12 * self.side.max(other.side)
        })
    }
}

/// Finite family of axis-aligned cubes with pairwise disjoint interiors.
#[derive(Debug, Clone, PartialEq)]
pub struct CubePartition {
    dimension: usize,
    cubes: Vec<Cube>,
}

impl CubePartition {
    pub fn new(dimension: usize, cubes: Vec<Cube>) -> Result<Self> {
        for c in &cubes {
            if c.dimension() != dimension {
                return Err(Error::DimensionMismatch(dimension, c.dimension()));
            }
        }
        for i in 0..cubes.len() {
            for j in i + 1..cubes.len() {
                if cubes[i].interior_overlaps(&cubes[j]) {
                    return Err(Error::Invalid(format!("cubes {i} and {j} overlap")));
                }
            }
        }
        Ok(CubePartition { dimension, cubes })
    }

    /// Construction for cube families that are disjoint by construction
    /// (dyadic descendants of one root).
    pub(crate) fn new_unchecked(dimension: usize, cubes: Vec<Cube>) -> Self {
        CubePartition { dimension, cubes }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn cubes(&self) -> &[Cube] {
        &self.cubes
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }
}

/// Step function `Σ_Q 1_Q level_Q` on a cube partition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDensity {
    partition: CubePartition,
    levels: Vec<f64>,
}

impl StepDensity {
    pub fn new(partition: CubePartition, levels: Vec<f64>) -> Result<Self> {
        if levels.len() != partition.len() {
            return Err(Error::Invalid(format!(
                "{} levels for {} cubes",
                levels.len(),
                partition.len()
            )));
        }
        for &l in &levels {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::Invalid(format!("levels must be finite and >= 0, got {l}")));
            }
        }
        Ok(StepDensity { partition, levels })
    }

    pub fn partition(&self) -> &CubePartition {
        &self.partition
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Exact mass `Σ level_Q · |Q|`.
    pub fn mass(&self) -> f64 {
        self.partition
            .cubes()
            .iter()
            .zip(&self.levels)
            .map(|(q, &l)| l * q.volume())
            .sum()
    }

    /// Exact integral of `f^p` over the partition.
    pub fn power_integral(&self, p: f64) -> f64 {
        self.partition
            .cubes()
            .iter()
            .zip(&self.levels)
            .map(|(q, &l)| l.powf(p) * q.volume())
            .sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cubes: Vec<serde_json::Value> = self
            .partition
            .cubes()
            .iter()
            .zip(&self.levels)
            .map(|(q, &l)| {
                serde_json::json!({ "corner": q.corner, "side": q.side, "level": l })
            })
            .collect();
        serde_json::json!({ "dimension": self.partition.dimension(), "cubes": cubes })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct CubeRow {
            corner: Vec<f64>,
            side: f64,
            level: f64,
        }
        #[derive(Deserialize)]
        struct Doc {
            dimension: usize,
            cubes: Vec<CubeRow>,
        }
        let doc: Doc = serde_json::from_value(value.clone())
            .map_err(|e| Error::Invalid(format!("bad step density JSON: {e}")))?;
        let mut cubes = Vec::with_capacity(doc.cubes.len());
        let mut levels = Vec::with_capacity(doc.cubes.len());
        for row in doc.cubes {
            cubes.push(Cube::new(row.corner, row.side)?);
            levels.push(row.level);
        }
        StepDensity::new(CubePartition::new(doc.dimension, cubes)?, levels)
    }
}

impl Density for StepDensity {
    fn dimension(&self) -> usize {
        self.partition.dimension()
    }

    fn value_at(&self, x: &[f64]) -> f64 {
        for (q, &l) in self.partition.cubes().iter().zip(&self.levels) {
            if q.contains(x) {
                return l;
            }
        }
        0.0
    }

    fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.partition.dimension();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for q in self.partition.cubes() {
            for a in 0..d {
                lo[a] = lo[a].min(q.corner[a]);
                hi[a] = hi[a].max(q.corner[a] + q.side);
            }
        }
        (lo, hi)
    }

    fn mass(&self) -> f64 {
        StepDensity::mass(self)
    }
}

/// Midpoint-rule `L^p` distance of two densities on the same grid.
pub fn lp_distance(f: &GridDensity, g: &GridDensity, p: f64) -> Result<f64> {
    if f.dimension() != g.dimension() {
        return Err(Error::DimensionMismatch(f.dimension(), g.dimension()));
    }
    if !(p >= 1.0) {
        return Err(Error::Invalid(format!("p must be >= 1, got {p}")));
    }
    if !f.spec.same_geometry(&g.spec) {
        return Err(Error::GridMismatch(
            "lp_distance needs a shared grid; resample first".into(),
        ));
    }
    let vol = f.spec.cell_volume();
    let sum: f64 = f
        .values
        .iter()
        .zip(&g.values)
        .map(|(&a, &b)| (a - b).abs().powf(p))
        .sum();
    Ok((sum * vol).powf(1.0 / p))
}

/// `L^p` distance between a grid density and anything evaluable, measured on
/// the grid of `f` (both supports must sit inside that box).
pub fn lp_distance_fn(f: &GridDensity, g: impl Fn(&[f64]) -> f64, p: f64) -> f64 {
    let mut sum = 0.0;
    f.spec.for_each_node(|flat, x| {
        sum += (f.values[flat] - g(x)).abs().powf(p);
    });
    (sum * f.spec.cell_volume()).powf(1.0 / p)
}

/// Resample any density onto a grid by cell-center evaluation.
pub fn resample(g: &dyn Density, spec: &GridSpec) -> Result<GridDensity> {
    if g.dimension() != spec.dimension() {
        return Err(Error::DimensionMismatch(g.dimension(), spec.dimension()));
    }
    GridDensity::sample(spec.clone(), |x| g.value_at(x))
}

/// Result of [`step_approximate`]: the step density together with the grid
/// measure of the combined `L^1 + L^{1+2/d}` approximation error.
#[derive(Debug, Clone)]
pub struct StepApproximation {
    pub step: StepDensity,
    pub error: f64,
    pub l1_error: f64,
    pub lp_error: f64,
    pub rounds: usize,
}

/// Approximate `f` by cube averages on a dyadically refined partition of its
/// support box, refining until `‖f-s‖_1 + ‖f-s‖_{1+2/d} ≤ 1/k`. `k = 0`
/// returns the coarsest (single root cube) projection.
///
/// The refinement path is independent of `k`: each round splits every cube
/// whose local error share in either norm is above half the mean share, and
/// the best partition seen so far is returned once it meets the tolerance.
/// Cubes with zero average are dropped from the result.
pub fn step_approximate(f: &GridDensity, k: u32) -> Result<StepApproximation> {
    let d = f.dimension();
    let p = 1.0 + 2.0 / d as f64;
    let tol = if k == 0 { f64::INFINITY } else { 1.0 / k as f64 };

    // trim to the positive-support box, in cell indices
    let mut lo = vec![usize::MAX; d];
    let mut hi = vec![0usize; d];
    let mut any = false;
    for (flat, &v) in f.values.iter().enumerate() {
        if v > 0.0 {
            any = true;
            let multi = f.spec.multi_of(flat);
            for a in 0..d {
                lo[a] = lo[a].min(multi[a]);
                hi[a] = hi[a].max(multi[a]);
            }
        }
    }
    if !any {
        return Ok(StepApproximation {
            step: StepDensity::new(CubePartition::new_unchecked(d, Vec::new()), Vec::new())?,
            error: 0.0,
            l1_error: 0.0,
            lp_error: 0.0,
            rounds: 0,
        });
    }
    let max_extent = (0..d).map(|a| hi[a] - lo[a] + 1).max().unwrap();
    let root_size = max_extent.next_power_of_two();

    let ctx = StepCtx {
        grid: &f.spec,
        values: &f.values,
        support_lo: lo.clone(),
        p,
    };
    let mut cubes = vec![ctx.make_cube(vec![0i64; d], root_size)];
    let mut best: Option<(f64, Vec<RCube>)> = None;
    let mut rounds = 0usize;

    loop {
        let a_sum: f64 = cubes.iter().map(|c| c.err1).sum();
        let b_sum: f64 = cubes.iter().map(|c| c.errp).sum();
        let total = a_sum + b_sum.powf(1.0 / p);
        if best.as_ref().map_or(true, |(e, _)| total < *e) {
            best = Some((total, cubes.clone()));
        }
        let best_err = best.as_ref().unwrap().0;
        if best_err <= tol {
            break;
        }
        let n = cubes.len() as f64;
        let cut1 = 0.5 * a_sum / n;
        let cutp = 0.5 * b_sum / n;
        let mut next: Vec<RCube> = Vec::with_capacity(cubes.len() * 2);
        let mut split_any = false;
        for c in &cubes {
            let should_split = c.size > 1 && (c.err1 > cut1 || c.errp > cutp);
            if should_split {
                split_any = true;
                ctx.split_into(c, &mut next);
            } else {
                next.push(c.clone());
            }
        }
        if !split_any {
            // every remaining cube is a single cell, so the error is zero;
            // reaching this with best_err > tol means the tolerance is
            // unattainable on this grid
            return Err(Error::ToleranceNotMet {
                achieved: best_err,
                requested: tol,
            });
        }
        cubes = next;
        rounds += 1;
        if cubes.len() > (1 << 22) {
            return Err(Error::ToleranceNotMet {
                achieved: best.as_ref().unwrap().0,
                requested: tol,
            });
        }
    }

    let (error, chosen) = best.unwrap();
    let l1_error: f64 = chosen.iter().map(|c| c.err1).sum();
    let lp_error: f64 = chosen.iter().map(|c| c.errp).sum::<f64>().powf(1.0 / p);
    let mut out_cubes = Vec::new();
    let mut levels = Vec::new();
    for c in &chosen {
        if c.avg > 0.0 {
            let corner: Vec<f64> = (0..d)
                .map(|a| {
                    f.spec.origin[a]
                        + (ctx.support_lo[a] as i64 + c.offset[a]) as f64 * f.spec.spacing
                })
                .collect();
            out_cubes.push(Cube::new(corner, c.size as f64 * f.spec.spacing)?);
            levels.push(c.avg);
        }
    }
    Ok(StepApproximation {
        step: StepDensity::new(CubePartition::new_unchecked(d, out_cubes), levels)?,
        error,
        l1_error,
        lp_error,
        rounds,
    })
}

/// Dyadic cube in cell units relative to the support corner, with its
/// average level and local L^1 / L^p error contributions.
#[derive(Debug, Clone)]
struct RCube {
    offset: Vec<i64>,
    size: usize,
    avg: f64,
    err1: f64,
    errp: f64,
}

struct StepCtx<'a> {
    grid: &'a GridSpec,
    values: &'a [f64],
    support_lo: Vec<usize>,
    p: f64,
}

impl StepCtx<'_> {
    fn make_cube(&self, offset: Vec<i64>, size: usize) -> RCube {
        let d = self.grid.dimension();
        // in-grid index range along each axis
        let mut lo = vec![0usize; d];
        let mut hi = vec![0usize; d]; // exclusive
        let mut cells_in: f64 = 1.0;
        for a in 0..d {
            let start = self.support_lo[a] as i64 + offset[a];
            let end = start + size as i64;
            let s = start.clamp(0, self.grid.extents[a] as i64) as usize;
            let e = end.clamp(0, self.grid.extents[a] as i64) as usize;
            lo[a] = s;
            hi[a] = e.max(s);
            cells_in *= (hi[a] - lo[a]) as f64;
        }
        let total_cells = (size as f64).powi(d as i32);
        let vol_cell = self.grid.cell_volume();

        let mut sum = 0.0;
        self.for_each_cell(&lo, &hi, |flat| sum += self.values[flat]);
        let avg = sum / total_cells;

        let mut err1 = 0.0;
        let mut errp = 0.0;
        if cells_in > 0.0 {
            self.for_each_cell(&lo, &hi, |flat| {
                let dev = (self.values[flat] - avg).abs();
                err1 += dev;
                errp += dev.powf(self.p);
            });
        }
        // cells of the cube outside the grid carry the value 0
        let ghost = total_cells - cells_in;
        err1 += ghost * avg;
        errp += ghost * avg.powf(self.p);
        RCube {
            offset,
            size,
            avg,
            err1: err1 * vol_cell,
            errp: errp * vol_cell,
        }
    }

    fn split_into(&self, c: &RCube, out: &mut Vec<RCube>) {
        let d = self.grid.dimension();
        let half = c.size / 2;
        let children = 1usize << d;
        for mask in 0..children {
            let mut offset = c.offset.clone();
            for (a, item) in offset.iter_mut().enumerate() {
                if mask & (1 << a) != 0 {
                    *item += half as i64;
                }
            }
            out.push(self.make_cube(offset, half));
        }
    }

    fn for_each_cell(&self, lo: &[usize], hi: &[usize], mut visit: impl FnMut(usize)) {
        let d = self.grid.dimension();
        if (0..d).any(|a| lo[a] >= hi[a]) {
            return;
        }
        let mut multi = lo.to_vec();
        loop {
            visit(self.grid.flat_of(&multi));
            let mut a = d;
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                multi[a] += 1;
                if multi[a] < hi[a] {
                    break;
                }
                multi[a] = lo[a];
            }
        }
    }
}

/// Radial profile of a spherically symmetric density, with explicit
/// quadrature nodes and `dr` weights (uniform or logarithmic grids).
#[derive(Debug, Clone)]
pub struct RadialDensity {
    dimension: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    values: Vec<f64>,
}

impl RadialDensity {
    pub fn new(dimension: usize, nodes: Vec<f64>, weights: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if nodes.len() != weights.len() || nodes.len() != values.len() {
            return Err(Error::Invalid("radial arrays must share a length".into()));
        }
        if nodes.is_empty() {
            return Err(Error::Invalid("empty radial grid".into()));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) || nodes[0] <= 0.0 {
            return Err(Error::Invalid("radial nodes must be positive and increasing".into()));
        }
        if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Invalid("radial values must be finite and >= 0".into()));
        }
        Ok(RadialDensity { dimension, nodes, weights, values })
    }

    /// Uniform midpoint grid on `(0, r_max]`.
    pub fn sample_uniform(
        dimension: usize,
        r_max: f64,
        n: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let dr = r_max / n as f64;
        let nodes: Vec<f64> = (0..n).map(|j| (j as f64 + 0.5) * dr).collect();
        let values = nodes.iter().map(|&r| f(r).max(0.0)).collect();
        RadialDensity::new(dimension, nodes, vec![dr; n], values)
    }

    /// Logarithmic midpoint grid on `[r_min, r_max]`; `dr = r dx` weights.
    pub fn sample_log(
        dimension: usize,
        r_min: f64,
        r_max: f64,
        n: usize,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        if !(r_min > 0.0 && r_max > r_min) {
            return Err(Error::Invalid("need 0 < r_min < r_max".into()));
        }
        let dx = (r_max / r_min).ln() / n as f64;
        let nodes: Vec<f64> = (0..n)
            .map(|j| r_min * ((j as f64 + 0.5) * dx).exp())
            .collect();
        let weights = nodes.iter().map(|&r| r * dx).collect();
        let values = nodes.iter().map(|&r| f(r).max(0.0)).collect();
        RadialDensity::new(dimension, nodes, weights, values)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `∫ f = σ_d ∫ r^{d-1} f(r) dr`.
    pub fn mass(&self) -> f64 {
        self.radial_integral(&self.values)
    }

    /// `∫ f^p` with the surface-measure weight.
    pub fn power_integral(&self, p: f64) -> f64 {
        let sigma = unit_sphere_area(self.dimension);
        let d = self.dimension as i32;
        self.nodes
            .iter()
            .zip(&self.weights)
            .zip(&self.values)
            .map(|((&r, &w), &v)| r.powi(d - 1) * v.powf(p) * w)
            .sum::<f64>()
            * sigma
    }

    /// Integrate arbitrary radial samples against the surface measure.
    pub fn radial_integral(&self, samples: &[f64]) -> f64 {
        let sigma = unit_sphere_area(self.dimension);
        let d = self.dimension as i32;
        self.nodes
            .iter()
            .zip(&self.weights)
            .zip(samples)
            .map(|((&r, &w), &v)| r.powi(d - 1) * v * w)
            .sum::<f64>()
            * sigma
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        RadialDensity::new(
            self.dimension,
            self.nodes.clone(),
            self.weights.clone(),
            self.values.iter().map(|&v| v * c).collect(),
        )
    }
}
