//! Grid viability kernels, polytope extraction and backup tables.
//!
//! The kernel iteration starts from every cell of a regular grid over the
//! state constraint box and repeatedly removes cells whose center cannot be
//! held: a cell survives if some input from a finite input grid sends the
//! center, under every disturbance vertex and under zero disturbance, to a
//! point whose one-cell neighbourhood is covered by surviving cells. The
//! neighbourhood is the box of half-width one cell width per dimension,
//! whose corners sit one cell diagonal away. That slack absorbs the
//! intra-cell variation of the map, so the gridded set is an inner
//! approximation rather than a cell-center artefact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::{apply_gain, Plant};
use crate::error::{Error, Result};
use crate::geometry::{convex_hull_2d, BoxSet, HPolytope, RejectionSampler};

pub const MIN_RESOLUTION: usize = 8;

/// 61 coolant temperatures, 285 K to 315 K in 0.5 K steps.
pub fn default_input_grid() -> Vec<f64> {
    linspace(285.0, 315.0, 61)
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub bounds: BoxSet,
    pub resolution: Vec<usize>,
}

impl Grid {
    pub fn new(bounds: BoxSet, resolution: Vec<usize>) -> Result<Self> {
        if resolution.len() != bounds.dim() {
            return Err(Error::DimensionMismatch { expected: bounds.dim(), got: resolution.len() });
        }
        if let Some(r) = resolution.iter().find(|r| **r < MIN_RESOLUTION) {
            return Err(Error::Config(format!("grid resolution {r} below minimum {MIN_RESOLUTION}")));
        }
        if bounds.widths().iter().any(|w| *w <= 0.0) {
            return Err(Error::InvalidBox("grid box must have positive width in every dimension".into()));
        }
        Ok(Self { bounds, resolution })
    }

    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn num_cells(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn cell_widths(&self) -> Vec<f64> {
        self.bounds.widths().iter().zip(&self.resolution).map(|(w, r)| w / *r as f64).collect()
    }

    /// Dimension 0 varies fastest.
    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        self.resolution
            .iter()
            .map(|r| {
                let i = idx % r;
                idx /= r;
                i
            })
            .collect()
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.resolution).rev().fold(0, |acc, (i, r)| acc * r + i)
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        let w = self.cell_widths();
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(d, i)| self.bounds.lower[d] + (*i as f64 + 0.5) * w[d])
            .collect()
    }

    /// Cell containing `x`; points on the upper faces belong to the last cell.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        if !self.bounds.contains(x) {
            return None;
        }
        let w = self.cell_widths();
        let multi: Vec<usize> = x
            .iter()
            .enumerate()
            .map(|(d, v)| (((v - self.bounds.lower[d]) / w[d]).floor() as usize).min(self.resolution[d] - 1))
            .collect();
        Some(self.linear_index(&multi))
    }

    /// Inclusive index ranges of the cells meeting the open box `y ± slack`,
    /// or `None` when that box leaves the grid.
    fn neighbourhood(&self, y: &[f64], slack: &[f64], widths: &[f64]) -> Option<Vec<(usize, usize)>> {
        const EPS: f64 = 1e-9;
        let mut ranges = Vec::with_capacity(y.len());
        for d in 0..y.len() {
            let lo = ((y[d] - slack[d] - self.bounds.lower[d]) / widths[d] + EPS).floor();
            let hi = ((y[d] + slack[d] - self.bounds.lower[d]) / widths[d] - EPS).ceil() - 1.0;
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi >= self.resolution[d] as f64 {
                return None;
            }
            ranges.push((lo as usize, hi.max(lo) as usize));
        }
        Some(ranges)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GriddedSet {
    pub grid: Grid,
    member: Vec<bool>,
}

impl GriddedSet {
    pub fn full(grid: Grid) -> Self {
        let n = grid.num_cells();
        Self { grid, member: vec![true; n] }
    }

    pub fn from_mask(grid: Grid, member: Vec<bool>) -> Result<Self> {
        if member.len() != grid.num_cells() {
            return Err(Error::DimensionMismatch { expected: grid.num_cells(), got: member.len() });
        }
        Ok(Self { grid, member })
    }

    pub fn mask(&self) -> &[bool] {
        &self.member
    }

    pub fn is_member(&self, cell: usize) -> bool {
        self.member.get(cell).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        self.member.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i)
    }

    /// Gridded membership: the cell containing `x` is a member.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.grid.cell_of(x).is_some_and(|c| self.member[c])
    }

    pub fn is_subset_of(&self, other: &GriddedSet) -> bool {
        self.grid == other.grid && self.member.iter().zip(&other.member).all(|(a, b)| !*a || *b)
    }

    /// Axis-aligned extent of the member cells (outer cell faces).
    pub fn extent(&self) -> Option<BoxSet> {
        let w = self.grid.cell_widths();
        let n = self.grid.dim();
        let (mut lo, mut hi) = (vec![f64::INFINITY; n], vec![f64::NEG_INFINITY; n]);
        for c in self.members() {
            let center = self.grid.center(c);
            for d in 0..n {
                lo[d] = lo[d].min(center[d] - 0.5 * w[d]);
                hi[d] = hi[d].max(center[d] + 0.5 * w[d]);
            }
        }
        BoxSet::new(lo, hi).ok()
    }

    /// True when every cell meeting the open box `y ± slack` is a member.
    fn covers(&self, y: &[f64], slack: &[f64], widths: &[f64]) -> bool {
        let Some(ranges) = self.grid.neighbourhood(y, slack, widths) else {
            return false;
        };
        let mut multi: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            if !self.member[self.grid.linear_index(&multi)] {
                return false;
            }
            let mut d = 0;
            loop {
                if d == multi.len() {
                    return true;
                }
                if multi[d] < ranges[d].1 {
                    multi[d] += 1;
                    break;
                }
                multi[d] = ranges[d].0;
                d += 1;
            }
        }
    }
}

/// Certified input per member cell.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BackupTable {
    entries: BTreeMap<usize, f64>,
}

impl BackupTable {
    pub fn get(&self, cell: usize) -> Option<f64> {
        self.entries.get(&cell).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(c, u)| (*c, *u))
    }
}

/// Removal counts per sweep, including the final zero-removal sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthesisTrace {
    pub removed: Vec<usize>,
    pub member_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub set: GriddedSet,
    pub table: BackupTable,
    pub trace: SynthesisTrace,
}

/// Disturbance offsets `G·w` for every vertex plus the zero disturbance.
pub fn disturbance_offsets(plant: &dyn Plant, w_vertices: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = plant.state_dim();
    let mut out = vec![vec![0.0; n]];
    for w in w_vertices {
        let mut off = vec![0.0; n];
        apply_gain(plant.gain(), w, &mut off);
        out.push(off);
    }
    out
}

struct Successors {
    n: usize,
    per_cell: usize,
    /// `Φ(center, u)` for every (cell, input); NaN marks a failed step.
    values: Vec<f64>,
}

impl Successors {
    fn compute(plant: &dyn Plant, grid: &Grid, u_grid: &[f64]) -> Self {
        let n = grid.dim();
        let per_cell = u_grid.len() * n;
        let mut values = vec![f64::NAN; grid.num_cells() * per_cell];
        values.par_chunks_mut(per_cell).enumerate().for_each(|(cell, chunk)| {
            let center = grid.center(cell);
            for (k, &u) in u_grid.iter().enumerate() {
                if let Ok(y) = plant.nominal(&center, u) {
                    chunk[k * n..(k + 1) * n].copy_from_slice(&y);
                }
            }
        });
        Self { n, per_cell, values }
    }

    fn get(&self, cell: usize, k: usize) -> &[f64] {
        let start = cell * self.per_cell + k * self.n;
        &self.values[start..start + self.n]
    }
}

fn certifying_input(
    set: &GriddedSet,
    succ: &Successors,
    cell: usize,
    offsets: &[Vec<f64>],
    slack: &[f64],
    widths: &[f64],
    n_inputs: usize,
) -> Option<usize> {
    let mut y = vec![0.0; succ.n];
    (0..n_inputs).find(|&k| {
        let base = succ.get(cell, k);
        if base[0].is_nan() {
            return false;
        }
        offsets.iter().all(|off| {
            for d in 0..y.len() {
                y[d] = base[d] + off[d];
            }
            set.covers(&y, slack, widths)
        })
    })
}

/// Viability-kernel fixed point with per-cell certified inputs.
///
/// An empty `w_vertices` gives the deterministic kernel.
pub fn synthesize(plant: &dyn Plant, u_grid: &[f64], w_vertices: &[Vec<f64>], grid: &Grid) -> Result<Synthesis> {
    if u_grid.is_empty() {
        return Err(Error::Config("input grid is empty".into()));
    }
    if plant.state_dim() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: plant.state_dim(), got: grid.dim() });
    }
    let succ = Successors::compute(plant, grid, u_grid);
    let offsets = disturbance_offsets(plant, w_vertices);
    let widths = grid.cell_widths();
    let slack = widths.clone();
    let mut set = GriddedSet::full(grid.clone());
    let mut trace = SynthesisTrace { removed: Vec::new(), member_counts: vec![set.count()] };
    loop {
        let choice: Vec<Option<usize>> = (0..grid.num_cells())
            .into_par_iter()
            .map(|cell| {
                if !set.member[cell] {
                    return None;
                }
                certifying_input(&set, &succ, cell, &offsets, &slack, &widths, u_grid.len())
            })
            .collect();
        let next: Vec<bool> = choice.iter().map(Option::is_some).collect();
        let removed = set.count() - next.iter().filter(|m| **m).count();
        trace.removed.push(removed);
        set.member = next;
        trace.member_counts.push(set.count());
        if set.count() == 0 {
            return Err(Error::EmptyKernel { trace: trace.removed });
        }
        if removed == 0 {
            let entries = choice.iter().enumerate().filter_map(|(c, k)| k.map(|k| (c, u_grid[k]))).collect();
            return Ok(Synthesis { set, table: BackupTable { entries }, trace });
        }
    }
}

/// Re-runs the survival test for one cell and input against `set`.
pub fn certifies(plant: &dyn Plant, set: &GriddedSet, cell: usize, u: f64, w_vertices: &[Vec<f64>]) -> bool {
    let widths = set.grid.cell_widths();
    let Ok(base) = plant.nominal(&set.grid.center(cell), u) else {
        return false;
    };
    disturbance_offsets(plant, w_vertices).iter().all(|off| {
        let y: Vec<f64> = base.iter().zip(off).map(|(b, o)| b + o).collect();
        set.covers(&y, &widths, &widths)
    })
}

/// Stored input of the cell containing `x`, else of the nearest member
/// cell center in box-normalized coordinates (ties to the lowest index).
pub fn backup_lookup(table: &BackupTable, set: &GriddedSet, x: &[f64]) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    if let Some(u) = set.grid.cell_of(x).and_then(|c| table.get(c)) {
        return Ok(u);
    }
    let z = set.grid.bounds.normalize(x);
    let mut best: Option<(f64, f64)> = None;
    for (cell, u) in table.iter() {
        let zc = set.grid.bounds.normalize(&set.grid.center(cell));
        let d2: f64 = z.iter().zip(&zc).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.map_or(true, |(bd, _)| d2 < bd) {
            best = Some((d2, u));
        }
    }
    Ok(best.expect("table is nonempty").1)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InvarianceReport {
    pub samples: usize,
    pub counterexamples: Vec<Vec<f64>>,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.counterexamples.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("samples={}\ncounterexamples={}\n", self.samples, self.counterexamples.len());
        for x in &self.counterexamples {
            let fields: Vec<String> = x.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", fields.join(" "));
        }
        out
    }
}

/// Sampling settings for [`verify_invariance`].
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub samples: usize,
    /// Width of the boundary band, in the polytope's margin units.
    pub band: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { samples: 10_000, band: 1.0 / 200.0, seed: 0 }
    }
}

/// Worst margin of `P` over all disturbance offsets at the successor of `x`
/// under `u`, or `+∞` if the step fails.
pub fn worst_successor_margin(poly: &HPolytope, plant: &dyn Plant, x: &[f64], u: f64, offsets: &[Vec<f64>]) -> f64 {
    let Ok(base) = plant.nominal(x, u) else {
        return f64::INFINITY;
    };
    let mut y = base.clone();
    offsets
        .iter()
        .map(|off| {
            for d in 0..y.len() {
                y[d] = base[d] + off[d];
            }
            poly.margin_unchecked(&y)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Sampled check that `P` is (robustly) control invariant over the input
/// grid. Half of the samples are drawn from the band of points within
/// `band` of the boundary.
pub fn verify_invariance(
    poly: &HPolytope,
    plant: &dyn Plant,
    u_grid: &[f64],
    w_vertices: &[Vec<f64>],
    opts: VerifyOptions,
) -> Result<InvarianceReport> {
    let bb = poly.bounding_box()?;
    let mut sampler = RejectionSampler::new(poly, bb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut points = Vec::with_capacity(opts.samples);
    for _ in 0..opts.samples {
        let boundary = rng.gen_bool(0.5);
        let mut x = sampler.sample(&mut rng)?;
        if boundary {
            let mut tries = 0;
            while poly.margin_unchecked(&x) < -opts.band && tries < 100_000 {
                x = sampler.sample(&mut rng)?;
                tries += 1;
            }
        }
        points.push(x);
    }
    let offsets = disturbance_offsets(plant, w_vertices);
    let counterexamples: Vec<Vec<f64>> = points
        .into_par_iter()
        .filter(|x| !u_grid.iter().any(|&u| worst_successor_margin(poly, plant, x, u, &offsets) <= 0.0))
        .collect();
    Ok(InvarianceReport { samples: opts.samples, counterexamples })
}

#[derive(Debug, Clone)]
pub struct Extraction {
    pub polytope: HPolytope,
    /// Homothety ratio applied to the hull (1.0 = unshrunk).
    pub factor: f64,
    pub report: InvarianceReport,
}

/// Convex hull of the member cell centers, shrunk toward its centroid in 1%
/// steps until [`verify_invariance`] finds no counterexample.
pub fn extract_polytope(
    set: &GriddedSet,
    plant: &dyn Plant,
    u_grid: &[f64],
    w_vertices: &[Vec<f64>],
    opts: VerifyOptions,
) -> Result<Extraction> {
    let hull = member_hull(set)?;
    let centroid = hull.centroid()?;
    for step in 0..=50 {
        let factor = 1.0 - 0.01 * step as f64;
        let candidate = hull.scaled_about(&centroid, factor);
        let report = verify_invariance(&candidate, plant, u_grid, w_vertices, opts)?;
        if report.passed() {
            return Ok(Extraction { polytope: candidate, factor, report });
        }
    }
    Err(Error::ExtractionFailure(
        "no invariant shrink of the convex hull down to 50%; use gridded membership".into(),
    ))
}

/// Convex hull of the member cell centers as an H-polytope whose margins
/// are measured in box-normalized lengths.
pub fn member_hull(set: &GriddedSet) -> Result<HPolytope> {
    if set.count() == 0 {
        return Err(Error::EmptyKernel { trace: Vec::new() });
    }
    let widths = set.grid.bounds.widths();
    match set.grid.dim() {
        1 => {
            let centers: Vec<f64> = set.members().map(|c| set.grid.center(c)[0]).collect();
            let lo = centers.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            HPolytope::new(vec![vec![1.0 / widths[0]], vec![-1.0 / widths[0]]], vec![hi / widths[0], -lo / widths[0]])
        }
        2 => {
            let pts: Vec<[f64; 2]> = set.members().map(|c| {
                let x = set.grid.center(c);
                [x[0], x[1]]
            }).collect();
            let hull = convex_hull_2d(&pts);
            HPolytope::from_ccw_polygon(&hull, [widths[0], widths[1]])
        }
        n => Err(Error::ExtractionFailure(format!("hull extraction supports n ≤ 2, got {n}"))),
    }
}

/// One file holding a gridded set and its backup table:
/// `n res₁ … resₙ lower₁ … lowerₙ upper₁ … upperₙ`, then `cell_index u`
/// per member cell.
pub fn write_set_file(set: &GriddedSet, table: &BackupTable) -> String {
    let g = &set.grid;
    let mut header: Vec<String> = vec![g.dim().to_string()];
    header.extend(g.resolution.iter().map(|r| r.to_string()));
    header.extend(g.bounds.lower.iter().chain(&g.bounds.upper).map(|v| format!("{v:.16e}")));
    let mut out = header.join(" ");
    out.push('\n');
    for cell in set.members() {
        let u = table.get(cell).unwrap_or(f64::NAN);
        let _ = writeln!(out, "{cell} {u:.16e}");
    }
    out
}

pub fn parse_set_file(text: &str) -> Result<(GriddedSet, BackupTable)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let bad = |msg: &str| Error::Parse { line: 1, msg: msg.to_string() };
    let n: usize = fields.first().and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad dimension"))?;
    if fields.len() != 1 + 3 * n {
        return Err(bad("header must be \"n res… lower… upper…\""));
    }
    let res = fields[1..=n].iter().map(|s| s.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>();
    let nums = fields[1 + n..].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
    let (Ok(res), Ok(nums)) = (res, nums) else {
        return Err(bad("bad number in header"));
    };
    let grid = Grid::new(BoxSet::new(nums[..n].to_vec(), nums[n..].to_vec())?, res)?;
    let mut member = vec![false; grid.num_cells()];
    let mut entries = BTreeMap::new();
    for (idx, line) in lines {
        let err = |msg: &str| Error::Parse { line: idx + 1, msg: msg.to_string() };
        let mut it = line.split_whitespace();
        let cell: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad cell index"))?;
        let u: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad input"))?;
        if cell >= member.len() {
            return Err(err("cell index out of range"));
        }
        member[cell] = true;
        entries.insert(cell, u);
    }
    Ok((GriddedSet { grid, member }, BackupTable { entries }))
}

pub fn save_set_file(path: impl AsRef<Path>, set: &GriddedSet, table: &BackupTable) -> Result<()> {
    Ok(std::fs::write(path, write_set_file(set, table))?)
}

pub fn load_set_file(path: impl AsRef<Path>) -> Result<(GriddedSet, BackupTable)> {
    parse_set_file(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearPlant;

    fn scalar_grid(lo: f64, hi: f64, res: usize) -> Grid {
        Grid::new(BoxSet::new(vec![lo], vec![hi]).unwrap(), vec![res]).unwrap()
    }

    #[test]
    fn grid_indexing_roundtrip() {
        let g = Grid::new(BoxSet::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap(), vec![8, 10]).unwrap();
        assert_eq!(g.num_cells(), 80);
        for idx in [0, 7, 8, 79] {
            assert_eq!(g.linear_index(&g.multi_index(idx)), idx);
            assert_eq!(g.cell_of(&g.center(idx)), Some(idx));
        }
        assert_eq!(g.cell_of(&[1.0, 2.0]), Some(79));
        assert_eq!(g.cell_of(&[1.1, 0.0]), None);
        assert!(Grid::new(BoxSet::new(vec![0.0], vec![1.0]).unwrap(), vec![4]).is_err());
    }

    #[test]
    fn holdable_box_is_its_own_kernel() {
        let plant = LinearPlant::deterministic(vec![vec![1.0]], vec![0.1]);
        let s = synthesize(&plant, &linspace(-1.0, 1.0, 21), &[], &scalar_grid(-1.0, 1.0, 64)).unwrap();
        assert_eq!(s.set.count(), 64);
        assert_eq!(s.trace.removed, vec![0]);
        assert_eq!(s.table.len(), 64);
    }

    #[test]
    fn scalar_unstable_kernel_endpoints() {
        let plant = LinearPlant::deterministic(vec![vec![2.0]], vec![1.0]);
        let grid = scalar_grid(-2.0, 2.0, 256);
        let s = synthesize(&plant, &linspace(-1.0, 1.0, 201), &[], &grid).unwrap();
        let ext = s.set.extent().unwrap();
        let w = grid.cell_widths()[0];
        assert!((ext.lower[0] + 1.0).abs() <= w, "{:?}", ext);
        assert!((ext.upper[0] - 1.0).abs() <= w, "{:?}", ext);
        assert!(s.trace.member_counts.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn empty_kernel_is_an_error() {
        let plant = LinearPlant::deterministic(vec![vec![2.0]], vec![0.01]);
        let r = synthesize(&plant, &linspace(-1.0, 1.0, 3), &[], &scalar_grid(0.5, 2.0, 16));
        assert!(matches!(r, Err(Error::EmptyKernel { .. })));
        assert!(synthesize(&plant, &[], &[], &scalar_grid(0.5, 2.0, 16)).is_err());
    }

    #[test]
    fn backup_entries_are_certified() {
        let plant = LinearPlant::new(vec![vec![2.0]], vec![1.0], vec![vec![1.0]]);
        let w = vec![vec![-0.05], vec![0.05]];
        let s = synthesize(&plant, &linspace(-1.0, 1.0, 101), &w, &scalar_grid(-2.0, 2.0, 128)).unwrap();
        for (cell, u) in s.table.iter() {
            assert!(certifies(&plant, &s.set, cell, u, &w));
        }
        let det = synthesize(&plant, &linspace(-1.0, 1.0, 101), &[], &scalar_grid(-2.0, 2.0, 128)).unwrap();
        assert!(s.set.is_subset_of(&det.set));
        assert!(s.set.count() < det.set.count());
    }

    #[test]
    fn lookup_center_and_nearest() {
        let grid = scalar_grid(0.0, 1.0, 10);
        let mut mask = vec![false; 10];
        mask[3] = true;
        mask[5] = true;
        let set = GriddedSet::from_mask(grid.clone(), mask).unwrap();
        let table = BackupTable { entries: [(3, 30.0), (5, 50.0)].into_iter().collect() };
        assert_eq!(backup_lookup(&table, &set, &grid.center(3)).unwrap(), 30.0);
        // cell 4 is equidistant from 3 and 5: lowest index wins
        assert_eq!(backup_lookup(&table, &set, &grid.center(4)).unwrap(), 30.0);
        assert_eq!(backup_lookup(&table, &set, &[0.58]).unwrap(), 50.0);
        assert!(matches!(backup_lookup(&BackupTable::default(), &set, &[0.3]), Err(Error::EmptyTable)));
    }

    #[test]
    fn identity_dynamics_box_verifies_and_extracts() {
        let plant = LinearPlant::deterministic(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        let grid = Grid::new(BoxSet::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(), vec![10, 10]).unwrap();
        let set = GriddedSet::full(grid);
        let opts = VerifyOptions { samples: 500, band: 0.01, seed: 3 };
        let ext = extract_polytope(&set, &plant, &[0.0], &[], opts).unwrap();
        assert_eq!(ext.factor, 1.0);
        assert_eq!(ext.polytope.num_constraints(), 4);
        let bb = ext.polytope.bounding_box().unwrap();
        assert!((bb.lower[0] - 0.05).abs() < 1e-12 && (bb.upper[1] - 0.95).abs() < 1e-12);
    }

    /// `x₁⁺ = 2x₁ + u` lifted with a contracting dummy coordinate
    /// `x₂⁺ = x₂/2`; the analytic kernel is `[−1, 1] × [−1, 1]`.
    fn lifted_scalar() -> (LinearPlant, Grid, Vec<f64>) {
        let plant = LinearPlant::deterministic(vec![vec![2.0, 0.0], vec![0.0, 0.5]], vec![1.0, 0.0]);
        let grid = Grid::new(BoxSet::new(vec![-2.0, -1.0], vec![2.0, 1.0]).unwrap(), vec![256, 64]).unwrap();
        (plant, grid, linspace(-1.0, 1.0, 201))
    }

    #[test]
    fn lifted_hull_matches_analytic_product() {
        let (plant, grid, u) = lifted_scalar();
        let s = synthesize(&plant, &u, &[], &grid).unwrap();
        let opts = VerifyOptions { samples: 2000, band: 0.005, seed: 5 };
        let ext = extract_polytope(&s.set, &plant, &u, &[], opts).unwrap();
        let bb = ext.polytope.bounding_box().unwrap();
        // 2% of the constraint box width per coordinate
        assert!((bb.lower[0] + 1.0).abs() <= 0.08 && (bb.upper[0] - 1.0).abs() <= 0.08, "{bb:?}");
        assert!((bb.lower[1] + 1.0).abs() <= 0.04 && (bb.upper[1] - 1.0).abs() <= 0.04, "{bb:?}");
    }

    #[test]
    fn inflated_polytope_has_counterexamples() {
        let (plant, grid, u) = lifted_scalar();
        let s = synthesize(&plant, &u, &[], &grid).unwrap();
        let opts = VerifyOptions { samples: 2000, band: 0.005, seed: 5 };
        let ext = extract_polytope(&s.set, &plant, &u, &[], opts).unwrap();
        let c = ext.polytope.centroid().unwrap();
        let inflated = ext.polytope.scaled_about(&c, 1.1);
        let rep = verify_invariance(&inflated, &plant, &u, &[], opts).unwrap();
        assert!(!rep.passed());
        let again = verify_invariance(&inflated, &plant, &u, &[], opts).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn set_file_roundtrip() {
        let plant = LinearPlant::deterministic(vec![vec![2.0]], vec![1.0]);
        let s = synthesize(&plant, &linspace(-1.0, 1.0, 41), &[], &scalar_grid(-2.0, 2.0, 32)).unwrap();
        let text = write_set_file(&s.set, &s.table);
        let (set, table) = parse_set_file(&text).unwrap();
        assert_eq!(set, s.set);
        assert_eq!(table, s.table);
        assert!(parse_set_file("1 32 0\n").is_err());
        assert!(parse_set_file("1 32 -2 2\n99 0.0\n").is_err());
    }
}
