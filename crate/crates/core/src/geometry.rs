//! H-representation polytopes `{x : Ax − b ≤ 0}` and axis-aligned boxes.
//!
//! Sets are closed: a zero margin counts as inside.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.is_empty() {
            return Err(Error::InvalidBox("zero-dimensional box".into()));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) || l > u {
                return Err(Error::InvalidBox(format!("bad bounds [{l}, {u}] in dimension {i}")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Physical state constraints of the CSTR: `0 ≤ cA ≤ 1`, `345 ≤ T ≤ 355`.
    pub fn cstr_state() -> Self {
        Self { lower: vec![0.0, 345.0], upper: vec![1.0, 355.0] }
    }

    /// Disturbance bound `|w| ≤ (0.1, 2.0)`.
    pub fn cstr_disturbance() -> Self {
        Self { lower: vec![-0.1, -2.0], upper: vec![0.1, 2.0] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (l, u))| l <= x && x <= u)
    }

    /// All `2^n` corners; corner `k` takes the upper bound in dimension `j`
    /// when bit `j` of `k` is set.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|k| (0..n).map(|j| if k >> j & 1 == 1 { self.upper[j] } else { self.lower[j] }).collect())
            .collect()
    }

    /// Maps `x` to `[-1, 1]^n`. Degenerate dimensions map to 0.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.center().iter().zip(self.half_widths()))
            .map(|(x, (c, h))| if h > 0.0 { (x - c) / h } else { 0.0 })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if u > l { rng.gen_range(l..=u) } else { l })
            .collect()
    }

    pub fn to_polytope(&self) -> HPolytope {
        box_to_polytope(self)
    }
}

/// `2n` rows: `x_i − upper_i ≤ 0` then `−x_i + lower_i ≤ 0` for each `i`.
pub fn box_to_polytope(bb: &BoxSet) -> HPolytope {
    let n = bb.dim();
    let mut a = Vec::with_capacity(2 * n);
    let mut b = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut row = vec![0.0; n];
        row[i] = 1.0;
        a.push(row.clone());
        b.push(bb.upper[i]);
        row[i] = -1.0;
        a.push(row);
        b.push(-bb.lower[i]);
    }
    HPolytope { a, b }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl HPolytope {
    /// Validates shape, nonzero rows and (for n ≤ 2) boundedness.
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::InvalidPolytope(format!("{} rows in A but {} entries in b", a.len(), b.len())));
        }
        let n = a.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::InvalidPolytope("empty constraint matrix".into()));
        }
        if a.len() < n + 1 {
            return Err(Error::InvalidPolytope(format!("need at least {} rows, got {}", n + 1, a.len())));
        }
        for (i, row) in a.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidPolytope(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            if row.iter().chain(std::iter::once(&b[i])).any(|v| !v.is_finite()) {
                return Err(Error::InvalidPolytope(format!("row {i} is not finite")));
            }
            if row.iter().all(|v| *v == 0.0) {
                return Err(Error::InvalidPolytope(format!("row {i} is zero")));
            }
        }
        let p = Self { a, b };
        if !p.is_bounded() {
            return Err(Error::InvalidPolytope("unbounded".into()));
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.a[0].len()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn offsets(&self) -> &[f64] {
        &self.b
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// `A_i·x − b_i`
    pub fn row_value(&self, i: usize, x: &[f64]) -> f64 {
        self.a[i].iter().zip(x).map(|(a, x)| a * x).sum::<f64>() - self.b[i]
    }

    /// `max_i (A_i·x − b_i)`; non-positive iff `x` is in the set.
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.margin_unchecked(x))
    }

    pub(crate) fn margin_unchecked(&self, x: &[f64]) -> f64 {
        (0..self.a.len()).map(|i| self.row_value(i, x)).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        Ok(self.margin(x)? <= 0.0)
    }

    /// Homothety about `center` with ratio `factor`:
    /// `{c + factor·(y − c) : y ∈ self}`.
    pub fn scaled_about(&self, center: &[f64], factor: f64) -> HPolytope {
        let b = self
            .a
            .iter()
            .zip(&self.b)
            .map(|(row, b)| {
                let ac: f64 = row.iter().zip(center).map(|(a, c)| a * c).sum();
                factor * b + (1.0 - factor) * ac
            })
            .collect();
        HPolytope { a: self.a.clone(), b }
    }

    fn is_bounded(&self) -> bool {
        match self.dim() {
            1 => self.a.iter().any(|r| r[0] > 0.0) && self.a.iter().any(|r| r[0] < 0.0),
            2 => {
                // Bounded iff the row normals leave no angular gap of π or more.
                let mut angles: Vec<f64> = self.a.iter().map(|r| r[1].atan2(r[0])).collect();
                angles.sort_by(f64::total_cmp);
                let wrap = angles[0] + std::f64::consts::TAU - angles[angles.len() - 1];
                let max_gap = angles.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max);
                max_gap < std::f64::consts::PI - 1e-12
            }
            _ => true,
        }
    }

    /// Vertices of a 2-D polytope in counter-clockwise order, by pairwise
    /// row intersection.
    pub fn vertices_2d(&self) -> Result<Vec<[f64; 2]>> {
        if self.dim() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: self.dim() });
        }
        let scale: f64 = self.b.iter().map(|b| b.abs()).fold(1.0, f64::max);
        let mut pts = Vec::new();
        for i in 0..self.a.len() {
            for j in i + 1..self.a.len() {
                let (a1, a2) = (&self.a[i], &self.a[j]);
                let det = a1[0] * a2[1] - a1[1] * a2[0];
                if det.abs() < 1e-14 * (a1[0].hypot(a1[1]) * a2[0].hypot(a2[1])) {
                    continue;
                }
                let x = (self.b[i] * a2[1] - a1[1] * self.b[j]) / det;
                let y = (a1[0] * self.b[j] - self.b[i] * a2[0]) / det;
                let tol = 1e-9 * scale;
                if (0..self.a.len()).all(|k| self.row_value(k, &[x, y]) <= tol) {
                    pts.push([x, y]);
                }
            }
        }
        Ok(convex_hull_2d(&pts))
    }

    /// Axis-aligned bounding box (exact for n ≤ 2).
    pub fn bounding_box(&self) -> Result<BoxSet> {
        match self.dim() {
            1 => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for (r, b) in self.a.iter().zip(&self.b) {
                    if r[0] > 0.0 {
                        hi = hi.min(b / r[0]);
                    } else {
                        lo = lo.max(b / r[0]);
                    }
                }
                BoxSet::new(vec![lo], vec![hi])
            }
            2 => {
                let v = self.vertices_2d()?;
                if v.is_empty() {
                    return Err(Error::InvalidPolytope("empty polytope".into()));
                }
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for p in &v {
                    for d in 0..2 {
                        lo[d] = lo[d].min(p[d]);
                        hi[d] = hi[d].max(p[d]);
                    }
                }
                BoxSet::new(lo.to_vec(), hi.to_vec())
            }
            n => Err(Error::InvalidPolytope(format!("bounding box not supported for n = {n}"))),
        }
    }

    /// Area centroid for n = 2, interval midpoint for n = 1.
    pub fn centroid(&self) -> Result<Vec<f64>> {
        match self.dim() {
            1 => Ok(self.bounding_box()?.center()),
            2 => polygon_centroid(&self.vertices_2d()?),
            n => Err(Error::InvalidPolytope(format!("centroid not supported for n = {n}"))),
        }
    }

    /// Polytope file text: `n c`, then one `A_i1 … A_in b_i` line per row,
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.dim(), self.num_constraints());
        for (row, b) in self.a.iter().zip(&self.b) {
            let fields: Vec<String> = row.iter().chain(std::iter::once(b)).map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", fields.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
        let dims = parse_numbers::<usize>(header, 1)?;
        let [n, c] = dims[..] else {
            return Err(Error::Parse { line: 1, msg: "header must be \"n c\"".into() });
        };
        let mut a = Vec::with_capacity(c);
        let mut b = Vec::with_capacity(c);
        for (idx, line) in lines {
            let values = parse_numbers::<f64>(line, idx + 1)?;
            if values.len() != n + 1 {
                return Err(Error::Parse { line: idx + 1, msg: format!("expected {} numbers", n + 1) });
            }
            a.push(values[..n].to_vec());
            b.push(values[n]);
        }
        if a.len() != c {
            return Err(Error::Parse { line: 1, msg: format!("header declares {c} rows, found {}", a.len()) });
        }
        Self::new(a, b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// H-representation of a convex polygon given counter-clockwise.
    /// Each edge row is scaled by `row_scale` component-wise before
    /// normalization so that margins are measured in scaled units.
    pub fn from_ccw_polygon(vertices: &[[f64; 2]], row_scale: [f64; 2]) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolytope(format!("polygon needs ≥3 vertices, got {}", vertices.len())));
        }
        let mut a = Vec::with_capacity(vertices.len());
        let mut b = Vec::with_capacity(vertices.len());
        for (i, p) in vertices.iter().enumerate() {
            let q = vertices[(i + 1) % vertices.len()];
            let normal = [q[1] - p[1], p[0] - q[0]];
            // |normal ⊙ scale| = 1 makes margins lengths in scaled coordinates
            let len = (normal[0] * row_scale[0]).hypot(normal[1] * row_scale[1]);
            let row = vec![normal[0] / len, normal[1] / len];
            b.push(row[0] * p[0] + row[1] * p[1]);
            a.push(row);
        }
        Self::new(a, b)
    }
}

fn parse_numbers<T: std::str::FromStr>(line: &str, lineno: usize) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|s| s.parse::<T>().map_err(|_| Error::Parse { line: lineno, msg: format!("bad number {s:?}") }))
        .collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain. Returns the hull counter-clockwise without
/// collinear points.
pub fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup_by(|a, b| {
        let scale = 1e-12 * (1.0 + a[0].abs().max(a[1].abs()));
        (a[0] - b[0]).abs() <= scale && (a[1] - b[1]).abs() <= scale
    });
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn polygon_centroid(v: &[[f64; 2]]) -> Result<Vec<f64>> {
    let mut area = 0.0;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (i, p) in v.iter().enumerate() {
        let q = v[(i + 1) % v.len()];
        let c = p[0] * q[1] - q[0] * p[1];
        area += c;
        cx += (p[0] + q[0]) * c;
        cy += (p[1] + q[1]) * c;
    }
    if area.abs() < 1e-300 {
        return Err(Error::InvalidPolytope("zero-area polygon".into()));
    }
    Ok(vec![cx / (3.0 * area), cy / (3.0 * area)])
}

const MAX_DRAWS: usize = 1_000_000;
const MIN_ACCEPTANCE: f64 = 1e-4;

/// Uniform sampler over a polytope by rejection from an enclosing box.
///
/// Keeps running acceptance statistics; once a million draws have been
/// spent and fewer than one in ten thousand were accepted the set is
/// reported as degenerate.
#[derive(Debug, Clone)]
pub struct RejectionSampler<'a> {
    poly: &'a HPolytope,
    bb: BoxSet,
    draws: usize,
    accepted: usize,
}

impl<'a> RejectionSampler<'a> {
    pub fn new(poly: &'a HPolytope, bb: BoxSet) -> Result<Self> {
        if bb.dim() != poly.dim() {
            return Err(Error::DimensionMismatch { expected: poly.dim(), got: bb.dim() });
        }
        Ok(Self { poly, bb, draws: 0, accepted: 0 })
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.draws == 0 {
            1.0
        } else {
            self.accepted as f64 / self.draws as f64
        }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<f64>> {
        let mut local = 0;
        loop {
            let x = self.bb.sample(rng);
            self.draws += 1;
            local += 1;
            if self.poly.margin_unchecked(&x) <= 0.0 {
                self.accepted += 1;
                return Ok(x);
            }
            let degenerate = self.draws >= MAX_DRAWS && self.acceptance_rate() < MIN_ACCEPTANCE;
            if degenerate || local >= MAX_DRAWS {
                return Err(Error::DegenerateSet { rate: self.acceptance_rate(), draws: self.draws });
            }
        }
    }
}

/// One uniform draw from `poly` by rejection from `bb`.
pub fn sample_uniform<R: Rng + ?Sized>(poly: &HPolytope, bb: &BoxSet, rng: &mut R) -> Result<Vec<f64>> {
    RejectionSampler::new(poly, bb.clone())?.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> HPolytope {
        BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap().to_polytope()
    }

    #[test]
    fn margin_examples() {
        let p = unit_box();
        assert_eq!(p.margin(&[0.0, 0.0]).unwrap(), -1.0);
        assert_eq!(p.margin(&[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(p.margin(&[1.5, -2.0]).unwrap(), 1.0);
        assert!(matches!(p.margin(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn closed_set_membership() {
        let p = unit_box();
        assert!(p.contains(&[0.0, 0.0]).unwrap());
        assert!(p.contains(&[1.0, 1.0]).unwrap());
        assert!(!p.contains(&[1.0 + 1e-9, 0.0]).unwrap());
    }

    #[test]
    fn state_constraint_box() {
        let p = box_to_polytope(&BoxSet::cstr_state());
        assert_eq!(p.num_constraints(), 4);
        assert_eq!(p.margin(&[0.5, 350.0]).unwrap(), -0.5);
        let u = unit_box();
        assert!(u.contains(&[0.0, 0.0]).unwrap());
        assert!(!u.contains(&[2.0, 0.0]).unwrap());
    }

    #[test]
    fn degenerate_slab() {
        let p = BoxSet::new(vec![0.0, 2.0], vec![1.0, 2.0]).unwrap().to_polytope();
        assert_eq!(p.margin(&[0.5, 2.0]).unwrap(), 0.0);
        assert!(!p.contains(&[0.5, 2.0 + 1e-12]).unwrap());
    }

    #[test]
    fn rejects_bad_polytopes() {
        assert!(HPolytope::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![1.0, 1.0]).is_err());
        assert!(HPolytope::new(vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]], vec![1.0; 3]).is_err());
        // half-plane strip: unbounded in x2
        let strip = HPolytope::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.1]], vec![1.0; 3]);
        assert!(strip.is_err());
        let tri = HPolytope::new(vec![vec![-1.0, 0.0], vec![0.0, -1.0], vec![1.0, 1.0]], vec![0.0, 0.0, 1.0]);
        assert!(tri.is_ok());
    }

    #[test]
    fn box_sampling_accepts_first_draw() {
        let bb = BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let p = bb.to_polytope();
        let mut s = RejectionSampler::new(&p, bb.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            s.sample(&mut rng).unwrap();
        }
        assert_eq!(s.acceptance_rate(), 1.0);
    }

    #[test]
    fn triangle_mean_matches_centroid() {
        // triangle (0,0), (1,0), (0,1); centroid (1/3, 1/3)
        let tri = HPolytope::new(vec![vec![-1.0, 0.0], vec![0.0, -1.0], vec![1.0, 1.0]], vec![0.0, 0.0, 1.0]).unwrap();
        let bb = BoxSet::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mut s = RejectionSampler::new(&tri, bb).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let x = s.sample(&mut rng).unwrap();
            assert!(tri.contains(&x).unwrap());
            sum[0] += x[0];
            sum[1] += x[1];
        }
        // marginal variance of a coordinate of this triangle is 1/18
        let sigma = (1.0f64 / 18.0 / n as f64).sqrt();
        for s in sum {
            assert!((s / n as f64 - 1.0 / 3.0).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn degenerate_set_is_reported() {
        // thin sliver inside a large box
        let p = BoxSet::new(vec![0.0, 0.0], vec![1e-4, 1e-4]).unwrap().to_polytope();
        let bb = BoxSet::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let r = sample_uniform(&p, &bb, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(matches!(r, Err(Error::DegenerateSet { .. })));
    }

    #[test]
    fn hull_vertices_and_roundtrip() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5], [0.5, 0.0]];
        let hull = convex_hull_2d(&pts);
        assert_eq!(hull, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        let p = HPolytope::from_ccw_polygon(&hull, [1.0, 1.0]).unwrap();
        assert_eq!(p.num_constraints(), 4);
        assert!(p.contains(&[0.5, 0.5]).unwrap());
        assert!(!p.contains(&[1.1, 0.5]).unwrap());
        let v = p.vertices_2d().unwrap();
        assert_eq!(v.len(), 4);
        let c = p.centroid().unwrap();
        assert!((c[0] - 0.5).abs() < 1e-12 && (c[1] - 0.5).abs() < 1e-12);
        let back = HPolytope::parse(&p.to_text()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn scaling_about_center() {
        let p = unit_box().scaled_about(&[0.0, 0.0], 0.5);
        assert!(p.contains(&[0.5, 0.5]).unwrap());
        assert!(!p.contains(&[0.51, 0.0]).unwrap());
        let bb = p.bounding_box().unwrap();
        assert!((bb.upper[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn parse_errors() {
        assert!(HPolytope::parse("").is_err());
        assert!(HPolytope::parse("2 3\n1 0 1\n").is_err());
        assert!(HPolytope::parse("2 1\n1 0 x\n").is_err());
    }
}
