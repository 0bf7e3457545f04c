//! Deterministic controls `q = (f, g)` and their costs.
//!
//! Both components are piecewise constant on explicit time grids, so every
//! cost integral below is an exact finite sum.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ALIGN_TOL: f64 = 1e-9;

fn validate_grid(grid: &[f64], what: &str) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::InvalidParameter(format!("{what}: grid needs at least one cell")));
    }
    if grid[0] != 0.0 {
        return Err(Error::InvalidParameter(format!("{what}: grid must start at 0")));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
        return Err(Error::InvalidParameter(format!("{what}: grid must be strictly increasing")));
    }
    Ok(())
}

fn uniform_grid(horizon: f64, cells: usize) -> Vec<f64> {
    (0..=cells)
        .map(|i| if i == cells { horizon } else { horizon * i as f64 / cells as f64 })
        .collect()
}

fn cell_of(grid: &[f64], t: f64) -> usize {
    let cells = grid.len() - 1;
    match grid.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
        Ok(i) => i.min(cells - 1),
        Err(i) => i.saturating_sub(1).min(cells - 1),
    }
}

/// Checks that every grid point is an integer multiple of `dt`.
pub fn check_alignment(grid: &[f64], dt: f64) -> Result<()> {
    for &t in grid {
        let r = t / dt;
        if (r - r.round()).abs() > ALIGN_TOL * r.abs().max(1.0) {
            return Err(Error::GridMisaligned { dt, point: t });
        }
    }
    Ok(())
}

/// Brownian-direction control `f`, constant on `[t_j, t_{j+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarControl {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl ScalarControl {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        validate_grid(&grid, "scalar control")?;
        if values.len() + 1 != grid.len() {
            return Err(Error::InvalidParameter("scalar control: one value per cell".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("scalar control: values must be finite".into()));
        }
        Ok(ScalarControl { grid, values })
    }

    pub fn constant(horizon: f64, value: f64) -> Result<Self> {
        Self::new(vec![0.0, horizon], vec![value])
    }

    pub fn uniform(horizon: f64, values: Vec<f64>) -> Result<Self> {
        Self::new(uniform_grid(horizon, values.len()), values)
    }

    pub fn zero(horizon: f64) -> Self {
        Self::constant(horizon, 0.0).expect("valid horizon")
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn value_at(&self, t: f64) -> f64 {
        self.values[cell_of(&self.grid, t)]
    }

    pub fn cell_widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.grid.windows(2).map(|w| w[1] - w[0])
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ScalarControl {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }

    /// `int_0^T f(s) h(s) ds` for a piecewise-smooth `h`, by Gauss-Legendre per cell.
    pub fn integrate_against(&self, h: impl Fn(f64) -> f64) -> f64 {
        const NODES: [(f64, f64); 3] = [
            (-0.774_596_669_241_483_4, 5.0 / 9.0),
            (0.0, 8.0 / 9.0),
            (0.774_596_669_241_483_4, 5.0 / 9.0),
        ];
        self.grid
            .windows(2)
            .zip(&self.values)
            .map(|(w, &v)| {
                let (a, b) = (w[0], w[1]);
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                v * half * NODES.iter().map(|&(x, wt)| wt * h(mid + half * x)).sum::<f64>()
            })
            .sum()
    }
}

/// Finite mark space with weights `nu_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkSpace {
    labels: Vec<String>,
    weights: Vec<f64>,
    coordinates: Vec<Option<f64>>,
}

impl MarkSpace {
    pub fn new(labels: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        let coordinates = vec![None; weights.len()];
        Self::with_coordinates(labels, weights, coordinates)
    }

    pub fn with_coordinates(labels: Vec<String>, weights: Vec<f64>, coordinates: Vec<Option<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("mark space needs at least one mark".into()));
        }
        if labels.len() != weights.len() || coordinates.len() != weights.len() {
            return Err(Error::InvalidParameter("mark space: labels and weights differ in length".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter("mark space: weights must be positive and finite".into()));
        }
        Ok(MarkSpace {
            labels,
            weights,
            coordinates,
        })
    }

    /// Marks labelled `z1..zJ` with the given weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let labels = (1..=weights.len()).map(|j| format!("z{j}")).collect();
        Self::new(labels, weights)
    }

    pub fn single(weight: f64) -> Self {
        Self::from_weights(vec![weight]).expect("positive weight")
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn coordinate(&self, j: usize) -> Option<f64> {
        self.coordinates[j]
    }

    /// `nu(Z)`.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Jump-intensity control `g(t, z_j) >= 0`, piecewise constant in time.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityControl {
    grid: Vec<f64>,
    marks: usize,
    // cell-major: values[i * marks + j]
    values: Vec<f64>,
}

impl IntensityControl {
    pub fn new(grid: Vec<f64>, marks: usize, values: Vec<f64>) -> Result<Self> {
        validate_grid(&grid, "intensity control")?;
        if marks == 0 || values.len() != (grid.len() - 1) * marks {
            return Err(Error::InvalidParameter("intensity control: one value per (cell, mark)".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("intensity control: values must be finite and >= 0".into()));
        }
        Ok(IntensityControl { grid, marks, values })
    }

    pub fn constant(horizon: f64, marks: usize, value: f64) -> Result<Self> {
        Self::new(vec![0.0, horizon], marks, vec![value; marks])
    }

    /// The identity intensity `g = 1` (zero cost).
    pub fn identity(horizon: f64, marks: usize) -> Self {
        Self::constant(horizon, marks, 1.0).expect("valid horizon")
    }

    /// Uniform grid with `values[i][j]` given cell-major.
    pub fn uniform(horizon: f64, marks: usize, values: Vec<f64>) -> Result<Self> {
        let cells = values.len() / marks.max(1);
        Self::new(uniform_grid(horizon, cells), marks, values)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn marks(&self) -> usize {
        self.marks
    }

    pub fn cells(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn cell_value(&self, cell: usize, mark: usize) -> f64 {
        self.values[cell * self.marks + mark]
    }

    pub fn value_at(&self, t: f64, mark: usize) -> f64 {
        self.cell_value(cell_of(&self.grid, t), mark)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Clamps all values into `[1/n, n]` (the bounded class used for tilts).
    pub fn clamped(&self, n: f64) -> Self {
        let lo = 1.0 / n;
        IntensityControl {
            grid: self.grid.clone(),
            marks: self.marks,
            values: self.values.iter().map(|v| v.clamp(lo, n)).collect(),
        }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.marks, self.values.iter().map(|&v| f(v)).collect())
    }
}

/// A control pair `q = (f, g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPair {
    pub f: ScalarControl,
    pub g: IntensityControl,
}

impl ControlPair {
    pub fn new(f: ScalarControl, g: IntensityControl) -> Result<Self> {
        if (f.horizon() - g.horizon()).abs() > ALIGN_TOL * f.horizon().max(1.0) {
            return Err(Error::InvalidParameter("control pair: f and g horizons differ".into()));
        }
        Ok(ControlPair { f, g })
    }

    /// `q = (0, 1)`: the uncontrolled skeleton.
    pub fn uncontrolled(horizon: f64, marks: usize) -> Self {
        ControlPair {
            f: ScalarControl::zero(horizon),
            g: IntensityControl::identity(horizon, marks),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.f.horizon()
    }

    pub fn check_alignment(&self, dt: f64) -> Result<()> {
        check_alignment(self.f.grid(), dt)?;
        check_alignment(self.g.grid(), dt)
    }
}

/// `Q1(f) = 1/2 int |f|^2`.
pub fn cost_q1(f: &ScalarControl) -> f64 {
    0.5 * f.values.iter().zip(f.cell_widths()).map(|(v, dt)| v * v * dt).sum::<f64>()
}

/// `l(x) = x log x - x + 1` with `l(0) = 1`.
pub fn ell(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::InvalidParameter(format!("ell is defined on [0, inf), got {x}")));
    }
    Ok(ell_unchecked(x))
}

#[inline]
pub(crate) fn ell_unchecked(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x * x.ln() - x + 1.0
    }
}

/// `Q2(g) = int l(g(s, z)) ds nu(dz)`.
pub fn cost_q2(g: &IntensityControl, marks: &MarkSpace) -> f64 {
    assert_eq!(g.marks, marks.len(), "intensity control and mark space disagree");
    let mut acc = 0.0;
    for (i, w) in g.grid.windows(2).enumerate() {
        let dt = w[1] - w[0];
        for j in 0..g.marks {
            acc += ell_unchecked(g.cell_value(i, j)) * dt * marks.weight(j);
        }
    }
    acc
}

pub fn total_cost(q: &ControlPair, marks: &MarkSpace) -> f64 {
    cost_q1(&q.f) + cost_q2(&q.g, marks)
}

/// Membership in `S^m = S_1^m x S_2^m`.
pub fn in_s_m(q: &ControlPair, marks: &MarkSpace, m: f64) -> bool {
    cost_q1(&q.f) <= m && cost_q2(&q.g, marks) <= m
}

/// Time-mark rectangle `[t_start, t_end) x {marks}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rectangle {
    pub t_start: f64,
    pub t_end: f64,
    pub marks: Vec<usize>,
}

/// `nu_T^g(A) = int_A g ds nu(dz)` for a finite union of grid-aligned rectangles.
///
/// Rectangles are assumed disjoint.
pub fn measure_of(g: &IntensityControl, marks: &MarkSpace, set: &[Rectangle]) -> Result<f64> {
    let on_grid = |t: f64| {
        g.grid
            .iter()
            .position(|&x| (x - t).abs() <= ALIGN_TOL * g.horizon().max(1.0))
    };
    let mut acc = 0.0;
    for r in set {
        let (a, b) = match (on_grid(r.t_start), on_grid(r.t_end)) {
            (Some(a), Some(b)) if a <= b => (a, b),
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "rectangle [{}, {}) is not aligned with the control grid",
                    r.t_start, r.t_end
                )))
            }
        };
        for &j in &r.marks {
            if j >= g.marks {
                return Err(Error::InvalidParameter(format!("mark index {j} out of range")));
            }
            for i in a..b {
                acc += g.cell_value(i, j) * (g.grid[i + 1] - g.grid[i]) * marks.weight(j);
            }
        }
    }
    Ok(acc)
}

/// The whole space `[0, T] x Z` as a rectangle set.
pub fn full_rectangle(g: &IntensityControl) -> Vec<Rectangle> {
    vec![Rectangle {
        t_start: 0.0,
        t_end: g.horizon(),
        marks: (0..g.marks).collect(),
    }]
}

/// `f + sin(2 pi n s / T)` sampled at the midpoints of a uniform grid with
/// `cells` cells. The grid of `f` must be a subset of the new grid.
///
/// As `n` grows the sequence converges weakly in `L^2` to `f` while `Q1`
/// stays bounded.
pub fn weak_perturbation(f: &ScalarControl, n: u32, cells: usize) -> Result<ScalarControl> {
    if n == 0 || cells == 0 {
        return Err(Error::InvalidParameter("weak perturbation needs n >= 1 and cells >= 1".into()));
    }
    let horizon = f.horizon();
    let grid = uniform_grid(horizon, cells);
    let h = horizon / cells as f64;
    for &t in f.grid() {
        let r = t / h;
        if (r - r.round()).abs() > ALIGN_TOL * r.abs().max(1.0) {
            return Err(Error::GridMisaligned { dt: h, point: t });
        }
    }
    let omega = 2.0 * PI * n as f64 / horizon;
    let values = grid
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            f.value_at(mid) + (omega * mid).sin()
        })
        .collect();
    ScalarControl::new(grid, values)
}

/// Intensity alternating between `high` and 1 on `2n` equal sub-intervals
/// for every mark. Its weak limit is the constant `(high + 1) / 2`.
pub fn oscillating_intensity(horizon: f64, marks: usize, n: u32, high: f64) -> Result<IntensityControl> {
    let cells = 2 * n as usize;
    let values = (0..cells)
        .flat_map(|i| std::iter::repeat_n(if i % 2 == 0 { high } else { 1.0 }, marks))
        .collect();
    IntensityControl::new(uniform_grid(horizon, cells), marks, values)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScalarRow {
    t_start: f64,
    t_end: f64,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct IntensityRow {
    t_start: f64,
    t_end: f64,
    mark_index: usize,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct MarkRow {
    index: usize,
    label: String,
    weight: f64,
}

fn rows_to_grid(rows: &[(f64, f64)], context: &str) -> Result<Vec<f64>> {
    let mut grid = vec![];
    for (i, &(a, b)) in rows.iter().enumerate() {
        if i == 0 {
            grid.push(a);
        } else if (grid[i] - a).abs() > ALIGN_TOL * a.abs().max(1.0) {
            return Err(Error::parse(context, format!("row {i}: cells must be contiguous")));
        }
        grid.push(b);
    }
    Ok(grid)
}

pub fn scalar_control_to_csv(f: &ScalarControl) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    for (win, &value) in f.grid.windows(2).zip(&f.values) {
        w.serialize(ScalarRow {
            t_start: win[0],
            t_end: win[1],
            value,
        })?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::parse("csv", e.to_string()))?).unwrap())
}

pub fn scalar_control_from_csv(text: &str) -> Result<ScalarControl> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<ScalarRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    let grid = rows_to_grid(&rows.iter().map(|r| (r.t_start, r.t_end)).collect::<Vec<_>>(), "f control")?;
    ScalarControl::new(grid, rows.iter().map(|r| r.value).collect())
}

pub fn intensity_control_to_csv(g: &IntensityControl) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    for (i, win) in g.grid.windows(2).enumerate() {
        for j in 0..g.marks {
            w.serialize(IntensityRow {
                t_start: win[0],
                t_end: win[1],
                mark_index: j,
                value: g.cell_value(i, j),
            })?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::parse("csv", e.to_string()))?).unwrap())
}

pub fn intensity_control_from_csv(text: &str, marks: usize) -> Result<IntensityControl> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<IntensityRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    if marks == 0 || !rows.len().is_multiple_of(marks) {
        return Err(Error::parse("g control", "row count is not a multiple of the mark count"));
    }
    let mut cells = vec![];
    let mut values = vec![0.0; rows.len()];
    for (r, row) in rows.iter().enumerate() {
        let cell = r / marks;
        if row.mark_index >= marks {
            return Err(Error::parse("g control", format!("mark index {} out of range", row.mark_index)));
        }
        if r % marks == 0 {
            cells.push((row.t_start, row.t_end));
        } else if row.t_start != cells[cell].0 || row.t_end != cells[cell].1 {
            return Err(Error::parse("g control", format!("row {r}: marks of a cell must share its interval")));
        }
        values[cell * marks + row.mark_index] = row.value;
    }
    IntensityControl::new(rows_to_grid(&cells, "g control")?, marks, values)
}

pub fn mark_space_to_csv(z: &MarkSpace) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    for (index, (label, &weight)) in z.labels.iter().zip(&z.weights).enumerate() {
        w.serialize(MarkRow {
            index,
            label: label.clone(),
            weight,
        })?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::parse("csv", e.to_string()))?).unwrap())
}

pub fn mark_space_from_csv(text: &str) -> Result<MarkSpace> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows: Vec<MarkRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|r| r.index);
    if rows.iter().enumerate().any(|(i, r)| r.index != i) {
        return Err(Error::parse("mark space", "indices must be 0..J-1"));
    }
    MarkSpace::new(
        rows.iter().map(|r| r.label.clone()).collect(),
        rows.iter().map(|r| r.weight).collect(),
    )
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
