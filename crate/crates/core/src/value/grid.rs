use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const DEFAULT_NODE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub low: f64,
    pub high: f64,
    pub points: usize,
}

impl AxisSpec {
    pub fn new(low: f64, high: f64, points: usize) -> Self {
        Self { low, high, points }
    }

    pub fn step(&self) -> f64 {
        (self.high - self.low) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.high
        } else {
            self.low + i as f64 * self.step()
        }
    }
}

/// Regular tensor grid, last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AxisSpec>", into = "Vec<AxisSpec>")]
pub struct GridSpec {
    axes: Vec<AxisSpec>,
    strides: Vec<usize>,
    len: usize,
}

impl TryFrom<Vec<AxisSpec>> for GridSpec {
    type Error = Error;

    fn try_from(axes: Vec<AxisSpec>) -> Result<Self> {
        GridSpec::new(axes)
    }
}

impl From<GridSpec> for Vec<AxisSpec> {
    fn from(g: GridSpec) -> Self {
        g.axes
    }
}

impl GridSpec {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Self> {
        Self::with_cap(axes, DEFAULT_NODE_CAP)
    }

    pub fn with_cap(axes: Vec<AxisSpec>, cap: usize) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid("grid needs at least one axis"));
        }
        for (i, a) in axes.iter().enumerate() {
            if a.points < 2 {
                return Err(Error::invalid(format!("grid axis {i} needs at least 2 points")));
            }
            if !(a.low.is_finite() && a.high.is_finite() && a.low < a.high) {
                return Err(Error::invalid(format!("grid axis {i} needs finite low < high")));
            }
        }
        let mut len: usize = 1;
        for a in &axes {
            len = len
                .checked_mul(a.points)
                .filter(|n| *n <= cap)
                .ok_or_else(|| Error::invalid(format!("grid exceeds the node cap of {cap}")))?;
        }
        let mut strides = vec![1; axes.len()];
        for i in (0..axes.len() - 1).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].points;
        }
        Ok(Self { axes, strides, len })
    }

    pub fn uniform(lower: &[f64], upper: &[f64], points: &[usize]) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != points.len() {
            return Err(Error::invalid("grid bound and point lists differ in length"));
        }
        Self::new(
            (0..lower.len())
                .map(|i| AxisSpec::new(lower[i], upper[i], points[i]))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axes(&self) -> &[AxisSpec] {
        &self.axes
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (i, s) in self.strides.iter().enumerate() {
            idx[i] = node / s;
            node %= s;
        }
        idx
    }

    pub fn node(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .zip(&self.axes)
            .map(|(i, a)| a.coord(*i))
            .collect()
    }

    pub fn nodes(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len).map(|n| self.node(n))
    }

    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for ((a, s), v) in self.axes.iter().zip(&self.strides).zip(x) {
            let t = ((v - a.low) / a.step()).round();
            let i = if t.is_nan() {
                0.0
            } else {
                t.clamp(0.0, (a.points - 1) as f64)
            };
            node += i as usize * s;
        }
        node
    }

    /// Multilinear interpolation stencil at `x` with clamp-to-edge; corners
    /// with zero weight are dropped.
    pub fn stencil(&self, x: &[f64], out: &mut Vec<(u32, f64)>) {
        out.clear();
        out.push((0, 1.0));
        let mut base = 0usize;
        let mut fracs = Vec::with_capacity(self.dim());
        for ((a, s), v) in self.axes.iter().zip(&self.strides).zip(x) {
            let top = (a.points - 1) as f64;
            let t = ((v - a.low) / a.step()).clamp(0.0, top);
            let t = if t.is_nan() { 0.0 } else { t };
            let i0 = (t.floor() as usize).min(a.points - 2);
            base += i0 * s;
            fracs.push((t - i0 as f64, *s));
        }
        for (f, s) in fracs {
            let n = out.len();
            if f == 0.0 {
                continue;
            }
            if f == 1.0 {
                for e in out.iter_mut() {
                    e.0 += s as u32;
                }
                continue;
            }
            for k in 0..n {
                let (i, w) = out[k];
                out[k] = (i, w * (1.0 - f));
                out.push((i + s as u32, w * f));
            }
        }
        for e in out.iter_mut() {
            e.0 += base as u32;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridValueFunction {
    grid: GridSpec,
    values: Vec<f64>,
}

impl GridValueFunction {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("value count does not match the grid"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: i,
                context: "grid value".into(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = grid.nodes().map(|x| f(&x)).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut st = Vec::with_capacity(1 << self.grid.dim());
        self.eval_with(x, &mut st)
    }

    pub(crate) fn eval_with(&self, x: &[f64], scratch: &mut Vec<(u32, f64)>) -> f64 {
        self.grid.stencil(x, scratch);
        scratch.iter().map(|(i, w)| w * self.values[*i as usize]).sum()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Node coordinates followed by the value, one row per node.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.grid.dim()).map(|i| format!("x_{i}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        for (n, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = self.grid.node(n).iter().map(|c| format!("{c:?}")).collect();
            row.push(format!("{v:?}"));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("grid-value", serde_json::json!({ "grid": self.grid }));
        c.put("values", vec![self.values.len()], &self.values);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("grid-value")?;
        let grid: GridSpec = serde_json::from_value(
            c.metadata
                .get("grid")
                .cloned()
                .ok_or_else(|| Error::Format("grid-value checkpoint lacks `grid`".into()))?,
        )?;
        Self::new(grid, c.get("values")?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid2() -> GridSpec {
        GridSpec::uniform(&[-1.0, 0.0], &[1.0, 2.0], &[5, 3]).unwrap()
    }

    #[test]
    fn validation() {
        assert!(GridSpec::uniform(&[0.0], &[1.0], &[1]).is_err());
        assert!(GridSpec::uniform(&[1.0], &[0.0], &[3]).is_err());
        assert!(GridSpec::with_cap(vec![AxisSpec::new(0.0, 1.0, 1001); 2], 1_000_000).is_err());
        assert_eq!(grid2().len(), 15);
    }

    #[test]
    fn node_indexing_round_trips() {
        let g = grid2();
        for n in 0..g.len() {
            assert_eq!(g.nearest(&g.node(n)), n);
        }
        assert_eq!(g.node(14), vec![1.0, 2.0]);
        assert_eq!(g.node(1), vec![-1.0, 1.0]);
    }

    #[test]
    fn interpolates_affine_functions_exactly() {
        let g = grid2();
        let v = GridValueFunction::from_fn(g, |x| 3.0 * x[0] - 2.0 * x[1] + 0.5).unwrap();
        for x in [[0.3, 0.7], [-0.99, 1.99], [0.0, 0.0], [1.0, 2.0]] {
            assert!((v.eval(&x) - (3.0 * x[0] - 2.0 * x[1] + 0.5)).abs() < 1e-12);
        }
        // clamped outside
        assert!((v.eval(&[5.0, -3.0]) - v.eval(&[1.0, 0.0])).abs() < 1e-15);
    }

    #[test]
    fn csv_and_checkpoint_export() {
        let v = GridValueFunction::from_fn(grid2(), |x| x[0] * x[1]).unwrap();
        let mut out = Vec::new();
        v.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("x_0,x_1,value\n"));
        assert_eq!(text.lines().count(), 16);
        let c = Checkpoint::parse(&v.to_checkpoint().to_string_pretty().unwrap()).unwrap();
        assert_eq!(GridValueFunction::from_checkpoint(&c).unwrap(), v);
    }

    proptest! {
        #[test]
        fn stencil_weights_form_a_partition_of_unity(x in -2.0f64..2.0, y in -1.0f64..3.0) {
            let g = grid2();
            let mut st = Vec::new();
            g.stencil(&[x, y], &mut st);
            let s: f64 = st.iter().map(|e| e.1).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(st.iter().all(|e| e.1 > 0.0 && (e.0 as usize) < g.len()));
        }

        #[test]
        fn interpolant_stays_within_node_range(x in -1.0f64..1.0, y in 0.0f64..2.0) {
            let v = GridValueFunction::from_fn(grid2(), |p| (p[0] * 3.0).sin() + p[1] * p[1]).unwrap();
            let q = v.eval(&[x, y]);
            prop_assert!(q >= v.min_value() - 1e-12 && q <= v.max_value() + 1e-12);
        }
    }
}
