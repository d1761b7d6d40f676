use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{SpaceGrid, VolatilityBand};
use crate::bsvie::IntervalPlan;

/// Which end of the band attains the supremum in `G` at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    Low,
    High,
}

impl Regime {
    #[inline]
    pub fn sigma(self, band: &VolatilityBand) -> f64 {
        match self {
            Regime::Low => band.sigma_lo(),
            Regime::High => band.sigma_hi(),
        }
    }

    /// Argmax convention: a non-negative second difference selects the upper volatility.
    #[inline]
    pub fn for_curvature(d2: f64) -> Regime {
        if d2 >= 0.0 {
            Regime::High
        } else {
            Regime::Low
        }
    }
}

/// Dense `rows x n_x` table of nodal values, e.g. the diagonal surface `Y[i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTable {
    n_rows: usize,
    n_x: usize,
    data: Vec<f64>,
}

impl NodeTable {
    pub fn zeros(n_rows: usize, n_x: usize) -> Self {
        NodeTable {
            n_rows,
            n_x,
            data: vec![0.0; n_rows * n_x],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_x = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_x);
        for r in rows {
            assert_eq!(r.len(), n_x, "ragged rows");
            data.extend_from_slice(r);
        }
        NodeTable {
            n_rows: rows.len(),
            n_x,
            data,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_x..(k + 1) * self.n_x]
    }

    #[inline]
    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.n_x..(k + 1) * self.n_x]
    }

    #[inline]
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.data[k * self.n_x + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_rows).map(|k| self.row(k).to_vec()).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Field indexed by time pairs `(i, k)` with `i <= k <= n_t` and a space index.
///
/// Storage is anchor-major; pairs with `k < i` are not stored and `get`
/// returns `None` for them.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularField<T> {
    n_t: usize,
    n_x: usize,
    offsets: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy> TriangularField<T> {
    pub fn filled(n_t: usize, n_x: usize, value: T) -> Self {
        let mut offsets = Vec::with_capacity(n_t + 2);
        let mut acc = 0;
        for i in 0..=n_t {
            offsets.push(acc);
            acc += (n_t + 1 - i) * n_x;
        }
        offsets.push(acc);
        TriangularField {
            n_t,
            n_x,
            offsets,
            data: vec![value; acc],
        }
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn contains(&self, i: usize, k: usize) -> bool {
        i <= k && k <= self.n_t
    }

    pub fn get(&self, i: usize, k: usize, j: usize) -> Option<T> {
        if !self.contains(i, k) || j >= self.n_x {
            return None;
        }
        Some(self.data[self.index(i, k) + j])
    }

    pub fn row(&self, i: usize, k: usize) -> Option<&[T]> {
        if !self.contains(i, k) {
            return None;
        }
        let start = self.index(i, k);
        Some(&self.data[start..start + self.n_x])
    }

    /// Rows `k = i..=n_t` for anchor `i`, flattened.
    pub fn anchor(&self, i: usize) -> &[T] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Overwrites all rows of anchor `i` from a flattened `(n_t + 1 - i) x n_x` block.
    pub fn set_anchor(&mut self, i: usize, block: &[T]) {
        let dst = &mut self.data[self.offsets[i]..self.offsets[i + 1]];
        assert_eq!(dst.len(), block.len(), "anchor block has wrong size");
        dst.copy_from_slice(block);
    }

    #[inline]
    fn index(&self, i: usize, k: usize) -> usize {
        self.offsets[i] + (k - i) * self.n_x
    }
}

impl TriangularField<f64> {
    /// Discrete analogue of the double-integral norm on the triangle:
    /// max over space of `(sum_i dt (sum_{k>=i} dt |z|^2)^{p/2})^{1/p}`.
    pub fn norm(&self, dt: f64, p: f64) -> f64 {
        (0..self.n_x)
            .map(|j| {
                let outer: f64 = (0..=self.n_t)
                    .map(|i| {
                        let inner: f64 = (i..=self.n_t)
                            .map(|k| {
                                let v = self.data[self.index(i, k) + j];
                                v * v * dt
                            })
                            .sum();
                        inner.powf(p / 2.0) * dt
                    })
                    .sum();
                outer.powf(1.0 / p)
            })
            .fold(0.0, f64::max)
    }
}

/// Value function of one parameterized backward equation on `[t_i, T] x grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub(crate) t_index: usize,
    pub(crate) n_x: usize,
    pub(crate) values: Vec<f64>,
    pub(crate) grad: Vec<f64>,
    pub(crate) sig: Vec<Regime>,
}

impl ValueSurface {
    pub fn t_index(&self) -> usize {
        self.t_index
    }

    /// Last time index held (equals `n_t`).
    pub fn last_index(&self) -> usize {
        self.t_index + self.values.len() / self.n_x - 1
    }

    fn offset(&self, k: usize) -> usize {
        assert!(
            k >= self.t_index && k <= self.last_index(),
            "row {k} outside surface [{}, {}]",
            self.t_index,
            self.last_index()
        );
        (k - self.t_index) * self.n_x
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let o = self.offset(k);
        &self.values[o..o + self.n_x]
    }

    pub fn grad_row(&self, k: usize) -> &[f64] {
        let o = self.offset(k);
        &self.grad[o..o + self.n_x]
    }

    pub fn sig_row(&self, k: usize) -> &[Regime] {
        let o = self.offset(k);
        &self.sig[o..o + self.n_x]
    }

    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.row(k)[j]
    }

    /// Row at the anchor time itself.
    pub fn diagonal(&self) -> &[f64] {
        self.row(self.t_index)
    }

    pub fn value_at(&self, k: usize, x: f64, grid: &SpaceGrid) -> f64 {
        grid.interpolate(self.row(k), x)
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>, Vec<Regime>) {
        (self.values, self.grad, self.sig)
    }
}

/// One reconstructed value of the decreasing martingale term `K(t_i, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSample {
    pub t_index: usize,
    pub path: usize,
    pub value: f64,
}

/// The solved triple: diagonal `Y`, triangular `Z`, optimizer field and `K` samples.
#[derive(Debug, Clone)]
pub struct SolutionBundle {
    pub y: NodeTable,
    pub z: TriangularField<f64>,
    pub sig_star: TriangularField<Regime>,
    pub k_samples: Vec<KSample>,
    pub plan: IntervalPlan,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl SolutionBundle {
    pub fn y_at(&self, i: usize, x: f64, grid: &SpaceGrid) -> f64 {
        grid.interpolate(self.y.row(i), x)
    }
}
