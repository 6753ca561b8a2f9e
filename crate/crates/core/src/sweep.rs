//! Direct solver for the implicit upwind discretization of a linear drift in y
//! whose velocity vanishes at a single grid node (the sink) and points toward
//! it everywhere else.
//!
//! With node velocity `a_j = kappa * (s - j)` (in units of cells per step) and
//! upwind fluxes `J_{j+1/2} = a_j^+ p_j - a_{j+1}^- p_{j+1}`, no-flux at both
//! ends, the system `p_j = p^n_j - (J_{j+1/2} - J_{j-1/2})` is lower
//! bidiagonal below the sink and upper bidiagonal above it. Two sweeps plus a
//! closure at the sink solve it exactly and keep the column sum.

#[derive(Debug, Clone)]
pub struct SinkSweep {
    sink: usize,
    /// `kappa * (s - (j - 1))` for `j < s` and `kappa * (j + 1 - s)` for `j > s`:
    /// the inflow rate from the neighbour further from the sink.
    inflow: Vec<f64>,
    /// `1 / (1 + kappa |s - j|)`.
    inv_diag: Vec<f64>,
    /// Inflow rates into the sink from `s - 1` and `s + 1`.
    sink_in: (f64, f64),
}

impl SinkSweep {
    /// `n` nodes, sink at index `sink`, dimensionless rate `kappa` per unit
    /// offset (e.g. `dt / eps` for a drift `-y` with `dy` cancelling).
    pub fn new(n: usize, sink: usize, kappa: f64) -> Self {
        assert!(sink < n, "sink index {sink} outside 0..{n}");
        let rate = |j: usize| kappa * (j as f64 - sink as f64).abs();
        let inv_diag = (0..n).map(|j| 1.0 / (1.0 + rate(j))).collect();
        let inflow = (0..n)
            .map(|j| {
                if j < sink && j > 0 {
                    rate(j - 1)
                } else if j > sink && j + 1 < n {
                    rate(j + 1)
                } else {
                    0.0
                }
            })
            .collect();
        let sink_in = (
            if sink > 0 { rate(sink - 1) } else { 0.0 },
            if sink + 1 < n { rate(sink + 1) } else { 0.0 },
        );
        SinkSweep {
            sink,
            inflow,
            inv_diag,
            sink_in,
        }
    }

    pub fn len(&self) -> usize {
        self.inv_diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_diag.is_empty()
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    /// Overwrite `col` (the old values) with the implicit solution.
    #[inline]
    pub fn solve_in_place(&self, col: &mut [f64]) {
        debug_assert_eq!(col.len(), self.len());
        let s = self.sink;
        let n = col.len();
        let mut prev = 0.0;
        for j in 0..s {
            let v = flush((col[j] + self.inflow[j] * prev) * self.inv_diag[j]);
            col[j] = v;
            prev = v;
        }
        let mut prev = 0.0;
        for j in (s + 1..n).rev() {
            let v = flush((col[j] + self.inflow[j] * prev) * self.inv_diag[j]);
            col[j] = v;
            prev = v;
        }
        let below = if s > 0 { col[s - 1] } else { 0.0 };
        let above = if s + 1 < n { col[s + 1] } else { 0.0 };
        col[s] += self.sink_in.0 * below + self.sink_in.1 * above;
    }
}

impl SinkSweep {
    /// Nonzeros `(row, col, value)` of the implicit matrix whose solution
    /// [`SinkSweep::solve_in_place`] computes, for one column.
    pub fn implicit_entries(&self) -> Vec<(usize, usize, f64)> {
        let n = self.len();
        let s = self.sink;
        let mut out = Vec::with_capacity(2 * n);
        for j in 0..n {
            if j == s {
                out.push((j, j, 1.0));
                if s > 0 {
                    out.push((j, j - 1, -self.sink_in.0));
                }
                if s + 1 < n {
                    out.push((j, j + 1, -self.sink_in.1));
                }
                continue;
            }
            out.push((j, j, 1.0 / self.inv_diag[j]));
            let from = if j < s { j.checked_sub(1) } else { (j + 1 < n).then_some(j + 1) };
            if let Some(f) = from {
                if self.inflow[j] != 0.0 {
                    out.push((j, f, -self.inflow[j]));
                }
            }
        }
        out
    }
}

impl SinkSweep {
    /// Solve every column of `data`, laid out as consecutive columns of
    /// length [`SinkSweep::len`]. Columns are processed in groups so that the
    /// independent recurrences overlap.
    pub fn solve_columns(&self, data: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(data.len() % n, 0);
        let mut groups = data.chunks_exact_mut(LANES * n);
        for group in &mut groups {
            self.solve_group(group);
        }
        for col in groups.into_remainder().chunks_exact_mut(n) {
            self.solve_in_place(col);
        }
    }

    #[inline]
    fn solve_group(&self, group: &mut [f64]) {
        let n = self.len();
        let s = self.sink;
        let (inflow, inv_diag) = (&self.inflow[..n], &self.inv_diag[..n]);
        let mut prev = [0.0; LANES];
        for j in 0..s {
            for (c, pv) in prev.iter_mut().enumerate() {
                let v = flush((group[c * n + j] + inflow[j] * *pv) * inv_diag[j]);
                group[c * n + j] = v;
                *pv = v;
            }
        }
        let mut prev = [0.0; LANES];
        for j in (s + 1..n).rev() {
            for (c, pv) in prev.iter_mut().enumerate() {
                let v = flush((group[c * n + j] + inflow[j] * *pv) * inv_diag[j]);
                group[c * n + j] = v;
                *pv = v;
            }
        }
        for c in 0..LANES {
            let col = &mut group[c * n..(c + 1) * n];
            let below = if s > 0 { col[s - 1] } else { 0.0 };
            let above = if s + 1 < n { col[s + 1] } else { 0.0 };
            col[s] += self.sink_in.0 * below + self.sink_in.1 * above;
        }
    }
}

const LANES: usize = 8;

/// Values this small are set to zero. The sweeps damp the tails of a column
/// geometrically, and letting them reach the subnormal range slows every
/// later operation on them by an order of magnitude.
const TINY: f64 = 1e-250;

#[inline(always)]
fn flush(v: f64) -> f64 {
    if v.abs() < TINY {
        0.0
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    /// Assemble `(I + D) p = p^n` from the flux definition and solve densely.
    fn dense_solve(n: usize, sink: usize, kappa: f64, rhs: &[f64]) -> Vec<f64> {
        let a = |j: usize| kappa * (sink as f64 - j as f64);
        let mut m = DMatrix::<f64>::identity(n, n);
        // J_{j+1/2} = a_j^+ p_j - a_{j+1}^- p_{j+1}, for j = 0..n-2
        for j in 0..n - 1 {
            let plus = a(j).max(0.0);
            let minus = (-a(j + 1)).max(0.0);
            // +J_{j+1/2} in row j, -J_{j+1/2} in row j+1
            m[(j, j)] += plus;
            m[(j, j + 1)] -= minus;
            m[(j + 1, j)] -= plus;
            m[(j + 1, j + 1)] += minus;
        }
        m.lu().solve(&DVector::from_column_slice(rhs)).unwrap().as_slice().to_vec()
    }

    #[test]
    fn implicit_entries_invert_the_sweep() {
        let sweep = SinkSweep::new(7, 3, 0.9);
        let rhs: Vec<f64> = (0..7).map(|j| 0.5 + (j * j) as f64).collect();
        let mut col = rhs.clone();
        sweep.solve_in_place(&mut col);
        let mut back = vec![0.0; 7];
        for (r, c, v) in sweep.implicit_entries() {
            back[r] += v * col[c];
        }
        for (a, b) in back.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn occupied_sink_is_fixed() {
        let sweep = SinkSweep::new(9, 4, 3.0);
        let mut col = vec![0.0; 9];
        col[4] = 2.5;
        sweep.solve_in_place(&mut col);
        assert_eq!(col, {
            let mut v = vec![0.0; 9];
            v[4] = 2.5;
            v
        });
    }

    #[test]
    fn sink_at_either_end() {
        for sink in [0, 6] {
            let sweep = SinkSweep::new(7, sink, 0.7);
            let mut col: Vec<f64> = (0..7).map(|j| 1.0 + j as f64).collect();
            let rhs = col.clone();
            sweep.solve_in_place(&mut col);
            let dense = dense_solve(7, sink, 0.7, &rhs);
            for (a, b) in col.iter().zip(&dense) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stiff_limit_concentrates() {
        let sweep = SinkSweep::new(11, 5, 1e12);
        let mut col = vec![1.0; 11];
        sweep.solve_in_place(&mut col);
        let off: f64 = col.iter().enumerate().filter(|(j, _)| *j != 5).map(|(_, v)| v).sum();
        assert!(off < 1e-10);
        assert!((col.iter().sum::<f64>() - 11.0).abs() < 1e-12);
    }

    #[test]
    fn grouped_columns_match_single_solves() {
        let sweep = SinkSweep::new(13, 4, 0.9);
        let data: Vec<f64> = (0..13 * 19).map(|j| ((j * 37) % 11) as f64).collect();
        let mut grouped = data.clone();
        sweep.solve_columns(&mut grouped);
        for (col, want) in data.chunks(13).zip(grouped.chunks(13)) {
            let mut single = col.to_vec();
            sweep.solve_in_place(&mut single);
            assert_eq!(single, want);
        }
    }

    proptest! {
        #[test]
        fn matches_dense_solve(
            n in 2usize..18,
            sink_frac in 0.0f64..1.0,
            kappa in 1e-3f64..50.0,
            seed in proptest::collection::vec(0.0f64..1.0, 18),
        ) {
            let sink = ((n - 1) as f64 * sink_frac).round() as usize;
            let rhs = &seed[..n];
            let mut col = rhs.to_vec();
            SinkSweep::new(n, sink, kappa).solve_in_place(&mut col);
            let dense = dense_solve(n, sink, kappa, rhs);
            for (a, b) in col.iter().zip(&dense) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let before: f64 = rhs.iter().sum();
            let after: f64 = col.iter().sum();
            prop_assert!((before - after).abs() < 1e-13 * before.max(1.0));
            prop_assert!(col.iter().all(|&v| v >= 0.0));
        }
    }
}
