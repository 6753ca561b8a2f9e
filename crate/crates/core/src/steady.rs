//! Direct solution for the fixed point of a split kinetic step.
//!
//! The kinetic schemes advance a two-stream field by `x -> T(P x)`, where `P`
//! solves a column-wise implicit system `M z = x` and `T` is an explicit map
//! coupling only nearest neighbours in `(i, k)`. A fixed point `x = T(P x)`
//! corresponds to `z = P x` with `(M - T) z = 0`, a sparse system. `T` is
//! assembled exactly by probing it with 18 coloured indicator fields.
//!
//! Schemes that lose mass through the y-boundary have no nonzero fixed point;
//! what a long run converges to (after normalization) is the slowest decaying
//! mode, the generalized eigenvector of `T z = mu M z` with `mu` closest to 1.
//! Shifted inverse iteration with `M - (1 - delta) T` finds it in both cases,
//! and reduces to the fixed point when the step conserves mass.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};
use crate::model_core::TwoStreamField;

/// A linear step `x -> T(P x)` on an `nx` by `2 K + 1` two-stream field.
pub struct SplitStep<'a> {
    pub nx: usize,
    pub k_half: usize,
    /// Nonzeros of the implicit column matrix `M`, for `p+` and `p-`.
    pub implicit: [Vec<(usize, usize, f64)>; 2],
    /// The explicit map `T`, writing into its second argument.
    pub explicit: &'a (dyn Fn(&TwoStreamField, &mut TwoStreamField) + Sync),
}

impl SplitStep<'_> {
    fn ny(&self) -> usize {
        2 * self.k_half + 1
    }

    fn len(&self) -> usize {
        2 * self.nx * self.ny()
    }

    /// Triplets of `M` in the flat `p+ ++ p-` layout.
    fn implicit_matrix(&self) -> Vec<Triplet<usize, usize, f64>> {
        let (nx, ny) = (self.nx, self.ny());
        let plane = nx * ny;
        let mut entries = Vec::with_capacity(3 * self.len());
        for (s, column) in self.implicit.iter().enumerate() {
            for i in 0..nx {
                let base = s * plane + i * ny;
                for &(r, c, v) in column {
                    entries.push(Triplet::new(base + r, base + c, v));
                }
            }
        }
        entries
    }

    /// Triplets of `T` in the flat `p+ ++ p-` layout.
    fn explicit_matrix(&self) -> Result<Vec<Triplet<usize, usize, f64>>> {
        let (nx, ny) = (self.nx, self.ny());
        let plane = nx * ny;
        let mut entries = Vec::with_capacity(8 * self.len());

        // a probe with colour (ci, cj) on stream s is one at every (i, k) with
        // i = ci and k = cj (mod 3); each output sees at most one of them
        let probes: Vec<(usize, usize, usize)> = (0..2)
            .flat_map(|s| (0..3).flat_map(move |ci| (0..3).map(move |cj| (s, ci, cj))))
            .collect();
        let mut input = TwoStreamField::zeros_sized(nx, self.k_half);
        let mut output = TwoStreamField::zeros_sized(nx, self.k_half);
        for (s, ci, cj) in probes {
            input.p_plus.fill(0.0);
            input.p_minus.fill(0.0);
            let target = if s == 0 { &mut input.p_plus } else { &mut input.p_minus };
            for i in (ci..nx).step_by(3) {
                for j in (cj..ny).step_by(3) {
                    target[i * ny + j] = 1.0;
                }
            }
            (self.explicit)(&input, &mut output);
            for (s_out, out) in [&output.p_plus, &output.p_minus].into_iter().enumerate() {
                for (idx, &v) in out.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let (i, j) = (idx / ny, idx % ny);
                    let src_i = neighbour_with_residue(i, ci, nx);
                    let src_j = neighbour_with_residue(j, cj, ny);
                    let (Some(si), Some(sj)) = (src_i, src_j) else {
                        return Err(Error::Solver(format!(
                            "explicit step reaches beyond its nearest neighbours at ({i}, {j})"
                        )));
                    };
                    entries.push(Triplet::new(s_out * plane + idx, s * plane + si * ny + sj, v));
                }
            }
        }
        Ok(entries)
    }

    /// The slowest mode `z` (the fixed point of `z -> P(T z)` when the step
    /// conserves mass), scaled to the sum of `guess`.
    pub fn solve(&self, guess: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if guess.len() != n {
            return Err(Error::GridMismatch(format!(
                "guess has {} entries, the field has {n}",
                guess.len()
            )));
        }
        if n > MAX_UNKNOWNS {
            return Err(Error::Solver(format!(
                "{n} unknowns exceed the direct-solve limit of {MAX_UNKNOWNS}"
            )));
        }
        let total: f64 = guess.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Solver("the guess must have a positive sum".into()));
        }
        let m = self.implicit_matrix();
        let t = self.explicit_matrix()?;
        let apply = |entries: &[Triplet<usize, usize, f64>], z: &[f64]| {
            let mut out = vec![0.0; n];
            for e in entries {
                out[e.row] += e.val * z[e.col];
            }
            out
        };

        let mut z: Vec<f64> = guess.iter().map(|v| v / total).collect();
        let mut sigma = 1.0 - SHIFT;
        'shifts: for _ in 0..MAX_SHIFTS {
            let mut entries: Vec<_> = t.iter().map(|e| Triplet::new(e.row, e.col, -sigma * e.val)).collect();
            entries.extend_from_slice(&m);
            let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &entries)
                .map_err(|e| Error::Solver(format!("assembly failed: {e:?}")))?;
            drop(entries);
            let lu = mat
                .sp_lu()
                .map_err(|e| Error::Solver(format!("sparse LU failed: {e:?}")))?;
            for iteration in 0..MAX_ITER {
                let mz = apply(&m, &z);
                let w = lu.solve(Col::from_fn(n, |i| mz[i]));
                let sum: f64 = (0..n).map(|i| w[i]).sum();
                if !sum.is_finite() || sum == 0.0 {
                    return Err(Error::Solver("shifted system is singular".into()));
                }
                let w: Vec<f64> = (0..n).map(|i| w[i] / sum).collect();
                let change = w.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let size = w.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                z = w;
                log::debug!("shift {sigma}, inverse iteration {iteration}: change {:e}", change / size);
                if change <= CONVERGED * size {
                    break 'shifts;
                }
            }
            // slow contraction means the mode decays at a rate comparable to
            // the gap: move the shift onto the current eigenvalue estimate
            let mu = apply(&t, &z).iter().sum::<f64>() / apply(&m, &z).iter().sum::<f64>();
            sigma = (1.0 - SHIFT) / mu;
        }
        z.iter_mut().for_each(|v| *v *= total);
        Ok(z)
    }
}

/// Relative distance of the shift from 1. It must stay well below the
/// decay rate per step of the second slowest mode.
const SHIFT: f64 = 1e-12;
const MAX_ITER: usize = 12;
const MAX_SHIFTS: usize = 4;
/// The LU factors of a 2D-coupled system grow superlinearly; this bound keeps
/// the factorization near 2 GB.
pub const MAX_UNKNOWNS: usize = 800_000;
const CONVERGED: f64 = 1e-14;

/// The index in `{j - 1, j, j + 1} ∩ [0, n)` congruent to `residue` mod 3.
fn neighbour_with_residue(j: usize, residue: usize, n: usize) -> Option<usize> {
    (j.saturating_sub(1)..=(j + 1).min(n - 1)).find(|m| m % 3 == residue)
}
