//! Dense lexicographic simplex for the per-slot allocation programs.
//!
//! The allocation LPs have a structure that removes the need for a phase-1
//! feasibility search: every equality row owns a designated variable (the
//! grid draw) with coefficient +1 that appears in no other row, and every
//! inequality row has nonnegative right-hand side, so grid draws plus
//! slacks form an immediately feasible starting basis.
//!
//! Objectives are lexicographic: later levels are optimized only over the
//! optimal face of earlier levels (entering columns must have zero reduced
//! cost at every earlier level). The allocation solver uses this to break
//! degenerate ties deterministically — emissions first, then total energy
//! traded, then total work offloaded.
//!
//! Determinism: Dantzig pricing with smallest-index tie-breaks, switching
//! to Bland's rule if an iteration budget is exceeded, and a one-pass
//! row/column max-norm equilibration. Identical programs produce identical
//! pivot sequences and therefore identical solutions.

use thiserror::Error;

/// Reduced-cost threshold below which a column is considered improving.
const OPT_TOL: f64 = 1e-9;
/// Columns must price within this of zero at every earlier level to stay
/// on that level's optimal face.
const FACE_TOL: f64 = 1e-9;
/// Smallest pivot element magnitude accepted in the ratio test.
const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SimplexError {
    #[error("program is unbounded below at objective level {level} (column {column})")]
    Unbounded { level: usize, column: usize },
    #[error("iteration limit {0} exceeded; pivoting aborted")]
    IterationLimit(usize),
    #[error(
        "equality row {row} basis variable {var} is not a unit column (coefficient {coef})"
    )]
    BadBasis { row: usize, var: usize, coef: f64 },
    #[error("negative right-hand side {rhs} in row {row}; rows must be normalized")]
    NegativeRhs { row: usize, rhs: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// A linear program in the solver's expected shape: all variables ≥ 0,
/// equality rows each owning a designated unit-column basis variable,
/// inequality rows of the form `a·v ≤ b` with `b ≥ 0`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub num_vars: usize,
    /// Lexicographic objective levels, minimized in order.
    pub objectives: Vec<Vec<f64>>,
    /// (coefficients, rhs) equality rows, rhs ≥ 0.
    pub eq: Vec<(Vec<f64>, f64)>,
    /// Variable index serving as the ready-made basis for each eq row;
    /// must have coefficient exactly 1 there and 0 in every other row.
    pub eq_basis: Vec<usize>,
    /// (coefficients, rhs) `≤` rows, rhs ≥ 0.
    pub ub: Vec<(Vec<f64>, f64)>,
}

/// Solver output. `values` is the final (all levels applied) vertex;
/// `primary_values` snapshots the vertex after the first level only, for
/// callers that want to verify tie-breaking never degraded the primary
/// objective.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub values: Vec<f64>,
    pub primary_values: Vec<f64>,
    pub objective_values: Vec<f64>,
    pub iterations: usize,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    /// Reduced-cost row and current objective value per level.
    red: Vec<Vec<f64>>,
    obj: Vec<f64>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.rows[row][col];
        let inv = 1.0 / p;
        for v in self.rows[row].iter_mut() {
            *v *= inv;
        }
        self.rhs[row] *= inv;
        // Make the pivot exactly one to keep later eliminations clean.
        self.rows[row][col] = 1.0;
        for r in 0..self.rows.len() {
            if r == row {
                continue;
            }
            let f = self.rows[r][col];
            if f == 0.0 {
                continue;
            }
            for c in 0..self.cols {
                self.rows[r][c] -= f * self.rows[row][c];
            }
            self.rows[r][col] = 0.0;
            self.rhs[r] -= f * self.rhs[row];
        }
        for l in 0..self.red.len() {
            let f = self.red[l][col];
            if f == 0.0 {
                continue;
            }
            for c in 0..self.cols {
                self.red[l][c] -= f * self.rows[row][c];
            }
            self.red[l][col] = 0.0;
            self.obj[l] += f * self.rhs[row];
        }
        self.basis[row] = col;
    }
}

/// Minimizes the lexicographic objective stack over the program's feasible
/// region and returns the optimal vertex.
pub fn solve_lexicographic(lp: &LinearProgram) -> Result<LpSolution, SimplexError> {
    let nv = lp.num_vars;
    for (idx, (row, _)) in lp.eq.iter().chain(lp.ub.iter()).enumerate() {
        if row.len() != nv {
            return Err(SimplexError::Shape(format!(
                "row {idx} has {} coefficients, expected {nv}",
                row.len()
            )));
        }
    }
    for (l, c) in lp.objectives.iter().enumerate() {
        if c.len() != nv {
            return Err(SimplexError::Shape(format!(
                "objective level {l} has {} coefficients, expected {nv}",
                c.len()
            )));
        }
    }
    if lp.eq_basis.len() != lp.eq.len() {
        return Err(SimplexError::Shape(
            "eq_basis length must match eq row count".into(),
        ));
    }

    let n_eq = lp.eq.len();
    let n_ub = lp.ub.len();
    let n_rows = n_eq + n_ub;
    let cols = nv + n_ub;

    // Assemble the raw matrix with slack columns appended.
    let mut rows = vec![vec![0.0; cols]; n_rows];
    let mut rhs = vec![0.0; n_rows];
    for (i, (coefs, b)) in lp.eq.iter().enumerate() {
        if *b < 0.0 {
            return Err(SimplexError::NegativeRhs { row: i, rhs: *b });
        }
        rows[i][..nv].copy_from_slice(coefs);
        rhs[i] = *b;
    }
    for (k, (coefs, b)) in lp.ub.iter().enumerate() {
        if *b < 0.0 {
            return Err(SimplexError::NegativeRhs {
                row: n_eq + k,
                rhs: *b,
            });
        }
        rows[n_eq + k][..nv].copy_from_slice(coefs);
        rows[n_eq + k][nv + k] = 1.0;
        rhs[n_eq + k] = *b;
    }
    for (i, &jb) in lp.eq_basis.iter().enumerate() {
        for (r, row) in rows.iter().enumerate() {
            let expected = if r == i { 1.0 } else { 0.0 };
            if (row[jb] - expected).abs() > 1e-12 {
                return Err(SimplexError::BadBasis {
                    row: i,
                    var: jb,
                    coef: row[jb],
                });
            }
        }
    }

    // One-pass max-norm equilibration. Column factors translate scaled
    // variable values back to the original units; objective rows are scaled
    // per column so reported objective values stay in original units.
    let mut row_scale = vec![1.0; n_rows];
    for (i, row) in rows.iter_mut().enumerate() {
        let m = row.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if m > 0.0 {
            row_scale[i] = 1.0 / m;
            for v in row.iter_mut() {
                *v *= row_scale[i];
            }
            rhs[i] *= row_scale[i];
        }
    }
    let mut col_scale = vec![1.0; cols];
    for j in 0..cols {
        let m = rows.iter().fold(0.0f64, |acc, r| acc.max(r[j].abs()));
        if m > 0.0 {
            col_scale[j] = 1.0 / m;
            for r in rows.iter_mut() {
                r[j] *= col_scale[j];
            }
        }
    }

    let levels = lp.objectives.len().max(1);
    let mut scaled_obj = vec![vec![0.0; cols]; levels];
    for (l, c) in lp.objectives.iter().enumerate() {
        for j in 0..nv {
            scaled_obj[l][j] = c[j] * col_scale[j];
        }
    }

    // Starting basis: designated variables on equality rows, slacks on
    // inequality rows. Both are unit columns after equilibration.
    let mut basis = Vec::with_capacity(n_rows);
    basis.extend_from_slice(&lp.eq_basis);
    basis.extend((0..n_ub).map(|k| nv + k));

    let mut t = Tableau {
        rows,
        rhs,
        basis,
        red: vec![vec![0.0; cols]; levels],
        obj: vec![0.0; levels],
        cols,
    };
    // Initial pricing: reduced costs c − c_B·T for each level (the starting
    // basis variables can carry nonzero cost).
    for (l, level_obj) in scaled_obj.iter().enumerate() {
        let mut red = level_obj.clone();
        let mut obj = 0.0;
        for (r, &bv) in t.basis.iter().enumerate() {
            let cb = level_obj[bv];
            if cb == 0.0 {
                continue;
            }
            for (c, rc) in red.iter_mut().enumerate() {
                *rc -= cb * t.rows[r][c];
            }
            obj += cb * t.rhs[r];
        }
        for &bv in &t.basis {
            red[bv] = 0.0;
        }
        t.red[l] = red;
        t.obj[l] = obj;
    }

    let iter_limit = 2000 + 200 * (n_rows + cols);
    let dantzig_budget = 100 + 20 * (n_rows + cols);
    let mut iterations = 0usize;
    let mut primary_values: Option<Vec<f64>> = None;
    let mut objective_values = Vec::with_capacity(levels);

    for level in 0..levels {
        let mut level_iters = 0usize;
        loop {
            if iterations >= iter_limit {
                return Err(SimplexError::IterationLimit(iter_limit));
            }
            let bland = level_iters >= dantzig_budget;
            // Entering column: improving at this level, on the optimal face
            // of all earlier levels.
            let mut enter: Option<usize> = None;
            let mut best = -OPT_TOL;
            'cols: for j in 0..cols {
                if t.basis.contains(&j) {
                    continue;
                }
                for l in 0..level {
                    if t.red[l][j].abs() > FACE_TOL {
                        continue 'cols;
                    }
                }
                let rc = t.red[level][j];
                if rc < best {
                    if bland {
                        enter = Some(j);
                        break;
                    }
                    best = rc;
                    enter = Some(j);
                }
            }
            let Some(col) = enter else { break };

            // Ratio test; ties resolved toward the smallest leaving basis
            // index for determinism and anti-cycling.
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for r in 0..n_rows {
                let a = t.rows[r][col];
                if a > PIVOT_TOL {
                    let ratio = t.rhs[r].max(0.0) / a;
                    let better = ratio < best_ratio - 1e-12
                        || (ratio < best_ratio + 1e-12
                            && leave.is_some_and(|lr| t.basis[r] < t.basis[lr]));
                    if better || leave.is_none() {
                        best_ratio = ratio;
                        leave = Some(r);
                    }
                }
            }
            let Some(row) = leave else {
                return Err(SimplexError::Unbounded { level, column: col });
            };
            t.pivot(row, col);
            iterations += 1;
            level_iters += 1;
        }
        objective_values.push(t.obj[level]);
        if level == 0 {
            primary_values = Some(extract(&t, nv, &col_scale));
        }
    }

    let values = extract(&t, nv, &col_scale);
    Ok(LpSolution {
        primary_values: primary_values.unwrap_or_else(|| values.clone()),
        values,
        objective_values,
        iterations,
    })
}

fn extract(t: &Tableau, nv: usize, col_scale: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; nv];
    for (r, &bv) in t.basis.iter().enumerate() {
        if bv < nv {
            v[bv] = t.rhs[r].max(0.0) * col_scale[bv];
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // min 3x + 2y  s.t.  x + y = 4 (basis x), y ≤ 3  →  y=3, x=1, obj 9.
    #[test]
    fn bounded_equality_with_cap() {
        let lp = LinearProgram {
            num_vars: 2,
            objectives: vec![vec![3.0, 2.0]],
            eq: vec![(vec![1.0, 1.0], 4.0)],
            eq_basis: vec![0],
            ub: vec![(vec![0.0, 1.0], 3.0)],
        };
        let s = solve_lexicographic(&lp).unwrap();
        assert_abs_diff_eq!(s.values[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.values[1], 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.objective_values[0], 9.0, epsilon = 1e-9);
    }

    // The basis variable is the cheap one; nothing should move.
    #[test]
    fn starting_basis_can_be_optimal() {
        let lp = LinearProgram {
            num_vars: 2,
            objectives: vec![vec![1.0, 5.0]],
            eq: vec![(vec![1.0, 1.0], 2.0)],
            eq_basis: vec![0],
            ub: vec![],
        };
        let s = solve_lexicographic(&lp).unwrap();
        assert_abs_diff_eq!(s.values[0], 2.0, epsilon = 1e-12);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn unbounded_direction_is_detected() {
        // y is fixed by the equality; x has negative cost and no row bounds it.
        let lp = LinearProgram {
            num_vars: 2,
            objectives: vec![vec![-1.0, 0.0]],
            eq: vec![(vec![0.0, 1.0], 1.0)],
            eq_basis: vec![1],
            ub: vec![],
        };
        assert!(matches!(
            solve_lexicographic(&lp),
            Err(SimplexError::Unbounded { .. })
        ));
    }

    // Level 1 leaves a tie (x + y = 1 with equal costs); level 2 minimizes x.
    #[test]
    fn secondary_level_breaks_primary_ties() {
        let lp = LinearProgram {
            num_vars: 2,
            objectives: vec![vec![1.0, 1.0], vec![1.0, 0.0]],
            eq: vec![(vec![1.0, 1.0], 1.0)],
            eq_basis: vec![0],
            ub: vec![],
        };
        let s = solve_lexicographic(&lp).unwrap();
        assert_abs_diff_eq!(s.objective_values[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[1], 1.0, epsilon = 1e-12);
        // The primary snapshot is still a primary optimum.
        let primary_cost = s.primary_values[0] + s.primary_values[1];
        assert_abs_diff_eq!(primary_cost, 1.0, epsilon = 1e-12);
    }

    // Secondary levels must not leave the primary optimal face.
    #[test]
    fn secondary_level_cannot_degrade_primary() {
        // min x; then min y. x=0 is forced; minimizing y must not touch x.
        let lp = LinearProgram {
            num_vars: 3,
            objectives: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            // x + y + z = 2, basis z.
            eq: vec![(vec![1.0, 1.0, 1.0], 2.0)],
            eq_basis: vec![2],
            ub: vec![],
        };
        let s = solve_lexicographic(&lp).unwrap();
        assert_abs_diff_eq!(s.values[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[2], 2.0, epsilon = 1e-12);
    }

    // Badly scaled coefficients still solve accurately after equilibration.
    #[test]
    fn equilibration_handles_mixed_magnitudes() {
        // min 600 g1 + 20 g2 s.t. g1 + 1e-5 x = 1e-3 (basis g1),
        // g2 − 1e-5 x = 2e-2 (basis g2), x ≤ 50.
        // Moving work (x) from server 1 to 2 is profitable: x=50,
        // g1 = 1e-3 − 5e-4, g2 = 2e-2 + 5e-4.
        let lp = LinearProgram {
            num_vars: 3,
            objectives: vec![vec![600.0, 20.0, 0.0]],
            eq: vec![
                (vec![1.0, 0.0, 1e-5], 1e-3),
                (vec![0.0, 1.0, -1e-5], 2e-2),
            ],
            eq_basis: vec![0, 1],
            ub: vec![(vec![0.0, 0.0, 1.0], 50.0)],
        };
        let s = solve_lexicographic(&lp).unwrap();
        assert_abs_diff_eq!(s.values[2], 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.values[0], 5e-4, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[1], 2.05e-2, epsilon = 1e-12);
        let expected = 600.0 * 5e-4 + 20.0 * 2.05e-2;
        assert_abs_diff_eq!(s.objective_values[0], expected, epsilon = 1e-9);
    }

    #[test]
    fn shape_errors_are_reported() {
        let lp = LinearProgram {
            num_vars: 2,
            objectives: vec![vec![1.0]],
            eq: vec![],
            eq_basis: vec![],
            ub: vec![],
        };
        assert!(matches!(
            solve_lexicographic(&lp),
            Err(SimplexError::Shape(_))
        ));
    }

    #[test]
    fn bad_basis_column_is_rejected() {
        let lp = LinearProgram {
            num_vars: 2,
            objectives: vec![vec![1.0, 1.0]],
            eq: vec![(vec![2.0, 1.0], 1.0)],
            eq_basis: vec![0],
            ub: vec![],
        };
        assert!(matches!(
            solve_lexicographic(&lp),
            Err(SimplexError::BadBasis { .. })
        ));
    }

    #[test]
    fn degenerate_rhs_zero_rows_terminate() {
        // x + y = 0 forces both to zero. The second level prices basic x
        // at 1, so y enters on a zero-ratio (degenerate) pivot; the solver
        // must terminate and leave the solution unchanged.
        let lp = LinearProgram {
            num_vars: 3,
            objectives: vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 0.0]],
            eq: vec![(vec![1.0, 1.0, 0.0], 0.0), (vec![0.0, 0.0, 1.0], 3.0)],
            eq_basis: vec![0, 2],
            ub: vec![(vec![0.0, 1.0, 0.0], 3.0)],
        };
        let s = solve_lexicographic(&lp).unwrap();
        assert_abs_diff_eq!(s.values[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.values[2], 3.0, epsilon = 1e-12);
    }
}
