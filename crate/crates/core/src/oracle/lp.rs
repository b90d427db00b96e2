//! Dense two-phase simplex for small linear programs.
//!
//! Maximizes `c . x` subject to `x >= 0` and rows of the form `a . x (<=, >=, =) b`.
//! Pivoting uses Dantzig's rule and falls back to Bland's rule after a run of
//! degenerate pivots. Primal values and duals are recomputed from the
//! original data and the final basis, not read off the tableau.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;

const PIVOT_EPS: f64 = 1e-11;
const OPT_EPS: f64 = 1e-10;
const FEAS_EPS: f64 = 1e-9;
const DEGENERATE_STREAK: usize = 50;
const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coeffs: Vec<f64>,
    pub kind: RowKind,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// One dual per row: `>= 0` for `Le`, `<= 0` for `Ge`, free for `Eq`.
    pub duals: Vec<f64>,
}

#[derive(Debug)]
pub enum LpFailure {
    Infeasible { phase_one_residual: f64 },
    Unbounded,
    Numerical(String),
}

impl From<LpFailure> for Error {
    fn from(f: LpFailure) -> Self {
        match f {
            LpFailure::Infeasible { phase_one_residual } => Error::Numerical(format!(
                "infeasible linear program (phase-one residual {phase_one_residual:.3e})"
            )),
            LpFailure::Unbounded => Error::Unbounded,
            LpFailure::Numerical(msg) => Error::Numerical(msg),
        }
    }
}

struct Tableau {
    /// `rows x (cols + 1)`, last column is the right-hand side.
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[i][self.cols]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f == 0.0 {
                continue;
            }
            for (v, pv) in r.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            r[col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Maximizes `cost . x` over columns marked `allowed`.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> std::result::Result<(), LpFailure> {
        let mut degenerate = 0usize;
        for _ in 0..MAX_PIVOTS {
            let bland = degenerate >= DEGENERATE_STREAK;
            let mut entering = None;
            let mut best = OPT_EPS;
            for j in 0..self.cols {
                if !allowed[j] || self.basis.contains(&j) {
                    continue;
                }
                let reduced = cost[j]
                    - self
                        .basis
                        .iter()
                        .enumerate()
                        .map(|(i, &b)| cost[b] * self.t[i][j])
                        .sum::<f64>();
                if reduced > best {
                    entering = Some(j);
                    if bland {
                        break;
                    }
                    best = reduced;
                }
            }
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leaving: Option<(usize, f64)> = None;
            for i in 0..self.t.len() {
                let a = self.t[i][col];
                if a > PIVOT_EPS {
                    let ratio = self.rhs(i).max(0.0) / a;
                    let better = match leaving {
                        None => true,
                        Some((k, r)) => {
                            ratio < r - 1e-14 || (ratio <= r + 1e-14 && self.basis[i] < self.basis[k])
                        }
                    };
                    if better {
                        leaving = Some((i, ratio));
                    }
                }
            }
            let Some((row, ratio)) = leaving else {
                return Err(LpFailure::Unbounded);
            };
            if ratio <= 1e-14 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(row, col);
        }
        Err(LpFailure::Numerical("simplex pivot limit reached".into()))
    }
}

impl LinearProgram {
    pub fn solve(&self) -> std::result::Result<LpSolution, LpFailure> {
        let n = self.objective.len();
        let m = self.rows.len();
        // Normalize to non-negative right-hand sides.
        let mut flipped = vec![false; m];
        let rows: Vec<Row> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if r.rhs < 0.0 {
                    flipped[i] = true;
                    Row {
                        coeffs: r.coeffs.iter().map(|x| -x).collect(),
                        kind: match r.kind {
                            RowKind::Le => RowKind::Ge,
                            RowKind::Ge => RowKind::Le,
                            RowKind::Eq => RowKind::Eq,
                        },
                        rhs: -r.rhs,
                    }
                } else {
                    r.clone()
                }
            })
            .collect();

        let n_slack = rows.iter().filter(|r| r.kind != RowKind::Eq).count();
        let n_art = rows.iter().filter(|r| r.kind != RowKind::Le).count();
        let cols = n + n_slack + n_art;
        let mut t = vec![vec![0.0; cols + 1]; m];
        let mut basis = vec![0; m];
        let mut is_art = vec![false; cols];
        // Full constraint matrix over structural and slack columns, for the
        // final basis solves.
        let mut a_full = DMatrix::<f64>::zeros(m, n + n_slack);
        let (mut slack, mut art) = (n, n + n_slack);
        for (i, r) in rows.iter().enumerate() {
            t[i][..n].copy_from_slice(&r.coeffs);
            for j in 0..n {
                a_full[(i, j)] = r.coeffs[j];
            }
            t[i][cols] = r.rhs;
            match r.kind {
                RowKind::Le => {
                    t[i][slack] = 1.0;
                    a_full[(i, slack)] = 1.0;
                    basis[i] = slack;
                    slack += 1;
                }
                RowKind::Ge => {
                    t[i][slack] = -1.0;
                    a_full[(i, slack)] = -1.0;
                    slack += 1;
                    t[i][art] = 1.0;
                    is_art[art] = true;
                    basis[i] = art;
                    art += 1;
                }
                RowKind::Eq => {
                    t[i][art] = 1.0;
                    is_art[art] = true;
                    basis[i] = art;
                    art += 1;
                }
            }
        }
        let mut tab = Tableau { t, basis, cols };

        if n_art > 0 {
            let phase_one: Vec<f64> = (0..cols).map(|j| if is_art[j] { -1.0 } else { 0.0 }).collect();
            tab.optimize(&phase_one, &vec![true; cols])?;
            let residual: f64 = (0..m)
                .filter(|&i| is_art[tab.basis[i]])
                .map(|i| tab.rhs(i))
                .sum();
            if residual > FEAS_EPS {
                return Err(LpFailure::Infeasible {
                    phase_one_residual: residual,
                });
            }
        }

        // Drive zero-level artificials out of the basis; rows where that is
        // impossible are redundant and dropped.
        let mut active_rows: Vec<bool> = vec![true; m];
        for i in 0..m {
            if !is_art[tab.basis[i]] {
                continue;
            }
            let replacement = (0..n + n_slack)
                .filter(|j| !tab.basis.contains(j))
                .max_by(|&a, &b| tab.t[i][a].abs().total_cmp(&tab.t[i][b].abs()))
                .filter(|&j| tab.t[i][j].abs() > 1e-9);
            match replacement {
                Some(j) => tab.pivot(i, j),
                None => active_rows[i] = false,
            }
        }

        let mut cost = vec![0.0; cols];
        cost[..n].copy_from_slice(&self.objective);
        let allowed: Vec<bool> = (0..cols).map(|j| !is_art[j]).collect();
        tab.optimize(&cost, &allowed)?;

        // Recompute the basic solution and duals from the original data.
        let live: Vec<usize> = (0..m).filter(|&i| active_rows[i]).collect();
        let k = live.len();
        let basic: Vec<usize> = live.iter().map(|&i| tab.basis[i]).collect();
        let mut b_mat = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        let mut c_b = DVector::<f64>::zeros(k);
        for (r, &i) in live.iter().enumerate() {
            rhs[r] = rows[i].rhs;
            for (c, &j) in basic.iter().enumerate() {
                b_mat[(r, c)] = a_full[(i, j)];
            }
        }
        for (c, &j) in basic.iter().enumerate() {
            c_b[c] = cost[j];
        }
        let lu = b_mat.clone().lu();
        let x_b = lu
            .solve(&rhs)
            .ok_or_else(|| LpFailure::Numerical("singular final basis".into()))?;
        let y_live = b_mat
            .transpose()
            .lu()
            .solve(&c_b)
            .ok_or_else(|| LpFailure::Numerical("singular final basis".into()))?;

        let mut x = vec![0.0; n];
        for (c, &j) in basic.iter().enumerate() {
            if j < n {
                x[j] = x_b[c].max(0.0);
            }
        }
        let mut duals = vec![0.0; m];
        for (r, &i) in live.iter().enumerate() {
            duals[i] = if flipped[i] { -y_live[r] } else { y_live[r] };
        }
        let objective = x.iter().zip(&self.objective).map(|(a, b)| a * b).sum();
        Ok(LpSolution { x, objective, duals })
    }
}
