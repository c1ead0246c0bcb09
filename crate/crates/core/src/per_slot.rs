//! The myopic per-slot placement problem: choose the next cache matrix to
//! minimize predicted delivery delay plus weighted replacement, given the
//! previous cache.
//!
//! The delay of each (user, file) pair is a maximum of affine functions of
//! the fractions, so the problem is an LP in epigraph form:
//!
//! ```text
//! min  sum_{k,f} w_kf * d_f * u_kf  +  beta * sum_{n,f} v_nf
//! s.t. u_kf >= D_k^{f,j}(lambda)          for every reachable rank j
//!      v_nf >= lambda_nf - prev_nf,  v_nf >= 0
//!      sum_f lambda_nf <= M,  0 <= lambda_nf <= 1
//! ```

use std::fmt::Write as _;

use log::warn;
use microlp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net_model::{
    delay_pieces, file_delay, replacement_cost, CacheMatrix, Topology, CAPACITY_EPS, MBS,
};

/// Inputs of one slot's placement problem.
#[derive(Debug, Clone)]
pub struct PerSlotProblem<'a> {
    pub topology: &'a Topology,
    /// `Lambda(t-1)`; also carries `M` and `B`.
    pub prev: CacheMatrix,
    /// Predicted aggregate requests `d~(t)`, one per file.
    pub predicted: Vec<f64>,
    /// Row-major `K x F` share of each file's requests per user; every file
    /// column sums to 1.
    pub weights: Vec<f64>,
    pub beta: f64,
}

/// Each user's share of a file's previous-slot requests. Files nobody asked
/// for get a uniform split.
pub fn allocation_weights(
    prev_user_demand: &[f64],
    users: usize,
    files: usize,
) -> Result<Vec<f64>> {
    if prev_user_demand.len() != users * files || users == 0 {
        return Err(Error::Shape(format!(
            "{} per-user counts for {users} users and {files} files",
            prev_user_demand.len()
        )));
    }
    let mut w = vec![0.0; users * files];
    for f in 0..files {
        let total: f64 = (0..users).map(|k| prev_user_demand[k * files + f]).sum();
        for k in 0..users {
            w[k * files + f] = if total > 0.0 {
                prev_user_demand[k * files + f] / total
            } else {
                1.0 / users as f64
            };
        }
    }
    Ok(w)
}

impl<'a> PerSlotProblem<'a> {
    /// Builds a problem, deriving the weights from the previous slot's
    /// per-user requests.
    pub fn new(
        topology: &'a Topology,
        prev: CacheMatrix,
        predicted: Vec<f64>,
        prev_user_demand: &[f64],
        beta: f64,
    ) -> Result<Self> {
        let weights = allocation_weights(prev_user_demand, topology.n_users(), prev.n_files())?;
        Self::with_weights(topology, prev, predicted, weights, beta)
    }

    pub fn with_weights(
        topology: &'a Topology,
        prev: CacheMatrix,
        predicted: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
    ) -> Result<Self> {
        let files = prev.n_files();
        if prev.n_nodes() != topology.n_nodes() {
            return Err(Error::Shape(format!(
                "{}-row cache for {} nodes",
                prev.n_nodes(),
                topology.n_nodes()
            )));
        }
        if predicted.len() != files || weights.len() != topology.n_users() * files {
            return Err(Error::Shape(
                "prediction or weight length does not match the cache".into(),
            ));
        }
        if predicted
            .iter()
            .chain(&weights)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Input(
                "predictions and weights must be finite and non-negative".into(),
            ));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "beta must be finite and non-negative, got {beta}"
            )));
        }
        prev.check()?;
        Ok(Self {
            topology,
            prev,
            predicted,
            weights,
            beta,
        })
    }

    pub fn n_files(&self) -> usize {
        self.prev.n_files()
    }

    /// `w_kf * d~_f` as a row-major `K x F` matrix.
    pub fn effective_demand(&self) -> Vec<f64> {
        let f = self.n_files();
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.predicted[i % f])
            .collect()
    }

    /// Objective value of a candidate: predicted delay plus weighted
    /// replacement.
    pub fn objective(&self, candidate: &CacheMatrix) -> Result<f64> {
        Ok(predicted_delay_cost(self, candidate)?
            + self.beta * replacement_cost(&self.prev, candidate)?)
    }
}

/// `sum_k sum_f w_kf * d~_f * D_k^f` under `candidate`.
pub fn predicted_delay_cost(problem: &PerSlotProblem, candidate: &CacheMatrix) -> Result<f64> {
    if candidate.n_nodes() != problem.prev.n_nodes() || candidate.n_files() != problem.n_files() {
        return Err(Error::Shape(
            "candidate cache does not match the problem".into(),
        ));
    }
    let demand = problem.effective_demand();
    let f = problem.n_files();
    let mut total = 0.0;
    for k in 0..problem.topology.n_users() {
        for file in 0..f {
            let d = demand[k * f + file];
            if d > 0.0 {
                total += d * file_delay(problem.topology, candidate, k, file);
            }
        }
    }
    Ok(total)
}

/// Kind of an LP variable, for naming and bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    /// `lambda` of (cache row, file).
    Fraction { row: usize, file: usize },
    /// Epigraph of the delay of (user, file).
    Delay { user: usize, file: usize },
    /// Positive part of the change of (cache row, file).
    Increase { row: usize, file: usize },
}

/// `sum coeffs * x <= rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// A minimization LP with only `<=` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub kinds: Vec<VarKind>,
    pub objective: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<LpRow>,
    /// Rows by family: epigraph, replacement, capacity.
    pub row_counts: [usize; 3],
}

impl LinearProgram {
    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    fn add_var(&mut self, kind: VarKind, cost: f64, lower: f64, upper: f64) -> usize {
        self.kinds.push(kind);
        self.objective.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.kinds.len() - 1
    }

    fn var_name(&self, i: usize) -> String {
        match self.kinds[i] {
            VarKind::Fraction { row, file } => format!("lambda_{}_{}", row + 1, file),
            VarKind::Delay { user, file } => format!("u_{user}_{file}"),
            VarKind::Increase { row, file } => format!("v_{}_{}", row + 1, file),
        }
    }

    /// The program in CPLEX LP text format.
    pub fn to_lp_format(&self) -> String {
        let mut out = String::from("\\ per-slot coded cache placement\nMinimize\n obj:");
        let mut any = false;
        for (i, &c) in self.objective.iter().enumerate() {
            if c != 0.0 {
                let _ = write!(
                    out,
                    " {} {:e} {}",
                    if c < 0.0 { "-" } else { "+" },
                    c.abs(),
                    self.var_name(i)
                );
                any = true;
            }
        }
        if !any {
            out.push_str(" 0 lambda_1_0");
        }
        out.push_str("\nSubject To\n");
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(out, " c{r}:");
            for &(v, c) in &row.coeffs {
                let _ = write!(
                    out,
                    " {} {:e} {}",
                    if c < 0.0 { "-" } else { "+" },
                    c.abs(),
                    self.var_name(v)
                );
            }
            let _ = writeln!(out, " <= {:e}", row.rhs);
        }
        out.push_str("Bounds\n");
        for i in 0..self.n_vars() {
            let name = self.var_name(i);
            match (self.lower[i].is_finite(), self.upper[i].is_finite()) {
                (true, true) => {
                    let _ = writeln!(out, " {} <= {name} <= {}", self.lower[i], self.upper[i]);
                }
                (true, false) => {
                    let _ = writeln!(out, " {name} >= {}", self.lower[i]);
                }
                (false, true) => {
                    let _ = writeln!(out, " -inf <= {name} <= {}", self.upper[i]);
                }
                (false, false) => {
                    let _ = writeln!(out, " {name} free");
                }
            }
        }
        out.push_str("End\n");
        out
    }
}

/// The full epigraph LP, with a delay variable for every (user, file) pair.
pub fn build_epigraph_lp(problem: &PerSlotProblem) -> LinearProgram {
    build_lp(problem, false, 0.0)
}

/// Relative weight of the tie-break toward the previous cache.
const KEEP_BIAS: f64 = 1e-6;

/// With `prune`, (user, file) pairs without predicted demand are left out;
/// they have zero objective weight and cannot change the optimum.
///
/// `keep_bias` adds `keep_bias * sum |lambda - prev|` to the objective, so
/// among (near) ties the solver keeps what is already cached instead of
/// dropping it for free. Since `|x| = 2 max(x, 0) - x`, this only shifts
/// the coefficients of the fractions and increase variables.
fn build_lp(problem: &PerSlotProblem, prune: bool, keep_bias: f64) -> LinearProgram {
    let n = problem.prev.n_nodes();
    let f = problem.n_files();
    let b = problem.prev.file_size;
    let mut lp = LinearProgram {
        kinds: Vec::new(),
        objective: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        rows: Vec::new(),
        row_counts: [0; 3],
    };
    for row in 0..n {
        for file in 0..f {
            lp.add_var(VarKind::Fraction { row, file }, -keep_bias, 0.0, 1.0);
        }
    }
    let lambda = |row: usize, file: usize| row * f + file;

    let demand = problem.effective_demand();
    for user in 0..problem.topology.n_users() {
        let pieces = delay_pieces(problem.topology, b, user);
        for file in 0..f {
            let weight = demand[user * f + file];
            if prune && weight <= 0.0 {
                continue;
            }
            let u = lp.add_var(
                VarKind::Delay { user, file },
                weight,
                f64::NEG_INFINITY,
                f64::INFINITY,
            );
            // D(lambda) <= u  <=>  sum a*lambda - u <= -c
            for (constant, terms) in &pieces {
                let mut coeffs: Vec<(usize, f64)> = terms
                    .iter()
                    .map(|&(node, a)| (lambda(node - 1, file), a))
                    .collect();
                coeffs.push((u, -1.0));
                lp.rows.push(LpRow {
                    coeffs,
                    rhs: -constant,
                });
                lp.row_counts[0] += 1;
            }
        }
    }
    for row in 0..n {
        for file in 0..f {
            let v = lp.add_var(
                VarKind::Increase { row, file },
                problem.beta + 2.0 * keep_bias,
                0.0,
                f64::INFINITY,
            );
            lp.rows.push(LpRow {
                coeffs: vec![(lambda(row, file), 1.0), (v, -1.0)],
                rhs: problem.prev.row(row)[file],
            });
            lp.row_counts[1] += 1;
        }
    }
    for row in 0..n {
        lp.rows.push(LpRow {
            coeffs: (0..f).map(|file| (lambda(row, file), 1.0)).collect(),
            rhs: problem.prev.capacity,
        });
        lp.row_counts[2] += 1;
    }
    lp
}

/// Solves `lp` with a dual-simplex backend. The objective is rescaled to
/// unit magnitude internally; the returned value is in original units.
pub fn solve_lp(lp: &LinearProgram) -> Result<(Vec<f64>, f64)> {
    let scale = lp.objective.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    // Delay variables are in seconds; rescale them to the largest constant
    // of their rows so all columns have comparable magnitude.
    let mut col_scale = vec![1.0; lp.n_vars()];
    for row in &lp.rows {
        if let Some(&(u, _)) = row
            .coeffs
            .iter()
            .find(|(v, _)| matches!(lp.kinds[*v], VarKind::Delay { .. }))
        {
            col_scale[u] = f64::max(col_scale[u], row.rhs.abs());
        }
    }
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = (0..lp.n_vars())
        .map(|i| {
            let s = col_scale[i];
            problem.add_var(
                lp.objective[i] * s / scale,
                (lp.lower[i] / s, lp.upper[i] / s),
            )
        })
        .collect();
    for row in &lp.rows {
        let s = row
            .coeffs
            .iter()
            .map(|&(v, c)| (c * col_scale[v]).abs())
            .fold(row.rhs.abs(), f64::max);
        let s = if s > 0.0 { s } else { 1.0 };
        let expr: Vec<_> = row
            .coeffs
            .iter()
            .map(|&(v, c)| (vars[v], c * col_scale[v] / s))
            .collect();
        problem.add_constraint(expr.as_slice(), ComparisonOp::Le, row.rhs / s);
    }
    let solution = problem
        .solve()
        .map_err(|e| Error::Solver(e.to_string()))?
        .into_solution()
        .map_err(|_| Error::Solver("interrupted".into()))?;
    let x: Vec<f64> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| solution[v] * col_scale[i])
        .collect();
    Ok((x, solution.objective() * scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    /// The solver failed; the previous cache was kept.
    Fallback(String),
}

/// An optimal (or fallback) placement with its exact objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementSolution {
    pub cache: CacheMatrix,
    pub objective: f64,
    pub status: SolveStatus,
}

/// Solves the per-slot problem. On solver failure the previous cache is
/// returned with a [`SolveStatus::Fallback`] status.
pub fn solve_per_slot(problem: &PerSlotProblem) -> PlacementSolution {
    match try_solve(problem) {
        Ok(s) => s,
        Err(e) => {
            warn!("per-slot LP failed, keeping the previous cache: {e}");
            let objective = problem.objective(&problem.prev).unwrap_or(f64::NAN);
            PlacementSolution {
                cache: problem.prev.clone(),
                objective,
                status: SolveStatus::Fallback(e.to_string()),
            }
        }
    }
}

fn try_solve(problem: &PerSlotProblem) -> Result<PlacementSolution> {
    // Scale the tie-break to the value of caching a whole file for the
    // heaviest (user, file) pair.
    let b = problem.prev.file_size;
    let slowest = problem
        .topology
        .per_bit_delay
        .iter()
        .map(|r| r[MBS])
        .fold(0.0, f64::max);
    let heaviest = problem
        .effective_demand()
        .iter()
        .fold(0.0f64, |m, &w| m.max(w));
    let bias = KEEP_BIAS * (heaviest * b * slowest + problem.beta).max(f64::MIN_POSITIVE);
    let lp = build_lp(problem, true, bias);
    let (x, _) = solve_lp(&lp)?;
    let n = problem.prev.n_nodes();
    let f = problem.n_files();
    let mut lambda: Vec<f64> = x[..n * f].iter().map(|v| v.clamp(0.0, 1.0)).collect();
    // Pull rows that the solver left marginally over capacity back inside.
    let capacity = problem.prev.capacity;
    for row in lambda.chunks_mut(f) {
        let sum: f64 = row.iter().sum();
        if sum > capacity {
            if sum > capacity + 1e-6 {
                return Err(Error::Solver(format!(
                    "row sum {sum} exceeds capacity {capacity}"
                )));
            }
            let shrink = (capacity - CAPACITY_EPS / 2.0).max(0.0) / sum;
            row.iter_mut().for_each(|v| *v *= shrink);
        }
    }
    let cache = problem.prev.with_values(lambda)?;
    let objective = problem.objective(&cache)?;
    Ok(PlacementSolution {
        cache,
        objective,
        status: SolveStatus::Optimal,
    })
}

/// Largest number of fractions [`brute_force_oracle`] will enumerate.
pub const ORACLE_MAX_VARS: usize = 6;

/// Exhaustive search over fractions on the grid `{0, step, ..., 1}` that
/// respect the capacity. A reference for [`solve_per_slot`] on tiny
/// instances.
pub fn brute_force_oracle(problem: &PerSlotProblem, step: f64) -> Result<PlacementSolution> {
    let n = problem.prev.n_nodes();
    let f = problem.n_files();
    if n * f > ORACLE_MAX_VARS {
        return Err(Error::Input(format!(
            "{} fractions exceed the oracle limit {ORACLE_MAX_VARS}",
            n * f
        )));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Parameter(format!("grid step {step} outside (0, 1]")));
    }
    let levels = (1.0 / step).round() as usize;
    let grid: Vec<f64> = (0..=levels).map(|i| (i as f64 * step).min(1.0)).collect();

    // The objective separates over files except for the shared row
    // capacity, so enumerate each file's column once and then search over
    // column combinations.
    let columns: Vec<Vec<f64>> = {
        let mut cols = vec![Vec::new()];
        for _ in 0..n {
            cols = cols
                .into_iter()
                .flat_map(|c: Vec<f64>| {
                    grid.iter().map(move |&g| {
                        let mut c = c.clone();
                        c.push(g);
                        c
                    })
                })
                .collect();
        }
        cols
    };
    let demand = problem.effective_demand();
    let column_costs: Vec<Vec<f64>> = (0..f)
        .map(|file| {
            columns
                .iter()
                .map(|col| {
                    let mut probe = CacheMatrix::zeros(n, f, f64::INFINITY, problem.prev.file_size);
                    for (row, &v) in col.iter().enumerate() {
                        probe.row_mut(row)[file] = v;
                    }
                    let delay: f64 = (0..problem.topology.n_users())
                        .map(|k| {
                            let d = demand[k * f + file];
                            if d > 0.0 {
                                d * file_delay(problem.topology, &probe, k, file)
                            } else {
                                0.0
                            }
                        })
                        .sum();
                    let replace: f64 = col
                        .iter()
                        .enumerate()
                        .map(|(row, &v)| (v - problem.prev.row(row)[file]).max(0.0))
                        .sum();
                    delay + problem.beta * replace
                })
                .collect()
        })
        .collect();

    // Columns cheapest first per file, and the cheapest completion of the
    // remaining files, so branches that cannot win are cut early.
    let orders: Vec<Vec<usize>> = column_costs
        .iter()
        .map(|costs| {
            let mut order: Vec<usize> = (0..costs.len()).collect();
            order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
            order
        })
        .collect();
    let mut rest = vec![0.0; f + 1];
    for file in (0..f).rev() {
        rest[file] = rest[file + 1] + column_costs[file][orders[file][0]];
    }

    struct Search<'s> {
        columns: &'s [Vec<f64>],
        costs: &'s [Vec<f64>],
        orders: &'s [Vec<usize>],
        rest: &'s [f64],
        capacity: f64,
        best: f64,
        best_pick: Vec<usize>,
        pick: Vec<usize>,
        used: Vec<f64>,
    }
    impl Search<'_> {
        fn go(&mut self, file: usize, cost: f64) {
            if file == self.costs.len() {
                if cost < self.best {
                    self.best = cost;
                    self.best_pick.clone_from(&self.pick);
                }
                return;
            }
            for &ci in &self.orders[file] {
                let here = cost + self.costs[file][ci];
                if here + self.rest[file + 1] >= self.best {
                    break;
                }
                let col = &self.columns[ci];
                if col
                    .iter()
                    .zip(&self.used)
                    .any(|(v, u)| u + v > self.capacity + CAPACITY_EPS)
                {
                    continue;
                }
                for (u, v) in self.used.iter_mut().zip(col) {
                    *u += v;
                }
                self.pick.push(ci);
                self.go(file + 1, here);
                self.pick.pop();
                for (u, v) in self.used.iter_mut().zip(col) {
                    *u -= v;
                }
            }
        }
    }
    let mut search = Search {
        columns: &columns,
        costs: &column_costs,
        orders: &orders,
        rest: &rest,
        capacity: problem.prev.capacity,
        best: f64::INFINITY,
        best_pick: Vec::new(),
        pick: Vec::with_capacity(f),
        used: vec![0.0; n],
    };
    search.go(0, 0.0);

    let mut cache = CacheMatrix::zeros(n, f, problem.prev.capacity, problem.prev.file_size);
    for (file, &ci) in search.best_pick.iter().enumerate() {
        for (row, &v) in columns[ci].iter().enumerate() {
            cache.row_mut(row)[file] = v;
        }
    }
    let objective = problem.objective(&cache)?;
    Ok(PlacementSolution {
        cache,
        objective,
        status: SolveStatus::Optimal,
    })
}

/// An upper bound on how much the objective can change when every
/// fraction moves by at most `step`.
pub fn grid_resolution(problem: &PerSlotProblem, step: f64) -> f64 {
    let n = problem.prev.n_nodes();
    let f = problem.n_files();
    let demand = problem.effective_demand();
    let mut lipschitz = vec![problem.beta; n * f];
    for user in 0..problem.topology.n_users() {
        let pieces = delay_pieces(problem.topology, problem.prev.file_size, user);
        for file in 0..f {
            let d = demand[user * f + file];
            for row in 0..n {
                let slope = pieces
                    .iter()
                    .flat_map(|(_, terms)| {
                        terms
                            .iter()
                            .filter(|(node, _)| *node == row + 1)
                            .map(|(_, a)| a.abs())
                    })
                    .fold(0.0, f64::max);
                lipschitz[row * f + file] += d * slope;
            }
        }
    }
    step * lipschitz.iter().sum::<f64>()
}
