//! Exact balanced transportation problem via the transportation simplex
//! (northwest-corner start, MODI potentials, stepping-stone pivots).

use std::collections::VecDeque;

use super::MetricError;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub cost: f64,
    /// basic cells `(row, col, flow)`; flows may be zero under degeneracy
    pub flows: Vec<(usize, usize, f64)>,
    pub pivots: usize,
}

struct Basis {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
}

impl Basis {
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        // nodes: rows 0..m, cols m..m+n; edge payload is the cell slot
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, cost: &[Vec<f64>], adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut pot = vec![f64::NAN; self.m + self.n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(a) = queue.pop_front() {
            for &(b, k) in &adj[a] {
                if pot[b].is_nan() {
                    let (i, j) = self.cells[k];
                    // u_i + v_j = c_ij
                    pot[b] = cost[i][j] - pot[a];
                    queue.push_back(b);
                }
            }
        }
        (pot[..self.m].to_vec(), pot[self.m..].to_vec())
    }

    /// Basis slots on the tree path from column node `j` to row node `i`.
    fn path(&self, adj: &[Vec<(usize, usize)>], i: usize, j: usize) -> Vec<usize> {
        let start = self.m + j;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(a) = queue.pop_front() {
            if a == i {
                break;
            }
            for &(b, k) in &adj[a] {
                if !seen[b] {
                    seen[b] = true;
                    parent[b] = Some((a, k));
                    queue.push_back(b);
                }
            }
        }
        let mut slots = Vec::new();
        let mut at = i;
        while let Some((p, k)) = parent[at] {
            slots.push(k);
            at = p;
        }
        slots.reverse();
        slots
    }
}

fn northwest(supply: &[f64], demand: &[f64]) -> Basis {
    let (m, n) = (supply.len(), demand.len());
    let mut s = supply.to_vec();
    let mut d = demand.to_vec();
    let (mut i, mut j) = (0, 0);
    let mut cells = Vec::with_capacity(m + n - 1);
    let mut flow = Vec::with_capacity(m + n - 1);
    loop {
        let x = s[i].min(d[j]).max(0.0);
        cells.push((i, j));
        flow.push(x);
        s[i] -= x;
        d[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 || (j < n - 1 && s[i] > d[j]) {
            j += 1;
        } else {
            i += 1;
        }
    }
    Basis { m, n, cells, flow }
}

/// Solves `min Σ c_ij x_ij` subject to row sums = `supply`, column sums =
/// `demand`, `x ≥ 0`. Totals must agree to within 1e-9 (relative); demand is
/// rescaled onto the supply total to absorb rounding.
pub fn solve_transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Result<TransportPlan, MetricError> {
    let (m, n) = (supply.len(), demand.len());
    if m == 0 || n == 0 {
        return Err(MetricError::Infeasible("empty marginal".into()));
    }
    if cost.len() != m || cost.iter().any(|r| r.len() != n) {
        return Err(MetricError::Infeasible(format!("cost matrix is not {m}x{n}")));
    }
    if supply.iter().chain(demand).any(|&w| !w.is_finite() || w < 0.0) {
        return Err(MetricError::Infeasible("marginals must be finite and non-negative".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(MetricError::Infeasible("non-finite cost".into()));
    }
    let (ts, td): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
    if (ts - td).abs() > 1e-9 * ts.max(td).max(1.0) {
        return Err(MetricError::Infeasible(format!("unbalanced marginals: {ts} vs {td}")));
    }
    let demand: Vec<f64> = if td > 0.0 { demand.iter().map(|d| d * ts / td).collect() } else { demand.to_vec() };

    let mut basis = northwest(supply, &demand);
    let mut pivots = 0usize;
    // Dantzig pricing until this many pivots, then Bland's rule, which cannot cycle
    let dantzig_limit = 50 * (m + n) * (m + n);
    loop {
        let adj = basis.adjacency();
        let (u, v) = basis.potentials(cost, &adj);
        let mut in_basis = vec![false; m * n];
        for &(i, j) in &basis.cells {
            in_basis[i * n + j] = true;
        }
        let tol = 1e-11 * cost.iter().flatten().fold(1.0f64, |a, c| a.max(c.abs()));
        let mut entering: Option<(usize, usize, f64)> = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if in_basis[i * n + j] {
                    continue;
                }
                let r = cost[i][j] - u[i] - v[j];
                if r < -tol {
                    if pivots >= dantzig_limit {
                        entering = Some((i, j, r));
                        break 'scan;
                    }
                    if entering.is_none_or(|(_, _, best)| r < best) {
                        entering = Some((i, j, r));
                    }
                }
            }
        }
        let Some((ei, ej, _)) = entering else { break };

        // cycle: entering (+), then alternately − / + along the tree path
        let path = basis.path(&adj, ei, ej);
        let minus: Vec<usize> = path.iter().copied().step_by(2).collect();
        let leave = *minus
            .iter()
            .min_by(|&&a, &&b| {
                basis.flow[a].total_cmp(&basis.flow[b]).then_with(|| basis.cells[a].cmp(&basis.cells[b]))
            })
            .expect("cycle has a decreasing cell");
        let theta = basis.flow[leave];
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis.flow[k] = (basis.flow[k] - theta).max(0.0);
            } else {
                basis.flow[k] += theta;
            }
        }
        basis.cells[leave] = (ei, ej);
        basis.flow[leave] = theta;
        pivots += 1;
    }

    let cost_value = basis.cells.iter().zip(&basis.flow).map(|(&(i, j), &x)| x * cost[i][j]).sum::<f64>();
    let flows = basis
        .cells
        .iter()
        .zip(&basis.flow)
        .map(|(&(i, j), &x)| (i, j, if x.abs() < EPS { 0.0 } else { x }))
        .collect();
    Ok(TransportPlan { cost: cost_value, flows, pivots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mass() {
        let p = solve_transport(&[1.0], &[1.0], &[vec![5.0]]).unwrap();
        assert_eq!(p.cost, 5.0);
    }

    #[test]
    fn textbook_instance() {
        let supply = [19.0, 37.0, 34.0];
        let demand = [16.0, 18.0, 31.0, 25.0];
        let cost = vec![vec![3.0, 6.0, 8.0, 4.0], vec![6.0, 1.0, 2.0, 5.0], vec![7.0, 8.0, 3.0, 9.0]];
        let p = solve_transport(&supply, &demand, &cost).unwrap();
        let mut rows = [0.0; 3];
        let mut cols = [0.0; 4];
        for &(i, j, x) in &p.flows {
            assert!(x >= 0.0);
            rows[i] += x;
            cols[j] += x;
        }
        for (a, b) in rows.iter().zip(&supply) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in cols.iter().zip(&demand) {
            assert!((a - b).abs() < 1e-9);
        }
        // any hand-built feasible plan bounds the optimum from above
        let feasible = 16.0 * 3.0 + 3.0 * 4.0 + 18.0 * 1.0 + 19.0 * 5.0 + 31.0 * 3.0 + 3.0 * 9.0;
        assert!(p.cost <= feasible + 1e-9);
        assert_eq!(p.flows.len(), 3 + 4 - 1);
    }

    #[test]
    fn degenerate_marginals() {
        // equal partial sums force zero-flow basic cells
        let p = solve_transport(&[0.5, 0.5], &[0.5, 0.5], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(p.cost.abs() < 1e-12);
    }

    #[test]
    fn rejects_unbalanced() {
        assert!(solve_transport(&[1.0], &[2.0], &[vec![1.0]]).is_err());
        assert!(solve_transport(&[1.0], &[1.0], &[vec![1.0, 2.0]]).is_err());
    }
}
