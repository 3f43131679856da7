//! Dense two-phase simplex with Bland's rule, used as a transport oracle.

const EPS: f64 = 1e-12;

/// Minimises `c.x` subject to `A x = b`, `x >= 0` (`b >= 0`). Returns the
/// optimal value, or `None` when infeasible.
pub fn simplex_min(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Option<f64> {
    let m = a.len();
    let n = c.len();
    // Tableau columns: n originals, m artificials, rhs.
    let width = n + m + 1;
    let mut t: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut row = vec![0.0; width];
            row[..n].copy_from_slice(&a[i]);
            row[n + i] = 1.0;
            row[width - 1] = b[i];
            row
        })
        .collect();
    let mut basis: Vec<usize> = (n..n + m).collect();

    // Phase one: minimise the sum of artificials.
    let mut phase1 = vec![0.0; n + m];
    phase1[n..].iter_mut().for_each(|v| *v = 1.0);
    run(&mut t, &mut basis, &phase1, n + m);
    let infeasibility: f64 = basis.iter().zip(&t).filter(|(&j, _)| j >= n).map(|(_, r)| r[width - 1]).sum();
    if infeasibility > 1e-9 {
        return None;
    }
    // Drive zero-level artificials out of the basis where possible.
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| t[i][j].abs() > EPS) {
                pivot(&mut t, &mut basis, i, j);
            }
        }
    }
    // Phase two over original columns only.
    let mut cost = c.to_vec();
    cost.extend(std::iter::repeat(0.0).take(m));
    run(&mut t, &mut basis, &cost, n);
    Some(basis.iter().zip(&t).map(|(&j, r)| cost[j] * r[width - 1]).sum())
}

fn pivot(t: &mut [Vec<f64>], basis: &mut [usize], r: usize, col: usize) {
    let p = t[r][col];
    t[r].iter_mut().for_each(|v| *v /= p);
    let pivot_row = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i != r {
            let f = row[col];
            if f != 0.0 {
                row.iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    basis[r] = col;
}

/// Bland's rule iterations; only columns `< allowed` may enter.
fn run(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], allowed: usize) {
    let width = t[0].len();
    loop {
        let reduced = |j: usize, t: &[Vec<f64>]| cost[j] - basis.iter().zip(t).map(|(&b, r)| cost[b] * r[j]).sum::<f64>();
        let Some(enter) = (0..allowed).find(|&j| !basis.contains(&j) && reduced(j, t) < -1e-10) else {
            return;
        };
        let mut leave: Option<(usize, f64)> = None;
        for (i, row) in t.iter().enumerate() {
            if row[enter] > EPS {
                let ratio = row[width - 1] / row[enter];
                let better = match leave {
                    None => true,
                    Some((l, best)) => ratio < best - 1e-15 || (ratio <= best + 1e-15 && basis[i] < basis[l]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let (r, _) = leave.expect("transport problems are bounded");
        pivot(t, basis, r, enter);
    }
}

/// Optimal transport cost between two histograms as an explicit LP.
pub fn transport_lp(a: &[f64], b: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let (n, m) = (a.len(), b.len());
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        let mut r = vec![0.0; n * m];
        (0..m).for_each(|j| r[i * m + j] = 1.0);
        rows.push(r);
        rhs.push(a[i]);
    }
    // The last column constraint is implied by the others.
    for j in 0..m - 1 {
        let mut r = vec![0.0; n * m];
        (0..n).for_each(|i| r[i * m + j] = 1.0);
        rows.push(r);
        rhs.push(b[j]);
    }
    let c: Vec<f64> = (0..n * m).map(|k| cost(k / m, k % m)).collect();
    simplex_min(&rows, &rhs, &c).expect("balanced transport is feasible")
}
