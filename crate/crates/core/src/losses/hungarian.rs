use crate::error::{Error, Result};

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`),
/// `cost` row-major. Returns the column chosen for each row.
///
/// Shortest augmenting paths with row/column potentials, O(rows² · cols).
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if rows > cols {
        return Err(Error::Capacity {
            gt: rows,
            queries: cols,
        });
    }
    if cost.len() != rows * cols {
        return Err(Error::Input(format!(
            "cost has {} entries for {rows}x{cols}",
            cost.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("non-finite matching cost".into()));
    }
    let inf = f64::INFINITY;
    // 1-based; column 0 is the virtual start
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_case() {
        // rows are GT, columns queries; query 1 sits on GT 0 and query 0 on GT 1
        let c = [5.0, 0.1, 0.2, 5.0];
        assert_eq!(hungarian(&c, 2, 2).unwrap(), vec![1, 0]);
        assert_eq!(hungarian(&[3.0], 1, 1).unwrap(), vec![0]);
    }

    #[test]
    fn capacity_error() {
        assert!(matches!(
            hungarian(&[0.0; 6], 3, 2),
            Err(Error::Capacity { gt: 3, queries: 2 })
        ));
    }
}
