//! Graph-Laplacian and temporal-smoothness regularizers, plus the power
//! iteration used for Lipschitz step sizes.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Weighted undirected graph over locations with its Laplacian L = Deg − W.
#[derive(Debug, Clone)]
pub struct LocationGraph {
    n: usize,
    edges: Vec<(usize, usize, f64)>,
    laplacian: Matrix,
}

impl LocationGraph {
    /// Graph with no edges; the Laplacian is zero so the regularizer is off.
    pub fn empty(n: usize) -> Self {
        LocationGraph {
            n,
            edges: Vec::new(),
            laplacian: Matrix::zeros(n, n),
        }
    }

    /// Builds from an undirected edge list; (u, v, w) and (v, u, w) are the
    /// same edge, duplicate pairs keep the last weight.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adj = Matrix::zeros(n, n);
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::arg(format!("edge ({u},{v}) out of range for n={n}")));
            }
            if u == v {
                return Err(Error::arg("self-loops are not allowed"));
            }
            if w < 0.0 || !w.is_finite() {
                return Err(Error::arg("edge weights must be finite and nonnegative"));
            }
            adj.set(u, v, w);
            adj.set(v, u, w);
        }
        Self::from_adjacency(&adj)
    }

    pub fn from_adjacency(adj: &Matrix) -> Result<Self> {
        let lap = laplacian(adj)?;
        let n = adj.rows();
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let w = adj.get(u, v);
                if w > 0.0 {
                    edges.push((u, v, w));
                }
            }
        }
        Ok(LocationGraph {
            n,
            edges,
            laplacian: lap,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn laplacian(&self) -> &Matrix {
        &self.laplacian
    }

    /// Loads the `u,v,weight` edge-list CSV, symmetrizing on load.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let pstr = path.display().to_string();
        let mut edges = Vec::new();
        let mut max_node = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if lineno == 0 && line.starts_with('u') {
                continue; // header
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Csv {
                    path: pstr,
                    line: lineno + 1,
                    msg: "expected u,v,weight".into(),
                });
            }
            let parse = |s: &str, what: &str| -> Result<usize> {
                s.trim().parse().map_err(|_| Error::Csv {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("bad {what}: {s}"),
                })
            };
            let u = parse(parts[0], "node")?;
            let v = parse(parts[1], "node")?;
            let w: f64 = parts[2].trim().parse().map_err(|_| Error::Csv {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad weight: {}", parts[2]),
            })?;
            max_node = max_node.max(u).max(v);
            edges.push((u, v, w));
        }
        Self::from_edges(max_node + 1, &edges)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("u,v,weight\n");
        for &(u, v, w) in &self.edges {
            out.push_str(&format!("{u},{v},{w}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// L = Deg − W for a symmetric nonnegative adjacency with zero diagonal.
pub fn laplacian(adj: &Matrix) -> Result<Matrix> {
    let n = adj.rows();
    if adj.cols() != n {
        return Err(Error::arg("adjacency must be square"));
    }
    for u in 0..n {
        if adj.get(u, u) != 0.0 {
            return Err(Error::arg("adjacency diagonal must be zero"));
        }
        for v in 0..n {
            let w = adj.get(u, v);
            if w < 0.0 || !w.is_finite() {
                return Err(Error::arg("adjacency weights must be finite and nonnegative"));
            }
            if (w - adj.get(v, u)).abs() > 0.0 {
                return Err(Error::arg("adjacency must be symmetric"));
            }
        }
    }
    let mut lap = Matrix::zeros(n, n);
    for u in 0..n {
        let mut deg = 0.0;
        for v in 0..n {
            let w = adj.get(u, v);
            deg += w;
            lap.set(u, v, -w);
        }
        lap.set(u, u, deg);
    }
    Ok(lap)
}

/// Graph regularizer ρ_A·tr(AᵀLA) and its gradient 2ρ_A·L·A.
pub fn graph_reg(a: &Matrix, lap: &Matrix, rho_a: f64) -> Result<(f64, Matrix)> {
    if lap.rows() != a.rows() || lap.cols() != a.rows() {
        return Err(Error::arg("laplacian dims do not match factor rows"));
    }
    let la = lap.matmul(a)?;
    let mut value = 0.0;
    for r in 0..a.rows() {
        for (x, y) in a.row(r).iter().zip(la.row(r).iter()) {
            value += x * y;
        }
    }
    let mut grad = la;
    grad.scale(2.0 * rho_a);
    Ok((rho_a * value, grad))
}

/// Second-difference operator Γ: square Toeplitz with principal diagonals
/// (−1, 2, −1) and zeros elsewhere (boundary rows truncated).
#[derive(Debug, Clone)]
pub struct SmoothnessOperator {
    n: usize,
    gamma: Matrix,
    gamma_gram: Matrix,
}

impl SmoothnessOperator {
    pub fn new(n: usize) -> Self {
        let gamma = Matrix::from_fn(n, n, |r, c| {
            if r == c {
                2.0
            } else if r.abs_diff(c) == 1 {
                -1.0
            } else {
                0.0
            }
        });
        let gamma_gram = gamma.transpose().matmul(&gamma).expect("square");
        SmoothnessOperator {
            n,
            gamma,
            gamma_gram,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn gamma(&self) -> &Matrix {
        &self.gamma
    }

    /// ΓᵀΓ, precomputed.
    pub fn gram(&self) -> &Matrix {
        &self.gamma_gram
    }
}

/// Smoothness regularizer ρ‖ΓM‖²_F and its gradient 2ρ·ΓᵀΓ·M.
pub fn smooth_reg(m: &Matrix, op: &SmoothnessOperator, rho: f64) -> Result<(f64, Matrix)> {
    if op.len() != m.rows() {
        return Err(Error::arg("smoothness operator size does not match factor rows"));
    }
    let gm = op.gamma().matmul(m)?;
    let value = rho * gm.frob_norm().powi(2);
    let mut grad = op.gram().matmul(m)?;
    grad.scale(2.0 * rho);
    Ok((value, grad))
}

const POWER_MAX_ITERS: usize = 200_000;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
/// deterministic all-ones start, re-randomized from a fixed seed on
/// stagnation. Relative tolerance `tol` on the Rayleigh quotient.
pub fn largest_eig(msym: &Matrix, tol: f64) -> Result<f64> {
    let n = msym.rows();
    if msym.cols() != n {
        return Err(Error::arg("largest_eig needs a square matrix"));
    }
    if !msym.is_finite() {
        return Err(Error::arg("largest_eig needs finite entries"));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = f64::NAN;
    let mut restarted = false;
    let mut w = vec![0.0; n];
    for iter in 0..POWER_MAX_ITERS {
        for (r, wr) in w.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, &vc) in v.iter().enumerate() {
                acc += msym.get(r, c) * vc;
            }
            *wr = acc;
        }
        let rayleigh: f64 = v.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= f64::MIN_POSITIVE || (iter > 50 && rayleigh.abs() <= 1e-300) {
            if restarted {
                return Ok(0.0);
            }
            // start vector may be orthogonal to the dominant eigenvector
            let mut rng = ChaCha8Rng::seed_from_u64(0xE16);
            for x in &mut v {
                *x = rng.gen::<f64>() - 0.5;
            }
            let vn: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= vn;
            }
            restarted = true;
            continue;
        }
        for (x, &y) in v.iter_mut().zip(w.iter()) {
            *x = y / norm;
        }
        if !lambda.is_nan() && (rayleigh - lambda).abs() <= tol * rayleigh.abs().max(1e-300) {
            return Ok(rayleigh);
        }
        lambda = rayleigh;
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cyclic Jacobi eigensolver, test-only oracle for symmetric matrices.
    fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.rows();
        let mut a: Vec<Vec<f64>> = (0..n).map(|r| m.row(r).to_vec()).collect();
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p][q] * a[p][q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let aip = a[i][p];
                        let aiq = a[i][q];
                        a[i][p] = c * aip - s * aiq;
                        a[i][q] = s * aip + c * aiq;
                    }
                    for i in 0..n {
                        let api = a[p][i];
                        let aqi = a[q][i];
                        a[p][i] = c * api - s * aqi;
                        a[q][i] = s * api + c * aqi;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    #[test]
    fn laplacian_empty_graph() {
        let adj = Matrix::zeros(3, 3);
        let lap = laplacian(&adj).unwrap();
        assert!(lap.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_single_edge() {
        let mut adj = Matrix::zeros(2, 2);
        adj.set(0, 1, 1.0);
        adj.set(1, 0, 1.0);
        let lap = laplacian(&adj).unwrap();
        assert_eq!(lap.values(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn laplacian_quadratic_form_matches_edgewise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let n = 6;
        let mut adj = Matrix::zeros(n, n);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.gen::<f64>() < 0.5 {
                    let w = rng.gen::<f64>();
                    adj.set(u, v, w);
                    adj.set(v, u, w);
                    edges.push((u, v, w));
                }
            }
        }
        let lap = laplacian(&adj).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut quad = 0.0;
        for r in 0..n {
            for c in 0..n {
                quad += x[r] * lap.get(r, c) * x[c];
            }
        }
        let oracle: f64 = edges
            .iter()
            .map(|&(u, v, w)| w * (x[u] - x[v]) * (x[u] - x[v]))
            .sum();
        assert!((quad - oracle).abs() <= 1e-12 * oracle.max(1.0));
        // row sums zero
        for r in 0..n {
            let sum: f64 = (0..n).map(|c| lap.get(r, c)).sum();
            assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_rejects_bad_input() {
        let mut asym = Matrix::zeros(2, 2);
        asym.set(0, 1, 1.0);
        assert!(laplacian(&asym).is_err());
        let mut neg = Matrix::zeros(2, 2);
        neg.set(0, 1, -1.0);
        neg.set(1, 0, -1.0);
        assert!(laplacian(&neg).is_err());
    }

    #[test]
    fn graph_reg_zero_laplacian() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let lap = Matrix::zeros(2, 2);
        let (v, g) = graph_reg(&a, &lap, 0.5).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn graph_reg_annihilates_constant_rows() {
        let g = LocationGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 2.0), (0, 2, 0.5)]).unwrap();
        let a = Matrix::from_fn(3, 2, |_, c| (c + 1) as f64);
        let (v, _) = graph_reg(&a, g.laplacian(), 1.0).unwrap();
        assert!(v.abs() < 1e-12);
    }

    fn fd_check(value_of: impl Fn(&Matrix) -> f64, at: &Matrix, grad: &Matrix) {
        let h = 1e-5;
        for r in 0..at.rows() {
            for c in 0..at.cols() {
                let mut plus = at.clone();
                plus.set(r, c, at.get(r, c) + h);
                let mut minus = at.clone();
                minus.set(r, c, at.get(r, c) - h);
                let fd = (value_of(&plus) - value_of(&minus)) / (2.0 * h);
                let g = grad.get(r, c);
                let denom = fd.abs().max(g.abs()).max(1e-8);
                assert!(
                    (fd - g).abs() / denom <= 1e-6,
                    "fd {fd} vs grad {g} at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn graph_reg_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g =
            LocationGraph::from_edges(4, &[(0, 1, 0.7), (1, 2, 1.3), (2, 3, 0.4), (0, 3, 1.0)])
                .unwrap();
        let a = Matrix::random_uniform(4, 3, &mut rng);
        let rho = 0.37;
        let (_, grad) = graph_reg(&a, g.laplacian(), rho).unwrap();
        fd_check(
            |m| graph_reg(m, g.laplacian(), rho).unwrap().0,
            &a,
            &grad,
        );
    }

    #[test]
    fn smoothness_operator_shape() {
        let op = SmoothnessOperator::new(4);
        let g = op.gamma();
        assert_eq!(g.row(0), &[2.0, -1.0, 0.0, 0.0]);
        assert_eq!(g.row(1), &[-1.0, 2.0, -1.0, 0.0]);
        assert_eq!(g.row(3), &[0.0, 0.0, -1.0, 2.0]);
    }

    #[test]
    fn smooth_reg_constant_columns_boundary_only() {
        let op = SmoothnessOperator::new(5);
        let m = Matrix::from_fn(5, 2, |_, c| (c + 1) as f64);
        let gm = op.gamma().matmul(&m).unwrap();
        for r in 1..4 {
            assert!(gm.row(r).iter().all(|&v| v.abs() < 1e-12));
        }
        assert!(gm.row(0).iter().any(|&v| v.abs() > 0.5));
        assert!(gm.row(4).iter().any(|&v| v.abs() > 0.5));
    }

    #[test]
    fn smooth_reg_zero_rho() {
        let op = SmoothnessOperator::new(3);
        let m = Matrix::from_fn(3, 2, |r, c| (r + c) as f64);
        let (v, g) = smooth_reg(&m, &op, 0.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn smooth_reg_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let op = SmoothnessOperator::new(6);
        let m = Matrix::random_uniform(6, 2, &mut rng);
        let rho = 0.81;
        let (_, grad) = smooth_reg(&m, &op, rho).unwrap();
        fd_check(|x| smooth_reg(x, &op, rho).unwrap().0, &m, &grad);
    }

    #[test]
    fn largest_eig_identity_and_diag() {
        assert!((largest_eig(&Matrix::identity(4), 1e-8).unwrap() - 1.0).abs() < 1e-6);
        let d = Matrix::from_fn(3, 3, |r, c| {
            if r == c {
                [1.0, 2.0, 5.0][r]
            } else {
                0.0
            }
        });
        assert!((largest_eig(&d, 1e-8).unwrap() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn largest_eig_zero_matrix() {
        assert_eq!(largest_eig(&Matrix::zeros(3, 3), 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn largest_eig_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let b = Matrix::random_uniform(20, 20, &mut rng);
        let psd = b.transpose().matmul(&b).unwrap();
        let lam = largest_eig(&psd, 1e-9).unwrap();
        let evs = jacobi_eigenvalues(&psd);
        let max = evs.iter().cloned().fold(f64::MIN, f64::max);
        assert!((lam - max).abs() / max <= 1e-6, "power {lam} vs jacobi {max}");
    }

    #[test]
    fn largest_eig_rejects_nonfinite() {
        let mut m = Matrix::zeros(2, 2);
        m.values_mut()[0] = f64::NAN;
        assert!(largest_eig(&m, 1e-6).is_err());
    }

    #[test]
    fn graph_csv_roundtrip() {
        let g = LocationGraph::from_edges(4, &[(0, 1, 1.5), (2, 3, 0.25)]).unwrap();
        let dir = std::env::temp_dir().join("mvtc_graph_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.csv");
        g.write_csv(&path).unwrap();
        let g2 = LocationGraph::read_csv(&path).unwrap();
        assert_eq!(g.edges(), g2.edges());
        assert!(g.laplacian().frob_dist(g2.laplacian()) < 1e-15);
    }
}
