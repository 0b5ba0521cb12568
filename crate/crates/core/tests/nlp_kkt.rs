use oedopf::linalg::Matrix;
use oedopf::nlp::{solve, NlpOptions, NlpProblem, NlpStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `min ½zᵀHz + gᵀz  s.t.  Az = b, Cz ≤ d`.
#[derive(Clone)]
struct Qp {
    h: Matrix<f64>,
    g: Vec<f64>,
    a: Matrix<f64>,
    b: Vec<f64>,
    c: Matrix<f64>,
    d: Vec<f64>,
}

impl Qp {
    fn value(&self, z: &[f64]) -> f64 {
        let hz = self.h.matvec(z);
        0.5 * dot(z, &hz) + dot(&self.g, z)
    }

    fn permuted(&self, eq: &[usize], ineq: &[usize]) -> Self {
        let rows = |m: &Matrix<f64>, order: &[usize]| {
            Matrix::from_fn(order.len(), m.cols(), |i, j| m[(order[i], j)])
        };
        Qp {
            h: self.h.clone(),
            g: self.g.clone(),
            a: rows(&self.a, eq),
            b: eq.iter().map(|&i| self.b[i]).collect(),
            c: rows(&self.c, ineq),
            d: ineq.iter().map(|&i| self.d[i]).collect(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl NlpProblem for Qp {
    fn dimension(&self) -> usize {
        self.g.len()
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.g.len()]
    }

    fn objective(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let hz = self.h.matvec(z);
        let grad = hz.iter().zip(&self.g).map(|(a, b)| a + b).collect();
        (0.5 * dot(z, &hz) + dot(&self.g, z), grad)
    }

    fn n_equalities(&self) -> usize {
        self.b.len()
    }

    fn equalities(&self, z: &[f64]) -> (Vec<f64>, Matrix<f64>) {
        let az = self.a.matvec(z);
        (az.iter().zip(&self.b).map(|(a, b)| a - b).collect(), self.a.clone())
    }

    fn n_inequalities(&self) -> usize {
        self.d.len()
    }

    fn inequalities(&self, z: &[f64]) -> (Vec<f64>, Matrix<f64>) {
        let cz = self.c.matvec(z);
        (cz.iter().zip(&self.d).map(|(a, b)| a - b).collect(), self.c.clone())
    }
}

/// Solves the KKT system with the equalities plus the constraint rows in `active`.
fn kkt_solve(qp: &Qp, active: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = qp.g.len();
    let me = qp.b.len();
    let m = me + active.len();
    let row = |r: usize, j: usize| if r < me { qp.a[(r, j)] } else { qp.c[(active[r - me], j)] };
    let k = Matrix::from_fn(n + m, n + m, |i, j| match (i < n, j < n) {
        (true, true) => qp.h[(i, j)],
        (true, false) => row(j - n, i),
        (false, true) => row(i - n, j),
        (false, false) => 0.0,
    });
    let mut rhs: Vec<f64> = qp.g.iter().map(|v| -v).collect();
    rhs.extend(qp.b.iter().copied());
    rhs.extend(active.iter().map(|&i| qp.d[i]));
    let sol = k.lu()?.solve(&rhs);
    Some((sol[..n].to_vec(), sol[n + me..].to_vec()))
}

/// Active-set enumeration: the unique KKT point of the convex problem.
fn oracle(qp: &Qp) -> Vec<f64> {
    let mi = qp.d.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0..(1usize << mi) {
        let active: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
        let Some((z, nu)) = kkt_solve(qp, &active) else { continue };
        let cz = qp.c.matvec(&z);
        let primal = cz.iter().zip(&qp.d).all(|(a, b)| a - b <= 1e-10);
        let dual = nu.iter().all(|&v| v >= -1e-10);
        if primal && dual {
            let f = qp.value(&z);
            if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                best = Some((f, z));
            }
        }
    }
    best.expect("convex QP has a KKT point").1
}

fn random_qp(rng: &mut impl Rng, n: usize, me: usize, mi: usize) -> Qp {
    let bm = Matrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = bm.transpose().matmul(&bm).add(&Matrix::identity(n).scale(0.5));
    let g = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    // Constraints built around a point that satisfies the inequalities strictly.
    let feasible: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let a = Matrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
    let b = a.matvec(&feasible);
    let c = Matrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
    let d = c.matvec(&feasible).iter().map(|v| v + rng.random_range(0.05..0.5)).collect();
    Qp { h, g, a, b, c, d }
}

fn violation(qp: &Qp, z: &[f64]) -> f64 {
    let (c, _) = qp.equalities(z);
    let (h, _) = qp.inequalities(z);
    c.iter().map(|v| v.abs()).chain(h.iter().map(|v| v.max(0.0))).fold(0.0, f64::max)
}

#[test]
fn equality_constrained_qps_match_dense_kkt_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..60 {
        let n = rng.random_range(2..=20);
        let me = rng.random_range(0..=n / 2);
        let qp = random_qp(&mut rng, n, me, 0);
        let (expected, _) = kkt_solve(&qp, &[]).unwrap();
        let sol = solve(&qp, &NlpOptions::default()).unwrap();
        assert_eq!(sol.status, NlpStatus::Optimal);
        let dz = sol.z.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dz <= 1e-6, "n = {n}, me = {me}: solution off by {dz}");
        let gap = (sol.objective_value - qp.value(&expected)).abs();
        assert!(gap <= 1e-8, "objective gap {gap:e}, kkt {:e}, violation {:e}", sol.kkt_residual, sol.constraint_violation);
        assert!(violation(&qp, &sol.z) <= 1e-6);
    }
}

#[test]
fn inequality_qps_match_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..60 {
        let n = rng.random_range(2..=12);
        let me = rng.random_range(0..=n / 3);
        let mi = rng.random_range(1..=4);
        let qp = random_qp(&mut rng, n, me, mi);
        let expected = oracle(&qp);
        let sol = solve(&qp, &NlpOptions::default()).unwrap();
        assert_eq!(sol.status, NlpStatus::Optimal);
        let dz = sol.z.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dz <= 1e-6, "n = {n}: solution off by {dz}");
        let gap = (sol.objective_value - qp.value(&expected)).abs();
        assert!(gap <= 1e-8, "objective gap {gap:e}, kkt {:e}, violation {:e}", sol.kkt_residual, sol.constraint_violation);
        assert!(violation(&qp, &sol.z) <= 1e-6);
    }
}

#[test]
fn constraint_row_order_does_not_change_the_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let qp = random_qp(&mut rng, 8, 3, 3);
        let base = solve(&qp, &NlpOptions::default()).unwrap();
        let permuted = qp.permuted(&[2, 0, 1], &[1, 2, 0]);
        let other = solve(&permuted, &NlpOptions::default()).unwrap();
        let dz = base.z.iter().zip(&other.z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dz <= 1e-7);
    }
}
