//! Random convex QCQPs and a first-order oracle: accelerated projected
//! gradient, with Dykstra's alternating projections onto the intersection
//! of a box, halfspaces and axis-aligned ellipsoids.

use nalgebra::{DMatrix, DVector};
use powersat::optim::{brent_root, max_eigenvalue, QpProblem, QuadConstraint, SparseMatrix};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub struct Ellipsoid {
    pub weights: DVector<f64>,
    pub center: DVector<f64>,
    pub radius: f64,
}

pub struct Instance {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub halfspaces: Vec<(DVector<f64>, f64)>,
    pub ellipsoids: Vec<Ellipsoid>,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = rng.gen_range(2..=20);
        let q = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
        let eig = DVector::from_fn(n, |_, _| rng.gen_range(1.0..10.0));
        let h = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let h = (&h + h.transpose()) * 0.5;
        let f = DVector::from_fn(n, |_, _| rng.gen_range(-20.0..20.0));
        let lower = DVector::from_fn(n, |_, _| -rng.gen_range(0.5..3.0));
        let upper = DVector::from_fn(n, |_, _| rng.gen_range(0.5..3.0));
        let halfspaces = (0..rng.gen_range(0..3))
            .map(|_| {
                let a = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                (a, rng.gen_range(0.2..2.0))
            })
            .collect();
        let ellipsoids = (0..rng.gen_range(1..3))
            .map(|_| {
                let weights = DVector::from_fn(n, |_, _| rng.gen_range(0.5..4.0));
                let center = DVector::from_fn(n, |_, _| rng.gen_range(-0.3..0.3));
                let inner: f64 = weights
                    .iter()
                    .zip(center.iter())
                    .map(|(w, c)| w * c * c)
                    .sum();
                let radius = (inner + rng.gen_range(0.5..3.0)).sqrt();
                Ellipsoid { weights, center, radius }
            })
            .collect();
        Self { h, f, lower, upper, halfspaces, ellipsoids }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.h * y)) + self.f.dot(y)
    }

    pub fn to_problem(&self) -> QpProblem {
        let n = self.dim();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..n {
            rows.push(vec![(i, 1.0)]);
            rhs.push(self.upper[i]);
            rows.push(vec![(i, -1.0)]);
            rhs.push(-self.lower[i]);
        }
        for (a, b) in &self.halfspaces {
            rows.push(a.iter().copied().enumerate().collect());
            rhs.push(*b);
        }
        let trip: Vec<_> = rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, v)| (r, c, v)))
            .collect();
        let quad = self
            .ellipsoids
            .iter()
            .map(|e| {
                let diag: Vec<_> = (0..n).map(|i| (i, i, e.weights[i])).collect();
                let chi = (0..n).map(|i| (i, -2.0 * e.weights[i] * e.center[i])).collect();
                let inner: f64 = (0..n).map(|i| e.weights[i] * e.center[i].powi(2)).sum();
                QuadConstraint::new(SparseMatrix::from_triplets(n, n, &diag), chi, e.radius.powi(2) - inner)
            })
            .collect();
        QpProblem::new(SparseMatrix::from_dense(&self.h), self.f.clone())
            .with_inequalities(SparseMatrix::from_triplets(rows.len(), n, &trip), DVector::from_vec(rhs))
            .with_quadratic(quad)
    }

    fn project_box(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| z[i].clamp(self.lower[i], self.upper[i]))
    }

    fn project_ellipsoid(e: &Ellipsoid, z: &DVector<f64>) -> DVector<f64> {
        let value = |y: &DVector<f64>| -> f64 {
            (0..y.len()).map(|i| e.weights[i] * (y[i] - e.center[i]).powi(2)).sum()
        };
        if value(z) <= e.radius * e.radius {
            return z.clone();
        }
        // y(θ) = argmin ‖y - z‖² + θ (Σ wᵢ (yᵢ - cᵢ)² - r²)
        let at = |theta: f64| {
            DVector::from_fn(z.len(), |i, _| {
                (z[i] + theta * e.weights[i] * e.center[i]) / (1.0 + theta * e.weights[i])
            })
        };
        let mut hi = 1.0;
        while value(&at(hi)) > e.radius * e.radius {
            hi *= 2.0;
        }
        let theta = brent_root(|t| value(&at(t)) - e.radius * e.radius, 0.0, hi, 1e-16).unwrap();
        at(theta)
    }

    fn project_halfspace(a: &DVector<f64>, b: f64, z: &DVector<f64>) -> DVector<f64> {
        let excess = a.dot(z) - b;
        if excess <= 0.0 {
            z.clone()
        } else {
            z - a * (excess / a.norm_squared())
        }
    }

    /// Euclidean projection onto the feasible set (Dykstra).
    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut corr = Vec::new();
        self.project_warm(z, &mut corr)
    }

    /// Dykstra's method is block-coordinate ascent on the dual of the
    /// projection problem, with the correction vectors as dual blocks, so it
    /// may be restarted from the corrections of a nearby projection.
    fn project_warm(&self, z: &DVector<f64>, corr: &mut Vec<DVector<f64>>) -> DVector<f64> {
        let sets = 1 + self.halfspaces.len() + self.ellipsoids.len();
        let n = self.dim();
        if corr.len() != sets {
            *corr = vec![DVector::zeros(n); sets];
        }
        let mut x = z - corr.iter().fold(DVector::zeros(n), |acc, c| acc + c);
        for _ in 0..1_000_000 {
            let prev = x.clone();
            let mut moved = 0.0f64;
            for k in 0..sets {
                let shifted = &x + &corr[k];
                let p = if k == 0 {
                    self.project_box(&shifted)
                } else if k <= self.halfspaces.len() {
                    let (a, b) = &self.halfspaces[k - 1];
                    Self::project_halfspace(a, *b, &shifted)
                } else {
                    Self::project_ellipsoid(&self.ellipsoids[k - 1 - self.halfspaces.len()], &shifted)
                };
                let c = shifted - &p;
                moved = moved.max((&c - &corr[k]).amax());
                corr[k] = c;
                x = p;
            }
            if (&x - &prev).amax().max(moved) < 1e-15 {
                break;
            }
        }
        x
    }

    /// Accelerated projected gradient with restart, run to a 1e-12 step.
    pub fn oracle(&self) -> (DVector<f64>, f64) {
        let l = max_eigenvalue(&self.h).unwrap();
        let n = self.dim();
        let mut corr = Vec::new();
        let mut x = self.project_warm(&DVector::zeros(n), &mut corr);
        let mut v = x.clone();
        let mut t = 1.0f64;
        for _ in 0..20_000 {
            let grad = &self.h * &v + &self.f;
            let next = self.project_warm(&(&v - grad / l), &mut corr);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let step = (&next - &x).amax();
            if self.objective(&next) > self.objective(&x) {
                v = x.clone();
                t = 1.0;
                continue;
            }
            v = &next + (&next - &x) * ((t - 1.0) / t_next);
            x = next;
            t = t_next;
            if step < 1e-12 {
                break;
            }
        }
        let obj = self.objective(&x);
        (x, obj)
    }
}

/// Random problem with an indefinite quadratic constraint for which `0`
/// is strictly feasible, plus box bounds.
pub fn random_indefinite(seed: u64) -> QpProblem {
    let mut rng = StdRng::seed_from_u64(seed);
    let n = rng.gen_range(2..=12);
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = &g * g.transpose() + DMatrix::identity(n, n);
    let f = DVector::from_fn(n, |_, _| rng.gen_range(-10.0..10.0));
    let mut trip = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        trip.push((2 * i, i, 1.0));
        trip.push((2 * i + 1, i, -1.0));
        rhs.push(rng.gen_range(1.0..4.0));
        rhs.push(rng.gen_range(1.0..4.0));
    }
    let quad = (0..rng.gen_range(1..4))
        .map(|_| {
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let e = (&a + a.transpose()) * 0.5;
            let chi = (0..n).map(|i| (i, rng.gen_range(-1.0..1.0))).collect();
            QuadConstraint::new(SparseMatrix::from_dense(&e), chi, rng.gen_range(0.2..2.0))
        })
        .collect();
    QpProblem::new(SparseMatrix::from_dense(&h), f)
        .with_inequalities(SparseMatrix::from_triplets(2 * n, n, &trip), DVector::from_vec(rhs))
        .with_quadratic(quad)
}
