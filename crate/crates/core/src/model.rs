//! Plant descriptions: linear mechanical systems, Euler-Lagrange manipulators,
//! the two benchmark systems and the power budget shared by the controllers.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Joint positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl State {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>) -> Result<Self> {
        if q.len() != qdot.len() {
            return Err(Error::Dimension(format!(
                "q has {} entries but qdot has {}",
                q.len(),
                qdot.len()
            )));
        }
        Ok(Self { q, qdot })
    }

    pub fn zeros(dof: usize) -> Self {
        Self {
            q: DVector::zeros(dof),
            qdot: DVector::zeros(dof),
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    /// Stacked `[q; q̇]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.dof();
        DVector::from_fn(2 * n, |i, _| if i < n { self.q[i] } else { self.qdot[i - n] })
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        let n = x.len() / 2;
        Self {
            q: x.rows(0, n).into_owned(),
            qdot: x.rows(n, n).into_owned(),
        }
    }
}

/// Per-joint and aggregate electrical power limits.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerBudget {
    /// P̄ᵢ in W.
    pub per_joint_limit: DVector<f64>,
    /// R̄ᵢ = Rᵢ/k_tᵢ² in Ω·A²/(N·m)².
    pub normalized_resistance: DVector<f64>,
    /// v̄ᵢ in rad/s.
    pub no_load_speed: DVector<f64>,
    /// P_max in W.
    pub aggregate_limit: f64,
}

impl PowerBudget {
    pub fn new(
        per_joint_limit: DVector<f64>,
        normalized_resistance: DVector<f64>,
        no_load_speed: DVector<f64>,
        aggregate_limit: f64,
    ) -> Result<Self> {
        let b = Self {
            per_joint_limit,
            normalized_resistance,
            no_load_speed,
            aggregate_limit,
        };
        b.validate()?;
        Ok(b)
    }

    /// Static allocation `P̄ᵢ = P_max / n` with equal resistance and no-load speed.
    pub fn uniform(n: usize, aggregate_limit: f64, rbar: f64, vbar: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(n, aggregate_limit / n as f64),
            DVector::from_element(n, rbar),
            DVector::from_element(n, vbar),
            aggregate_limit,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.per_joint_limit.len();
        if self.normalized_resistance.len() != n || self.no_load_speed.len() != n {
            return Err(Error::Dimension("power budget vectors differ in length".into()));
        }
        let entries = self
            .per_joint_limit
            .iter()
            .chain(self.normalized_resistance.iter())
            .chain(self.no_load_speed.iter())
            .chain(std::iter::once(&self.aggregate_limit));
        for &v in entries {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "power budget entries must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.per_joint_limit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_joint_limit.is_empty()
    }

    /// True when the per-joint limits sum to the aggregate limit.
    pub fn is_static_allocation(&self, tol: f64) -> bool {
        (self.per_joint_limit.sum() - self.aggregate_limit).abs() <= tol * (1.0 + self.aggregate_limit)
    }

    pub fn joint(&self, i: usize) -> crate::powerlim::JointLimit {
        crate::powerlim::JointLimit {
            pbar: self.per_joint_limit[i],
            rbar: self.normalized_resistance[i],
            vbar: self.no_load_speed[i],
        }
    }
}

fn check_symmetric(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!("{name} must be {n}x{n}")));
    }
    if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
        return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
    }
    Ok(())
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// `M q̈ + D q̇ + K q + G = S u` with `q = [q_u; q_a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    pub mass: DMatrix<f64>,
    pub damping: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub actuator_selection: DMatrix<f64>,
    pub gravity_offset: DVector<f64>,
    pub n_u: usize,
    pub n_a: usize,
}

impl LinearPlant {
    /// Builds and validates a plant; `S` is formed as `[0; I]` from the counts.
    pub fn new(
        mass: DMatrix<f64>,
        damping: DMatrix<f64>,
        stiffness: DMatrix<f64>,
        gravity_offset: DVector<f64>,
        n_u: usize,
        n_a: usize,
    ) -> Result<Self> {
        let n = n_u + n_a;
        let mut s = DMatrix::zeros(n, n_a);
        for i in 0..n_a {
            s[(n_u + i, i)] = 1.0;
        }
        let plant = Self {
            mass,
            damping,
            stiffness,
            actuator_selection: s,
            gravity_offset,
            n_u,
            n_a,
        };
        plant.validate()?;
        Ok(plant)
    }

    pub fn dof(&self) -> usize {
        self.n_u + self.n_a
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        check_symmetric("mass", &self.mass, n)?;
        check_symmetric("damping", &self.damping, n)?;
        check_symmetric("stiffness", &self.stiffness, n)?;
        if self.gravity_offset.len() != n {
            return Err(Error::Dimension("gravity offset length".into()));
        }
        if self.actuator_selection.shape() != (n, self.n_a) {
            return Err(Error::Dimension("actuator selection shape".into()));
        }
        if min_eig(&self.mass) <= 0.0 {
            return Err(Error::InvalidArgument("mass matrix is not positive definite".into()));
        }
        let tol = 1e-12;
        if min_eig(&self.damping) < -tol * (1.0 + self.damping.amax())
            || min_eig(&self.stiffness) < -tol * (1.0 + self.stiffness.amax())
        {
            return Err(Error::InvalidArgument("damping and stiffness must be PSD".into()));
        }
        Ok(())
    }

    /// `q̈` for the given state and actuator torque.
    pub fn acceleration(&self, q: &DVector<f64>, qdot: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = &self.actuator_selection * u - &self.damping * qdot - &self.stiffness * q - &self.gravity_offset;
        self.mass
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Singular("mass matrix".into()))
    }
}

/// Parameters of the fin actuation plant (decoupled unit masses).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinParams {
    pub m: f64,
    pub d: f64,
    pub joints: usize,
}

impl Default for FinParams {
    fn default() -> Self {
        Self { m: 1.0, d: 0.05, joints: 4 }
    }
}

/// Four decoupled fin actuators: `M = m·I`, `D = d·I`, `K = 0`, `S = I`.
pub fn fin_system_model() -> LinearPlant {
    fin_system_from(&FinParams::default()).expect("default fin parameters are valid")
}

pub fn fin_system_from(p: &FinParams) -> Result<LinearPlant> {
    let n = p.joints;
    LinearPlant::new(
        DMatrix::identity(n, n) * p.m,
        DMatrix::identity(n, n) * p.d,
        DMatrix::zeros(n, n),
        DVector::zeros(n),
        0,
        n,
    )
}

/// Continuous state-space lift `ẋ = F_c x + H_c u + g_c` with `x = [q; q̇]`.
pub fn linear_to_statespace(plant: &LinearPlant) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let n = plant.dof();
    let m_inv = plant
        .mass
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("mass matrix".into()))?;
    let mut f = DMatrix::zeros(2 * n, 2 * n);
    f.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
    f.view_mut((n, 0), (n, n)).copy_from(&(-&m_inv * &plant.stiffness));
    f.view_mut((n, n), (n, n)).copy_from(&(-&m_inv * &plant.damping));
    let mut h = DMatrix::zeros(2 * n, plant.n_a);
    h.view_mut((n, 0), (n, plant.n_a))
        .copy_from(&(&m_inv * &plant.actuator_selection));
    let mut g = DVector::zeros(2 * n);
    g.rows_mut(n, n).copy_from(&(-&m_inv * &plant.gravity_offset));
    Ok((f, h, g))
}

/// `M(q) q̈ + C(q, q̇) q̇ + D q̇ + G(q) = u`.
pub trait LagrangianModel: Send + Sync {
    fn dof(&self) -> usize;
    fn mass(&self, q: &DVector<f64>) -> DMatrix<f64>;
    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64>;
    fn gravity(&self, q: &DVector<f64>) -> DVector<f64>;
    fn damping(&self) -> DMatrix<f64>;
    /// Potential whose gradient is `gravity`.
    fn potential(&self, q: &DVector<f64>) -> f64;

    fn acceleration(&self, q: &DVector<f64>, qdot: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = u - self.coriolis(q, qdot) * qdot - self.damping() * qdot - self.gravity(q);
        self.mass(q)
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::Singular("mass matrix".into()))
    }

    fn kinetic_energy(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> f64 {
        0.5 * qdot.dot(&(self.mass(q) * qdot))
    }
}

/// `q̇ᵀ(½Ṁ − C)q̇` with `Ṁ` from a central difference along `q̇`.
pub fn skew_symmetry_residual(model: &dyn LagrangianModel, q: &DVector<f64>, qdot: &DVector<f64>, step: f64) -> f64 {
    let m_dot = (model.mass(&(q + qdot * step)) - model.mass(&(q - qdot * step))) / (2.0 * step);
    let n = m_dot * 0.5 - model.coriolis(q, qdot);
    qdot.dot(&(n * qdot))
}

/// Physical parameters of the planar two-link arm. Inertias are about the joint axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoLinkParams {
    pub m1: f64,
    pub m2: f64,
    #[serde(rename = "I1")]
    pub i1: f64,
    #[serde(rename = "I2")]
    pub i2: f64,
    pub h1: f64,
    pub h2: f64,
    pub d1: f64,
    pub d2: f64,
    pub g: f64,
}

impl Default for TwoLinkParams {
    fn default() -> Self {
        Self {
            m1: 16.0,
            m2: 12.0,
            i1: 18.0,
            i2: 7.5,
            h1: 1.0,
            h2: 1.0,
            d1: 10.0,
            d2: 10.0,
            g: 9.8,
        }
    }
}

/// Planar 2R arm with uniform links (centers of mass at mid-length).
/// `q₁ = 0` is the first link horizontal; `q₁ = −π/2` hangs down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLinkArm {
    pub params: TwoLinkParams,
}

impl TwoLinkArm {
    pub fn new(params: TwoLinkParams) -> Result<Self> {
        let p = &params;
        let positive = [p.m1, p.m2, p.i1, p.i2, p.h1, p.h2];
        if positive.iter().any(|v| !(*v > 0.0)) || p.d1 < 0.0 || p.d2 < 0.0 || p.g < 0.0 {
            return Err(Error::InvalidArgument("two-link parameters must be positive".into()));
        }
        Ok(Self { params })
    }

    fn coupling(&self) -> f64 {
        self.params.m2 * self.params.h1 * 0.5 * self.params.h2
    }
}

pub fn two_link_model() -> TwoLinkArm {
    TwoLinkArm {
        params: TwoLinkParams::default(),
    }
}

impl LagrangianModel for TwoLinkArm {
    fn dof(&self) -> usize {
        2
    }

    fn mass(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.params;
        let a = self.coupling();
        let c2 = q[1].cos();
        let m11 = p.i1 + p.i2 + p.m2 * p.h1 * p.h1 + 2.0 * a * c2;
        let m12 = p.i2 + a * c2;
        DMatrix::from_row_slice(2, 2, &[m11, m12, m12, p.i2])
    }

    fn coriolis(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> DMatrix<f64> {
        let h = -self.coupling() * q[1].sin();
        DMatrix::from_row_slice(
            2,
            2,
            &[h * qdot[1], h * (qdot[0] + qdot[1]), -h * qdot[0], 0.0],
        )
    }

    fn gravity(&self, q: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let first = (p.m1 * 0.5 * p.h1 + p.m2 * p.h1) * p.g;
        let second = p.m2 * 0.5 * p.h2 * p.g * (q[0] + q[1]).cos();
        DVector::from_vec(vec![first * q[0].cos() + second, second])
    }

    fn damping(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![self.params.d1, self.params.d2]))
    }

    fn potential(&self, q: &DVector<f64>) -> f64 {
        let p = &self.params;
        (p.m1 * 0.5 * p.h1 + p.m2 * p.h1) * p.g * q[0].sin() + p.m2 * 0.5 * p.h2 * p.g * (q[0] + q[1]).sin()
    }
}
