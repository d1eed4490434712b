//! Linear dynamic controllers with anti-windup under per-joint power limits,
//! closed-loop assembly and a Lyapunov stability certificate.
//!
//! The controller is
//!
//! ```text
//! ẋ_c = A_c x_c + B_p q + B_d q̇
//! u   = C x_c + K_p q + K_d q̇ = κ x,   x = [q; q̇; x_c]
//! ```
//!
//! driving `M q̈ + D q̇ + K q = S psat(u, Sᵀq̇)`. With `σ = psat(u, ·) − u` the
//! closed loop is `ẋ = A(H) x + B σ` where the velocity rows read
//! `M⁻¹(S K_p − K)`, `M⁻¹(S K_d − D)` and `M⁻¹ S C`. Gains carry their own
//! sign, so a PD law has negative `K_p` and `K_d`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{LinearPlant, PowerBudget};
use crate::optim::{log_det_spd, max_eigenvalue};
use crate::powerlim::{motor_power, psat, PsatMode};

#[derive(Debug, Clone, PartialEq)]
pub enum AntiWindup {
    None,
    /// Conditional integration: freeze the controller state in the subspace
    /// driving saturated channels.
    ConditionalIntegration,
    /// Modern anti-windup with `ẋ_c += E_c σ` and `u += E σ`.
    Modern { e_c: DMatrix<f64>, e: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynController {
    pub a_c: DMatrix<f64>,
    pub b_p: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub k_p: DMatrix<f64>,
    pub k_d: DMatrix<f64>,
    pub antiwindup: AntiWindup,
}

impl DynController {
    /// Static state feedback `u = K_p q + K_d q̇`.
    pub fn static_pd(k_p: DMatrix<f64>, k_d: DMatrix<f64>) -> Self {
        let (n_a, n) = k_p.shape();
        Self {
            a_c: DMatrix::zeros(0, 0),
            b_p: DMatrix::zeros(0, n),
            b_d: DMatrix::zeros(0, n),
            c: DMatrix::zeros(n_a, 0),
            k_p,
            k_d,
            antiwindup: AntiWindup::None,
        }
    }

    /// Single-joint PID regulating `q → 0`:
    /// `u = −k_p q − k_i ∫q − k_d q̇`.
    pub fn pid(k_p: f64, k_i: f64, k_d: f64, antiwindup: AntiWindup) -> Self {
        Self {
            a_c: DMatrix::zeros(1, 1),
            b_p: DMatrix::from_element(1, 1, 1.0),
            b_d: DMatrix::zeros(1, 1),
            c: DMatrix::from_element(1, 1, -k_i),
            k_p: DMatrix::from_element(1, 1, -k_p),
            k_d: DMatrix::from_element(1, 1, -k_d),
            antiwindup,
        }
    }

    pub fn with_antiwindup(mut self, antiwindup: AntiWindup) -> Self {
        self.antiwindup = antiwindup;
        self
    }

    pub fn n_c(&self) -> usize {
        self.a_c.nrows()
    }

    pub fn validate(&self, plant: &LinearPlant) -> Result<()> {
        let (n, n_a, n_c) = (plant.dof(), plant.n_a, self.n_c());
        let shapes = [
            ("A_c", self.a_c.shape(), (n_c, n_c)),
            ("B_p", self.b_p.shape(), (n_c, n)),
            ("B_d", self.b_d.shape(), (n_c, n)),
            ("C", self.c.shape(), (n_a, n_c)),
            ("K_p", self.k_p.shape(), (n_a, n)),
            ("K_d", self.k_d.shape(), (n_a, n)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Dimension(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if let AntiWindup::Modern { e_c, e } = &self.antiwindup {
            if e_c.shape() != (n_c, n_a) || e.shape() != (n_a, n_a) {
                return Err(Error::Dimension("anti-windup gains E_c, E".into()));
            }
        }
        Ok(())
    }

    /// `κ = [K_p  K_d  C]`.
    pub fn kappa(&self) -> DMatrix<f64> {
        let (n_a, n, n_c) = (self.k_p.nrows(), self.k_p.ncols(), self.n_c());
        let mut k = DMatrix::zeros(n_a, 2 * n + n_c);
        k.view_mut((0, 0), (n_a, n)).copy_from(&self.k_p);
        k.view_mut((0, n), (n_a, n)).copy_from(&self.k_d);
        k.view_mut((0, 2 * n), (n_a, n_c)).copy_from(&self.c);
        k
    }

    /// Unprojected controller rate `A_c x_c + B_p q + B_d q̇`.
    pub fn nominal_rate(&self, x_c: &DVector<f64>, q: &DVector<f64>, qdot: &DVector<f64>) -> DVector<f64> {
        &self.a_c * x_c + &self.b_p * q + &self.b_d * qdot
    }

    pub fn output(&self, x_c: &DVector<f64>, q: &DVector<f64>, qdot: &DVector<f64>) -> DVector<f64> {
        &self.c * x_c + &self.k_p * q + &self.k_d * qdot
    }
}

/// Sorted set of saturating channels (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct SaturationIndexSet(Vec<usize>);

impl SaturationIndexSet {
    pub fn new(mut idx: Vec<usize>, n_a: usize) -> Result<Self> {
        idx.sort_unstable();
        idx.dedup();
        if idx.last().is_some_and(|&i| i >= n_a) {
            return Err(Error::InvalidArgument(format!("channel index out of range 0..{n_a}")));
        }
        Ok(Self(idx))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(n_a: usize) -> Self {
        Self((0..n_a).collect())
    }

    /// Set whose members are the set bits of `mask`.
    pub fn from_mask(mask: usize, n_a: usize) -> Self {
        Self((0..n_a).filter(|i| mask >> i & 1 == 1).collect())
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

/// Channels whose commanded torque would draw more than their power budget.
pub fn saturating_set(u: &DVector<f64>, qdot: &DVector<f64>, budget: &PowerBudget) -> Result<SaturationIndexSet> {
    if u.len() != budget.len() || qdot.len() != budget.len() {
        return Err(Error::Dimension("saturating set operands".into()));
    }
    let idx = (0..u.len())
        .filter(|&i| motor_power(u[i], qdot[i], budget.normalized_resistance[i]) > budget.per_joint_limit[i])
        .collect();
    Ok(SaturationIndexSet(idx))
}

/// Orthogonal projector onto the null space of the rows of `c` listed in `h`.
/// The empty set projects onto everything.
pub fn nullspace_projector(c: &DMatrix<f64>, h: &SaturationIndexSet) -> DMatrix<f64> {
    let n_c = c.ncols();
    let eye = DMatrix::identity(n_c, n_c);
    if h.is_empty() || n_c == 0 {
        return eye;
    }
    let rows = DMatrix::from_fn(h.len(), n_c, |r, j| c[(h.0[r], j)]);
    // Right singular vectors with non-negligible singular values span the row space.
    let svd = rows.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * (h.len().max(n_c) as f64);
    let mut p = eye;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            let v = v_t.row(k).transpose();
            p -= &v * v.transpose();
        }
    }
    // Symmetrize away round-off.
    (&p + p.transpose()) * 0.5
}

/// Conditional-integration controller rate `Π(C, H)(A_c x_c + B_p q + B_d q̇)`.
pub fn ci_controller_rate(
    ctrl: &DynController,
    x_c: &DVector<f64>,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    h: &SaturationIndexSet,
) -> DVector<f64> {
    nullspace_projector(&ctrl.c, h) * ctrl.nominal_rate(x_c, q, qdot)
}

/// Modern anti-windup rate and output for a given mismatch `σ`.
pub fn maw_controller_rate(
    ctrl: &DynController,
    x_c: &DVector<f64>,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    sigma: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let AntiWindup::Modern { e_c, e } = &ctrl.antiwindup else {
        return Err(Error::InvalidArgument("controller has no modern anti-windup gains".into()));
    };
    let rate = ctrl.nominal_rate(x_c, q, qdot) + e_c * sigma;
    let u = ctrl.output(x_c, q, qdot) + e * sigma;
    Ok((rate, u))
}

/// Closed-loop data `ẋ = A x + B σ`, `u = κ x`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub kappa: DMatrix<f64>,
}

pub fn closed_loop_matrices(plant: &LinearPlant, ctrl: &DynController, h: &SaturationIndexSet) -> Result<ClosedLoop> {
    ctrl.validate(plant)?;
    let (n, n_a, n_c) = (plant.dof(), plant.n_a, ctrl.n_c());
    let m_inv = plant
        .mass
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("mass matrix".into()))?;
    let s = &plant.actuator_selection;
    let dim = 2 * n + n_c;
    let mut a = DMatrix::zeros(dim, dim);
    a.view_mut((0, n), (n, n)).copy_from(&DMatrix::identity(n, n));
    a.view_mut((n, 0), (n, n))
        .copy_from(&(&m_inv * (s * &ctrl.k_p - &plant.stiffness)));
    a.view_mut((n, n), (n, n))
        .copy_from(&(&m_inv * (s * &ctrl.k_d - &plant.damping)));
    a.view_mut((n, 2 * n), (n, n_c)).copy_from(&(&m_inv * s * &ctrl.c));

    let proj = match ctrl.antiwindup {
        AntiWindup::ConditionalIntegration => nullspace_projector(&ctrl.c, h),
        _ => DMatrix::identity(n_c, n_c),
    };
    a.view_mut((2 * n, 0), (n_c, n)).copy_from(&(&proj * &ctrl.b_p));
    a.view_mut((2 * n, n), (n_c, n)).copy_from(&(&proj * &ctrl.b_d));
    a.view_mut((2 * n, 2 * n), (n_c, n_c)).copy_from(&(&proj * &ctrl.a_c));

    let mut b = DMatrix::zeros(dim, n_a);
    match &ctrl.antiwindup {
        AntiWindup::Modern { e_c, e } => {
            let ie = DMatrix::identity(n_a, n_a) + e;
            b.view_mut((n, 0), (n, n_a)).copy_from(&(&m_inv * s * ie));
            b.view_mut((2 * n, 0), (n_c, n_a)).copy_from(e_c);
        }
        _ => b.view_mut((n, 0), (n, n_a)).copy_from(&(&m_inv * s)),
    }
    Ok(ClosedLoop { a, b, kappa: ctrl.kappa() })
}

fn split_state(x: &DVector<f64>, n: usize, n_c: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    (
        x.rows(0, n).into_owned(),
        x.rows(n, n).into_owned(),
        x.rows(2 * n, n_c).into_owned(),
    )
}

/// `σ(x) = psat(κx, Sᵀq̇) − κx`.
pub fn sigma(
    x: &DVector<f64>,
    plant: &LinearPlant,
    ctrl: &DynController,
    budget: &PowerBudget,
    mode: PsatMode,
) -> Result<DVector<f64>> {
    let n = plant.dof();
    if x.len() != 2 * n + ctrl.n_c() || budget.len() != plant.n_a {
        return Err(Error::Dimension("closed-loop state or budget".into()));
    }
    let u = ctrl.kappa() * x;
    let qdot_a = plant.actuator_selection.transpose() * x.rows(n, n);
    let mut s = DVector::zeros(u.len());
    for i in 0..u.len() {
        s[i] = psat(u[i], qdot_a[i], &budget.joint(i), mode)? - u[i];
    }
    Ok(s)
}

/// Closed-loop vector field under the power limit, assembled from the plant
/// and controller equations (not from [`closed_loop_matrices`]).
pub fn closed_loop_rate(
    x: &DVector<f64>,
    plant: &LinearPlant,
    ctrl: &DynController,
    budget: &PowerBudget,
    mode: PsatMode,
) -> Result<DVector<f64>> {
    let (n, n_c) = (plant.dof(), ctrl.n_c());
    let (q, qdot, x_c) = split_state(x, n, n_c);
    let sig = sigma(x, plant, ctrl, budget, mode)?;
    let u_nom = ctrl.output(&x_c, &q, &qdot);
    let (rate_c, applied) = match &ctrl.antiwindup {
        AntiWindup::None => (ctrl.nominal_rate(&x_c, &q, &qdot), &u_nom + &sig),
        AntiWindup::ConditionalIntegration => {
            let qdot_a = plant.actuator_selection.transpose() * &qdot;
            let h = saturating_set(&u_nom, &qdot_a, budget)?;
            (ci_controller_rate(ctrl, &x_c, &q, &qdot, &h), &u_nom + &sig)
        }
        AntiWindup::Modern { .. } => {
            let (rate, u) = maw_controller_rate(ctrl, &x_c, &q, &qdot, &sig)?;
            (rate, u + &sig)
        }
    };
    let qddot = plant.acceleration(&q, &qdot, &applied)?;
    let mut out = DVector::zeros(x.len());
    out.rows_mut(0, n).copy_from(&qdot);
    out.rows_mut(n, n).copy_from(&qddot);
    out.rows_mut(2 * n, n_c).copy_from(&rate_c);
    Ok(out)
}

/// RK4 integration of [`closed_loop_rate`]; returns `steps + 1` states.
pub fn simulate_closed_loop(
    x0: &DVector<f64>,
    plant: &LinearPlant,
    ctrl: &DynController,
    budget: &PowerBudget,
    mode: PsatMode,
    dt: f64,
    steps: usize,
) -> Result<Vec<DVector<f64>>> {
    let f = |x: &DVector<f64>| closed_loop_rate(x, plant, ctrl, budget, mode);
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    out.push(x.clone());
    for k in 0..steps {
        let k1 = f(&x)?;
        let k2 = f(&(&x + &k1 * (0.5 * dt)))?;
        let k3 = f(&(&x + &k2 * (0.5 * dt)))?;
        let k4 = f(&(&x + &k3 * dt))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                time: (k + 1) as f64 * dt,
                detail: "closed-loop state".into(),
            });
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Lyapunov matrix, sector slopes and ellipsoid level of a stability claim.
#[derive(Debug, Clone)]
pub struct CertificateProblem {
    pub q: DMatrix<f64>,
    pub gamma: DVector<f64>,
    pub alpha: f64,
}

impl CertificateProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument("ellipsoid level must be positive".into()));
        }
        if self.gamma.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
            return Err(Error::InvalidArgument("sector slopes must lie in (0, 1)".into()));
        }
        if (&self.q - self.q.transpose()).amax() > 1e-9 * (1.0 + self.q.amax()) {
            return Err(Error::InvalidArgument("Q is not symmetric".into()));
        }
        if self.q.clone().cholesky().is_none() {
            return Err(Error::InvalidArgument("Q is not positive definite".into()));
        }
        Ok(())
    }

    /// `W = (Q/α)⁻¹`.
    pub fn w(&self) -> Result<DMatrix<f64>> {
        let chol = (&self.q / self.alpha)
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("Q is not positive definite".into()))?;
        Ok(chol.inverse())
    }
}

/// Rows `h_i = (v̄_i / P̄_i) [κ]_i` bounding the sector polytope.
pub fn polytope_rows(ctrl: &DynController, budget: &PowerBudget) -> DMatrix<f64> {
    let mut k = ctrl.kappa();
    for i in 0..k.nrows() {
        let s = budget.no_load_speed[i] / budget.per_joint_limit[i];
        k.row_mut(i).scale_mut(s);
    }
    k
}

/// Sector vertex matrix with rows `−δ(i, H)(1 − γ_i)[κ]_i`.
pub fn sector_vertex(kappa: &DMatrix<f64>, gamma: &DVector<f64>, h: &SaturationIndexSet) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(kappa.nrows(), kappa.ncols());
    for &i in h.indices() {
        p.row_mut(i).copy_from(&(kappa.row(i) * -(1.0 - gamma[i])));
    }
    p
}

/// Outcome of [`certificate_check`].
#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    pub holds: bool,
    /// Saturating set of the worst case (selects `A(H)`).
    pub worst_h: Vec<usize>,
    /// Active sector vertex of the worst case.
    pub worst_vertex: Vec<usize>,
    pub worst_eigenvalue: f64,
    /// Largest eigenvalue per checked pair `(H, vertex)`.
    pub cases: Vec<(Vec<usize>, Vec<usize>, f64)>,
    /// `1 − γ_i² h_i W h_iᵀ` per channel.
    pub ellipsoid_margins: Vec<f64>,
}

/// Which sector vertices are paired with each saturating set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VertexEnumeration {
    /// Only the vertex `σ_i = −(1 − γ_i)u_i` for every `i ∈ H`.
    Matched,
    /// Every vertex subset of `H`: the condition that covers the full sector.
    AllSubsets,
}

pub const MAX_CERTIFIED_CHANNELS: usize = 12;

/// Checks `(A(H) + BΠ)ᵀQ + Q(A(H) + BΠ) ≺ −1e-9 I` over all saturating sets.
pub fn certificate_check(
    plant: &LinearPlant,
    ctrl: &DynController,
    budget: &PowerBudget,
    prob: &CertificateProblem,
    vertices: VertexEnumeration,
) -> Result<CertificateReport> {
    prob.validate()?;
    let n_a = plant.n_a;
    if n_a > MAX_CERTIFIED_CHANNELS {
        return Err(Error::InvalidArgument(format!(
            "certificate enumeration supports at most {MAX_CERTIFIED_CHANNELS} channels, got {n_a}"
        )));
    }
    if vertices == VertexEnumeration::AllSubsets && n_a > 8 {
        return Err(Error::InvalidArgument("vertex-subset enumeration supports at most 8 channels".into()));
    }
    let dim = 2 * plant.dof() + ctrl.n_c();
    if prob.q.shape() != (dim, dim) || prob.gamma.len() != n_a || budget.len() != n_a {
        return Err(Error::Dimension("certificate problem dimensions".into()));
    }
    let kappa = ctrl.kappa();
    let mut cases = Vec::new();
    let mut worst = (Vec::new(), Vec::new(), f64::NEG_INFINITY);
    for mask in 0..(1usize << n_a) {
        let h = SaturationIndexSet::from_mask(mask, n_a);
        let cl = closed_loop_matrices(plant, ctrl, &h)?;
        let subs: Vec<usize> = match vertices {
            VertexEnumeration::Matched => vec![mask],
            VertexEnumeration::AllSubsets => (0..=mask).filter(|s| s & !mask == 0).collect(),
        };
        for sub in subs {
            let v = SaturationIndexSet::from_mask(sub, n_a);
            let acl = &cl.a + &cl.b * sector_vertex(&kappa, &prob.gamma, &v);
            let lyap = acl.transpose() * &prob.q + &prob.q * &acl;
            let lmax = max_eigenvalue(&((&lyap + lyap.transpose()) * 0.5))?;
            if lmax > worst.2 {
                worst = (h.0.clone(), v.0.clone(), lmax);
            }
            cases.push((h.0.clone(), v.0, lmax));
        }
    }
    let (_, _, margins) = ellipsoid_in_polytope(&prob.w()?, &polytope_rows(ctrl, budget), &prob.gamma)?;
    Ok(CertificateReport {
        holds: worst.2 < -1e-9,
        worst_h: worst.0,
        worst_vertex: worst.1,
        worst_eigenvalue: worst.2,
        cases,
        ellipsoid_margins: margins,
    })
}

/// Whether `{x : xᵀW⁻¹x ≤ 1}` satisfies `γ_i² h_i W h_iᵀ ≤ 1` for every row.
/// Returns the verdict, the tightest row and the margins `1 − γ_i² h_i W h_iᵀ`.
pub fn ellipsoid_in_polytope(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    gamma: &DVector<f64>,
) -> Result<(bool, usize, Vec<f64>)> {
    if h.ncols() != w.nrows() || gamma.len() != h.nrows() {
        return Err(Error::Dimension("ellipsoid/polytope dimensions".into()));
    }
    let margins: Vec<f64> = (0..h.nrows())
        .map(|i| {
            let hi = h.row(i);
            1.0 - gamma[i] * gamma[i] * (hi * w * hi.transpose())[(0, 0)]
        })
        .collect();
    let binding = (0..margins.len())
        .min_by(|&a, &b| margins[a].total_cmp(&margins[b]))
        .unwrap_or(0);
    Ok((margins.iter().all(|&m| m >= 0.0), binding, margins))
}

/// Log-volume proxy `log det W` of the ellipsoid.
pub fn roa_volume(w: &DMatrix<f64>) -> Result<f64> {
    log_det_spd(w)
}
