//! Curl- and divergence-free polynomial model of the local magnetic field.
//!
//! The field is the gradient of a scalar potential `φ(r) = h(r)ᵀ μ`, where
//! `h(r)` holds every monomial `x^i y^j z^k` with `1 ≤ i+j+k ≤ l+1`. A curl-free
//! field follows from the gradient structure; zero divergence is the linear
//! constraint `D μ = 0` (the Laplacian of the potential vanishes). The model is
//! reparameterized over the null space of `D`, `μ = D⊥ θ`, giving
//! `M(r; θ) = Φ(r) θ` with `Φ(r) = Γ(r) D⊥` and `Γ(r) = ∇h(r)ᵀ`.
//!
//! Monomials are ordered by total degree, then descending lexicographically on
//! `(i, j, k)`: `x, y, z, x², xy, xz, y², yz, z², x³, ...`. The Laplacian maps
//! degree `m` onto degree `m-2`, so `D` is block diagonal by degree and `D⊥` is
//! built one degree at a time. Each block basis is canonicalized (Gram-Schmidt
//! of the null-space projector applied to the unit vectors, in monomial order,
//! then sign-fixed so the largest entry is positive), which makes `θ` portable:
//! for every order the first three coefficients are the uniform field
//! `(Bx, By, Bz)` in µT, the next five the symmetric traceless gradient, etc.
//!
//! Units: positions in meters, field in microtesla.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Dyn, Matrix3, OMatrix, Vector3, U3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{right_jacobian, rot_exp, skew};

/// Model coefficients, length κ.
pub type Theta = DVector<f64>;

/// 3 x κ regression matrix `Φ(r)`.
pub type RegressionMatrix = OMatrix<f64, U3, Dyn>;

/// Default upper bound on the condition number of the anchor matrix `A`.
pub const DEFAULT_CONDITION_BOUND: f64 = 1e6;

/// Relative singular-value tolerance for null spaces and numeric rank.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("polynomial order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("degenerate sensor geometry ({detail}): numeric rank {rank} of {rows}x{cols} regressor, need {cols}")]
    DegenerateGeometry {
        rank: usize,
        rows: usize,
        cols: usize,
        detail: String,
    },
    #[error("degenerate anchors: {count} points give condition number {condition:e} (bound {bound:e}, rank {rank} of {required})")]
    DegenerateAnchors {
        count: usize,
        condition: f64,
        bound: f64,
        rank: usize,
        required: usize,
    },
    #[error("{what}: expected length {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// Maxwell-constrained polynomial field model of order `l`.
#[derive(Clone, Debug)]
pub struct FieldModel {
    order: usize,
    exponents: Vec<[u32; 3]>,
    constraint: DMatrix<f64>,
    null_basis: DMatrix<f64>,
}

/// All monomial exponents with total degree in `min_degree..=max_degree`,
/// graded then descending lexicographic.
pub fn monomials(min_degree: u32, max_degree: u32) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for m in min_degree..=max_degree {
        for i in (0..=m).rev() {
            for j in (0..=m - i).rev() {
                out.push([i, j, m - i - j]);
            }
        }
    }
    out
}

fn falling(n: u32, k: u32) -> f64 {
    (0..k).map(|t| (n - t) as f64).product()
}

/// Coordinate powers `r_c^k` for `k = 0..=max`.
struct Powers {
    p: [Vec<f64>; 3],
}

impl Powers {
    fn new(r: &Vector3<f64>, max: u32) -> Self {
        let table = |x: f64| {
            let mut v = Vec::with_capacity(max as usize + 1);
            let mut acc = 1.0;
            for _ in 0..=max {
                v.push(acc);
                acc *= x;
            }
            v
        };
        Self {
            p: [table(r.x), table(r.y), table(r.z)],
        }
    }

    /// Mixed partial derivative of `x^e0 y^e1 z^e2` of multi-order `d`.
    fn derivative(&self, e: [u32; 3], d: [u32; 3]) -> f64 {
        let mut acc = 1.0;
        for c in 0..3 {
            if d[c] > e[c] {
                return 0.0;
            }
            acc *= falling(e[c], d[c]) * self.p[c][(e[c] - d[c]) as usize];
        }
        acc
    }
}

const UNIT: [[u32; 3]; 3] = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];

fn add(a: [u32; 3], b: [u32; 3]) -> [u32; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn null_space_block(block: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = block.ncols();
    if block.nrows() == 0 {
        return DMatrix::identity(cols, cols);
    }
    // Zero-pad to square so the SVD yields a complete right basis.
    let mut square = DMatrix::zeros(cols, cols);
    square
        .view_mut((0, 0), (block.nrows(), cols))
        .copy_from(block);
    let svd = square.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let smax = svd.singular_values.max();
    let null_rows: Vec<usize> = (0..cols)
        .filter(|&i| svd.singular_values[i] <= RANK_TOL * smax)
        .collect();
    let mut n = DMatrix::zeros(cols, null_rows.len());
    for (k, &i) in null_rows.iter().enumerate() {
        n.set_column(k, &v_t.row(i).transpose());
    }
    canonical_basis(&n)
}

/// Rotation-invariant orthonormal basis of `span(n)`.
fn canonical_basis(n: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = n.ncols();
    let projector = n * n.transpose();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(dim);
    for j in 0..n.nrows() {
        if basis.len() == dim {
            break;
        }
        let mut v: DVector<f64> = projector.column(j).into_owned();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            v /= norm;
            let lead = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, x)| {
                    if x.abs() > best.1 + 1e-12 {
                        (i, x.abs())
                    } else {
                        best
                    }
                })
                .0;
            if v[lead] < 0.0 {
                v = -v;
            }
            basis.push(v);
        }
    }
    debug_assert_eq!(basis.len(), dim);
    DMatrix::from_columns(&basis)
}

impl FieldModel {
    pub fn new(order: usize) -> Result<Self, ModelError> {
        if order < 1 {
            return Err(ModelError::InvalidOrder(order));
        }
        let top = order as u32 + 1;
        let exponents = monomials(1, top);
        let rows = monomials(0, top - 2);
        let row_index: HashMap<[u32; 3], usize> =
            rows.iter().enumerate().map(|(i, e)| (*e, i)).collect();

        let l_raw = exponents.len();
        let mut constraint = DMatrix::zeros(rows.len(), l_raw);
        for (n, e) in exponents.iter().enumerate() {
            for c in 0..3 {
                if e[c] >= 2 {
                    let mut target = *e;
                    target[c] -= 2;
                    constraint[(row_index[&target], n)] += (e[c] * (e[c] - 1)) as f64;
                }
            }
        }

        let kappa = (order + 1) * (order + 3);
        let mut null_basis = DMatrix::zeros(l_raw, kappa);
        let mut col0 = 0;
        for m in 1..=top {
            let cols: Vec<usize> = (0..l_raw)
                .filter(|&n| exponents[n].iter().sum::<u32>() == m)
                .collect();
            let block_rows: Vec<usize> = if m >= 2 {
                (0..rows.len())
                    .filter(|&i| rows[i].iter().sum::<u32>() == m - 2)
                    .collect()
            } else {
                Vec::new()
            };
            let block = DMatrix::from_fn(block_rows.len(), cols.len(), |i, j| {
                constraint[(block_rows[i], cols[j])]
            });
            let nb = null_space_block(&block);
            for k in 0..nb.ncols() {
                for (i, &n) in cols.iter().enumerate() {
                    null_basis[(n, col0 + k)] = nb[(i, k)];
                }
            }
            col0 += nb.ncols();
        }
        assert_eq!(col0, kappa, "null space dimension disagrees with l²+4l+3");

        Ok(Self {
            order,
            exponents,
            constraint,
            null_basis,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Raw potential parameter count `L = (l+4)(l+3)(l+2)/6 − 1`.
    pub fn raw_dim(&self) -> usize {
        self.exponents.len()
    }

    /// Reduced parameter count `κ = l² + 4l + 3`.
    pub fn dim(&self) -> usize {
        self.null_basis.ncols()
    }

    pub fn exponents(&self) -> &[[u32; 3]] {
        &self.exponents
    }

    /// Divergence constraint matrix `D`.
    pub fn constraint(&self) -> &DMatrix<f64> {
        &self.constraint
    }

    /// Orthonormal null-space basis `D⊥` (L x κ).
    pub fn null_basis(&self) -> &DMatrix<f64> {
        &self.null_basis
    }

    fn max_degree(&self) -> u32 {
        self.order as u32 + 1
    }

    /// `Γ(r) = ∇h(r)ᵀ`, 3 x L.
    pub fn gamma(&self, r: &Vector3<f64>) -> OMatrix<f64, U3, Dyn> {
        let pw = Powers::new(r, self.max_degree());
        let mut g = OMatrix::<f64, U3, Dyn>::zeros(self.raw_dim());
        for (n, e) in self.exponents.iter().enumerate() {
            for c in 0..3 {
                g[(c, n)] = pw.derivative(*e, UNIT[c]);
            }
        }
        g
    }

    /// Regression matrix `Φ(r) = Γ(r) D⊥`.
    pub fn phi(&self, r: &Vector3<f64>) -> RegressionMatrix {
        self.gamma(r) * &self.null_basis
    }

    /// Potential coefficients `μ = D⊥ θ`.
    pub fn potential(&self, theta: &Theta) -> DVector<f64> {
        &self.null_basis * theta
    }

    /// Field `∇φ(r)` for potential coefficients `μ`.
    pub fn field_from_potential(&self, mu: &DVector<f64>, r: &Vector3<f64>) -> Vector3<f64> {
        let pw = Powers::new(r, self.max_degree());
        let mut out = Vector3::zeros();
        for (n, e) in self.exponents.iter().enumerate() {
            if mu[n] == 0.0 {
                continue;
            }
            for c in 0..3 {
                out[c] += mu[n] * pw.derivative(*e, UNIT[c]);
            }
        }
        out
    }

    /// Spatial Jacobian of the field, `∂M/∂r` (the potential's Hessian).
    pub fn field_gradient_from_potential(
        &self,
        mu: &DVector<f64>,
        r: &Vector3<f64>,
    ) -> Matrix3<f64> {
        let pw = Powers::new(r, self.max_degree());
        let mut h = Matrix3::zeros();
        for (n, e) in self.exponents.iter().enumerate() {
            if mu[n] == 0.0 {
                continue;
            }
            for a in 0..3 {
                for b in a..3 {
                    let v = mu[n] * pw.derivative(*e, add(UNIT[a], UNIT[b]));
                    h[(a, b)] += v;
                    if a != b {
                        h[(b, a)] += v;
                    }
                }
            }
        }
        h
    }

    pub fn eval_field(&self, theta: &Theta, r: &Vector3<f64>) -> Vector3<f64> {
        self.field_from_potential(&self.potential(theta), r)
    }

    pub fn field_gradient(&self, theta: &Theta, r: &Vector3<f64>) -> Matrix3<f64> {
        self.field_gradient_from_potential(&self.potential(theta), r)
    }

    /// Stacked regressor `[Φ(r_1); ...; Φ(r_N)]`, 3N x κ.
    pub fn stacked_phi(&self, points: &[Vector3<f64>]) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(3 * points.len(), self.dim());
        for (i, r) in points.iter().enumerate() {
            x.view_mut((3 * i, 0), (3, self.dim()))
                .copy_from(&self.phi(r));
        }
        x
    }

    /// Coefficients of the uniform field `m` (µT).
    pub fn uniform_theta(&self, m: &Vector3<f64>) -> Theta {
        let mut t = Theta::zeros(self.dim());
        t.rows_mut(0, 3).copy_from(m);
        t
    }

    pub fn check_theta(&self, theta: &Theta) -> Result<(), ModelError> {
        if theta.len() != self.dim() {
            return Err(ModelError::DimensionMismatch {
                what: "theta",
                expected: self.dim(),
                found: theta.len(),
            });
        }
        Ok(())
    }
}

pub fn build_model(order: usize) -> Result<FieldModel, ModelError> {
    FieldModel::new(order)
}

pub fn phi(model: &FieldModel, r: &Vector3<f64>) -> RegressionMatrix {
    model.phi(r)
}

pub fn eval_field(model: &FieldModel, theta: &Theta, r: &Vector3<f64>) -> Vector3<f64> {
    model.eval_field(theta, r)
}

/// Least-squares fit of θ to one array snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFit {
    pub theta: Theta,
    /// Residual power `‖(I − XX†) y‖² / 3N`, µT².
    pub sigma2: f64,
}

/// Precomputed regressor `X` and its pseudo-inverse for a fixed array.
#[derive(Clone, Debug)]
pub struct ArrayRegressor {
    x: DMatrix<f64>,
    x_pinv: DMatrix<f64>,
}

impl ArrayRegressor {
    pub fn new(model: &FieldModel, positions: &[Vector3<f64>]) -> Result<Self, ModelError> {
        let x = model.stacked_phi(positions);
        let (rows, cols) = x.shape();
        if rows < cols {
            return Err(ModelError::DegenerateGeometry {
                rank: rows.min(cols),
                rows,
                cols,
                detail: format!(
                    "{} magnetometers give {rows} equations for {cols} coefficients",
                    positions.len()
                ),
            });
        }
        let svd = x.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > RANK_TOL * smax)
            .count();
        if rank < cols {
            return Err(ModelError::DegenerateGeometry {
                rank,
                rows,
                cols,
                detail: format!(
                    "{} magnetometers do not span the order-{} model",
                    positions.len(),
                    model.order()
                ),
            });
        }
        let x_pinv = svd
            .pseudo_inverse(RANK_TOL * smax)
            .expect("SVD computed with U and V");
        Ok(Self { x, x_pinv })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.x_pinv
    }

    pub fn fit(&self, y: &DVector<f64>) -> Result<FieldFit, ModelError> {
        if y.len() != self.x.nrows() {
            return Err(ModelError::DimensionMismatch {
                what: "stacked magnetometer readings",
                expected: self.x.nrows(),
                found: y.len(),
            });
        }
        let theta = &self.x_pinv * y;
        let residual = y - &self.x * &theta;
        let sigma2 = residual.norm_squared() / y.len() as f64;
        Ok(FieldFit { theta, sigma2 })
    }
}

pub fn fit_theta(
    model: &FieldModel,
    positions: &[Vector3<f64>],
    readings: &DVector<f64>,
) -> Result<FieldFit, ModelError> {
    ArrayRegressor::new(model, positions)?.fit(readings)
}

/// How anchor points for coefficient transport are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Every magnetometer position.
    #[default]
    AllSensors,
    /// `⌈κ/3⌉` sensors chosen greedily for volume.
    Minimal,
    /// Explicit body-frame points.
    Points(Vec<[f64; 3]>),
}

/// Anchor points with stacked `A` and its pseudo-inverse `A†`.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    points: Vec<Vector3<f64>>,
    a: DMatrix<f64>,
    a_pinv: DMatrix<f64>,
    condition: f64,
}

impl AnchorSet {
    pub fn new(
        model: &FieldModel,
        points: &[Vector3<f64>],
        bound: f64,
    ) -> Result<Self, ModelError> {
        let a = model.stacked_phi(points);
        let kappa = model.dim();
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = if a.nrows() >= kappa {
            svd.singular_values.min()
        } else {
            0.0
        };
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > RANK_TOL * smax)
            .count();
        let condition = if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        };
        if condition.is_nan() || condition > bound || rank < kappa {
            return Err(ModelError::DegenerateAnchors {
                count: points.len(),
                condition,
                bound,
                rank,
                required: kappa,
            });
        }
        let a_pinv = svd
            .pseudo_inverse(RANK_TOL * smax)
            .expect("SVD computed with U and V");
        Ok(Self {
            points: points.to_vec(),
            a,
            a_pinv,
            condition,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn a_pinv(&self) -> &DMatrix<f64> {
        &self.a_pinv
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }
}

/// Candidate points for an anchor policy.
pub fn select_anchor_points(
    model: &FieldModel,
    sensors: &[Vector3<f64>],
    policy: &AnchorPolicy,
) -> Vec<Vector3<f64>> {
    match policy {
        AnchorPolicy::AllSensors => sensors.to_vec(),
        AnchorPolicy::Points(p) => p.iter().map(|x| Vector3::from(*x)).collect(),
        AnchorPolicy::Minimal => {
            let s = model.dim().div_ceil(3);
            let mut chosen: Vec<usize> = Vec::with_capacity(s);
            while chosen.len() < s.min(sensors.len()) {
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for i in 0..sensors.len() {
                    if chosen.contains(&i) {
                        continue;
                    }
                    let mut pts: Vec<Vector3<f64>> = chosen.iter().map(|&c| sensors[c]).collect();
                    pts.push(sensors[i]);
                    let a = model.stacked_phi(&pts);
                    let gram =
                        a.transpose() * &a + DMatrix::identity(model.dim(), model.dim()) * 1e-9;
                    let score = gram.determinant().ln();
                    if score > best.1 + 1e-12 {
                        best = (i, score);
                    }
                }
                chosen.push(best.0);
            }
            chosen.iter().map(|&c| sensors[c]).collect()
        }
    }
}

pub fn make_anchors(
    model: &FieldModel,
    sensors: &[Vector3<f64>],
    policy: &AnchorPolicy,
    condition_bound: f64,
) -> Result<AnchorSet, ModelError> {
    let points = select_anchor_points(model, sensors, policy);
    AnchorSet::new(model, &points, condition_bound)
}

/// Rigid body-frame change between consecutive epochs.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PoseDelta {
    /// Translation `Δp`, meters, in the departing body frame.
    pub dp: Vector3<f64>,
    /// Rotation vector `Δφ`, radians.
    pub dphi: Vector3<f64>,
}

impl PoseDelta {
    pub fn new(dp: Vector3<f64>, dphi: Vector3<f64>) -> Self {
        Self { dp, dphi }
    }

    /// The pose change that undoes `self`.
    pub fn inverse(&self) -> Self {
        let rd = rot_exp(&self.dphi);
        Self {
            dp: -(rd.transpose() * self.dp),
            dphi: -self.dphi,
        }
    }
}

/// `B(ψ)`: rows `R_{k}^{k+1} Φ(r_s^{b_k})` with `r_s^{b_k} = exp([Δφ]×) r_s + Δp`.
pub fn transport_matrix(model: &FieldModel, anchors: &AnchorSet, psi: &PoseDelta) -> DMatrix<f64> {
    let rd = rot_exp(&psi.dphi);
    let rt = rd.transpose();
    let kappa = model.dim();
    let mut b = DMatrix::zeros(3 * anchors.len(), kappa);
    for (s, r) in anchors.points.iter().enumerate() {
        let old = rd * r + psi.dp;
        b.view_mut((3 * s, 0), (3, kappa))
            .copy_from(&(rt * model.phi(&old)));
    }
    b
}

/// `B(ψ) θ` evaluated directly from the potential.
pub fn transported_field(
    model: &FieldModel,
    anchors: &AnchorSet,
    psi: &PoseDelta,
    theta: &Theta,
) -> DVector<f64> {
    let rd = rot_exp(&psi.dphi);
    let rt = rd.transpose();
    let mu = model.potential(theta);
    let mut out = DVector::zeros(3 * anchors.len());
    for (s, r) in anchors.points.iter().enumerate() {
        let old = rd * r + psi.dp;
        out.fixed_rows_mut::<3>(3 * s)
            .copy_from(&(rt * model.field_from_potential(&mu, &old)));
    }
    out
}

/// `θ' = A† B(ψ) θ`.
pub fn transport_theta(
    model: &FieldModel,
    anchors: &AnchorSet,
    psi: &PoseDelta,
    theta: &Theta,
) -> Theta {
    anchors.a_pinv() * transported_field(model, anchors, psi, theta)
}

/// Partials of `B(ψ) θ` with respect to `Δp` (J1) and `Δφ` (J2), each 3S x 3.
pub fn transport_jacobians(
    model: &FieldModel,
    anchors: &AnchorSet,
    psi: &PoseDelta,
    theta: &Theta,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let rd = rot_exp(&psi.dphi);
    let rt = rd.transpose();
    let jr = right_jacobian(&psi.dphi);
    let mu = model.potential(theta);
    let n = anchors.len();
    let mut j1 = DMatrix::zeros(3 * n, 3);
    let mut j2 = DMatrix::zeros(3 * n, 3);
    for (s, r) in anchors.points.iter().enumerate() {
        let old = rd * r + psi.dp;
        let field = model.field_from_potential(&mu, &old);
        let grad = model.field_gradient_from_potential(&mu, &old);
        let d_dp = rt * grad;
        // Perturbing Δφ rotates both the output vector and the sample point.
        let d_dphi = (skew(&(rt * field)) - d_dp * rd * skew(r)) * jr;
        j1.view_mut((3 * s, 0), (3, 3)).copy_from(&d_dp);
        j2.view_mut((3 * s, 0), (3, 3)).copy_from(&d_dphi);
    }
    (j1, j2)
}
