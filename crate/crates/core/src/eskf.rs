//! Error-state Kalman filter over the joint inertial and field-coefficient state.
//!
//! Nominal state: position, velocity, attitude, accelerometer and gyroscope
//! biases, and the body-frame field coefficients θ. Error state ordering is
//! `(δp, δv, ε, δo_a, δo_ω, δθ)` with dimension `15 + κ`; the attitude error is
//! applied on the right, `q = q̂ ⊗ [1, ε/2]`. Process noise ordering is
//! `(w_a, w_ω, w_oa, w_oω, w_θ)`.
//!
//! The transition matrices are the exact first-order linearization of the
//! discrete mechanization plus coefficient transport `θ' = A† B(ψ) θ`, where
//! the pose change ψ depends on velocity, attitude, accelerometer bias and
//! gyroscope bias. Bias random walks enter as `o' = o + √Ts w_o`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::array::ArrayGeometry;
use crate::dataio::Dataset;
use crate::geom::{error_quat, quat_mul, right_jacobian, rot_exp, skew};
use crate::magmodel::{
    make_anchors, transport_jacobians, transport_matrix, AnchorPolicy, AnchorSet, ArrayRegressor,
    FieldModel, ModelError, Theta, DEFAULT_CONDITION_BOUND,
};
use crate::strapdown::{pose_delta, propagate, ImuSample, NavState, GRAVITY};

/// Error covariance, `(15 + κ)` square.
pub type ErrorCovariance = DMatrix<f64>;

pub const INS_DIM: usize = 15;
pub const POS: usize = 0;
pub const VEL: usize = 3;
pub const ATT: usize = 6;
pub const ACC_BIAS: usize = 9;
pub const GYRO_BIAS: usize = 12;
pub const THETA: usize = 15;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("covariance diverged ({detail})")]
    Divergence { detail: String },
    #[error("innovation covariance is not positive definite ({dim}x{dim})")]
    SingularInnovation { dim: usize },
    #[error("magnetometer reading {index} is not finite; sample rejected")]
    NonFiniteMeasurement { index: usize },
    #[error("measurement has length {found}, expected {expected}")]
    MeasurementLength { expected: usize, found: usize },
    #[error("dataset has no magnetometer snapshot to initialize the field coefficients")]
    NoInitialSnapshot,
    #[error("filter failed at epoch {epoch} (t = {t} s)")]
    AtEpoch {
        epoch: usize,
        t: f64,
        #[source]
        source: Box<FilterError>,
    },
}

impl FilterError {
    fn at(self, epoch: usize, t: f64) -> Self {
        FilterError::AtEpoch {
            epoch,
            t,
            source: Box::new(self),
        }
    }
}

/// How the magnetometer measurement covariance `R_k` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementNoise {
    /// `R_k = max(σ̂², σ_floor²) I` from the residual of a per-epoch fit.
    Adaptive,
    /// `R_k = σ² I` with the configured `mag_sigma`.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Accelerometer white noise, m/s²/√Hz.
    pub accel_noise_density: f64,
    /// Gyroscope white noise, rad/s/√Hz.
    pub gyro_noise_density: f64,
    /// Accelerometer bias random walk, m/s²/√s.
    pub accel_bias_rw: f64,
    /// Gyroscope bias random walk, rad/s/√s.
    pub gyro_bias_rw: f64,
    /// Coefficient process noise per step, µT.
    pub theta_std: f64,
    pub measurement: MeasurementNoise,
    /// Per-axis magnetometer σ for [`MeasurementNoise::Fixed`], µT.
    pub mag_sigma: f64,
    /// Lower bound on the adaptive σ̂, µT.
    pub sigma_floor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            accel_noise_density: 1e-2,
            gyro_noise_density: 1e-3,
            accel_bias_rw: 1e-4,
            gyro_bias_rw: 1e-4,
            theta_std: 0.05,
            measurement: MeasurementNoise::Adaptive,
            mag_sigma: 0.05,
            sigma_floor: 0.01,
        }
    }
}

/// Diagonal of the initial error covariance (variances).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialCovariance {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
    pub theta: f64,
}

impl Default for InitialCovariance {
    fn default() -> Self {
        Self {
            position: 1e-4,
            velocity: 1e-4,
            attitude: 1e-4,
            accel_bias: 1e-4,
            gyro_bias: 1e-4,
            theta: 1e2,
        }
    }
}

/// Run configuration (TOML). See the README for the full key list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Polynomial order `l` of the field model.
    pub order: usize,
    pub anchors: AnchorPolicy,
    pub condition_bound: f64,
    /// Navigation-frame gravity, m/s² (ENU).
    pub gravity: [f64; 3],
    pub noise: NoiseConfig,
    pub initial: InitialCovariance,
    /// Length of the initial position-aided segment, s.
    pub aiding_seconds: f64,
    /// Position measurement σ during aiding, m.
    pub position_sigma: f64,
    pub mag_updates: bool,
    /// Per-axis innovation gate in σ units; `None` disables gating.
    pub gate_sigma: Option<f64>,
    /// Use the Joseph-form covariance update.
    pub joseph: bool,
    /// Keep the full covariance of every epoch in [`FilterRun`].
    pub keep_covariance: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            order: 1,
            anchors: AnchorPolicy::AllSensors,
            condition_bound: DEFAULT_CONDITION_BOUND,
            gravity: [0.0, 0.0, -GRAVITY],
            noise: NoiseConfig::default(),
            initial: InitialCovariance::default(),
            aiding_seconds: 60.0,
            position_sigma: 0.01,
            mag_updates: true,
            gate_sigma: None,
            joseph: false,
            keep_covariance: false,
        }
    }
}

impl FilterConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullState {
    pub ins: NavState,
    pub theta: Theta,
}

impl FullState {
    /// `x ⊕ δx`.
    pub fn inject(&self, dx: &DVector<f64>) -> FullState {
        let v3 = |i: usize| Vector3::new(dx[i], dx[i + 1], dx[i + 2]);
        FullState {
            ins: NavState {
                p: self.ins.p + v3(POS),
                v: self.ins.v + v3(VEL),
                q: quat_mul(&self.ins.q, &error_quat(&v3(ATT))),
                accel_bias: self.ins.accel_bias + v3(ACC_BIAS),
                gyro_bias: self.ins.gyro_bias + v3(GYRO_BIAS),
            },
            theta: &self.theta + dx.rows(THETA, self.theta.len()),
        }
    }

    /// `x ⊖ x̂`, the inverse of [`FullState::inject`].
    pub fn difference(&self, reference: &FullState) -> DVector<f64> {
        let k = self.theta.len();
        let mut dx = DVector::zeros(INS_DIM + k);
        dx.fixed_rows_mut::<3>(POS)
            .copy_from(&(self.ins.p - reference.ins.p));
        dx.fixed_rows_mut::<3>(VEL)
            .copy_from(&(self.ins.v - reference.ins.v));
        let dq = quat_mul(&reference.ins.q.conjugate(), &self.ins.q);
        let dq = if dq.w < 0.0 {
            crate::geom::UnitQuaternion {
                w: -dq.w,
                x: -dq.x,
                y: -dq.y,
                z: -dq.z,
            }
        } else {
            dq
        };
        dx.fixed_rows_mut::<3>(ATT)
            .copy_from(&crate::geom::error_quat_inverse(&dq));
        dx.fixed_rows_mut::<3>(ACC_BIAS)
            .copy_from(&(self.ins.accel_bias - reference.ins.accel_bias));
        dx.fixed_rows_mut::<3>(GYRO_BIAS)
            .copy_from(&(self.ins.gyro_bias - reference.ins.gyro_bias));
        dx.rows_mut(THETA, k)
            .copy_from(&(&self.theta - &reference.theta));
        dx
    }

    pub fn is_finite(&self) -> bool {
        self.ins.is_finite() && self.theta.iter().all(|x| x.is_finite())
    }
}

/// Transition and noise-input matrices of one prediction step.
#[derive(Clone, Debug)]
pub struct Transition {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

/// Outcome of a magnetometer update.
#[derive(Clone, Debug)]
pub struct MagUpdate {
    pub state: FullState,
    pub cov: ErrorCovariance,
    /// Normalized innovation squared `zᵀ S⁻¹ z`.
    pub nis: f64,
    /// Number of scalar measurements used after gating.
    pub used: usize,
    /// Measurement variance applied, µT².
    pub variance: f64,
}

/// The estimator: field model, anchors and array regressor for one array.
#[derive(Clone, Debug)]
pub struct Mains {
    model: FieldModel,
    anchors: AnchorSet,
    regressor: ArrayRegressor,
    cfg: FilterConfig,
    gravity: Vector3<f64>,
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

fn check_covariance(p: &DMatrix<f64>) -> Result<(), FilterError> {
    if p.iter().all(|x| x.is_finite()) {
        return Ok(());
    }
    let bad = p.iter().position(|x| !x.is_finite()).unwrap_or(0);
    Err(FilterError::Divergence {
        detail: format!(
            "non-finite covariance entry ({}, {}); diagonal = {:?}",
            bad % p.nrows(),
            bad / p.nrows(),
            p.diagonal().as_slice()
        ),
    })
}

impl Mains {
    pub fn new(geometry: &ArrayGeometry, cfg: FilterConfig) -> Result<Self, FilterError> {
        let model = FieldModel::new(cfg.order)?;
        let sensors = geometry.positions();
        let anchors = make_anchors(&model, &sensors, &cfg.anchors, cfg.condition_bound)?;
        let regressor = ArrayRegressor::new(&model, &sensors)?;
        let gravity = Vector3::from(cfg.gravity);
        Ok(Self {
            model,
            anchors,
            regressor,
            cfg,
            gravity,
        })
    }

    pub fn model(&self) -> &FieldModel {
        &self.model
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn gravity(&self) -> &Vector3<f64> {
        &self.gravity
    }

    /// Error-state dimension `15 + κ`.
    pub fn dim(&self) -> usize {
        INS_DIM + self.model.dim()
    }

    /// Measurement matrix `H_δx`: zero over the INS errors, `Φ(r_mi)` over δθ.
    pub fn measurement_matrix(&self) -> DMatrix<f64> {
        let x = self.regressor.matrix();
        let mut h = DMatrix::zeros(x.nrows(), self.dim());
        h.view_mut((0, THETA), x.shape()).copy_from(x);
        h
    }

    pub fn initial_covariance(&self) -> ErrorCovariance {
        let i = &self.cfg.initial;
        let mut d = DVector::from_element(self.dim(), i.theta);
        for (start, var) in [
            (POS, i.position),
            (VEL, i.velocity),
            (ATT, i.attitude),
            (ACC_BIAS, i.accel_bias),
            (GYRO_BIAS, i.gyro_bias),
        ] {
            d.rows_mut(start, 3).fill(var);
        }
        DMatrix::from_diagonal(&d)
    }

    /// Initial state: the given INS state and θ fitted to the first snapshot.
    pub fn initial_state(
        &self,
        ins: NavState,
        snapshot: Option<&DVector<f64>>,
    ) -> Result<FullState, FilterError> {
        let theta = match snapshot {
            Some(y) if y.iter().all(|v| v.is_finite()) => self.regressor.fit(y)?.theta,
            Some(_) | None => Theta::zeros(self.model.dim()),
        };
        Ok(FullState { ins, theta })
    }

    /// Process noise `Q` for a step of length `ts`, ordered `(w_a, w_ω, w_oa, w_oω, w_θ)`.
    pub fn process_noise(&self, ts: f64) -> DMatrix<f64> {
        let n = &self.cfg.noise;
        let k = self.model.dim();
        let mut d = DVector::from_element(12 + k, n.theta_std * n.theta_std);
        d.rows_mut(0, 3).fill(n.accel_noise_density.powi(2) / ts);
        d.rows_mut(3, 3).fill(n.gyro_noise_density.powi(2) / ts);
        d.rows_mut(6, 3).fill(n.accel_bias_rw.powi(2));
        d.rows_mut(9, 3).fill(n.gyro_bias_rw.powi(2));
        DMatrix::from_diagonal(&d)
    }

    /// Nominal propagation `f(x̂, ũ, 0)`.
    pub fn propagate_nominal(&self, state: &FullState, u: &ImuSample, ts: f64) -> FullState {
        let psi = pose_delta(&state.ins, u, ts, &self.gravity);
        FullState {
            ins: propagate(&state.ins, u, ts, &self.gravity),
            theta: crate::magmodel::transport_theta(&self.model, &self.anchors, &psi, &state.theta),
        }
    }

    /// Linearization of the nominal step at `state`.
    pub fn transition(&self, state: &FullState, u: &ImuSample, ts: f64) -> Transition {
        let k = self.model.dim();
        let n = INS_DIM + k;
        let x = &state.ins;
        let r = x.q.to_rotation_matrix();
        let rt = r.transpose();
        let s_hat = u.specific_force - x.accel_bias;
        let dphi = (u.angular_rate - x.gyro_bias) * ts;
        let jr = right_jacobian(&dphi);
        let rd_t = rot_exp(&dphi).transpose();
        let id = Matrix3::identity();
        let half_ts2 = 0.5 * ts * ts;

        let mut f = DMatrix::identity(n, n);
        let put = |m: &mut DMatrix<f64>, row: usize, col: usize, block: &Matrix3<f64>| {
            m.fixed_view_mut::<3, 3>(row, col).copy_from(block);
        };
        let r_sx = r * skew(&s_hat);
        put(&mut f, POS, VEL, &(id * ts));
        put(&mut f, POS, ATT, &(-r_sx * half_ts2));
        put(&mut f, POS, ACC_BIAS, &(-r * half_ts2));
        put(&mut f, VEL, ATT, &(-r_sx * ts));
        put(&mut f, VEL, ACC_BIAS, &(-r * ts));
        put(&mut f, ATT, ATT, &rd_t);
        put(&mut f, ATT, GYRO_BIAS, &(-jr * ts));

        let mut g = DMatrix::zeros(n, 12 + k);
        put(&mut g, POS, 0, &(-r * half_ts2));
        put(&mut g, VEL, 0, &(-r * ts));
        put(&mut g, ATT, 3, &(-jr * ts));
        put(&mut g, ACC_BIAS, 6, &(id * ts.sqrt()));
        put(&mut g, GYRO_BIAS, 9, &(id * ts.sqrt()));

        // Field-coefficient rows: δθ' = A†[B J1 J2] [δθ; δΔp; δΔφ].
        let psi = pose_delta(x, u, ts, &self.gravity);
        let a_pinv = self.anchors.a_pinv();
        let ab = a_pinv * transport_matrix(&self.model, &self.anchors, &psi);
        let (j1, j2) = transport_jacobians(&self.model, &self.anchors, &psi, &state.theta);
        let aj1 = a_pinv * j1;
        let aj2 = a_pinv * j2;
        let eta = rt * ((x.v + self.gravity * (0.5 * ts)) * ts);

        f.view_mut((THETA, THETA), (k, k)).copy_from(&ab);
        f.view_mut((THETA, VEL), (k, 3))
            .copy_from(&(&aj1 * (rt * ts)));
        f.view_mut((THETA, ATT), (k, 3))
            .copy_from(&(&aj1 * skew(&eta)));
        f.view_mut((THETA, ACC_BIAS), (k, 3))
            .copy_from(&(&aj1 * -half_ts2));
        f.view_mut((THETA, GYRO_BIAS), (k, 3))
            .copy_from(&(&aj2 * -ts));

        g.view_mut((THETA, 0), (k, 3))
            .copy_from(&(&aj1 * -half_ts2));
        g.view_mut((THETA, 3), (k, 3)).copy_from(&(&aj2 * -ts));
        g.view_mut((THETA, 12), (k, k)).fill_with_identity();

        Transition { f, g }
    }

    /// Nominal propagation and covariance prediction `F P Fᵀ + G Q Gᵀ`.
    pub fn predict(
        &self,
        state: &FullState,
        cov: &ErrorCovariance,
        u: &ImuSample,
        ts: f64,
    ) -> Result<(FullState, ErrorCovariance), FilterError> {
        let Transition { f, g } = self.transition(state, u, ts);
        let q = self.process_noise(ts);
        let mut p = &f * cov * f.transpose() + &g * q * g.transpose();
        symmetrize(&mut p);
        check_covariance(&p)?;
        Ok((self.propagate_nominal(state, u, ts), p))
    }

    /// Measurement variance for one snapshot (µT²).
    pub fn adapt_r(&self, y: &DVector<f64>) -> Result<f64, FilterError> {
        let noise = &self.cfg.noise;
        match noise.measurement {
            MeasurementNoise::Fixed => Ok(noise.mag_sigma * noise.mag_sigma),
            MeasurementNoise::Adaptive => {
                let fit = self.regressor.fit(y)?;
                Ok(fit.sigma2.max(noise.sigma_floor * noise.sigma_floor))
            }
        }
    }

    /// Magnetometer-array update with stacked readings `y` (3N).
    pub fn update(
        &self,
        state: &FullState,
        cov: &ErrorCovariance,
        y: &DVector<f64>,
    ) -> Result<MagUpdate, FilterError> {
        let x_full = self.regressor.matrix();
        if y.len() != x_full.nrows() {
            return Err(FilterError::MeasurementLength {
                expected: x_full.nrows(),
                found: y.len(),
            });
        }
        if let Some(index) = y.iter().position(|v| !v.is_finite()) {
            return Err(FilterError::NonFiniteMeasurement { index });
        }
        let variance = self.adapt_r(y)?;
        let k = self.model.dim();
        let n = self.dim();
        let p_theta_rows = cov.rows(THETA, k).into_owned();
        let p_tt = cov.view((THETA, THETA), (k, k)).into_owned();

        let mut z = y - x_full * &state.theta;
        let mut x = x_full.clone();
        if let Some(gate) = self.cfg.gate_sigma {
            let s_diag = (x_full * &p_tt * x_full.transpose()).diagonal();
            let keep: Vec<usize> = (0..y.len() / 3)
                .filter(|&i| {
                    (0..3).all(|j| {
                        let r = 3 * i + j;
                        z[r].abs() <= gate * (s_diag[r] + variance).sqrt()
                    })
                })
                .flat_map(|i| [3 * i, 3 * i + 1, 3 * i + 2])
                .collect();
            x = x_full.select_rows(keep.iter());
            z = z.select_rows(keep.iter());
        }
        let m = z.len();
        if m == 0 {
            return Ok(MagUpdate {
                state: state.clone(),
                cov: cov.clone(),
                nis: 0.0,
                used: 0,
                variance,
            });
        }

        // H P = X P[θ, :], S = X Pθθ Xᵀ + σ² I.
        let hp = &x * &p_theta_rows;
        let mut s = &x * &p_tt * x.transpose();
        for i in 0..m {
            s[(i, i)] += variance;
        }
        symmetrize(&mut s);
        let chol = s
            .clone()
            .cholesky()
            .ok_or(FilterError::SingularInnovation { dim: m })?;
        let kt = chol.solve(&hp);
        let gain = kt.transpose();
        let nis = z.dot(&chol.solve(&z));
        let dx = &gain * &z;

        let mut p = if self.cfg.joseph {
            let mut h = DMatrix::zeros(m, n);
            h.view_mut((0, THETA), (m, k)).copy_from(&x);
            let ikh = DMatrix::identity(n, n) - &gain * &h;
            &ikh * cov * ikh.transpose() + &gain * &gain.transpose() * variance
        } else {
            cov - &gain * hp
        };
        symmetrize(&mut p);
        check_covariance(&p)?;
        Ok(MagUpdate {
            state: state.inject(&dx),
            cov: p,
            nis,
            used: m,
            variance,
        })
    }

    /// Linear update with a direct position measurement.
    pub fn position_update(
        &self,
        state: &FullState,
        cov: &ErrorCovariance,
        p_meas: &Vector3<f64>,
        sigma: f64,
    ) -> Result<(FullState, ErrorCovariance), FilterError> {
        let z = p_meas - state.ins.p;
        let mut s: Matrix3<f64> = cov.fixed_view::<3, 3>(POS, POS).into_owned();
        for i in 0..3 {
            s[(i, i)] += sigma * sigma;
        }
        let s_inv = s
            .try_inverse()
            .ok_or(FilterError::SingularInnovation { dim: 3 })?;
        let hp = cov.rows(POS, 3).into_owned();
        let gain = hp.transpose() * s_inv;
        let dx = &gain * z;
        let mut p = cov - &gain * hp;
        symmetrize(&mut p);
        check_covariance(&p)?;
        Ok((state.inject(&dx), p))
    }
}

/// Filter output for one epoch.
#[derive(Clone, Debug)]
pub struct EpochEstimate {
    pub t: f64,
    pub state: FullState,
    pub cov_diag: DVector<f64>,
    /// Position block of the covariance.
    pub pos_cov: Matrix3<f64>,
    pub cov: Option<ErrorCovariance>,
    pub nis: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FilterRun {
    pub epochs: Vec<EpochEstimate>,
    /// Epochs whose magnetometer snapshot was rejected as non-finite.
    pub rejected: Vec<usize>,
    pub mag_dim: usize,
}

impl FilterRun {
    pub fn trajectory(&self) -> Vec<crate::dataio::TrajectoryPoint> {
        self.epochs
            .iter()
            .map(|e| crate::dataio::TrajectoryPoint {
                t: e.t,
                p: e.state.ins.p,
                q: e.state.ins.q,
                v: e.state.ins.v,
                cov_diag: e.cov_diag.iter().copied().collect(),
            })
            .collect()
    }
}

fn record(
    t: f64,
    state: &FullState,
    cov: &ErrorCovariance,
    keep: bool,
    nis: Option<f64>,
) -> EpochEstimate {
    EpochEstimate {
        t,
        state: state.clone(),
        cov_diag: cov.diagonal(),
        pos_cov: cov.fixed_view::<3, 3>(POS, POS).into_owned(),
        cov: keep.then(|| cov.clone()),
        nis,
    }
}

/// Runs the filter over a dataset with an explicit initial INS state.
pub fn run_filter_from(
    dataset: &Dataset,
    geometry: &ArrayGeometry,
    cfg: &FilterConfig,
    initial: NavState,
) -> Result<FilterRun, FilterError> {
    let mains = Mains::new(geometry, cfg.clone())?;
    let align = dataset.align();
    let imu = &dataset.imu;
    let t0 = imu[0].t;

    let first_snapshot = align
        .mag
        .iter()
        .flatten()
        .map(|&i| &dataset.mag[i].values)
        .find(|y| y.iter().all(|v| v.is_finite()));
    if cfg.mag_updates && first_snapshot.is_none() {
        return Err(FilterError::NoInitialSnapshot);
    }
    let mut state = mains.initial_state(initial, first_snapshot)?;
    let mut cov = mains.initial_covariance();
    let mut epochs = Vec::with_capacity(imu.len());
    let mut rejected = Vec::new();
    epochs.push(record(t0, &state, &cov, cfg.keep_covariance, None));

    for k in 0..imu.len() - 1 {
        let t = imu[k + 1].t;
        let ts = t - imu[k].t;
        let epoch = k + 1;
        (state, cov) = mains
            .predict(&state, &cov, &imu[k], ts)
            .map_err(|e| e.at(epoch, t))?;

        let mut nis = None;
        if cfg.mag_updates {
            if let Some(j) = align.mag[epoch] {
                match mains.update(&state, &cov, &dataset.mag[j].values) {
                    Ok(upd) => {
                        state = upd.state;
                        cov = upd.cov;
                        nis = Some(upd.nis);
                    }
                    Err(FilterError::NonFiniteMeasurement { .. }) => rejected.push(epoch),
                    Err(e) => return Err(e.at(epoch, t)),
                }
            }
        }
        if t - t0 < cfg.aiding_seconds {
            if let (Some(truth), Some(j)) = (&dataset.truth, align.truth[epoch]) {
                (state, cov) = mains
                    .position_update(&state, &cov, &truth[j].p, cfg.position_sigma)
                    .map_err(|e| e.at(epoch, t))?;
            }
        }
        if !state.is_finite() {
            return Err(FilterError::Divergence {
                detail: "non-finite nominal state".into(),
            }
            .at(epoch, t));
        }
        epochs.push(record(t, &state, &cov, cfg.keep_covariance, nis));
    }
    Ok(FilterRun {
        epochs,
        rejected,
        mag_dim: mains.model.dim(),
    })
}

/// Runs the filter, starting from the ground-truth pose at the first IMU
/// sample when available (zero biases) and from rest at the origin otherwise.
pub fn run_filter(
    dataset: &Dataset,
    geometry: &ArrayGeometry,
    cfg: &FilterConfig,
) -> Result<FilterRun, FilterError> {
    let align = dataset.align();
    let initial = match (&dataset.truth, align.truth.first().copied().flatten()) {
        (Some(truth), Some(j)) => NavState {
            p: truth[j].p,
            v: truth[j].v.unwrap_or_else(Vector3::zeros),
            q: truth[j].q,
            ..NavState::default()
        },
        _ => NavState::default(),
    };
    run_filter_from(dataset, geometry, cfg, initial)
}
