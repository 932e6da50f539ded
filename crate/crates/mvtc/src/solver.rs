//! Batch completion solver: two-stage initialization (nonnegative CP on the
//! fully observed slabs, then masked nonnegative least squares for the
//! under-reported GD rows), followed by an EM-like alternating loop of
//! extrapolated prox-linear factor updates and imputation of the missing
//! entries.
//!
//! Gradients are those of the stated objective (data term plus regularizers),
//! so they match finite differences; step sizes come from spectral bounds
//! inflated by (1 + tol) to absorb eigenvalue-estimation error.

use crate::error::{Error, Result};
use crate::events::MultiVersionDataset;
use crate::graph::{largest_eig, LocationGraph, SmoothnessOperator};
use crate::matrix::Matrix;
use crate::tensor::{reconstruct, FactorSet, ObservationMask, Tensor3, Tensor4};
use serde::{Deserialize, Serialize};
use std::time::Instant;

const EIG_TOL: f64 = 1e-6;
const NNLS_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Momentum {
    None,
    Fista,
}

/// Factor being updated: A (locations), B (features), C (update index),
/// D (generation dates).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMode {
    A,
    B,
    C,
    D,
}

pub const ALL_MODES: [FactorMode; 4] = [FactorMode::A, FactorMode::B, FactorMode::C, FactorMode::D];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rank: usize,
    /// Weight balancing the fully observed vs incomplete residual terms.
    pub alpha: f64,
    /// Graph regularization weight on the location factor.
    pub rho_a: f64,
    /// Smoothness regularization weight on the update and GD factors.
    pub rho: f64,
    pub max_outer_iters: usize,
    /// Stop when the relative objective change falls below this.
    pub tol_rel_obj: f64,
    /// Stop when the projected-gradient residual falls below this.
    pub tol_station: f64,
    pub momentum: Momentum,
    /// Sweeps of the initialization factorization.
    pub init_iters: usize,
    pub seed: u64,
    /// Reproduce the unextrapolated, unprojected factor update for
    /// comparison runs.
    pub literal_update: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rank: 5,
            alpha: 0.7,
            rho_a: 0.01,
            rho: 0.01,
            max_outer_iters: 500,
            tol_rel_obj: 1e-9,
            tol_station: 1e-6,
            momentum: Momentum::Fista,
            init_iters: 50,
            seed: 0,
            literal_update: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::arg("rank must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::arg("alpha must be in (0, 1)"));
        }
        if self.rho_a < 0.0 || self.rho < 0.0 {
            return Err(Error::arg("regularization weights must be >= 0"));
        }
        if self.tol_rel_obj <= 0.0 || self.tol_station <= 0.0 {
            return Err(Error::arg("tolerances must be > 0"));
        }
        Ok(())
    }

    /// Serializes as the flat `key = value` run-config format.
    pub fn to_kv_string(&self) -> String {
        let momentum = match self.momentum {
            Momentum::None => "none",
            Momentum::Fista => "fista",
        };
        format!(
            "rank = {}\nalpha = {}\nrho_a = {}\nrho = {}\nmax_outer_iters = {}\n\
             tol_rel_obj = {}\ntol_station = {}\nmomentum = {}\ninit_iters = {}\n\
             seed = {}\nliteral_update = {}\n",
            self.rank,
            self.alpha,
            self.rho_a,
            self.rho,
            self.max_outer_iters,
            self.tol_rel_obj,
            self.tol_station,
            momentum,
            self.init_iters,
            self.seed,
            self.literal_update
        )
    }

    /// Parses the flat `key = value` run-config format; unknown keys are
    /// rejected, missing keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = SolverConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("config line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = || Error::arg(format!("config line {}: bad value for {key}", lineno + 1));
            match key {
                "rank" => cfg.rank = value.parse().map_err(|_| bad())?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad())?,
                "rho_a" => cfg.rho_a = value.parse().map_err(|_| bad())?,
                "rho" => cfg.rho = value.parse().map_err(|_| bad())?,
                "max_outer_iters" => cfg.max_outer_iters = value.parse().map_err(|_| bad())?,
                "tol_rel_obj" => cfg.tol_rel_obj = value.parse().map_err(|_| bad())?,
                "tol_station" => cfg.tol_station = value.parse().map_err(|_| bad())?,
                "momentum" => {
                    cfg.momentum = match value {
                        "none" => Momentum::None,
                        "fista" => Momentum::Fista,
                        _ => return Err(bad()),
                    }
                }
                "init_iters" => cfg.init_iters = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "literal_update" => cfg.literal_update = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::arg(format!("config line {}: unknown key {key}", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-GD-slab square-root weights: √α for the fully observed slabs
/// (1..S−K+1), √(1−α) for the under-reported tail.
pub fn build_weighting(alpha: f64, s_dim: usize, k_dim: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::arg("alpha must be in (0, 1)"));
    }
    let full = s_dim.saturating_sub(k_dim - 1);
    Ok((0..s_dim)
        .map(|s| {
            if s < full {
                alpha.sqrt()
            } else {
                (1.0 - alpha).sqrt()
            }
        })
        .collect())
}

/// Extrapolation-weight recurrence: given e^(τ), returns (e^(τ+1), ν^(τ))
/// with ν = (e^(τ) − 1)/e^(τ+1) clamped to [0, 1).
pub fn momentum_step(e: f64) -> (f64, f64) {
    let e_next = (1.0 + (4.0 * e * e + 1.0).sqrt()) / 2.0;
    let nu = ((e - 1.0) / e_next).clamp(0.0, 1.0 - f64::EPSILON);
    (e_next, nu)
}

/// Y = P_{Ω^c}(reconstruct(θ)) + P_Ω(X): observed entries are copied from
/// the data bit-exactly, missing entries come from the model.
pub fn impute(theta: &FactorSet, x: &Tensor4, mask: &ObservationMask) -> Tensor4 {
    let mut y = reconstruct(theta);
    let [i_dim, j_dim, k_dim, s_dim] = x.dims();
    for s in 0..s_dim {
        for k in 0..k_dim {
            for j in 0..j_dim {
                for i in 0..i_dim {
                    if mask.is_observed(i, j, k, s) {
                        y.set(i, j, k, s, x.get(i, j, k, s));
                    }
                }
            }
        }
    }
    y
}

pub fn scale_slabs(t: &Tensor4, weights: &[f64]) -> Tensor4 {
    let mut out = t.clone();
    for (s, &w) in weights.iter().enumerate() {
        out.scale_slab(s, w);
    }
    out
}

fn hadamard3(mut a: Matrix, b: &Matrix, c: &Matrix) -> Matrix {
    a.hadamard_assign(b);
    a.hadamard_assign(c);
    a
}

fn extrapolate(m: &Matrix, prev: &Matrix, nu: f64) -> Matrix {
    if nu == 0.0 {
        return m.clone();
    }
    let mut out = m.clone();
    out.scale(1.0 + nu);
    out.add_scaled(prev, -nu);
    out
}

/// The optimization problem's fixed terms: slab weighting, regularizers,
/// and their cached spectral bounds.
pub struct ProblemTerms<'a> {
    pub weights: Vec<f64>,
    weights_sq: Vec<f64>,
    lap: Option<&'a Matrix>,
    rho_a: f64,
    rho: f64,
    smooth_c: SmoothnessOperator,
    smooth_d: SmoothnessOperator,
    bound_a: f64,
    bound_c: f64,
    bound_d: f64,
}

impl<'a> ProblemTerms<'a> {
    pub fn new(
        alpha: f64,
        s_dim: usize,
        k_dim: usize,
        lap: Option<&'a Matrix>,
        rho_a: f64,
        rho: f64,
    ) -> Result<Self> {
        let weights = build_weighting(alpha, s_dim, k_dim)?;
        Self::with_weights(weights, lap, rho_a, rho, k_dim, s_dim)
    }

    /// Unweighted, unregularized terms (plain nonnegative CP fitting).
    pub fn plain(s_dim: usize, k_dim: usize) -> Self {
        Self::with_weights(vec![1.0; s_dim], None, 0.0, 0.0, k_dim, s_dim).expect("no eig needed")
    }

    fn with_weights(
        weights: Vec<f64>,
        lap: Option<&'a Matrix>,
        rho_a: f64,
        rho: f64,
        k_dim: usize,
        s_dim: usize,
    ) -> Result<Self> {
        let smooth_c = SmoothnessOperator::new(k_dim);
        let smooth_d = SmoothnessOperator::new(s_dim);
        // spectral bounds cached once; λ_max(X+Y) ≤ λ_max(X)+λ_max(Y)
        let bound_a = match lap {
            Some(l) if rho_a > 0.0 => 2.0 * rho_a * largest_eig(l, EIG_TOL)?,
            _ => 0.0,
        };
        let (bound_c, bound_d) = if rho > 0.0 {
            (
                2.0 * rho * largest_eig(smooth_c.gram(), EIG_TOL)?,
                2.0 * rho * largest_eig(smooth_d.gram(), EIG_TOL)?,
            )
        } else {
            (0.0, 0.0)
        };
        let weights_sq = weights.iter().map(|w| w * w).collect();
        Ok(ProblemTerms {
            weights,
            weights_sq,
            lap,
            rho_a,
            rho,
            smooth_c,
            smooth_d,
            bound_a,
            bound_c,
            bound_d,
        })
    }

    /// αF₁ + (1−α)F₂ + ρ_A·tr(AᵀLA) + ρ‖ΓC‖² + ρ‖ΓD‖², evaluated against Y.
    pub fn objective(&self, theta: &FactorSet, y: &Tensor4) -> f64 {
        let ybar = scale_slabs(y, &self.weights);
        self.objective_with_ybar(theta, &ybar)
    }

    fn objective_with_ybar(&self, theta: &FactorSet, ybar: &Tensor4) -> f64 {
        let dbar = theta.d.scale_rows(&self.weights);
        let recw = reconstruct(&FactorSet {
            a: theta.a.clone(),
            b: theta.b.clone(),
            c: theta.c.clone(),
            d: dbar,
        });
        let mut value = ybar.frob_dist(&recw).powi(2);
        value += self.reg_value(theta);
        value
    }

    fn reg_value(&self, theta: &FactorSet) -> f64 {
        let mut value = 0.0;
        if let Some(lap) = self.lap {
            if self.rho_a > 0.0 {
                let la = lap.matmul(&theta.a).expect("dims checked");
                let mut tr = 0.0;
                for r in 0..theta.a.rows() {
                    for (x, y) in theta.a.row(r).iter().zip(la.row(r).iter()) {
                        tr += x * y;
                    }
                }
                value += self.rho_a * tr;
            }
        }
        if self.rho > 0.0 {
            let gc = self.smooth_c.gamma().matmul(&theta.c).expect("dims");
            let gd = self.smooth_d.gamma().matmul(&theta.d).expect("dims");
            value += self.rho * gc.frob_norm().powi(2);
            value += self.rho * gd.frob_norm().powi(2);
        }
        value
    }

    /// Gradient of the full objective w.r.t. one factor, evaluated at θ
    /// (no extrapolation). Matches central finite differences.
    pub fn gradient(&self, theta: &FactorSet, y: &Tensor4, mode: FactorMode) -> Result<Matrix> {
        let ybar = scale_slabs(y, &self.weights);
        let at = match mode {
            FactorMode::A => &theta.a,
            FactorMode::B => &theta.b,
            FactorMode::C => &theta.c,
            FactorMode::D => &theta.d,
        };
        let (grad, _) = self.grad_and_gamma(theta, y, &ybar, mode, at)?;
        Ok(grad)
    }

    /// Gradient at the extrapolated point `mhat` and the prox step size γ
    /// (inflated spectral bound).
    fn grad_and_gamma(
        &self,
        theta: &FactorSet,
        y: &Tensor4,
        ybar: &Tensor4,
        mode: FactorMode,
        mhat: &Matrix,
    ) -> Result<(Matrix, f64)> {
        let dbar = theta.d.scale_rows(&self.weights);
        let (gram, mtt, reg_bound) = match mode {
            FactorMode::A => (
                hadamard3(theta.b.gram(), &theta.c.gram(), &dbar.gram()),
                crate::tensor::mttkrp(ybar, [&theta.b, &theta.c, &dbar], 1)?,
                self.bound_a,
            ),
            FactorMode::B => (
                hadamard3(theta.a.gram(), &theta.c.gram(), &dbar.gram()),
                crate::tensor::mttkrp(ybar, [&theta.a, &theta.c, &dbar], 2)?,
                0.0,
            ),
            FactorMode::C => (
                hadamard3(theta.a.gram(), &theta.b.gram(), &dbar.gram()),
                crate::tensor::mttkrp(ybar, [&theta.a, &theta.b, &dbar], 3)?,
                self.bound_c,
            ),
            FactorMode::D => (
                hadamard3(theta.a.gram(), &theta.b.gram(), &theta.c.gram()),
                crate::tensor::mttkrp(y, [&theta.a, &theta.b, &theta.c], 4)?,
                self.bound_d,
            ),
        };
        let mut grad = mhat.matmul(&gram)?;
        grad.add_scaled(&mtt, -1.0);
        let lam = largest_eig(&gram, EIG_TOL)?;
        let data_lip = match mode {
            FactorMode::D => {
                // residual rows are scaled by w_s²
                let maxw = self
                    .weights_sq
                    .iter()
                    .cloned()
                    .fold(0.0f64, f64::max);
                for (s, &w2) in self.weights_sq.iter().enumerate() {
                    for v in grad.row_mut(s) {
                        *v *= w2;
                    }
                }
                2.0 * maxw * lam
            }
            _ => 2.0 * lam,
        };
        grad.scale(2.0);
        match mode {
            FactorMode::A => {
                if let Some(lap) = self.lap {
                    if self.rho_a > 0.0 {
                        let la = lap.matmul(mhat)?;
                        grad.add_scaled(&la, 2.0 * self.rho_a);
                    }
                }
            }
            FactorMode::C => {
                if self.rho > 0.0 {
                    let gg = self.smooth_c.gram().matmul(mhat)?;
                    grad.add_scaled(&gg, 2.0 * self.rho);
                }
            }
            FactorMode::D => {
                if self.rho > 0.0 {
                    let gg = self.smooth_d.gram().matmul(mhat)?;
                    grad.add_scaled(&gg, 2.0 * self.rho);
                }
            }
            FactorMode::B => {}
        }
        let gamma = (1.0 + EIG_TOL) * (data_lip + reg_bound);
        Ok((grad, gamma))
    }
}

fn factor_mut(theta: &mut FactorSet, mode: FactorMode) -> &mut Matrix {
    match mode {
        FactorMode::A => &mut theta.a,
        FactorMode::B => &mut theta.b,
        FactorMode::C => &mut theta.c,
        FactorMode::D => &mut theta.d,
    }
}

fn factor_ref(theta: &FactorSet, mode: FactorMode) -> &Matrix {
    match mode {
        FactorMode::A => &theta.a,
        FactorMode::B => &theta.b,
        FactorMode::C => &theta.c,
        FactorMode::D => &theta.d,
    }
}

/// One prox-linear update of a single factor: extrapolate, gradient step with
/// spectral step size, project onto the nonnegative orthant. With
/// `literal = true` the step anchors at the un-extrapolated iterate and skips
/// the projection.
pub fn update_factor(
    theta: &mut FactorSet,
    prev: &mut FactorSet,
    mode: FactorMode,
    nu: f64,
    y: &Tensor4,
    ybar: &Tensor4,
    terms: &ProblemTerms,
    literal: bool,
    iter: usize,
) -> Result<()> {
    let current = factor_ref(theta, mode).clone();
    let mhat = extrapolate(&current, factor_ref(prev, mode), nu);
    let (grad, gamma) = terms.grad_and_gamma(theta, y, ybar, mode, &mhat)?;
    if !grad.is_finite() {
        return Err(Error::Divergence {
            iter,
            msg: "non-finite gradient".into(),
        });
    }
    if gamma <= 0.0 {
        // zero curvature and zero gradient; nothing to move
        *factor_mut(prev, mode) = current;
        return Ok(());
    }
    let mut new = if literal { current.clone() } else { mhat };
    new.add_scaled(&grad, -1.0 / gamma);
    if !literal {
        new.clamp_nonneg();
    }
    if !new.is_finite() {
        return Err(Error::Divergence {
            iter,
            msg: "non-finite factor".into(),
        });
    }
    *factor_mut(prev, mode) = current;
    *factor_mut(theta, mode) = new;
    Ok(())
}

/// Projected-gradient stationarity proxy at (θ, Y): Frobenius norm of
/// M − P₊(M − ∇f(M)/γ) over all factors, relative to 1 + ‖θ‖.
pub fn projected_residual(theta: &FactorSet, y: &Tensor4, terms: &ProblemTerms) -> Result<f64> {
    let ybar = scale_slabs(y, &terms.weights);
    let mut num = 0.0;
    let mut den = 0.0;
    for mode in ALL_MODES {
        let m = factor_ref(theta, mode);
        let (grad, gamma) = terms.grad_and_gamma(theta, y, &ybar, mode, m)?;
        den += m.frob_norm().powi(2);
        if gamma <= 0.0 {
            continue;
        }
        let mut stepped = m.clone();
        stepped.add_scaled(&grad, -1.0 / gamma);
        stepped.clamp_nonneg();
        num += m.frob_dist(&stepped).powi(2);
    }
    Ok(num.sqrt() / (1.0 + den.sqrt()))
}

/// Nonnegative least squares for one GD row: min_{d≥0} ‖x_obs − H d‖² with
/// H = A⊙B⊙C restricted to the first `k_obs` update slots, by projected
/// gradient with a spectral step size.
pub fn masked_slab_nnls(
    x: &Tensor4,
    s: usize,
    k_obs: usize,
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    tol: f64,
    max_iters: usize,
    warm_start: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let f = a.cols();
    let [i_dim, j_dim, k_dim, _] = x.dims();
    let k_obs = k_obs.min(k_dim);
    let c_trunc = Matrix::from_fn(k_obs, f, |r, col| c.get(r, col));
    let gram = hadamard3(a.gram(), &b.gram(), &c_trunc.gram());
    let mut rhs = vec![0.0; f];
    for k in 0..k_obs {
        for j in 0..j_dim {
            for i in 0..i_dim {
                let v = x.get(i, j, k, s);
                if v != 0.0 {
                    let ar = a.row(i);
                    let br = b.row(j);
                    let cr = c.row(k);
                    for (col, r) in rhs.iter_mut().enumerate() {
                        *r += v * ar[col] * br[col] * cr[col];
                    }
                }
            }
        }
    }
    let lam = largest_eig(&gram, EIG_TOL)?;
    if lam <= 0.0 {
        return Ok(vec![0.0; f]);
    }
    let step = 1.0 / ((1.0 + EIG_TOL) * lam);
    let mut d: Vec<f64> = match warm_start {
        Some(w) => w.iter().map(|&v| v.max(0.0)).collect(),
        None => vec![0.0; f],
    };
    let mut new = vec![0.0; f];
    for _ in 0..max_iters {
        for (r, nv) in new.iter_mut().enumerate() {
            let mut g = -rhs[r];
            for (col, &dv) in d.iter().enumerate() {
                g += gram.get(r, col) * dv;
            }
            *nv = (d[r] - step * g).max(0.0);
        }
        let diff: f64 = new
            .iter()
            .zip(d.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.copy_from_slice(&new);
        if diff <= tol * scale.max(1.0) {
            break;
        }
    }
    Ok(d)
}

/// Two-stage initialization: nonnegative CP on the fully observed slabs,
/// then masked NNLS for the under-reported GD rows.
pub fn init_factors(
    ds: &MultiVersionDataset,
    cfg: &SolverConfig,
) -> Result<(FactorSet, Vec<String>)> {
    cfg.validate()?;
    let [i_dim, j_dim, k_dim, s_dim] = ds.dims();
    if s_dim < k_dim {
        return Err(Error::UnsupportedShape(format!(
            "need at least K={k_dim} GDs for initialization, have {s_dim}"
        )));
    }
    let mut warnings = Vec::new();
    let total = i_dim * j_dim * k_dim * s_dim;
    let min_unfold = [i_dim, j_dim, k_dim, s_dim]
        .iter()
        .map(|&d| d.min(total / d))
        .min()
        .unwrap_or(1);
    if cfg.rank > min_unfold {
        warnings.push(format!(
            "rank {} exceeds the smallest unfolding dimension {min_unfold}; \
             the factorization is overcomplete",
            cfg.rank
        ));
    }

    let s_full = s_dim - k_dim + 1;
    let x = ds.tensor();
    let mut head = Tensor4::zeros([i_dim, j_dim, k_dim, s_full]);
    for s in 0..s_full {
        head.slab_mut(s).copy_from_slice(x.slab(s));
    }

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = cfg.rank;
    let mut theta = FactorSet::new(
        Matrix::random_uniform(i_dim, f, &mut rng),
        Matrix::random_uniform(j_dim, f, &mut rng),
        Matrix::random_uniform(k_dim, f, &mut rng),
        Matrix::random_uniform(s_full, f, &mut rng),
    )?;
    let mut prev = theta.clone();
    let terms = ProblemTerms::plain(s_full, k_dim);
    // head is fully observed: Y is fixed at the data throughout
    let ybar = head.clone();
    let mut e = 0.0f64;
    let mut last_obj = terms.objective_with_ybar(&theta, &ybar);
    for iter in 0..cfg.init_iters {
        let (e_next, nu) = momentum_step(e);
        for mode in ALL_MODES {
            update_factor(&mut theta, &mut prev, mode, nu, &head, &ybar, &terms, false, iter)?;
        }
        let obj = terms.objective_with_ybar(&theta, &ybar);
        if obj > last_obj * (1.0 + 1e-6) {
            e = 0.0;
        } else {
            e = e_next;
        }
        last_obj = obj;
    }

    // expand D to all S rows; the tail comes from masked NNLS against A⊙B⊙C
    let mut d_full = Matrix::zeros(s_dim, f);
    for s in 0..s_full {
        d_full.row_mut(s).copy_from_slice(theta.d.row(s));
    }
    for s in s_full..s_dim {
        let k_obs = ds.observed_updates(s);
        let row = masked_slab_nnls(
            x,
            s,
            k_obs,
            &theta.a,
            &theta.b,
            &theta.c,
            1e-8,
            NNLS_MAX_ITERS,
            None,
        )?;
        d_full.row_mut(s).copy_from_slice(&row);
    }
    theta.d = d_full;
    Ok((theta, warnings))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub hit_max_iters: bool,
    pub final_residual: f64,
    pub init_seconds: f64,
    pub loop_seconds: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub factors: FactorSet,
    /// Marginalized model estimate for every GD.
    pub estimate: Tensor3,
    /// Observed totals for fully reported slabs, model estimate for the
    /// under-reported tail.
    pub hybrid_estimate: Tensor3,
    pub diagnostics: Diagnostics,
}

fn hybrid_estimate(ds: &MultiVersionDataset, model: &Tensor3) -> Tensor3 {
    let mut out = model.clone();
    let agg = ds.aggregate();
    let [i_dim, j_dim, _] = model.dims();
    for s in 0..ds.fully_observed_slabs() {
        for j in 0..j_dim {
            for i in 0..i_dim {
                out.set(i, j, s, agg.get(i, j, s));
            }
        }
    }
    out
}

/// Full batch solve: initialization, then alternating extrapolated
/// prox-linear factor updates and imputation until the relative objective
/// change or the projected-gradient residual falls below tolerance.
pub fn fit(
    ds: &MultiVersionDataset,
    graph: Option<&LocationGraph>,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let [i_dim, _, k_dim, s_dim] = ds.dims();
    if let Some(g) = graph {
        if g.node_count() != i_dim {
            return Err(Error::arg(format!(
                "graph has {} nodes but the dataset has {i_dim} locations",
                g.node_count()
            )));
        }
    }

    let t_init = Instant::now();
    let (theta0, warnings) = init_factors(ds, cfg)?;
    let init_seconds = t_init.elapsed().as_secs_f64();

    // no under-reported slabs: the initialization already solved the problem
    if ds.fully_observed_slabs() == s_dim {
        let estimate = reconstruct(&theta0).marginalize_updates();
        let hybrid = hybrid_estimate(ds, &estimate);
        return Ok(FitResult {
            factors: theta0,
            estimate,
            hybrid_estimate: hybrid,
            diagnostics: Diagnostics {
                converged: true,
                init_seconds,
                warnings,
                ..Diagnostics::default()
            },
        });
    }

    let lap = graph.map(|g| g.laplacian());
    let terms = ProblemTerms::new(cfg.alpha, s_dim, k_dim, lap, cfg.rho_a, cfg.rho)?;
    let x = ds.tensor();
    let mask = ds.mask();

    let t_loop = Instant::now();
    let mut theta = theta0;
    let mut prev = theta.clone();
    let mut y = impute(&theta, x, mask);
    let mut ybar = scale_slabs(&y, &terms.weights);
    let mut e = 0.0f64;
    let mut trace = vec![terms.objective_with_ybar(&theta, &ybar)];
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..cfg.max_outer_iters {
        iterations = iter + 1;
        let (e_next, nu) = match cfg.momentum {
            Momentum::Fista => momentum_step(e),
            Momentum::None => (0.0, 0.0),
        };
        for mode in ALL_MODES {
            update_factor(
                &mut theta,
                &mut prev,
                mode,
                nu,
                &y,
                &ybar,
                &terms,
                cfg.literal_update,
                iter,
            )?;
        }
        y = impute(&theta, x, mask);
        ybar = scale_slabs(&y, &terms.weights);
        let obj = terms.objective_with_ybar(&theta, &ybar);
        if !obj.is_finite() {
            return Err(Error::Divergence {
                iter,
                msg: "non-finite objective".into(),
            });
        }
        let prev_obj = *trace.last().expect("trace nonempty");
        trace.push(obj);
        // monotone restart of the extrapolation on an objective increase
        if matches!(cfg.momentum, Momentum::Fista)
            && obj > prev_obj + 1e-6 * prev_obj.abs().max(1e-300)
        {
            e = 0.0;
        } else {
            e = e_next;
        }
        residual = projected_residual(&theta, &y, &terms)?;
        let rel_change = (prev_obj - obj).abs() / prev_obj.abs().max(1e-300);
        if rel_change < cfg.tol_rel_obj || residual < cfg.tol_station {
            converged = true;
            break;
        }
    }
    let loop_seconds = t_loop.elapsed().as_secs_f64();

    let mut warnings = warnings;
    let hit_max_iters = !converged;
    if hit_max_iters {
        warnings.push(format!(
            "stopped at max_outer_iters={} with residual {residual:.3e}",
            cfg.max_outer_iters
        ));
    }
    let estimate = reconstruct(&theta).marginalize_updates();
    let hybrid = hybrid_estimate(ds, &estimate);
    Ok(FitResult {
        factors: theta,
        estimate,
        hybrid_estimate: hybrid,
        diagnostics: Diagnostics {
            objective_trace: trace,
            iterations,
            converged,
            hit_max_iters,
            final_residual: residual,
            init_seconds,
            loop_seconds,
            warnings,
        },
    })
}
