//! Multi-way registration of partially overlapping surfaces.
//!
//! The joint objective over poses `T = {T_i}` and line-process weights
//! `L = {l_pq}` is
//!
//! ```text
//! E(T, L) = λ Σ_i Σ_{(p,q)∈K_i} |T_i p − T_{i+1} q|²
//!         + Σ_{i<j} Σ_{(p,q)∈K_ij} ( l_pq |T_i p − T_j q|² + μ (√l_pq − 1)² )
//! ```
//!
//! It is minimized by alternation: the closed-form weight update
//! `l = (μ / (μ + r²))²`, then one Gauss–Newton step on the stacked
//! small-angle twists `Ξ` solving `JᵀJ Ξ = −Jᵀ r`. Surface 0 is the gauge
//! anchor and never moves. `μ` is annealed from the squared correspondence
//! gate down to a floor; correspondences (mutual nearest neighbours) are
//! recomputed at the start of every phase.

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_twist, skew, PoseRecord, RigidTransform, TwistVector};
use crate::pointcloud::{
    remove_statistical_outliers, transform_cloud, KdTree, PointCloud, DEFAULT_OUTLIER_K, DEFAULT_OUTLIER_STD_RATIO,
};
use crate::scalar::Real;

/// Condition number above which the normal equations are damped.
const CONDITION_LIMIT: f64 = 1e12;
/// Relative diagonal damping applied to an ill-conditioned system.
const DAMPING: f64 = 1e-9;

/// Solver parameters. Lengths in mm, `mu` values in mm².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Weight of the consecutive-surface term.
    pub lambda: f64,
    /// Correspondence gate.
    pub max_corr_dist: f64,
    /// Starting robust scale; `None` uses `max_corr_dist²`.
    pub mu_initial: Option<f64>,
    pub mu_floor: f64,
    /// Iterations per annealing phase.
    pub anneal_every: usize,
    pub anneal_factor: f64,
    pub max_iterations: usize,
    /// Stop once the largest per-surface twist norm falls below this.
    pub convergence_tol: f64,
    pub max_backtracks: usize,
    pub outlier_k: usize,
    pub outlier_std_ratio: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            max_corr_dist: 20.0,
            mu_initial: None,
            mu_floor: 1.0,
            anneal_every: 4,
            anneal_factor: 2.0,
            max_iterations: 256,
            convergence_tol: 1e-6,
            max_backtracks: 8,
            outlier_k: DEFAULT_OUTLIER_K,
            outlier_std_ratio: DEFAULT_OUTLIER_STD_RATIO,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let fin = |v: f64| v.is_finite();
        if !(fin(self.lambda) && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if !(fin(self.max_corr_dist) && self.max_corr_dist > 0.0) {
            return Err(Error::invalid("max_corr_dist must be > 0"));
        }
        if let Some(mu) = self.mu_initial {
            if !(fin(mu) && mu > 0.0) {
                return Err(Error::invalid("mu_initial must be > 0"));
            }
        }
        if !(fin(self.mu_floor) && self.mu_floor > 0.0) {
            return Err(Error::invalid("mu_floor must be > 0"));
        }
        if self.anneal_every == 0 || self.max_iterations == 0 {
            return Err(Error::invalid("iteration counts must be >= 1"));
        }
        if !(self.anneal_factor >= 1.0) {
            return Err(Error::invalid("anneal_factor must be >= 1"));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::invalid("tolerances must be >= 0"));
        }
        if self.outlier_k == 0 {
            return Err(Error::invalid("outlier_k must be >= 1"));
        }
        Ok(())
    }

    pub fn initial_mu(&self) -> f64 {
        self.mu_initial
            .unwrap_or(self.max_corr_dist * self.max_corr_dist)
            .max(self.mu_floor)
    }
}

/// Surfaces already expressed in a common (robot-base) frame plus the
/// solver configuration.
#[derive(Debug, Clone)]
pub struct MultiwayProblem<T: Real> {
    surfaces: Vec<PointCloud<T>>,
    config: RegistrationConfig,
}

impl<T: Real> MultiwayProblem<T> {
    pub fn new(surfaces: Vec<PointCloud<T>>, config: RegistrationConfig) -> Result<Self> {
        if surfaces.len() < 2 {
            return Err(Error::invalid(format!(
                "multi-way registration needs at least 2 surfaces, got {}",
                surfaces.len()
            )));
        }
        config.validate()?;
        Ok(Self { surfaces, config })
    }

    pub fn surfaces(&self) -> &[PointCloud<T>] {
        &self.surfaces
    }

    pub fn config(&self) -> &RegistrationConfig {
        &self.config
    }

    pub fn lambda(&self) -> T {
        T::lit(self.config.lambda)
    }
}

/// Candidate correspondences `K_ij` between surfaces `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceSet {
    pub i: usize,
    pub j: usize,
    /// `(index in surface i, index in surface j)`, sorted by the first index.
    pub pairs: Vec<(usize, usize)>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Whether the set also feeds the consecutive-surface `λ` term.
    pub fn is_consecutive(&self) -> bool {
        self.j == self.i + 1
    }
}

/// One weight per correspondence, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineProcess<T> {
    pub weights: Vec<T>,
}

fn transformed_points<T: Real>(cloud: &PointCloud<T>, pose: &RigidTransform<T>) -> Vec<Vector3<T>> {
    cloud.points().iter().map(|p| pose.transform_point(p)).collect()
}

fn mutual_pairs<T: Real>(a: &KdTree<T>, b: &KdTree<T>, max_corr_dist: T) -> Vec<(usize, usize)> {
    let b_to_a: Vec<(usize, T)> = b.points().par_iter().map(|q| a.nearest(q)).collect();
    a.points()
        .par_iter()
        .enumerate()
        .filter_map(|(ia, p)| {
            let (ib, d) = b.nearest(p);
            (d <= max_corr_dist && b_to_a[ib].0 == ia).then_some((ia, ib))
        })
        .collect()
}

/// Mutual nearest-neighbour pairs between `P_i` and `P_j` under the given
/// poses, gated at `max_corr_dist`.
pub fn find_correspondences<T: Real>(
    (i, cloud_i, pose_i): (usize, &PointCloud<T>, &RigidTransform<T>),
    (j, cloud_j, pose_j): (usize, &PointCloud<T>, &RigidTransform<T>),
    max_corr_dist: T,
) -> CorrespondenceSet {
    if cloud_i.is_empty() || cloud_j.is_empty() {
        return CorrespondenceSet {
            i,
            j,
            pairs: Vec::new(),
        };
    }
    let a = KdTree::build(&transformed_points(cloud_i, pose_i)).expect("non-empty");
    let b = KdTree::build(&transformed_points(cloud_j, pose_j)).expect("non-empty");
    CorrespondenceSet {
        i,
        j,
        pairs: mutual_pairs(&a, &b, max_corr_dist),
    }
}

/// Correspondence sets for every surface pair `i < j`.
pub fn find_all_correspondences<T: Real>(
    problem: &MultiwayProblem<T>,
    poses: &[RigidTransform<T>],
) -> Vec<CorrespondenceSet> {
    let gate = T::lit(problem.config.max_corr_dist);
    let trees: Vec<Option<KdTree<T>>> = problem
        .surfaces
        .iter()
        .zip(poses)
        .map(|(c, p)| KdTree::build(&transformed_points(c, p)).ok())
        .collect();
    let n = trees.len();
    let mut sets = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let pairs = match (&trees[i], &trees[j]) {
                (Some(a), Some(b)) => mutual_pairs(a, b, gate),
                _ => Vec::new(),
            };
            sets.push(CorrespondenceSet { i, j, pairs });
        }
    }
    sets
}

/// Squared residuals `|T_i p − T_j q|²` for every pair of a set.
pub fn squared_residuals<T: Real>(
    problem: &MultiwayProblem<T>,
    poses: &[RigidTransform<T>],
    set: &CorrespondenceSet,
) -> Vec<T> {
    let (si, sj) = (&problem.surfaces[set.i], &problem.surfaces[set.j]);
    let (ti, tj) = (&poses[set.i], &poses[set.j]);
    set.pairs
        .iter()
        .map(|&(a, b)| (ti.transform_point(&si.points()[a]) - tj.transform_point(&sj.points()[b])).norm_squared())
        .collect()
}

/// Closed-form minimizer of the objective over one weight:
/// `l = (μ / (μ + r²))²`.
pub fn line_process_weight<T: Real>(residual_sq: T, mu: T) -> T {
    let s = mu / (mu + residual_sq);
    s * s
}

pub fn update_line_process<T: Real>(residuals_sq: &[T], mu: T) -> Result<LineProcess<T>> {
    if !(mu > T::zero()) {
        return Err(Error::invalid("mu must be > 0"));
    }
    Ok(LineProcess {
        weights: residuals_sq.iter().map(|&r| line_process_weight(r, mu)).collect(),
    })
}

/// Robust penalty `Ψ(l) = μ (√l − 1)²`.
pub fn penalty<T: Real>(l: T, mu: T) -> T {
    let d = l.sqrt() - T::one();
    mu * d * d
}

/// Line-process weights for all sets under the given poses.
pub fn line_processes<T: Real>(
    problem: &MultiwayProblem<T>,
    poses: &[RigidTransform<T>],
    sets: &[CorrespondenceSet],
    mu: T,
) -> Result<Vec<LineProcess<T>>> {
    sets.iter()
        .map(|s| update_line_process(&squared_residuals(problem, poses, s), mu))
        .collect()
}

fn check_consistent<T: Real>(
    problem: &MultiwayProblem<T>,
    poses: &[RigidTransform<T>],
    sets: &[CorrespondenceSet],
    lines: &[LineProcess<T>],
) -> Result<()> {
    if poses.len() != problem.surfaces.len() {
        return Err(Error::invalid("one pose per surface required"));
    }
    if sets.len() != lines.len() {
        return Err(Error::invalid("one line process per correspondence set required"));
    }
    for (s, l) in sets.iter().zip(lines) {
        if s.i >= s.j || s.j >= poses.len() {
            return Err(Error::invalid(format!("bad surface pair ({}, {})", s.i, s.j)));
        }
        if s.pairs.len() != l.weights.len() {
            return Err(Error::invalid("weights and correspondences differ in length"));
        }
    }
    Ok(())
}

/// Evaluates `E(T, L)`. The consecutive-surface term reuses the pairs of
/// each `(i, i + 1)` set with unit weights.
pub fn evaluate_objective<T: Real>(
    problem: &MultiwayProblem<T>,
    poses: &[RigidTransform<T>],
    sets: &[CorrespondenceSet],
    lines: &[LineProcess<T>],
    mu: T,
) -> Result<T> {
    check_consistent(problem, poses, sets, lines)?;
    let lambda = problem.lambda();
    let mut consecutive = T::zero();
    let mut robust = T::zero();
    for (set, lp) in sets.iter().zip(lines) {
        let res = squared_residuals(problem, poses, set);
        for (&r2, &l) in res.iter().zip(&lp.weights) {
            robust += l * r2 + penalty(l, mu);
            if set.is_consecutive() {
                consecutive += r2;
            }
        }
    }
    Ok(lambda * consecutive + robust)
}

/// Gauss–Newton step output.
#[derive(Debug, Clone)]
pub struct PoseUpdate<T: Real> {
    pub poses: Vec<RigidTransform<T>>,
    /// Stacked twists `Ξ`, six entries per surface (zeros for the anchor).
    pub stacked: DVector<T>,
    /// Condition number of the reduced normal matrix.
    pub condition: T,
    /// Whether diagonal damping had to be added.
    pub damped: bool,
}

impl<T: Real> PoseUpdate<T> {
    pub fn twist(&self, surface: usize) -> TwistVector<T> {
        let v = self.stacked.fixed_rows::<6>(6 * surface);
        TwistVector::from_vector(&Vector6::from_iterator(v.iter().copied()))
    }

    pub fn max_twist_norm(&self) -> T {
        max_twist_norm(&self.stacked)
    }
}

fn max_twist_norm<T: Real>(stacked: &DVector<T>) -> T {
    (0..stacked.len() / 6)
        .map(|i| stacked.rows(6 * i, 6).norm())
        .fold(T::zero(), |a, b| if b > a { b } else { a })
}

/// Jacobian of `T_i p` with respect to the twist of surface `i`, evaluated
/// at the current pose: `[ −[p']ₓ | I ]`.
fn point_jacobian<T: Real>(p: &Vector3<T>) -> Matrix3x6<T> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(p)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    j
}

/// Builds the weighted normal equations of all residual terms and solves
/// `JᵀJ Ξ = −Jᵀ r` with surface 0 held fixed, then applies each twist.
pub fn solve_pose_update<T: Real>(
    problem: &MultiwayProblem<T>,
    poses: &[RigidTransform<T>],
    sets: &[CorrespondenceSet],
    lines: &[LineProcess<T>],
) -> Result<PoseUpdate<T>> {
    check_consistent(problem, poses, sets, lines)?;
    if sets.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("no correspondences to solve with"));
    }
    let n = poses.len();
    let dim = 6 * n;
    let lambda = problem.lambda();
    let mut h = DMatrix::<T>::zeros(dim, dim);
    let mut g = DVector::<T>::zeros(dim);

    for (set, lp) in sets.iter().zip(lines) {
        let (si, sj) = (&problem.surfaces[set.i], &problem.surfaces[set.j]);
        let (ti, tj) = (&poses[set.i], &poses[set.j]);
        let mut hii = Matrix6::<T>::zeros();
        let mut hjj = Matrix6::<T>::zeros();
        let mut hij = Matrix6::<T>::zeros();
        let mut gi = Vector6::<T>::zeros();
        let mut gj = Vector6::<T>::zeros();
        for (&(a, b), &l) in set.pairs.iter().zip(&lp.weights) {
            let w = if set.is_consecutive() { l + lambda } else { l };
            let p = ti.transform_point(&si.points()[a]);
            let q = tj.transform_point(&sj.points()[b]);
            let e = p - q;
            let ji = point_jacobian(&p);
            let jj = -point_jacobian(&q);
            let ji_t = ji.transpose() * w;
            let jj_t = jj.transpose() * w;
            hii += ji_t * ji;
            hjj += jj_t * jj;
            hij += ji_t * jj;
            gi += ji_t * e;
            gj += jj_t * e;
        }
        let (oi, oj) = (6 * set.i, 6 * set.j);
        let mut block = h.fixed_view_mut::<6, 6>(oi, oi);
        block += hii;
        let mut block = h.fixed_view_mut::<6, 6>(oj, oj);
        block += hjj;
        let mut block = h.fixed_view_mut::<6, 6>(oi, oj);
        block += hij;
        let mut block = h.fixed_view_mut::<6, 6>(oj, oi);
        block += hij.transpose();
        let mut seg = g.fixed_rows_mut::<6>(oi);
        seg += gi;
        let mut seg = g.fixed_rows_mut::<6>(oj);
        seg += gj;
    }

    // gauge: drop the anchor block
    let hr = h.view((6, 6), (dim - 6, dim - 6)).into_owned();
    let rhs = -g.rows(6, dim - 6).into_owned();
    let (xr, condition, damped) = solve_normal_equations(hr, rhs);

    let mut stacked = DVector::<T>::zeros(dim);
    stacked.rows_mut(6, dim - 6).copy_from(&xr);
    let mut new_poses = poses.to_vec();
    for (i, pose) in new_poses.iter_mut().enumerate().skip(1) {
        let xi = TwistVector::from_vector(&Vector6::from_iterator(stacked.rows(6 * i, 6).iter().copied()));
        *pose = apply_twist(&xi, pose);
    }
    if damped {
        warn!(
            "normal equations ill-conditioned (condition {:.3e}); solved with damping",
            condition.as_f64()
        );
    }
    Ok(PoseUpdate {
        poses: new_poses,
        stacked,
        condition,
        damped,
    })
}

fn solve_normal_equations<T: Real>(h: DMatrix<T>, rhs: DVector<T>) -> (DVector<T>, T, bool) {
    let eig = SymmetricEigen::new(h.clone());
    let mut lo = T::lit(f64::INFINITY);
    let mut hi = T::zero();
    for &v in eig.eigenvalues.iter() {
        let a = v.abs();
        if a < lo {
            lo = a;
        }
        if a > hi {
            hi = a;
        }
    }
    let condition = if lo > T::zero() { hi / lo } else { T::lit(f64::INFINITY) };
    let well_posed = condition.as_f64() < CONDITION_LIMIT;
    if well_posed {
        if let Some(ch) = h.clone().cholesky() {
            return (ch.solve(&rhs), condition, false);
        }
    }
    let scale = h.diagonal().iter().fold(T::zero(), |a, &b| if b > a { b } else { a });
    let eps = if scale > T::zero() {
        scale * T::lit(DAMPING)
    } else {
        T::lit(DAMPING)
    };
    let mut damped = h;
    for k in 0..damped.nrows() {
        damped[(k, k)] += eps;
    }
    let x = match damped.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => damped.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(rhs.len())),
    };
    (x, condition, true)
}

/// Objective value recorded after a pose update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSample {
    pub iteration: usize,
    /// Index of the correspondence/annealing phase.
    pub phase: usize,
    pub mu: f64,
    pub objective: f64,
    pub correspondences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegistrationWarning {
    /// No correspondences under the initial poses; input poses returned.
    NoCorrespondences,
    IllConditioned {
        iteration: usize,
        condition: f64,
    },
}

#[derive(Debug, Clone)]
pub struct RegistrationResult<T: Real> {
    pub poses: Vec<RigidTransform<T>>,
    /// `Ξ` from the last accepted step.
    pub stacked_update: DVector<T>,
    pub objective_history: Vec<ObjectiveSample>,
    pub merged: PointCloud<T>,
    pub iterations: usize,
    pub warnings: Vec<RegistrationWarning>,
}

/// JSON form of a registration result (the merged cloud goes to PLY).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub poses: Vec<PoseRecord>,
    pub iterations: usize,
    pub objective_history: Vec<ObjectiveSample>,
    pub warnings: Vec<RegistrationWarning>,
    pub merged_points: usize,
}

impl<T: Real> RegistrationResult<T> {
    pub fn report(&self) -> RegistrationReport {
        RegistrationReport {
            poses: self.poses.iter().map(PoseRecord::from).collect(),
            iterations: self.iterations,
            objective_history: self.objective_history.clone(),
            warnings: self.warnings.clone(),
            merged_points: self.merged.len(),
        }
    }
}

/// Applies each pose to its surface, concatenates, and runs the
/// statistical outlier filter on the union.
pub fn merge_surfaces<T: Real>(
    surfaces: &[PointCloud<T>],
    poses: &[RigidTransform<T>],
    outlier_k: usize,
    outlier_std_ratio: T,
) -> Result<PointCloud<T>> {
    if surfaces.len() != poses.len() {
        return Err(Error::invalid("one pose per surface required"));
    }
    let moved: Vec<PointCloud<T>> = surfaces
        .iter()
        .zip(poses)
        .map(|(s, p)| transform_cloud(s, p, "base"))
        .collect();
    let union = PointCloud::concat(&moved, "base");
    remove_statistical_outliers(&union, outlier_k, outlier_std_ratio)
}

fn scaled_poses<T: Real>(poses: &[RigidTransform<T>], stacked: &DVector<T>, scale: T) -> Vec<RigidTransform<T>> {
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            if i == 0 {
                return *pose;
            }
            let v = Vector6::from_iterator(stacked.rows(6 * i, 6).iter().map(|&x| x * scale));
            apply_twist(&TwistVector::from_vector(&v), pose)
        })
        .collect()
}

/// Runs the full alternation starting from identity refinements.
pub fn multiway_register<T: Real>(problem: &MultiwayProblem<T>) -> Result<RegistrationResult<T>> {
    let n = problem.surfaces.len();
    let initial = vec![RigidTransform::identity(); n];
    multiway_register_from(problem, initial)
}

/// As [`multiway_register`] but starting from the given poses. Pose 0 is
/// never modified.
pub fn multiway_register_from<T: Real>(
    problem: &MultiwayProblem<T>,
    initial: Vec<RigidTransform<T>>,
) -> Result<RegistrationResult<T>> {
    let cfg = &problem.config;
    let n = problem.surfaces.len();
    if initial.len() != n {
        return Err(Error::invalid("one initial pose per surface required"));
    }
    let mut poses = initial;
    let mut mu = cfg.initial_mu();
    let floor = cfg.mu_floor;
    let tol = T::lit(cfg.convergence_tol);
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut stacked_update = DVector::zeros(6 * n);
    let mut iteration = 0;
    let mut phase = 0;

    while iteration < cfg.max_iterations {
        let sets = find_all_correspondences(problem, &poses);
        let total: usize = sets.iter().map(|s| s.len()).sum();
        if total == 0 {
            if iteration == 0 {
                warn!("no correspondences under the initial poses; returning them unchanged");
                warnings.push(RegistrationWarning::NoCorrespondences);
            }
            break;
        }
        let mu_t = T::lit(mu);
        let mut phase_converged = false;
        for _ in 0..cfg.anneal_every {
            if iteration >= cfg.max_iterations {
                break;
            }
            let lines = line_processes(problem, &poses, &sets, mu_t)?;
            let e_old = evaluate_objective(problem, &poses, &sets, &lines, mu_t)?;
            let update = solve_pose_update(problem, &poses, &sets, &lines)?;
            if update.damped {
                warnings.push(RegistrationWarning::IllConditioned {
                    iteration,
                    condition: update.condition.as_f64(),
                });
            }
            // accept the full step or the first halving that does not
            // increase the objective
            let mut scale = T::one();
            let mut candidate = update.poses.clone();
            let mut e_new = evaluate_objective(problem, &candidate, &sets, &lines, mu_t)?;
            let mut tries = 0;
            while e_new > e_old && tries < cfg.max_backtracks {
                scale *= T::lit(0.5);
                candidate = scaled_poses(&poses, &update.stacked, scale);
                e_new = evaluate_objective(problem, &candidate, &sets, &lines, mu_t)?;
                tries += 1;
            }
            iteration += 1;
            if e_new > e_old {
                history.push(ObjectiveSample {
                    iteration,
                    phase,
                    mu,
                    objective: e_old.as_f64(),
                    correspondences: total,
                });
                phase_converged = true;
                break;
            }
            poses = candidate;
            stacked_update = &update.stacked * scale;
            history.push(ObjectiveSample {
                iteration,
                phase,
                mu,
                objective: e_new.as_f64(),
                correspondences: total,
            });
            if max_twist_norm(&stacked_update) < tol {
                phase_converged = true;
                break;
            }
        }
        if phase_converged && mu <= floor {
            break;
        }
        mu = (mu / cfg.anneal_factor).max(floor);
        phase += 1;
    }

    let merged = merge_surfaces(&problem.surfaces, &poses, cfg.outlier_k, T::lit(cfg.outlier_std_ratio))?;
    Ok(RegistrationResult {
        poses,
        stacked_update,
        objective_history: history,
        merged,
        iterations: iteration,
        warnings,
    })
}
