//! Multi-session pose graphs with anchor nodes, solved by Levenberg-Marquardt
//! on sparse normal equations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use nalgebra_sparse::{factorization::CscCholesky, CooMatrix, CscMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{se3_right_jacobian_inv, Pose3};
use crate::session::{Session, Trajectory};

pub const REFERENCE_SESSION: usize = 0;
pub const QUERY_SESSION: usize = 1;

/// Smallest standard deviation a noise model will use.
pub const MIN_SIGMA: f64 = 1e-9;

/// Variable key. The derived order (poses by session then index, anchors
/// last) is the column order of the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VarId {
    Pose { session: usize, index: usize },
    Anchor { session: usize },
}

impl VarId {
    pub fn pose(session: usize, index: usize) -> Self {
        VarId::Pose { session, index }
    }

    pub fn anchor(session: usize) -> Self {
        VarId::Anchor { session }
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarId::Pose { session, index } => write!(f, "x{session}:{index}"),
            VarId::Anchor { session } => write!(f, "anchor{session}"),
        }
    }
}

pub type Values = BTreeMap<VarId, Pose3>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseKind {
    Diagonal([f64; 6]),
    Isotropic(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RobustKernel {
    Cauchy(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Standard deviations, `(rho, phi)` order.
    pub kind: NoiseKind,
    pub robust: Option<RobustKernel>,
}

impl NoiseModel {
    pub fn isotropic(sigma: f64) -> Result<Self> {
        Self::checked(NoiseKind::Isotropic(sigma))
    }

    pub fn diagonal(sigmas: [f64; 6]) -> Result<Self> {
        Self::checked(NoiseKind::Diagonal(sigmas))
    }

    /// Isotropic model from a variance; the standard deviation is clamped to
    /// [`MIN_SIGMA`].
    pub fn from_variance(variance: f64) -> Result<Self> {
        if !(variance > 0.0) {
            return Err(Error::InvalidParameter(format!("variance must be > 0, got {variance}")));
        }
        Self::isotropic(variance.sqrt().max(MIN_SIGMA))
    }

    pub fn with_cauchy(mut self, k: f64) -> Result<Self> {
        if !(k > 0.0) {
            return Err(Error::InvalidParameter("Cauchy k must be > 0".into()));
        }
        self.robust = Some(RobustKernel::Cauchy(k));
        Ok(self)
    }

    fn checked(kind: NoiseKind) -> Result<Self> {
        let ok = match kind {
            NoiseKind::Isotropic(s) => s > 0.0 && s.is_finite(),
            NoiseKind::Diagonal(s) => s.iter().all(|v| *v > 0.0 && v.is_finite()),
        };
        if !ok {
            return Err(Error::InvalidParameter("noise sigmas must be finite and > 0".into()));
        }
        Ok(Self { kind, robust: None })
    }

    pub fn sigmas(&self) -> Vector6<f64> {
        match self.kind {
            NoiseKind::Isotropic(s) => Vector6::repeat(s),
            NoiseKind::Diagonal(s) => Vector6::from_column_slice(&s),
        }
    }

    /// Divides by the standard deviations; the robust kernel is not applied.
    pub fn whiten(&self, r: &Vector6<f64>) -> Vector6<f64> {
        r.component_div(&self.sigmas())
    }

    /// Robust cost of a whitened residual norm `s`.
    pub fn loss(&self, s: f64) -> f64 {
        match self.robust {
            None => 0.5 * s * s,
            Some(RobustKernel::Cauchy(k)) => 0.5 * k * k * (s * s / (k * k)).ln_1p(),
        }
    }

    /// Iteratively reweighted least-squares weight for norm `s`.
    pub fn weight(&self, s: f64) -> f64 {
        match self.robust {
            None => 1.0,
            Some(RobustKernel::Cauchy(k)) => 1.0 / (1.0 + s * s / (k * k)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    /// `log(p⁻¹ ⊕ x)`.
    Prior { node: VarId, pose: Pose3, noise: NoiseModel },
    /// `log(u⁻¹ ⊕ relative(x_j, x_i))`.
    Between { i: VarId, j: VarId, relative: Pose3, noise: NoiseModel },
    /// `log(c⁻¹ ⊕ relative(Δ_R ⊕ x_R, Δ_Q ⊕ x_Q))`.
    AnchoredBetween {
        reference: VarId,
        query: VarId,
        anchor_reference: VarId,
        anchor_query: VarId,
        encounter: Pose3,
        noise: NoiseModel,
    },
}

/// Unwhitened residual and its Jacobian blocks.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: Vector6<f64>,
    pub jacobians: Vec<(VarId, Matrix6<f64>)>,
}

fn get(values: &Values, id: VarId) -> Result<&Pose3> {
    values.get(&id).ok_or_else(|| Error::MissingVariable(id.to_string()))
}

impl Factor {
    pub fn noise(&self) -> &NoiseModel {
        match self {
            Factor::Prior { noise, .. } | Factor::Between { noise, .. } | Factor::AnchoredBetween { noise, .. } => noise,
        }
    }

    pub fn variables(&self) -> Vec<VarId> {
        match *self {
            Factor::Prior { node, .. } => vec![node],
            Factor::Between { i, j, .. } => vec![i, j],
            Factor::AnchoredBetween { reference, query, anchor_reference, anchor_query, .. } => {
                vec![reference, query, anchor_reference, anchor_query]
            }
        }
    }

    fn error_pose(&self, values: &Values) -> Result<Pose3> {
        Ok(match self {
            Factor::Prior { node, pose, .. } => pose.inverse().compose(get(values, *node)?),
            Factor::Between { i, j, relative, .. } => {
                relative.inverse().compose(&get(values, *j)?.relative(get(values, *i)?))
            }
            Factor::AnchoredBetween { reference, query, anchor_reference, anchor_query, encounter, .. } => {
                let wr = get(values, *anchor_reference)?.compose(get(values, *reference)?);
                let wq = get(values, *anchor_query)?.compose(get(values, *query)?);
                encounter.inverse().compose(&wr.relative(&wq))
            }
        })
    }

    /// Unwhitened residual.
    pub fn residual(&self, values: &Values) -> Result<Vector6<f64>> {
        Ok(self.error_pose(values)?.log()?.to_vector())
    }

    /// Whitened residual (robust kernel not applied).
    pub fn whitened_residual(&self, values: &Values) -> Result<Vector6<f64>> {
        Ok(self.noise().whiten(&self.residual(values)?))
    }

    /// Residual with analytic Jacobians under right perturbations `x ⊕ exp(δ)`.
    pub fn linearize(&self, values: &Values) -> Result<Linearization> {
        let e = self.error_pose(values)?.log()?;
        let jr = se3_right_jacobian_inv(&e);
        let jacobians = match *self {
            Factor::Prior { node, .. } => vec![(node, jr)],
            Factor::Between { i, j, .. } => {
                let rel = get(values, j)?.relative(get(values, i)?);
                vec![(i, -jr * rel.inverse().adjoint()), (j, jr)]
            }
            Factor::AnchoredBetween { reference, query, anchor_reference, anchor_query, .. } => {
                let xr = get(values, reference)?;
                let xq = get(values, query)?;
                let dr = get(values, anchor_reference)?;
                let dq = get(values, anchor_query)?;
                let m = dq.inverse().compose(dr).compose(xr);
                let n = xq.inverse().compose(&m);
                vec![
                    (reference, jr),
                    (query, -jr * n.inverse().adjoint()),
                    (anchor_reference, jr * xr.inverse().adjoint()),
                    (anchor_query, -jr * m.inverse().adjoint()),
                ]
            }
        };
        Ok(Linearization { residual: e.to_vector(), jacobians })
    }
}

#[derive(Debug, Clone, Default)]
pub struct GraphProblem {
    pub variables: Values,
    pub factors: Vec<Factor>,
}

/// Variances for the two-session anchoring graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseVariances {
    /// Reference poses, reference anchor and the query's first pose.
    pub prior: f64,
    /// Query anchor.
    pub query_anchor: f64,
    pub odometry: f64,
    pub encounter: f64,
    pub cauchy_k: f64,
}

impl Default for NoiseVariances {
    fn default() -> Self {
        Self {
            prior: 1e-102,
            query_anchor: std::f64::consts::PI * std::f64::consts::PI,
            odometry: 1e-4,
            encounter: 0.5,
            cauchy_k: 1.0,
        }
    }
}

impl NoiseVariances {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prior", self.prior),
            ("query_anchor", self.query_anchor),
            ("odometry", self.odometry),
            ("encounter", self.encounter),
            ("cauchy_k", self.cauchy_k),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} variance must be finite and > 0")));
            }
        }
        Ok(())
    }

    pub fn encounter_noise(&self) -> Result<NoiseModel> {
        NoiseModel::from_variance(self.encounter)?.with_cauchy(self.cauchy_k)
    }
}

impl GraphProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: VarId, initial: Pose3) {
        self.variables.insert(id, initial);
    }

    pub fn add(&mut self, factor: Factor) {
        self.factors.push(factor);
    }

    /// Reference poses pinned by priors, both anchors at identity, query
    /// odometry and intra-session loops as between factors.
    pub fn two_session(reference: &Session, query: &Session, v: &NoiseVariances) -> Result<Self> {
        v.validate()?;
        let tight = NoiseModel::from_variance(v.prior)?;
        let odom = NoiseModel::from_variance(v.odometry)?;
        let mut p = GraphProblem::new();
        for (session, s) in [(REFERENCE_SESSION, reference), (QUERY_SESSION, query)] {
            for k in s.keyframes() {
                p.insert(VarId::pose(session, k.index), k.odom_pose);
            }
            for e in s.odometry_edges().iter().chain(s.loop_edges()) {
                p.add(Factor::Between {
                    i: VarId::pose(session, e.from),
                    j: VarId::pose(session, e.to),
                    relative: e.relative,
                    noise: odom,
                });
            }
            p.insert(VarId::anchor(session), Pose3::identity());
        }
        for k in reference.keyframes() {
            p.add(Factor::Prior { node: VarId::pose(REFERENCE_SESSION, k.index), pose: k.odom_pose, noise: tight });
        }
        if let Some(first) = query.keyframes().first() {
            p.add(Factor::Prior { node: VarId::pose(QUERY_SESSION, first.index), pose: first.odom_pose, noise: tight });
        }
        p.add(Factor::Prior { node: VarId::anchor(REFERENCE_SESSION), pose: Pose3::identity(), noise: tight });
        p.add(Factor::Prior {
            node: VarId::anchor(QUERY_SESSION),
            pose: Pose3::identity(),
            noise: NoiseModel::from_variance(v.query_anchor)?,
        });
        Ok(p)
    }

    /// Encounter `c` measured between reference keyframe `reference_index`
    /// and query keyframe `query_index`.
    pub fn add_encounter(&mut self, reference_index: usize, query_index: usize, encounter: Pose3, noise: NoiseModel) {
        self.add(Factor::AnchoredBetween {
            reference: VarId::pose(REFERENCE_SESSION, reference_index),
            query: VarId::pose(QUERY_SESSION, query_index),
            anchor_reference: VarId::anchor(REFERENCE_SESSION),
            anchor_query: VarId::anchor(QUERY_SESSION),
            encounter,
            noise,
        });
    }

    /// Robust objective at `values`.
    pub fn cost(&self, values: &Values) -> Result<f64> {
        let terms: Vec<f64> = self
            .factors
            .par_iter()
            .map(|f| {
                let r = f.whitened_residual(values)?;
                Ok(f.noise().loss(r.norm()))
            })
            .collect::<Result<_>>()?;
        Ok(terms.iter().sum())
    }

    /// Every factor variable exists, and every connected component of the
    /// factor graph holds a prior.
    pub fn check(&self) -> Result<()> {
        let ids: Vec<VarId> = self.variables.keys().copied().collect();
        let pos = |id: &VarId| ids.binary_search(id).map_err(|_| Error::MissingVariable(id.to_string()));
        let mut parent: Vec<usize> = (0..ids.len()).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let mut anchored = BTreeSet::new();
        for f in &self.factors {
            let vars = f.variables();
            let first = pos(&vars[0])?;
            for v in &vars[1..] {
                let (a, b) = (root(&mut parent, first), root(&mut parent, pos(v)?));
                parent[a] = b;
            }
            if let Factor::Prior { node, .. } = f {
                anchored.insert(pos(node)?);
            }
        }
        if anchored.is_empty() {
            return Err(Error::GaugeNotFixed);
        }
        let roots: BTreeSet<usize> = anchored.into_iter().map(|i| root(&mut parent, i)).collect();
        if (0..ids.len()).any(|i| !roots.contains(&root(&mut parent, i))) {
            return Err(Error::SingularNormalEquations);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub max_iterations: usize,
    pub lambda_initial: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    /// Stop when the relative cost decrease falls below this.
    pub relative_tolerance: f64,
    pub absolute_tolerance: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_initial: 1e-5,
            lambda_factor: 10.0,
            lambda_max: 1e12,
            relative_tolerance: 1e-10,
            absolute_tolerance: 1e-16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Accepted steps.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Whitened residual norm of each factor at the solution, in factor order.
    pub residual_norms: Vec<f64>,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct System {
    /// Upper and lower triplets of `JᵀWJ`.
    triplets: Vec<(usize, usize, f64)>,
    diagonal: DVector<f64>,
    gradient: DVector<f64>,
}

fn linearize_all(problem: &GraphProblem, values: &Values, column: &BTreeMap<VarId, usize>) -> Result<System> {
    let n = column.len() * 6;
    let blocks: Vec<(Vec<(VarId, Matrix6<f64>)>, Vector6<f64>)> = problem
        .factors
        .par_iter()
        .map(|f| {
            let lin = f.linearize(values)?;
            let noise = f.noise();
            let inv_sigma = noise.sigmas().map(|s| 1.0 / s);
            let r = lin.residual.component_mul(&inv_sigma);
            let w = noise.weight(r.norm()).sqrt();
            let scale = Matrix6::from_diagonal(&inv_sigma) * w;
            let jac = lin.jacobians.into_iter().map(|(id, j)| (id, scale * j)).collect();
            Ok((jac, r * w))
        })
        .collect::<Result<_>>()?;
    let mut triplets = Vec::new();
    let mut diagonal = DVector::zeros(n);
    let mut gradient = DVector::zeros(n);
    for (jac, r) in &blocks {
        for (a, ja) in jac {
            let ca = column[a];
            let g = ja.transpose() * r;
            for k in 0..6 {
                gradient[ca + k] += g[k];
            }
            for (b, jb) in jac {
                let cb = column[b];
                let h = ja.transpose() * jb;
                for r_ in 0..6 {
                    for c_ in 0..6 {
                        triplets.push((ca + r_, cb + c_, h[(r_, c_)]));
                        if ca == cb && r_ == c_ {
                            diagonal[ca + r_] += h[(r_, c_)];
                        }
                    }
                }
            }
        }
    }
    Ok(System { triplets, diagonal, gradient })
}

fn solve_damped(sys: &System, lambda: f64) -> Option<DVector<f64>> {
    let n = sys.gradient.len();
    let mut coo = CooMatrix::new(n, n);
    for &(i, j, v) in &sys.triplets {
        coo.push(i, j, v);
    }
    for i in 0..n {
        coo.push(i, i, lambda * sys.diagonal[i].max(1e-9));
    }
    let csc = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&csc).ok()?;
    let rhs = DMatrix::from_column_slice(n, 1, (-&sys.gradient).as_slice());
    let x = chol.solve(&rhs);
    let x = DVector::from_column_slice(x.as_slice());
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn retract(values: &Values, column: &BTreeMap<VarId, usize>, delta: &DVector<f64>) -> Values {
    values
        .iter()
        .map(|(id, p)| {
            let c = column[id];
            (*id, p.retract(&delta.fixed_rows::<6>(c).into_owned()))
        })
        .collect()
}

/// Levenberg-Marquardt with Marquardt diagonal damping. Robust factors are
/// handled by reweighting at every linearization.
pub fn solve(problem: &GraphProblem, config: &SolveConfig) -> Result<(Values, SolveReport)> {
    problem.check()?;
    let column: BTreeMap<VarId, usize> = problem.variables.keys().enumerate().map(|(i, id)| (*id, 6 * i)).collect();
    let mut values = problem.variables.clone();
    let initial_cost = problem.cost(&values)?;
    let mut cost = initial_cost;
    let mut lambda = config.lambda_initial;
    let mut iterations = 0;
    let mut converged = cost <= config.absolute_tolerance;
    'outer: while !converged && iterations < config.max_iterations {
        let sys = linearize_all(problem, &values, &column)?;
        loop {
            if lambda > config.lambda_max {
                // no step improves the cost at any damping: local minimum to working precision
                converged = true;
                break 'outer;
            }
            let Some(delta) = solve_damped(&sys, lambda) else {
                lambda *= config.lambda_factor;
                continue;
            };
            let candidate = retract(&values, &column, &delta);
            let new_cost = problem.cost(&candidate).unwrap_or(f64::INFINITY);
            if new_cost <= cost {
                let decrease = cost - new_cost;
                values = candidate;
                iterations += 1;
                converged = decrease <= config.relative_tolerance * cost
                    || new_cost <= config.absolute_tolerance
                    || delta.amax() < 1e-12;
                cost = new_cost;
                lambda = (lambda / config.lambda_factor).max(1e-12);
                break;
            }
            lambda *= config.lambda_factor;
        }
    }
    let residual_norms = problem
        .factors
        .iter()
        .map(|f| f.whitened_residual(&values).map(|r| r.norm()))
        .collect::<Result<_>>()?;
    Ok((
        values,
        SolveReport { iterations, initial_cost, final_cost: cost, converged, residual_norms },
    ))
}

/// World-frame trajectory of one session: `anchor ⊕ x_i` stamped with the
/// keyframe timestamps.
pub fn to_world(values: &Values, session_id: usize, session: &Session) -> Result<Trajectory> {
    let anchor = *get(values, VarId::anchor(session_id))?;
    let entries = session
        .keyframes()
        .iter()
        .map(|k| Ok((k.timestamp, anchor.compose(get(values, VarId::pose(session_id, k.index))?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory::from_pairs(entries))
}

/// Session poses in index order, without the anchor.
pub fn local_poses(values: &Values, session_id: usize) -> Vec<Pose3> {
    values
        .iter()
        .filter_map(|(id, p)| match id {
            VarId::Pose { session, .. } if *session == session_id => Some(*p),
            _ => None,
        })
        .collect()
}

/// Central finite-difference Jacobian of the unwhitened residual with respect
/// to `var`, perturbing on the right.
pub fn numeric_jacobian(factor: &Factor, values: &Values, var: VarId, h: f64) -> Result<Matrix6<f64>> {
    let base = *get(values, var)?;
    let mut j = Matrix6::zeros();
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = h;
        let mut v = values.clone();
        v.insert(var, base.retract(&d));
        let plus = factor.residual(&v)?;
        v.insert(var, base.retract(&-d));
        let minus = factor.residual(&v)?;
        j.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    Ok(j)
}

/// Random pose with angle below `max_angle` and translation within `extent`.
pub fn random_pose(rng: &mut impl rand::Rng, extent: f64, max_angle: f64) -> Pose3 {
    use nalgebra::Vector3;
    let rho = Vector3::new(
        rng.random_range(-extent..=extent),
        rng.random_range(-extent..=extent),
        rng.random_range(-extent..=extent),
    );
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let phi = axis.try_normalize(1e-9).unwrap_or(Vector3::z()) * rng.random_range(0.0..max_angle);
    Pose3::new(crate::geometry::so3_exp(&phi), rho)
}
