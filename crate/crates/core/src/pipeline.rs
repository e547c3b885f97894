//! Query-to-reference alignment: descriptor loops validated by yaw-constrained
//! registration, a first anchored solve, neighbourhood loops with adaptive
//! noise, a second solve, then per-scan ICP against the dense reference cloud.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix6, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NnIndex, PointCloud, Pose3};
use crate::isc::{detect_loops, make_descriptor, IscDescriptor, IscParams, LoopCandidate};
use crate::posegraph::{
    self, GraphProblem, NoiseModel, NoiseVariances, SolveConfig, SolveReport, Values, VarId, QUERY_SESSION,
    REFERENCE_SESSION,
};
use crate::registration::{
    classify_alignment, classify_fitness, compute_fitness, crop_sphere, p2p_icp_indexed, proximity_groups,
    yaw_gicp_from, AlignmentClass, ClassThresholds, GicpCloud, RegistrationLogEntry, RegistrationParams,
    RegistrationResult,
};
use crate::session::{write_g2o_graph, write_tum, Edge, G2oGraph, Keyframe, Session, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub isc: IscParams,
    /// YawGICP parameters for both loop stages.
    pub registration: RegistrationParams,
    /// Correspondence distance of the first YawGICP pass; the second pass
    /// uses `registration.max_correspondence_distance`.
    pub coarse_correspondence_distance: f64,
    /// Voxel size for scans and submaps before YawGICP, meters.
    pub registration_voxel: f64,
    /// Reference scans per descriptor-loop submap.
    pub isc_submap_size: usize,
    /// A descriptor loop is kept iff at least `isc_gate_fitness` of the query
    /// scan lies within `isc_gate_distance` of the submap after registration.
    pub isc_gate_distance: f64,
    pub isc_gate_fitness: f64,
    pub noise: NoiseVariances,
    pub solve: SolveConfig,
    pub enable_knn_loops: bool,
    pub knn_k: usize,
    /// Fitness distances used to grade neighbourhood registrations.
    pub knn_fitness_f1: f64,
    pub knn_fitness_f2: f64,
    pub knn_thresholds: ClassThresholds,
    /// Encounter sigmas for well-registered and acceptable neighbourhood loops.
    pub knn_well_sigma: f64,
    pub knn_acceptable_sigma: f64,
    /// Apply the Cauchy kernel to neighbourhood encounters as well.
    pub knn_robust: bool,
    /// Final point-to-point ICP.
    pub icp: RegistrationParams,
    /// Voxel size of the ICP source scan, meters; one measured point is kept
    /// per voxel.
    pub icp_voxel: f64,
    pub final_f1: f64,
    pub final_f2: f64,
    pub exclusion: f64,
    pub class_thresholds: ClassThresholds,
    pub sphere_radius: f64,
    /// Surface sampling spacing used when the reference is a mesh, meters.
    pub reference_sampling: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            isc: IscParams::default(),
            registration: RegistrationParams::default(),
            coarse_correspondence_distance: 1.5,
            registration_voxel: 0.2,
            isc_submap_size: 3,
            isc_gate_distance: 0.3,
            isc_gate_fitness: 0.9,
            noise: NoiseVariances::default(),
            solve: SolveConfig::default(),
            enable_knn_loops: true,
            knn_k: 5,
            knn_fitness_f1: 0.05,
            knn_fitness_f2: 0.1,
            knn_thresholds: ClassThresholds { perfect: 0.6, good: 0.5 },
            knn_well_sigma: 0.01,
            knn_acceptable_sigma: 0.5f64.sqrt(),
            knn_robust: false,
            icp: RegistrationParams {
                max_correspondence_distance: 0.3,
                max_iterations: 50,
                convergence_epsilon: 1e-4,
                ..Default::default()
            },
            icp_voxel: 0.1,
            final_f1: 0.01,
            final_f2: 0.03,
            exclusion: 0.3,
            class_thresholds: ClassThresholds::default(),
            sphere_radius: 20.0,
            reference_sampling: 0.02,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.isc.validate()?;
        self.registration.validate()?;
        self.icp.validate()?;
        self.noise.validate()?;
        let positive = [
            ("coarse_correspondence_distance", self.coarse_correspondence_distance),
            ("isc_gate_distance", self.isc_gate_distance),
            ("knn_well_sigma", self.knn_well_sigma),
            ("knn_acceptable_sigma", self.knn_acceptable_sigma),
            ("sphere_radius", self.sphere_radius),
            ("reference_sampling", self.reference_sampling),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and > 0")));
            }
        }
        for (name, v) in [("registration_voxel", self.registration_voxel), ("icp_voxel", self.icp_voxel)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.isc_gate_fitness) {
            return Err(Error::InvalidParameter("isc_gate_fitness must be in [0, 1]".into()));
        }
        if self.isc_submap_size == 0 || self.knn_k == 0 {
            return Err(Error::InvalidParameter("isc_submap_size and knn_k must be >= 1".into()));
        }
        if !(0.0 <= self.knn_fitness_f1 && self.knn_fitness_f1 <= self.knn_fitness_f2) {
            return Err(Error::InvalidParameter("need 0 <= knn_fitness_f1 <= knn_fitness_f2".into()));
        }
        if !(0.0 <= self.final_f1 && self.final_f1 <= self.final_f2 && self.final_f2 <= self.exclusion) {
            return Err(Error::InvalidParameter("need 0 <= final_f1 <= final_f2 <= exclusion".into()));
        }
        Ok(())
    }

    fn encounter_noise(&self, kind: EncounterKind) -> Result<NoiseModel> {
        match kind {
            EncounterKind::Isc => self.noise.encounter_noise(),
            EncounterKind::KnnWell | EncounterKind::KnnAcceptable => {
                let sigma = if kind == EncounterKind::KnnWell { self.knn_well_sigma } else { self.knn_acceptable_sigma };
                let n = NoiseModel::isotropic(sigma)?;
                if self.knn_robust {
                    n.with_cauchy(self.noise.cauchy_k)
                } else {
                    Ok(n)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncounterKind {
    Isc,
    KnnWell,
    KnnAcceptable,
}

/// Inter-session loop closure between a reference and a query keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub reference_index: usize,
    pub query_index: usize,
    /// Reference keyframe pose in the query keyframe frame.
    pub pose: Pose3,
    pub kind: EncounterKind,
    /// Gate fitness for descriptor loops, `fitness_f2` for neighbourhood loops.
    pub fitness: f64,
}

fn downsampled_scans(session: &Session, voxel: f64) -> Vec<PointCloud> {
    session.keyframes().par_iter().map(|k| k.scan.voxel_downsample(voxel)).collect()
}

/// Indices of the `k` poses closest to `p`, nearest first, ties by index.
fn nearest_keyframes(poses: &[Pose3], p: &Vector3<f64>, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = poses.iter().enumerate().map(|(i, q)| ((q.translation() - p).norm_squared(), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Scans `members` merged into the frame `frame`.
fn submap(scans: &[PointCloud], poses: &[Pose3], members: &[usize], frame: &Pose3, voxel: f64) -> PointCloud {
    let inv = frame.inverse();
    let mut pts = Vec::new();
    for &m in members {
        let t = inv.compose(&poses[m]);
        pts.extend(scans[m].iter().map(|p| t.transform_point(p)));
    }
    pts.into_iter().collect::<PointCloud>().voxel_downsample(voxel)
}

/// Coarse pass at `coarse_correspondence_distance`, then the regular pass
/// from its result.
fn register(source: &GicpCloud, target: &GicpCloud, initial_yaw: f64, params: &RegistrationParams, coarse: f64) -> RegistrationResult {
    let mut x = Vector4::new(0.0, 0.0, 0.0, initial_yaw);
    if coarse > params.max_correspondence_distance {
        let first = yaw_gicp_from(source, target, &x, &RegistrationParams { max_correspondence_distance: coarse, ..*params });
        let t = first.transform.translation();
        x = Vector4::new(t.x, t.y, t.z, first.transform.yaw());
    }
    yaw_gicp_from(source, target, &x, params)
}

fn fraction_within(source: &GicpCloud, target: &GicpCloud, transform: &Pose3, distance: f64) -> f64 {
    let n = source.points().iter().filter(|p| target.index().nearest_within(&transform.transform_point(p), distance).is_some()).count();
    n as f64 / source.len().max(1) as f64
}

fn validate_with(
    candidates: &[LoopCandidate],
    query_scans: &[PointCloud],
    reference_scans: &[PointCloud],
    reference_poses: &[Pose3],
    config: &PipelineConfig,
) -> Vec<Encounter> {
    let reg = &config.registration;
    candidates
        .par_iter()
        .filter_map(|c| {
            let anchor = reference_poses.get(c.ref_index)?;
            let source = query_scans.get(c.query_index)?;
            let members = nearest_keyframes(reference_poses, anchor.translation(), config.isc_submap_size);
            let target = submap(reference_scans, reference_poses, &members, anchor, config.registration_voxel);
            let source = GicpCloud::new(source, reg.covariance_knn, reg.plane_regularization_epsilon).ok()?;
            let target = GicpCloud::new(&target, reg.covariance_knn, reg.plane_regularization_epsilon).ok()?;
            let r = register(&source, &target, c.yaw_estimate, reg, config.coarse_correspondence_distance);
            let fitness = fraction_within(&source, &target, &r.transform, config.isc_gate_distance);
            (fitness >= config.isc_gate_fitness).then(|| Encounter {
                reference_index: c.ref_index,
                query_index: c.query_index,
                // the transform places the query scan in the reference keyframe frame
                pose: r.transform.inverse(),
                kind: EncounterKind::Isc,
                fitness,
            })
        })
        .collect()
}

/// Registers each query scan against the submap of the three (configurable)
/// reference keyframes closest to its matched keyframe, starting from the
/// descriptor yaw. Candidates failing the fitness gate are dropped.
pub fn validate_isc_loops(
    candidates: &[LoopCandidate],
    query: &Session,
    reference: &Session,
    config: &PipelineConfig,
) -> Result<Vec<Encounter>> {
    config.validate()?;
    let qs = downsampled_scans(query, config.registration_voxel);
    let rs = downsampled_scans(reference, config.registration_voxel);
    Ok(validate_with(candidates, &qs, &rs, &reference.poses(), config))
}

fn knn_with(
    query_world: &[Pose3],
    query_scans: &[PointCloud],
    reference_scans: &[PointCloud],
    reference_poses: &[Pose3],
    config: &PipelineConfig,
) -> Vec<Encounter> {
    let reg = RegistrationParams {
        fitness_f1: config.knn_fitness_f1,
        fitness_f2: config.knn_fitness_f2,
        ..config.registration
    };
    (0..query_world.len())
        .into_par_iter()
        .filter_map(|i| {
            let w = &query_world[i];
            let qm = nearest_keyframes(query_world, w.translation(), config.knn_k);
            let rm = nearest_keyframes(reference_poses, w.translation(), config.knn_k);
            let source = submap(query_scans, query_world, &qm, w, config.registration_voxel);
            let target = submap(reference_scans, reference_poses, &rm, w, config.registration_voxel);
            let source = GicpCloud::new(&source, reg.covariance_knn, reg.plane_regularization_epsilon).ok()?;
            let target = GicpCloud::new(&target, reg.covariance_knn, reg.plane_regularization_epsilon).ok()?;
            let r = register(&source, &target, 0.0, &reg, config.coarse_correspondence_distance);
            let kind = match classify_alignment(&r, &config.knn_thresholds) {
                AlignmentClass::Perfect => EncounterKind::KnnWell,
                AlignmentClass::Good => EncounterKind::KnnAcceptable,
                _ => return None,
            };
            let j = *rm.first()?;
            Some(Encounter {
                reference_index: j,
                query_index: i,
                pose: w.compose(&r.transform).inverse().compose(&reference_poses[j]),
                kind,
                fitness: r.fitness_f2,
            })
        })
        .collect()
}

/// For every query keyframe, registers the submap of its `knn_k` nearest query
/// scans against the `knn_k` nearest reference scans, both expressed in the
/// keyframe's current world estimate. Well-registered and acceptable results
/// become encounters tagged with their class.
pub fn detect_knn_loops(
    query_world: &[Pose3],
    query: &Session,
    reference: &Session,
    config: &PipelineConfig,
) -> Result<Vec<Encounter>> {
    config.validate()?;
    if query_world.len() != query.len() {
        return Err(Error::LengthMismatch { left: query_world.len(), right: query.len() });
    }
    let qs = downsampled_scans(query, config.registration_voxel);
    let rs = downsampled_scans(reference, config.registration_voxel);
    Ok(knn_with(query_world, &qs, &rs, &reference.poses(), config))
}

#[derive(Debug, Clone)]
pub struct FinalIcp {
    pub poses: Vec<Pose3>,
    pub confidence: Vec<AlignmentClass>,
    pub log: Vec<RegistrationLogEntry>,
}

/// Point-to-point ICP of every query scan against the reference cloud cropped
/// around its keyframe group. Scans graded Bad or OutsideMap keep their input
/// pose.
pub fn final_icp(
    query_world: &[Pose3],
    query: &Session,
    reference_cloud: &PointCloud,
    config: &PipelineConfig,
) -> Result<FinalIcp> {
    config.validate()?;
    if reference_cloud.is_empty() {
        return Err(Error::EmptyReferenceCloud);
    }
    if query_world.len() != query.len() {
        return Err(Error::LengthMismatch { left: query_world.len(), right: query.len() });
    }
    let mut global: Option<NnIndex> = None;
    let mut out = FinalIcp {
        poses: query_world.to_vec(),
        confidence: vec![AlignmentClass::OutsideMap; query.len()],
        log: Vec::with_capacity(query.len()),
    };
    for (members, center) in proximity_groups(query_world, config.sphere_radius) {
        let crop = crop_sphere(reference_cloud, &center, config.sphere_radius);
        let local;
        let index = if crop.len() == reference_cloud.len() {
            if global.is_none() {
                global = Some(NnIndex::build(reference_cloud.points())?);
            }
            global.as_ref().expect("built above")
        } else if crop.is_empty() {
            for &m in &members {
                out.log.push(RegistrationLogEntry {
                    scan: m,
                    class: AlignmentClass::OutsideMap,
                    fitness_f1: 0.0,
                    fitness_f2: 0.0,
                    rmse: 0.0,
                    iterations: 0,
                });
            }
            continue;
        } else {
            local = NnIndex::build(crop.points())?;
            &local
        };
        let results: Vec<(usize, Pose3, RegistrationLogEntry)> = members
            .par_iter()
            .map(|&m| refine_one(m, &query_world[m], &query.keyframe(m).scan, index, config))
            .collect();
        for (m, pose, entry) in results {
            if entry.class.is_acceptable() {
                out.poses[m] = pose;
            }
            out.confidence[m] = entry.class;
            out.log.push(entry);
        }
    }
    out.log.sort_by_key(|e| e.scan);
    Ok(out)
}

fn refine_one(m: usize, initial: &Pose3, scan: &PointCloud, index: &NnIndex, config: &PipelineConfig) -> (usize, Pose3, RegistrationLogEntry) {
    let source = scan.voxel_select(config.icp_voxel);
    let (pose, iterations) = match p2p_icp_indexed(&source, index, initial, &config.icp) {
        Ok(r) => (r.transform, r.iterations),
        Err(_) => (*initial, 0),
    };
    let entry = |class, f1, f2, rmse| RegistrationLogEntry { scan: m, class, fitness_f1: f1, fitness_f2: f2, rmse, iterations };
    match compute_fitness(&scan.transformed(&pose), index, config.final_f1, config.final_f2, config.exclusion) {
        Ok(f) => {
            let class = classify_fitness(f.fitness_f1, f.fitness_f2, false, &config.class_thresholds);
            (m, pose, entry(class, f.fitness_f1, f.fitness_f2, f.rmse))
        }
        Err(_) => (m, pose, entry(AlignmentClass::OutsideMap, 0.0, 0.0, 0.0)),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    /// Seconds.
    pub isc_detection: f64,
    pub isc_validation: f64,
    pub stage1_solve: f64,
    pub knn_detection: f64,
    pub stage2_solve: f64,
    pub final_icp: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// World-frame query poses after the final ICP.
    pub world_trajectory: Trajectory,
    /// Query anchor after the second solve.
    pub anchor: Pose3,
    /// One class per query keyframe.
    pub confidence: Vec<AlignmentClass>,
    pub icp_log: Vec<RegistrationLogEntry>,
    pub stage1_trajectory: Trajectory,
    pub stage2_trajectory: Trajectory,
    pub isc_candidates: Vec<LoopCandidate>,
    pub isc_encounters: Vec<Encounter>,
    pub knn_encounters: Vec<Encounter>,
    pub stage1_report: SolveReport,
    pub stage2_report: SolveReport,
    /// Both sessions in the world frame with encounters as edges from query
    /// vertices (offset by the reference size) to reference vertices.
    pub graph: G2oGraph,
    pub timings: StageTimings,
}

impl PipelineOutput {
    pub fn confidence_csv(&self) -> String {
        let mut s = String::from("index,class,fitness_f1,fitness_f2,rmse\n");
        for e in &self.icp_log {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", e.scan, e.class, e.fitness_f1, e.fitness_f2, e.rmse);
        }
        s
    }

    /// The query keyframes at their final world poses, labelled `aligned`.
    pub fn aligned_session(&self, query: &Session) -> Result<Session> {
        if self.world_trajectory.len() != query.len() {
            return Err(Error::LengthMismatch { left: self.world_trajectory.len(), right: query.len() });
        }
        let keyframes = query
            .keyframes()
            .iter()
            .zip(self.world_trajectory.poses())
            .map(|(k, p)| Keyframe { odom_pose: *p, ..k.clone() })
            .collect();
        let info = query.odometry_edges().first().map_or(Edge::isotropic_information(crate::session::DEFAULT_ODOMETRY_VARIANCE), |e| e.information);
        Session::from_keyframes(keyframes, "aligned", info)
    }

    /// `trajectory.tum`, `stage1.tum`, `stage2.tum`, `graph.g2o`,
    /// `confidence.csv`, `timings.json`, `registration.jsonl`,
    /// `solve_stage1.json`, `solve_stage2.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tum(&self.world_trajectory, dir.join("trajectory.tum"))?;
        write_tum(&self.stage1_trajectory, dir.join("stage1.tum"))?;
        write_tum(&self.stage2_trajectory, dir.join("stage2.tum"))?;
        write_g2o_graph(&self.graph, dir.join("graph.g2o"))?;
        crate::registration::write_registration_log(dir.join("registration.jsonl"), &self.icp_log)?;
        let files = [
            ("confidence.csv", self.confidence_csv()),
            ("timings.json", serde_json::to_string_pretty(&self.timings).expect("timings serialize")),
            ("solve_stage1.json", self.stage1_report.to_json()),
            ("solve_stage2.json", self.stage2_report.to_json()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn descriptors(session: &Session, params: &IscParams) -> Vec<IscDescriptor> {
    session.keyframes().par_iter().map(|k| make_descriptor(&k.scan, params)).collect()
}

fn graph_with(reference: &Session, query: &Session, encounters: &[Encounter], config: &PipelineConfig) -> Result<GraphProblem> {
    let mut g = GraphProblem::two_session(reference, query, &config.noise)?;
    for e in encounters {
        g.add_encounter(e.reference_index, e.query_index, e.pose, config.encounter_noise(e.kind)?);
    }
    Ok(g)
}

fn world_poses(t: &Trajectory) -> Vec<Pose3> {
    t.poses().copied().collect()
}

fn export_graph(
    reference: &Session,
    query: &Session,
    values: &Values,
    encounters: &[Encounter],
    config: &PipelineConfig,
) -> Result<G2oGraph> {
    let n = reference.len();
    let rw = posegraph::to_world(values, REFERENCE_SESSION, reference)?;
    let qw = posegraph::to_world(values, QUERY_SESSION, query)?;
    let mut g = G2oGraph::default();
    g.vertices.extend(rw.poses().enumerate().map(|(i, p)| (i, *p)));
    g.vertices.extend(qw.poses().enumerate().map(|(i, p)| (n + i, *p)));
    g.edges.extend(reference.odometry_edges().iter().chain(reference.loop_edges()).copied());
    g.edges.extend(query.odometry_edges().iter().chain(query.loop_edges()).map(|e| Edge { from: e.from + n, to: e.to + n, ..*e }));
    for e in encounters {
        let sigmas = config.encounter_noise(e.kind)?.sigmas();
        g.edges.push(Edge {
            from: n + e.query_index,
            to: e.reference_index,
            relative: e.pose,
            information: Matrix6::from_diagonal(&sigmas.map(|s| 1.0 / (s * s))),
        });
    }
    Ok(g)
}

/// Full alignment of `query` to `reference`. `reference_cloud` is the dense
/// target of the final ICP, in the reference world frame.
pub fn run(query: &Session, reference: &Session, reference_cloud: &PointCloud, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    if query.is_empty() || reference.is_empty() {
        return Err(Error::InvalidSession("both sessions need keyframes".into()));
    }
    if reference_cloud.is_empty() {
        return Err(Error::EmptyReferenceCloud);
    }
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let mut lap = Instant::now();
    let mut tick = |slot: &mut f64| {
        *slot = lap.elapsed().as_secs_f64();
        lap = Instant::now();
    };

    let qd = descriptors(query, &config.isc);
    let rd = descriptors(reference, &config.isc);
    let candidates = detect_loops(&qd, &rd, &config.isc)?;
    tick(&mut timings.isc_detection);

    let qs = downsampled_scans(query, config.registration_voxel);
    let rs = downsampled_scans(reference, config.registration_voxel);
    let rposes = reference.poses();
    let isc = validate_with(&candidates, &qs, &rs, &rposes, config);
    if isc.is_empty() {
        return Err(Error::NoEncounters);
    }
    tick(&mut timings.isc_validation);

    let g1 = graph_with(reference, query, &isc, config)?;
    let (v1, r1) = posegraph::solve(&g1, &config.solve)?;
    let stage1 = posegraph::to_world(&v1, QUERY_SESSION, query)?;
    tick(&mut timings.stage1_solve);

    let (v2, r2, knn) = if config.enable_knn_loops {
        let knn = knn_with(&world_poses(&stage1), &qs, &rs, &rposes, config);
        tick(&mut timings.knn_detection);
        let mut all = isc.clone();
        all.extend_from_slice(&knn);
        let mut g2 = graph_with(reference, query, &all, config)?;
        g2.variables = v1.clone();
        let (v2, r2) = posegraph::solve(&g2, &config.solve)?;
        tick(&mut timings.stage2_solve);
        (v2, r2, knn)
    } else {
        (v1.clone(), r1.clone(), Vec::new())
    };
    let stage2 = posegraph::to_world(&v2, QUERY_SESSION, query)?;

    let icp = final_icp(&world_poses(&stage2), query, reference_cloud, config)?;
    tick(&mut timings.final_icp);

    let world = Trajectory::from_pairs(query.keyframes().iter().map(|k| k.timestamp).zip(icp.poses.iter().copied()).collect());
    let mut all = isc.clone();
    all.extend_from_slice(&knn);
    let graph = export_graph(reference, query, &v2, &all, config)?;
    timings.total = start.elapsed().as_secs_f64();
    Ok(PipelineOutput {
        world_trajectory: world,
        anchor: v2[&VarId::anchor(QUERY_SESSION)],
        confidence: icp.confidence,
        icp_log: icp.log,
        stage1_trajectory: stage1,
        stage2_trajectory: stage2,
        isc_candidates: candidates,
        isc_encounters: isc,
        knn_encounters: knn,
        stage1_report: r1,
        stage2_report: r2,
        graph,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{simulate_session, Wall, WorldLayout};
    use crate::sim::{LidarModel, TriangleMesh};
    use nalgebra::Vector6;

    const Z: f64 = 1.2;

    // two furnished rooms joined by a door in the x = 8 wall
    fn two_rooms() -> TriangleMesh {
        WorldLayout::empty_room((0.0, 0.0), (16.0, 8.0))
            .with_wall(Wall::new((8.0, 0.0), (8.0, 8.0), &[(3.0, 4.5)]))
            .with_box((1.0, 1.0, 0.0), (2.5, 2.0, 1.0))
            .with_box((5.0, 6.0, 0.0), (7.5, 8.0, 2.0))
            .with_box((0.0, 4.0, 0.0), (0.5, 5.5, 1.5))
            .with_box((10.0, 0.0, 0.0), (10.6, 3.0, 1.8))
            .with_box((13.0, 5.0, 0.0), (14.0, 6.5, 0.8))
            .with_box((15.2, 1.0, 0.0), (16.0, 2.5, 2.2))
            .with_box((11.0, 7.0, 0.0), (12.0, 8.0, 1.2))
            .build()
            .unwrap()
    }

    fn lidar() -> LidarModel {
        LidarModel { azimuth_resolution: 0.5, vertical_channels: 32, range_noise_sigma: 0.0, ..Default::default() }
    }

    fn at(x: f64, y: f64, yaw_deg: f64) -> Pose3 {
        Pose3::from_yaw(yaw_deg.to_radians(), Vector3::new(x, y, Z))
    }

    fn reference_poses() -> Vec<Pose3> {
        [(2.0, 4.0), (4.0, 2.0), (4.0, 5.5), (6.0, 3.5), (10.0, 4.0), (12.0, 2.0), (12.0, 5.5), (14.5, 4.0)]
            .iter()
            .map(|&(x, y)| at(x, y, 0.0))
            .collect()
    }

    fn session(mesh: &TriangleMesh, poses: &[Pose3], label: &str) -> Session {
        simulate_session(mesh, poses, poses, &lidar(), &IscParams::default(), 0.0, label).unwrap()
    }

    fn union_cloud(s: &Session) -> PointCloud {
        let mut c = PointCloud::empty();
        for k in s.keyframes() {
            c.extend_from(&k.scan.transformed(&k.odom_pose));
        }
        c
    }

    fn candidate(query_index: usize, ref_index: usize, yaw: f64) -> LoopCandidate {
        LoopCandidate { query_index, ref_index, shift: 0, yaw_estimate: yaw, distance: 0.0 }
    }

    fn fast() -> PipelineConfig {
        PipelineConfig::default()
    }

    #[test]
    fn default_config_is_valid() {
        fast().validate().unwrap();
        let bad = PipelineConfig { final_f1: 0.5, ..fast() };
        assert!(bad.validate().is_err());
        assert!(PipelineConfig { knn_k: 0, ..fast() }.validate().is_err());
    }

    #[test]
    fn self_alignment_recovers_reference() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let mut query = reference.clone();
        query.frame_label = "query".into();
        let out = run(&query, &reference, &union_cloud(&reference), &fast()).unwrap();
        assert_eq!(out.confidence.len(), query.len());
        assert!(out.confidence.iter().all(|c| *c == AlignmentClass::Perfect), "{:?}", out.confidence);
        for (p, r) in out.world_trajectory.poses().zip(reference.poses()) {
            assert!(p.max_abs_diff(&r) < 1e-4, "{p:?} vs {r:?}");
        }
        assert!(out.isc_encounters.iter().all(|e| e.reference_index == e.query_index));
    }

    #[test]
    fn wrong_room_is_rejected() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let query = session(&mesh, &[at(4.0, 2.0, 0.0)], "query");
        // keyframe 1 is the same spot in the west room, 5 the matching spot in the east room
        let cands = [candidate(0, 1, 0.0), candidate(0, 5, 0.0)];
        let enc = validate_isc_loops(&cands, &query, &reference, &fast()).unwrap();
        assert_eq!(enc.len(), 1);
        assert_eq!(enc[0].reference_index, 1);
        assert!(enc[0].pose.max_abs_diff(&Pose3::identity()) < 1e-3, "{:?}", enc[0].pose);
    }

    #[test]
    fn yaw_offset_is_recovered() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let wq = at(4.3, 2.2, 12.0);
        let query = session(&mesh, &[wq], "query");
        let enc = validate_isc_loops(&[candidate(0, 1, 12f64.to_radians())], &query, &reference, &fast()).unwrap();
        assert_eq!(enc.len(), 1);
        let truth = wq.inverse().compose(&reference.keyframe(1).odom_pose);
        let c = enc[0].pose;
        assert!((c.yaw() - truth.yaw()).abs().to_degrees() < 0.5, "{} vs {}", c.yaw(), truth.yaw());
        assert!((c.translation() - truth.translation()).norm() < 0.02);
    }

    #[test]
    fn knn_on_aligned_sessions_gives_identity_corrections() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let poses = reference.poses();
        for k in [5, 1] {
            let config = PipelineConfig { knn_k: k, ..fast() };
            let enc = detect_knn_loops(&poses, &reference, &reference, &config).unwrap();
            assert_eq!(enc.len(), poses.len(), "k = {k}");
            for e in &enc {
                assert_eq!(e.kind, EncounterKind::KnnWell);
                let truth = poses[e.query_index].inverse().compose(&poses[e.reference_index]);
                assert!(e.pose.max_abs_diff(&truth) < 1e-3, "k = {k}: {:?}", e);
            }
        }
    }

    #[test]
    fn knn_far_off_keyframe_is_unacceptable() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let mut world = reference.poses();
        world[1] = at(9.0, 2.0, 0.0);
        let config = PipelineConfig { knn_k: 1, ..fast() };
        let enc = detect_knn_loops(&world, &reference, &reference, &config).unwrap();
        assert!(enc.iter().all(|e| e.query_index != 1), "{enc:?}");
        assert_eq!(enc.len(), world.len() - 1);
    }

    #[test]
    fn final_icp_keeps_exact_poses() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let poses = reference.poses();
        let out = final_icp(&poses, &reference, &union_cloud(&reference), &fast()).unwrap();
        assert!(out.confidence.iter().all(|c| *c == AlignmentClass::Perfect));
        for (a, b) in out.poses.iter().zip(&poses) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        assert_eq!(out.log.len(), poses.len());
    }

    #[test]
    fn final_icp_removes_injected_offset() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let cloud = mesh.sample_surface(0.02).unwrap();
        let truth = reference.poses();
        let offset = Vector6::new(0.03, -0.03, 0.02, 0.0, 0.0, 0.004);
        let start: Vec<Pose3> = truth.iter().map(|p| p.retract(&offset)).collect();
        let out = final_icp(&start, &reference, &cloud, &fast()).unwrap();
        for (i, (p, t)) in out.poses.iter().zip(&truth).enumerate() {
            assert!(out.confidence[i].is_acceptable(), "{i}: {:?}", out.log[i]);
            assert!((p.translation() - t.translation()).norm() < 0.005, "{i}: {p:?}");
        }
    }

    #[test]
    fn scan_outside_the_map_keeps_its_pose() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let mut start = reference.poses();
        // keyframe 2 now claims to be 100 m away from anything in the cloud
        start[2] = at(104.0, 5.5, 0.0);
        let out = final_icp(&start, &reference, &union_cloud(&reference), &fast()).unwrap();
        assert_eq!(out.confidence[2], AlignmentClass::OutsideMap);
        assert_eq!(out.poses[2], start[2]);
        assert_eq!(out.confidence.iter().filter(|c| **c == AlignmentClass::Perfect).count(), start.len() - 1);
    }

    #[test]
    fn unrelated_query_has_no_encounters() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let corridor = WorldLayout::empty_room((0.0, 0.0), (40.0, 2.5)).build().unwrap();
        let query = session(&corridor, &[at(5.0, 1.25, 0.0), at(6.0, 1.25, 0.0), at(7.0, 1.25, 0.0)], "query");
        let r = run(&query, &reference, &union_cloud(&reference), &fast());
        assert!(matches!(r, Err(Error::NoEncounters)), "{:?}", r.map(|o| o.isc_encounters));
    }

    fn drifted_query(mesh: &TriangleMesh) -> Session {
        let gt = [at(2.5, 4.0, 0.0), at(3.5, 3.0, 0.0), at(4.5, 2.5, 20.0), at(5.5, 3.0, 40.0), at(6.0, 4.0, 60.0)];
        let bias = Pose3::from_yaw(0.01, Vector3::new(0.02, 0.0, 0.0));
        let mut odom = vec![Pose3::identity()];
        for w in gt.windows(2) {
            let last = *odom.last().unwrap();
            odom.push(last.compose(&w[1].relative(&w[0])).compose(&bias));
        }
        simulate_session(mesh, &gt, &odom, &lidar(), &IscParams::default(), 100.0, "query").unwrap()
    }

    #[test]
    fn runs_are_deterministic_and_knn_stage_is_optional() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let query = drifted_query(&mesh);
        let cloud = union_cloud(&reference);
        let a = run(&query, &reference, &cloud, &fast()).unwrap();
        let b = run(&query, &reference, &cloud, &fast()).unwrap();
        assert_eq!(a.world_trajectory.to_tum_string(), b.world_trajectory.to_tum_string());
        assert_eq!(a.confidence_csv(), b.confidence_csv());
        assert_eq!(a.graph, b.graph);

        let c = run(&query, &reference, &cloud, &PipelineConfig { enable_knn_loops: false, ..fast() }).unwrap();
        assert!(c.knn_encounters.is_empty());
        assert_eq!(c.confidence.len(), query.len());
        assert_eq!(c.world_trajectory.len(), query.len());
        assert_eq!(c.stage1_trajectory, c.stage2_trajectory);
    }

    #[test]
    fn outputs_are_written() {
        let mesh = two_rooms();
        let reference = session(&mesh, &reference_poses(), "reference");
        let out = run(&reference, &reference, &union_cloud(&reference), &fast()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        for f in ["trajectory.tum", "stage1.tum", "stage2.tum", "graph.g2o", "confidence.csv", "timings.json", "registration.jsonl"] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("confidence.csv")).unwrap();
        assert_eq!(csv.lines().count(), reference.len() + 1);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,Perfect,"));
        let aligned = out.aligned_session(&reference).unwrap();
        assert_eq!(aligned.frame_label, "aligned");
        for (k, p) in aligned.keyframes().iter().zip(out.world_trajectory.poses()) {
            assert_eq!(k.odom_pose, *p);
        }
        assert!(out.aligned_session(&session(&mesh, &reference_poses()[..3], "short")).is_err());
    }
}
