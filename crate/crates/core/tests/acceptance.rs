//! End-to-end acceptance criteria A1-A9. Every test writes one `A<n> PASS|FAIL`
//! line straight to stdout so that the lines survive output capture.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use mapanchor::change::{detect_changes, ChangeParams};
use mapanchor::isc::{make_descriptor, shifted_distance, IscParams};
use mapanchor::ogm::{grid_from_cloud, GridParams, SamplingParams};
use mapanchor::pipeline::{run, PipelineConfig, PipelineOutput};
use mapanchor::posegraph::{
    local_poses, random_pose, solve, to_world, Factor, GraphProblem, NoiseModel, NoiseVariances, SolveConfig, Values,
    VarId, QUERY_SESSION, REFERENCE_SESSION,
};
use mapanchor::registration::{yaw_gicp, yaw_point_jacobian, yaw_point_residual, AlignmentClass, RegistrationParams};
use mapanchor::session::{evaluate_ape, read_g2o, read_tum, write_g2o, write_tum, ApeOptions, Edge};
use mapanchor::sim::{map_to_session, simulate_scan, simulate_scan_with_stream, LidarModel, MapToSessionParams, TriangleMesh};
use mapanchor::synthetic::{
    box_insertion_fixture, change_room_layout, change_room_poses, drifted_odometry, exit_query_waypoints,
    multi_room_query_waypoints, multi_room_world, multi_room_world_with_exit, polyline_poses, simulate_session,
    wall_removal_fixture, DriftModel,
};
use mapanchor::{Keyframe, PointCloud, Pose3, Session, Trajectory};
use nalgebra::{Matrix3x4, Matrix6, Vector3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: &str, ok: bool, detail: impl AsRef<str>) {
    let line = format!("\n{id} {}: {}\n", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "{}", line.trim_end());
}

fn ground_truth(poses: &[Pose3], t0: f64) -> Trajectory {
    Trajectory::from_pairs(poses.iter().enumerate().map(|(i, p)| (t0 + i as f64, *p)).collect())
}

// ---------------------------------------------------------------- A1 / A2

const QUERY_T0: f64 = 1000.0;

struct EndToEnd {
    reference_keyframes: usize,
    ground_truth: Trajectory,
    odometry_end_error: f64,
    output: PipelineOutput,
    seconds: f64,
}

fn end_to_end() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(|| {
        let mesh = multi_room_world().unwrap();
        // 2 m masks and spacing bring the reference down to about 60 keyframes
        let params = MapToSessionParams {
            sampling: SamplingParams { line_spacing: 2.0, min_spacing: 2.0 },
            ..MapToSessionParams::default()
        };
        let reference = map_to_session(&mesh, None, 0.0, &params).unwrap().session;
        let gt = polyline_poses(&multi_room_query_waypoints(), 1.0, 1.1).unwrap();
        let odom = drifted_odometry(&gt, &DriftModel::default());
        let model = LidarModel { noise_seed: 1, ..LidarModel::default() };
        let query = simulate_session(&mesh, &gt, &odom, &model, &IscParams::default(), QUERY_T0, "query").unwrap();
        let cloud = mesh.sample_surface(0.02).unwrap();
        let end_odom = gt[0].compose(odom.last().unwrap());
        let start = Instant::now();
        let output = run(&query, &reference, &cloud, &PipelineConfig::default()).unwrap();
        EndToEnd {
            reference_keyframes: reference.len(),
            ground_truth: ground_truth(&gt, QUERY_T0),
            odometry_end_error: (end_odom.translation() - gt.last().unwrap().translation()).norm(),
            output,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn a1_synthetic_end_to_end_recovery() {
    let r = end_to_end();
    let ape = evaluate_ape(&r.output.world_trajectory, &r.ground_truth, &ApeOptions::default()).unwrap();
    let acceptable = r.output.confidence.iter().filter(|c| c.is_acceptable()).count();
    let share = acceptable as f64 / r.output.confidence.len() as f64;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    // three minutes is the four-core budget; it is enforced on any core count
    let budget = 180.0;
    let ok = ape.translational_rmse < 5.0
        && ape.rotational_rmse < 0.5
        && share >= 0.9
        && r.odometry_end_error >= 1.0
        && (45..=75).contains(&r.reference_keyframes)
        && r.seconds < budget;
    report(
        "A1",
        ok,
        format!(
            "APE {:.3} cm / {:.4} deg, {:.1}% Perfect|Good, odometry end error {:.2} m, {} reference keyframes, {} query keyframes, anchor {:.1} s on {cores} core(s) (budget {budget:.0} s)",
            ape.translational_rmse,
            ape.rotational_rmse,
            100.0 * share,
            r.odometry_end_error,
            r.reference_keyframes,
            r.output.confidence.len(),
            r.seconds,
        ),
    );
}

#[test]
fn a2_stage_monotonicity() {
    let r = end_to_end();
    let ape = |t: &Trajectory| evaluate_ape(t, &r.ground_truth, &ApeOptions::default()).unwrap().translational_rmse;
    let s1 = ape(&r.output.stage1_trajectory);
    let s2 = ape(&r.output.stage2_trajectory);
    let fin = ape(&r.output.world_trajectory);
    let slack = 1.0;
    report(
        "A2",
        fin <= s2 + slack && s2 <= s1 + slack,
        format!("APE stage 1 {s1:.3} cm >= stage 2 {s2:.3} cm >= final {fin:.3} cm (1 cm slack)"),
    );
}

// ---------------------------------------------------------------- A3

/// Scan whose points sit at least 0.05 rad inside their sector and away from
/// ring boundaries, with a random set of populated bins.
fn sector_safe_scan(rng: &mut ChaCha8Rng, params: &IscParams) -> PointCloud {
    let ring_w = params.max_radius / params.num_rings as f64;
    let sector_w = params.sector_angle();
    let margin = 0.05;
    let mut pts = Vec::new();
    for ring in 0..params.num_rings {
        for sector in 0..params.num_sectors {
            if !rng.random_bool(0.3) {
                continue;
            }
            let n = rng.random_range(params.min_points_per_bin..params.min_points_per_bin + 20);
            let lo = -std::f64::consts::PI + sector as f64 * sector_w;
            for _ in 0..n {
                let r = rng.random_range(ring as f64 * ring_w + 1e-3..(ring + 1) as f64 * ring_w - 1e-3);
                let a = rng.random_range(lo + margin..lo + sector_w - margin);
                pts.push(Vector3::new(r * a.cos(), r * a.sin(), rng.random_range(-1.0..2.0)));
            }
        }
        // sparse noise below the bin threshold
        for _ in 0..5 {
            let r = rng.random_range(ring as f64 * ring_w + 1e-3..(ring + 1) as f64 * ring_w - 1e-3);
            let s = rng.random_range(0..params.num_sectors);
            let a = -std::f64::consts::PI + (s as f64 + 0.5) * sector_w;
            pts.push(Vector3::new(r * a.cos(), r * a.sin(), 0.0));
        }
    }
    PointCloud::new(pts).unwrap()
}

#[test]
fn a3_descriptor_exactness() {
    let params = IscParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = Vec::new();
    for i in 0..200 {
        let scan = sector_safe_scan(&mut rng, &params);
        let m: i64 = rng.random_range(-6..=6);
        let rotated = scan.transformed(&Pose3::from_yaw(m as f64 * params.sector_angle(), Vector3::zeros()));
        let q = make_descriptor(&scan, &params);
        let r = make_descriptor(&rotated, &params);
        let hit = shifted_distance(&q, &r, params.max_shift()).unwrap();
        let keys_equal = q.ring_key().iter().zip(r.ring_key()).all(|(a, b)| a.to_bits() == b.to_bits());
        if hit.shift != m || hit.distance != 0.0 || !keys_equal || q.shifted(m).matrix() != r.matrix() {
            failures.push(format!("scan {i}: m {m} got {hit:?} keys_equal {keys_equal}"));
        }
    }
    report(
        "A3",
        failures.is_empty(),
        format!("200 scans, shifts m*6deg with |m|<=6: {} mismatches {:?}", failures.len(), failures.first()),
    );
}

// ---------------------------------------------------------------- A4

type Se2 = (f64, f64, f64);

fn se2_compose(a: Se2, b: Se2) -> Se2 {
    let (s, c) = a.2.sin_cos();
    (a.0 + c * b.0 - s * b.1, a.1 + s * b.0 + c * b.1, a.2 + b.2)
}

fn se2_inverse(a: Se2) -> Se2 {
    let (s, c) = a.2.sin_cos();
    (-(c * a.0 + s * a.1), s * a.0 - c * a.1, -a.2)
}

/// Negative log posterior of a planar chain with the SE(2) logarithm as residual.
fn se2_cost(poses: &[Se2], meas: &[(usize, usize, Se2, f64)]) -> f64 {
    meas.iter()
        .map(|&(i, j, u, sigma)| {
            let e = se2_compose(se2_inverse(u), se2_compose(se2_inverse(poses[i]), poses[j]));
            let th = e.2.sin().atan2(e.2.cos());
            let (a, b) = if th.abs() < 1e-9 { (1.0, 0.0) } else { (th.sin() / th, (1.0 - th.cos()) / th) };
            let det = a * a + b * b;
            let rx = (a * e.0 + b * e.1) / det;
            let ry = (-b * e.0 + a * e.1) / det;
            0.5 * (rx * rx + ry * ry + th * th) / (sigma * sigma)
        })
        .sum()
}

/// Exhaustive 5^6 neighbourhood search, halving the step down to 1 mm / 0.01°.
fn grid_search(meas: &[(usize, usize, Se2, f64)], start: [f64; 6]) -> [f64; 6] {
    let deg = std::f64::consts::PI / 180.0;
    let mut step = [0.05, 0.05, 0.5 * deg, 0.05, 0.05, 0.5 * deg];
    let fine = [1e-3, 1e-3, 0.01 * deg, 1e-3, 1e-3, 0.01 * deg];
    let mut best = start;
    loop {
        let center = best;
        let mut best_cost = f64::INFINITY;
        for code in 0..5usize.pow(6) {
            let mut x = center;
            let mut c = code;
            for d in 0..6 {
                x[d] += ((c % 5) as f64 - 2.0) * step[d];
                c /= 5;
            }
            let cost = se2_cost(&[(0.0, 0.0, 0.0), (x[0], x[1], x[2]), (x[3], x[4], x[5])], meas);
            if cost < best_cost {
                best_cost = cost;
                best = x;
            }
        }
        if best == center {
            if step.iter().zip(&fine).all(|(s, f)| s <= f) {
                return best;
            }
            for d in 0..6 {
                step[d] = (step[d] / 2.0).max(fine[d]);
            }
        }
    }
}

fn chain(poses: &[Pose3], label: &str) -> Session {
    let kfs = poses
        .iter()
        .enumerate()
        .map(|(i, p)| Keyframe { index: i, timestamp: i as f64, odom_pose: *p, scan: PointCloud::empty(), descriptor: None })
        .collect();
    Session::from_keyframes(kfs, label, Edge::isotropic_information(1e-4)).unwrap()
}

#[test]
fn a4_pose_graph_oracle_equivalence() {
    let sigma = 0.1;
    let meas = [(0, 1, (1.0, 0.0, 0.1), sigma), (1, 2, (1.0, 0.1, 0.2), sigma), (0, 2, (1.9, 0.5, 0.25), sigma)];
    let oracle = grid_search(&meas, [1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
    let planar = |x: f64, y: f64, t: f64| Pose3::from_yaw(t, Vector3::new(x, y, 0.0));
    let mut p = GraphProblem::new();
    p.insert(VarId::pose(0, 0), Pose3::identity());
    p.insert(VarId::pose(0, 1), planar(0.8, 0.3, 0.0));
    p.insert(VarId::pose(0, 2), planar(2.2, -0.3, 0.0));
    p.add(Factor::Prior { node: VarId::pose(0, 0), pose: Pose3::identity(), noise: NoiseModel::from_variance(1e-102).unwrap() });
    for (i, j, u, s) in meas {
        p.add(Factor::Between {
            i: VarId::pose(0, i),
            j: VarId::pose(0, j),
            relative: planar(u.0, u.1, u.2),
            noise: NoiseModel::isotropic(s).unwrap(),
        });
    }
    let (v, _) = solve(&p, &SolveConfig::default()).unwrap();
    let mut toy_gap: [f64; 2] = [0.0, 0.0];
    for (k, idx) in [1usize, 2].iter().enumerate() {
        let x = v[&VarId::pose(0, *idx)];
        let o = &oracle[3 * k..3 * k + 3];
        toy_gap[0] = toy_gap[0].max((x.translation().x - o[0]).abs()).max((x.translation().y - o[1]).abs());
        toy_gap[1] = toy_gap[1].max((x.yaw() - o[2]).abs().to_degrees());
    }
    let toy_ok = toy_gap[0] <= 1e-3 && toy_gap[1] <= 0.01;

    // single noiseless encounter between a reference chain and its rigidly moved copy
    let world: Vec<Pose3> = (0..8)
        .map(|i| Pose3::from_yaw(0.3 * i as f64, Vector3::new(i as f64, (i as f64 * 0.7).sin(), 0.1 * i as f64)))
        .collect();
    let first_inv = world[0].inverse();
    let local: Vec<Pose3> = world.iter().map(|w| first_inv.compose(w)).collect();
    let reference = chain(&world, "reference");
    let query = chain(&local, "query");
    let vars = NoiseVariances::default();
    let mut g = GraphProblem::two_session(&reference, &query, &vars).unwrap();
    g.add_encounter(3, 5, world[3].relative(&world[5]), vars.encounter_noise().unwrap());
    let (v, _) = solve(&g, &SolveConfig::default()).unwrap();
    let anchor_err = v[&VarId::anchor(QUERY_SESSION)].max_abs_diff(&world[0]);
    let q = local_poses(&v, QUERY_SESSION);
    let internal = (1..q.len())
        .map(|k| q[k].relative(&q[k - 1]).max_abs_diff(&local[k].relative(&local[k - 1])))
        .fold(0.0, f64::max);
    let reference_moved = local_poses(&v, REFERENCE_SESSION).iter().zip(&world).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    let world_err = to_world(&v, QUERY_SESSION, &query)
        .unwrap()
        .poses()
        .zip(&world)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    let single_ok = anchor_err < 1e-6 && internal < 1e-6 && reference_moved < 1e-6 && world_err < 1e-6;
    report(
        "A4",
        toy_ok && single_ok,
        format!(
            "toy graph vs grid search: {:.2e} m / {:.4} deg (cell 1 mm / 0.01 deg); single encounter: anchor {anchor_err:.1e}, internal {internal:.1e}, reference {reference_moved:.1e}, world {world_err:.1e}",
            toy_gap[0], toy_gap[1]
        ),
    );
}

// ---------------------------------------------------------------- A5

/// Central differences of the factor residual under right perturbation `x ⊕ δ`.
fn factor_fd(factor: &Factor, values: &Values, var: VarId, h: f64) -> Matrix6<f64> {
    let mut j = Matrix6::zeros();
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = h;
        let mut plus = values.clone();
        plus.insert(var, values[&var].retract(&d));
        let mut minus = values.clone();
        minus.insert(var, values[&var].retract(&-d));
        j.set_column(k, &((factor.residual(&plus).unwrap() - factor.residual(&minus).unwrap()) / (2.0 * h)));
    }
    j
}

#[test]
fn a5_jacobian_audits() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let h = 1e-6;
    let tol = 1e-5;
    let mut worst = [0.0f64; 4];
    let mut checked = [0usize; 4];

    for _ in 0..100 {
        let x = Vector4::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-3.1..3.1),
        );
        let p = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-2.0..2.0));
        let q = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-2.0..2.0));
        let mut fd = Matrix3x4::zeros();
        for k in 0..4 {
            let mut d = Vector4::zeros();
            d[k] = h;
            fd.set_column(k, &((yaw_point_residual(&(x + d), &p, &q) - yaw_point_residual(&(x - d), &p, &q)) / (2.0 * h)));
        }
        let an = yaw_point_jacobian(&x, &p);
        let err = (an - fd).norm() / fd.norm().max(1.0);
        worst[0] = worst[0].max(err);
        checked[0] += 1;
    }

    let ids = [VarId::pose(0, 0), VarId::pose(1, 0), VarId::anchor(0), VarId::anchor(1)];
    let unit = NoiseModel::isotropic(1.0).unwrap();
    for _ in 0..100 {
        let values: Values = ids.iter().map(|id| (*id, random_pose(&mut rng, 5.0, 2.5))).collect();
        let factors = [
            Factor::Prior { node: ids[0], pose: random_pose(&mut rng, 5.0, 2.5), noise: unit },
            Factor::Between { i: ids[0], j: ids[1], relative: random_pose(&mut rng, 5.0, 2.5), noise: unit },
            Factor::AnchoredBetween {
                reference: ids[0],
                query: ids[1],
                anchor_reference: ids[2],
                anchor_query: ids[3],
                encounter: random_pose(&mut rng, 5.0, 2.5),
                noise: unit,
            },
        ];
        for (slot, f) in factors.iter().enumerate() {
            // residual angles beyond pi make the logarithm non-smooth; such draws are skipped
            let Ok(lin) = f.linearize(&values) else { continue };
            if lin.residual.fixed_rows::<3>(3).norm() > 3.0 {
                continue;
            }
            for (id, j) in lin.jacobians {
                let fd = factor_fd(f, &values, id, h);
                let err = (j - fd).norm() / fd.norm().max(1.0);
                worst[slot + 1] = worst[slot + 1].max(err);
            }
            checked[slot + 1] += 1;
        }
    }
    let ok = worst.iter().all(|w| *w <= tol) && checked.iter().all(|c| *c >= 90);
    report(
        "A5",
        ok,
        format!(
            "max relative FD error (configs): yaw-GICP {:.1e} ({}), prior {:.1e} ({}), between {:.1e} ({}), anchored {:.1e} ({})",
            worst[0], checked[0], worst[1], checked[1], worst[2], checked[2], worst[3], checked[3]
        ),
    );
}

// ---------------------------------------------------------------- A6

#[test]
fn a6_registration_recovery() {
    let mesh = multi_room_world().unwrap();
    let isc = IscParams::default();
    let params = RegistrationParams::default();
    let voxel = PipelineConfig::default().registration_voxel;
    let sites = [(3.0, 4.75), (9.0, 3.0), (17.0, 4.75), (26.5, 7.5), (20.75, 12.0), (24.0, 15.75), (12.0, 14.75), (6.0, 11.0), (3.5, 16.0), (27.5, 2.5)];
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut worst_t, mut worst_yaw, mut worst_tilt) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    for (s, &(x, y)) in sites.iter().enumerate() {
        let sensor = Pose3::from_yaw(rng.random_range(-3.0..3.0), Vector3::new(x, y, 1.1));
        let scan = simulate_scan(&mesh, &sensor, &LidarModel { noise_seed: s as u64, ..LidarModel::default() });
        let source = scan.voxel_downsample(voxel);
        let source_descriptor = make_descriptor(&scan, &isc);
        for _ in 0..50 {
            let yaw = rng.random_range(-36f64..=36.0).to_radians();
            let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let t = dir.try_normalize(1e-9).unwrap_or(Vector3::x()) * rng.random_range(0.0..=0.5);
            let truth = Pose3::from_yaw(yaw, t);
            let target = source.transformed(&truth);
            let shift = shifted_distance(&source_descriptor, &make_descriptor(&scan.transformed(&truth), &isc), isc.max_shift()).unwrap();
            let r = yaw_gicp(&source, &target, shift.shift as f64 * isc.sector_angle(), &params).unwrap();
            let dt = (r.transform.translation() - truth.translation()).norm();
            let dyaw = (r.transform.yaw() - yaw).abs().to_degrees();
            let phi = r.transform.log().unwrap().phi;
            let tilt = phi.x.abs().max(phi.y.abs());
            worst_t = worst_t.max(dt);
            worst_yaw = worst_yaw.max(dyaw);
            worst_tilt = worst_tilt.max(tilt);
            if dt > 1e-3 || dyaw > 0.05 || tilt > 1e-12 {
                failures += 1;
            }
        }
    }
    report(
        "A6",
        failures == 0,
        format!(
            "500 perturbations on 10 scans: {failures} outside tolerance; worst {:.2e} m / {:.2e} deg, pitch/roll {:.1e}",
            worst_t, worst_yaw, worst_tilt
        ),
    );
}

// ---------------------------------------------------------------- A7

fn change_report(reference: &TriangleMesh, changed: &TriangleMesh) -> (mapanchor::change::ChangeReport, PointCloud) {
    let model = LidarModel { noise_seed: 7, ..LidarModel::default() };
    let scans: Vec<(PointCloud, Pose3)> = change_room_poses(1.2)
        .iter()
        .enumerate()
        .map(|(i, p)| (simulate_scan_with_stream(changed, p, &model, i as u64), *p))
        .collect();
    let refs: Vec<(&PointCloud, Pose3)> = scans.iter().map(|(s, p)| (s, *p)).collect();
    let cloud = reference.sample_surface(0.05).unwrap();
    (detect_changes(&refs, &cloud, &ChangeParams::default()).unwrap(), cloud)
}

fn centroid(c: &PointCloud) -> Vector3<f64> {
    c.iter().sum::<Vector3<f64>>() / c.len() as f64
}

#[test]
fn a7_change_detection() {
    let room = change_room_layout().build().unwrap();
    let (none, _) = change_report(&room, &room);
    let none_ok = none.positive_clusters.is_empty() && none.negative_clusters.is_empty();

    let (box_ref, box_changed, truth) = box_insertion_fixture().unwrap();
    let (boxed, _) = change_report(&box_ref, &box_changed);
    let box_offset = boxed.positive_clusters.first().map_or(f64::INFINITY, |c| (centroid(c) - truth).norm());
    let box_ok = boxed.positive_clusters.len() == 1 && box_offset <= 0.1;

    let (wall_ref, wall_changed, (lo, hi)) = wall_removal_fixture().unwrap();
    let (walled, cloud) = change_report(&wall_ref, &wall_changed);
    let inside = |p: &Vector3<f64>| (0..3).all(|a| p[a] >= lo[a] - 1e-9 && p[a] <= hi[a] + 1e-9);
    let wall_points = cloud.iter().filter(|p| inside(p)).count();
    let covered = walled.negative_clusters.first().map_or(0, |c| c.iter().filter(|p| inside(p)).count());
    let coverage = covered as f64 / wall_points as f64;
    let wall_ok = walled.negative_clusters.len() == 1 && coverage >= 0.8;

    report(
        "A7",
        none_ok && box_ok && wall_ok,
        format!(
            "no change: {} PD / {} ND clusters; box: {} PD clusters, centroid off by {:.3} m; wall: {} ND clusters covering {:.1}% of {} wall points",
            none.positive_clusters.len(),
            none.negative_clusters.len(),
            boxed.positive_clusters.len(),
            box_offset,
            walled.negative_clusters.len(),
            100.0 * coverage,
            wall_points
        ),
    );
}

// ---------------------------------------------------------------- A8

/// The room cloud rasterised by `golden/make_golden.py`.
fn golden_room_cloud() -> PointCloud {
    const RES: f64 = 0.05;
    const X0: f64 = -1.3;
    const Y0: f64 = 2.7;
    const NX: usize = 80;
    const NY: usize = 60;
    let mut pts = Vec::new();
    for j in 0..NY {
        for i in 0..NX {
            if i < 10 && j < 10 {
                continue;
            }
            pts.push(Vector3::new(X0 + (i as f64 + 0.5) * RES, Y0 + (j as f64 + 0.5) * RES, 0.0));
        }
    }
    for k in 0..21 {
        let z = k as f64 * 0.1;
        for i in 0..=NX {
            pts.push(Vector3::new(X0 + i as f64 * RES, Y0, z));
            pts.push(Vector3::new(X0 + i as f64 * RES, Y0 + NY as f64 * RES, z));
        }
        for j in 1..NY {
            pts.push(Vector3::new(X0, Y0 + j as f64 * RES, z));
            pts.push(Vector3::new(X0 + NX as f64 * RES, Y0 + j as f64 * RES, z));
        }
    }
    for j in 0..11 {
        for i in 0..11 {
            pts.push(Vector3::new(X0 + (40 + i) as f64 * RES, Y0 + (20 + j) as f64 * RES, 1.0));
        }
    }
    PointCloud::new(pts).unwrap()
}

fn random_session(rng: &mut ChaCha8Rng, n: usize) -> Session {
    let poses: Vec<Pose3> = (0..n).map(|_| random_pose(rng, 50.0, 3.0)).collect();
    let kfs = poses
        .iter()
        .enumerate()
        .map(|(i, p)| Keyframe { index: i, timestamp: i as f64, odom_pose: *p, scan: PointCloud::empty(), descriptor: None })
        .collect();
    Session::from_keyframes(kfs, "random", Edge::isotropic_information(1e-4)).unwrap()
}

fn small_pipeline_run() -> (Vec<u64>, String) {
    let mesh = change_room_layout().build().unwrap();
    let lidar = LidarModel { azimuth_resolution: 0.5, ..LidarModel::default() };
    let params = MapToSessionParams { lidar, ..MapToSessionParams::default() };
    let reference = map_to_session(&mesh, None, 0.0, &params).unwrap().session;
    let gt = polyline_poses(&[(1.5, 4.0), (8.5, 4.0), (8.5, 5.5)], 1.0, 1.1).unwrap();
    let odom = drifted_odometry(&gt, &DriftModel::default());
    let query = simulate_session(&mesh, &gt, &odom, &LidarModel { noise_seed: 9, ..lidar }, &IscParams::default(), 0.0, "query").unwrap();
    let cloud = mesh.sample_surface(0.05).unwrap();
    let out = run(&query, &reference, &cloud, &PipelineConfig::default()).unwrap();
    let bits = out
        .world_trajectory
        .poses()
        .chain(out.stage1_trajectory.poses())
        .flat_map(|p| {
            let q = p.rotation().coords;
            let t = p.translation();
            [q.x, q.y, q.z, q.w, t.x, t.y, t.z]
        })
        .map(f64::to_bits)
        .collect();
    (bits, out.confidence_csv() + &out.graph.to_g2o_string())
}

fn session_fingerprint(s: &Session) -> Vec<u64> {
    s.keyframes()
        .iter()
        .flat_map(|k| {
            let t = k.odom_pose.translation();
            let q = k.odom_pose.rotation().coords;
            let pose = [t.x, t.y, t.z, q.x, q.y, q.z, q.w];
            pose.into_iter().chain(k.scan.iter().flat_map(|p| [p.x, p.y, p.z])).map(f64::to_bits).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn a8_format_fidelity() {
    let grid = grid_from_cloud(&golden_room_cloud(), 0.0, &GridParams::default()).unwrap();
    let pgm_ok = grid.to_pgm() == include_bytes!("golden/room.pgm");
    let yaml_ok = grid.to_yaml("room.pgm") == include_str!("golden/room.yaml");

    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let session = random_session(&mut rng, 40);
    let g2o_path = dir.path().join("graph.g2o");
    write_g2o(&session, &g2o_path).unwrap();
    let back = read_g2o(&g2o_path).unwrap();
    let g2o_err = session.poses().iter().zip(back.poses()).map(|(a, b)| a.max_abs_diff(&b)).fold(0.0, f64::max);
    let g2o_ok = back.len() == session.len() && g2o_err <= 1e-7;

    let traj = Trajectory::from_pairs((0..40).map(|i| (1.7e9 + i as f64 * 0.1, random_pose(&mut rng, 50.0, 3.0))).collect());
    let tum_path = dir.path().join("traj.tum");
    write_tum(&traj, &tum_path).unwrap();
    let tum_back = read_tum(&tum_path).unwrap();
    let tum_err = traj
        .entries()
        .iter()
        .zip(tum_back.entries())
        .map(|((ta, a), (tb, b))| a.max_abs_diff(b).max((ta - tb).abs()))
        .fold(0.0, f64::max);
    let tum_ok = tum_back.len() == traj.len() && tum_err <= 1e-7;

    let mesh = change_room_layout().build().unwrap();
    let params = MapToSessionParams::default();
    let a = map_to_session(&mesh, None, 0.0, &params).unwrap();
    let b = map_to_session(&mesh, None, 0.0, &params).unwrap();
    let map_ok = session_fingerprint(&a.session) == session_fingerprint(&b.session) && a.grid.to_pgm() == b.grid.to_pgm();
    let run_ok = small_pipeline_run() == small_pipeline_run();

    report(
        "A8",
        pgm_ok && yaml_ok && g2o_ok && tum_ok && map_ok && run_ok,
        format!(
            "golden PGM {pgm_ok}, YAML {yaml_ok}; g2o round trip {g2o_err:.1e}, TUM round trip {tum_err:.1e}; reruns bit-identical: reference session {map_ok}, alignment {run_ok}"
        ),
    );
}

// ---------------------------------------------------------------- A9

#[test]
fn a9_map_extension() {
    let (reference_mesh, extended) = multi_room_world_with_exit().unwrap();
    let reference = map_to_session(&reference_mesh, None, 0.0, &MapToSessionParams::default()).unwrap().session;
    let gt = polyline_poses(&exit_query_waypoints(), 1.0, 1.1).unwrap();
    // exact odometry: any drift past the last encounter is unobservable and
    // would dominate the corridor error
    let odom = drifted_odometry(&gt, &DriftModel { yaw_per_keyframe_deg: 0.0, translation_per_keyframe: 0.0 });
    let model = LidarModel { noise_seed: 1, ..LidarModel::default() };
    let query = simulate_session(&extended, &gt, &odom, &model, &IscParams::default(), QUERY_T0, "query").unwrap();
    let cloud = reference_mesh.sample_surface(0.02).unwrap();
    let out = run(&query, &reference, &cloud, &PipelineConfig::default()).unwrap();

    // the reference map ends at the east wall of the south room
    let in_map: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].translation().x < 30.0).collect();
    let truth = ground_truth(&gt, QUERY_T0);
    let subset = |t: &Trajectory| Trajectory::from_pairs(in_map.iter().map(|&i| t.entries()[i]).collect());
    let ape = |t: &Trajectory| evaluate_ape(&subset(t), &truth, &ApeOptions::default()).unwrap().translational_rmse;
    let in_map_graph = ape(&out.stage2_trajectory);
    let in_map_final = ape(&out.world_trajectory);

    let outside: Vec<usize> = (0..gt.len()).filter(|&i| out.confidence[i] == AlignmentClass::OutsideMap).collect();
    let kept = outside.iter().all(|&i| out.world_trajectory.entries()[i].1 == out.stage2_trajectory.entries()[i].1);
    let last = gt.len() - 1;
    let end_error = 100.0 * (out.world_trajectory.entries()[last].1.translation() - gt[last].translation()).norm();
    let ok = out.confidence[last] == AlignmentClass::OutsideMap && kept && end_error <= 2.0 * in_map_graph;
    report(
        "A9",
        ok,
        format!(
            "{} of {} keyframes OutsideMap, kept at optimized poses {kept}; corridor end error {end_error:.3} cm vs in-map APE of the optimized graph {in_map_graph:.3} cm (ratio {:.2}); in-map APE after final ICP {in_map_final:.3} cm (ratio {:.2})",
            outside.len(),
            gt.len(),
            end_error / in_map_graph,
            end_error / in_map_final
        ),
    );
}
