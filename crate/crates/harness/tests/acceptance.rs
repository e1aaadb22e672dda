//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Runs under `cargo test` with its own `main`.

use std::f64::consts::PI;
use std::process::{Command as Process, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use maglev_core::allocation::{solve_currents, WrenchMatrix};
use maglev_core::control::{TickRecord, Trajectory, TwinConfig};
use maglev_core::haptics::{detect_contacts, Scene, SceneObject, Shape};
use maglev_core::magnetics::{
    interaction_energy, ActuationModel, CoilArray, Currents, FieldSource,
};
use maglev_core::plant::{step_dynamics, RigidBodyState};
use maglev_core::{Pose, Vec3, Wrench};
use maglev_harness::bench::{estimate_bench, round_trip};
use maglev_harness::capability::{capability_at, capability_map, MapSpec};
use maglev_harness::scenario::{
    builtin, prepare_twin, run_to_writer, workspace_tour, ScenarioScript, SummaryReport,
};
use maglev_harness::HarnessConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn verdict(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Context {
    config: HarnessConfig,
    array: Arc<CoilArray>,
}

impl Context {
    fn twin(&self) -> &TwinConfig {
        &self.config.twin
    }

    fn run(
        &self,
        script: &ScenarioScript,
        mut on_record: impl FnMut(&TickRecord),
    ) -> Result<SummaryReport, String> {
        let mut twin = prepare_twin(&self.config, script, Some(self.array.clone()))
            .map_err(|e| e.to_string())?;
        run_to_writer(&mut twin, script, self.config.seed, std::io::sink(), |r| {
            on_record(r)
        })
        .map_err(|e| e.to_string())
    }
}

/// Random pose inside the servo workspace. Tilted poses are lifted so the
/// lower magnet stays above the screen.
fn workspace_pose(rng: &mut ChaCha8Rng) -> Pose {
    let d = PI / 180.0;
    let roll = rng.random_range(-30.0..30.0) * d;
    let pitch = rng.random_range(-30.0..30.0) * d;
    let lift = 0.03 * roll.abs().max(pitch.abs()).sin();
    Pose::from_xyz_rpy(
        rng.random_range(-0.04..0.04),
        rng.random_range(-0.04..0.04),
        rng.random_range(0.010..0.040) + lift,
        roll,
        pitch,
        rng.random_range(-45.0..45.0) * d,
    )
}

fn random_currents(rng: &mut ChaCha8Rng, limit: f64) -> Currents {
    Currents::from_fn(|_, _| rng.random_range(-limit..limit))
}

fn hover_envelope(cx: &Context) -> Outcome {
    let spec = MapSpec {
        heights: (0..=6).map(|k| 0.010 + 0.005 * k as f64).collect(),
        step: 0.04,
        half_width: 0.0,
    };
    let rows = capability_map(&cx.array, cx.twin(), &spec).map_err(|e| e.to_string())?;
    let bad: Vec<f64> = rows
        .iter()
        .filter(|r| !(r.hover_feasible && r.hover_peak_current <= 4.0))
        .map(|r| r.z * 1e3)
        .collect();
    let worst = rows
        .iter()
        .map(|r| r.hover_peak_current)
        .fold(0.0, f64::max);
    let top = rows.last().map_or(f64::NAN, |r| r.hover_peak_current);
    verdict(
        bad.is_empty(),
        format!("centred 10-40 mm, peak hover current {worst:.3} A (at 40 mm {top:.3} A), infeasible at {bad:?} mm"),
    )
}

fn force_capability(cx: &Context) -> Outcome {
    let r = capability_at(&cx.array, cx.twin(), Vec3::new(0.0, 0.0, 0.02))
        .map_err(|e| e.to_string())?;
    let least = r.plus_z.min(r.plus_x).min(r.minus_x);
    verdict(
        r.hover_feasible && least >= 3.0,
        format!(
            "z 20 mm: +z {:.2} N, +x {:.2} N, -x {:.2} N beyond gravity",
            r.plus_z, r.plus_x, r.minus_x
        ),
    )
}

fn vertical_step(cx: &Context) -> Outcome {
    let s = cx.run(&builtin("step").unwrap(), |_| {})?;
    let settle = s.settling_time.unwrap_or(f64::INFINITY);
    verdict(
        settle <= 0.150 && !s.safe_stop && s.ticks == 20000,
        format!(
            "5 mm step settles to 0.1 mm in {:.1} ms, {} ticks, safe-stop {}",
            settle * 1e3,
            s.ticks,
            s.safe_stop
        ),
    )
}

fn bandwidth(cx: &Context) -> Outcome {
    let script = builtin("sine").unwrap();
    let f = 200.0;
    // lock-in over the last half second, an integer number of periods
    let (mut out, mut reference) = ((0.0, 0.0), (0.0, 0.0));
    let s = cx.run(&script, |r| {
        if r.time > 0.5 {
            let (c, sn) = ((2.0 * PI * f * r.time).cos(), (2.0 * PI * f * r.time).sin());
            let z = r.true_pose.position.z - 0.02;
            let zr = r.setpoint.position.z - 0.02;
            out = (out.0 + z * c, out.1 + z * sn);
            reference = (reference.0 + zr * c, reference.1 + zr * sn);
        }
    })?;
    let ratio = out.0.hypot(out.1) / reference.0.hypot(reference.1);
    let phase = (out.1.atan2(out.0) - reference.1.atan2(reference.0)).to_degrees();
    verdict(
        ratio >= 0.707 && !s.safe_stop,
        format!("200 Hz, 0.02 mm vertical, noise-free: ratio {ratio:.3}, phase {phase:.1} deg"),
    )
}

fn servo_tour(cx: &Context) -> Outcome {
    let Trajectory::Waypoints { points, .. } = workspace_tour() else {
        unreachable!()
    };
    // steady error over the last quarter of each hold
    let mut windows = Vec::new();
    let mut t = 0.0;
    for p in &points {
        t += p.duration + p.hold;
        windows.push((t - 0.25 * p.hold, t));
    }
    let (mut pos, mut rot) = (0.0f64, 0.0f64);
    let s = cx.run(&builtin("tour").unwrap(), |r| {
        if windows.iter().any(|(a, b)| r.time >= *a && r.time < *b) {
            pos = pos.max((r.true_pose.position - r.setpoint.position).norm());
            rot = rot.max(
                r.true_pose
                    .rotation_error_to(&r.setpoint)
                    .norm()
                    .to_degrees(),
            );
        }
    })?;
    verdict(
        pos <= 5e-4 && rot <= 1.0 && !s.safe_stop,
        format!(
            "{} waypoints, steady error {:.4} mm / {:.3} deg, saturated {:.1}% of ticks, safe-stop {}",
            points.len(),
            pos * 1e3,
            rot,
            100.0 * s.saturation_fraction,
            s.safe_stop
        ),
    )
}

fn pose_estimation(cx: &Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let poses: Vec<Pose> = (0..200).map(|_| workspace_pose(&mut rng)).collect();
    let (dp, dr) = round_trip(cx.twin(), &poses).map_err(|e| e.to_string())?;
    let b = estimate_bench(cx.twin(), 10e-6, 1000, 6).map_err(|e| e.to_string())?;
    verdict(
        dp <= 1e-6 && dr <= 1e-3 && b.rms_position_error <= 50e-6 && b.failures == 0 && b.tracking_max_iterations <= 5,
        format!(
            "round trip {:.2e} m / {:.2e} deg over 200 poses; 10 um noise: {:.1} um RMS over {} trials; {} iterations max at {} m/s",
            dp,
            dr,
            b.rms_position_error * 1e6,
            b.trials,
            b.tracking_max_iterations,
            b.tracking_speed
        ),
    )
}

/// Monte Carlo volume of the part of a sphere inside `obj`.
fn monte_carlo_overlap(
    center: &Vec3,
    r: f64,
    obj: &SceneObject,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut hits = 0usize;
    for _ in 0..samples {
        let p = center + Vec3::from_fn(|_, _| rng.random_range(-r..r));
        if (p - center).norm() > r {
            continue;
        }
        let local = obj.pose.orientation.inverse() * (p - obj.pose.position);
        let inside = match obj.shape {
            Shape::Plane => local.z <= 0.0,
            Shape::Sphere { radius } => local.norm() <= radius,
            Shape::Box { half_extents: h } => (0..3).all(|i| local[i].abs() <= h[i]),
        };
        hits += inside as usize;
    }
    8.0 * r * r * r * hits as f64 / samples as f64
}

fn oracle_equivalence(cx: &Context) -> Outcome {
    let handle = cx.twin().handle().map_err(|e| e.to_string())?;
    let magnets = &handle.magnets;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // grid against quadrature, force and torque each relative to their size
    // plus the torque a 1 cm lever gives that force
    let mut grid_worst = 0.0f64;
    for _ in 0..200 {
        let pose = workspace_pose(&mut rng);
        let i = random_currents(&mut rng, 4.0);
        let m = |s| ActuationModel::at_pose(&cx.array, &pose, magnets, s).map(|m| m.wrench(&i));
        let (g, o) = (
            m(FieldSource::Grid).map_err(|e| e.to_string())?,
            m(FieldSource::Oracle).map_err(|e| e.to_string())?,
        );
        let ef = (g.force - o.force).norm() / o.force.norm();
        let et = (g.torque - o.torque).norm() / (o.torque.norm() + 0.01 * o.force.norm());
        grid_worst = grid_worst.max(ef).max(et);
    }

    // force against the energy gradient
    let mut fd_worst = 0.0f64;
    for _ in 0..50 {
        let pose = workspace_pose(&mut rng);
        let i = random_currents(&mut rng, 4.0);
        let f = ActuationModel::at_pose(&cx.array, &pose, magnets, FieldSource::Oracle)
            .map_err(|e| e.to_string())?
            .wrench(&i)
            .force;
        let h = 1e-6;
        let mut grad = Vec3::zeros();
        for k in 0..3 {
            let mut dp = Vec3::zeros();
            dp[k] = h;
            let e =
                |p: Pose| interaction_energy(&p, magnets, &cx.array, &i).map_err(|e| e.to_string());
            grad[k] = (e(pose.perturbed(&dp, &Vec3::zeros()))?
                - e(pose.perturbed(&-dp, &Vec3::zeros()))?)
                / (2.0 * h);
        }
        fd_worst = fd_worst.max((f + grad).norm() / f.norm());
    }

    // allocation against the SVD pseudoinverse of the same matrix
    let mut alloc_worst = 0.0f64;
    for _ in 0..50 {
        let pose = workspace_pose(&mut rng);
        let model = ActuationModel::at_pose(&cx.array, &pose, magnets, FieldSource::Oracle)
            .map_err(|e| e.to_string())?;
        let a = WrenchMatrix::from_model(&model, &Currents::zeros());
        let w = Wrench::new(
            Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            Vec3::from_fn(|_, _| rng.random_range(-0.02..0.02)),
        );
        let c = solve_currents(&a, &w, 1e6, 0.0).map_err(|e| e.to_string())?;
        let pinv = a.entries.pseudo_inverse(1e-15).map_err(|e| e.to_string())?;
        alloc_worst = alloc_worst.max((c.currents - pinv * w.to_vector()).norm());
    }

    // contact volumes against Monte Carlo
    let r = 0.005;
    let object = |shape, pose| SceneObject {
        name: String::new(),
        shape,
        pose,
        mass: None,
        stiffness: 1000.0,
        damping: 0.0,
        friction: 0.0,
        texture: Default::default(),
        velocity: Vec3::zeros(),
        angular_velocity: Vec3::zeros(),
    };
    let block = Shape::Box {
        half_extents: Vec3::new(0.02, 0.015, 0.01),
    };
    let cases = [
        (
            object(Shape::Plane, Pose::identity()),
            Vec3::new(0.0, 0.0, 0.002),
        ),
        (
            object(
                Shape::Plane,
                Pose::from_xyz_rpy(0.0, 0.0, 0.0, 0.3, -0.2, 0.0),
            ),
            Vec3::new(0.001, 0.0, -0.001),
        ),
        (
            object(Shape::Sphere { radius: 0.008 }, Pose::identity()),
            Vec3::new(0.004, 0.005, 0.006),
        ),
        (object(block, Pose::identity()), Vec3::new(0.0, 0.0, 0.013)),
        (
            object(block, Pose::identity()),
            Vec3::new(0.022, 0.0, 0.011),
        ),
        (
            object(block, Pose::identity()),
            Vec3::new(0.021, -0.016, 0.0115),
        ),
        (
            object(block, Pose::from_xyz_rpy(0.0, 0.0, 0.0, 0.4, 0.2, 0.7)),
            Vec3::new(0.01, 0.012, 0.009),
        ),
    ];
    let mut vol_worst = 0.0f64;
    for (obj, center) in cases {
        let scene = Scene {
            objects: vec![obj.clone()],
            ..Scene::default()
        };
        let contacts = detect_contacts(&center, r, &scene);
        let exact = contacts.first().map_or(0.0, |c| c.volume);
        let mc = monte_carlo_overlap(&center, r, &obj, 4_000_000, &mut rng);
        vol_worst = vol_worst.max((exact - mc).abs() / mc);
    }

    verdict(
        grid_worst <= 0.01 && fd_worst <= 1e-3 && alloc_worst <= 1e-9 && vol_worst <= 0.01,
        format!(
            "grid vs quadrature {grid_worst:.2e} (200 poses), force vs energy {fd_worst:.2e}, allocation vs SVD {alloc_worst:.2e} A, volumes vs Monte Carlo {vol_worst:.2e}"
        ),
    )
}

fn conservation(cx: &Context) -> Outcome {
    let handle = cx.twin().handle().map_err(|e| e.to_string())?;
    let mut s = RigidBodyState::at_rest(Pose::from_translation(0.0, 0.0, 0.02));
    s.angular_velocity = Vec3::new(3.0, 1.0, 5.0);
    s.linear_velocity = Vec3::new(0.1, -0.2, 0.05);
    let e0 = s.kinetic_energy(&handle.mass);
    let l0 = s.angular_momentum(&handle.mass);
    let p0 = s.linear_velocity * handle.mass.mass;
    let dt = cx.twin().dt();
    for _ in 0..(1.0 / dt).round() as usize {
        s = step_dynamics(&s, &Wrench::zero(), &handle, dt).map_err(|e| e.to_string())?;
    }
    let de = (s.kinetic_energy(&handle.mass) - e0).abs() / e0;
    let dl = (s.angular_momentum(&handle.mass) - l0).norm() / l0.norm();
    let dp = (s.linear_velocity * handle.mass.mass - p0).norm() / p0.norm();

    let (mut ratio, mut residual, mut sliding) = (0.0f64, 0.0f64, 0usize);
    let summary = cx.run(&builtin("haptic").unwrap(), |r| {
        ratio = ratio.max(r.friction_ratio);
        residual = residual.max(r.reaction_residual);
        sliding += (r.friction_ratio > 0.5) as usize;
    })?;
    verdict(
        de.max(dl).max(dp) <= 1e-3 && ratio <= 1.0 && residual <= 1e-12 && sliding > 0 && !summary.safe_stop,
        format!(
            "1 s tumbling drift: energy {de:.1e}, angular momentum {dl:.1e}, linear momentum {dp:.1e}; press-and-drag: friction/cone max {ratio:.6} ({sliding} sliding ticks), reaction residual {residual:.1e} N"
        ),
    )
}

fn determinism_and_timing() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_maglev");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    let mut summaries = Vec::new();
    for (k, seed) in [11, 11, 12].into_iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let status = Process::new(exe)
            .args(["run", "hover", "--seed", &seed.to_string(), "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!(
                "run exited with {}: {}",
                status.status,
                String::from_utf8_lossy(&status.stderr)
            ));
        }
        outputs.push(std::fs::read(out.join("ticks.csv")).map_err(|e| e.to_string())?);
        let text = std::fs::read_to_string(out.join("summary.json")).map_err(|e| e.to_string())?;
        summaries
            .push(serde_json::from_str::<serde_json::Value>(&text).map_err(|e| e.to_string())?);
    }
    let same = outputs[0] == outputs[1];
    let differs = outputs[0] != outputs[2];
    let t = &summaries[0]["timing"];
    let (mean, p99) = (
        t["mean_us"].as_f64().unwrap_or(f64::NAN),
        t["p99_us"].as_f64().unwrap_or(f64::NAN),
    );
    verdict(
        same && differs && mean < 500.0 && p99 < 1000.0,
        format!(
            "seed 11 twice byte-identical {same} ({} bytes), seed 12 differs {differs}; tick mean {mean:.1} us, p99 {p99:.1} us",
            outputs[0].len()
        ),
    )
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    let started = Instant::now();
    let config = HarnessConfig::default();
    let array = match config.twin.build_array() {
        Ok(a) => Arc::new(a),
        Err(e) => {
            println!("acceptance: cannot build coil array: {e}");
            return ExitCode::FAILURE;
        }
    };
    let cx = Context { config, array };
    let criteria: [(&str, &dyn Fn() -> Outcome); 9] = [
        ("hover envelope", &|| hover_envelope(&cx)),
        ("force capability", &|| force_capability(&cx)),
        ("closed-loop step", &|| vertical_step(&cx)),
        ("small-signal bandwidth", &|| bandwidth(&cx)),
        ("workspace servo tour", &|| servo_tour(&cx)),
        ("pose estimation", &|| pose_estimation(&cx)),
        ("oracle equivalence", &|| oracle_equivalence(&cx)),
        ("conservation", &|| conservation(&cx)),
        ("determinism and performance", &determinism_and_timing),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {}: {tag}  {name}: {detail} [{:.1} s]",
            k + 1,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of 9 passed in {:.1} s",
        9 - failed,
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
