//! Release acceptance suite.
//!
//! Each test certifies one gate the toolkit must pass before shipping and
//! prints a matching `[PASS]` line (visible with `--nocapture`):
//!
//! 1. adjoint gradients match central finite differences for every model
//!    family at 1e-5,
//! 2. the calibrated crowd model reproduces the benchmark pair-force table
//!    within 1%,
//! 3. calibration recovers the parameters of synthetic traffic data within
//!    5% inside five minutes single-threaded,
//! 4. optimizer iterates match closed-form and independently computed
//!    oracle values at 1e-12,
//! 5. injected gradient noise follows the annealing schedule within 3%,
//! 6. structural invariants of the models and the data pipeline hold, and
//! 7. zero-noise calibration is bit-for-bit reproducible.

use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::Instant;

use approx::assert_relative_eq;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use forcefit::adjoint::{cost_and_gradient, fd_gradient, sequence_cost};
use forcefit::data::{
    extract_crowd_sequences, extract_traffic_sequences, interpolate_to_grid, load_tracks,
    synth_crowd, synth_traffic, SequenceData, SynthConfig,
};
use forcefit::dynamics::{simulate, Diagnostics, ModelFamily, SimConfig, Trajectory};
use forcefit::forces::{
    lwr_velocity, social_pair_force, ClampCounter, LwrParams, LwrVariant, PairKinematics,
    SocialFixed, SocialForceParams, WallGeometry,
};
use forcefit::nn::{self, NetSpec};
use forcefit::optim::{AdadeltaConfig, AdadeltaState, NoiseSchedule, Projection};
use forcefit::vec2::Vec2;

/// Relative error with an absolute floor: components smaller than the floor
/// are effectively compared absolutely, so near-zero entries do not blow up
/// an otherwise exact match.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn forcefit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forcefit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?})\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, content: &str) {
    std::fs::write(dir.join(name), content).unwrap();
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name))
        .unwrap_or_else(|e| panic!("cannot read {name}: {e}"))
}

// --- criterion 1: adjoint exactness across the whole model zoo ------------

const FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-5;
const INSTANCES: usize = 20;

struct Case {
    name: &'static str,
    family: ModelFamily,
    instance: usize,
    params: Vec<f64>,
    y0: Vec<f64>,
    destinations: Option<Vec<Vec2>>,
    n_agents: usize,
    reference: Trajectory,
    substeps: usize,
}

/// One configuration per supported model shape: both closed-form speed laws,
/// speed networks with 2, 4 and 10 hidden neurons, the closed-form crowd
/// force, and the 4-4-2 crowd network.
fn battery() -> Vec<(&'static str, ModelFamily)> {
    let no_walls = Arc::new(WallGeometry::default());
    let traffic_net = |name, hidden| {
        (
            name,
            ModelFamily::TrafficNet {
                spec: NetSpec::new(vec![1, hidden, 1]).unwrap(),
                diagnostics: Arc::new(Diagnostics::default()),
            },
        )
    };
    vec![
        (
            "speed-law log",
            ModelFamily::TrafficLwr {
                variant: LwrVariant::Log,
                diagnostics: Arc::new(Diagnostics::default()),
            },
        ),
        (
            "speed-law linear",
            ModelFamily::TrafficLwr {
                variant: LwrVariant::Linear,
                diagnostics: Arc::new(Diagnostics::default()),
            },
        ),
        traffic_net("traffic net, 2 hidden", 2),
        traffic_net("traffic net, 4 hidden", 4),
        traffic_net("traffic net, 10 hidden", 10),
        (
            "crowd social",
            ModelFamily::CrowdSocial {
                fixed: SocialFixed::default(),
                walls: no_walls.clone(),
            },
        ),
        (
            "crowd net 4-4-2",
            ModelFamily::CrowdNet {
                interaction: NetSpec::new(vec![4, 4, 2]).unwrap(),
                wall: NetSpec::new(vec![4, 4, 2]).unwrap(),
                walls: no_walls,
                tau: 0.5,
                mass: 1.0,
            },
        ),
    ]
}

/// Samples the fine trajectory back to the data grid and jitters every
/// position entry, producing a reference the simulation cannot match, so the
/// tracking cost and its gradient are non-trivial.
fn jittered_reference(
    fine: &Trajectory,
    position_dim: usize,
    data_steps: usize,
    substeps: usize,
    data_dt: f64,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let states: Vec<Vec<f64>> = (0..=data_steps)
        .map(|n| {
            fine.state(n * substeps)[..position_dim]
                .iter()
                .map(|x| x + rng.random_range(-0.3..0.3))
                .collect()
        })
        .collect();
    Trajectory::new(fine.t0(), data_dt, states).unwrap()
}

fn traffic_case(name: &'static str, family: &ModelFamily, instance: usize, rng: &mut ChaCha8Rng) -> Case {
    let n_agents = 2 + instance % 3;
    let (data_dt, data_steps, substeps) = (0.2, 5, 4);

    let mut y0 = vec![0.0];
    for _ in 1..n_agents {
        let last = *y0.last().unwrap();
        y0.push(last + rng.random_range(8.0..25.0));
    }
    let params = match family {
        ModelFamily::TrafficLwr { .. } => {
            vec![rng.random_range(18.0..30.0), rng.random_range(3.0..6.0)]
        }
        ModelFamily::TrafficNet { .. } => {
            let mut u: Vec<f64> = (0..family.param_len())
                .map(|_| rng.random_range(-0.7..0.7))
                .collect();
            u[0] = rng.random_range(18.0..30.0);
            u
        }
        _ => unreachable!("traffic builder got a crowd family"),
    };

    let model = family.instance(n_agents, None).unwrap();
    let fine_cfg = SimConfig::new(data_dt / substeps as f64, data_steps * substeps).unwrap();
    let fine = simulate(&model, &params, &y0, 0.0, fine_cfg).unwrap();
    let reference = jittered_reference(&fine, n_agents, data_steps, substeps, data_dt, rng);

    Case {
        name,
        family: family.clone(),
        instance,
        params,
        y0,
        destinations: None,
        n_agents,
        reference,
        substeps,
    }
}

/// Crowd scenes come in two flavors. Separated scenes keep every pair at
/// least 1 m apart with speeds too small to close the 0.5 m contact distance
/// inside the window, so the trajectory stays in the smooth force regime.
/// Contact scenes pin one nearly-still pair 0.38–0.42 m apart over a short
/// 0.08 s window: the repulsion cannot push them past the contact distance
/// in that time, so the compression branch is differentiated without a
/// branch switch mid-trajectory.
fn crowd_case(
    name: &'static str,
    family: &ModelFamily,
    instance: usize,
    contact: bool,
    rng: &mut ChaCha8Rng,
) -> Case {
    let n_agents = 2 + instance % 3;
    let (data_dt, data_steps, substeps) = if contact { (0.04, 2, 5) } else { (0.1, 4, 5) };

    'attempt: for _ in 0..80 {
        let mut positions: Vec<Vec2> = Vec::new();
        if contact {
            let center = [rng.random_range(1.2..1.8), rng.random_range(0.8..1.2)];
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let half = rng.random_range(0.19..0.21);
            positions.push([center[0] + half * angle.cos(), center[1] + half * angle.sin()]);
            positions.push([center[0] - half * angle.cos(), center[1] - half * angle.sin()]);
        }
        while positions.len() < n_agents {
            let mut tries = 0;
            loop {
                let candidate = [rng.random_range(0.0..3.0), rng.random_range(0.0..2.0)];
                let clear = positions.iter().all(|p| {
                    let d = [candidate[0] - p[0], candidate[1] - p[1]];
                    (d[0] * d[0] + d[1] * d[1]).sqrt() >= 1.0
                });
                if clear {
                    positions.push(candidate);
                    break;
                }
                tries += 1;
                if tries > 500 {
                    continue 'attempt;
                }
            }
        }

        let mut y0 = Vec::with_capacity(4 * n_agents);
        for p in &positions {
            y0.extend_from_slice(p);
        }
        let speed = if contact { 0.02 } else { 0.25 };
        for _ in 0..2 * n_agents {
            y0.push(rng.random_range(-speed..speed));
        }
        let destinations: Vec<Vec2> = positions
            .iter()
            .map(|p| [p[0] + rng.random_range(1.0..2.5), rng.random_range(0.5..2.0)])
            .collect();

        let params = match family {
            ModelFamily::CrowdSocial { .. } => vec![
                rng.random_range(0.5..3.0),
                rng.random_range(1.0..8.0),
                rng.random_range(1.0..8.0),
            ],
            ModelFamily::CrowdNet { .. } => (0..family.param_len())
                .map(|_| rng.random_range(-0.7..0.7))
                .collect(),
            _ => unreachable!("crowd builder got a traffic family"),
        };

        let model = family.instance(n_agents, Some(&destinations)).unwrap();
        let fine_cfg = SimConfig::new(data_dt / substeps as f64, data_steps * substeps).unwrap();
        let Ok(fine) = simulate(&model, &params, &y0, 0.0, fine_cfg) else {
            continue 'attempt;
        };
        let reference =
            jittered_reference(&fine, 2 * n_agents, data_steps, substeps, data_dt, rng);
        return Case {
            name,
            family: family.clone(),
            instance,
            params,
            y0,
            destinations: Some(destinations),
            n_agents,
            reference,
            substeps,
        };
    }
    panic!("could not draw a non-degenerate {name} scene");
}

fn check_case(case: &Case) -> f64 {
    let model = case
        .family
        .instance(case.n_agents, case.destinations.as_deref())
        .unwrap();
    let (_, adjoint) =
        cost_and_gradient(&model, &case.params, &case.y0, &case.reference, case.substeps).unwrap();
    let fd = fd_gradient(
        &model,
        &case.params,
        &case.y0,
        &case.reference,
        case.substeps,
        FD_STEP,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for (idx, (a, f)) in adjoint.iter().zip(&fd).enumerate() {
        let err = rel_err(*a, *f);
        assert!(
            err <= GRAD_TOL,
            "{} instance {} param {idx}: adjoint {a:e} vs finite difference {f:e} (rel err {err:.3e})",
            case.name,
            case.instance
        );
        worst = worst.max(err);
    }
    worst
}

#[test]
fn criterion_1_adjoint_gradients_match_finite_differences() {
    let start = Instant::now();
    let configs = battery();
    assert_eq!(configs.len(), 7, "battery covers every model shape");

    let mut cases = Vec::with_capacity(configs.len() * INSTANCES);
    for (ci, (name, family)) in configs.iter().enumerate() {
        for i in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
            rng.set_stream(((ci as u64) << 32) | i as u64);
            let case = match family {
                ModelFamily::TrafficLwr { .. } | ModelFamily::TrafficNet { .. } => {
                    traffic_case(name, family, i, &mut rng)
                }
                ModelFamily::CrowdSocial { .. } => {
                    crowd_case(name, family, i, i % 2 == 1, &mut rng)
                }
                ModelFamily::CrowdNet { .. } => crowd_case(name, family, i, false, &mut rng),
            };
            assert!(case.n_agents <= 4, "scenes stay small");
            assert!(
                (case.reference.steps()) * case.substeps <= 25,
                "fine trajectories stay short"
            );
            cases.push(case);
        }
    }

    let worst = cases
        .par_iter()
        .map(check_case)
        .reduce(|| 0.0, f64::max);

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed <= 60.0, "gradient battery took {elapsed:.1}s");
    println!(
        "[PASS] criterion 1: adjoint matches finite differences on {} instances \
         (worst rel err {worst:.3e}, {elapsed:.1}s)",
        cases.len()
    );
}

// --- criterion 2: benchmark pair-force table ------------------------------

#[test]
fn criterion_2_pair_forces_match_benchmark_scenes() {
    // Six canonical two-pedestrian scenes, each from both perspectives:
    // head-on and same-direction at a frontal offset of 0.44 m, the same two
    // at a slight lateral offset, and side-by-side passing/walking at a
    // lateral offset of 0.44 m. Forces were computed independently for the
    // calibrated parameters below.
    #[rustfmt::skip]
    let scenes: [([f64; 2], [f64; 2], [f64; 2], [f64; 2], [f64; 2]); 12] = [
        ([0.0, 0.22], [0.0, -1.0], [0.0, -0.22], [0.0, 1.0], [0.0, 2.1118]),
        ([0.0, -0.22], [0.0, 1.0], [0.0, 0.22], [0.0, -1.0], [0.0, -2.1118]),
        ([0.0, 0.22], [0.0, 1.0], [0.0, -0.22], [0.0, 1.0], [0.0, 2.1118]),
        ([0.0, -0.22], [0.0, 1.0], [0.0, 0.22], [0.0, 1.0], [0.0, -2.1118]),
        ([0.01, 0.22], [0.0, -1.0], [-0.01, -0.22], [0.0, 1.0], [0.0417, 2.0961]),
        ([-0.01, -0.22], [0.0, 1.0], [0.01, 0.22], [0.0, -1.0], [-0.0417, -2.0961]),
        ([0.01, 0.22], [0.0, 1.0], [-0.01, -0.22], [0.0, 1.0], [0.0952, 2.0936]),
        ([-0.01, -0.22], [0.0, 1.0], [0.01, 0.22], [0.0, 1.0], [-0.0952, -2.0936]),
        ([0.22, 0.0], [0.0, -1.0], [-0.22, 0.0], [0.0, 1.0], [2.1118, 1.1867]),
        ([-0.22, 0.0], [0.0, 1.0], [0.22, 0.0], [0.0, -1.0], [-2.1118, -1.1867]),
        ([0.22, 0.0], [0.0, 1.0], [-0.22, 0.0], [0.0, 1.0], [2.1118, 0.0]),
        ([-0.22, 0.0], [0.0, 1.0], [0.22, 0.0], [0.0, 1.0], [-2.1118, 0.0]),
    ];

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "run.toml",
        "schema_version = 1\n[model]\nfamily = \"crowd_social\"\n\
         [init]\nparams = [0.0044, 34.9539, 9.8894]\n",
    );
    let mut csv = String::from("xi_x,xi_y,vi_x,vi_y,xj_x,xj_y,vj_x,vj_y\n");
    for (xi, vi, xj, vj, _) in &scenes {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            xi[0], xi[1], vi[0], vi[1], xj[0], xj[1], vj[0], vj[1]
        ));
    }
    write(dir, "scenarios.csv", &csv);

    let out = forcefit(
        dir,
        &["pair-study", "--config", "run.toml", "--scenarios", "scenarios.csv", "--out-dir", "."],
    );
    assert_success(&out);

    let table = read(dir, "pair_study.csv");
    let rows: Vec<Vec<f64>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), scenes.len());

    let check = |got: f64, expected: f64, what: String| {
        if expected.abs() < 1e-3 {
            assert!(
                (got - expected).abs() <= 1e-3,
                "{what}: got {got}, expected {expected} (absolute)"
            );
        } else {
            let rel = ((got - expected) / expected).abs();
            assert!(
                rel <= 0.01,
                "{what}: got {got}, expected {expected} (rel err {rel:.4})"
            );
        }
    };
    for (row, (_, _, _, _, force)) in rows.iter().zip(&scenes) {
        let (fx, fy) = (row[8], row[9]);
        check(fx, force[0], format!("scene {row:?} fx"));
        check(fy, force[1], format!("scene {row:?} fy"));
    }

    // The passing scene's frictional component is pinned tighter: the slip
    // speed is exactly 2 m/s there, so the tangential force is known to four
    // decimals. In the pair frame (normal toward the reported agent) the
    // projection is the same from both perspectives.
    for idx in [8usize, 9] {
        let tangential = rows[idx][11];
        let rel = (tangential - 1.1867).abs() / 1.1867;
        assert!(
            rel <= 1e-3,
            "passing-scene friction: got {tangential}, expected 1.1867 (rel err {rel:.2e})"
        );
    }

    println!("[PASS] criterion 2: all 12 benchmark pair forces reproduced within 1%");
}

// --- criterion 3: synthetic traffic parameter recovery --------------------

const RECOVERY_CONFIG: &str = r#"
schema_version = 1

[model]
family = "traffic_lwr"
lwr_variant = "linear"

[data]
paths = ["data.csv"]
dt = 0.2
min_agents = 2

[sim]
substeps = 2

[calibrate]
iterations = 6000
batch_size = 16
seed = 7

[calibrate.noise]
eta1 = 0.0

[init]
params = [30.0, 5.0]

[synth]
n_agents = 3
n_sequences = 50
dt = 0.2
steps = 25
substeps = 2
noise_sigma = 0.05
truth = [22.0, 5.0]
"#;

#[test]
fn criterion_3_calibration_recovers_synthetic_traffic_parameters() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "run.toml", RECOVERY_CONFIG);

    let out = forcefit(dir, &["synth", "--config", "run.toml", "--seed", "123", "--out-dir", "."]);
    assert_success(&out);
    std::fs::rename(dir.join("synth.csv"), dir.join("data.csv")).unwrap();

    let out = forcefit(
        dir,
        &["--threads", "1", "calibrate", "--config", "run.toml", "--out-dir", "fit"],
    );
    assert_success(&out);

    let summary: serde_json::Value =
        serde_json::from_str(&read(dir, "fit/calibration_summary.json")).unwrap();
    assert_eq!(summary["sequences"], 50);

    let fitted: Vec<f64> = serde_json::from_str::<serde_json::Value>(&read(dir, "fit/params.json"))
        .unwrap()["params"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let (v0, l) = (fitted[0], fitted[1]);
    let v0_err = (v0 - 22.0).abs() / 22.0;
    let l_err = (l - 5.0).abs() / 5.0;
    assert!(v0_err <= 0.05, "free-flow speed {v0} is {:.1}% off 22", 100.0 * v0_err);
    assert!(l_err <= 0.05, "car length {l} is {:.1}% off 5", 100.0 * l_err);

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed <= 300.0, "recovery took {elapsed:.0}s");
    println!(
        "[PASS] criterion 3: recovered ({v0:.4}, {l:.4}) from noisy data generated at (22, 5) \
         in {elapsed:.0}s single-threaded"
    );
}

// --- criterion 4: optimizer iterates --------------------------------------

#[test]
fn criterion_4_optimizer_iterates_match_independent_oracles() {
    let cfg = AdadeltaConfig::default();

    // Constant unit gradient from rest: both early iterates have closed
    // forms in (rho, eps) alone.
    let mut state = AdadeltaState::new(1);
    let mut u = vec![0.0];
    state.step(&cfg, &[1.0], &mut u).unwrap();
    assert_relative_eq!(u[0], -0.004_472_091_234_310_836_4, max_relative = 1e-12);
    state.step(&cfg, &[1.0], &mut u).unwrap();
    assert_relative_eq!(u[0], -0.009_001_153_499_844_04, max_relative = 1e-12);

    // A 100-step deterministic gradient stream, checked against a value
    // computed with an independent implementation.
    let mut state = AdadeltaState::new(1);
    let mut u = vec![0.0];
    for k in 0..100u32 {
        let g = (k as f64 / 10.0).cos();
        state.step(&cfg, &[g], &mut u).unwrap();
    }
    assert_relative_eq!(u[0], 0.028_672_043_321_057_05, max_relative = 1e-12);

    println!("[PASS] criterion 4: optimizer iterates match closed forms and the 100-step oracle at 1e-12");
}

// --- criterion 5: annealed gradient noise ---------------------------------

#[test]
fn criterion_5_noise_variance_follows_the_annealing_schedule() {
    for (eta1, eta2) in [(1.0, 0.55), (0.25, 1.25)] {
        let schedule = NoiseSchedule { eta1, eta2 };
        for k in [0u64, 3, 10] {
            let mut draws = vec![0.0; 100_000];
            schedule.perturb(&mut draws, 42, k).unwrap();
            let mean: f64 = draws.iter().sum::<f64>() / draws.len() as f64;
            let var: f64 = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                / (draws.len() - 1) as f64;
            let expected = eta1 / (1.0 + k as f64).powf(eta2);
            assert!(
                (var - expected).abs() <= 0.03 * expected,
                "schedule ({eta1}, {eta2}) at iteration {k}: sample variance {var} vs {expected}"
            );
        }
    }
    println!("[PASS] criterion 5: sampled noise variance tracks the annealing schedule within 3%");
}

// --- criterion 6: structural invariants -----------------------------------

fn nn_gradients_match_finite_differences(rng: &mut ChaCha8Rng) {
    let spec = NetSpec::new(vec![3, 5, 2]).unwrap();
    let h = 1e-6;
    for _ in 0..10 {
        let w: Vec<f64> = (0..spec.param_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let trace = nn::forward_trace(&spec, &w, &x).unwrap();

        let jac = nn::jac_input(&spec, &w, &trace).unwrap();
        for j in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = nn::forward(&spec, &w, &xp).unwrap();
            let fm = nn::forward(&spec, &w, &xm).unwrap();
            for r in 0..2 {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!(
                    rel_err(jac[r * 3 + j], fd) <= 1e-5,
                    "input Jacobian entry ({r}, {j}): {} vs {fd}",
                    jac[r * 3 + j]
                );
            }
        }

        let cot: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = nn::grad_params_transposed(&spec, &w, &trace, &cot).unwrap();
        for i in 0..spec.param_len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fp = nn::forward(&spec, &wp, &x).unwrap();
            let fm = nn::forward(&spec, &wm, &x).unwrap();
            let dot = |f: &[f64]| f.iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>();
            let fd = (dot(&fp) - dot(&fm)) / (2.0 * h);
            assert!(
                rel_err(grad[i], fd) <= 1e-5,
                "weight gradient entry {i}: {} vs {fd}",
                grad[i]
            );
        }
    }
}

fn pair_force_is_antisymmetric_and_rotation_equivariant(rng: &mut ChaCha8Rng) {
    let params = SocialForceParams {
        a: 1.7,
        k: 24.0,
        kappa: 9.0,
        fixed: SocialFixed::default(),
    };
    for _ in 0..50 {
        // Mix of compressed (d < 0.5) and separated configurations.
        let d = rng.random_range(0.28..1.4);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let dx = [d * angle.cos(), d * angle.sin()];
        let dv = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];

        let f = social_pair_force(&PairKinematics { dx, dv }, &params).unwrap();
        let swapped = social_pair_force(
            &PairKinematics { dx: [-dx[0], -dx[1]], dv: [-dv[0], -dv[1]] },
            &params,
        )
        .unwrap();
        let scale = f[0].abs().max(f[1].abs()).max(1.0);
        assert!(
            (f[0] + swapped[0]).abs() <= 1e-12 * scale
                && (f[1] + swapped[1]).abs() <= 1e-12 * scale,
            "exchanging the two agents must negate the force: {f:?} vs {swapped:?}"
        );

        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let rot = |v: [f64; 2]| {
            [v[0] * t.cos() - v[1] * t.sin(), v[0] * t.sin() + v[1] * t.cos()]
        };
        let rotated = social_pair_force(&PairKinematics { dx: rot(dx), dv: rot(dv) }, &params).unwrap();
        let expected = rot(f);
        assert!(
            (rotated[0] - expected[0]).abs() <= 1e-12 * scale
                && (rotated[1] - expected[1]).abs() <= 1e-12 * scale,
            "rotating the scene must rotate the force: {rotated:?} vs {expected:?}"
        );
    }
}

fn speed_laws_are_monotone_in_the_gap(rng: &mut ChaCha8Rng) {
    let clamps = ClampCounter::default();
    for variant in [LwrVariant::Log, LwrVariant::Linear] {
        for _ in 0..20 {
            let params = LwrParams {
                v0: rng.random_range(15.0..35.0),
                l: rng.random_range(2.0..8.0),
                variant,
            };
            let mut prev = f64::NEG_INFINITY;
            for i in 1..=600 {
                let gap = 0.1 * i as f64;
                let v = lwr_velocity(gap, &params, &clamps);
                assert!(
                    v >= prev - 1e-12,
                    "{variant:?} speed law not monotone at gap {gap}: {v} < {prev}"
                );
                prev = v;
            }
        }
    }
}

fn euler_refinement_is_first_order() {
    let family = ModelFamily::CrowdSocial {
        fixed: SocialFixed::default(),
        walls: Arc::new(WallGeometry::default()),
    };
    let destinations: Vec<Vec2> = vec![[3.0, 0.5], [2.5, 1.5], [4.0, 0.0]];
    let model = family.instance(3, Some(&destinations)).unwrap();
    let params = [2.0, 6.0, 4.0];
    let y0 = [
        0.0, 0.0, 0.8, 0.25, 1.7, 0.9, // positions
        0.25, 0.1, -0.15, 0.2, 0.05, -0.2, // velocities
    ];
    let final_state = |dt: f64, steps: usize| -> Vec<f64> {
        simulate(&model, &params, &y0, 0.0, SimConfig::new(dt, steps).unwrap())
            .unwrap()
            .state(steps)
            .to_vec()
    };
    let truth = final_state(0.000625, 640);
    let err = |dt: f64, steps: usize| -> f64 {
        final_state(dt, steps)
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let errs = [err(0.04, 10), err(0.02, 20), err(0.01, 40)];
    for pair in errs.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!(
            (1.8..=2.2).contains(&ratio),
            "halving the step must halve the error: ratio {ratio:.3} (errors {errs:?})"
        );
    }
}

fn traffic_dynamics_are_translation_invariant() {
    let family = ModelFamily::TrafficLwr {
        variant: LwrVariant::Linear,
        diagnostics: Arc::new(Diagnostics::default()),
    };
    let model = family.instance(3, None).unwrap();
    let params = [25.0, 5.0];
    let y0 = [0.0, 12.0, 27.0];
    let shift = 500.0;
    let shifted: Vec<f64> = y0.iter().map(|x| x + shift).collect();
    let cfg = SimConfig::new(0.1, 30).unwrap();
    let base = simulate(&model, &params, &y0, 0.0, cfg).unwrap();
    let moved = simulate(&model, &params, &shifted, 0.0, cfg).unwrap();
    for step in 0..=30 {
        for (a, b) in base.state(step).iter().zip(moved.state(step)) {
            assert!(
                ((b - a) - shift).abs() <= 1e-9,
                "translating the road must translate the trajectory (step {step})"
            );
        }
    }
}

fn projections_are_idempotent(rng: &mut ChaCha8Rng) {
    for (name, family) in battery() {
        let projection = Projection::for_family(&family);
        for _ in 0..50 {
            let mut u: Vec<f64> = (0..family.param_len())
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            projection.apply(&mut u);
            assert!(projection.is_admissible(&u), "{name}: projected point inadmissible");
            let mut again = u.clone();
            projection.apply(&mut again);
            assert_eq!(again, u, "{name}: projecting twice moved the point");
        }
    }
}

fn preprocessing_is_deterministic_and_loss_free() {
    // Traffic: generation is byte-deterministic, extraction is repeatable,
    // and with zero measurement noise the extracted windows replay the
    // generating model exactly — the tracking cost of the true parameters
    // vanishes identically.
    let family = ModelFamily::TrafficLwr {
        variant: LwrVariant::Linear,
        diagnostics: Arc::new(Diagnostics::default()),
    };
    let truth = [22.0, 5.0];
    let cfg = SynthConfig {
        n_agents: 3,
        n_sequences: 4,
        dt: 0.2,
        steps: 12,
        substeps: 2,
        noise_sigma: 0.0,
    };
    let generate = || -> Vec<u8> {
        let mut bytes = Vec::new();
        synth_traffic(&family, &truth, &cfg, 9, &mut bytes).unwrap();
        bytes
    };
    let bytes = generate();
    assert_eq!(bytes, generate(), "generation must be byte-deterministic");

    let extract = |bytes: &[u8]| -> Vec<SequenceData> {
        let set = load_tracks(bytes, None).unwrap();
        let grid = interpolate_to_grid(&set, 0.2).unwrap();
        extract_traffic_sequences(&grid, 2).unwrap()
    };
    let sequences = extract(&bytes);
    assert_eq!(sequences, extract(&bytes), "extraction must be repeatable");
    assert_eq!(sequences.len(), 4);
    for seq in &sequences {
        let model = family.instance(seq.n_agents(), None).unwrap();
        let report = sequence_cost(&model, &truth, &seq.y0, &seq.reference, 2).unwrap();
        assert_eq!(
            report.value, 0.0,
            "noise-free data written to CSV and read back must replay at zero cost"
        );
    }

    // Crowd: the same repeatability through the 2-D loader.
    let crowd = ModelFamily::CrowdSocial {
        fixed: SocialFixed::default(),
        walls: Arc::new(WallGeometry::corridor(8.0, 2.0, 1.0).unwrap()),
    };
    let crowd_cfg = SynthConfig {
        n_agents: 3,
        n_sequences: 3,
        dt: 0.1,
        steps: 10,
        substeps: 2,
        noise_sigma: 0.01,
    };
    let mut crowd_bytes = Vec::new();
    synth_crowd(&crowd, &[1.2, 5.0, 3.0], &crowd_cfg, 8.0, 2.0, 5, &mut crowd_bytes).unwrap();
    let crowd_extract = |bytes: &[u8]| -> Vec<SequenceData> {
        let set = load_tracks(bytes, None).unwrap();
        let grid = interpolate_to_grid(&set, 0.1).unwrap();
        extract_crowd_sequences(&grid, 2, 10).unwrap()
    };
    let crowd_sequences = crowd_extract(&crowd_bytes);
    assert!(!crowd_sequences.is_empty());
    assert_eq!(crowd_sequences, crowd_extract(&crowd_bytes));
}

fn wall_geometry_round_trips_through_csv() {
    let walls = WallGeometry::corridor(6.0, 2.5, 1.5).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("walls.csv");
    walls.write_path(&path).unwrap();
    let back = WallGeometry::from_path(&path).unwrap();
    assert_eq!(walls, back, "wall samples must survive a CSV round trip exactly");
}

#[test]
fn criterion_6_model_and_pipeline_invariants_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1471);
    nn_gradients_match_finite_differences(&mut rng);
    pair_force_is_antisymmetric_and_rotation_equivariant(&mut rng);
    speed_laws_are_monotone_in_the_gap(&mut rng);
    euler_refinement_is_first_order();
    traffic_dynamics_are_translation_invariant();
    projections_are_idempotent(&mut rng);
    preprocessing_is_deterministic_and_loss_free();
    wall_geometry_round_trips_through_csv();
    println!("[PASS] criterion 6: structural invariants hold for models, optimizer and pipeline");
}

// --- criterion 7: bit-level reproducibility -------------------------------

const REPRO_CONFIG: &str = r#"
schema_version = 1

[model]
family = "traffic_lwr"
lwr_variant = "linear"

[data]
paths = ["data.csv"]
dt = 0.2
min_agents = 2

[sim]
substeps = 2

[calibrate]
iterations = 80
batch_size = 4
seed = 11

[calibrate.noise]
eta1 = 0.0

[init]
params = [27.0, 4.0]

[synth]
n_agents = 2
n_sequences = 6
dt = 0.2
steps = 10
substeps = 2
noise_sigma = 0.02
truth = [22.0, 5.0]
"#;

#[test]
fn criterion_7_zero_noise_calibration_is_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "run.toml", REPRO_CONFIG);

    let out = forcefit(dir, &["synth", "--config", "run.toml", "--out-dir", "."]);
    assert_success(&out);
    std::fs::rename(dir.join("synth.csv"), dir.join("data.csv")).unwrap();

    for out_dir in ["a", "b"] {
        let out = forcefit(dir, &["calibrate", "--config", "run.toml", "--out-dir", out_dir]);
        assert_success(&out);
    }

    assert_eq!(
        read(dir, "a/loss_history.csv"),
        read(dir, "b/loss_history.csv"),
        "two runs with the same seed and no injected noise must emit identical loss histories"
    );
    assert_eq!(read(dir, "a/params.json"), read(dir, "b/params.json"));
    println!("[PASS] criterion 7: repeated zero-noise calibration is bit-for-bit identical");
}
