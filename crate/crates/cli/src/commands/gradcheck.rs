//! `forcefit gradcheck` — verify adjoint gradients against central finite
//! differences on a built-in battery of randomized model configurations.
//!
//! Every family ships in the battery; each instance randomizes agent count,
//! initial state, parameters, and the reference trajectory (a simulated
//! trajectory with perturbed nodes, so the cost and its gradient are
//! non-trivial). Scenes are laid out so that no contact threshold is crossed
//! *during* a simulation — the battery measures adjoint consistency, not
//! finite-difference behavior at force kinks; contact terms are exercised by
//! an agent that stays in wall contact throughout.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Result;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use forcefit::adjoint::{cost_and_gradient, fd_gradient};
use forcefit::dynamics::{simulate, Diagnostics, ModelFamily, SimConfig, Trajectory};
use forcefit::forces::{LwrVariant, SocialFixed, WallGeometry};
use forcefit::nn::NetSpec;
use forcefit::vec2::Vec2;

use crate::commands::{ensure_out_dir, write_csv};

pub struct Args<'a> {
    pub out_dir: &'a Path,
    pub instances: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: mis-scale and offset the largest adjoint component, which
    /// a working check must flag.
    pub corrupt_jacobian: bool,
}

/// Components smaller than this are compared absolutely (relative error
/// against the floor instead of the component size).
const REL_FLOOR: f64 = 1e-3;

/// Fresh draws an instance gets when its reference simulation degenerates.
const BUILD_RETRIES: usize = 50;

struct Case {
    family_name: &'static str,
    family: ModelFamily,
    instance: usize,
    params: Vec<f64>,
    y0: Vec<f64>,
    destinations: Option<Vec<Vec2>>,
    n_agents: usize,
    reference: Trajectory,
    substeps: usize,
}

struct Row {
    family_name: &'static str,
    instance: usize,
    param_index: usize,
    adjoint: f64,
    fd: f64,
    rel_err: f64,
}

fn battery() -> Result<Vec<(&'static str, ModelFamily)>> {
    let corridor = Arc::new(WallGeometry::corridor(6.0, 2.5, 1.5)?);
    let no_walls = Arc::new(WallGeometry::default());
    let crowd_net = |walls: &Arc<WallGeometry>| -> Result<ModelFamily> {
        Ok(ModelFamily::CrowdNet {
            interaction: NetSpec::new(vec![4, 4, 2])?,
            wall: NetSpec::new(vec![4, 4, 2])?,
            walls: walls.clone(),
            tau: 0.5,
            mass: 1.0,
        })
    };
    Ok(vec![
        (
            "lwr_log",
            ModelFamily::TrafficLwr {
                variant: LwrVariant::Log,
                diagnostics: Arc::new(Diagnostics::default()),
            },
        ),
        (
            "lwr_linear",
            ModelFamily::TrafficLwr {
                variant: LwrVariant::Linear,
                diagnostics: Arc::new(Diagnostics::default()),
            },
        ),
        (
            "traffic_net",
            ModelFamily::TrafficNet {
                spec: NetSpec::new(vec![1, 6, 1])?,
                diagnostics: Arc::new(Diagnostics::default()),
            },
        ),
        (
            "crowd_social",
            ModelFamily::CrowdSocial {
                fixed: SocialFixed::default(),
                walls: no_walls.clone(),
            },
        ),
        (
            "crowd_social_walls",
            ModelFamily::CrowdSocial {
                fixed: SocialFixed::default(),
                walls: corridor.clone(),
            },
        ),
        ("crowd_net", crowd_net(&no_walls)?),
        ("crowd_net_walls", crowd_net(&corridor)?),
    ])
}

/// Samples the fine trajectory back to the data grid and perturbs every
/// position entry, producing a reference the simulation cannot match.
fn perturbed_reference(
    fine: &Trajectory,
    position_dim: usize,
    data_steps: usize,
    substeps: usize,
    data_dt: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let states: Vec<Vec<f64>> = (0..=data_steps)
        .map(|n| {
            fine.state(n * substeps)[..position_dim]
                .iter()
                .map(|x| x + rng.random_range(-noise..noise))
                .collect()
        })
        .collect();
    Ok(Trajectory::new(fine.t0(), data_dt, states)?)
}

fn build_traffic_case(
    name: &'static str,
    family: &ModelFamily,
    instance: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let n_agents = 2 + instance % 3;
    let data_dt = 0.2;
    let data_steps = 5;
    let substeps = 4;

    let mut y0 = Vec::with_capacity(n_agents);
    let mut x = 0.0;
    for i in 0..n_agents {
        if i > 0 {
            x += rng.random_range(8.0..25.0);
        }
        y0.push(x);
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

    let model = family.instance(n_agents, None)?;
    let fine_cfg = SimConfig::new(data_dt / substeps as f64, data_steps * substeps)?;
    let fine = simulate(&model, &params, &y0, 0.0, fine_cfg)?;
    let reference =
        perturbed_reference(&fine, n_agents, data_steps, substeps, data_dt, 0.3, rng)?;

    Ok(Case {
        family_name: name,
        family: family.clone(),
        instance,
        params,
        y0,
        destinations: None,
        n_agents,
        reference,
        substeps,
    })
}

fn build_crowd_case(
    name: &'static str,
    family: &ModelFamily,
    instance: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let n_agents = 2 + instance % 3;
    let data_dt = 0.1;
    let data_steps = 4;
    let substeps = 5;
    let has_walls = match family {
        ModelFamily::CrowdSocial { walls, .. } | ModelFamily::CrowdNet { walls, .. } => {
            !walls.is_empty()
        }
        _ => unreachable!("crowd builder got a traffic family"),
    };

    'attempt: for attempt in 0..=BUILD_RETRIES {
        // Positions pairwise at least 1 m apart with speeds up to 0.35 m/s:
        // over the 0.4 s window no pair can close the 0.5 m contact
        // threshold, so the integrand stays smooth, while separations stay
        // small enough for the exponential repulsion to matter. With walls,
        // agent 0 is pinned in shallow contact with the bottom wall (and
        // barely moves), so the contact branch is differentiated without
        // threshold crossings; everyone else keeps a safe margin from both
        // walls.
        let mut positions: Vec<Vec2> = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let mut tries = 0;
            loop {
                let candidate: Vec2 = if has_walls && i == 0 {
                    [rng.random_range(0.5..5.5), rng.random_range(0.18..0.195)]
                } else if has_walls {
                    [rng.random_range(0.5..5.5), rng.random_range(0.5..2.0)]
                } else {
                    [rng.random_range(0.0..3.0), rng.random_range(0.0..2.0)]
                };
                let clear = positions.iter().all(|p| {
                    let d = [candidate[0] - p[0], candidate[1] - p[1]];
                    (d[0] * d[0] + d[1] * d[1]).sqrt() >= 1.0
                });
                if clear {
                    positions.push(candidate);
                    break;
                }
                tries += 1;
                if tries > 200 {
                    continue 'attempt;
                }
            }
        }

        let mut y0 = Vec::with_capacity(4 * n_agents);
        for p in &positions {
            y0.extend_from_slice(p);
        }
        for i in 0..n_agents {
            let slow = has_walls && i == 0;
            let range = if slow { -0.02..0.02 } else { -0.25..0.25 };
            y0.push(rng.random_range(range.clone()));
            y0.push(rng.random_range(range));
        }
        let destinations: Vec<Vec2> = positions
            .iter()
            .map(|p| {
                [
                    p[0] + rng.random_range(1.0..2.5),
                    rng.random_range(0.5..2.0),
                ]
            })
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
            _ => unreachable!(),
        };

        let model = family.instance(n_agents, Some(&destinations))?;
        let fine_cfg = SimConfig::new(data_dt / substeps as f64, data_steps * substeps)?;
        let fine = match simulate(&model, &params, &y0, 0.0, fine_cfg) {
            Ok(t) => t,
            Err(e) if e.is_numerical() && attempt < BUILD_RETRIES => continue 'attempt,
            Err(e) => return Err(e.into()),
        };
        let reference = perturbed_reference(
            &fine,
            2 * n_agents,
            data_steps,
            substeps,
            data_dt,
            0.3,
            rng,
        )?;
        return Ok(Case {
            family_name: name,
            family: family.clone(),
            instance,
            params,
            y0,
            destinations: Some(destinations),
            n_agents,
            reference,
            substeps,
        });
    }
    anyhow::bail!("could not draw a non-degenerate {name} scene after {BUILD_RETRIES} retries")
}

fn evaluate(case: &Case, fd_step: f64, corrupt: bool) -> Result<Vec<Row>> {
    let model = case
        .family
        .instance(case.n_agents, case.destinations.as_deref())?;
    let (_, mut adjoint) = cost_and_gradient(
        &model,
        &case.params,
        &case.y0,
        &case.reference,
        case.substeps,
    )?;
    if corrupt {
        let largest = adjoint
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i);
        if let Some(i) = largest {
            // Multiplicative error for large components, additive for small
            // ones: detectable at any gradient scale.
            adjoint[i] = adjoint[i] * 1.001 + 1e-4;
        }
    }
    let fd = fd_gradient(
        &model,
        &case.params,
        &case.y0,
        &case.reference,
        case.substeps,
        fd_step,
    )?;
    Ok(adjoint
        .iter()
        .zip(&fd)
        .enumerate()
        .map(|(param_index, (&a, &f))| Row {
            family_name: case.family_name,
            instance: case.instance,
            param_index,
            adjoint: a,
            fd: f,
            rel_err: (a - f).abs() / a.abs().max(f.abs()).max(REL_FLOOR),
        })
        .collect())
}

pub fn run(args: Args<'_>) -> Result<()> {
    if args.instances == 0 {
        anyhow::bail!("--instances must be at least 1");
    }
    if !(args.fd_step > 0.0) || !(args.tolerance > 0.0) {
        anyhow::bail!("--fd-step and --tolerance must be positive");
    }
    let battery = battery()?;
    let started = Instant::now();

    // Scenes are drawn sequentially from per-instance streams, then checked
    // in parallel; rows keep battery order either way.
    let mut cases = Vec::with_capacity(battery.len() * args.instances);
    for (ci, (name, family)) in battery.iter().enumerate() {
        for instance in 0..args.instances {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            rng.set_stream(((ci as u64) << 32) | instance as u64);
            let case = if family.is_crowd() {
                build_crowd_case(name, family, instance, &mut rng)?
            } else {
                build_traffic_case(name, family, instance, &mut rng)?
            };
            cases.push(case);
        }
    }

    let per_case: Vec<Result<Vec<Row>>> = cases
        .par_iter()
        .map(|case| evaluate(case, args.fd_step, args.corrupt_jacobian))
        .collect();
    let mut rows = Vec::new();
    for r in per_case {
        rows.extend(r?);
    }

    ensure_out_dir(args.out_dir)?;
    let report_path = args.out_dir.join("gradcheck.csv");
    write_csv(
        &report_path,
        &["family", "instance", "param_index", "adjoint_grad", "fd_grad", "rel_err"],
        rows.iter().map(|r| {
            vec![
                r.family_name.to_string(),
                r.instance.to_string(),
                r.param_index.to_string(),
                r.adjoint.to_string(),
                r.fd.to_string(),
                r.rel_err.to_string(),
            ]
        }),
    )?;

    let mut overall: f64 = 0.0;
    for (name, _) in &battery {
        let worst = rows
            .iter()
            .filter(|r| r.family_name == *name)
            .map(|r| r.rel_err)
            .fold(0.0, f64::max);
        overall = overall.max(worst);
        let components = rows.iter().filter(|r| r.family_name == *name).count();
        println!(
            "{name}: max relative error {worst:.3e} over {} instances ({components} components)",
            args.instances
        );
    }
    println!(
        "checked {} gradient components in {:.2}s; report: {}",
        rows.len(),
        started.elapsed().as_secs_f64(),
        report_path.display()
    );

    if overall > args.tolerance {
        return Err(anyhow::Error::new(forcefit::Error::Degenerate(format!(
            "gradient check failed: max relative error {overall:.3e} exceeds {:.1e}",
            args.tolerance
        )))
        .context("adjoint and finite-difference gradients disagree"));
    }
    println!(
        "gradient check passed: max relative error {overall:.3e} within {:.1e}",
        args.tolerance
    );
    Ok(())
}
