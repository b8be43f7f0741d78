//! `forcefit force-grid` and `forcefit pair-study` — tabulate the calibrated
//! interaction law itself, independent of any trajectory data.

use std::path::Path;

use anyhow::{bail, Context, Result};

use forcefit::dynamics::ModelFamily;
use forcefit::forces::{
    lwr_velocity, social_pair_force, ClampCounter, LwrParams, PairKinematics, SocialForceParams,
};
use forcefit::nn;
use forcefit::vec2::{self, Vec2};

use crate::commands::{ensure_out_dir, linspace, resolve_params, write_csv};
use crate::config::RunConfig;

pub struct GridArgs<'a> {
    pub config: &'a Path,
    pub out_dir: &'a Path,
    pub params: Option<&'a Path>,
    /// Grid points per axis.
    pub samples: usize,
    /// Crowd displacement grid spans `[-extent, extent]` on both axes.
    pub extent: f64,
    /// Traffic gaps span `[0.5, max_gap]`.
    pub max_gap: f64,
}

/// Bare pair force of a crowd family (no agent-count normalization).
fn pair_force(family: &ModelFamily, u: &[f64], dx: Vec2, dv: Vec2) -> Result<Vec2> {
    match family {
        ModelFamily::CrowdSocial { fixed, .. } => {
            let params = SocialForceParams {
                a: u[0],
                k: u[1],
                kappa: u[2],
                fixed: *fixed,
            };
            Ok(social_pair_force(&PairKinematics { dx, dv }, &params)?)
        }
        ModelFamily::CrowdNet { interaction, .. } => {
            let weights = &u[..interaction.param_len()];
            let out = nn::forward(interaction, weights, &[dx[0], dx[1], dv[0], dv[1]])?;
            Ok([out[0], out[1]])
        }
        _ => bail!("pair forces exist only for crowd families"),
    }
}

/// Speed prescribed by a traffic family for a bumper-to-bumper gap.
fn gap_speed(family: &ModelFamily, u: &[f64], gap: f64) -> Result<f64> {
    match family {
        ModelFamily::TrafficLwr { variant, .. } => {
            let params = LwrParams {
                v0: u[0],
                l: u[1],
                variant: *variant,
            };
            Ok(lwr_velocity(gap, &params, &ClampCounter::default()))
        }
        ModelFamily::TrafficNet { spec, .. } => Ok(nn::forward(spec, &u[1..], &[gap])?[0]),
        _ => bail!("gap speed laws exist only for traffic families"),
    }
}

/// The relative velocities the crowd force grid is evaluated at.
const GRID_VELOCITIES: [Vec2; 5] = [
    [0.0, 0.0],
    [1.0, 0.0],
    [0.0, 1.0],
    [-1.0, 0.0],
    [0.0, -1.0],
];

pub fn force_grid(args: GridArgs<'_>) -> Result<()> {
    if args.samples < 2 {
        bail!("--samples must be at least 2");
    }
    if !(args.extent > 0.0) || !(args.max_gap > 0.5) {
        bail!("--extent must be positive and --max-gap above 0.5");
    }
    let config = RunConfig::load(args.config)?;
    let family = config.build_family()?;
    let u = resolve_params(&config, &family, args.params)?;
    ensure_out_dir(args.out_dir)?;

    if !family.is_crowd() {
        let out_path = args.out_dir.join("force_grid.csv");
        let mut rows = Vec::with_capacity(args.samples);
        for gap in linspace(0.5, args.max_gap, args.samples) {
            let speed = gap_speed(&family, &u, gap)?;
            rows.push(vec![gap.to_string(), speed.to_string()]);
        }
        write_csv(&out_path, &["gap", "speed"], rows)?;
        println!("tabulated the speed law at {} gaps", args.samples);
        println!("wrote {}", out_path.display());
        return Ok(());
    }

    let coords = linspace(-args.extent, args.extent, args.samples);
    for (idx, dv) in GRID_VELOCITIES.iter().enumerate() {
        let out_path = args.out_dir.join(format!("force_grid_dv{idx}.csv"));
        let mut rows = Vec::with_capacity(args.samples * args.samples);
        for &dx in &coords {
            for &dy in &coords {
                // The self-displacement is outside every pair law's domain.
                if (dx * dx + dy * dy).sqrt() < 1e-9 {
                    continue;
                }
                let f = pair_force(&family, &u, [dx, dy], *dv)?;
                rows.push(vec![
                    dx.to_string(),
                    dy.to_string(),
                    dv[0].to_string(),
                    dv[1].to_string(),
                    f[0].to_string(),
                    f[1].to_string(),
                ]);
            }
        }
        write_csv(&out_path, &["dx", "dy", "dvx", "dvy", "fx", "fy"], rows)?;
        println!("wrote {}", out_path.display());
    }
    println!(
        "tabulated the pair force on a {0}×{0} displacement grid at {1} relative velocities",
        args.samples,
        GRID_VELOCITIES.len()
    );
    Ok(())
}

pub struct PairArgs<'a> {
    pub config: &'a Path,
    pub out_dir: &'a Path,
    pub params: Option<&'a Path>,
    pub scenarios: &'a Path,
}

const SCENARIO_HEADER: [&str; 8] = [
    "xi_x", "xi_y", "vi_x", "vi_y", "xj_x", "xj_y", "vj_x", "vj_y",
];

/// One scenario: full kinematics of agents `i` (force receiver) and `j`.
struct Scenario {
    xi: Vec2,
    vi: Vec2,
    xj: Vec2,
    vj: Vec2,
}

fn read_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read scenarios from {}", path.display()))?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers != SCENARIO_HEADER {
        bail!(
            "scenario header must be `{}`, got `{}`",
            SCENARIO_HEADER.join(","),
            headers.join(",")
        );
    }
    let mut scenarios = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut fields = [0.0f64; 8];
        for (i, slot) in fields.iter_mut().enumerate() {
            *slot = record
                .get(i)
                .and_then(|s| s.parse().ok())
                .with_context(|| {
                    format!("line {line} of {}: expected eight numbers", path.display())
                })?;
        }
        scenarios.push(Scenario {
            xi: [fields[0], fields[1]],
            vi: [fields[2], fields[3]],
            xj: [fields[4], fields[5]],
            vj: [fields[6], fields[7]],
        });
    }
    if scenarios.is_empty() {
        bail!("{} holds no scenarios", path.display());
    }
    Ok(scenarios)
}

/// `pair-study`: evaluate the pair force for explicit two-agent scenarios
/// and split it into normal (along `x_i − x_j`) and tangential components.
pub fn pair_study(args: PairArgs<'_>) -> Result<()> {
    let config = RunConfig::load(args.config)?;
    let family = config.build_family()?;
    if !family.is_crowd() {
        bail!("pair-study needs a crowd family");
    }
    let u = resolve_params(&config, &family, args.params)?;
    let scenarios = read_scenarios(args.scenarios)?;

    let mut rows = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        let dx = vec2::sub(s.xi, s.xj);
        let d = vec2::norm(dx);
        if d < 1e-9 {
            return Err(anyhow::Error::new(forcefit::Error::Degenerate(format!(
                "scenario with coincident agents at ({}, {})",
                s.xi[0], s.xi[1]
            ))));
        }
        let f = pair_force(&family, &u, dx, vec2::sub(s.vi, s.vj))?;
        let n = vec2::scale(1.0 / d, dx);
        let t = vec2::perp(n);
        rows.push(vec![
            s.xi[0].to_string(),
            s.xi[1].to_string(),
            s.vi[0].to_string(),
            s.vi[1].to_string(),
            s.xj[0].to_string(),
            s.xj[1].to_string(),
            s.vj[0].to_string(),
            s.vj[1].to_string(),
            f[0].to_string(),
            f[1].to_string(),
            vec2::dot(f, n).to_string(),
            vec2::dot(f, t).to_string(),
        ]);
    }

    ensure_out_dir(args.out_dir)?;
    let out_path = args.out_dir.join("pair_study.csv");
    write_csv(
        &out_path,
        &[
            "xi_x", "xi_y", "vi_x", "vi_y", "xj_x", "xj_y", "vj_x", "vj_y", "fx", "fy",
            "f_normal", "f_tangential",
        ],
        rows,
    )?;
    println!("evaluated {} pair scenarios", scenarios.len());
    println!("wrote {}", out_path.display());
    Ok(())
}
