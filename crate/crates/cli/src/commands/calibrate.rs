//! `forcefit calibrate` — fit model parameters to trajectory data.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use forcefit::dynamics::ModelFamily;
use forcefit::optim::{default_init, run_calibration_with, Projection};

use crate::commands::{ensure_out_dir, flatten_dataset, load_dataset, write_csv};
use crate::config::{ParamsFile, RunConfig, SCHEMA_VERSION};

pub struct Args<'a> {
    pub config: &'a Path,
    pub out_dir: &'a Path,
    pub seed: Option<u64>,
    pub lane: Option<i64>,
    /// Iterations between parameter snapshots (0 picks one tenth of the run).
    pub checkpoint_every: usize,
}

pub fn run(args: Args<'_>) -> Result<()> {
    let config = RunConfig::load(args.config)?;
    let family = config.build_family()?;
    let sequences = flatten_dataset(load_dataset(&config, args.lane)?);
    let substeps = config.sim.substeps;

    let mut cal_cfg = config.calibrate;
    if let Some(seed) = args.seed {
        cal_cfg.seed = seed;
    }
    let init = match &config.init {
        Some(init) => {
            if init.params.len() != family.param_len() {
                bail!(
                    "[init] params has {} components, {} needs {}",
                    init.params.len(),
                    config.family_kind().as_str(),
                    family.param_len()
                );
            }
            init.params.clone()
        }
        None => default_init(&family, cal_cfg.seed),
    };
    let projection = Projection::for_family(&family);

    let every = if args.checkpoint_every == 0 {
        (cal_cfg.iterations / 10).max(1)
    } else {
        args.checkpoint_every
    };

    println!(
        "calibrating {} against {} sequences ({} iterations, batch {}, seed {})",
        config.family_kind().as_str(),
        sequences.len(),
        cal_cfg.iterations,
        cal_cfg.batch_size,
        cal_cfg.seed
    );

    let mut checkpoints: Vec<(usize, Vec<f64>)> = Vec::new();
    let result = run_calibration_with(
        &family,
        &sequences,
        substeps,
        &init,
        &projection,
        &cal_cfg,
        |record, params| {
            if record.iteration % every == 0 {
                checkpoints.push((record.iteration, params.to_vec()));
            }
        },
    )?;
    checkpoints.push((cal_cfg.iterations, result.final_params.clone()));

    ensure_out_dir(args.out_dir)?;

    let history_path = args.out_dir.join("loss_history.csv");
    write_csv(
        &history_path,
        &["iteration", "batch_cost", "full_cost"],
        result.history.iter().map(|r| {
            vec![
                r.iteration.to_string(),
                r.batch_cost.to_string(),
                r.full_cost.to_string(),
            ]
        }),
    )?;

    let checkpoints_path = args.out_dir.join("checkpoints.csv");
    write_csv(
        &checkpoints_path,
        &["iteration", "component", "value"],
        checkpoints.iter().flat_map(|(iteration, params)| {
            let iteration = *iteration;
            params
                .iter()
                .enumerate()
                .map(move |(component, value)| {
                    vec![
                        iteration.to_string(),
                        component.to_string(),
                        value.to_string(),
                    ]
                })
                .collect::<Vec<_>>()
        }),
    )?;

    let params_path = args.out_dir.join("params.json");
    ParamsFile {
        schema_version: SCHEMA_VERSION,
        family: config.family_kind(),
        params: result.best_params.clone(),
    }
    .save(&params_path)?;

    let mut summary = json!({
        "schema_version": SCHEMA_VERSION,
        "family": config.family_kind().as_str(),
        "sequences": sequences.len(),
        "iterations": cal_cfg.iterations,
        "batch_size": cal_cfg.batch_size,
        "substeps": substeps,
        "seed": cal_cfg.seed,
        "init": init,
        "best_params": result.best_params,
        "best_cost": result.best_cost,
        "best_iteration": result.best_iteration,
        "final_params": result.final_params,
        "final_full_cost": result.history.last().map(|r| r.full_cost),
        "skipped_evaluations": result.skipped_evaluations,
    });
    match &family {
        ModelFamily::TrafficLwr { diagnostics, .. }
        | ModelFamily::TrafficNet { diagnostics, .. } => {
            summary["gap_clamps"] = json!(diagnostics.lwr_clamps.get());
            summary["overtake_evaluations"] = json!(diagnostics.overtakes());
        }
        _ => {}
    }
    let summary_path = args.out_dir.join("calibration_summary.json");
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(&summary_path, text)
        .with_context(|| format!("cannot write {}", summary_path.display()))?;

    println!(
        "best cost {:.6e} at iteration {} (skipped evaluations: {})",
        result.best_cost, result.best_iteration, result.skipped_evaluations
    );
    println!("best parameters: {:?}", result.best_params);
    for path in [&history_path, &checkpoints_path, &params_path, &summary_path] {
        println!("wrote {}", path.display());
    }
    Ok(())
}
