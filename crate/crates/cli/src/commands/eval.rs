//! `forcefit simulate` and `forcefit cost` — run the model with fixed
//! parameters over the extracted sequences and report how well it tracks.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{Context, Result};

use forcefit::adjoint::sequence_cost;
use forcefit::data::SequenceData;
use forcefit::dynamics::{simulate, ModelFamily, SimConfig, Trajectory};

use crate::commands::{ensure_out_dir, load_dataset, resolve_params, write_csv};
use crate::config::RunConfig;

pub struct Args<'a> {
    pub config: &'a Path,
    pub out_dir: &'a Path,
    pub params: Option<&'a Path>,
    pub lane: Option<i64>,
}

/// Forward-simulates one sequence on the fine grid implied by its reference
/// grid and the substep count.
fn simulate_sequence(
    family: &ModelFamily,
    params: &[f64],
    seq: &SequenceData,
    substeps: usize,
) -> Result<Trajectory> {
    let model = family.instance(seq.n_agents(), seq.destinations.as_deref())?;
    let dt_fine = seq.reference.dt() / substeps as f64;
    let cfg = SimConfig::new(dt_fine, seq.reference.steps() * substeps)?;
    Ok(simulate(&model, params, &seq.y0, seq.reference.t0(), cfg)?)
}

/// `simulate`: write the model's positions at the data nodes of every
/// sequence, in the original data frame (mirrored sequences are flipped
/// back), under the same trajectory schema the loader reads.
pub fn simulate_cmd(args: Args<'_>) -> Result<()> {
    let config = RunConfig::load(args.config)?;
    let family = config.build_family()?;
    let params = resolve_params(&config, &family, args.params)?;
    let per_path = load_dataset(&config, args.lane)?;
    let substeps = config.sim.substeps;
    let crowd = family.is_crowd();

    ensure_out_dir(args.out_dir)?;
    let out_path = args.out_dir.join("simulated.csv");
    let mut writer = csv::Writer::from_path(&out_path)
        .with_context(|| format!("cannot create {}", out_path.display()))?;
    if crowd {
        writer.write_record(["t", "agent_id", "x", "y"])?;
    } else {
        writer.write_record(["t", "agent_id", "x"])?;
    }

    // Consecutive crowd windows share their boundary node; keep the first
    // occurrence so each agent's output times stay strictly increasing.
    let mut last_time: HashMap<String, f64> = HashMap::new();
    let mut sequences = 0usize;
    let mut rows = 0usize;
    for (_, seqs) in &per_path {
        for seq in seqs {
            let traj = simulate_sequence(&family, &params, seq, substeps)?;
            let sign = if seq.mirrored { -1.0 } else { 1.0 };
            let guard = 0.5 * seq.reference.dt();
            for n in 0..=seq.reference.steps() {
                let state = traj.state(n * substeps);
                let t = seq.reference.time(n);
                for (i, id) in seq.agent_ids.iter().enumerate() {
                    if last_time.get(id).is_some_and(|&prev| t <= prev + guard) {
                        continue;
                    }
                    last_time.insert(id.clone(), t);
                    if crowd {
                        writer.write_record([
                            t.to_string(),
                            id.clone(),
                            state[2 * i].to_string(),
                            state[2 * i + 1].to_string(),
                        ])?;
                    } else {
                        writer.write_record([
                            t.to_string(),
                            id.clone(),
                            (sign * state[i]).to_string(),
                        ])?;
                    }
                    rows += 1;
                }
            }
            sequences += 1;
        }
    }
    writer.flush()?;
    println!(
        "simulated {sequences} sequences ({rows} rows) with {} parameters",
        config.family_kind().as_str()
    );
    println!("wrote {}", out_path.display());
    Ok(())
}

/// `cost`: mean tracking cost per data file and over the whole dataset.
pub fn cost_cmd(args: Args<'_>) -> Result<()> {
    let config = RunConfig::load(args.config)?;
    let family = config.build_family()?;
    let params = resolve_params(&config, &family, args.params)?;
    let per_path = load_dataset(&config, args.lane)?;
    let substeps = config.sim.substeps;

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut total_cost = 0.0;
    let mut total_sequences = 0usize;
    for (path, seqs) in &per_path {
        let mut sum = 0.0;
        for seq in seqs {
            let model = family.instance(seq.n_agents(), seq.destinations.as_deref())?;
            sum += sequence_cost(&model, &params, &seq.y0, &seq.reference, substeps)?.value;
        }
        let mean = sum / seqs.len() as f64;
        rows.push(vec![
            path.display().to_string(),
            seqs.len().to_string(),
            mean.to_string(),
        ]);
        total_cost += sum;
        total_sequences += seqs.len();
    }
    let overall = total_cost / total_sequences as f64;
    rows.push(vec![
        "TOTAL".to_string(),
        total_sequences.to_string(),
        overall.to_string(),
    ]);

    ensure_out_dir(args.out_dir)?;
    let out_path = args.out_dir.join("costs.csv");
    write_csv(&out_path, &["dataset", "sequences", "mean_cost"], rows)?;
    println!("mean tracking cost {overall:.6e} over {total_sequences} sequences");
    println!("wrote {}", out_path.display());
    Ok(())
}
