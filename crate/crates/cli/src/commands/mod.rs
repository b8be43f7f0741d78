//! Subcommand implementations and the helpers they share.

pub mod calibrate;
pub mod eval;
pub mod gradcheck;
pub mod study;
pub mod synth;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use forcefit::data::{
    extract_crowd_sequences, extract_traffic_sequences, interpolate_to_grid, load_tracks_path,
    SequenceData,
};
use forcefit::dynamics::ModelFamily;

use crate::config::{ParamsFile, RunConfig};

/// Creates the output directory (and parents) if it does not exist yet.
pub fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
}

/// Resolves the parameter vector an evaluation subcommand should use:
/// `--params <file>` wins, otherwise the config's `[init] params`.
pub fn resolve_params(
    config: &RunConfig,
    family: &ModelFamily,
    params_path: Option<&Path>,
) -> Result<Vec<f64>> {
    let (params, source) = if let Some(path) = params_path {
        let file = ParamsFile::load(path)?;
        if file.family != config.family_kind() {
            bail!(
                "{} holds {} parameters, but the config selects {}",
                path.display(),
                file.family.as_str(),
                config.family_kind().as_str()
            );
        }
        (file.params, path.display().to_string())
    } else if let Some(init) = &config.init {
        (init.params.clone(), "[init] params".to_string())
    } else {
        bail!("no parameters given: pass --params <file> or set [init] params in the config");
    };
    if params.len() != family.param_len() {
        bail!(
            "parameter vector from {source} has {} components, {} needs {}",
            params.len(),
            config.family_kind().as_str(),
            family.param_len()
        );
    }
    if !params.iter().all(|p| p.is_finite()) {
        bail!("parameter vector from {source} contains non-finite components");
    }
    Ok(params)
}

/// Loads every `[data]` file, grids it, and cuts it into calibration
/// sequences, keeping the per-file grouping for reporting.
pub fn load_dataset(
    config: &RunConfig,
    lane_override: Option<i64>,
) -> Result<Vec<(PathBuf, Vec<SequenceData>)>> {
    let data = config
        .data
        .as_ref()
        .context("the [data] section is required for this command")?;
    if data.paths.is_empty() {
        bail!("[data] paths is empty");
    }
    let crowd = config.family_kind().is_crowd();
    let want_dim = if crowd { 2 } else { 1 };
    let lane = lane_override.or(data.lane);

    let mut per_path = Vec::with_capacity(data.paths.len());
    let mut total = 0usize;
    for path in &data.paths {
        let set = load_tracks_path(path, lane)
            .with_context(|| format!("cannot load trajectories from {}", path.display()))?;
        if set.dim != want_dim {
            bail!(
                "{} holds {}-D positions, but family {} expects {}-D",
                path.display(),
                set.dim,
                config.family_kind().as_str(),
                want_dim
            );
        }
        let grid = interpolate_to_grid(&set, data.dt)
            .with_context(|| format!("cannot grid {}", path.display()))?;
        let sequences = if crowd {
            extract_crowd_sequences(&grid, data.min_agents, data.window_steps)
        } else {
            extract_traffic_sequences(&grid, data.min_agents)
        }
        .with_context(|| format!("cannot cut {} into sequences", path.display()))?;
        total += sequences.len();
        per_path.push((path.clone(), sequences));
    }
    if total == 0 {
        bail!(
            "no calibration sequences: no window of the data keeps {} agents in view",
            data.min_agents
        );
    }
    Ok(per_path)
}

pub fn flatten_dataset(per_path: Vec<(PathBuf, Vec<SequenceData>)>) -> Vec<SequenceData> {
    per_path.into_iter().flat_map(|(_, s)| s).collect()
}

/// Writes one CSV file with a header row; cells are shortest-roundtrip
/// decimal representations.
pub fn write_csv<I, R, C>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = C>,
    C: AsRef<[u8]>,
{
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// `count` evenly spaced values spanning `[lo, hi]` inclusive.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (count - 1) as f64;
    let mut v: Vec<f64> = (0..count).map(|i| lo + i as f64 * step).collect();
    v[count - 1] = hi;
    v
}
