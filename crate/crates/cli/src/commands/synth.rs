//! `forcefit synth` — generate trajectory data from known parameters.

use std::path::Path;

use anyhow::{bail, Context, Result};

use forcefit::data::{synth_crowd, synth_traffic, SynthConfig};

use crate::commands::ensure_out_dir;
use crate::config::RunConfig;

pub struct Args<'a> {
    pub config: &'a Path,
    pub out_dir: &'a Path,
    pub seed: Option<u64>,
}

pub fn run(args: Args<'_>) -> Result<()> {
    let config = RunConfig::load(args.config)?;
    let synth = config
        .synth
        .as_ref()
        .context("the [synth] section is required for this command")?;
    let family = config.build_family()?;
    if synth.truth.len() != family.param_len() {
        bail!(
            "[synth] truth has {} components, {} needs {}",
            synth.truth.len(),
            config.family_kind().as_str(),
            family.param_len()
        );
    }
    let cfg = SynthConfig {
        n_agents: synth.n_agents,
        n_sequences: synth.n_sequences,
        dt: synth.dt,
        steps: synth.steps,
        substeps: synth.substeps,
        noise_sigma: synth.noise_sigma,
    };
    let seed = args.seed.unwrap_or(config.calibrate.seed);

    ensure_out_dir(args.out_dir)?;
    let data_path = args.out_dir.join("synth.csv");
    let file = std::fs::File::create(&data_path)
        .with_context(|| format!("cannot create {}", data_path.display()))?;

    let manifest = if config.family_kind().is_crowd() {
        let length = synth
            .corridor_length
            .context("[synth] corridor_length is required for crowd generation")?;
        let width = synth
            .corridor_width
            .context("[synth] corridor_width is required for crowd generation")?;
        synth_crowd(&family, &synth.truth, &cfg, length, width, seed, file)?
    } else {
        if synth.corridor_length.is_some() || synth.corridor_width.is_some() {
            bail!("[synth] corridor dimensions do not apply to traffic generation");
        }
        synth_traffic(&family, &synth.truth, &cfg, seed, file)?
    };

    let manifest_path = args.out_dir.join("synth_manifest.toml");
    std::fs::write(&manifest_path, manifest.to_toml_string()?)
        .with_context(|| format!("cannot write {}", manifest_path.display()))?;

    println!(
        "generated {} rows across {} sequences of {} agents (seed {seed}, {} redraws)",
        manifest.rows, manifest.n_sequences, manifest.n_agents, manifest.retries
    );
    println!("wrote {}", data_path.display());
    println!("wrote {}", manifest_path.display());
    Ok(())
}
