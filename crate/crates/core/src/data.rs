//! Trajectory ingestion and calibration-ready sequence extraction.
//!
//! The pipeline turns raw trajectory CSV
//! (`t,agent_id,x[,y][,lane]`, one sample per row) into [`SequenceData`]
//! items a calibration run can consume:
//!
//! 1. [`load_tracks`] parses and validates per-agent tracks,
//! 2. [`interpolate_to_grid`] resamples each track onto a uniform grid whose
//!    origin is the earliest timestamp in the file,
//! 3. [`extract_traffic_sequences`] / [`extract_crowd_sequences`] cut the
//!    gridded tracks into windows where the same agents are continuously
//!    visible, and derive the initial state each model family needs.
//!
//! [`synth_traffic`] and [`synth_crowd`] run the pipeline in reverse: they
//! simulate a known model, optionally perturb the sampled positions, and
//! write the same CSV schema — which makes exact round-trip tests possible.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::io::{Read, Write as IoWrite};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{simulate, ModelFamily, SimConfig, Trajectory};
use crate::error::{Error, Result};
use crate::vec2::Vec2;

/// One agent's raw samples, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: String,
    pub times: Vec<f64>,
    /// One position per sample; inner length is the spatial dimension.
    pub positions: Vec<Vec<f64>>,
}

/// All tracks of one file, plus ingestion statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    /// Spatial dimension: 1 (traffic) or 2 (crowd).
    pub dim: usize,
    /// Tracks sorted by agent id.
    pub tracks: Vec<Track>,
    /// Records dropped because a coordinate or timestamp was not finite.
    pub dropped_non_finite: usize,
}

/// Parses trajectory CSV. The header must name `t`, `agent_id` and `x`, may
/// add `y` (planar data) and `lane`, and nothing else. Records with
/// non-finite numbers are dropped (and counted); out-of-order timestamps and
/// malformed fields are hard errors carrying the line number. With
/// `lane = Some(l)`, only rows of that lane are kept.
pub fn load_tracks<R: Read>(reader: R, lane: Option<i64>) -> Result<TrackSet> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = csv_reader.headers()?.clone();
    let mut col_t = None;
    let mut col_id = None;
    let mut col_x = None;
    let mut col_y = None;
    let mut col_lane = None;
    for (idx, name) in headers.iter().enumerate() {
        let slot = match name {
            "t" => &mut col_t,
            "agent_id" => &mut col_id,
            "x" => &mut col_x,
            "y" => &mut col_y,
            "lane" => &mut col_lane,
            other => {
                return Err(Error::MalformedRecord {
                    line: 1,
                    message: format!(
                        "unknown column {other:?}; expected t,agent_id,x[,y][,lane]"
                    ),
                })
            }
        };
        if slot.replace(idx).is_some() {
            return Err(Error::MalformedRecord {
                line: 1,
                message: format!("column {name:?} appears twice"),
            });
        }
    }
    let (Some(col_t), Some(col_id), Some(col_x)) = (col_t, col_id, col_x) else {
        return Err(Error::MalformedRecord {
            line: 1,
            message: "header must name t, agent_id and x".into(),
        });
    };
    if lane.is_some() && col_lane.is_none() {
        return Err(Error::InvalidArgument(
            "a lane filter was given but the file has no lane column".into(),
        ));
    }
    let dim = if col_y.is_some() { 2 } else { 1 };

    struct Builder {
        track: Track,
        last_line: u64,
    }
    let mut builders: BTreeMap<String, Builder> = BTreeMap::new();
    let mut dropped = 0usize;

    for record in csv_reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize, name: &str| -> Result<&str> {
            record.get(idx).ok_or_else(|| Error::MalformedRecord {
                line,
                message: format!("missing {name} field"),
            })
        };
        let number = |idx: usize, name: &str| -> Result<f64> {
            let raw = field(idx, name)?;
            raw.parse::<f64>().map_err(|_| Error::MalformedRecord {
                line,
                message: format!("{name} is not a number: {raw:?}"),
            })
        };

        if let (Some(col_lane), Some(wanted)) = (col_lane, lane) {
            let raw = field(col_lane, "lane")?;
            let value: i64 = raw.parse().map_err(|_| Error::MalformedRecord {
                line,
                message: format!("lane is not an integer: {raw:?}"),
            })?;
            if value != wanted {
                continue;
            }
        }

        let t = number(col_t, "t")?;
        let id = field(col_id, "agent_id")?;
        if id.is_empty() {
            return Err(Error::MalformedRecord {
                line,
                message: "agent_id is empty".into(),
            });
        }
        let mut position = Vec::with_capacity(dim);
        position.push(number(col_x, "x")?);
        if let Some(col_y) = col_y {
            position.push(number(col_y, "y")?);
        }

        if !t.is_finite() || position.iter().any(|p| !p.is_finite()) {
            dropped += 1;
            continue;
        }

        match builders.entry(id.to_string()) {
            Entry::Vacant(slot) => {
                slot.insert(Builder {
                    track: Track {
                        id: id.to_string(),
                        times: vec![t],
                        positions: vec![position],
                    },
                    last_line: line,
                });
            }
            Entry::Occupied(mut slot) => {
                let b = slot.get_mut();
                let last = *b.track.times.last().unwrap();
                if t <= last {
                    return Err(Error::OutOfOrder {
                        agent: id.to_string(),
                        line,
                    });
                }
                b.track.times.push(t);
                b.track.positions.push(position);
                b.last_line = line;
            }
        }
    }

    let tracks: Vec<Track> = builders.into_values().map(|b| b.track).collect();
    if tracks.is_empty() {
        return Err(Error::EmptyDataset(
            "no usable trajectory samples after filtering".into(),
        ));
    }
    Ok(TrackSet {
        dim,
        tracks,
        dropped_non_finite: dropped,
    })
}

/// Convenience wrapper opening a file path.
pub fn load_tracks_path(path: impl AsRef<Path>, lane: Option<i64>) -> Result<TrackSet> {
    load_tracks(std::fs::File::open(path)?, lane)
}

/// One track resampled onto the uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedTrack {
    pub id: String,
    /// First grid node this track covers.
    pub first_node: usize,
    /// One position per covered node, starting at `first_node`.
    pub values: Vec<Vec<f64>>,
}

impl GriddedTrack {
    pub fn last_node(&self) -> usize {
        self.first_node + self.values.len() - 1
    }

    fn at(&self, node: usize) -> &[f64] {
        &self.values[node - self.first_node]
    }
}

/// All tracks on one uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedTracks {
    pub dim: usize,
    /// Absolute time of node 0: the earliest timestamp in the file.
    pub origin: f64,
    pub dt: f64,
    pub tracks: Vec<GriddedTrack>,
}

impl GriddedTracks {
    pub fn node_time(&self, node: usize) -> f64 {
        self.origin + node as f64 * self.dt
    }
}

/// Fraction of a step two timestamps may differ by and still count as the
/// same grid node.
const NODE_SNAP: f64 = 1e-6;

/// Linearly interpolates every track onto the grid `origin + n·dt`, where
/// the origin is the earliest timestamp of the set. A track covers exactly
/// the nodes inside its sampled time span; tracks covering no node are
/// dropped.
pub fn interpolate_to_grid(set: &TrackSet, dt: f64) -> Result<GriddedTracks> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "grid step must be positive and finite, got {dt}"
        )));
    }
    let origin = set
        .tracks
        .iter()
        .filter_map(|t| t.times.first())
        .fold(f64::INFINITY, |a, b| a.min(*b));
    if !origin.is_finite() {
        return Err(Error::EmptyDataset("no samples to grid".into()));
    }

    let mut tracks = Vec::new();
    for track in &set.tracks {
        let first = *track.times.first().unwrap();
        let last = *track.times.last().unwrap();
        let lo = ((first - origin) / dt - NODE_SNAP).ceil().max(0.0) as usize;
        let hi_f = (last - origin) / dt + NODE_SNAP;
        if hi_f < lo as f64 {
            continue;
        }
        let hi = hi_f.floor() as usize;
        if hi < lo {
            continue;
        }

        let mut values = Vec::with_capacity(hi - lo + 1);
        let mut cursor = 0usize;
        for node in lo..=hi {
            let t = origin + node as f64 * dt;
            // Advance to the sample segment containing t.
            while cursor + 1 < track.times.len() && track.times[cursor + 1] < t - NODE_SNAP * dt {
                cursor += 1;
            }
            let t0 = track.times[cursor];
            let snap = NODE_SNAP * dt;
            let value = if (t - t0).abs() <= snap {
                track.positions[cursor].clone()
            } else if cursor + 1 < track.times.len() {
                let t1 = track.times[cursor + 1];
                if (t - t1).abs() <= snap {
                    track.positions[cursor + 1].clone()
                } else {
                    let w = (t - t0) / (t1 - t0);
                    track.positions[cursor]
                        .iter()
                        .zip(&track.positions[cursor + 1])
                        .map(|(a, b)| a + w * (b - a))
                        .collect()
                }
            } else {
                // Only reachable through the snap tolerance at the very end.
                track.positions[cursor].clone()
            };
            values.push(value);
        }
        tracks.push(GriddedTrack {
            id: track.id.clone(),
            first_node: lo,
            values,
        });
    }
    if tracks.is_empty() {
        return Err(Error::EmptyDataset(
            "no track covers a single grid node".into(),
        ));
    }
    Ok(GriddedTracks {
        dim: set.dim,
        origin,
        dt,
        tracks,
    })
}

/// One calibration-ready window: the reference positions on the data grid,
/// the initial model state, and (for crowd models) per-agent destinations.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceData {
    /// Agent ids in state order.
    pub agent_ids: Vec<String>,
    /// Position rows per agent: 1 for traffic, 2 for crowd.
    pub agent_dim: usize,
    /// Initial state for the forward simulation (positions, and for crowd
    /// models finite-difference velocities appended).
    pub y0: Vec<f64>,
    /// Reference positions on the data grid.
    pub reference: Trajectory,
    /// Crowd destinations: each agent's position at the window end.
    pub destinations: Option<Vec<Vec2>>,
    /// Whether positions were mirrored to make travel direction positive.
    pub mirrored: bool,
}

impl SequenceData {
    pub fn n_agents(&self) -> usize {
        self.agent_ids.len()
    }
}

/// Maximal node runs `[a, b]` over which exactly the same set of tracks is
/// visible; only runs with at least `min_agents` tracks and two nodes are
/// returned, together with the covering track indices.
fn constant_coverage_runs(
    grid: &GriddedTracks,
    min_agents: usize,
) -> Vec<(usize, usize, Vec<usize>)> {
    let last_node = grid.tracks.iter().map(GriddedTrack::last_node).max().unwrap_or(0);
    let coverage = |node: usize| -> Vec<usize> {
        grid.tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.first_node <= node && node <= t.last_node())
            .map(|(i, _)| i)
            .collect()
    };

    let mut runs = Vec::new();
    let mut run_start = 0usize;
    let mut current = coverage(0);
    for node in 1..=last_node + 1 {
        let next = if node <= last_node { coverage(node) } else { Vec::new() };
        if next != current {
            if current.len() >= min_agents && node - 1 > run_start {
                runs.push((run_start, node - 1, current.clone()));
            }
            run_start = node;
            current = next;
        }
    }
    runs
}

/// Cuts one-lane traffic data into calibration sequences: every maximal
/// window in which the same `≥ min_agents` vehicles are continuously visible
/// becomes one sequence. Positions are mirrored when net travel is in the
/// negative direction, and vehicles are ordered back-to-front so the leader
/// is the last state row.
pub fn extract_traffic_sequences(
    grid: &GriddedTracks,
    min_agents: usize,
) -> Result<Vec<SequenceData>> {
    if grid.dim != 1 {
        return Err(Error::InvalidArgument(format!(
            "traffic extraction needs 1-D data, got {}-D",
            grid.dim
        )));
    }
    if min_agents == 0 {
        return Err(Error::InvalidArgument("min_agents must be at least 1".into()));
    }

    let mut sequences = Vec::new();
    for (a, b, members) in constant_coverage_runs(grid, min_agents) {
        // Net displacement over all member vehicles decides the direction.
        let displacement: f64 = members
            .iter()
            .map(|&i| {
                let t = &grid.tracks[i];
                t.at(b)[0] - t.at(a)[0]
            })
            .sum();
        let mirrored = displacement < 0.0;
        let sign = if mirrored { -1.0 } else { 1.0 };

        // Back-to-front at the window start: the leader ends up last.
        let mut order = members.clone();
        order.sort_by(|&i, &j| {
            let xi = sign * grid.tracks[i].at(a)[0];
            let xj = sign * grid.tracks[j].at(a)[0];
            xi.partial_cmp(&xj).unwrap().then(grid.tracks[i].id.cmp(&grid.tracks[j].id))
        });

        let states: Vec<Vec<f64>> = (a..=b)
            .map(|node| order.iter().map(|&i| sign * grid.tracks[i].at(node)[0]).collect())
            .collect();
        let y0 = states[0].clone();
        let reference = Trajectory::new(grid.node_time(a), grid.dt, states)?;
        sequences.push(SequenceData {
            agent_ids: order.iter().map(|&i| grid.tracks[i].id.clone()).collect(),
            agent_dim: 1,
            y0,
            reference,
            destinations: None,
            mirrored,
        });
    }
    Ok(sequences)
}

/// Cuts planar crowd data into fixed-length windows (`window_steps` data
/// steps each, consecutive windows sharing their boundary node). Initial
/// velocities are finite differences on the data grid — forward at a
/// coverage-run start, central inside — and each agent's destination is its
/// position at the window end.
pub fn extract_crowd_sequences(
    grid: &GriddedTracks,
    min_agents: usize,
    window_steps: usize,
) -> Result<Vec<SequenceData>> {
    if grid.dim != 2 {
        return Err(Error::InvalidArgument(format!(
            "crowd extraction needs 2-D data, got {}-D",
            grid.dim
        )));
    }
    if min_agents == 0 || window_steps == 0 {
        return Err(Error::InvalidArgument(
            "min_agents and window_steps must be at least 1".into(),
        ));
    }

    let mut sequences = Vec::new();
    for (a, b, members) in constant_coverage_runs(grid, min_agents) {
        // Finite-difference velocity of track i at run node n.
        let velocity = |i: usize, n: usize| -> Vec2 {
            let t = &grid.tracks[i];
            let (lo, hi, span) = if n == a {
                (n, n + 1, grid.dt)
            } else if n == b {
                (n - 1, n, grid.dt)
            } else {
                (n - 1, n + 1, 2.0 * grid.dt)
            };
            let p0 = t.at(lo);
            let p1 = t.at(hi);
            [(p1[0] - p0[0]) / span, (p1[1] - p0[1]) / span]
        };

        let mut start = a;
        while start + window_steps <= b {
            let end = start + window_steps;
            let states: Vec<Vec<f64>> = (start..=end)
                .map(|node| {
                    members
                        .iter()
                        .flat_map(|&i| grid.tracks[i].at(node).iter().copied())
                        .collect()
                })
                .collect();
            let mut y0 = states[0].clone();
            for &i in &members {
                let v = velocity(i, start);
                y0.extend_from_slice(&v);
            }
            let destinations: Vec<Vec2> = members
                .iter()
                .map(|&i| {
                    let p = grid.tracks[i].at(end);
                    [p[0], p[1]]
                })
                .collect();
            let reference = Trajectory::new(grid.node_time(start), grid.dt, states)?;
            sequences.push(SequenceData {
                agent_ids: members.iter().map(|&i| grid.tracks[i].id.clone()).collect(),
                agent_dim: 2,
                y0,
                reference,
                destinations: Some(destinations),
                mirrored: false,
            });
            start = end;
        }
    }
    Ok(sequences)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Shape of one synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Agents per sequence.
    pub n_agents: usize,
    /// Independent sequences to generate.
    pub n_sequences: usize,
    /// Data grid step (s).
    pub dt: f64,
    /// Data steps per sequence.
    pub steps: usize,
    /// Euler substeps per data step used to generate the truth.
    pub substeps: usize,
    /// Standard deviation of measurement noise added to positions.
    pub noise_sigma: f64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.n_sequences == 0 || self.steps == 0 || self.substeps == 0 {
            return Err(Error::InvalidArgument(
                "agents, sequences, steps and substeps must all be at least 1".into(),
            ));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "data step must be positive and finite, got {}",
                self.dt
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise level must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    fn fine(&self) -> Result<SimConfig> {
        SimConfig::new(self.dt / self.substeps as f64, self.steps * self.substeps)
    }
}

/// Ingestion-side description of a generated dataset, written alongside it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// `"traffic"` or `"crowd"`.
    pub kind: String,
    pub seed: u64,
    pub n_agents: usize,
    pub n_sequences: usize,
    pub dt: f64,
    pub steps: usize,
    pub substeps: usize,
    pub noise_sigma: f64,
    /// CSV data rows written (excluding the header).
    pub rows: usize,
    /// Sequences re-drawn after a degenerate simulation.
    pub retries: usize,
}

impl DatasetManifest {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("manifest serialization failed: {e}")))
    }
}

/// How many fresh draws a degenerate synthetic sequence gets before the
/// generator gives up.
const SYNTH_RETRIES: usize = 20;

fn synth_noise(rng: &mut ChaCha8Rng, sigma: f64) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidArgument(format!("bad noise level: {e}")))?;
    Ok(normal.sample(rng))
}

/// Generates follow-the-leader data from a traffic family with known
/// parameters and writes it as trajectory CSV. Sequence `s` starts at time
/// `s·(steps+5)·dt` with its own vehicle ids, so extraction recovers each
/// sequence separately. Returns the manifest describing the file.
pub fn synth_traffic<W: IoWrite>(
    family: &ModelFamily,
    u: &[f64],
    cfg: &SynthConfig,
    seed: u64,
    writer: W,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if family.is_crowd() {
        return Err(Error::InvalidArgument(
            "traffic generation needs a traffic family".into(),
        ));
    }
    let mut csv_writer = csv::Writer::from_writer(writer);
    csv_writer.write_record(["t", "agent_id", "x"])?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = 0usize;
    let mut retries = 0usize;

    for s in 0..cfg.n_sequences {
        let t_block = (s * (cfg.steps + 5)) as f64 * cfg.dt;
        let mut attempt = 0usize;
        let traj = loop {
            // Vehicles spaced by jittered gaps, rear vehicle at 0.
            let mut y0 = Vec::with_capacity(cfg.n_agents);
            let mut x = 0.0;
            for i in 0..cfg.n_agents {
                if i > 0 {
                    x += rng.random_range(10.0..30.0);
                }
                y0.push(x);
            }
            let model = family.instance(cfg.n_agents, None)?;
            match simulate(&model, u, &y0, t_block, cfg.fine()?) {
                Ok(traj) => break traj,
                Err(e) if e.is_numerical() && attempt < SYNTH_RETRIES => {
                    attempt += 1;
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        };

        for n in 0..=cfg.steps {
            let state = traj.state(n * cfg.substeps);
            let t = t_block + n as f64 * cfg.dt;
            for (i, xi) in state.iter().enumerate() {
                let noisy = xi + synth_noise(&mut rng, cfg.noise_sigma)?;
                csv_writer.write_record([
                    t.to_string(),
                    format!("s{s}_v{i}"),
                    noisy.to_string(),
                ])?;
                rows += 1;
            }
        }
    }
    csv_writer.flush()?;
    Ok(DatasetManifest {
        schema_version: 1,
        kind: "traffic".into(),
        seed,
        n_agents: cfg.n_agents,
        n_sequences: cfg.n_sequences,
        dt: cfg.dt,
        steps: cfg.steps,
        substeps: cfg.substeps,
        noise_sigma: cfg.noise_sigma,
        rows,
        retries,
    })
}

/// Generates planar crowd data from a crowd family with known parameters.
/// Pedestrians start in a loose grid on the left of a `corridor_length` ×
/// `corridor_width` box walking toward the right side; destinations used for
/// generation are re-derived by the extraction step, so round trips are
/// approximate by design.
pub fn synth_crowd<W: IoWrite>(
    family: &ModelFamily,
    u: &[f64],
    cfg: &SynthConfig,
    corridor_length: f64,
    corridor_width: f64,
    seed: u64,
    writer: W,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if !family.is_crowd() {
        return Err(Error::InvalidArgument(
            "crowd generation needs a crowd family".into(),
        ));
    }
    if !(corridor_length > 0.0) || !(corridor_width > 0.0) {
        return Err(Error::InvalidArgument(
            "corridor dimensions must be positive".into(),
        ));
    }
    let mut csv_writer = csv::Writer::from_writer(writer);
    csv_writer.write_record(["t", "agent_id", "x", "y"])?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = 0usize;
    let mut retries = 0usize;
    let n = cfg.n_agents;

    for s in 0..cfg.n_sequences {
        let t_block = (s * (cfg.steps + 5)) as f64 * cfg.dt;
        let mut attempt = 0usize;
        let traj = loop {
            let mut y0 = Vec::with_capacity(4 * n);
            let mut dests = Vec::with_capacity(n);
            for _ in 0..n {
                let x = rng.random_range(0.3..(0.3 + 0.4 * corridor_length));
                let y = rng.random_range(0.2 * corridor_width..0.8 * corridor_width);
                y0.push(x);
                y0.push(y);
                dests.push([corridor_length - 0.3, y]);
            }
            for i in 0..n {
                let speed = rng.random_range(0.8..1.4);
                let dest = dests[i];
                let pos = [y0[2 * i], y0[2 * i + 1]];
                let d = crate::vec2::sub(dest, pos);
                let dist = crate::vec2::norm(d).max(1e-9);
                y0.push(speed * d[0] / dist);
                y0.push(speed * d[1] / dist);
            }
            let model = family.instance(n, Some(&dests))?;
            match simulate(&model, u, &y0, t_block, cfg.fine()?) {
                Ok(traj) => break traj,
                Err(e) if e.is_numerical() && attempt < SYNTH_RETRIES => {
                    attempt += 1;
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        };

        for node in 0..=cfg.steps {
            let state = traj.state(node * cfg.substeps);
            let t = t_block + node as f64 * cfg.dt;
            for i in 0..n {
                let x = state[2 * i] + synth_noise(&mut rng, cfg.noise_sigma)?;
                let y = state[2 * i + 1] + synth_noise(&mut rng, cfg.noise_sigma)?;
                csv_writer.write_record([
                    t.to_string(),
                    format!("s{s}_p{i}"),
                    x.to_string(),
                    y.to_string(),
                ])?;
                rows += 1;
            }
        }
    }
    csv_writer.flush()?;
    Ok(DatasetManifest {
        schema_version: 1,
        kind: "crowd".into(),
        seed,
        n_agents: cfg.n_agents,
        n_sequences: cfg.n_sequences,
        dt: cfg.dt,
        steps: cfg.steps,
        substeps: cfg.substeps,
        noise_sigma: cfg.noise_sigma,
        rows,
        retries,
    })
}
