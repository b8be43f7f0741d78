//! Tracking cost and its exact discrete gradient.
//!
//! The cost compares simulated positions with reference positions on the
//! (coarser) data grid:
//!
//! ```text
//! J(u) = ½ Σ_{n=0}^{M−1} Δt_ref · ‖x(t_n) − z_n‖²
//! ```
//!
//! where `x` are the position rows of the simulated state, `z_n` the
//! reference positions, and the terminal node is excluded. The gradient of
//! `J` with respect to the model parameters is computed by a backward sweep
//! over the *fine* integration grid: with `λ_M = 0`,
//!
//! ```text
//! λ_m   = λ_{m+1} + Δt·(∂F/∂y|_m)ᵀ λ_{m+1} + Δt_ref·(z_n − x_m)  (at data nodes)
//! ∇J(u) = − Σ_{m=0}^{M·s−1} Δt·(∂F/∂u|_m)ᵀ λ_{m+1}
//! ```
//!
//! which is the exact derivative of the explicit-Euler forward map, so it
//! matches central finite differences to truncation error.

use crate::dynamics::{simulate, ParamModel, SimConfig, Trajectory};
use crate::error::{Error, Result};

/// Value of the tracking cost with its per-agent decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    /// Total cost `J`.
    pub value: f64,
    /// Contribution of each agent; sums to `value`.
    pub per_agent: Vec<f64>,
}

/// Verifies that `traj` refines `reference` — same start time, an integer
/// number of fine steps per data step, matching spans — and returns that
/// integer ratio.
fn alignment(traj: &Trajectory, reference: &Trajectory) -> Result<usize> {
    if reference.steps() == 0 {
        return Err(Error::GridMismatch(
            "reference needs at least one step".into(),
        ));
    }
    if traj.steps() % reference.steps() != 0 {
        return Err(Error::GridMismatch(format!(
            "{} fine steps do not evenly divide into {} data steps",
            traj.steps(),
            reference.steps()
        )));
    }
    let substeps = traj.steps() / reference.steps();
    let span = substeps as f64 * traj.dt();
    if (span - reference.dt()).abs() > 1e-9 * reference.dt().max(1.0) {
        return Err(Error::GridMismatch(format!(
            "{substeps} fine steps of {} s cover {span} s, not the data step of {} s",
            traj.dt(),
            reference.dt()
        )));
    }
    if (traj.t0() - reference.t0()).abs() > 1e-9 {
        return Err(Error::GridMismatch(format!(
            "trajectory starts at {} s but the reference starts at {} s",
            traj.t0(),
            reference.t0()
        )));
    }
    Ok(substeps)
}

/// Evaluates the tracking cost of a simulated trajectory against reference
/// positions on a coarser grid. `position_dim` rows of the state are compared
/// (and must equal the reference dimension); `n_agents` must divide it.
pub fn tracking_cost(
    traj: &Trajectory,
    reference: &Trajectory,
    position_dim: usize,
    n_agents: usize,
) -> Result<CostReport> {
    if traj.state_dim() < position_dim {
        return Err(Error::DimensionMismatch {
            context: "trajectory position rows",
            expected: position_dim,
            actual: traj.state_dim(),
        });
    }
    if reference.state_dim() != position_dim {
        return Err(Error::DimensionMismatch {
            context: "reference positions",
            expected: position_dim,
            actual: reference.state_dim(),
        });
    }
    if n_agents == 0 || position_dim % n_agents != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n_agents} agents cannot share {position_dim} position rows evenly"
        )));
    }
    let substeps = alignment(traj, reference)?;
    let agent_dim = position_dim / n_agents;
    let dt_ref = reference.dt();

    let mut per_agent = vec![0.0; n_agents];
    for n in 0..reference.steps() {
        let x = traj.state(n * substeps);
        let z = reference.state(n);
        for (row, (xi, zi)) in x[..position_dim].iter().zip(z).enumerate() {
            per_agent[row / agent_dim] += 0.5 * dt_ref * (xi - zi) * (xi - zi);
        }
    }
    Ok(CostReport {
        value: per_agent.iter().sum(),
        per_agent,
    })
}

/// Cost and exact gradient for one sequence: forward simulation from `y0`
/// with `substeps` Euler steps per data step, then the adjoint sweep.
pub fn cost_and_gradient(
    model: &dyn ParamModel,
    u: &[f64],
    y0: &[f64],
    reference: &Trajectory,
    substeps: usize,
) -> Result<(CostReport, Vec<f64>)> {
    let traj = refine(model, u, y0, reference, substeps)?;
    let cost = tracking_cost(&traj, reference, model.position_dim(), model.n_agents())?;

    let dim = model.state_dim();
    let position_dim = model.position_dim();
    let dt = traj.dt();
    let dt_ref = reference.dt();
    let steps = traj.steps();

    let mut lambda = vec![0.0; dim];
    let mut grad = vec![0.0; model.param_len()];
    let mut tmp_p = vec![0.0; model.param_len()];
    let mut tmp_y = vec![0.0; dim];

    for m in (0..steps).rev() {
        let y = traj.state(m);
        // Parameter pull-back through step m uses λ_{m+1}.
        model.vjp_params(y, u, &lambda, &mut tmp_p)?;
        for (g, t) in grad.iter_mut().zip(&tmp_p) {
            *g -= dt * t;
        }
        // λ_m = λ_{m+1} + Δt·(∂F/∂y)ᵀ λ_{m+1} (+ data-node source below).
        model.vjp_state(y, u, &lambda, &mut tmp_y)?;
        for (l, t) in lambda.iter_mut().zip(&tmp_y) {
            *l += dt * t;
        }
        if m % substeps == 0 {
            let n = m / substeps;
            let z = reference.state(n);
            for row in 0..position_dim {
                lambda[row] += dt_ref * (z[row] - y[row]);
            }
        }
    }
    Ok((cost, grad))
}

/// Cost of one sequence (forward simulation only).
pub fn sequence_cost(
    model: &dyn ParamModel,
    u: &[f64],
    y0: &[f64],
    reference: &Trajectory,
    substeps: usize,
) -> Result<CostReport> {
    let traj = refine(model, u, y0, reference, substeps)?;
    tracking_cost(&traj, reference, model.position_dim(), model.n_agents())
}

/// Central-difference gradient of the sequence cost; the slow oracle the
/// adjoint is checked against.
pub fn fd_gradient(
    model: &dyn ParamModel,
    u: &[f64],
    y0: &[f64],
    reference: &Trajectory,
    substeps: usize,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut grad = vec![0.0; model.param_len()];
    let mut up = u.to_vec();
    for (p, g) in grad.iter_mut().enumerate() {
        let u0 = u[p];
        up[p] = u0 + h;
        let plus = sequence_cost(model, &up, y0, reference, substeps)?.value;
        up[p] = u0 - h;
        let minus = sequence_cost(model, &up, y0, reference, substeps)?.value;
        up[p] = u0;
        *g = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Simulates the model on the fine grid implied by the reference grid and
/// the substep count.
fn refine(
    model: &dyn ParamModel,
    u: &[f64],
    y0: &[f64],
    reference: &Trajectory,
    substeps: usize,
) -> Result<Trajectory> {
    if substeps == 0 {
        return Err(Error::InvalidArgument(
            "substep count must be at least 1".into(),
        ));
    }
    let cfg = SimConfig::new(reference.dt() / substeps as f64, reference.steps() * substeps)?;
    simulate(model, u, y0, reference.t0(), cfg)
}
