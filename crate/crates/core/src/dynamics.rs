//! Model assembly and forward integration.
//!
//! A [`ParamModel`] bundles an ODE right-hand side `F(y, u)` with the two
//! transposed Jacobian products the adjoint sweep needs:
//! `(∂F/∂y)ᵀ·c` and `(∂F/∂u)ᵀ·c`. Two concrete systems implement it:
//!
//! * [`TrafficModel`] — first-order follow-the-leader dynamics on a lane. The
//!   state is the vector of positions ordered so that index `i + 1` leads
//!   index `i`; every follower moves with the law's speed for its front gap
//!   and the leader moves at the free-flow speed `v0` (always the first
//!   calibration parameter).
//! * [`CrowdModel`] — second-order planar dynamics. The state stacks all
//!   positions before all velocities; accelerations sum a relaxation term
//!   toward each agent's destination, averaged pairwise interaction forces,
//!   and averaged wall forces. The interaction/wall laws are either the
//!   social-force model (calibrating `[A, k, κ]`) or a pair of small
//!   networks (calibrating their stacked weights).
//!
//! [`euler_integrate`] advances any right-hand side with the explicit Euler
//! scheme and records the full trajectory.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::forces::{
    self, ClampCounter, LwrParams, LwrVariant, PairKinematics, SocialFixed, SocialForceParams,
    WallGeometry, MIN_SEPARATION,
};
use crate::nn::{self, NetSpec};
use crate::vec2::{self, Vec2};

/// Step size and step count of one forward integration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    /// Step size (s).
    pub dt: f64,
    /// Number of Euler steps; the trajectory has `steps + 1` states.
    pub steps: usize,
}

impl SimConfig {
    pub fn new(dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "step size must be positive and finite, got {dt}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("step count must be at least 1".into()));
        }
        Ok(SimConfig { dt, steps })
    }
}

/// A time-uniform trajectory of flattened states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t0: f64,
    dt: f64,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Builds a trajectory from equally spaced states (at least one, all the
    /// same dimension).
    pub fn new(t0: f64, dt: f64, states: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "trajectory grid must be finite with positive spacing, got t0 = {t0}, dt = {dt}"
            )));
        }
        let Some(first) = states.first() else {
            return Err(Error::InvalidArgument("a trajectory needs at least one state".into()));
        };
        let dim = first.len();
        if dim == 0 || states.iter().any(|s| s.len() != dim) {
            return Err(Error::InvalidArgument(
                "all trajectory states must share one nonzero dimension".into(),
            ));
        }
        Ok(Trajectory { t0, dt, states })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of integration steps (states minus one).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n]
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 * self.dt
    }
}

/// Event counters persisting across right-hand-side evaluations. Shared
/// between model instances of one run via `Arc`.
#[derive(Debug, Default)]
pub struct Diagnostics {
    /// Near-collision gap clamps in the optimal-velocity law.
    pub lwr_clamps: ClampCounter,
    /// Right-hand-side evaluations that saw a non-positive front gap.
    overtakes: AtomicU64,
}

impl Diagnostics {
    pub fn overtakes(&self) -> u64 {
        self.overtakes.load(Ordering::Relaxed)
    }
}

/// An ODE system `dy/dt = F(y, u)` with the transposed Jacobian products
/// required by the discrete adjoint.
pub trait ParamModel: Sync {
    /// Dimension of the flattened state vector.
    fn state_dim(&self) -> usize;

    /// Number of calibration parameters `u`.
    fn param_len(&self) -> usize;

    fn n_agents(&self) -> usize;

    /// Leading rows of the state that are positions; only these enter the
    /// tracking cost.
    fn position_dim(&self) -> usize;

    /// Evaluates `F(y, u)` into `dy`.
    fn rhs(&self, y: &[f64], u: &[f64], dy: &mut [f64]) -> Result<()>;

    /// Evaluates `(∂F/∂y)ᵀ · cot` into `out` (overwritten).
    fn vjp_state(&self, y: &[f64], u: &[f64], cot: &[f64], out: &mut [f64]) -> Result<()>;

    /// Evaluates `(∂F/∂u)ᵀ · cot` into `out` (overwritten).
    fn vjp_params(&self, y: &[f64], u: &[f64], cot: &[f64], out: &mut [f64]) -> Result<()>;
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Traffic
// ---------------------------------------------------------------------------

/// Speed law applied to each follower's front gap.
#[derive(Debug, Clone)]
pub enum TrafficLaw {
    /// Optimal-velocity law; parameters `u = [v0, L]`.
    Lwr(LwrVariant),
    /// Learned law `gap ↦ speed`; parameters `u = [v0, weights…]`.
    Net(NetSpec),
}

/// Follow-the-leader dynamics for `n` vehicles on one lane.
#[derive(Debug, Clone)]
pub struct TrafficModel {
    law: TrafficLaw,
    n_agents: usize,
    diagnostics: Arc<Diagnostics>,
}

impl TrafficModel {
    pub fn new(law: TrafficLaw, n_agents: usize, diagnostics: Arc<Diagnostics>) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::InvalidArgument("traffic needs at least one vehicle".into()));
        }
        if let TrafficLaw::Net(spec) = &law {
            if spec.input_dim() != 1 || spec.output_dim() != 1 {
                return Err(Error::InvalidArgument(format!(
                    "a traffic speed law maps one gap to one speed, got {:?} → {:?}",
                    spec.input_dim(),
                    spec.output_dim()
                )));
            }
        }
        Ok(TrafficModel {
            law,
            n_agents,
            diagnostics,
        })
    }

    fn lwr_params<'u>(&self, u: &'u [f64], variant: LwrVariant) -> LwrParams {
        LwrParams {
            v0: u[0],
            l: u[1],
            variant,
        }
    }
}

impl ParamModel for TrafficModel {
    fn state_dim(&self) -> usize {
        self.n_agents
    }

    fn param_len(&self) -> usize {
        match &self.law {
            TrafficLaw::Lwr(_) => 2,
            TrafficLaw::Net(spec) => 1 + spec.param_len(),
        }
    }

    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn position_dim(&self) -> usize {
        self.n_agents
    }

    fn rhs(&self, y: &[f64], u: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.n_agents;
        check_dim("traffic state", n, y.len())?;
        check_dim("traffic params", self.param_len(), u.len())?;
        check_dim("traffic rhs buffer", n, dy.len())?;
        for i in 0..n - 1 {
            let gap = y[i + 1] - y[i];
            if gap <= 0.0 {
                self.diagnostics.overtakes.fetch_add(1, Ordering::Relaxed);
            }
            dy[i] = match &self.law {
                TrafficLaw::Lwr(variant) => forces::lwr_velocity(
                    gap,
                    &self.lwr_params(u, *variant),
                    &self.diagnostics.lwr_clamps,
                ),
                TrafficLaw::Net(spec) => nn::forward(spec, &u[1..], &[gap])?[0],
            };
        }
        dy[n - 1] = u[0];
        Ok(())
    }

    fn vjp_state(&self, y: &[f64], u: &[f64], cot: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n_agents;
        check_dim("traffic state", n, y.len())?;
        check_dim("traffic cotangent", n, cot.len())?;
        check_dim("traffic vjp buffer", n, out.len())?;
        out.fill(0.0);
        // F_i = W(y_{i+1} − y_i) for followers; the leader row is constant in y.
        for i in 0..n - 1 {
            let gap = y[i + 1] - y[i];
            let slope = match &self.law {
                TrafficLaw::Lwr(variant) => {
                    forces::lwr_derivatives(
                        gap,
                        &self.lwr_params(u, *variant),
                        &self.diagnostics.lwr_clamps,
                    )
                    .d_gap
                }
                TrafficLaw::Net(spec) => {
                    let w = &u[1..];
                    let trace = nn::forward_trace(spec, w, &[gap])?;
                    nn::jac_input(spec, w, &trace)?[0]
                }
            };
            out[i] -= slope * cot[i];
            out[i + 1] += slope * cot[i];
        }
        Ok(())
    }

    fn vjp_params(&self, y: &[f64], u: &[f64], cot: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.n_agents;
        check_dim("traffic state", n, y.len())?;
        check_dim("traffic cotangent", n, cot.len())?;
        check_dim("traffic vjp buffer", self.param_len(), out.len())?;
        out.fill(0.0);
        // The leader row dx_n/dt = v0.
        out[0] += cot[n - 1];
        for i in 0..n - 1 {
            let gap = y[i + 1] - y[i];
            match &self.law {
                TrafficLaw::Lwr(variant) => {
                    let slopes = forces::lwr_derivatives(
                        gap,
                        &self.lwr_params(u, *variant),
                        &self.diagnostics.lwr_clamps,
                    );
                    out[0] += slopes.d_v0 * cot[i];
                    out[1] += slopes.d_l * cot[i];
                }
                TrafficLaw::Net(spec) => {
                    let w = &u[1..];
                    let trace = nn::forward_trace(spec, w, &[gap])?;
                    let g = nn::grad_params_transposed(spec, w, &trace, &[cot[i]])?;
                    for (o, gi) in out[1..].iter_mut().zip(&g) {
                        *o += gi;
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Crowd
// ---------------------------------------------------------------------------

/// Interaction/wall law of the crowd dynamics.
#[derive(Debug, Clone)]
pub enum CrowdLaw {
    /// Social-force model; parameters `u = [A, k, κ]`, everything else fixed.
    Social(SocialFixed),
    /// Learned pair and wall forces, each mapping the 4-vector
    /// `[Δposition, Δvelocity]` to a planar force; parameters
    /// `u = [interaction weights… , wall weights…]`.
    Net { interaction: NetSpec, wall: NetSpec },
}

/// Second-order planar dynamics for `n` pedestrians. State layout:
/// positions `x_1 … x_n` then velocities `v_1 … v_n`, two entries each.
#[derive(Debug, Clone)]
pub struct CrowdModel {
    law: CrowdLaw,
    walls: Arc<WallGeometry>,
    destinations: Vec<Vec2>,
    /// Relaxation time (s).
    tau: f64,
    /// Agent mass (kg) entering the interaction normalizations.
    mass: f64,
}

impl CrowdModel {
    /// Social-force dynamics; relaxation time and mass come from the fixed
    /// constants.
    pub fn social(
        fixed: SocialFixed,
        walls: Arc<WallGeometry>,
        destinations: Vec<Vec2>,
    ) -> Result<Self> {
        let (tau, mass) = (fixed.tau, fixed.mass);
        Self::validate(CrowdModel {
            law: CrowdLaw::Social(fixed),
            walls,
            destinations,
            tau,
            mass,
        })
    }

    /// Network dynamics with explicit relaxation time and mass.
    pub fn net(
        interaction: NetSpec,
        wall: NetSpec,
        walls: Arc<WallGeometry>,
        destinations: Vec<Vec2>,
        tau: f64,
        mass: f64,
    ) -> Result<Self> {
        for (name, spec) in [("interaction", &interaction), ("wall", &wall)] {
            if spec.input_dim() != 4 || spec.output_dim() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "the {name} force net must map 4 inputs to 2 outputs, got {:?}",
                    spec.layer_sizes()
                )));
            }
        }
        Self::validate(CrowdModel {
            law: CrowdLaw::Net { interaction, wall },
            walls,
            destinations,
            tau,
            mass,
        })
    }

    fn validate(model: CrowdModel) -> Result<Self> {
        if model.destinations.is_empty() {
            return Err(Error::InvalidArgument("crowd needs at least one pedestrian".into()));
        }
        if !(model.tau > 0.0) || !(model.mass > 0.0) {
            return Err(Error::InvalidArgument(
                "relaxation time and mass must be positive".into(),
            ));
        }
        Ok(model)
    }

    fn social_params(&self, u: &[f64], fixed: &SocialFixed) -> SocialForceParams {
        SocialForceParams {
            a: u[0],
            k: u[1],
            kappa: u[2],
            fixed: *fixed,
        }
    }

    fn agent(y: &[f64], n: usize, i: usize) -> (Vec2, Vec2) {
        (
            [y[2 * i], y[2 * i + 1]],
            [y[2 * n + 2 * i], y[2 * n + 2 * i + 1]],
        )
    }

    fn check_separation(&self, xi: Vec2, xj: Vec2, i: usize, j: usize) -> Result<()> {
        if vec2::norm(vec2::sub(xi, xj)) < MIN_SEPARATION {
            return Err(Error::Degenerate(format!(
                "pedestrians {i} and {j} coincide; interaction direction undefined"
            )));
        }
        Ok(())
    }

    fn check_wall_separation(&self, xi: Vec2, w: Vec2, i: usize, k: usize) -> Result<()> {
        if vec2::norm(vec2::sub(xi, w)) < MIN_SEPARATION {
            return Err(Error::Degenerate(format!(
                "pedestrian {i} sits on wall sample {k}; interaction direction undefined"
            )));
        }
        Ok(())
    }
}

impl ParamModel for CrowdModel {
    fn state_dim(&self) -> usize {
        4 * self.destinations.len()
    }

    fn param_len(&self) -> usize {
        match &self.law {
            CrowdLaw::Social(_) => 3,
            CrowdLaw::Net { interaction, wall } => interaction.param_len() + wall.param_len(),
        }
    }

    fn n_agents(&self) -> usize {
        self.destinations.len()
    }

    fn position_dim(&self) -> usize {
        2 * self.destinations.len()
    }

    fn rhs(&self, y: &[f64], u: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.destinations.len();
        check_dim("crowd state", 4 * n, y.len())?;
        check_dim("crowd params", self.param_len(), u.len())?;
        check_dim("crowd rhs buffer", 4 * n, dy.len())?;

        // dx/dt = v
        dy[..2 * n].copy_from_slice(&y[2 * n..]);

        let pair_scale = 1.0 / (n as f64 * self.mass);
        let wall_scale = if self.walls.is_empty() {
            0.0
        } else {
            1.0 / (self.walls.len() as f64 * self.mass)
        };

        for i in 0..n {
            let (xi, vi) = Self::agent(y, n, i);
            let mut acc = forces::relaxation_force(xi, vi, self.destinations[i], self.tau);

            match &self.law {
                CrowdLaw::Social(fixed) => {
                    let params = self.social_params(u, fixed);
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let (xj, vj) = Self::agent(y, n, j);
                        self.check_separation(xi, xj, i, j)?;
                        let f = forces::social_pair_force(
                            &PairKinematics::of(xi, vi, xj, vj),
                            &params,
                        )?;
                        acc = vec2::add(acc, vec2::scale(pair_scale, f));
                    }
                    for (k, wall) in self.walls.samples().iter().enumerate() {
                        self.check_wall_separation(xi, wall.point, i, k)?;
                        let f = forces::social_wall_force(xi, vi, wall, &params)?;
                        acc = vec2::add(acc, vec2::scale(wall_scale, f));
                    }
                }
                CrowdLaw::Net { interaction, wall } => {
                    let (wi, ww) = u.split_at(interaction.param_len());
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let (xj, vj) = Self::agent(y, n, j);
                        let input = [xi[0] - xj[0], xi[1] - xj[1], vi[0] - vj[0], vi[1] - vj[1]];
                        let f = nn::forward(interaction, wi, &input)?;
                        acc = vec2::add(acc, vec2::scale(pair_scale, [f[0], f[1]]));
                    }
                    for sample in self.walls.samples() {
                        let input = [
                            xi[0] - sample.point[0],
                            xi[1] - sample.point[1],
                            vi[0],
                            vi[1],
                        ];
                        let f = nn::forward(wall, ww, &input)?;
                        acc = vec2::add(acc, vec2::scale(wall_scale, [f[0], f[1]]));
                    }
                }
            }

            dy[2 * n + 2 * i] = acc[0];
            dy[2 * n + 2 * i + 1] = acc[1];
        }
        Ok(())
    }

    fn vjp_state(&self, y: &[f64], u: &[f64], cot: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.destinations.len();
        check_dim("crowd state", 4 * n, y.len())?;
        check_dim("crowd cotangent", 4 * n, cot.len())?;
        check_dim("crowd vjp buffer", 4 * n, out.len())?;
        out.fill(0.0);

        // Position rows F_x = v contribute cotangent directly to velocities.
        for a in 0..2 * n {
            out[2 * n + a] += cot[a];
        }

        let pair_scale = 1.0 / (n as f64 * self.mass);
        let wall_scale = if self.walls.is_empty() {
            0.0
        } else {
            1.0 / (self.walls.len() as f64 * self.mass)
        };

        // Accumulates cᵀ·M·scale into the x (dx=true) or v rows of agent `who`.
        let add = |out: &mut [f64], who: usize, into_x: bool, m: &[[f64; 2]; 2], c: Vec2, scale: f64| {
            let base = if into_x { 2 * who } else { 2 * n + 2 * who };
            for col in 0..2 {
                out[base + col] += scale * (c[0] * m[0][col] + c[1] * m[1][col]);
            }
        };

        for i in 0..n {
            let (xi, vi) = Self::agent(y, n, i);
            let ci: Vec2 = [cot[2 * n + 2 * i], cot[2 * n + 2 * i + 1]];
            if ci == [0.0, 0.0] {
                continue;
            }

            let relax = forces::relaxation_derivatives(xi, vi, self.destinations[i], self.tau);
            add(out, i, true, &relax.d_x, ci, 1.0);
            add(out, i, false, &relax.d_v, ci, 1.0);

            match &self.law {
                CrowdLaw::Social(fixed) => {
                    let params = self.social_params(u, fixed);
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let (xj, vj) = Self::agent(y, n, j);
                        self.check_separation(xi, xj, i, j)?;
                        let d = forces::social_force_derivatives(
                            &PairKinematics::of(xi, vi, xj, vj),
                            &params,
                        )?;
                        // F depends on x_i − x_j and v_i − v_j: equal and
                        // opposite pulls on the two agents.
                        add(out, i, true, &d.d_dx, ci, pair_scale);
                        add(out, j, true, &d.d_dx, ci, -pair_scale);
                        add(out, i, false, &d.d_dv, ci, pair_scale);
                        add(out, j, false, &d.d_dv, ci, -pair_scale);
                    }
                    for (k, wall) in self.walls.samples().iter().enumerate() {
                        self.check_wall_separation(xi, wall.point, i, k)?;
                        let d = forces::wall_force_derivatives(xi, vi, wall, &params)?;
                        add(out, i, true, &d.d_x, ci, wall_scale);
                        add(out, i, false, &d.d_v, ci, wall_scale);
                    }
                }
                CrowdLaw::Net { interaction, wall } => {
                    let (weights_int, weights_wall) = u.split_at(interaction.param_len());
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let (xj, vj) = Self::agent(y, n, j);
                        let input = [xi[0] - xj[0], xi[1] - xj[1], vi[0] - vj[0], vi[1] - vj[1]];
                        let trace = nn::forward_trace(interaction, weights_int, &input)?;
                        let jac = nn::jac_input(interaction, weights_int, &trace)?;
                        // jac is 2×4: columns 0..2 are ∂/∂Δx, 2..4 are ∂/∂Δv.
                        let d_dx = [[jac[0], jac[1]], [jac[4], jac[5]]];
                        let d_dv = [[jac[2], jac[3]], [jac[6], jac[7]]];
                        add(out, i, true, &d_dx, ci, pair_scale);
                        add(out, j, true, &d_dx, ci, -pair_scale);
                        add(out, i, false, &d_dv, ci, pair_scale);
                        add(out, j, false, &d_dv, ci, -pair_scale);
                    }
                    for sample in self.walls.samples() {
                        let input = [
                            xi[0] - sample.point[0],
                            xi[1] - sample.point[1],
                            vi[0],
                            vi[1],
                        ];
                        let trace = nn::forward_trace(wall, weights_wall, &input)?;
                        let jac = nn::jac_input(wall, weights_wall, &trace)?;
                        let d_x = [[jac[0], jac[1]], [jac[4], jac[5]]];
                        let d_v = [[jac[2], jac[3]], [jac[6], jac[7]]];
                        add(out, i, true, &d_x, ci, wall_scale);
                        add(out, i, false, &d_v, ci, wall_scale);
                    }
                }
            }
        }
        Ok(())
    }

    fn vjp_params(&self, y: &[f64], u: &[f64], cot: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.destinations.len();
        check_dim("crowd state", 4 * n, y.len())?;
        check_dim("crowd cotangent", 4 * n, cot.len())?;
        check_dim("crowd vjp buffer", self.param_len(), out.len())?;
        out.fill(0.0);

        let pair_scale = 1.0 / (n as f64 * self.mass);
        let wall_scale = if self.walls.is_empty() {
            0.0
        } else {
            1.0 / (self.walls.len() as f64 * self.mass)
        };

        for i in 0..n {
            let (xi, vi) = Self::agent(y, n, i);
            let ci: Vec2 = [cot[2 * n + 2 * i], cot[2 * n + 2 * i + 1]];
            if ci == [0.0, 0.0] {
                continue;
            }

            match &self.law {
                CrowdLaw::Social(fixed) => {
                    let params = self.social_params(u, fixed);
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let (xj, vj) = Self::agent(y, n, j);
                        self.check_separation(xi, xj, i, j)?;
                        let d = forces::social_force_derivatives(
                            &PairKinematics::of(xi, vi, xj, vj),
                            &params,
                        )?;
                        out[0] += pair_scale * vec2::dot(ci, d.d_a);
                        out[1] += pair_scale * vec2::dot(ci, d.d_k);
                        out[2] += pair_scale * vec2::dot(ci, d.d_kappa);
                    }
                    for (k, wall) in self.walls.samples().iter().enumerate() {
                        self.check_wall_separation(xi, wall.point, i, k)?;
                        let d = forces::wall_force_derivatives(xi, vi, wall, &params)?;
                        out[0] += wall_scale * vec2::dot(ci, d.d_a);
                        out[1] += wall_scale * vec2::dot(ci, d.d_k);
                        out[2] += wall_scale * vec2::dot(ci, d.d_kappa);
                    }
                }
                CrowdLaw::Net { interaction, wall } => {
                    let split = interaction.param_len();
                    let (weights_int, weights_wall) = u.split_at(split);
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let (xj, vj) = Self::agent(y, n, j);
                        let input = [xi[0] - xj[0], xi[1] - xj[1], vi[0] - vj[0], vi[1] - vj[1]];
                        let trace = nn::forward_trace(interaction, weights_int, &input)?;
                        let g = nn::grad_params_transposed(interaction, weights_int, &trace, &ci)?;
                        for (o, gi) in out[..split].iter_mut().zip(&g) {
                            *o += pair_scale * gi;
                        }
                    }
                    for sample in self.walls.samples() {
                        let input = [
                            xi[0] - sample.point[0],
                            xi[1] - sample.point[1],
                            vi[0],
                            vi[1],
                        ];
                        let trace = nn::forward_trace(wall, weights_wall, &input)?;
                        let g = nn::grad_params_transposed(wall, weights_wall, &trace, &ci)?;
                        for (o, gi) in out[split..].iter_mut().zip(&g) {
                            *o += wall_scale * gi;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Model families
// ---------------------------------------------------------------------------

/// A calibratable model family: everything fixed across sequences. Concrete
/// [`ParamModel`]s are instantiated per sequence (agent count and, for crowd
/// models, destinations vary).
#[derive(Debug, Clone)]
pub enum ModelFamily {
    TrafficLwr {
        variant: LwrVariant,
        diagnostics: Arc<Diagnostics>,
    },
    TrafficNet {
        spec: NetSpec,
        diagnostics: Arc<Diagnostics>,
    },
    CrowdSocial {
        fixed: SocialFixed,
        walls: Arc<WallGeometry>,
    },
    CrowdNet {
        interaction: NetSpec,
        wall: NetSpec,
        walls: Arc<WallGeometry>,
        tau: f64,
        mass: f64,
    },
}

/// A per-sequence model, dispatching [`ParamModel`] to the concrete system.
#[derive(Debug, Clone)]
pub enum ModelInstance {
    Traffic(TrafficModel),
    Crowd(CrowdModel),
}

impl ModelFamily {
    pub fn is_crowd(&self) -> bool {
        matches!(self, ModelFamily::CrowdSocial { .. } | ModelFamily::CrowdNet { .. })
    }

    /// Number of calibration parameters (independent of the agent count).
    pub fn param_len(&self) -> usize {
        match self {
            ModelFamily::TrafficLwr { .. } => 2,
            ModelFamily::TrafficNet { spec, .. } => 1 + spec.param_len(),
            ModelFamily::CrowdSocial { .. } => 3,
            ModelFamily::CrowdNet { interaction, wall, .. } => {
                interaction.param_len() + wall.param_len()
            }
        }
    }

    /// Builds the per-sequence model. Traffic families need the vehicle
    /// count; crowd families need one destination per pedestrian.
    pub fn instance(
        &self,
        n_agents: usize,
        destinations: Option<&[Vec2]>,
    ) -> Result<ModelInstance> {
        if self.is_crowd() {
            let dests = destinations.ok_or_else(|| {
                Error::InvalidArgument("crowd models need per-pedestrian destinations".into())
            })?;
            check_dim("destinations", n_agents, dests.len())?;
        }
        Ok(match self {
            ModelFamily::TrafficLwr { variant, diagnostics } => ModelInstance::Traffic(
                TrafficModel::new(TrafficLaw::Lwr(*variant), n_agents, diagnostics.clone())?,
            ),
            ModelFamily::TrafficNet { spec, diagnostics } => ModelInstance::Traffic(
                TrafficModel::new(TrafficLaw::Net(spec.clone()), n_agents, diagnostics.clone())?,
            ),
            ModelFamily::CrowdSocial { fixed, walls } => ModelInstance::Crowd(CrowdModel::social(
                *fixed,
                walls.clone(),
                destinations.unwrap().to_vec(),
            )?),
            ModelFamily::CrowdNet {
                interaction,
                wall,
                walls,
                tau,
                mass,
            } => ModelInstance::Crowd(CrowdModel::net(
                interaction.clone(),
                wall.clone(),
                walls.clone(),
                destinations.unwrap().to_vec(),
                *tau,
                *mass,
            )?),
        })
    }
}

impl ParamModel for ModelInstance {
    fn state_dim(&self) -> usize {
        match self {
            ModelInstance::Traffic(m) => m.state_dim(),
            ModelInstance::Crowd(m) => m.state_dim(),
        }
    }

    fn param_len(&self) -> usize {
        match self {
            ModelInstance::Traffic(m) => m.param_len(),
            ModelInstance::Crowd(m) => m.param_len(),
        }
    }

    fn n_agents(&self) -> usize {
        match self {
            ModelInstance::Traffic(m) => m.n_agents(),
            ModelInstance::Crowd(m) => m.n_agents(),
        }
    }

    fn position_dim(&self) -> usize {
        match self {
            ModelInstance::Traffic(m) => m.position_dim(),
            ModelInstance::Crowd(m) => m.position_dim(),
        }
    }

    fn rhs(&self, y: &[f64], u: &[f64], dy: &mut [f64]) -> Result<()> {
        match self {
            ModelInstance::Traffic(m) => m.rhs(y, u, dy),
            ModelInstance::Crowd(m) => m.rhs(y, u, dy),
        }
    }

    fn vjp_state(&self, y: &[f64], u: &[f64], cot: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            ModelInstance::Traffic(m) => m.vjp_state(y, u, cot, out),
            ModelInstance::Crowd(m) => m.vjp_state(y, u, cot, out),
        }
    }

    fn vjp_params(&self, y: &[f64], u: &[f64], cot: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            ModelInstance::Traffic(m) => m.vjp_params(y, u, cot, out),
            ModelInstance::Crowd(m) => m.vjp_params(y, u, cot, out),
        }
    }
}

// ---------------------------------------------------------------------------
// Explicit Euler integration
// ---------------------------------------------------------------------------

/// Integrates `dy/dt = rhs(y)` with the explicit Euler scheme
/// `y_{n+1} = y_n + dt·rhs(y_n)` and records all `steps + 1` states starting
/// at time `t0`. Aborts with the step index if the state leaves the
/// floating-point range.
pub fn euler_integrate<F>(
    y0: &[f64],
    t0: f64,
    cfg: SimConfig,
    mut rhs: F,
) -> Result<Trajectory>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let dim = y0.len();
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(y0.to_vec());
    let mut dy = vec![0.0; dim];
    for step in 0..cfg.steps {
        let y = states.last().unwrap();
        rhs(y, &mut dy)?;
        let next: Vec<f64> = y.iter().zip(&dy).map(|(yi, di)| yi + cfg.dt * di).collect();
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "state integration",
                step,
            });
        }
        states.push(next);
    }
    Trajectory::new(t0, cfg.dt, states)
}

/// Forward-simulates a model from `y0` under parameters `u`.
pub fn simulate(
    model: &dyn ParamModel,
    u: &[f64],
    y0: &[f64],
    t0: f64,
    cfg: SimConfig,
) -> Result<Trajectory> {
    check_dim("initial state", model.state_dim(), y0.len())?;
    check_dim("parameters", model.param_len(), u.len())?;
    euler_integrate(y0, t0, cfg, |y, dy| model.rhs(y, u, dy))
}
