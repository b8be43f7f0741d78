//! Closed-form force laws and their analytic derivatives.
//!
//! Two families live here:
//!
//! * the optimal-velocity traffic law, mapping the bumper gap to a following
//!   speed (`v0·ln(gap/L)` or `v0·(1 − L/gap)`), and
//! * the pedestrian social-force terms: an exponential + body-contact pairwise
//!   repulsion with tangential friction, the analogous wall repulsion, and the
//!   relaxation toward a desired walking direction.
//!
//! Every law comes with exact derivatives with respect to both its kinematic
//! inputs and its tunable constants, which the adjoint sweep consumes. The
//! ramp `h(y) = max(y, 0)` that switches the contact terms is not
//! differentiable at `y = 0`; its slope there is taken to be `0`, and the same
//! zero-subgradient convention applies to the speed norm at `v = 0` and the
//! unit direction at coincident points.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::vec2::{self, Vec2};

/// Distances below this are treated as a coinciding pair: the interaction
/// direction is undefined and evaluation fails rather than emitting garbage.
pub const MIN_SEPARATION: f64 = 1e-12;

/// Ramp function `h(y) = max(y, 0)` gating all contact terms.
#[inline]
pub fn ramp(y: f64) -> f64 {
    if y > 0.0 {
        y
    } else {
        0.0
    }
}

/// Slope of [`ramp`]; the kink at zero takes the value 0.
#[inline]
fn ramp_slope(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Optimal-velocity traffic law
// ---------------------------------------------------------------------------

/// Shape of the optimal-velocity law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LwrVariant {
    /// `W(gap) = v0 · ln(gap / L)`
    Log,
    /// `W(gap) = v0 · (1 − L / gap)`
    Linear,
}

/// Parameters of the optimal-velocity law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LwrParams {
    /// Free-flow / leader speed (m/s).
    pub v0: f64,
    /// Effective car length (m).
    pub l: f64,
    pub variant: LwrVariant,
}

/// Lower bound for the scaled gap `z = gap / L`. Gaps at or below this are
/// clamped and counted — they indicate near-collision data or bad parameters.
pub const Z_FLOOR: f64 = 1e-6;

/// Thread-safe event counter used for clamp diagnostics.
#[derive(Debug, Default)]
pub struct ClampCounter(AtomicU64);

impl ClampCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Following speed prescribed by the optimal-velocity law for a bumper gap.
///
/// Gaps with `z = gap / L ≤ Z_FLOOR` are evaluated at the floor and counted
/// in `clamps`.
pub fn lwr_velocity(gap: f64, params: &LwrParams, clamps: &ClampCounter) -> f64 {
    let mut z = gap / params.l;
    if z <= Z_FLOOR {
        z = Z_FLOOR;
        clamps.bump();
    }
    match params.variant {
        LwrVariant::Log => params.v0 * z.ln(),
        LwrVariant::Linear => params.v0 * (1.0 - 1.0 / z),
    }
}

/// Partial derivatives of [`lwr_velocity`] with respect to the gap and both
/// parameters. In the clamped region the law is constant in `gap` and `L`, so
/// those slopes are zero while `d_v0` keeps the floor value's coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LwrSlopes {
    pub d_gap: f64,
    pub d_v0: f64,
    pub d_l: f64,
}

pub fn lwr_derivatives(gap: f64, params: &LwrParams, clamps: &ClampCounter) -> LwrSlopes {
    let z = gap / params.l;
    if z <= Z_FLOOR {
        clamps.bump();
        let d_v0 = match params.variant {
            LwrVariant::Log => Z_FLOOR.ln(),
            LwrVariant::Linear => 1.0 - 1.0 / Z_FLOOR,
        };
        return LwrSlopes {
            d_gap: 0.0,
            d_v0,
            d_l: 0.0,
        };
    }
    match params.variant {
        LwrVariant::Log => LwrSlopes {
            d_gap: params.v0 / gap,
            d_v0: z.ln(),
            d_l: -params.v0 / params.l,
        },
        LwrVariant::Linear => LwrSlopes {
            d_gap: params.v0 * params.l / (gap * gap),
            d_v0: 1.0 - 1.0 / z,
            d_l: -params.v0 / gap,
        },
    }
}

// ---------------------------------------------------------------------------
// Social-force model
// ---------------------------------------------------------------------------

/// Constants of the social-force model that stay fixed during calibration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocialFixed {
    /// Pedestrian mass (kg).
    pub mass: f64,
    /// Pedestrian radius (m); bodies touch at separation `2·radius`, walls at
    /// `radius`.
    pub radius: f64,
    /// Relaxation time toward the desired velocity (s).
    pub tau: f64,
    /// Decay length of the exponential repulsion (m).
    pub scale_b: f64,
}

impl Default for SocialFixed {
    fn default() -> Self {
        SocialFixed {
            mass: 1.0,
            radius: 0.25,
            tau: 0.5,
            scale_b: 0.1,
        }
    }
}

/// Full social-force parameter set: the three calibrated strengths plus the
/// fixed constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocialForceParams {
    /// Strength of the exponential repulsion (N).
    pub a: f64,
    /// Body-contact stiffness (N/m).
    pub k: f64,
    /// Sliding-friction coefficient (N·s/m²).
    pub kappa: f64,
    pub fixed: SocialFixed,
}

/// Relative kinematics of an ordered pair: the force acts **on** agent `i`
/// and is sourced by agent `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairKinematics {
    /// `x_i − x_j` (m).
    pub dx: Vec2,
    /// `v_i − v_j` (m/s).
    pub dv: Vec2,
}

impl PairKinematics {
    pub fn of(xi: Vec2, vi: Vec2, xj: Vec2, vj: Vec2) -> Self {
        PairKinematics {
            dx: vec2::sub(xi, xj),
            dv: vec2::sub(vi, vj),
        }
    }
}

/// Geometry shared by the pair-force value and its derivatives.
struct PairFrame {
    d: f64,
    n: Vec2,
    t: Vec2,
    /// Overlap `2r − d`.
    q: f64,
    /// `e^{q/B}`.
    exp_q: f64,
    /// `h(q)`.
    h_q: f64,
    /// Tangential relative speed `(v_j − v_i)·t`.
    dvt: f64,
}

fn pair_frame(kin: &PairKinematics, params: &SocialForceParams) -> Result<PairFrame> {
    let d = vec2::norm(kin.dx);
    if d < MIN_SEPARATION {
        return Err(Error::Degenerate(format!(
            "pair separation {d:e} below {MIN_SEPARATION:e}"
        )));
    }
    let n = vec2::scale(1.0 / d, kin.dx);
    let t = vec2::perp(n);
    let q = 2.0 * params.fixed.radius - d;
    Ok(PairFrame {
        d,
        n,
        t,
        q,
        exp_q: (q / params.fixed.scale_b).exp(),
        h_q: ramp(q),
        dvt: -vec2::dot(kin.dv, t),
    })
}

/// Social force exerted on agent `i` by agent `j`:
/// `(A·e^{(2r−d)/B} + k·h(2r−d))·n + κ·h(2r−d)·Δv_t·t`,
/// where `n` points from `j` to `i`, `t = n⊥`, and `Δv_t = (v_j − v_i)·t`.
pub fn social_pair_force(kin: &PairKinematics, params: &SocialForceParams) -> Result<Vec2> {
    let f = pair_frame(kin, params)?;
    let s = params.a * f.exp_q + params.k * f.h_q;
    Ok(vec2::add(
        vec2::scale(s, f.n),
        vec2::scale(params.kappa * f.h_q * f.dvt, f.t),
    ))
}

/// Derivatives of the pair force with respect to the relative kinematics and
/// the three calibrated strengths. Rows index force components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairForceDerivs {
    pub d_dx: [[f64; 2]; 2],
    pub d_dv: [[f64; 2]; 2],
    pub d_a: Vec2,
    pub d_k: Vec2,
    pub d_kappa: Vec2,
}

pub fn social_force_derivatives(
    kin: &PairKinematics,
    params: &SocialForceParams,
) -> Result<PairForceDerivs> {
    let f = pair_frame(kin, params)?;
    let b = params.fixed.scale_b;
    let s = params.a * f.exp_q + params.k * f.h_q;
    // ∂s/∂q and the ramp switch.
    let s_q = params.a * f.exp_q / b + params.k * ramp_slope(f.q);
    let hs = ramp_slope(f.q);

    // ∂n/∂dx = (I − n nᵀ)/d; ∂t/∂dx rotates each column by 90°.
    let mut dn = [[0.0; 2]; 2];
    let mut dt = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let id = if r == c { 1.0 } else { 0.0 };
            dn[r][c] = (id - f.n[r] * f.n[c]) / f.d;
        }
    }
    for c in 0..2 {
        // column c of dt = perp(column c of dn)
        dt[0][c] = -dn[1][c];
        dt[1][c] = dn[0][c];
    }

    // Gradients (as row vectors over dx) of the scalar factors.
    // q = 2r − |dx| ⇒ ∂q/∂dx = −n.
    let dq = vec2::scale(-1.0, f.n);
    // dvt = (−dv)·t ⇒ ∂dvt/∂dx_c = Σ_r (−dv_r)·∂t_r/∂dx_c.
    let mut ddvt_dx = [0.0; 2];
    for c in 0..2 {
        ddvt_dx[c] = -(kin.dv[0] * dt[0][c] + kin.dv[1] * dt[1][c]);
    }

    let mut d_dx = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            // F = s·n + κ·h·dvt·t, all four factors depend on dx.
            d_dx[r][c] = s_q * dq[c] * f.n[r]
                + s * dn[r][c]
                + params.kappa
                    * (f.h_q * f.dvt * dt[r][c]
                        + f.t[r] * (hs * dq[c] * f.dvt + f.h_q * ddvt_dx[c]));
        }
    }

    // Only the friction term sees dv: ∂dvt/∂dv = −t.
    let mut d_dv = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            d_dv[r][c] = -params.kappa * f.h_q * f.t[r] * f.t[c];
        }
    }

    Ok(PairForceDerivs {
        d_dx,
        d_dv,
        d_a: vec2::scale(f.exp_q, f.n),
        d_k: vec2::scale(f.h_q, f.n),
        d_kappa: vec2::scale(f.h_q * f.dvt, f.t),
    })
}

// ---------------------------------------------------------------------------
// Wall forces
// ---------------------------------------------------------------------------

/// One sampled point of a wall polyline with its unit tangent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallSample {
    pub point: Vec2,
    pub tangent: Vec2,
}

/// A wall described by sampled points; forces sum over all samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WallGeometry {
    samples: Vec<WallSample>,
}

impl WallGeometry {
    /// Builds a geometry, normalizing tangents and rejecting zero ones.
    pub fn new(mut samples: Vec<WallSample>) -> Result<Self> {
        for (idx, s) in samples.iter_mut().enumerate() {
            let n = vec2::norm(s.tangent);
            if n < MIN_SEPARATION || !n.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "wall sample {idx} has a zero or non-finite tangent"
                )));
            }
            s.tangent = vec2::scale(1.0 / n, s.tangent);
        }
        Ok(WallGeometry { samples })
    }

    /// Straight corridor preset: two horizontal walls at `y = 0` and
    /// `y = width`, sampled every `spacing` meters over `x ∈ [0, length]`,
    /// tangents along `+x`.
    pub fn corridor(length: f64, width: f64, spacing: f64) -> Result<Self> {
        if !(length > 0.0 && width > 0.0 && spacing > 0.0) {
            return Err(Error::InvalidArgument(
                "corridor length, width, and spacing must be positive".into(),
            ));
        }
        let n = (length / spacing).floor() as usize + 1;
        let mut samples = Vec::with_capacity(2 * n);
        for wall_y in [0.0, width] {
            for i in 0..n {
                samples.push(WallSample {
                    point: [i as f64 * spacing, wall_y],
                    tangent: [1.0, 0.0],
                });
            }
        }
        WallGeometry::new(samples)
    }

    pub fn samples(&self) -> &[WallSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads `x,y,tangent_x,tangent_y` records.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["x", "y", "tangent_x", "tangent_y"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::MalformedRecord {
                line: 1,
                message: format!(
                    "wall geometry header must be `x,y,tangent_x,tangent_y`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut samples = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let field = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .ok_or(())
                    .and_then(|s| s.parse::<f64>().map_err(|_| ()))
                    .map_err(|_| Error::MalformedRecord {
                        line,
                        message: format!("expected four numeric fields, got `{record:?}`"),
                    })
            };
            samples.push(WallSample {
                point: [field(0)?, field(1)?],
                tangent: [field(2)?, field(3)?],
            });
        }
        WallGeometry::new(samples)
    }

    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["x", "y", "tangent_x", "tangent_y"])?;
        for s in &self.samples {
            wtr.write_record([
                s.point[0].to_string(),
                s.point[1].to_string(),
                s.tangent[0].to_string(),
                s.tangent[1].to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }
}

struct WallFrame {
    d: f64,
    n: Vec2,
    q: f64,
    exp_q: f64,
    h_q: f64,
    /// Tangential speed `v·t_w` along the wall's stored tangent.
    vt: f64,
}

fn wall_frame(
    x: Vec2,
    v: Vec2,
    wall: &WallSample,
    params: &SocialForceParams,
) -> Result<WallFrame> {
    let dxw = vec2::sub(x, wall.point);
    let d = vec2::norm(dxw);
    if d < MIN_SEPARATION {
        return Err(Error::Degenerate(format!(
            "wall separation {d:e} below {MIN_SEPARATION:e}"
        )));
    }
    let q = params.fixed.radius - d;
    Ok(WallFrame {
        d,
        n: vec2::scale(1.0 / d, dxw),
        q,
        exp_q: (q / params.fixed.scale_b).exp(),
        h_q: ramp(q),
        vt: vec2::dot(v, wall.tangent),
    })
}

/// Force exerted on a pedestrian at `x` with velocity `v` by one wall sample:
/// `(A·e^{(r−d)/B} + k·h(r−d))·n + κ·h(r−d)·(v·t_w)·t_w`,
/// with `n` pointing from the wall sample to the pedestrian and `t_w` the
/// sample's stored unit tangent.
pub fn social_wall_force(
    x: Vec2,
    v: Vec2,
    wall: &WallSample,
    params: &SocialForceParams,
) -> Result<Vec2> {
    let f = wall_frame(x, v, wall, params)?;
    let s = params.a * f.exp_q + params.k * f.h_q;
    Ok(vec2::add(
        vec2::scale(s, f.n),
        vec2::scale(params.kappa * f.h_q * f.vt, wall.tangent),
    ))
}

/// Derivatives of [`social_wall_force`] with respect to the pedestrian's
/// position and velocity and the calibrated strengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WallForceDerivs {
    pub d_x: [[f64; 2]; 2],
    pub d_v: [[f64; 2]; 2],
    pub d_a: Vec2,
    pub d_k: Vec2,
    pub d_kappa: Vec2,
}

pub fn wall_force_derivatives(
    x: Vec2,
    v: Vec2,
    wall: &WallSample,
    params: &SocialForceParams,
) -> Result<WallForceDerivs> {
    let f = wall_frame(x, v, wall, params)?;
    let b = params.fixed.scale_b;
    let s = params.a * f.exp_q + params.k * f.h_q;
    let s_q = params.a * f.exp_q / b + params.k * ramp_slope(f.q);
    let hs = ramp_slope(f.q);

    let mut d_x = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let id = if r == c { 1.0 } else { 0.0 };
            let dn_rc = (id - f.n[r] * f.n[c]) / f.d;
            // ∂q/∂x = −n; the tangent is constant.
            d_x[r][c] = -s_q * f.n[c] * f.n[r] + s * dn_rc
                - params.kappa * f.vt * hs * wall.tangent[r] * f.n[c];
        }
    }

    let mut d_v = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            d_v[r][c] = params.kappa * f.h_q * wall.tangent[r] * wall.tangent[c];
        }
    }

    Ok(WallForceDerivs {
        d_x,
        d_v,
        d_a: vec2::scale(f.exp_q, f.n),
        d_k: vec2::scale(f.h_q, f.n),
        d_kappa: vec2::scale(f.h_q * f.vt, wall.tangent),
    })
}

// ---------------------------------------------------------------------------
// Relaxation toward the desired direction
// ---------------------------------------------------------------------------

/// Relaxation acceleration `(v_des − v)/τ` with
/// `v_des = ‖v‖ · (x_D − x)/‖x_D − x‖`: the current speed redirected toward
/// the destination. Conventions: `v_des = 0` when the pedestrian stands still
/// or already sits on the destination.
pub fn relaxation_force(x: Vec2, v: Vec2, destination: Vec2, tau: f64) -> Vec2 {
    let to_dest = vec2::sub(destination, x);
    let dist = vec2::norm(to_dest);
    let speed = vec2::norm(v);
    let v_des = if dist < MIN_SEPARATION || speed == 0.0 {
        [0.0, 0.0]
    } else {
        vec2::scale(speed / dist, to_dest)
    };
    vec2::scale(1.0 / tau, vec2::sub(v_des, v))
}

/// State derivatives of [`relaxation_force`]. At the `v = 0` and `x = x_D`
/// kinks the non-smooth factors get slope zero, consistent with the ramp
/// convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxationDerivs {
    pub d_x: [[f64; 2]; 2],
    pub d_v: [[f64; 2]; 2],
}

pub fn relaxation_derivatives(x: Vec2, v: Vec2, destination: Vec2, tau: f64) -> RelaxationDerivs {
    let to_dest = vec2::sub(destination, x);
    let dist = vec2::norm(to_dest);
    let speed = vec2::norm(v);
    let inv_tau = 1.0 / tau;

    let mut d_x = [[0.0; 2]; 2];
    let mut d_v = [[0.0; 2]; 2];

    // −v/τ part.
    d_v[0][0] = -inv_tau;
    d_v[1][1] = -inv_tau;

    if dist >= MIN_SEPARATION && speed > 0.0 {
        let dir = vec2::scale(1.0 / dist, to_dest);
        let vhat = vec2::scale(1.0 / speed, v);
        for r in 0..2 {
            for c in 0..2 {
                let id = if r == c { 1.0 } else { 0.0 };
                // ∂dir/∂x = −(I − dir dirᵀ)/dist, chained with ‖v‖/τ.
                d_x[r][c] = -inv_tau * speed * (id - dir[r] * dir[c]) / dist;
                // ∂(dir·‖v‖)/∂v = dir ⊗ v̂.
                d_v[r][c] += inv_tau * dir[r] * vhat[c];
            }
        }
    }

    RelaxationDerivs { d_x, d_v }
}
