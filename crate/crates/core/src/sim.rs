//! Planar kinematic obstacle course.
//!
//! The robot is a disc starting at the origin facing `+y`. Obstacles are
//! circles scattered uniformly over a walled corridor, and the task is to
//! reach the finish line `y = goal_y`. At each replanning step the planner
//! sees a fan of range readings and picks one motion primitive; primitives
//! all advance the same distance along `y`, so forward progress and elapsed
//! time are proportional and the cost is `1 - t/T = 1 - y/goal_y` at the
//! first collision.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::Categorical;
use crate::error::{Error, Result};
use crate::rng;

const MAX_GENERATION_ATTEMPTS: usize = 10_000;
const ARC_TABLE_SEGMENTS: usize = 4096;

/// Distribution over obstacle courses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub corridor_width: f64,
    pub corridor_length: f64,
    pub goal_y: f64,
    pub obstacle_count: usize,
    pub r_min: f64,
    pub r_max: f64,
    /// Obstacle centers are drawn with `y` in `[y_start, y_end]`.
    pub y_start: f64,
    pub y_end: f64,
    /// Radius around the start position kept free of obstacle surfaces.
    pub start_clearance: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            corridor_width: 8.0,
            corridor_length: 14.0,
            goal_y: 12.0,
            obstacle_count: 30,
            r_min: 0.05,
            r_max: 0.30,
            y_start: 1.5,
            y_end: 12.0,
            start_clearance: 0.5,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("environment: {m}")));
        if !(self.corridor_width > 0.0 && self.corridor_length > 0.0) {
            return bad("corridor dimensions must be positive");
        }
        if !(self.goal_y > 0.0 && self.goal_y <= self.corridor_length) {
            return bad("goal_y must lie in (0, corridor_length]");
        }
        if !(self.r_min > 0.0 && self.r_min <= self.r_max) {
            return bad("radii must satisfy 0 < r_min <= r_max");
        }
        if !(self.y_start <= self.y_end) {
            return bad("y_start must not exceed y_end");
        }
        if !(self.start_clearance >= 0.0) {
            return bad("start_clearance must be non-negative");
        }
        Ok(())
    }
}

/// Range sensor geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorParams {
    pub n_ray: usize,
    pub fov_deg: f64,
    pub max_range: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self { n_ray: 32, fov_deg: 120.0, max_range: 5.0 }
    }
}

impl SensorParams {
    pub fn fov(&self) -> f64 {
        self.fov_deg.to_radians()
    }

    /// Ray angles relative to the heading, counter-clockwise positive.
    pub fn ray_angles(&self) -> Vec<f64> {
        let fov = self.fov();
        if self.n_ray == 1 {
            return vec![0.0];
        }
        (0..self.n_ray).map(|i| -fov / 2.0 + i as f64 * fov / (self.n_ray - 1) as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ray == 0 || !(self.fov_deg > 0.0 && self.fov_deg < 360.0) || !(self.max_range > 0.0) {
            return Err(Error::Config("sensor: need n_ray >= 1, 0 < fov_deg < 360, max_range > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimitiveParams {
    pub count: usize,
    /// Lateral offsets span `[-lateral_span, lateral_span]`.
    pub lateral_span: f64,
    pub forward_advance: f64,
    pub arc_step: f64,
}

impl Default for PrimitiveParams {
    fn default() -> Self {
        Self { count: 15, lateral_span: 2.0, forward_advance: 2.0, arc_step: 0.02 }
    }
}

impl PrimitiveParams {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || !(self.lateral_span >= 0.0) || !(self.forward_advance > 0.0) || !(self.arc_step > 0.0) {
            return Err(Error::Config(
                "primitives: need count >= 1, lateral_span >= 0, forward_advance > 0, arc_step > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Everything that defines a rollout besides the planner and the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub env: EnvParams,
    pub sensor: SensorParams,
    pub primitives: PrimitiveParams,
    pub robot_radius: f64,
    pub forward_speed: f64,
    /// Replanning steps per rollout; defaults to enough steps to reach the goal.
    pub horizon: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            env: EnvParams::default(),
            sensor: SensorParams::default(),
            primitives: PrimitiveParams::default(),
            robot_radius: 0.15,
            forward_speed: 1.0,
            horizon: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sensor.validate()?;
        self.primitives.validate()?;
        if !(self.robot_radius >= 0.0 && self.forward_speed > 0.0) {
            return Err(Error::Config("robot_radius must be >= 0 and forward_speed > 0".into()));
        }
        if self.horizon == Some(0) {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
            .unwrap_or_else(|| (self.env.goal_y / self.primitives.forward_advance).ceil().max(1.0) as usize)
    }

    /// Total time budget `T`.
    pub fn time_horizon(&self) -> f64 {
        self.env.goal_y / self.forward_speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub width: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub seed: u64,
    pub corridor: Corridor,
    pub obstacles: Vec<Obstacle>,
    pub goal_y: f64,
}

impl Environment {
    pub fn empty(corridor: Corridor, goal_y: f64) -> Self {
        Self { seed: 0, corridor, obstacles: Vec::new(), goal_y }
    }

    /// Reflection about the corridor axis `x = 0`.
    pub fn mirrored(&self) -> Self {
        let obstacles = self.obstacles.iter().map(|o| Obstacle { x: -o.x, ..*o }).collect();
        Self { obstacles, ..self.clone() }
    }

    fn half_width(&self) -> f64 {
        self.corridor.width / 2.0
    }
}

/// Draws an obstacle course; the same seed always yields the same course.
pub fn generate_environment(seed: u64, params: &EnvParams) -> Result<Environment> {
    params.validate()?;
    let mut rng = rng::stream(&[seed]);
    let half = params.corridor_width / 2.0;
    let mut obstacles = Vec::with_capacity(params.obstacle_count);
    let mut attempts = 0;
    while obstacles.len() < params.obstacle_count {
        attempts += 1;
        if attempts > MAX_GENERATION_ATTEMPTS {
            return Err(Error::Generation {
                seed,
                reason: format!(
                    "placed {} of {} obstacles in {MAX_GENERATION_ATTEMPTS} attempts",
                    obstacles.len(),
                    params.obstacle_count
                ),
            });
        }
        let radius = uniform(&mut rng, params.r_min, params.r_max);
        let x = uniform(&mut rng, -half, half);
        let y = uniform(&mut rng, params.y_start, params.y_end);
        if x.hypot(y) < params.start_clearance + radius {
            continue;
        }
        obstacles.push(Obstacle { x, y, radius });
    }
    Ok(Environment {
        seed,
        corridor: Corridor { width: params.corridor_width, length: params.corridor_length },
        obstacles,
        goal_y: params.goal_y,
    })
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub t: f64,
}

impl RobotState {
    pub fn start() -> Self {
        Self { x: 0.0, y: 0.0, heading: std::f64::consts::FRAC_PI_2, t: 0.0 }
    }
}

/// Offset from the primitive's start, with the path tangent direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathPoint {
    pub dx: f64,
    pub dy: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub id: usize,
    pub lateral_offset: f64,
    pub forward_advance: f64,
    /// Samples at equal arc-length spacing, excluding the start and ending
    /// exactly at `(lateral_offset, forward_advance)`.
    pub path: Vec<PathPoint>,
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

impl MotionPrimitive {
    /// Smooth-step lateral profile `dx(u) = offset (3u^2 - 2u^3)`, `dy(u) = advance u`.
    pub fn sigmoid(id: usize, lateral_offset: f64, forward_advance: f64, arc_step: f64) -> Self {
        let point = |u: f64| (lateral_offset * smoothstep(u), forward_advance * u);
        let heading = |u: f64| (forward_advance).atan2(lateral_offset * 6.0 * u * (1.0 - u));

        // Cumulative arc length on a fine parameter table.
        let mut cum = Vec::with_capacity(ARC_TABLE_SEGMENTS + 1);
        cum.push(0.0);
        let mut prev = point(0.0);
        for k in 1..=ARC_TABLE_SEGMENTS {
            let p = point(k as f64 / ARC_TABLE_SEGMENTS as f64);
            let last = *cum.last().unwrap();
            cum.push(last + (p.0 - prev.0).hypot(p.1 - prev.1));
            prev = p;
        }
        let total = *cum.last().unwrap();
        let n = (total / arc_step).ceil().max(1.0) as usize;
        let mut path = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 1..=n {
            let u = if k == n {
                1.0
            } else {
                let s = k as f64 * arc_step;
                while cum[seg + 1] < s {
                    seg += 1;
                }
                let frac = (s - cum[seg]) / (cum[seg + 1] - cum[seg]);
                (seg as f64 + frac) / ARC_TABLE_SEGMENTS as f64
            };
            let (dx, dy) = point(u);
            path.push(PathPoint { dx, dy, heading: heading(u) });
        }
        Self { id, lateral_offset, forward_advance, path }
    }

    pub fn endpoint(&self) -> (f64, f64) {
        (self.lateral_offset, self.forward_advance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveLibrary {
    pub primitives: Vec<MotionPrimitive>,
}

impl PrimitiveLibrary {
    pub fn new(params: &PrimitiveParams) -> Result<Self> {
        params.validate()?;
        let n = params.count;
        let primitives = (0..n)
            .map(|j| {
                let offset = if n == 1 {
                    0.0
                } else {
                    -params.lateral_span + 2.0 * params.lateral_span * j as f64 / (n - 1) as f64
                };
                MotionPrimitive::sigmoid(j, offset, params.forward_advance, params.arc_step)
            })
            .collect();
        Ok(Self { primitives })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

/// Range readings normalized by the sensor's maximum range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthObservation {
    pub depths: Vec<f64>,
}

impl DepthObservation {
    /// FNV-1a over the bit patterns of the readings.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for d in &self.depths {
            for b in d.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

fn ray_circle(px: f64, py: f64, dx: f64, dy: f64, o: &Obstacle) -> Option<f64> {
    let (ox, oy) = (px - o.x, py - o.y);
    let b = ox * dx + oy * dy;
    let c = ox * ox + oy * oy - o.radius * o.radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    if b > 0.0 {
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}

fn ray_walls(px: f64, dx: f64, half_width: f64) -> Option<f64> {
    if dx > 0.0 {
        Some(((half_width - px) / dx).max(0.0))
    } else if dx < 0.0 {
        Some(((-half_width - px) / dx).max(0.0))
    } else {
        None
    }
}

/// Casts the sensor fan from `state` and returns normalized depths.
pub fn sense_depth(state: &RobotState, env: &Environment, sensor: &SensorParams) -> DepthObservation {
    let half = env.half_width();
    let depths = sensor
        .ray_angles()
        .into_iter()
        .map(|a| {
            let (dy, dx) = (state.heading + a).sin_cos();
            let mut hit = ray_walls(state.x, dx, half).unwrap_or(f64::INFINITY);
            for o in &env.obstacles {
                if let Some(t) = ray_circle(state.x, state.y, dx, dy, o) {
                    hit = hit.min(t);
                }
            }
            hit.min(sensor.max_range) / sensor.max_range
        })
        .collect();
    DepthObservation { depths }
}

/// Anything that maps an observation to a primitive index.
pub trait Planner {
    fn plan(&self, obs: &DepthObservation) -> Result<usize>;
}

impl<F: Fn(&DepthObservation) -> usize> Planner for F {
    fn plan(&self, obs: &DepthObservation) -> Result<usize> {
        Ok(self(obs))
    }
}

/// Always executes the same primitive.
#[derive(Debug, Clone, Copy)]
pub struct FixedPrimitive(pub usize);

impl Planner for FixedPrimitive {
    fn plan(&self, _: &DepthObservation) -> Result<usize> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Goal,
    Collision,
    HorizonExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub primitive_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub state: RobotState,
    pub observation_hash: u64,
    pub primitive_id: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub decisions: Vec<Decision>,
    pub points: Vec<TracePoint>,
}

impl Trace {
    /// Writes `t,x,y,heading,primitive_id` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y", "heading", "primitive_id"])?;
        for p in &self.points {
            w.write_record([
                p.t.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.heading.to_string(),
                p.primitive_id.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub cost: f64,
    pub outcome: Outcome,
    pub trace: Trace,
}

/// Prepared simulator: configuration plus its primitive library.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub config: SimConfig,
    pub library: PrimitiveLibrary,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let library = PrimitiveLibrary::new(&config.primitives)?;
        Ok(Self { config, library })
    }

    pub fn environment(&self, seed: u64) -> Result<Environment> {
        generate_environment(seed, &self.config.env)
    }

    pub fn sense(&self, state: &RobotState, env: &Environment) -> DepthObservation {
        sense_depth(state, env, &self.config.sensor)
    }

    /// Receding-horizon execution with a full trace.
    pub fn rollout<P: Planner + ?Sized>(&self, planner: &P, env: &Environment) -> Result<RolloutResult> {
        let mut trace = Trace::default();
        let (cost, outcome) = self.run(planner, env, Some(&mut trace))?;
        Ok(RolloutResult { cost, outcome, trace })
    }

    /// Same as [`Simulator::rollout`] without recording the trace.
    pub fn rollout_cost<P: Planner + ?Sized>(&self, planner: &P, env: &Environment) -> Result<f64> {
        self.run(planner, env, None).map(|(c, _)| c)
    }

    fn run<P: Planner + ?Sized>(
        &self,
        planner: &P,
        env: &Environment,
        mut trace: Option<&mut Trace>,
    ) -> Result<(f64, Outcome)> {
        let goal = env.goal_y;
        let speed = self.config.forward_speed;
        let rr = self.config.robot_radius;
        let wall = env.half_width() - rr;
        let cost_at = |y: f64| (1.0 - y / goal).clamp(0.0, 1.0);
        let mut state = RobotState::start();
        let mut nearby: Vec<(f64, f64, f64)> = Vec::with_capacity(env.obstacles.len());

        if let Some(tr) = trace.as_deref_mut() {
            tr.points.push(TracePoint { t: 0.0, x: state.x, y: state.y, heading: state.heading, primitive_id: usize::MAX });
        }
        for _ in 0..self.config.horizon() {
            let obs = self.sense(&state, env);
            let id = planner.plan(&obs)?;
            let prim = self.library.primitives.get(id).ok_or_else(|| {
                Error::domain(format!("planner chose primitive {id} from a library of {}", self.library.len()))
            })?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.decisions.push(Decision { state, observation_hash: obs.fingerprint(), primitive_id: id });
            }

            // Obstacles whose inflated disc can reach the primitive's bounding box.
            let (x0, y0) = (state.x, state.y);
            let (xa, xb) = (x0.min(x0 + prim.lateral_offset), x0.max(x0 + prim.lateral_offset));
            nearby.clear();
            nearby.extend(env.obstacles.iter().filter_map(|o| {
                let reach = o.radius + rr;
                let inside = o.y + reach > y0 && o.y - reach < y0 + prim.forward_advance && o.x + reach > xa && o.x - reach < xb;
                inside.then_some((o.x, o.y, reach * reach))
            }));

            for p in &prim.path {
                let (x, y) = (x0 + p.dx, y0 + p.dy);
                state = RobotState { x, y, heading: p.heading, t: y / speed };
                if let Some(tr) = trace.as_deref_mut() {
                    tr.points.push(TracePoint { t: state.t, x, y, heading: p.heading, primitive_id: id });
                }
                let hit_wall = x.abs() > wall;
                let hit_obstacle = nearby.iter().any(|&(ox, oy, r2)| (x - ox).powi(2) + (y - oy).powi(2) < r2);
                if hit_wall || hit_obstacle {
                    return Ok((cost_at(y), Outcome::Collision));
                }
                if y >= goal {
                    return Ok((0.0, Outcome::Goal));
                }
            }
        }
        Ok((cost_at(state.y), Outcome::HorizonExhausted))
    }
}

/// Monte-Carlo estimate of the posterior's expected cost on fresh environments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

/// Draws a policy from `posterior` for each of `n_eval` environments (seeds
/// `eval_seed + i`) and averages `cost(policy, i)`.
pub fn estimate_mean_cost<F>(posterior: &Categorical, n_eval: usize, eval_seed: u64, cost: F) -> Result<CostEstimate>
where
    F: Fn(usize, u64) -> Result<f64> + Sync,
{
    if n_eval == 0 {
        return Err(Error::domain("true-cost estimation needs n_eval >= 1"));
    }
    let cdf: Vec<f64> = posterior
        .probs()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let costs: Vec<f64> = (0..n_eval)
        .into_par_iter()
        .map(|i| {
            let u: f64 = rng::stream(&[eval_seed, i as u64, 0x5e1ec7]).random::<f64>() * cdf[cdf.len() - 1];
            let policy = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
            let seed = eval_seed.wrapping_add(i as u64);
            cost(policy, seed).map_err(|e| Error::Rollout { policy, seed, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let n = n_eval as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let var = if n_eval > 1 { costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(CostEstimate { mean, std_error: (var / n).sqrt(), n: n_eval })
}

/// [`estimate_mean_cost`] with rollouts of `planners` on generated courses.
pub fn estimate_true_cost<P: Planner + Sync>(
    sim: &Simulator,
    posterior: &Categorical,
    planners: &[P],
    n_eval: usize,
    eval_seed: u64,
) -> Result<CostEstimate> {
    crate::error::check_len(posterior.len(), planners.len())?;
    estimate_mean_cost(posterior, n_eval, eval_seed, |i, seed| {
        let env = sim.environment(seed)?;
        sim.rollout_cost(&planners[i], &env)
    })
}
