//! Desk-scale task suite: a seeded distribution over task instances,
//! deterministic rollout dynamics and costs in `[0, 1]`.
//!
//! * Navigation: a disc robot in a 10 x 6 arena drives from the left to a
//!   goal disc on the right past a main rectangular obstacle and a few small
//!   "chairs". Discrete primitives, binary cost.
//! * Pushing: a disc effector pushes an axis-aligned box on a plane into a
//!   target region with quasi-static contact. Continuous displacement
//!   actions, distance-based cost.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_8, PI};
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::policy::{Action, ActionHead, Observation, PolicyDecoder};
use crate::rng;

pub const ARENA_WIDTH: f64 = 10.0;
pub const ARENA_HEIGHT: f64 = 6.0;
pub const ROBOT_RADIUS: f64 = 0.15;
pub const START: [f64; 2] = [1.0, 3.0];
pub const GOAL: [f64; 2] = [9.0, 3.0];
pub const GOAL_RADIUS: f64 = 0.5;
pub const STEP_LENGTH: f64 = 0.25;
pub const TURN_ANGLE: f64 = FRAC_PI_8;
pub const N_RAYS: usize = 9;
pub const RAY_RANGE: f64 = 3.0;
pub const NAV_HORIZON: usize = 100;
pub const NAV_OBS_DIM: usize = N_RAYS + 2;

pub const EFFECTOR_RADIUS: f64 = 0.015;
pub const EFFECTOR_START: [f64; 2] = [0.45, 0.0];
pub const MAX_PUSH_STEP: f64 = 0.01;
pub const PUSH_HORIZON: usize = 60;
pub const PUSH_OBS_DIM: usize = 8;
/// Scale applied to metric pushing features.
const PUSH_FEATURE_SCALE: f64 = 10.0;

pub mod primitive {
    pub const FORWARD: usize = 0;
    pub const BACKWARD: usize = 1;
    pub const TURN_LEFT: usize = 2;
    pub const TURN_RIGHT: usize = 3;
    pub const COUNT: usize = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Navigation,
    Pushing,
}

impl Task {
    pub fn obs_dim(self) -> usize {
        match self {
            Task::Navigation => NAV_OBS_DIM,
            Task::Pushing => PUSH_OBS_DIM,
        }
    }

    pub fn head(self) -> ActionHead {
        match self {
            Task::Navigation => ActionHead::Discrete { n: primitive::COUNT },
            Task::Pushing => ActionHead::Continuous { dim: 2 },
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Task::Navigation => NAV_HORIZON,
            Task::Pushing => PUSH_HORIZON,
        }
    }

    pub fn is_binary(self) -> bool {
        self == Task::Navigation
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Navigation => "navigation",
            Task::Pushing => "pushing",
        }
    }
}

/// Closed interval `[min, max]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl From<[f64; 2]> for Range {
    fn from([min, max]: [f64; 2]) -> Self {
        Self { min, max }
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.min, r.max]
    }
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.min.is_finite() && self.max.is_finite() && self.min <= self.max {
            Ok(())
        } else {
            Err(Error::InvalidRange {
                name: name.to_string(),
                min: self.min,
                max: self.max,
            })
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.min <= v && v <= self.max
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.min + (self.max - self.min) * u
    }
}

/// Inclusive integer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl From<[usize; 2]> for CountRange {
    fn from([min, max]: [usize; 2]) -> Self {
        Self { min, max }
    }
}

impl From<CountRange> for [usize; 2] {
    fn from(r: CountRange) -> Self {
        [r.min, r.max]
    }
}

/// Geometry ranges of the navigation distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavigationRanges {
    pub main_center_x: Range,
    pub main_center_y: Range,
    pub main_half_width: Range,
    pub main_half_height: Range,
    pub n_chairs: CountRange,
    pub chair_center_x: Range,
    pub chair_center_y: Range,
    pub chair_half_size: Range,
}

impl Default for NavigationRanges {
    fn default() -> Self {
        Self {
            main_center_x: Range::new(4.5, 5.5),
            main_center_y: Range::new(3.0, 3.8),
            main_half_width: Range::new(0.4, 0.8),
            main_half_height: Range::new(0.8, 1.2),
            n_chairs: CountRange { min: 1, max: 3 },
            chair_center_x: Range::new(3.0, 7.5),
            chair_center_y: Range::new(0.4, 5.6),
            chair_half_size: Range::new(0.15, 0.3),
        }
    }
}

impl NavigationRanges {
    fn named(&self) -> [(&'static str, Range); 7] {
        [
            ("main_center_x", self.main_center_x),
            ("main_center_y", self.main_center_y),
            ("main_half_width", self.main_half_width),
            ("main_half_height", self.main_half_height),
            ("chair_center_x", self.chair_center_x),
            ("chair_center_y", self.chair_center_y),
            ("chair_half_size", self.chair_half_size),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in self.named() {
            r.validate(name)?;
        }
        if self.n_chairs.min > self.n_chairs.max {
            return Err(Error::InvalidRange {
                name: "n_chairs".into(),
                min: self.n_chairs.min as f64,
                max: self.n_chairs.max as f64,
            });
        }
        Ok(())
    }
}

/// Geometry ranges of the pushing distribution (metres).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PushingRanges {
    pub box_half_x: Range,
    pub box_half_y: Range,
    pub box_x: Range,
    pub box_y: Range,
    pub target_x: Range,
    pub target_y: Range,
    pub target_half_x: Range,
    pub target_half_y: Range,
}

impl Default for PushingRanges {
    fn default() -> Self {
        Self {
            box_half_x: Range::new(0.02, 0.04),
            box_half_y: Range::new(0.03, 0.05),
            box_x: Range::new(0.55, 0.65),
            box_y: Range::new(-0.1, 0.1),
            target_x: Range::new(0.76, 0.80),
            target_y: Range::new(-0.02, 0.02),
            target_half_x: Range::new(0.025, 0.025),
            target_half_y: Range::new(0.12, 0.12),
        }
    }
}

impl PushingRanges {
    fn named(&self) -> [(&'static str, Range); 8] {
        [
            ("box_half_x", self.box_half_x),
            ("box_half_y", self.box_half_y),
            ("box_x", self.box_x),
            ("box_y", self.box_y),
            ("target_x", self.target_x),
            ("target_y", self.target_y),
            ("target_half_x", self.target_half_x),
            ("target_half_y", self.target_half_y),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in self.named() {
            r.validate(name)?;
        }
        if self.box_half_x.min <= 0.0 || self.box_half_y.min <= 0.0 {
            return Err(Error::InvalidConfig("box half sizes must be positive".into()));
        }
        if self.box_x.max + self.box_half_x.max >= self.target_x.min - self.target_half_x.max {
            return Err(Error::InvalidConfig("box must start left of the target region".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskRanges {
    Navigation(NavigationRanges),
    Pushing(PushingRanges),
}

impl TaskRanges {
    pub fn task(&self) -> Task {
        match self {
            TaskRanges::Navigation(_) => Task::Navigation,
            TaskRanges::Pushing(_) => Task::Pushing,
        }
    }

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Navigation => TaskRanges::Navigation(NavigationRanges::default()),
            Task::Pushing => TaskRanges::Pushing(PushingRanges::default()),
        }
    }
}

/// The distribution D. Instance `i` is drawn from the `(master_seed, i)` substream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDistribution {
    ranges: TaskRanges,
    master_seed: u64,
}

impl EnvDistribution {
    pub fn new(ranges: TaskRanges, master_seed: u64) -> Result<Self> {
        match &ranges {
            TaskRanges::Navigation(r) => r.validate()?,
            TaskRanges::Pushing(r) => r.validate()?,
        }
        Ok(Self { ranges, master_seed })
    }

    pub fn task(&self) -> Task {
        self.ranges.task()
    }

    pub fn ranges(&self) -> &TaskRanges {
        &self.ranges
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn with_seed(&self, master_seed: u64) -> Self {
        Self {
            ranges: self.ranges.clone(),
            master_seed,
        }
    }

    pub fn sample(&self, index: u64) -> Environment {
        sample_environment(self, index)
    }

    pub fn sample_many(&self, count: usize) -> Vec<Environment> {
        (0..count as u64).map(|i| self.sample(i)).collect()
    }
}

/// Axis-aligned rectangle given by centre and half extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
}

impl Rect {
    pub fn closest_point(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.cx - self.hx, self.cx + self.hx),
            p[1].clamp(self.cy - self.hy, self.cy + self.hy),
        ]
    }

    /// Squared distance from `p` to the rectangle (0 inside).
    pub fn distance_sq(&self, p: [f64; 2]) -> f64 {
        let dx = (p[0] - self.cx).abs() - self.hx;
        let dy = (p[1] - self.cy).abs() - self.hy;
        dx.max(0.0).powi(2) + dy.max(0.0).powi(2)
    }

    /// Entry distance of the ray `p + t d` (unit `d`), if it hits.
    pub fn ray_hit(&self, p: [f64; 2], d: [f64; 2]) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for k in 0..2 {
            let (c, h) = if k == 0 { (self.cx, self.hx) } else { (self.cy, self.hy) };
            let (lo, hi) = (c - h, c + h);
            if d[k] == 0.0 {
                if p[k] < lo || p[k] > hi {
                    return None;
                }
            } else {
                let (a, b) = ((lo - p[k]) / d[k], (hi - p[k]) / d[k]);
                t_near = t_near.max(a.min(b));
                t_far = t_far.min(a.max(b));
            }
        }
        if t_near > t_far || t_far < 0.0 {
            None
        } else {
            Some(t_near.max(0.0))
        }
    }

    fn mirrored_y(&self, axis: f64) -> Self {
        Self {
            cy: 2.0 * axis - self.cy,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavigationEnv {
    pub obstacles: Vec<Rect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushingEnv {
    pub block: Rect,
    pub target: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskInstance {
    Navigation(NavigationEnv),
    Pushing(PushingEnv),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub index: u64,
    pub instance_seed: u64,
    pub horizon: usize,
    pub instance: TaskInstance,
}

pub fn sample_environment(dist: &EnvDistribution, index: u64) -> Environment {
    let instance_seed = rng::derive(dist.master_seed, &[index]);
    let mut r = rng::substream(instance_seed, &[]);
    let instance = match &dist.ranges {
        TaskRanges::Navigation(g) => {
            let mut obstacles = vec![Rect {
                cx: g.main_center_x.sample(&mut r),
                cy: g.main_center_y.sample(&mut r),
                hx: g.main_half_width.sample(&mut r),
                hy: g.main_half_height.sample(&mut r),
            }];
            let n_chairs = r.random_range(g.n_chairs.min..=g.n_chairs.max);
            for _ in 0..n_chairs {
                let cx = g.chair_center_x.sample(&mut r);
                let cy = g.chair_center_y.sample(&mut r);
                let h = g.chair_half_size.sample(&mut r);
                obstacles.push(Rect { cx, cy, hx: h, hy: h });
            }
            TaskInstance::Navigation(NavigationEnv { obstacles })
        }
        TaskRanges::Pushing(g) => {
            let block = Rect {
                hx: g.box_half_x.sample(&mut r),
                hy: g.box_half_y.sample(&mut r),
                cx: g.box_x.sample(&mut r),
                cy: g.box_y.sample(&mut r),
            };
            let target = Rect {
                cx: g.target_x.sample(&mut r),
                cy: g.target_y.sample(&mut r),
                hx: g.target_half_x.sample(&mut r),
                hy: g.target_half_y.sample(&mut r),
            };
            TaskInstance::Pushing(PushingEnv { block, target })
        }
    };
    Environment {
        index,
        instance_seed,
        horizon: dist.task().horizon(),
        instance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    ReachedTarget,
    Collision,
    Timeout,
    Completed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub cost: f64,
    pub steps_taken: usize,
    pub terminal: TerminalReason,
}

/// Planar pose of the navigation robot or the pushing effector/box state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    /// Robot heading (navigation) or unused.
    pub heading: f64,
    /// Box centre (pushing) or unused.
    pub block: [f64; 2],
}

impl NavigationEnv {
    pub fn initial_state(&self) -> State {
        State {
            x: START[0],
            y: START[1],
            heading: 0.0,
            block: [0.0; 2],
        }
    }

    /// Distance along heading `angle` from `(x, y)` to the nearest wall or obstacle, capped at the sensor range.
    pub fn ray_distance(&self, x: f64, y: f64, angle: f64) -> f64 {
        let d = [angle.cos(), angle.sin()];
        let mut best = RAY_RANGE;
        for (k, lo, hi) in [(0, 0.0, ARENA_WIDTH), (1, 0.0, ARENA_HEIGHT)] {
            let p = if k == 0 { x } else { y };
            if d[k] > 0.0 {
                best = best.min((hi - p) / d[k]);
            } else if d[k] < 0.0 {
                best = best.min((lo - p) / d[k]);
            }
        }
        for r in &self.obstacles {
            if let Some(t) = r.ray_hit([x, y], d) {
                best = best.min(t);
            }
        }
        best.max(0.0)
    }

    pub fn observe(&self, s: &State) -> Observation {
        let mut sensor = Vec::with_capacity(NAV_OBS_DIM);
        for i in 0..N_RAYS {
            let a = s.heading - FRAC_PI_2 + i as f64 * FRAC_PI_8;
            sensor.push(self.ray_distance(s.x, s.y, a) / RAY_RANGE);
        }
        let bearing = (GOAL[1] - s.y).atan2(GOAL[0] - s.x) - s.heading;
        sensor.push(bearing.sin());
        sensor.push(bearing.cos());
        Observation::new(sensor)
    }

    pub fn collides(&self, x: f64, y: f64) -> bool {
        x < ROBOT_RADIUS
            || y < ROBOT_RADIUS
            || x > ARENA_WIDTH - ROBOT_RADIUS
            || y > ARENA_HEIGHT - ROBOT_RADIUS
            || self
                .obstacles
                .iter()
                .any(|r| r.distance_sq([x, y]) < ROBOT_RADIUS * ROBOT_RADIUS)
    }

    pub fn at_goal(x: f64, y: f64) -> bool {
        (x - GOAL[0]).powi(2) + (y - GOAL[1]).powi(2) <= GOAL_RADIUS * GOAL_RADIUS
    }

    /// Applies one primitive; returns the new state.
    pub fn step(&self, s: &State, action: usize) -> State {
        let mut n = *s;
        match action {
            primitive::FORWARD => {
                n.x += STEP_LENGTH * s.heading.cos();
                n.y += STEP_LENGTH * s.heading.sin();
            }
            primitive::BACKWARD => {
                n.x -= STEP_LENGTH * s.heading.cos();
                n.y -= STEP_LENGTH * s.heading.sin();
            }
            primitive::TURN_LEFT => n.heading = wrap_angle(s.heading + TURN_ANGLE),
            _ => n.heading = wrap_angle(s.heading - TURN_ANGLE),
        }
        n
    }

    /// Reflection about the start-goal axis.
    pub fn mirrored(&self) -> Self {
        Self {
            obstacles: self.obstacles.iter().map(|r| r.mirrored_y(START[1])).collect(),
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

impl PushingEnv {
    pub fn initial_state(&self) -> State {
        State {
            x: EFFECTOR_START[0],
            y: EFFECTOR_START[1],
            heading: 0.0,
            block: [self.block.cx, self.block.cy],
        }
    }

    pub fn block_at(&self, c: [f64; 2]) -> Rect {
        Rect {
            cx: c[0],
            cy: c[1],
            ..self.block
        }
    }

    pub fn observe(&self, s: &State) -> Observation {
        let k = PUSH_FEATURE_SCALE;
        Observation {
            sensor: vec![
                (s.block[0] - s.x) * k,
                (s.block[1] - s.y) * k,
                (self.target.cx - s.block[0]) * k,
                (self.target.cy - s.block[1]) * k,
                self.block.hx * k,
                self.block.hy * k,
            ],
            proprioceptive: vec![s.x, s.y],
        }
    }

    pub fn target_distance(&self, c: [f64; 2]) -> f64 {
        self.target.distance_sq(c).sqrt()
    }

    /// Moves the effector by the (norm-clipped) scaled action and resolves
    /// any effector/box overlap by translating the box along the contact normal.
    pub fn step(&self, s: &State, action: &[f64]) -> State {
        let norm = action[0].hypot(action[1]);
        let scale = MAX_PUSH_STEP / norm.max(1.0);
        let (dx, dy) = if norm.is_finite() {
            (action[0] * scale, action[1] * scale)
        } else {
            (0.0, 0.0)
        };
        let mut n = *s;
        n.x += dx;
        n.y += dy;
        let b = self.block_at(s.block);
        let q = b.closest_point([n.x, n.y]);
        let (ox, oy) = (q[0] - n.x, q[1] - n.y);
        let dist = ox.hypot(oy);
        if dist == 0.0 {
            // effector centre inside the box: carry the box along
            n.block = [s.block[0] + dx, s.block[1] + dy];
        } else if dist < EFFECTOR_RADIUS {
            let push = EFFECTOR_RADIUS - dist;
            n.block = [s.block[0] + ox / dist * push, s.block[1] + oy / dist * push];
        }
        n
    }
}

/// Runs `policy` from the initial state until termination. The callback
/// sees each state before the action is applied.
pub fn rollout_with<F, V>(env: &Environment, mut policy: F, mut visit: V) -> Result<RolloutResult>
where
    F: FnMut(&Observation) -> Result<Action>,
    V: FnMut(&State, &Observation, &Action),
{
    match &env.instance {
        TaskInstance::Navigation(nav) => {
            let mut s = nav.initial_state();
            for t in 0..env.horizon {
                let obs = nav.observe(&s);
                let action = policy(&obs)?;
                let a = match action {
                    Action::Discrete(a) if a < primitive::COUNT => a,
                    Action::Discrete(a) => {
                        return Err(Error::DimensionMismatch {
                            context: "navigation primitive",
                            expected: primitive::COUNT,
                            actual: a,
                        })
                    }
                    Action::Continuous(ref v) => {
                        return Err(Error::DimensionMismatch {
                            context: "navigation expects a discrete primitive",
                            expected: 1,
                            actual: v.len(),
                        })
                    }
                };
                visit(&s, &obs, &action);
                s = nav.step(&s, a);
                if nav.collides(s.x, s.y) {
                    return Ok(RolloutResult {
                        cost: 1.0,
                        steps_taken: t + 1,
                        terminal: TerminalReason::Collision,
                    });
                }
                if NavigationEnv::at_goal(s.x, s.y) {
                    return Ok(RolloutResult {
                        cost: 0.0,
                        steps_taken: t + 1,
                        terminal: TerminalReason::ReachedTarget,
                    });
                }
            }
            Ok(RolloutResult {
                cost: 1.0,
                steps_taken: env.horizon,
                terminal: TerminalReason::Timeout,
            })
        }
        TaskInstance::Pushing(push) => {
            let mut s = push.initial_state();
            let initial = push.target_distance(s.block);
            for _ in 0..env.horizon {
                let obs = push.observe(&s);
                let action = policy(&obs)?;
                let a = match &action {
                    Action::Continuous(v) => {
                        check_dim("pushing displacement", 2, v.len())?;
                        [v[0], v[1]]
                    }
                    Action::Discrete(_) => {
                        return Err(Error::DimensionMismatch {
                            context: "pushing expects a continuous displacement",
                            expected: 2,
                            actual: 1,
                        })
                    }
                };
                visit(&s, &obs, &action);
                s = push.step(&s, &a);
            }
            let cost = if initial > 0.0 {
                (push.target_distance(s.block) / initial).clamp(0.0, 1.0)
            } else {
                0.0
            };
            Ok(RolloutResult {
                cost,
                steps_taken: env.horizon,
                terminal: TerminalReason::Completed,
            })
        }
    }
}

fn check_policy(env: &Environment, policy: &PolicyDecoder) -> Result<()> {
    let task = match env.instance {
        TaskInstance::Navigation(_) => Task::Navigation,
        TaskInstance::Pushing(_) => Task::Pushing,
    };
    check_dim("policy observation", task.obs_dim(), policy.obs_dim())?;
    if policy.head() != task.head() {
        return Err(Error::InvalidConfig(format!(
            "policy head {:?} does not fit the {} task",
            policy.head(),
            task.name()
        )));
    }
    Ok(())
}

/// Rolls out the latent policy `z` with a single latent held for the whole episode.
pub fn rollout(env: &Environment, policy: &PolicyDecoder, z: &[f64]) -> Result<RolloutResult> {
    check_policy(env, policy)?;
    check_dim("latent", policy.latent_dim(), z.len())?;
    rollout_with(env, |o| policy.decode(z, o), |_, _, _| {})
}

/// Like [`rollout`] but also returns the visited states (including the final one).
pub fn rollout_trace(env: &Environment, policy: &PolicyDecoder, z: &[f64]) -> Result<(RolloutResult, Vec<State>)> {
    check_policy(env, policy)?;
    check_dim("latent", policy.latent_dim(), z.len())?;
    let mut states = Vec::new();
    let result = rollout_with(env, |o| policy.decode(z, o), |s, _, _| states.push(*s))?;
    Ok((result, states))
}

/// `cost[i][j] = rollout(envs[i], policy, latents[j]).cost`, evaluated in parallel.
pub fn batch_cost(envs: &[Environment], policy: &PolicyDecoder, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if envs.is_empty() || latents.is_empty() {
        return Err(Error::InvalidConfig("batch_cost needs at least one environment and latent".into()));
    }
    envs.par_iter()
        .enumerate()
        .map(|(i, env)| {
            latents
                .iter()
                .enumerate()
                .map(|(j, z)| {
                    rollout(env, policy, z).map(|r| r.cost).map_err(|e| Error::RolloutFailure {
                        env: i,
                        latent: j,
                        source: Box::new(e),
                    })
                })
                .collect()
        })
        .collect()
}

impl Environment {
    pub fn task(&self) -> Task {
        match self.instance {
            TaskInstance::Navigation(_) => Task::Navigation,
            TaskInstance::Pushing(_) => Task::Pushing,
        }
    }

    /// Plain-text description for debugging and rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "environment {} ({}) seed {:#018x} horizon {}", self.index, self.task().name(), self.instance_seed, self.horizon);
        match &self.instance {
            TaskInstance::Navigation(nav) => {
                let _ = writeln!(s, "arena {ARENA_WIDTH} x {ARENA_HEIGHT}, start ({}, {}), goal ({}, {}) r {GOAL_RADIUS}", START[0], START[1], GOAL[0], GOAL[1]);
                for (k, r) in nav.obstacles.iter().enumerate() {
                    let kind = if k == 0 { "main " } else { "chair" };
                    let _ = writeln!(s, "{kind} x [{:.3}, {:.3}] y [{:.3}, {:.3}]", r.cx - r.hx, r.cx + r.hx, r.cy - r.hy, r.cy + r.hy);
                }
            }
            TaskInstance::Pushing(p) => {
                let (b, t) = (&p.block, &p.target);
                let _ = writeln!(s, "box centre ({:.4}, {:.4}) half ({:.4}, {:.4})", b.cx, b.cy, b.hx, b.hy);
                let _ = writeln!(s, "target x [{:.4}, {:.4}] y [{:.4}, {:.4}]", t.cx - t.hx, t.cx + t.hx, t.cy - t.hy, t.cy + t.hy);
                let _ = writeln!(s, "effector start ({}, {}) r {EFFECTOR_RADIUS}", EFFECTOR_START[0], EFFECTOR_START[1]);
            }
        }
        s
    }

    /// ASCII map of a navigation instance with an optional path (`cols` columns).
    pub fn render_ascii(&self, path: &[State], cols: usize) -> Option<String> {
        let TaskInstance::Navigation(nav) = &self.instance else {
            return None;
        };
        let rows = (cols as f64 * ARENA_HEIGHT / ARENA_WIDTH / 2.0).round().max(1.0) as usize;
        let cell = |x: f64, y: f64| -> (usize, usize) {
            let c = ((x / ARENA_WIDTH) * cols as f64).clamp(0.0, cols as f64 - 1.0) as usize;
            let r = ((1.0 - y / ARENA_HEIGHT) * rows as f64).clamp(0.0, rows as f64 - 1.0) as usize;
            (r, c)
        };
        let mut grid = vec![vec!['.'; cols]; rows];
        for (r, row) in grid.iter_mut().enumerate() {
            for (c, ch) in row.iter_mut().enumerate() {
                let x = (c as f64 + 0.5) / cols as f64 * ARENA_WIDTH;
                let y = (1.0 - (r as f64 + 0.5) / rows as f64) * ARENA_HEIGHT;
                if nav.obstacles.iter().any(|o| o.distance_sq([x, y]) == 0.0) {
                    *ch = '#';
                } else if NavigationEnv::at_goal(x, y) {
                    *ch = 'G';
                }
            }
        }
        for s in path {
            let (r, c) = cell(s.x, s.y);
            grid[r][c] = '*';
        }
        let (r, c) = cell(START[0], START[1]);
        grid[r][c] = 'S';
        Some(grid.into_iter().map(|row| row.into_iter().collect::<String>() + "\n").collect())
    }
}

/// Scripted experts with two behaviour modes per task.
pub mod expert {
    use super::*;

    /// Ray length (metres) for a heading to count as open.
    pub const CLEAR_DISTANCE: f64 = 1.0;
    /// Half width of the lane an open heading must keep free.
    pub const CORRIDOR_HALF_WIDTH: f64 = 0.3;

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum Mode {
        /// Pass obstacles on the left (navigation) / push at the upper corner (pushing).
        Left,
        Right,
    }

    impl Mode {
        pub fn sign(self) -> f64 {
            match self {
                Mode::Left => 1.0,
                Mode::Right => -1.0,
            }
        }

        pub fn name(self) -> &'static str {
            match self {
                Mode::Left => "left",
                Mode::Right => "right",
            }
        }

        pub fn of_index(i: usize) -> Self {
            if i % 2 == 0 {
                Mode::Left
            } else {
                Mode::Right
            }
        }
    }

    /// Stateless navigation expert. Picks the open ray heading closest to
    /// the goal bearing, searching its preferred side first when the goal
    /// heading is blocked, and turns toward it or drives forward.
    pub fn navigation(mode: Mode, obs: &Observation) -> usize {
        let ray = |i: usize| obs.sensor[i] * RAY_RANGE;
        let toward = match mode {
            Mode::Left => primitive::TURN_LEFT,
            Mode::Right => primitive::TURN_RIGHT,
        };
        let bearing = obs.sensor[N_RAYS].atan2(obs.sensor[N_RAYS + 1]);
        let centre = (N_RAYS / 2) as i64;
        // candidate headings keep their whole corridor inside the sensor fan,
        // so a turn never changes the evidence about a heading
        let reach = 2;
        let (lo, hi) = (reach, N_RAYS as i64 - 1 - reach);
        // snap to the nearest ray with a wide dead band around straight ahead
        let steps = if bearing.abs() < 0.75 * TURN_ANGLE {
            0
        } else {
            (bearing.abs() / TURN_ANGLE).round().max(1.0).copysign(bearing) as i64
        };
        let goal = (centre + steps).clamp(lo, hi);
        // a heading is open when no ray hit lies in the corridor ahead of it
        let open = |i: i64| {
            ray(i as usize) >= CLEAR_DISTANCE
                && (i - reach..=i + reach).all(|j| {
                    let d = ray(j as usize);
                    let off = (j - i) as f64 * TURN_ANGLE;
                    d >= RAY_RANGE - 1e-9
                        || off.cos() <= 1e-9
                        || d * off.cos() >= CLEAR_DISTANCE
                        || d * off.sin().abs() >= CORRIDOR_HALF_WIDTH
                })
        };
        let side = mode.sign() as i64;
        let order = std::iter::once(goal)
            .chain((1..N_RAYS as i64).map(|k| goal + side * k))
            .chain((1..N_RAYS as i64).map(|k| goal - side * k))
            .filter(|i| (lo..=hi).contains(i));
        match order.into_iter().find(|&i| open(i)) {
            None => toward,
            Some(i) if i == centre => primitive::FORWARD,
            Some(i) if i > centre => primitive::TURN_LEFT,
            Some(_) => primitive::TURN_RIGHT,
        }
    }

    /// Pushing expert: moves behind the box at lateral offset `+-hy/2`
    /// (upper or lower corner) and pushes along `+x` until the box centre
    /// reaches the middle of the target region.
    pub fn pushing(mode: Mode, obs: &Observation) -> Vec<f64> {
        let k = PUSH_FEATURE_SCALE;
        let (rel_x, rel_y) = (obs.sensor[0] / k, obs.sensor[1] / k);
        let to_target_x = obs.sensor[2] / k;
        let (hx, hy) = (obs.sensor[4] / k, obs.sensor[5] / k);
        // effector offsets to the contact point behind the chosen corner
        let dy = rel_y + mode.sign() * 0.5 * hy;
        let gap = rel_x - hx - EFFECTOR_RADIUS;
        let tol = 0.003;
        let dir = if to_target_x <= 0.0 {
            [0.0, 0.0]
        } else if gap < tol && dy.abs() < tol {
            [MAX_PUSH_STEP, dy]
        } else if gap < tol {
            [-MAX_PUSH_STEP, 0.0]
        } else {
            [gap - 0.001, dy]
        };
        let n = dir[0].hypot(dir[1]);
        let scale = 1.0 / n.max(MAX_PUSH_STEP);
        vec![dir[0] * scale, dir[1] * scale]
    }

    pub fn act(task: Task, mode: Mode, obs: &Observation) -> Action {
        match task {
            Task::Navigation => Action::Discrete(navigation(mode, obs)),
            Task::Pushing => Action::Continuous(pushing(mode, obs)),
        }
    }

    /// Success threshold used to keep a demonstration.
    pub fn is_success(task: Task, cost: f64) -> bool {
        match task {
            Task::Navigation => cost == 0.0,
            Task::Pushing => cost < 0.1,
        }
    }
}

/// Canonical symmetric navigation instance (one centred obstacle) used to read off behaviour modes.
pub fn canonical_navigation() -> Environment {
    Environment {
        index: 0,
        instance_seed: 0,
        horizon: NAV_HORIZON,
        instance: TaskInstance::Navigation(NavigationEnv {
            obstacles: vec![Rect {
                cx: 5.0,
                cy: START[1],
                hx: 0.6,
                hy: 1.0,
            }],
        }),
    }
}

/// Which side of the start-goal axis a navigation path passes on:
/// `Some(Left)` / `Some(Right)` by the sign of the largest lateral excursion
/// beyond `threshold`, `None` for paths that stay near the axis.
pub fn navigation_mode(path: &[State], threshold: f64) -> Option<expert::Mode> {
    let peak = path
        .iter()
        .map(|s| s.y - START[1])
        .fold(0.0_f64, |acc, d| if d.abs() > acc.abs() { d } else { acc });
    if peak > threshold {
        Some(expert::Mode::Left)
    } else if peak < -threshold {
        Some(expert::Mode::Right)
    } else {
        None
    }
}
