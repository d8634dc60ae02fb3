//! Kinematic push-block world: a gripper on the unit square carries a block
//! to one of four corner goals.

mod dataset;

pub use dataset::{
    decode_episodes, encode_episodes, generate_dataset, generate_episodes, initial_state, read_episodes, replay,
    write_episodes, DatasetSummary, EpisodeRecord,
};

use crate::numerics::Rng;

pub const FRAME_SIDE: usize = 16;
pub const FRAME_PIXELS: usize = FRAME_SIDE * FRAME_SIDE;
pub const HORIZON: usize = 40;
pub const MAX_DELTA: f64 = 0.1;
pub const GRASP_RADIUS: f64 = 0.06;
pub const SUCCESS_RADIUS: f64 = 0.08;
pub const NUM_TASKS: usize = 4;

pub const GOAL_INTENSITY: f32 = 0.3;
pub const BLOCK_INTENSITY: f32 = 0.6;
pub const GRIPPER_INTENSITY: f32 = 1.0;

/// Goal corner for each task id.
pub const GOALS: [[f64; 2]; NUM_TASKS] = [[0.1, 0.1], [0.9, 0.1], [0.1, 0.9], [0.9, 0.9]];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub g: f64,
}

impl Action {
    /// Clamps deltas to `[-0.1, 0.1]` and the gripper command to `[0, 1]`.
    /// Non-finite components are treated as zero.
    pub fn new(dx: f64, dy: f64, g: f64) -> Self {
        let fin = |v: f64| if v.is_finite() { v } else { 0.0 };
        Self {
            dx: fin(dx).clamp(-MAX_DELTA, MAX_DELTA),
            dy: fin(dy).clamp(-MAX_DELTA, MAX_DELTA),
            g: fin(g).clamp(0.0, 1.0),
        }
    }

    pub fn closed(&self) -> bool {
        self.g >= 0.5
    }

    /// Rounds every component to the nearest f32, the precision actions are
    /// stored at on disk.
    pub fn to_f32_precision(self) -> Self {
        Self { dx: self.dx as f32 as f64, dy: self.dy as f32 as f64, g: self.g as f32 as f64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    pub gripper: [f64; 2],
    pub gripper_closed: bool,
    pub block: [f64; 2],
    pub goal: [f64; 2],
    pub task: usize,
    pub step: usize,
    /// Set once the block has been within the success radius of the goal.
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl EnvState {
    pub fn new(task: usize, gripper: [f64; 2], block: [f64; 2]) -> Self {
        let task = task % NUM_TASKS;
        let mut s = Self {
            gripper: gripper.map(|v| v.clamp(0.0, 1.0)),
            gripper_closed: false,
            block: block.map(|v| v.clamp(0.0, 1.0)),
            goal: GOALS[task],
            task,
            step: 0,
            success: false,
        };
        s.success = s.at_goal();
        s
    }

    /// Gripper uniform in `[0.1, 0.9]²`, block uniform in `[0.3, 0.7]²`.
    pub fn random(task: usize, rng: &mut Rng) -> Self {
        let gripper = [rng.uniform_range(0.1, 0.9), rng.uniform_range(0.1, 0.9)];
        let block = [rng.uniform_range(0.3, 0.7), rng.uniform_range(0.3, 0.7)];
        Self::new(task, gripper, block)
    }

    pub fn block_goal_distance(&self) -> f64 {
        dist(self.block, self.goal)
    }

    pub fn at_goal(&self) -> bool {
        self.block_goal_distance() <= SUCCESS_RADIUS
    }

    pub fn done(&self) -> bool {
        self.step >= HORIZON
    }
}

/// Applies one action. The gripper command takes effect first; a closed
/// gripper within grasp radius of the block carries it along.
pub fn step_env(state: &EnvState, action: Action) -> EnvState {
    let a = Action::new(action.dx, action.dy, action.g);
    let mut s = *state;
    s.gripper_closed = a.closed();
    let carry = s.gripper_closed && dist(s.gripper, s.block) <= GRASP_RADIUS;
    s.gripper = [(s.gripper[0] + a.dx).clamp(0.0, 1.0), (s.gripper[1] + a.dy).clamp(0.0, 1.0)];
    if carry {
        s.block = [(s.block[0] + a.dx).clamp(0.0, 1.0), (s.block[1] + a.dy).clamp(0.0, 1.0)];
    }
    s.step += 1;
    s.success |= s.at_goal();
    s
}

fn paint(frame: &mut [f32], x: usize, y: usize, size: usize, value: f32) {
    for row in y..(y + size).min(FRAME_SIDE) {
        for col in x..(x + size).min(FRAME_SIDE) {
            frame[row * FRAME_SIDE + col] = value;
        }
    }
}

/// 16×16 grayscale raster, row-major with y down the rows.
pub fn render(state: &EnvState) -> Vec<f32> {
    let mut frame = vec![0.0f32; FRAME_PIXELS];
    let cell = |c: f64, span: f64| (c * span).round() as usize;
    paint(&mut frame, cell(state.goal[0], 15.0), cell(state.goal[1], 15.0), 1, GOAL_INTENSITY);
    paint(&mut frame, cell(state.block[0], 14.0), cell(state.block[1], 14.0), 2, BLOCK_INTENSITY);
    paint(&mut frame, cell(state.gripper[0], 14.0), cell(state.gripper[1], 14.0), 2, GRIPPER_INTENSITY);
    frame
}

/// Phase policy: approach the block with the gripper open, then close and
/// carry it toward the goal, then release once it is there.
pub fn scripted_expert(state: &EnvState) -> Action {
    if state.at_goal() {
        return Action::new(0.0, 0.0, 0.0);
    }
    if dist(state.gripper, state.block) <= GRASP_RADIUS {
        return Action::new(state.goal[0] - state.block[0], state.goal[1] - state.block[1], 1.0);
    }
    Action::new(state.block[0] - state.gripper[0], state.block[1] - state.gripper[1], 0.0)
}
