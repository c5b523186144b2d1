//! The placement MDP: joint or factored ABS move actions, coverage
//! bitmap recomputation, and the shaped coverage reward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::Point2D;
use crate::scenario::{coverage_bitmap_for, coverage_rate, ChannelModel, CoverageBitmap, Scenario};

/// One of the four moving operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];

    fn offset(self, step: f64) -> (f64, f64) {
        match self {
            Direction::Up => (0.0, step),
            Direction::Down => (0.0, -step),
            Direction::Left => (-step, 0.0),
            Direction::Right => (step, 0.0),
        }
    }
}

/// How ABS moves are addressed by one discrete action.
///
/// `Factored` moves a single ABS per step (4M actions); `Joint` moves
/// every ABS at once (4^M actions), which is only viable for small M.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Factored,
    Joint,
}

/// Default ceiling on the joint action head (4^M <= this).
pub const DEFAULT_JOINT_CAP: usize = 4096;

/// Discrete action indexing for a fleet of `n_abs` stations.
#[derive(Debug, Clone, Copy)]
pub struct ActionSpace {
    mode: ActionMode,
    n_abs: usize,
    size: usize,
}

impl ActionSpace {
    pub fn new(mode: ActionMode, n_abs: usize) -> Result<Self> {
        Self::with_joint_cap(mode, n_abs, DEFAULT_JOINT_CAP)
    }

    pub fn with_joint_cap(mode: ActionMode, n_abs: usize, cap: usize) -> Result<Self> {
        if n_abs == 0 {
            return Err(Error::InvalidParam("action space needs n_abs >= 1".into()));
        }
        let size = match mode {
            ActionMode::Factored => 4 * n_abs,
            ActionMode::Joint => {
                
                4usize
                    .checked_pow(n_abs as u32)
                    .filter(|&s| s <= cap)
                    .ok_or(Error::JointActionSpace { n_abs, cap })?
            }
        };
        Ok(Self { mode, n_abs, size })
    }

    pub fn mode(&self) -> ActionMode {
        self.mode
    }

    /// Number of discrete actions: 4M factored, 4^M joint.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Expands an action index into per-ABS moves.
    pub fn decode(&self, action: usize) -> Vec<(usize, Direction)> {
        assert!(action < self.size, "action {action} out of range");
        match self.mode {
            ActionMode::Factored => {
                vec![(action / 4, Direction::ALL[action % 4])]
            }
            ActionMode::Joint => {
                let mut digits = action;
                (0..self.n_abs)
                    .map(|m| {
                        let d = Direction::ALL[digits % 4];
                        digits /= 4;
                        (m, d)
                    })
                    .collect()
            }
        }
    }
}

/// Counts the discrete actions for a fleet without building the space.
pub fn enumerate_actions(n_abs: usize, mode: ActionMode) -> Result<usize> {
    Ok(ActionSpace::new(mode, n_abs)?.size())
}

/// Where episodes start.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialPlacement {
    /// Every reset re-draws uniform positions over the region.
    RandomUniform,
    /// Every reset restores this exact placement.
    Fixed(Vec<Point2D>),
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub model: ChannelModel,
    /// Target coverage rate for the current phase.
    pub target_rate: f64,
    /// Displacement per move, meters.
    pub step_size_m: f64,
    /// Scale of the intermediate shaping reward.
    pub reward_scale: f64,
    pub action_mode: ActionMode,
    pub initial: InitialPlacement,
    /// Step budget per episode.
    pub max_steps: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(model: ChannelModel, target_rate: f64) -> Self {
        Self {
            model,
            target_rate,
            step_size_m: 10.0,
            reward_scale: 1.0,
            action_mode: ActionMode::Factored,
            initial: InitialPlacement::RandomUniform,
            max_steps: 100,
            seed: 0,
        }
    }
}

/// Observable state: the coverage bitmap plus the placement behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub bitmap: CoverageBitmap,
    pub abs_positions: Vec<Point2D>,
    pub target_rate: f64,
    pub step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub coverage_rate: f64,
    pub out_of_border: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub terminal: bool,
    pub info: StepInfo,
}

/// The environment. Owns a scenario whose ABS positions it moves.
#[derive(Debug, Clone)]
pub struct PlacementEnv {
    scenario: Scenario,
    cfg: EnvConfig,
    space: ActionSpace,
    rng: ChaCha8Rng,
    positions: Vec<Point2D>,
    step: usize,
}

impl PlacementEnv {
    pub fn new(scenario: Scenario, cfg: EnvConfig) -> Result<Self> {
        scenario.validate()?;
        if !(cfg.target_rate > 0.0 && cfg.target_rate <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "target coverage rate must be in (0,1], got {}",
                cfg.target_rate
            )));
        }
        if !(cfg.step_size_m > 0.0 && cfg.step_size_m.is_finite()) {
            return Err(Error::InvalidParam("step size must be positive".into()));
        }
        if let InitialPlacement::Fixed(p) = &cfg.initial {
            if p.len() != scenario.n_abs() {
                return Err(Error::InvalidParam(format!(
                    "fixed initial placement has {} stations, scenario has {}",
                    p.len(),
                    scenario.n_abs()
                )));
            }
        }
        let space = ActionSpace::new(cfg.action_mode, scenario.n_abs())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(13);
        let positions = scenario.abss.clone();
        Ok(Self {
            scenario,
            cfg,
            space,
            rng,
            positions,
            step: 0,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn positions(&self) -> &[Point2D] {
        &self.positions
    }

    /// Raises the phase target without touching anything else.
    pub fn set_target_rate(&mut self, target: f64) {
        self.cfg.target_rate = target;
    }

    fn observe(&self) -> Result<EnvState> {
        let bitmap = coverage_bitmap_for(&self.scenario, &self.positions, self.cfg.model)?;
        Ok(EnvState {
            bitmap,
            abs_positions: self.positions.clone(),
            target_rate: self.cfg.target_rate,
            step: self.step,
        })
    }

    /// Starts an episode: restores or re-draws the placement and
    /// recomputes the bitmap.
    pub fn reset(&mut self) -> Result<EnvState> {
        let side = self.scenario.region_side();
        self.positions = match &self.cfg.initial {
            InitialPlacement::Fixed(p) => p.clone(),
            InitialPlacement::RandomUniform => (0..self.scenario.n_abs())
                .map(|_| {
                    Point2D::new(
                        self.rng.gen_range(0.0..=side),
                        self.rng.gen_range(0.0..=side),
                    )
                })
                .collect(),
        };
        self.step = 0;
        self.observe()
    }

    /// Applies one action: each addressed ABS attempts a move of
    /// `step_size_m`; attempts that leave the region are clamped to the
    /// border but counted. Two or more simultaneous exits earn the
    /// out-of-border penalty; otherwise reaching the target rate pays 1
    /// and terminates, and intermediate steps pay the negative squared
    /// coverage shortfall.
    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let side = self.scenario.region_side();
        let step = self.cfg.step_size_m;
        let mut exits = 0usize;
        for (m, direction) in self.space.decode(action) {
            let (dx, dy) = direction.offset(step);
            let attempted = Point2D::new(self.positions[m].x + dx, self.positions[m].y + dy);
            if !attempted.in_region(side) {
                exits += 1;
            }
            self.positions[m] = attempted.clamped(side);
        }
        self.step += 1;

        let next_state = self.observe()?;
        let rate = coverage_rate(&next_state.bitmap, self.scenario.n_gus());
        let out_of_border = exits >= 2;
        let (reward, terminal) = if out_of_border {
            (-1.0, false)
        } else if rate >= self.cfg.target_rate {
            (1.0, true)
        } else {
            (-self.cfg.reward_scale * (rate - 1.0) * (rate - 1.0), false)
        };
        Ok(StepResult {
            next_state,
            reward,
            terminal,
            info: StepInfo {
                coverage_rate: rate,
                out_of_border,
            },
        })
    }
}

/// One line of an episode trace (line-delimited JSON records).
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub coverage_rate: f64,
    pub positions: Vec<Point2D>,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("trace record serializes");
        line.push('\n');
        line
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::TerrainMap;
    use crate::radio::RadioParams;

    /// One GU at the center, coverage range 50 m, 200 m region.
    fn tiny_scenario(abs: Point2D) -> Scenario {
        Scenario::new(
            vec![Point2D::new(100.0, 100.0)],
            vec![abs],
            TerrainMap::open(200.0),
            RadioParams::for_coverage_range(50.0, 90.0).unwrap(),
            4,
        )
        .unwrap()
    }

    fn two_gu_scenario(abss: Vec<Point2D>) -> Scenario {
        Scenario::new(
            vec![Point2D::new(50.0, 50.0), Point2D::new(150.0, 150.0)],
            abss,
            TerrainMap::open(200.0),
            RadioParams::for_coverage_range(30.0, 90.0).unwrap(),
            4,
        )
        .unwrap()
    }

    #[test]
    fn action_space_sizes() {
        assert_eq!(
            enumerate_actions(10, ActionMode::Factored).unwrap(),
            40
        );
        assert_eq!(enumerate_actions(1, ActionMode::Factored).unwrap(), 4);
        assert_eq!(enumerate_actions(1, ActionMode::Joint).unwrap(), 4);
        assert_eq!(enumerate_actions(3, ActionMode::Joint).unwrap(), 64);
        assert!(matches!(
            enumerate_actions(10, ActionMode::Joint),
            Err(Error::JointActionSpace { .. })
        ));
    }

    #[test]
    fn factored_decode_addresses_one_station() {
        let space = ActionSpace::new(ActionMode::Factored, 3).unwrap();
        assert_eq!(space.decode(0), vec![(0, Direction::Up)]);
        assert_eq!(space.decode(7), vec![(1, Direction::Right)]);
        assert_eq!(space.decode(9), vec![(2, Direction::Down)]);
    }

    #[test]
    fn joint_decode_addresses_all_stations() {
        let space = ActionSpace::new(ActionMode::Joint, 2).unwrap();
        let moves = space.decode(4 + 2);
        assert_eq!(moves, vec![(0, Direction::Left), (1, Direction::Down)]);
    }

    #[test]
    fn shaped_reward_value() {
        // phi = 0.5 with target 0.9 and unit scale: reward -0.25.
        let sc = two_gu_scenario(vec![Point2D::new(50.0, 50.0), Point2D::new(50.0, 60.0)]);
        let mut cfg = EnvConfig::new(ChannelModel::Disk, 0.9);
        cfg.step_size_m = 5.0;
        cfg.initial = InitialPlacement::Fixed(sc.abss.clone());
        let mut env = PlacementEnv::new(sc, cfg).unwrap();
        env.reset().unwrap();
        let res = env.step(0).unwrap();
        assert!((res.info.coverage_rate - 0.5).abs() < 1e-12);
        assert!((res.reward - (-0.25)).abs() < 1e-12);
        assert!(!res.terminal);
    }

    #[test]
    fn reaching_target_pays_one_and_terminates() {
        let sc = tiny_scenario(Point2D::new(100.0, 60.0));
        let mut cfg = EnvConfig::new(ChannelModel::Disk, 1.0);
        cfg.initial = InitialPlacement::Fixed(sc.abss.clone());
        let mut env = PlacementEnv::new(sc, cfg).unwrap();
        env.reset().unwrap();
        // Move the single ABS up 10 m: distance 30 <= 50 covers the GU.
        let res = env.step(0).unwrap();
        assert_eq!(res.reward, 1.0);
        assert!(res.terminal);
        assert_eq!(res.info.coverage_rate, 1.0);
    }

    #[test]
    fn double_exit_pays_border_penalty() {
        let sc = two_gu_scenario(vec![Point2D::new(50.0, 195.0), Point2D::new(150.0, 195.0)]);
        let mut cfg = EnvConfig::new(ChannelModel::Disk, 0.99);
        cfg.action_mode = ActionMode::Joint;
        cfg.initial = InitialPlacement::Fixed(sc.abss.clone());
        let mut env = PlacementEnv::new(sc, cfg).unwrap();
        env.reset().unwrap();
        // Joint action: both stations move up, both would leave.
        let res = env.step(0).unwrap();
        assert_eq!(res.reward, -1.0);
        assert!(!res.terminal);
        assert!(res.info.out_of_border);
        // Clamped to the border.
        for p in &res.next_state.abs_positions {
            assert_eq!(p.y, 200.0);
        }
    }

    #[test]
    fn single_exit_is_an_ordinary_move() {
        // One station parked near the top edge covers the nearby GU; the
        // other sits on the far GU. Moving the first one up exits once:
        // clamped, no penalty, the usual shaped reward.
        let sc = two_gu_scenario(vec![Point2D::new(50.0, 195.0), Point2D::new(150.0, 150.0)]);
        let mut cfg = EnvConfig::new(ChannelModel::Disk, 0.99);
        cfg.initial = InitialPlacement::Fixed(sc.abss.clone());
        let mut env = PlacementEnv::new(sc, cfg).unwrap();
        env.reset().unwrap();
        let res = env.step(0).unwrap();
        assert!(!res.info.out_of_border);
        assert_eq!(res.next_state.abs_positions[0].y, 200.0);
        // GU (150,150) stays covered; GU (50,50) stays uncovered.
        assert!((res.info.coverage_rate - 0.5).abs() < 1e-12);
        assert!((res.reward - (-0.25)).abs() < 1e-12);
        assert!(!res.terminal);
    }

    #[test]
    fn positions_stay_inside_under_random_actions() {
        let sc = two_gu_scenario(vec![Point2D::new(10.0, 10.0), Point2D::new(190.0, 190.0)]);
        let mut cfg = EnvConfig::new(ChannelModel::Disk, 0.999);
        cfg.step_size_m = 37.0;
        cfg.seed = 5;
        let mut env = PlacementEnv::new(sc, cfg).unwrap();
        env.reset().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = env.action_space().size();
        for _ in 0..500 {
            let res = env.step(rng.gen_range(0..n)).unwrap();
            for p in &res.next_state.abs_positions {
                assert!(p.in_region(200.0));
            }
        }
    }

    #[test]
    fn reward_monotone_in_coverage_below_target() {
        // Shaped branch: -(phi-1)^2 strictly increases with phi.
        let shaped = |phi: f64| -(phi - 1.0) * (phi - 1.0);
        let mut prev = shaped(0.0);
        for i in 1..=10 {
            let phi = i as f64 / 12.0;
            let r = shaped(phi);
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let sc = two_gu_scenario(vec![Point2D::new(10.0, 10.0), Point2D::new(190.0, 190.0)]);
        let mut cfg = EnvConfig::new(ChannelModel::Disk, 0.9);
        cfg.seed = 42;
        let mut a = PlacementEnv::new(sc.clone(), cfg.clone()).unwrap();
        let mut b = PlacementEnv::new(sc, cfg).unwrap();
        for _ in 0..5 {
            assert_eq!(a.reset().unwrap(), b.reset().unwrap());
        }
    }

    #[test]
    fn fixed_reset_restores_placement_exactly() {
        let placement = vec![Point2D::new(33.0, 44.0), Point2D::new(120.0, 80.0)];
        let sc = two_gu_scenario(vec![Point2D::new(0.0, 0.0), Point2D::new(1.0, 1.0)]);
        let mut cfg = EnvConfig::new(ChannelModel::Disk, 0.9);
        cfg.initial = InitialPlacement::Fixed(placement.clone());
        let mut env = PlacementEnv::new(sc, cfg).unwrap();
        env.reset().unwrap();
        // Wander, then reset: back to the exact placement.
        for a in 0..4 {
            env.step(a).unwrap();
        }
        let state = env.reset().unwrap();
        assert_eq!(state.abs_positions, placement);
    }

    #[test]
    fn step_is_deterministic() {
        let sc = two_gu_scenario(vec![Point2D::new(40.0, 40.0), Point2D::new(160.0, 160.0)]);
        let mut cfg = EnvConfig::new(ChannelModel::Disk, 0.9);
        cfg.initial = InitialPlacement::Fixed(sc.abss.clone());
        let mut a = PlacementEnv::new(sc.clone(), cfg.clone()).unwrap();
        let mut b = PlacementEnv::new(sc, cfg).unwrap();
        a.reset().unwrap();
        b.reset().unwrap();
        for action in [0, 3, 5, 2, 7] {
            assert_eq!(a.step(action).unwrap(), b.step(action).unwrap());
        }
    }

    #[test]
    fn env_rate_matches_standalone_evaluation() {
        // The environment and the evaluation path must agree to the bit.
        use crate::scenario::{coverage_report, GenParams};
        let sc = Scenario::generate(
            &GenParams {
                region_side: 1000.0,
                n_buildings: 6,
                n_gus: 25,
                n_abs: 4,
                grid_k: 8,
                ..GenParams::default()
            },
            21,
        )
        .unwrap();
        for model in [ChannelModel::Disk, ChannelModel::Terrain] {
            let cfg = EnvConfig {
                initial: InitialPlacement::Fixed(sc.abss.clone()),
                ..EnvConfig::new(model, 0.99)
            };
            let mut env = PlacementEnv::new(sc.clone(), cfg).unwrap();
            env.reset().unwrap();
            let res = env.step(0).unwrap();
            let report =
                coverage_report(&sc, &res.next_state.abs_positions, model).unwrap();
            let covered = report.iter().filter(|g| g.covered).count();
            assert_eq!(res.info.coverage_rate, covered as f64 / sc.n_gus() as f64);
        }
    }

    #[test]
    fn reset_rate_matches_bitmap_sum() {
        let sc = two_gu_scenario(vec![Point2D::new(50.0, 50.0), Point2D::new(150.0, 150.0)]);
        let cfg = EnvConfig {
            initial: InitialPlacement::Fixed(sc.abss.clone()),
            ..EnvConfig::new(ChannelModel::Disk, 0.9)
        };
        let mut env = PlacementEnv::new(sc, cfg).unwrap();
        let state = env.reset().unwrap();
        assert_eq!(state.bitmap.total_covered(), 2);
        assert_eq!(coverage_rate(&state.bitmap, 2), 1.0);
    }
}
