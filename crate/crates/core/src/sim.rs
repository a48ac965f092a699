//! Straight multi-lane highway with scripted traffic and a unicycle ego car.
//!
//! Frame: `x` runs along the road, `y` across it with `y = 0` at the right edge, so lane `i`
//! (counted from the right) is centred at `(i + ½)·lane_width`. Headings are in degrees,
//! counter-clockwise, so a positive heading drifts left.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::nn::RandomState;

pub const KMH_PER_MPS: f64 = 3.6;

pub fn kmh_to_mps(v: f64) -> f64 {
    v / KMH_PER_MPS
}

pub fn mps_to_kmh(v: f64) -> f64 {
    v * KMH_PER_MPS
}

/// Wrap an angle in degrees to `(−180, 180]`.
pub fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub num_lanes: usize,
    pub lane_width: f64,
    pub start_x: f64,
    pub goal_x: f64,
}

impl Default for Track {
    fn default() -> Self {
        Track {
            num_lanes: 6,
            lane_width: 3.7,
            start_x: 0.0,
            goal_x: 400.0,
        }
    }
}

impl Track {
    pub fn validate(&self) -> Result<()> {
        if self.num_lanes == 0 || !(self.lane_width > 0.0) || !(self.goal_x > self.start_x) {
            return Err(Error::Config(
                "track needs lanes, positive lane width and goal beyond start".into(),
            ));
        }
        Ok(())
    }

    pub fn segment_length(&self) -> f64 {
        self.goal_x - self.start_x
    }

    pub fn width(&self) -> f64 {
        self.num_lanes as f64 * self.lane_width
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    pub fn on_track(&self, y: f64) -> bool {
        (0.0..=self.width()).contains(&y)
    }

    /// Nearest lane of a lateral position, clamped to the road.
    pub fn lane_of(&self, y: f64) -> usize {
        ((y / self.lane_width).floor().max(0.0) as usize).min(self.num_lanes - 1)
    }
}

pub const CAR_LENGTH: f64 = 4.5;
pub const CAR_WIDTH: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarState {
    pub x: f64,
    pub y: f64,
    pub heading_deg: f64,
    pub speed_kmh: f64,
    pub length: f64,
    pub width: f64,
}

impl CarState {
    pub fn new(x: f64, y: f64, heading_deg: f64, speed_kmh: f64) -> Self {
        CarState {
            x,
            y,
            heading_deg,
            speed_kmh,
            length: CAR_LENGTH,
            width: CAR_WIDTH,
        }
    }

    pub fn speed_mps(&self) -> f64 {
        kmh_to_mps(self.speed_kmh)
    }

    pub fn front(&self) -> f64 {
        self.x + self.length / 2.0
    }

    pub fn rear(&self) -> f64 {
        self.x - self.length / 2.0
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading_deg.to_radians().sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
            .map(|[a, b]| [self.x + a * c - b * s, self.y + a * s + b * c])
    }
}

/// Unicycle update: heading integrates first, then the car moves along the new heading.
///
/// `θ' = θ + w·dt`, `x' = x + v·dt·cos θ'`, `y' = y + v·dt·sin θ'` with `v` converted from km/h
/// to m/s and angles in degrees.
pub fn step_unicycle(car: &CarState, speed_kmh: f64, yaw_rate_deg: f64, dt: f64) -> CarState {
    let heading = wrap_deg(car.heading_deg + yaw_rate_deg * dt);
    let dist = kmh_to_mps(speed_kmh) * dt;
    let (s, c) = heading.to_radians().sin_cos();
    CarState {
        x: car.x + dist * c,
        y: car.y + dist * s,
        heading_deg: heading,
        speed_kmh,
        ..*car
    }
}

pub const D_MAX: f64 = 50.0;

/// Frontal and rearward bumper-to-bumper gaps in the left, current and right lanes plus the
/// signed offset to the current lane centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    /// `[left, current, right]`, metres in `[0, D_MAX]`.
    pub front: [f64; 3],
    /// `[left, current, right]`, metres in `[0, D_MAX]`.
    pub rear: [f64; 3],
    /// Lane centre minus ego `y`: positive when the centre lies to the ego's left.
    pub d_dev: f64,
}

pub const LEFT: usize = 0;
pub const CENTER: usize = 1;
pub const RIGHT: usize = 2;

impl FeatureVector {
    /// The 7-D network input: gaps scaled by `D_MAX`, offset scaled by half a lane width.
    pub fn to_input(&self, lane_width: f64) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .front
            .iter()
            .chain(&self.rear)
            .map(|d| d / D_MAX)
            .collect();
        v.push(self.d_dev / (lane_width / 2.0));
        v
    }

    pub fn front_center(&self) -> f64 {
        self.front[CENTER]
    }
}

/// Features plus the speeds of the closest cars ahead of and behind the ego in its lane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perception {
    pub features: FeatureVector,
    pub lane: usize,
    pub front_speed_mps: Option<f64>,
    pub rear_speed_mps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub ego: CarState,
    pub traffic: Vec<CarState>,
    pub time: f64,
    pub dt: f64,
}

pub const CONTROL_DT: f64 = 0.1;

/// Gap from the ego to `car` along the road: `Some((true, gap))` if the car is ahead.
fn longitudinal_gap(ego: &CarState, car: &CarState) -> (bool, f64) {
    if car.x >= ego.x {
        (true, car.rear() - ego.front())
    } else {
        (false, ego.rear() - car.front())
    }
}

pub fn perceive(state: &SimState, track: &Track) -> Result<Perception> {
    let ego = &state.ego;
    if !track.on_track(ego.y) {
        return Err(Error::Feature(format!("ego off track at y = {:.3}", ego.y)));
    }
    let lane = track.lane_of(ego.y);
    let neighbours = [
        Some(lane + 1).filter(|&l| l < track.num_lanes),
        Some(lane),
        lane.checked_sub(1),
    ];
    // a lane that does not exist reads as blocked
    let mut front = neighbours.map(|l| if l.is_some() { D_MAX } else { 0.0 });
    let mut rear = front;
    let mut front_speed: Option<(f64, f64)> = None;
    let mut rear_speed: Option<(f64, f64)> = None;
    for car in &state.traffic {
        let car_lane = track.lane_of(car.y);
        let Some(slot) = neighbours.iter().position(|&l| l == Some(car_lane)) else {
            continue;
        };
        let (ahead, gap) = longitudinal_gap(ego, car);
        let gap = gap.clamp(0.0, D_MAX);
        if ahead {
            front[slot] = front[slot].min(gap);
        } else {
            rear[slot] = rear[slot].min(gap);
        }
        if slot == CENTER && gap < D_MAX {
            let best = if ahead {
                &mut front_speed
            } else {
                &mut rear_speed
            };
            if best.is_none_or(|(g, _)| gap < g) {
                *best = Some((gap, car.speed_mps()));
            }
        }
    }
    Ok(Perception {
        features: FeatureVector {
            front,
            rear,
            d_dev: track.lane_center(lane) - ego.y,
        },
        lane,
        front_speed_mps: front_speed.map(|(_, v)| v),
        rear_speed_mps: rear_speed.map(|(_, v)| v),
    })
}

pub fn extract_features(state: &SimState, track: &Track) -> Result<FeatureVector> {
    Ok(perceive(state, track)?.features)
}

pub const W_MAX: f64 = 45.0;

/// `w = 2·sign(θ_diff)·θ_diff²`, clamped to `±w_max` (deg/s).
pub fn feedback_heading_controller(current_deg: f64, desired_deg: f64, w_max: f64) -> f64 {
    let diff = wrap_deg(desired_deg - current_deg);
    (2.0 * diff.signum() * diff * diff).clamp(-w_max, w_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeCommand {
    pub speed_mps: f64,
    pub yaw_rate_deg: f64,
}

/// Lane-keeping rule controller.
///
/// Speed: `v_F − 5` when the frontal gap is under 3 m, else `v_R + 3` when the rear gap is
/// under 3 m, else the mean of the two neighbour speeds; a missing neighbour counts as
/// `cruise_mps`. Yaw rate (deg/s): `−5·θ_dev + 50·d_dev` with `θ_dev` in degrees and `d_dev`
/// in metres, clamped to `±W_MAX`.
pub fn safe_controller(
    features: &FeatureVector,
    front_speed_mps: Option<f64>,
    rear_speed_mps: Option<f64>,
    heading_dev_deg: f64,
    cruise_mps: f64,
) -> SafeCommand {
    let vf = front_speed_mps.unwrap_or(cruise_mps);
    let vr = rear_speed_mps.unwrap_or(cruise_mps);
    let speed = if features.front[CENTER] < 3.0 {
        vf - 5.0
    } else if features.rear[CENTER] < 3.0 {
        vr + 3.0
    } else {
        (vf + vr) / 2.0
    };
    let w = -5.0 * heading_dev_deg + 50.0 * features.d_dev;
    SafeCommand {
        speed_mps: speed.max(0.0),
        yaw_rate_deg: w.clamp(-W_MAX, W_MAX),
    }
}

fn project(corners: &[[f64; 2]; 4], axis: [f64; 2]) -> (f64, f64) {
    corners
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let d = p[0] * axis[0] + p[1] * axis[1];
            (lo.min(d), hi.max(d))
        })
}

/// Separating-axis test on two oriented rectangles (touching counts as overlap).
pub fn boxes_overlap(a: &CarState, b: &CarState) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    for h in [a.heading_deg, b.heading_deg] {
        let (s, c) = h.to_radians().sin_cos();
        for axis in [[c, s], [-s, c]] {
            let (a_lo, a_hi) = project(&ca, axis);
            let (b_lo, b_hi) = project(&cb, axis);
            if a_hi < b_lo || b_hi < a_lo {
                return false;
            }
        }
    }
    true
}

pub fn detect_collision(state: &SimState, track: &Track) -> bool {
    !track.on_track(state.ego.y) || state.traffic.iter().any(|c| boxes_overlap(&state.ego, c))
}

/// Euclidean gap between the axis-aligned footprints of two cars (0 when they touch).
pub fn footprint_gap(a: &CarState, b: &CarState) -> f64 {
    let dx = ((a.x - b.x).abs() - (a.length + b.length) / 2.0).max(0.0);
    let dy = ((a.y - b.y).abs() - (a.width + b.width) / 2.0).max(0.0);
    dx.hypot(dy)
}

/// Constant-speed lane keeping with a simple car-following slow-down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneKeepingScript {
    pub desired_speed_kmh: f64,
}

/// Time headway (s) and standstill gap (m) of the car-following rule.
const HEADWAY_S: f64 = 1.0;
const STANDSTILL_GAP: f64 = 2.0;
const FOLLOW_GAIN: f64 = 0.5;

impl LaneKeepingScript {
    /// Speed for the next tick given the closest leader `(gap, speed)` in the lane, in m/s.
    pub fn command_mps(&self, leader: Option<(f64, f64)>) -> f64 {
        let desired = kmh_to_mps(self.desired_speed_kmh);
        match leader {
            Some((gap, v_lead)) => {
                let wanted = STANDSTILL_GAP + HEADWAY_S * v_lead;
                (v_lead + FOLLOW_GAIN * (gap - wanted)).clamp(0.0, desired)
            }
            None => desired,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSpec {
    /// Multiplier on `reference_per_km`.
    pub density: f64,
    /// Cars per lane per kilometre at density 1.
    pub reference_per_km: f64,
    pub speed_range_kmh: (f64, f64),
    pub seed: u64,
}

impl Default for TrafficSpec {
    fn default() -> Self {
        TrafficSpec {
            density: 1.0,
            reference_per_km: 20.0,
            speed_range_kmh: (54.0, 79.0),
            seed: 0,
        }
    }
}

/// Minimum bumper-to-bumper spacing between spawned cars.
const SPAWN_GAP: f64 = 8.0;

/// Clear window around the ego start in its own lane: `[x − behind, x + ahead]`.
const EGO_CLEAR_BEHIND: f64 = 20.0;
const EGO_CLEAR_AHEAD: f64 = 30.0;

/// Place traffic on every lane over `[start − 60, goal]`, keeping the ego's start window clear.
///
/// Each lane gets `round(density · reference · length)` cars with non-overlapping gaps.
pub fn spawn_traffic(
    spec: &TrafficSpec,
    track: &Track,
    ego_start: (f64, usize),
) -> Result<(Vec<CarState>, Vec<LaneKeepingScript>)> {
    track.validate()?;
    if !(spec.density >= 0.0) || !spec.density.is_finite() {
        return Err(Error::Spawn(format!(
            "density {} must be nonnegative",
            spec.density
        )));
    }
    let (lo_v, hi_v) = spec.speed_range_kmh;
    if !(lo_v > 0.0 && lo_v <= hi_v) {
        return Err(Error::Spawn(
            "speed range must be positive and ordered".into(),
        ));
    }
    let mut rng = RandomState::seed_from_u64(spec.seed);
    let region = (track.start_x - 60.0, track.goal_x);
    let length = region.1 - region.0;
    let per_lane = (spec.density * spec.reference_per_km * length / 1000.0).round() as usize;
    let slot = CAR_LENGTH + SPAWN_GAP;
    let free = length - per_lane as f64 * slot;
    if free < 0.0 {
        return Err(Error::Spawn(format!(
            "{per_lane} cars per lane do not fit in {length:.0} m"
        )));
    }
    let (ego_x, ego_lane) = ego_start;
    let mut cars = Vec::new();
    let mut scripts = Vec::new();
    for lane in 0..track.num_lanes {
        let mut offsets: Vec<f64> = (0..per_lane)
            .map(|_| rng.random_range(0.0..=free))
            .collect();
        offsets.sort_by(f64::total_cmp);
        for (i, u) in offsets.into_iter().enumerate() {
            let x = region.0 + u + i as f64 * slot + CAR_LENGTH / 2.0;
            let speed = rng.random_range(lo_v..=hi_v);
            if lane == ego_lane && x > ego_x - EGO_CLEAR_BEHIND && x < ego_x + EGO_CLEAR_AHEAD {
                continue;
            }
            cars.push(CarState::new(x, track.lane_center(lane), 0.0, speed));
            scripts.push(LaneKeepingScript {
                desired_speed_kmh: speed,
            });
        }
    }
    Ok((cars, scripts))
}

/// One running scene: track, state and the traffic scripts.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub track: Track,
    pub state: SimState,
    pub scripts: Vec<LaneKeepingScript>,
}

impl Scene {
    pub fn new(
        track: Track,
        ego: CarState,
        traffic: Vec<CarState>,
        scripts: Vec<LaneKeepingScript>,
    ) -> Self {
        Scene {
            track,
            state: SimState {
                ego,
                traffic,
                time: 0.0,
                dt: CONTROL_DT,
            },
            scripts,
        }
    }

    /// Spawn traffic and place the ego at the start of `ego_lane`, heading down the road.
    pub fn spawn(
        track: Track,
        spec: &TrafficSpec,
        ego_lane: usize,
        ego_speed_kmh: f64,
    ) -> Result<Self> {
        if ego_lane >= track.num_lanes {
            return Err(Error::Config(format!(
                "ego lane {ego_lane} outside {} lanes",
                track.num_lanes
            )));
        }
        let ego = CarState::new(
            track.start_x,
            track.lane_center(ego_lane),
            0.0,
            ego_speed_kmh,
        );
        let (traffic, scripts) = spawn_traffic(spec, &track, (ego.x, ego_lane))?;
        Ok(Scene::new(track, ego, traffic, scripts))
    }

    pub fn perceive(&self) -> Result<Perception> {
        perceive(&self.state, &self.track)
    }

    pub fn collided(&self) -> bool {
        detect_collision(&self.state, &self.track)
    }

    pub fn reached_goal(&self) -> bool {
        self.state.ego.x >= self.track.goal_x
    }

    /// Smallest footprint gap between the ego and any traffic car, capped at `D_MAX`.
    pub fn min_gap(&self) -> f64 {
        self.state
            .traffic
            .iter()
            .map(|c| footprint_gap(&self.state.ego, c))
            .fold(D_MAX, f64::min)
    }

    /// Advance one tick: the ego applies `(speed, yaw rate)`, traffic follows its scripts.
    pub fn step(&mut self, ego_speed_kmh: f64, ego_yaw_rate_deg: f64) {
        let dt = self.state.dt;
        let track = &self.track;
        let ego_before = self.state.ego;
        let ego_lane = track.lane_of(ego_before.y);
        let speeds: Vec<f64> = self
            .state
            .traffic
            .iter()
            .zip(&self.scripts)
            .map(|(car, script)| {
                let lane = track.lane_of(car.y);
                let leader = self
                    .state
                    .traffic
                    .iter()
                    .filter(|o| track.lane_of(o.y) == lane && o.x > car.x)
                    .map(|o| (o.rear() - car.front(), o.speed_mps()))
                    .chain(
                        (ego_lane == lane && ego_before.x > car.x)
                            .then(|| (ego_before.rear() - car.front(), ego_before.speed_mps())),
                    )
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                mps_to_kmh(script.command_mps(leader))
            })
            .collect();
        for (car, v) in self.state.traffic.iter_mut().zip(speeds) {
            *car = step_unicycle(car, v, 0.0, dt);
        }
        self.state.ego = step_unicycle(&ego_before, ego_speed_kmh, ego_yaw_rate_deg, dt);
        self.state.time += dt;
    }
}
