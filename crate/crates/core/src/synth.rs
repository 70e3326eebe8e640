//! Procedural driving clips with a known causal element per clip.
//!
//! Frames are flat-shaded 90×160 rasters: sky above row 30, a perspective
//! road with dashed center marks below that scroll with distance travelled,
//! plus mild per-pixel sensor noise.
//! Each clip carries one causal element (lead car, traffic light, stop sign
//! or road curve), scripted speed and heading traces, template sentences and
//! per-frame masks over the 12×20 feature grid.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bddx::{AnnotatedClip, Interval};
use crate::error::{Error, Result};
use crate::perception::{GRID_COLS, GRID_ROWS, REGIONS};
use crate::signal::frames::{write_frames, RgbImage, FRAME_HEIGHT, FRAME_WIDTH};
use crate::signal::{SensorLog, SensorSample};

pub const HORIZON: usize = 30;
pub const FRAME_RATE_HZ: f64 = 10.0;
pub const SENSOR_RATE_HZ: f64 = 20.0;
pub const CLIP_SECONDS: f64 = 2.2;

const SKY: [u8; 3] = [150, 190, 235];
const GRASS: [u8; 3] = [70, 140, 60];
const ROAD: [u8; 3] = [100, 100, 100];
const MARK: [u8; 3] = [235, 235, 235];
const POLE: [u8; 3] = [60, 60, 60];
const LAMP_OFF: [u8; 3] = [40, 40, 40];
const HOUSING: [u8; 3] = [20, 20, 20];
const RED: [u8; 3] = [230, 20, 20];
const GREEN: [u8; 3] = [20, 220, 60];
const WHITE: [u8; 3] = [250, 250, 250];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionClass {
    Forward,
    Slow,
    Stop,
    Accelerate,
    TurnLeft,
    TurnRight,
}

impl ActionClass {
    pub const ALL: [ActionClass; 6] = [
        ActionClass::Forward,
        ActionClass::Slow,
        ActionClass::Stop,
        ActionClass::Accelerate,
        ActionClass::TurnLeft,
        ActionClass::TurnRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::Forward => "forward",
            ActionClass::Slow => "slow",
            ActionClass::Stop => "stop",
            ActionClass::Accelerate => "accelerate",
            ActionClass::TurnLeft => "turn-left",
            ActionClass::TurnRight => "turn-right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightState {
    Red,
    Green,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub state: LightState,
    /// Top-left corner of the housing, pixels.
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadVehicle {
    /// Distance at t = 0, metres.
    pub distance: f64,
    /// Rate at which the gap shrinks, m/s.
    pub closing_speed: f64,
    /// Lateral offset as a fraction of the road half-width.
    pub lateral: f64,
    pub color: [u8; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopSign {
    pub x: f64,
    pub y: f64,
}

/// Salient non-causal object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Billboard {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    pub color: [u8; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CausalElement {
    LeadVehicle,
    TrafficLight,
    StopSign,
    RoadCurve,
}

/// Speed and heading script.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub initial_speed: f64,
    /// Constant acceleration until `phase_end`, then zero.
    pub accel: f64,
    pub phase_end: f64,
    /// Yaw rate, degrees per second (positive turns right).
    pub yaw_rate: f64,
    pub initial_heading: f64,
}

impl Motion {
    pub fn speed(&self, t: f64) -> f64 {
        (self.initial_speed + self.accel * t.min(self.phase_end)).max(0.0)
    }

    /// Scripted acceleration (zero once the car has stopped).
    pub fn accel_at(&self, t: f64) -> f64 {
        if t < self.phase_end && self.speed(t) > 0.0 {
            self.accel
        } else {
            0.0
        }
    }

    /// Distance travelled since t = 0.
    pub fn distance(&self, t: f64) -> f64 {
        let tp = t.min(self.phase_end);
        let mut s = self.initial_speed * tp + 0.5 * self.accel * tp * tp;
        s += self.speed(self.phase_end) * (t - tp).max(0.0);
        s
    }

    pub fn heading(&self, t: f64) -> f64 {
        let h = (self.initial_heading + self.yaw_rate * t).rem_euclid(360.0);
        if h >= 360.0 {
            0.0
        } else {
            h
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub seed: u64,
    pub class: ActionClass,
    pub causal: CausalElement,
    pub light: Option<TrafficLight>,
    pub lead: Option<LeadVehicle>,
    pub stop_sign: Option<StopSign>,
    /// Horizontal road offset at the horizon, pixels (negative bends left).
    pub curve_px: f64,
    pub duration_s: f64,
    pub motion: Motion,
    pub distractor: Option<Billboard>,
    pub description: String,
    pub justification: String,
}

/// Cells of the 12×20 feature grid covering the causal element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalMask {
    cells: Vec<bool>,
}

impl CausalMask {
    pub fn from_cells(cells: Vec<bool>) -> Result<Self> {
        if cells.len() != REGIONS {
            return Err(Error::dim("causal_mask", "regions", REGIONS, cells.len()));
        }
        if !cells.iter().any(|&c| c) {
            return Err(Error::InvalidArgument("causal mask is empty".into()));
        }
        Ok(CausalMask { cells })
    }

    /// Cells whose pixel footprint intersects any of the boxes `(x0, y0, x1, y1)`.
    pub fn from_boxes(boxes: &[(f64, f64, f64, f64)]) -> Result<Self> {
        let ch = FRAME_HEIGHT as f64 / GRID_ROWS as f64;
        let cw = FRAME_WIDTH as f64 / GRID_COLS as f64;
        let mut cells = vec![false; REGIONS];
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let (cy0, cy1) = (r as f64 * ch, (r + 1) as f64 * ch);
                let (cx0, cx1) = (c as f64 * cw, (c + 1) as f64 * cw);
                cells[r * GRID_COLS + c] = boxes
                    .iter()
                    .any(|&(x0, y0, x1, y1)| x0 < cx1 && x1 > cx0 && y0 < cy1 && y1 > cy0);
            }
        }
        Self::from_cells(cells)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Share of the grid covered: the mass a uniform map puts on the mask.
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / REGIONS as f64
    }

    /// Attention mass inside the mask.
    pub fn mass(&self, alpha: &[f64]) -> f64 {
        alpha.iter().zip(&self.cells).filter(|(_, &m)| m).map(|(a, _)| a).sum()
    }
}

/// Everything generated for one clip.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub scenario: Scenario,
    pub frames: Vec<(f64, RgbImage)>,
    pub log: SensorLog,
    pub annotation: AnnotatedClip,
    pub masks: Vec<CausalMask>,
}

fn jitter(rng: &mut ChaCha8Rng, base: [u8; 3], amount: i32) -> [u8; 3] {
    base.map(|v| (v as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn snap(t: f64) -> f64 {
    (t * 10.0).round() / 10.0
}

/// Draws a random scenario of the given class; `rng` should be the clip's own stream.
pub fn sample_scenario(id: &str, seed: u64, class: ActionClass, distractor: bool, rng: &mut ChaCha8Rng) -> Scenario {
    let heading = rng.random_range(0.0..360.0);
    let light_at = |rng: &mut ChaCha8Rng, state| TrafficLight {
        state,
        x: rng.random_range(112.0..140.0),
        y: rng.random_range(5.0..11.0),
    };
    let still = |v0: f64| Motion {
        initial_speed: v0,
        accel: 0.0,
        phase_end: CLIP_SECONDS,
        yaw_rate: 0.0,
        initial_heading: heading,
    };
    let car_color = [[30, 40, 160], [150, 20, 30], [25, 25, 25], [200, 200, 210]][rng.random_range(0..4)];
    let mut s = Scenario {
        id: id.to_string(),
        seed,
        class,
        causal: CausalElement::LeadVehicle,
        light: None,
        lead: None,
        stop_sign: None,
        curve_px: 0.0,
        duration_s: CLIP_SECONDS,
        motion: still(10.0),
        distractor: None,
        description: String::new(),
        justification: String::new(),
    };
    let (desc, just) = match class {
        ActionClass::Forward => {
            s.motion = still(rng.random_range(8.0..13.0));
            s.lead = Some(LeadVehicle {
                distance: rng.random_range(40.0..55.0),
                closing_speed: 0.0,
                lateral: rng.random_range(-0.3..0.3),
                color: car_color,
            });
            ("the car drives forward", "because traffic is moving freely")
        }
        ActionClass::Slow => {
            s.motion = Motion {
                accel: -rng.random_range(1.5..2.5),
                ..still(rng.random_range(9.0..13.0))
            };
            s.lead = Some(LeadVehicle {
                distance: rng.random_range(13.0..17.0),
                closing_speed: rng.random_range(2.0..3.0),
                lateral: rng.random_range(-0.3..0.3),
                color: car_color,
            });
            ("the car slows down", "because the car in front is slowing down")
        }
        ActionClass::Stop => {
            let t_stop = snap(rng.random_range(1.0..1.6));
            let decel = rng.random_range(4.0..6.0);
            s.motion = Motion {
                accel: -decel,
                phase_end: t_stop,
                ..still(decel * t_stop)
            };
            if rng.random_bool(0.5) {
                s.causal = CausalElement::TrafficLight;
                s.light = Some(light_at(rng, LightState::Red));
                ("the car stops", "because the light is red")
            } else {
                s.causal = CausalElement::StopSign;
                s.stop_sign = Some(StopSign {
                    x: rng.random_range(118.0..146.0),
                    y: rng.random_range(23.0..30.0),
                });
                ("the car stops", "because there is a stop sign")
            }
        }
        ActionClass::Accelerate => {
            s.causal = CausalElement::TrafficLight;
            s.motion = Motion {
                accel: rng.random_range(2.0..3.0),
                phase_end: snap(rng.random_range(1.2..1.8)),
                ..still(rng.random_range(1.0..5.0))
            };
            s.light = Some(light_at(rng, LightState::Green));
            ("the car accelerates", "because the light is green")
        }
        ActionClass::TurnLeft | ActionClass::TurnRight => {
            let sign = if class == ActionClass::TurnLeft { -1.0 } else { 1.0 };
            s.causal = CausalElement::RoadCurve;
            s.curve_px = sign * rng.random_range(28.0..42.0);
            s.motion = Motion {
                yaw_rate: sign * rng.random_range(12.0..20.0),
                ..still(rng.random_range(6.0..9.0))
            };
            if sign < 0.0 {
                ("the car turns left", "because the road curves to the left")
            } else {
                ("the car turns right", "because the road curves to the right")
            }
        }
    };
    s.description = desc.to_string();
    s.justification = just.to_string();
    if distractor {
        let colors = [[255, 230, 0], [255, 0, 200], [0, 240, 255]];
        s.distractor = Some(Billboard {
            x: rng.random_range(4.0..40.0),
            y: rng.random_range(3.0..12.0),
            width: rng.random_range(22.0..34.0),
            height: rng.random_range(10.0..15.0),
            color: colors[rng.random_range(0..colors.len())],
        });
    }
    s
}

fn road_half_width(row: f64) -> f64 {
    2.0 + (row - HORIZON as f64) * 1.25
}

fn road_center(s: &Scenario, row: f64) -> f64 {
    let u = ((FRAME_HEIGHT as f64 - 1.0 - row) / (FRAME_HEIGHT - 1 - HORIZON) as f64).clamp(0.0, 1.0);
    FRAME_WIDTH as f64 / 2.0 + s.curve_px * u * u
}

fn depth_at_row(row: f64) -> f64 {
    150.0 / (row - HORIZON as f64 + 1.0)
}

fn row_at_depth(d: f64) -> f64 {
    HORIZON as f64 - 1.0 + 150.0 / d
}

fn fill_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let r0 = y0.max(0.0).floor() as usize;
    let r1 = y1.min(h).ceil() as usize;
    let c0 = x0.max(0.0).floor() as usize;
    let c1 = x1.min(w).ceil() as usize;
    for r in r0..r1 {
        for c in c0..c1 {
            img.set_pixel(r, c, rgb);
        }
    }
}

fn fill_disc(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, rgb: [u8; 3]) {
    let (h, w) = (img.height() as i64, img.width() as i64);
    for r in (cy - radius).floor() as i64..=(cy + radius).ceil() as i64 {
        for c in (cx - radius).floor() as i64..=(cx + radius).ceil() as i64 {
            if r < 0 || c < 0 || r >= h || c >= w {
                continue;
            }
            let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            if dx * dx + dy * dy <= radius * radius {
                img.set_pixel(r as usize, c as usize, rgb);
            }
        }
    }
}

/// Pixel box of the lead car at time `t`.
fn lead_box(s: &Scenario, lead: &LeadVehicle, t: f64) -> (f64, f64, f64, f64) {
    let d = (lead.distance - lead.closing_speed * t).max(4.0);
    let bottom = row_at_depth(d).min(FRAME_HEIGHT as f64 - 1.0);
    let hw = road_half_width(bottom);
    let width = (0.7 * hw).max(4.0);
    let height = (0.7 * width).max(3.0);
    let cx = road_center(s, bottom) + lead.lateral * hw;
    (cx - width / 2.0, bottom - height, cx + width / 2.0, bottom)
}

const LIGHT_W: f64 = 7.0;
const LIGHT_H: f64 = 15.0;
const SIGN_R: f64 = 6.0;

fn causal_boxes(s: &Scenario, t: f64) -> Vec<(f64, f64, f64, f64)> {
    match s.causal {
        CausalElement::LeadVehicle => s.lead.iter().map(|l| lead_box(s, l, t)).collect(),
        CausalElement::TrafficLight => s
            .light
            .iter()
            .map(|l| (l.x, l.y, l.x + LIGHT_W, l.y + LIGHT_H))
            .collect(),
        CausalElement::StopSign => s
            .stop_sign
            .iter()
            .map(|g| (g.x - SIGN_R, g.y - SIGN_R, g.x + SIGN_R, g.y + SIGN_R))
            .collect(),
        CausalElement::RoadCurve => {
            let (r0, r1) = (HORIZON as f64, HORIZON as f64 + 15.0);
            let (mut x0, mut x1) = (f64::MAX, f64::MIN);
            let mut row = r0;
            while row <= r1 {
                let (c, hw) = (road_center(s, row), road_half_width(row));
                x0 = x0.min(c - hw);
                x1 = x1.max(c + hw);
                row += 1.0;
            }
            vec![(x0, r0, x1, r1)]
        }
    }
}

/// Renders the frame at time `t`.
pub fn render(s: &Scenario, palette: &Palette, t: f64) -> RgbImage {
    let mut img = RgbImage::filled(FRAME_HEIGHT, FRAME_WIDTH, palette.sky);
    let travelled = s.motion.distance(t);
    fill_rect(&mut img, 0.0, HORIZON as f64, FRAME_WIDTH as f64, FRAME_HEIGHT as f64, palette.grass);
    for r in HORIZON..FRAME_HEIGHT {
        let row = r as f64 + 0.5;
        let (c, hw) = (road_center(s, row), road_half_width(row));
        fill_rect(&mut img, c - hw, r as f64, c + hw, r as f64 + 1.0, ROAD);
        let z = depth_at_row(row) + travelled;
        if (z / 3.0).floor() as i64 % 2 == 0 {
            let mw = (hw / 20.0).max(0.5);
            fill_rect(&mut img, c - mw, r as f64, c + mw, r as f64 + 1.0, MARK);
        }
    }
    if let Some(b) = &s.distractor {
        fill_rect(&mut img, b.x, b.y, b.x + b.width, b.y + b.height, b.color);
        fill_rect(&mut img, b.x + 2.0, b.y + b.height / 2.0 - 1.0, b.x + b.width - 2.0, b.y + b.height / 2.0 + 1.0, HOUSING);
        fill_rect(&mut img, b.x + b.width / 2.0 - 1.0, b.y + b.height, b.x + b.width / 2.0 + 1.0, HORIZON as f64 + 4.0, POLE);
    }
    if let Some(l) = &s.light {
        fill_rect(&mut img, l.x + LIGHT_W / 2.0 - 1.0, l.y + LIGHT_H, l.x + LIGHT_W / 2.0 + 1.0, HORIZON as f64 + 8.0, POLE);
        fill_rect(&mut img, l.x, l.y, l.x + LIGHT_W, l.y + LIGHT_H, HOUSING);
        let (top, bottom) = match l.state {
            LightState::Red => (RED, LAMP_OFF),
            LightState::Green => (LAMP_OFF, GREEN),
        };
        fill_disc(&mut img, l.x + LIGHT_W / 2.0, l.y + 4.0, 2.6, top);
        fill_disc(&mut img, l.x + LIGHT_W / 2.0, l.y + LIGHT_H - 4.0, 2.6, bottom);
    }
    if let Some(g) = &s.stop_sign {
        fill_rect(&mut img, g.x - 1.0, g.y + SIGN_R, g.x + 1.0, g.y + SIGN_R + 10.0, POLE);
        fill_disc(&mut img, g.x, g.y, SIGN_R, RED);
        fill_rect(&mut img, g.x - 3.5, g.y - 1.0, g.x + 3.5, g.y + 1.0, WHITE);
    }
    if let Some(l) = &s.lead {
        let (x0, y0, x1, y1) = lead_box(s, l, t);
        fill_rect(&mut img, x0, y0, x1, y1, l.color);
        let tail = ((y1 - y0) * 0.25).max(1.0);
        fill_rect(&mut img, x0, y1 - 2.0 * tail, x0 + (x1 - x0) * 0.25, y1 - tail, RED);
        fill_rect(&mut img, x1 - (x1 - x0) * 0.25, y1 - 2.0 * tail, x1, y1 - tail, RED);
    }
    img
}

/// Amplitude of the per-pixel sensor noise. Without it flat sky and grass
/// cells have identical features, and content-based attention cannot tell
/// them apart.
pub const GRAIN: i16 = 6;

fn add_grain(img: &mut RgbImage, rng: &mut ChaCha8Rng) {
    for r in 0..img.height() {
        for c in 0..img.width() {
            let px = img.pixel(r, c).map(|v| (v as i16 + rng.random_range(-GRAIN..=GRAIN)).clamp(0, 255) as u8);
            img.set_pixel(r, c, px);
        }
    }
}

/// Per-clip background colours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Palette {
    pub sky: [u8; 3],
    pub grass: [u8; 3],
}

fn check_bounds(s: &Scenario) -> Result<()> {
    let (w, h) = (FRAME_WIDTH as f64, FRAME_HEIGHT as f64);
    let inside = |x0: f64, y0: f64, x1: f64, y1: f64| x0 >= 0.0 && y0 >= 0.0 && x1 <= w && y1 <= h;
    let ok = s.light.is_none_or(|l| inside(l.x, l.y, l.x + LIGHT_W, l.y + LIGHT_H))
        && s.stop_sign.is_none_or(|g| inside(g.x - SIGN_R, g.y - SIGN_R, g.x + SIGN_R, g.y + SIGN_R))
        && s.distractor.is_none_or(|b| inside(b.x, b.y, b.x + b.width, b.y + b.height))
        && s.curve_px.abs() < w / 2.0;
    if !ok {
        return Err(Error::InvalidArgument(format!("scenario {}: element out of frame bounds", s.id)));
    }
    Ok(())
}

/// Renders frames, sensor log, annotation and masks for a scenario.
pub fn generate(s: &Scenario) -> Result<SynthClip> {
    check_bounds(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let palette = Palette {
        sky: jitter(&mut rng, SKY, 12),
        grass: jitter(&mut rng, GRASS, 12),
    };
    let n_frames = (s.duration_s * FRAME_RATE_HZ).round() as usize + 1;
    let mut frames = Vec::with_capacity(n_frames);
    let mut masks = Vec::with_capacity(n_frames);
    let mut grain = ChaCha8Rng::seed_from_u64(s.seed);
    grain.set_stream(u64::MAX);
    for k in 0..n_frames {
        let t = k as f64 / FRAME_RATE_HZ;
        let mut img = render(s, &palette, t);
        add_grain(&mut img, &mut grain);
        frames.push((t, img));
        masks.push(CausalMask::from_boxes(&causal_boxes(s, t))?);
    }
    let n_sensor = (s.duration_s * SENSOR_RATE_HZ).round() as usize + 1;
    let (lat0, lon0) = (37.87 + rng.random_range(-0.01..0.01), -122.27 + rng.random_range(-0.01..0.01));
    let mut samples = Vec::with_capacity(n_sensor);
    let (mut east, mut north) = (0.0, 0.0);
    let dt = 1.0 / SENSOR_RATE_HZ;
    for k in 0..n_sensor {
        let t = k as f64 * dt;
        if k > 0 {
            let ds = s.motion.distance(t) - s.motion.distance(t - dt);
            let heading = s.motion.heading(t - dt / 2.0).to_radians();
            east += ds * heading.sin();
            north += ds * heading.cos();
        }
        samples.push(SensorSample {
            t,
            speed: s.motion.speed(t),
            course: s.motion.heading(t),
            lat: lat0 + north / 111_111.0,
            lon: lon0 + east / (111_111.0 * lat0.to_radians().cos()),
        });
    }
    let annotation = AnnotatedClip {
        video_id: s.id.clone(),
        intervals: vec![Interval {
            start_s: 0.0,
            end_s: s.duration_s,
            description: s.description.clone(),
            justification: s.justification.clone(),
        }],
    };
    Ok(SynthClip {
        scenario: s.clone(),
        frames,
        log: SensorLog::new(samples)?,
        annotation,
        masks,
    })
}

/// Independent RNG stream for clip `index` of a dataset seeded with `seed`.
pub fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:05}")
}

/// Scenarios for a class-balanced dataset: clip `i` gets class `i mod 6`.
pub fn dataset_scenarios(n_clips: usize, seed: u64, distractor_rate: f64) -> Result<Vec<Scenario>> {
    if n_clips == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one clip".into()));
    }
    if !(0.0..=1.0).contains(&distractor_rate) {
        return Err(Error::InvalidArgument(format!("distractor rate {distractor_rate} outside [0, 1]")));
    }
    Ok((0..n_clips)
        .map(|i| {
            let mut rng = clip_rng(seed, i);
            let distractor = distractor_rate > 0.0 && rng.random_bool(distractor_rate);
            let clip_seed = rng.random();
            let class = ActionClass::ALL[i % ActionClass::ALL.len()];
            sample_scenario(&clip_id(i), clip_seed, class, distractor, &mut rng)
        })
        .collect())
}

pub fn generate_dataset(n_clips: usize, seed: u64, distractor_rate: f64) -> Result<Vec<SynthClip>> {
    dataset_scenarios(n_clips, seed, distractor_rate)?.iter().map(generate).collect()
}

/// Writes one clip in the raw on-disk layout under `dir/clips/<id>/`.
pub fn write_clip(dir: &Path, clip: &SynthClip) -> Result<()> {
    let cdir = dir.join("clips").join(&clip.scenario.id);
    std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
    clip.log.write_csv(&cdir.join("sensors.csv"))?;
    write_frames(&cdir, &clip.frames)?;
    write_masks(&cdir.join("masks.csv"), &clip.masks)
}

/// Generates a dataset directory: `annotations.jsonl`, `scenarios.jsonl`
/// and `clips/<id>/{sensors.csv, frames.csv, frames/, masks.csv}`.
pub fn make_dataset(dir: &Path, n_clips: usize, seed: u64, distractor_rate: f64) -> Result<Vec<Scenario>> {
    let scenarios = dataset_scenarios(n_clips, seed, distractor_rate)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut annotations = Vec::with_capacity(n_clips);
    for s in &scenarios {
        let clip = generate(s)?;
        write_clip(dir, &clip)?;
        annotations.push(clip.annotation);
    }
    crate::bddx::write_annotations(&dir.join("annotations.jsonl"), &annotations)?;
    write_scenarios(&dir.join("scenarios.jsonl"), &scenarios)?;
    Ok(scenarios)
}

pub fn write_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<()> {
    let mut out = String::new();
    for s in scenarios {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// `frame,m0,…,m239` with 0/1 cells.
pub fn write_masks(path: &Path, masks: &[CausalMask]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let header: Vec<String> = std::iter::once("frame".into()).chain((0..REGIONS).map(|i| format!("m{i}"))).collect();
    writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
    for (k, m) in masks.iter().enumerate() {
        let row: String = m.cells.iter().map(|&c| if c { ",1" } else { ",0" }).collect();
        writeln!(f, "{k}{row}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_masks(path: &Path) -> Result<Vec<CausalMask>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let err = |m: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: m,
            };
            let cells = l
                .split(',')
                .skip(1)
                .map(|v| match v.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(err(format!("mask cell `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            CausalMask::from_cells(cells).map_err(|e| err(e.to_string()))
        })
        .collect()
}

/// Share of scenarios carrying a distractor.
pub fn distractor_rate(scenarios: &[Scenario]) -> f64 {
    if scenarios.is_empty() {
        return 0.0;
    }
    scenarios.iter().filter(|s| s.distractor.is_some()).count() as f64 / scenarios.len() as f64
}
