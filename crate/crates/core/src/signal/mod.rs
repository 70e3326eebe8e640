//! Sensor-log preparation: resampling, control-target derivation and frame
//! normalization.

pub mod frames;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use frames::{preprocess_frame, resize_nearest, FrameStack, PixelStats, RgbImage, FRAME_HEIGHT, FRAME_WIDTH};

/// Target sample rate for every model input.
pub const SAMPLE_RATE_HZ: f64 = 10.0;

/// Smoothing factor for the course baseline.
pub const COURSE_SMOOTHING: f64 = 0.01;

/// One row of a sensor log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSample {
    #[serde(rename = "timestamp_s")]
    pub t: f64,
    #[serde(rename = "speed_mps")]
    pub speed: f64,
    #[serde(rename = "course_deg")]
    pub course: f64,
    pub lat: f64,
    pub lon: f64,
}

/// Time-ordered sensor measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorLog {
    samples: Vec<SensorSample>,
}

impl SensorLog {
    /// Validates ordering and ranges: strictly increasing time, speed >= 0, course in [0, 360).
    pub fn new(samples: Vec<SensorSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if ![s.t, s.speed, s.course, s.lat, s.lon].iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!("sample {i}: non-finite value")));
            }
            if s.speed < 0.0 {
                return Err(Error::InvalidArgument(format!("sample {i}: negative speed {}", s.speed)));
            }
            if !(0.0..360.0).contains(&s.course) {
                return Err(Error::InvalidArgument(format!("sample {i}: course {} outside [0, 360)", s.course)));
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(Error::InvalidArgument(format!("sample {i}: timestamps not strictly increasing")));
            }
        }
        Ok(SensorLog { samples })
    }

    pub fn samples(&self) -> &[SensorSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.speed).collect()
    }

    pub fn courses(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.course).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// Sample spacing of a uniformly sampled log.
    pub fn uniform_step(&self) -> Result<f64> {
        if self.samples.len() < 2 {
            return Err(Error::InsufficientData(format!("{} sample(s); need at least 2", self.samples.len())));
        }
        let n = self.samples.len();
        let dt = (self.samples[n - 1].t - self.samples[0].t) / (n - 1) as f64;
        let uniform = self
            .samples
            .windows(2)
            .all(|w| ((w[1].t - w[0].t) - dt).abs() <= 1e-6 * dt.max(1.0));
        if !uniform {
            return Err(Error::InvalidArgument("log is not uniformly sampled; resample first".into()));
        }
        Ok(dt)
    }

    /// Reads the `timestamp_s,speed_mps,course_deg,lat,lon` CSV format.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        let expected = ["timestamp_s", "speed_mps", "course_deg", "lat", "lon"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("expected header `{}`", expected.join(",")),
            });
        }
        let mut samples = Vec::new();
        for (i, row) in rdr.deserialize().enumerate() {
            let s: SensorSample = row.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                message: e.to_string(),
            })?;
            samples.push(s);
        }
        Self::new(samples)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for s in &self.samples {
            w.serialize(s).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    }
}

/// Wraps an angle difference to `[-180, 180)` degrees.
pub fn wrap_degrees(d: f64) -> f64 {
    (d + 180.0).rem_euclid(360.0) - 180.0
}

fn normalize_course(d: f64) -> f64 {
    let r = d.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Resamples onto a uniform grid from the first to the last timestamp.
/// Speed and position are interpolated linearly; course along the shorter arc.
pub fn resample(log: &SensorLog, rate_hz: f64) -> Result<SensorLog> {
    let s = log.samples();
    if s.len() < 2 {
        return Err(Error::InsufficientData(format!("{} sample(s); need at least 2", s.len())));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::InvalidArgument(format!("rate {rate_hz} Hz")));
    }
    let (t0, t1) = (s[0].t, s[s.len() - 1].t);
    let steps = ((t1 - t0) * rate_hz + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut j = 0;
    for k in 0..=steps {
        let t = t0 + k as f64 / rate_hz;
        while j + 2 < s.len() && s[j + 1].t < t {
            j += 1;
        }
        let (a, b) = (&s[j], &s[j + 1]);
        let u = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let lerp = |x: f64, y: f64| x + (y - x) * u;
        out.push(SensorSample {
            t,
            speed: lerp(a.speed, b.speed).max(0.0),
            course: normalize_course(a.course + wrap_degrees(b.course - a.course) * u),
            lat: lerp(a.lat, b.lat),
            lon: lerp(a.lon, b.lon),
        });
    }
    SensorLog::new(out)
}

/// Acceleration by central differences, one-sided at the ends.
pub fn derive_accel(log: &SensorLog) -> Result<Vec<f64>> {
    let dt = log.uniform_step()?;
    Ok(differentiate(&log.speeds(), dt))
}

pub(crate) fn differentiate(v: &[f64], dt: f64) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| match i {
            0 => (v[1] - v[0]) / dt,
            _ if i == n - 1 => (v[n - 1] - v[n - 2]) / dt,
            _ => (v[i + 1] - v[i - 1]) / (2.0 * dt),
        })
        .collect()
}

/// Change of course: the current course minus its exponentially smoothed
/// baseline, wrapped to `[-180, 180)`.
pub fn derive_course_change(log: &SensorLog, alpha_s: f64) -> Result<Vec<f64>> {
    if log.is_empty() {
        return Err(Error::InsufficientData("empty log".into()));
    }
    course_change(&log.courses(), alpha_s)
}

/// [`derive_course_change`] over a raw course series (any degree offset).
pub fn course_change(courses: &[f64], alpha_s: f64) -> Result<Vec<f64>> {
    if courses.is_empty() {
        return Err(Error::InsufficientData("empty course series".into()));
    }
    if !(0.0..=1.0).contains(&alpha_s) {
        return Err(Error::InvalidArgument(format!("smoothing factor {alpha_s} outside [0, 1]")));
    }
    let mut baseline = courses[0];
    Ok(courses
        .iter()
        .map(|&r| {
            baseline += alpha_s * wrap_degrees(r - baseline);
            wrap_degrees(r - baseline)
        })
        .collect())
}

/// Regression target and prior inputs for one 10 Hz step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    pub t: f64,
    pub accel: f64,
    pub course_change: f64,
    pub prior_speed: f64,
    pub prior_course: f64,
}

/// Resamples to 10 Hz and derives acceleration and change of course.
pub fn control_samples(log: &SensorLog, alpha_s: f64) -> Result<Vec<ControlSample>> {
    let uniform = resample(log, SAMPLE_RATE_HZ)?;
    controls_from_uniform(&uniform, alpha_s)
}

/// Control samples for a log that is already uniformly sampled.
pub fn controls_from_uniform(log: &SensorLog, alpha_s: f64) -> Result<Vec<ControlSample>> {
    let accel = derive_accel(log)?;
    let cc = derive_course_change(log, alpha_s)?;
    Ok(log
        .samples()
        .iter()
        .zip(accel.iter().zip(&cc))
        .map(|(s, (&a, &c))| ControlSample {
            t: s.t,
            accel: a,
            course_change: c,
            prior_speed: s.speed,
            prior_course: s.course,
        })
        .collect())
}

pub fn read_controls_csv(path: &Path) -> Result<Vec<ControlSample>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_controls_csv(path: &Path, samples: &[ControlSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for s in samples {
        w.serialize(s).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(points: &[(f64, f64, f64)]) -> SensorLog {
        SensorLog::new(
            points
                .iter()
                .map(|&(t, speed, course)| SensorSample {
                    t,
                    speed,
                    course,
                    lat: 0.0,
                    lon: 0.0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn log_invariants_are_checked() {
        let s = |t, speed, course| SensorSample {
            t,
            speed,
            course,
            lat: 0.0,
            lon: 0.0,
        };
        assert!(SensorLog::new(vec![s(0.0, 1.0, 0.0), s(0.0, 1.0, 0.0)]).is_err());
        assert!(SensorLog::new(vec![s(0.0, -1.0, 0.0)]).is_err());
        assert!(SensorLog::new(vec![s(0.0, 1.0, 360.0)]).is_err());
    }

    #[test]
    fn resample_linear_speed() {
        let r = resample(&log(&[(0.0, 0.0, 0.0), (1.0, 10.0, 0.0)]), 10.0).unwrap();
        assert_eq!(r.len(), 11);
        for (k, s) in r.samples().iter().enumerate() {
            assert!((s.speed - k as f64).abs() < 1e-12, "{k}: {}", s.speed);
        }
    }

    #[test]
    fn resample_course_takes_short_arc() {
        let r = resample(&log(&[(0.0, 5.0, 350.0), (1.0, 5.0, 10.0)]), 2.0).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.samples()[1].course.abs() < 1e-9);
        assert!((r.samples()[2].course - 10.0).abs() < 1e-9);
    }

    #[test]
    fn resample_three_points_by_hand() {
        // (0, 0), (0.2, 4), (0.5, 1): at 10 Hz -> 0, 2, 4, 3, 2, 1
        let r = resample(&log(&[(0.0, 0.0, 10.0), (0.2, 4.0, 20.0), (0.5, 1.0, 50.0)]), 10.0).unwrap();
        let want = [0.0, 2.0, 4.0, 3.0, 2.0, 1.0];
        let course = [10.0, 15.0, 20.0, 30.0, 40.0, 50.0];
        assert_eq!(r.len(), 6);
        for (i, s) in r.samples().iter().enumerate() {
            assert!((s.speed - want[i]).abs() < 1e-9, "{i}");
            assert!((s.course - course[i]).abs() < 1e-9, "{i}");
        }
    }

    #[test]
    fn resample_needs_two_samples() {
        assert!(matches!(resample(&log(&[(0.0, 1.0, 0.0)]), 10.0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn accel_of_constant_and_linear_speed() {
        let pts: Vec<_> = (0..10).map(|k| (k as f64 * 0.1, 7.0, 0.0)).collect();
        assert!(derive_accel(&log(&pts)).unwrap().iter().all(|a| a.abs() < 1e-12));
        let pts: Vec<_> = (0..10).map(|k| (k as f64 * 0.1, 2.0 * k as f64 * 0.1, 0.0)).collect();
        assert!(derive_accel(&log(&pts)).unwrap().iter().all(|a| (a - 2.0).abs() < 1e-9));
    }

    #[test]
    fn accel_hand_differences() {
        let v = [3.0, 3.5, 4.5, 4.0, 6.0, 6.0, 5.0, 2.0, 2.5, 3.0];
        let pts: Vec<_> = v.iter().enumerate().map(|(k, &s)| (k as f64 * 0.1, s, 0.0)).collect();
        let a = derive_accel(&log(&pts)).unwrap();
        let want = [5.0, 7.5, 2.5, 7.5, 10.0, -5.0, -20.0, -12.5, 5.0, 5.0];
        for (x, y) in a.iter().zip(want) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        assert!(derive_accel(&log(&pts[..1])).is_err());
    }

    #[test]
    fn course_change_constant_and_unit_alpha() {
        assert!(course_change(&[123.0; 8], 0.01).unwrap().iter().all(|c| *c == 0.0));
        let r = [0.0, 10.0, 40.0, 350.0, 5.0];
        assert!(course_change(&r, 1.0).unwrap().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn course_change_step_recursion() {
        // r_bar_t = a r_t + (1 - a) r_bar_{t-1}, evaluated independently.
        let r = [0.0, 0.0, 0.0, 0.0, 0.0, 90.0, 90.0, 90.0, 90.0, 90.0];
        let want = [0.0, 0.0, 0.0, 0.0, 0.0, 89.1, 88.209, 87.32691, 86.4536409, 85.589104491];
        for (c, w) in course_change(&r, 0.01).unwrap().iter().zip(want) {
            assert!((c - w).abs() < 1e-12, "{c} vs {w}");
        }
    }

    #[test]
    fn course_change_wraps_across_north() {
        let c = course_change(&[350.0, 10.0], 0.0).unwrap();
        assert!((c[1] - 20.0).abs() < 1e-12);
        assert!(c.iter().all(|v| v.abs() <= 180.0));
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_degrees(190.0), -170.0);
        assert_eq!(wrap_degrees(-190.0), 170.0);
        assert_eq!(wrap_degrees(180.0), -180.0);
    }
}
