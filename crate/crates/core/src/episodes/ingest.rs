use std::sync::Arc;

use chrono::DateTime;

use super::resample::{grid_range, resample_10hz, ResampleMode};
use super::savgol::savgol_smooth;
use super::{Episode, FeatureGrid, LabelSet};
use crate::error::{Error, Result};
use crate::geometry::{world_to_body_deltas, GazePoint, Pose2, Rot6D};

const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// One GPS track point; `time` is seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsFix {
    pub time: f64,
    pub lat: f64,
    pub lon: f64,
}

fn line_of(doc: &roxmltree::Document<'_>, node: roxmltree::Node<'_, '_>) -> usize {
    doc.text_pos_at(node.range().start).row as usize
}

fn parse_timestamp(text: &str, line: usize) -> Result<f64> {
    let dt = DateTime::parse_from_rfc3339(text.trim()).map_err(|e| Error::Parse {
        line,
        msg: format!("bad timestamp `{}`: {e}", text.trim()),
    })?;
    Ok(dt.timestamp() as f64 + dt.timestamp_subsec_nanos() as f64 * 1e-9)
}

/// Parses the `trk/trkseg/trkpt` subset of GPX. Fixes must be chronological.
pub fn parse_gpx(text: &str) -> Result<Vec<GpsFix>> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::Parse {
        line: e.pos().row as usize,
        msg: e.to_string(),
    })?;
    let mut fixes: Vec<GpsFix> = Vec::new();
    for pt in doc.descendants().filter(|n| n.has_tag_name("trkpt")) {
        let line = line_of(&doc, pt);
        let coord = |name: &str| -> Result<f64> {
            let raw = pt.attribute(name).ok_or_else(|| Error::Parse {
                line,
                msg: format!("trkpt without `{name}`"),
            })?;
            raw.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad {name} `{raw}`"),
            })
        };
        let (lat, lon) = (coord("lat")?, coord("lon")?);
        let time_node = pt
            .children()
            .find(|c| c.has_tag_name("time"))
            .ok_or_else(|| Error::Parse {
                line,
                msg: "trkpt without <time>".into(),
            })?;
        let time = parse_timestamp(time_node.text().unwrap_or(""), line_of(&doc, time_node))?;
        if let Some(prev) = fixes.last() {
            if time <= prev.time {
                return Err(Error::Parse {
                    line,
                    msg: "track points out of chronological order".into(),
                });
            }
        }
        fixes.push(GpsFix { time, lat, lon });
    }
    Ok(fixes)
}

/// Equirectangular projection about the first fix; returns east/north meters.
pub fn gps_to_local_meters(fixes: &[GpsFix]) -> Vec<(f64, f64)> {
    let Some(first) = fixes.first() else {
        return Vec::new();
    };
    let cos0 = first.lat.to_radians().cos();
    fixes
        .iter()
        .map(|f| {
            (
                EARTH_RADIUS_M * (f.lon - first.lon).to_radians() * cos0,
                EARTH_RADIUS_M * (f.lat - first.lat).to_radians(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeImuRecord {
    pub time: f64,
    pub gaze: GazePoint,
    /// Values of [`GazeImuTable::imu_columns`], in order.
    pub imu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeImuTable {
    pub imu_columns: Vec<String>,
    pub records: Vec<GazeImuRecord>,
    /// Number of gaze coordinates clamped into [0, 1].
    pub clamped: usize,
}

impl GazeImuTable {
    pub fn imu_column(&self, name: &str) -> Option<usize> {
        self.imu_columns.iter().position(|c| c == name)
    }
}

const TIME_ALIASES: [&str; 4] = ["timestamp", "time", "t", "timestamp_s"];
const GAZE_U_ALIASES: [&str; 3] = ["gaze_u", "gaze_x", "u"];
const GAZE_V_ALIASES: [&str; 3] = ["gaze_v", "gaze_y", "v"];
const MAGNITUDE_ALIASES: [&str; 4] = ["magnitude", "value", "uncertainty", "U"];

fn find_column(headers: &csv::StringRecord, aliases: &[&str]) -> Result<usize> {
    aliases
        .iter()
        .find_map(|a| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(a)))
        .ok_or_else(|| Error::MissingColumn(aliases[0].to_string()))
}

fn field(rec: &csv::StringRecord, idx: usize, line: usize, name: &str) -> Result<f64> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        line,
        msg: format!("row has no `{name}` field"),
    })?;
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("`{name}`: cannot parse `{raw}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("`{name}` is not finite"),
        });
    }
    Ok(v)
}

fn check_time(prev: Option<f64>, t: f64, line: usize) -> Result<()> {
    match prev {
        Some(p) if t <= p => Err(Error::Parse {
            line,
            msg: format!("timestamp {t} does not increase (previous {p})"),
        }),
        _ => Ok(()),
    }
}

fn reader(text: &str, delimiter: u8) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

/// Parses a tab-separated gaze/IMU export. Every column other than the
/// timestamp and gaze coordinates is kept as a numeric IMU field.
pub fn parse_gaze_imu_tsv(text: &str) -> Result<GazeImuTable> {
    let mut r = reader(text, b'\t');
    let headers = r.headers()?.clone();
    let ti = find_column(&headers, &TIME_ALIASES)?;
    let ui = find_column(&headers, &GAZE_U_ALIASES)?;
    let vi = find_column(&headers, &GAZE_V_ALIASES)?;
    let imu_idx: Vec<usize> = (0..headers.len()).filter(|i| ![ti, ui, vi].contains(i)).collect();
    let mut table = GazeImuTable {
        imu_columns: imu_idx.iter().map(|&i| headers[i].to_string()).collect(),
        records: Vec::new(),
        clamped: 0,
    };
    for (row, rec) in r.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let time = field(&rec, ti, line, "timestamp")?;
        check_time(table.records.last().map(|r| r.time), time, line)?;
        let (gaze, clamped) = GazePoint::clamped(field(&rec, ui, line, "gaze_u")?, field(&rec, vi, line, "gaze_v")?);
        if clamped {
            table.clamped += 1;
        }
        let imu = imu_idx
            .iter()
            .map(|&i| field(&rec, i, line, &headers[i]))
            .collect::<Result<_>>()?;
        table.records.push(GazeImuRecord { time, gaze, imu });
    }
    if table.clamped > 0 {
        log::warn!("clamped {} gaze rows into [0, 1]", table.clamped);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JoystickSample {
    pub time: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoystickTable {
    pub samples: Vec<JoystickSample>,
    /// Number of magnitudes clamped into [0, 1].
    pub clamped: usize,
}

/// Parses a comma-separated joystick log of `(timestamp, magnitude)`.
pub fn parse_joystick_csv(text: &str) -> Result<JoystickTable> {
    let mut r = reader(text, b',');
    let headers = r.headers()?.clone();
    let ti = find_column(&headers, &TIME_ALIASES)?;
    let mi = find_column(&headers, &MAGNITUDE_ALIASES)?;
    let mut table = JoystickTable {
        samples: Vec::new(),
        clamped: 0,
    };
    for (row, rec) in r.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let time = field(&rec, ti, line, "timestamp")?;
        check_time(table.samples.last().map(|s| s.time), time, line)?;
        let raw = field(&rec, mi, line, "magnitude")?;
        let magnitude = raw.clamp(0.0, 1.0);
        if magnitude != raw {
            table.clamped += 1;
        }
        table.samples.push(JoystickSample { time, magnitude });
    }
    if table.clamped > 0 {
        log::warn!("clamped {} joystick samples into [0, 1]", table.clamped);
    }
    Ok(table)
}

/// Raw streams of one recording, all timestamps on a shared clock.
#[derive(Debug, Clone)]
pub struct RawRecording<'a> {
    pub id: String,
    pub gps: &'a [GpsFix],
    pub gaze_imu: &'a GazeImuTable,
    pub joystick: &'a JoystickTable,
    /// Current waypoint in local meters, one per 10 Hz step; `None` uses the
    /// final GPS position.
    pub goal_xy: Option<Vec<[f64; 2]>>,
    /// Per-step annotations; `None` means unlabeled.
    pub env: Option<Vec<LabelSet>>,
    pub behavior: Option<Vec<LabelSet>>,
    /// Cached visual features, one map per 10 Hz step.
    pub features: Option<FeatureGrid>,
    pub smoothing_window: usize,
    pub smoothing_order: usize,
}

/// Synchronizes parsed streams onto a common 10 Hz timeline.
///
/// GPS is projected to local meters, linearly resampled and SG-smoothed;
/// heading follows the smoothed displacement. Gaze and joystick use nearest
/// sampling. Head orientation comes from `qw qx qy qz` IMU columns when
/// present (body-relative), otherwise identity.
pub fn assemble_episode(raw: RawRecording<'_>) -> Result<Episode> {
    if raw.gps.len() < 2 || raw.gaze_imu.records.is_empty() || raw.joystick.samples.is_empty() {
        return Err(Error::EmptyStream);
    }
    let span = |first: f64, last: f64| (first, last);
    let spans = [
        span(raw.gps[0].time, raw.gps[raw.gps.len() - 1].time),
        span(raw.gaze_imu.records[0].time, raw.gaze_imu.records[raw.gaze_imu.records.len() - 1].time),
        span(raw.joystick.samples[0].time, raw.joystick.samples[raw.joystick.samples.len() - 1].time),
    ];
    let t0 = spans.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let t1 = spans.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let grid: Vec<f64> = grid_range(t0, t1).map(|k| k as f64 / 10.0).collect();
    // One extra leading pose anchors the first motion delta.
    if grid.len() < raw.smoothing_window.max(2) + 1 {
        return Err(Error::TooShort {
            needed: raw.smoothing_window.max(2) + 1,
            got: grid.len(),
        });
    }

    let sample_on_grid = |times: &[f64], values: &[f64], mode| -> Result<Vec<f64>> {
        let r = resample_10hz(times, values, mode)?;
        grid.iter()
            .map(|t| {
                let k = r
                    .times
                    .iter()
                    .position(|rt| (rt - t).abs() < 1e-9)
                    .ok_or(Error::EmptyStream)?;
                Ok(r.values[k])
            })
            .collect()
    };

    let local = gps_to_local_meters(raw.gps);
    let gps_t: Vec<f64> = raw.gps.iter().map(|f| f.time).collect();
    let xs = sample_on_grid(&gps_t, &local.iter().map(|p| p.0).collect::<Vec<_>>(), ResampleMode::Linear)?;
    let ys = sample_on_grid(&gps_t, &local.iter().map(|p| p.1).collect::<Vec<_>>(), ResampleMode::Linear)?;
    let xs = savgol_smooth(&xs, raw.smoothing_window, raw.smoothing_order)?;
    let ys = savgol_smooth(&ys, raw.smoothing_window, raw.smoothing_order)?;
    let n = grid.len();
    let mut headings = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
        let (dx, dy) = (xs[b] - xs[a], ys[b] - ys[a]);
        let h = if dx.hypot(dy) > 1e-3 {
            dy.atan2(dx)
        } else {
            headings.last().copied().unwrap_or(0.0)
        };
        headings.push(h);
    }
    let poses: Vec<Pose2> = (0..n).map(|i| Pose2::new(xs[i], ys[i], headings[i])).collect();
    let motion = world_to_body_deltas(&poses)?;
    let steps = n - 1;

    let gt: Vec<f64> = raw.gaze_imu.records.iter().map(|r| r.time).collect();
    let gu = sample_on_grid(&gt, &raw.gaze_imu.records.iter().map(|r| r.gaze.u).collect::<Vec<_>>(), ResampleMode::Nearest)?;
    let gv = sample_on_grid(&gt, &raw.gaze_imu.records.iter().map(|r| r.gaze.v).collect::<Vec<_>>(), ResampleMode::Nearest)?;
    let jt: Vec<f64> = raw.joystick.samples.iter().map(|s| s.time).collect();
    let uj = sample_on_grid(&jt, &raw.joystick.samples.iter().map(|s| s.magnitude).collect::<Vec<_>>(), ResampleMode::Nearest)?;

    let quat_cols: Option<Vec<usize>> = ["qw", "qx", "qy", "qz"]
        .iter()
        .map(|c| raw.gaze_imu.imu_column(c))
        .collect();
    let head: Vec<Rot6D> = match quat_cols {
        Some(cols) => {
            let comps = cols
                .iter()
                .map(|&c| {
                    let vals: Vec<f64> = raw.gaze_imu.records.iter().map(|r| r.imu[c]).collect();
                    sample_on_grid(&gt, &vals, ResampleMode::Nearest)
                })
                .collect::<Result<Vec<_>>>()?;
            (1..n)
                .map(|i| quat_to_rot6d(comps[0][i], comps[1][i], comps[2][i], comps[3][i]))
                .collect::<Result<_>>()?
        }
        None => vec![Rot6D::IDENTITY; steps],
    };

    let per_step = |v: Option<Vec<LabelSet>>| -> Result<Vec<LabelSet>> {
        match v {
            Some(v) if v.len() != steps => Err(Error::LengthMismatch {
                expected: steps,
                got: v.len(),
            }),
            Some(v) => Ok(v),
            None => Ok(vec![LabelSet::EMPTY; steps]),
        }
    };
    let goal_xy = match raw.goal_xy {
        Some(g) if g.len() != steps => {
            return Err(Error::LengthMismatch {
                expected: steps,
                got: g.len(),
            })
        }
        Some(g) => g,
        None => vec![[xs[n - 1], ys[n - 1]]; steps],
    };
    let features = match raw.features {
        Some(f) if f.steps() != steps => {
            return Err(Error::LengthMismatch {
                expected: steps,
                got: f.steps(),
            })
        }
        Some(f) => f,
        None => FeatureGrid::zeros(steps, 1, 1),
    };
    let ep = Episode {
        id: raw.id,
        origin: poses[0],
        times: grid[1..].to_vec(),
        motion,
        head,
        gaze: (1..n).map(|i| GazePoint { u: gu[i], v: gv[i] }).collect(),
        goal_xy,
        uncertainty: uj[1..].to_vec(),
        env: per_step(raw.env)?,
        behavior: per_step(raw.behavior)?,
        features: Arc::new(features),
    };
    ep.validate()?;
    Ok(ep)
}

fn quat_to_rot6d(w: f64, x: f64, y: f64, z: f64) -> Result<Rot6D> {
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    if norm < 1e-8 {
        return Err(Error::DegenerateInput("zero quaternion".into()));
    }
    let (w, x, y, z) = (w / norm, x / norm, y / norm, z / norm);
    // First two columns of the rotation matrix.
    Ok(Rot6D([
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y + w * z),
        2.0 * (x * z - w * y),
        2.0 * (x * y - w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z + w * x),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GPX: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<gpx version="1.1" creator="test" xmlns="http://www.topografix.com/GPX/1/1">
  <trk><name>walk</name><trkseg>
    <trkpt lat="47.3769" lon="8.5417"><time>2024-05-01T10:00:00Z</time></trkpt>
    <trkpt lat="47.37695" lon="8.54178"><time>2024-05-01T10:00:01.5Z</time></trkpt>
  </trkseg></trk>
</gpx>"#;

    #[test]
    fn two_point_gpx() {
        let fixes = parse_gpx(GPX).unwrap();
        assert_eq!(fixes.len(), 2);
        assert_eq!((fixes[0].lat, fixes[0].lon), (47.3769, 8.5417));
        assert_eq!((fixes[1].lat, fixes[1].lon), (47.37695, 8.54178));
        assert_eq!(fixes[1].time - fixes[0].time, 1.5);
    }

    #[test]
    fn empty_track() {
        let text = r#"<gpx version="1.1"><trk><trkseg></trkseg></trk></gpx>"#;
        assert!(parse_gpx(text).unwrap().is_empty());
    }

    #[test]
    fn out_of_order_gpx_reports_line() {
        let text = GPX.replace("10:00:01.5Z", "09:59:59Z");
        match parse_gpx(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_xml_is_parse_error() {
        assert!(matches!(parse_gpx("<gpx><trk>"), Err(Error::Parse { .. })));
    }

    #[test]
    fn projection_scales() {
        let fixes = [
            GpsFix { time: 0.0, lat: 0.0, lon: 0.0 },
            GpsFix { time: 1.0, lat: 0.001, lon: 0.001 },
        ];
        let p = gps_to_local_meters(&fixes);
        let m = EARTH_RADIUS_M * 0.001f64.to_radians();
        assert_eq!(p[0], (0.0, 0.0));
        assert!((p[1].0 - m).abs() < 1e-9 && (p[1].1 - m).abs() < 1e-9);
    }

    #[test]
    fn three_row_tsv() {
        let text = "timestamp\tgaze_u\tgaze_v\tacc_x\n0.0\t0.5\t0.4\t0.1\n0.1\t1.2\t0.3\t0.2\n0.2\t0.1\t-0.5\t0.3\n";
        let t = parse_gaze_imu_tsv(text).unwrap();
        assert_eq!(t.records.len(), 3);
        assert_eq!(t.imu_columns, vec!["acc_x"]);
        assert_eq!(t.records[1].gaze.u, 1.0);
        assert_eq!(t.records[2].gaze.v, 0.0);
        assert_eq!(t.records[2].imu, vec![0.3]);
        assert_eq!(t.clamped, 2);
    }

    #[test]
    fn tsv_missing_gaze_column() {
        let text = "timestamp\tgaze_u\n0.0\t0.5\n";
        assert!(matches!(parse_gaze_imu_tsv(text), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn tsv_bad_number_reports_line() {
        let text = "t\tu\tv\n0.0\t0.5\t0.5\n0.1\tabc\t0.5\n";
        assert!(matches!(parse_gaze_imu_tsv(text), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn joystick_values_and_clamping() {
        let t = parse_joystick_csv("timestamp,magnitude\n0,0.0\n0.1,0.5\n0.2,1.0\n").unwrap();
        let m: Vec<f64> = t.samples.iter().map(|s| s.magnitude).collect();
        assert_eq!(m, vec![0.0, 0.5, 1.0]);
        let t = parse_joystick_csv("timestamp,magnitude\n0,-0.1\n").unwrap();
        assert_eq!(t.samples[0].magnitude, 0.0);
        assert_eq!(t.clamped, 1);
        assert!(matches!(
            parse_joystick_csv("timestamp,magnitude\n0.2,0.1\n0.1,0.2\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn quaternion_identity_and_yaw() {
        assert_eq!(quat_to_rot6d(1.0, 0.0, 0.0, 0.0).unwrap(), Rot6D::IDENTITY);
        let a: f64 = 0.7;
        let r = quat_to_rot6d((a / 2.0).cos(), 0.0, 0.0, (a / 2.0).sin()).unwrap();
        let m = crate::geometry::rot6d_to_matrix(&r).unwrap();
        let expect = crate::geometry::RotMatrix::rz(a);
        assert!(crate::geometry::frobenius_distance(&m, &expect) < 1e-12);
    }

    #[test]
    fn assembles_straight_walk() {
        // Walk east at 1 m/s for 6 s; 1 Hz GPS, 30 Hz gaze, 20 Hz joystick.
        let m_per_deg = EARTH_RADIUS_M * 1f64.to_radians();
        let gps: Vec<GpsFix> = (0..7)
            .map(|i| GpsFix { time: 100.0 + i as f64, lat: 0.0, lon: i as f64 / m_per_deg })
            .collect();
        let gaze = GazeImuTable {
            imu_columns: vec![],
            records: (0..181)
                .map(|i| GazeImuRecord {
                    time: 100.0 + i as f64 / 30.0,
                    gaze: GazePoint { u: 0.5, v: 0.5 },
                    imu: vec![],
                })
                .collect(),
            clamped: 0,
        };
        let joy = JoystickTable {
            samples: (0..121)
                .map(|i| JoystickSample { time: 100.0 + i as f64 / 20.0, magnitude: 0.25 })
                .collect(),
            clamped: 0,
        };
        let ep = assemble_episode(RawRecording {
            id: "walk".into(),
            gps: &gps,
            gaze_imu: &gaze,
            joystick: &joy,
            goal_xy: None,
            env: None,
            behavior: None,
            features: None,
            smoothing_window: 15,
            smoothing_order: 3,
        })
        .unwrap();
        assert_eq!(ep.len(), 60);
        for d in &ep.motion {
            assert!((d.dx - 0.1).abs() < 1e-6 && d.dy.abs() < 1e-6 && d.dpsi.abs() < 1e-9);
        }
        assert!(ep.uncertainty.iter().all(|u| *u == 0.25));
    }
}
