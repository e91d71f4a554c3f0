use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coarse road-user class carried as a one-hot feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentClass {
    Vehicle,
    Vulnerable,
}

impl AgentClass {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "car" | "truck" | "van" | "bus" | "trailer" | "truck_bus" | "vehicle" => {
                Some(AgentClass::Vehicle)
            }
            "pedestrian" | "bicycle" | "motorcycle" | "bicyclist" | "vru" => Some(AgentClass::Vulnerable),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AgentClass::Vehicle => "vehicle",
            AgentClass::Vulnerable => "vru",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackPoint {
    pub track_id: i64,
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: i64,
    pub class: Option<AgentClass>,
    /// Consecutive frames, strictly increasing by one.
    pub points: Vec<TrackPoint>,
}

impl Track {
    pub fn first_frame(&self) -> i64 {
        self.points[0].frame
    }

    pub fn last_frame(&self) -> i64 {
        self.points[self.points.len() - 1].frame
    }

    pub fn at(&self, frame: i64) -> Option<&TrackPoint> {
        let i = frame.checked_sub(self.first_frame())?;
        usize::try_from(i).ok().and_then(|i| self.points.get(i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Validation(format!("track {} is empty", self.id)));
        }
        for w in self.points.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::Validation(format!(
                    "track {}: frame {} followed by {} (frames must increase by 1)",
                    self.id, w[0].frame, w[1].frame
                )));
            }
        }
        if let Some(p) = self.points.iter().find(|p| !(p.speed >= 0.0)) {
            return Err(Error::Validation(format!(
                "track {}: negative speed {} at frame {}",
                self.id, p.speed, p.frame
            )));
        }
        Ok(())
    }
}

fn col(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim() == name)
}

/// Reads a track CSV with header `track_id,frame,x,y[,heading,speed][,class]`.
///
/// Missing `heading`/`speed` columns are derived from position differences
/// assuming the 5 Hz frame rate.
pub fn load_tracks(csv_path: &Path) -> Result<Vec<Track>> {
    let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
    read_tracks(file, csv_path)
}

pub fn read_tracks(reader: impl std::io::Read, path: &Path) -> Result<Vec<Track>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let need =
        |name: &str| col(&headers, name).ok_or_else(|| parse_err(1, format!("missing column `{name}`")));
    let (c_id, c_frame, c_x, c_y) = (need("track_id")?, need("frame")?, need("x")?, need("y")?);
    let c_heading = col(&headers, "heading");
    let c_speed = col(&headers, "speed");
    let c_class = col(&headers, "class");
    let derive_kinematics = c_heading.is_none() || c_speed.is_none();

    let mut by_id: BTreeMap<i64, (Option<AgentClass>, Vec<TrackPoint>)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |c: usize| -> Result<&str> {
            rec.get(c)
                .ok_or_else(|| parse_err(line, format!("missing field {}", c + 1)))
        };
        let int = |c: usize, name: &str| -> Result<i64> {
            field(c)?
                .parse()
                .map_err(|_| parse_err(line, format!("invalid integer in `{name}`")))
        };
        let real = |c: usize, name: &str| -> Result<f64> {
            let v: f64 = field(c)?
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number in `{name}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite `{name}`")));
            }
            Ok(v)
        };
        let p = TrackPoint {
            track_id: int(c_id, "track_id")?,
            frame: int(c_frame, "frame")?,
            x: real(c_x, "x")?,
            y: real(c_y, "y")?,
            heading: c_heading.map(|c| real(c, "heading")).transpose()?.unwrap_or(0.0),
            speed: c_speed.map(|c| real(c, "speed")).transpose()?.unwrap_or(0.0),
        };
        let class = match c_class {
            Some(c) => {
                let raw = field(c)?;
                if raw.is_empty() {
                    None
                } else {
                    Some(
                        AgentClass::parse(raw)
                            .ok_or_else(|| parse_err(line, format!("unknown class `{raw}`")))?,
                    )
                }
            }
            None => None,
        };
        let entry = by_id.entry(p.track_id).or_insert((class, Vec::new()));
        if entry.0.is_none() {
            entry.0 = class;
        }
        entry.1.push(p);
    }

    let mut tracks = Vec::with_capacity(by_id.len());
    for (id, (class, mut points)) in by_id {
        points.sort_by_key(|p| p.frame);
        let mut t = Track { id, class, points };
        t.validate()?;
        if derive_kinematics {
            derive_heading_speed(&mut t, super::DT);
        }
        tracks.push(t);
    }
    Ok(tracks)
}

/// Fills heading and speed from position differences at `dt` seconds per frame.
pub fn derive_heading_speed(track: &mut Track, dt: f64) {
    let n = track.points.len();
    if n < 2 {
        return;
    }
    for i in 0..n {
        let (a, b) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
        let dx = track.points[b].x - track.points[a].x;
        let dy = track.points[b].y - track.points[a].y;
        track.points[i].heading = dy.atan2(dx);
        track.points[i].speed = (dx * dx + dy * dy).sqrt() / dt;
    }
}

/// Keeps every `every`-th frame (by frame index) and renumbers frames.
pub fn resample(tracks: &[Track], every: usize) -> Result<Vec<Track>> {
    if every == 0 {
        return Err(Error::Validation("resample step must be ≥ 1".into()));
    }
    let every = every as i64;
    let mut out = Vec::new();
    for t in tracks {
        let points: Vec<TrackPoint> = t
            .points
            .iter()
            .filter(|p| p.frame.rem_euclid(every) == 0)
            .map(|p| TrackPoint {
                frame: p.frame.div_euclid(every),
                ..*p
            })
            .collect();
        if !points.is_empty() {
            out.push(Track {
                id: t.id,
                class: t.class,
                points,
            });
        }
    }
    Ok(out)
}

/// Writes tracks in the loader's format with full `f64` round-trip precision.
pub fn write_tracks(tracks: &[Track], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    let with_class = tracks.iter().any(|t| t.class.is_some());
    buf.extend_from_slice(b"track_id,frame,x,y,heading,speed");
    if with_class {
        buf.extend_from_slice(b",class");
    }
    buf.push(b'\n');
    for t in tracks {
        for p in &t.points {
            write!(
                buf,
                "{},{},{:?},{:?},{:?},{:?}",
                p.track_id, p.frame, p.x, p.y, p.heading, p.speed
            )
            .expect("write to vec");
            if with_class {
                write!(buf, ",{}", t.class.map(|c| c.as_str()).unwrap_or("")).expect("write to vec");
            }
            buf.push(b'\n');
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<Track>> {
        read_tracks(s.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn two_rows_one_track() {
        let t =
            parse("track_id,frame,x,y,heading,speed\n1,0,0.5,1.5,0.0,2.0\n1,1,0.9,1.5,0.0,2.0\n").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].points.len(), 2);
        assert_eq!(t[0].points[1].x, 0.9);
    }

    #[test]
    fn frame_gap_is_validation_error() {
        let err = parse("track_id,frame,x,y,heading,speed\n1,3,0,0,0,1\n1,5,0,0,0,1\n").unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("track_id,frame,x,y,heading,speed\n1,0,0,0,0,1\n1,1,abc,0,0,1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_required_column() {
        assert!(matches!(
            parse("track_id,frame,x\n1,0,0\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn class_column_and_derived_kinematics() {
        let t = parse("track_id,frame,x,y,class\n4,0,0,0,car\n4,1,3,4,car\n").unwrap();
        assert_eq!(t[0].class, Some(AgentClass::Vehicle));
        assert!((t[0].points[0].speed - 5.0 / super::super::DT).abs() < 1e-9);
        assert!(matches!(
            parse("track_id,frame,x,y,class\n4,0,0,0,spaceship\n"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn resample_by_striding() {
        let csv = (0..10)
            .map(|f| format!("1,{f},{},0,0,1\n", f as f64))
            .collect::<String>();
        let t = parse(&format!("track_id,frame,x,y,heading,speed\n{csv}")).unwrap();
        let r = resample(&t, 5).unwrap();
        assert_eq!(r[0].points.len(), 2);
        assert_eq!(r[0].points[1].frame, 1);
        assert_eq!(r[0].points[1].x, 5.0);
    }
}
