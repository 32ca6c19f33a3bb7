//! Whitespace-separated trajectory tables.
//!
//! Canonical rows are `frame id class x y`; the classic pedestrian format is
//! `frame id x y`. Lines starting with `#` and blank lines are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{AgentClass, AgentId, AgentNode, Scene};

/// Largest run of missing frames that is filled by linear interpolation;
/// longer gaps split the track.
pub const MAX_INTERPOLATED_GAP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextFormat {
    /// `frame id class x y`
    Canonical,
    /// `frame id x y`, every agent a pedestrian.
    Classic,
    /// Decided per file from the column count of the first data row.
    Auto,
}

impl FromStr for TextFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canonical" => Ok(TextFormat::Canonical),
            "classic" => Ok(TextFormat::Classic),
            "auto" => Ok(TextFormat::Auto),
            _ => Err(Error::InvalidInput(format!("unknown trajectory format `{s}`"))),
        }
    }
}

struct Row {
    line: usize,
    frame: i64,
    id: String,
    class: AgentClass,
    pos: [f64; 2],
}

fn parse_frame(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f = s.parse::<f64>().ok()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 1e15).then_some(f as i64)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

pub fn load_trajectory_text(path: &Path, format: TextFormat, dt: f64) -> Result<Scene> {
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_trajectory_text(&text, format, dt, &name, path)
}

pub fn parse_trajectory_text(text: &str, format: TextFormat, dt: f64, name: &str, path: &Path) -> Result<Scene> {
    let err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };
    let mut format = format;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split_whitespace().collect();
        if format == TextFormat::Auto {
            format = match cols.len() {
                4 => TextFormat::Classic,
                5 => TextFormat::Canonical,
                n => return Err(err(line, format!("cannot infer format from {n} columns"))),
            };
        }
        let want = if format == TextFormat::Classic { 4 } else { 5 };
        if cols.len() != want {
            return Err(err(line, format!("expected {want} columns, found {}", cols.len())));
        }
        let frame = parse_frame(cols[0]).ok_or_else(|| err(line, format!("bad frame `{}`", cols[0])))?;
        let (class, xi) = if format == TextFormat::Classic {
            (AgentClass::Pedestrian, 2)
        } else {
            (cols[2].parse().map_err(|e: Error| err(line, e.to_string()))?, 3)
        };
        let coord = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(line, format!("bad coordinate `{s}`")))
        };
        rows.push(Row {
            line,
            frame,
            id: cols[1].to_string(),
            class,
            pos: [coord(cols[xi])?, coord(cols[xi + 1])?],
        });
    }

    let mut frames: Vec<i64> = rows.iter().map(|r| r.frame).collect();
    frames.sort_unstable();
    frames.dedup();
    let step = frames.windows(2).fold(0, |g, w| gcd(g, w[1] - w[0])).max(1);
    let first = frames.first().copied().unwrap_or(0);

    // group by id in first-appearance order, checking monotone frames
    let mut order: Vec<String> = Vec::new();
    let mut tracks: BTreeMap<String, Vec<(usize, [f64; 2], AgentClass, usize)>> = BTreeMap::new();
    for r in &rows {
        let t = ((r.frame - first) / step) as usize;
        let track = tracks.entry(r.id.clone()).or_insert_with(|| {
            order.push(r.id.clone());
            Vec::new()
        });
        if let Some(&(prev_t, _, prev_class, _)) = track.last() {
            if t <= prev_t {
                return Err(err(r.line, format!("frames for id `{}` are not increasing", r.id)));
            }
            if prev_class != r.class {
                return Err(err(r.line, format!("id `{}` changes class", r.id)));
            }
        }
        track.push((t, r.pos, r.class, r.line));
    }

    let mut agents = Vec::new();
    for id in order {
        let track = &tracks[&id];
        let class = track[0].2;
        let mut pieces: Vec<(usize, Vec<[f64; 2]>)> = vec![(track[0].0, vec![track[0].1])];
        for w in track.windows(2) {
            let (t0, p0, ..) = w[0];
            let (t1, p1, ..) = w[1];
            let missing = t1 - t0 - 1;
            let piece = pieces.last_mut().expect("nonempty");
            if missing == 0 {
                piece.1.push(p1);
            } else if missing <= MAX_INTERPOLATED_GAP {
                for k in 1..=missing + 1 {
                    let a = k as f64 / (missing + 1) as f64;
                    piece.1.push([p0[0] + a * (p1[0] - p0[0]), p0[1] + a * (p1[1] - p0[1])]);
                }
            } else {
                pieces.push((t1, vec![p1]));
            }
        }
        let n = pieces.len();
        for (k, (start, positions)) in pieces.into_iter().enumerate() {
            let agent_id = if n == 1 { id.clone() } else { format!("{id}#{k}") };
            agents.push(AgentNode::new(AgentId(agent_id), class, start, positions, dt)?);
        }
    }
    Scene::new(name, dt, agents)
}

/// Canonical-format text with one row per agent per timestep.
pub fn format_trajectory_text(scene: &Scene) -> String {
    let mut rows: Vec<(usize, usize, String)> = Vec::new();
    for (k, a) in scene.agents.iter().enumerate() {
        for (i, p) in a.positions.iter().enumerate() {
            rows.push((
                a.first_timestep + i,
                k,
                format!("{} {} {} {}", a.id, a.class, p[0], p[1]),
            ));
        }
    }
    rows.sort_by_key(|r| (r.0, r.1));
    let mut out = String::new();
    for (t, _, rest) in rows {
        let _ = writeln!(out, "{t} {rest}");
    }
    out
}

pub fn write_trajectory_text(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, format_trajectory_text(scene))?;
    Ok(())
}
