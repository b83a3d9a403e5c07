//! Readers for the two text track formats and the synthetic writer.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{box_centroid, AgentTrack, CoordKind, DatasetSpec, Format};
use crate::error::{Error, Result};

struct Row {
    frame: i64,
    agent: u64,
    state: Vec<f64>,
    aux: Vec<f64>,
}

fn scene_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into())
}

fn parse_num(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("{} '{}' is not a number", what, field.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            msg: format!("{} is not finite", what),
        });
    }
    Ok(v)
}

fn parse_int(field: &str, line: usize, what: &str) -> Result<f64> {
    let v = parse_num(field, line, what)?;
    if v.fract() != 0.0 {
        return Err(Error::Parse {
            line,
            msg: format!("{} '{}' is not an integer", what, field.trim()),
        });
    }
    Ok(v)
}

/// Most frequent positive frame gap between consecutive observations of the
/// same agent; the smallest gap wins ties.
fn infer_stride(by_agent: &BTreeMap<u64, Vec<Row>>) -> i64 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for rows in by_agent.values() {
        for pair in rows.windows(2) {
            let d = pair[1].frame - pair[0].frame;
            if d > 0 {
                *counts.entry(d).or_default() += 1;
            }
        }
    }
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&d, _)| d)
        .unwrap_or(1)
}

/// Groups rows by agent, sorts by frame and splits at every gap that differs
/// from the stride.
fn assemble(rows: Vec<Row>, scene: &str, fps: f64, stride: Option<i64>) -> Result<Vec<AgentTrack>> {
    let mut by_agent: BTreeMap<u64, Vec<Row>> = BTreeMap::new();
    for r in rows {
        by_agent.entry(r.agent).or_default().push(r);
    }
    for rows in by_agent.values_mut() {
        rows.sort_by_key(|r| r.frame);
        if let Some(pair) = rows.windows(2).find(|p| p[0].frame == p[1].frame) {
            return Err(Error::Validation(format!(
                "agent {} has two observations at frame {}",
                pair[0].agent, pair[0].frame
            )));
        }
    }
    let stride = stride.unwrap_or_else(|| infer_stride(&by_agent));
    let mut tracks = Vec::new();
    for (agent, rows) in by_agent {
        let mut current: Option<AgentTrack> = None;
        for r in rows {
            let continues = current
                .as_ref()
                .is_some_and(|t| t.frame(t.len() - 1) + stride == r.frame);
            if !continues {
                tracks.extend(current.take());
                current = Some(AgentTrack {
                    scene: scene.to_string(),
                    agent,
                    start_frame: r.frame,
                    stride,
                    fps,
                    states: Vec::new(),
                    aux: Vec::new(),
                });
            }
            let t = current.as_mut().expect("set above");
            t.states.push(r.state);
            if !r.aux.is_empty() {
                t.aux.push(r.aux);
            }
        }
        tracks.extend(current);
    }
    Ok(tracks)
}

/// Parses whitespace-separated `frame agent_id x y` rows. Blank lines and
/// lines starting with `#` are skipped.
pub fn parse_bev_text(text: &str, scene: &str, fps: f64, stride: Option<i64>) -> Result<Vec<AgentTrack>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 fields 'frame agent_id x y', found {}", f.len()),
            });
        }
        let agent = parse_int(f[1], line, "agent id")?;
        if agent < 0.0 {
            return Err(Error::Parse {
                line,
                msg: "agent id is negative".into(),
            });
        }
        rows.push(Row {
            frame: parse_int(f[0], line, "frame")? as i64,
            agent: agent as u64,
            state: vec![parse_num(f[2], line, "x")?, parse_num(f[3], line, "y")?],
            aux: Vec::new(),
        });
    }
    assemble(rows, scene, fps, stride)
}

pub fn load_bev_text(path: &Path, fps: f64, stride: Option<i64>) -> Result<Vec<AgentTrack>> {
    let text = fs::read_to_string(path)?;
    parse_bev_text(&text, &scene_name(path), fps, stride)
}

const BBOX_HEADER: [&str; 6] = ["frame", "agent_id", "x1", "y1", "x2", "y2"];

/// Parses comma-separated boxes with header `frame,agent_id,x1,y1,x2,y2`
/// followed by optional auxiliary columns. Returns the tracks and the
/// auxiliary column names.
pub fn parse_bbox_csv(text: &str, scene: &str, fps: f64, stride: Option<i64>) -> Result<(Vec<AgentTrack>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 6 || header[..6] != BBOX_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must start with {}", BBOX_HEADER.join(",")),
        });
    }
    let aux_names = header[6..].to_vec();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let f: Vec<&str> = rec.iter().collect();
        let agent = parse_int(f[1], line, "agent id")?;
        let b: Vec<f64> = (2..6)
            .map(|c| parse_num(f[c], line, BBOX_HEADER[c]))
            .collect::<Result<_>>()?;
        if b[2] < b[0] || b[3] < b[1] {
            return Err(Error::Validation(format!(
                "line {}: box ({}, {}, {}, {}) has x2 < x1 or y2 < y1",
                line, b[0], b[1], b[2], b[3]
            )));
        }
        let aux = (6..f.len())
            .map(|c| parse_num(f[c], line, &header[c]))
            .collect::<Result<_>>()?;
        rows.push(Row {
            frame: parse_int(f[0], line, "frame")? as i64,
            agent: agent.max(0.0) as u64,
            state: b,
            aux,
        });
    }
    Ok((assemble(rows, scene, fps, stride)?, aux_names))
}

pub fn load_bbox_csv(path: &Path, fps: f64, stride: Option<i64>) -> Result<Vec<AgentTrack>> {
    let text = fs::read_to_string(path)?;
    Ok(parse_bbox_csv(&text, &scene_name(path), fps, stride)?.0)
}

/// Loads every file in parallel; tracks are merged in lexicographic path
/// order. Directories contribute their regular files.
/// Box files loaded with centroid coordinates are reduced to box centres.
pub fn load_paths(paths: &[PathBuf], spec: &DatasetSpec) -> Result<Vec<AgentTrack>> {
    if spec.format == Format::BevText && spec.coords == CoordKind::Box {
        return Err(Error::Config("bev-text rows hold centroids; data.coords must be centroid".into()));
    }
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            for entry in fs::read_dir(p)? {
                let e = entry?.path();
                if e.is_file() {
                    files.push(e);
                }
            }
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("data path {} does not exist", p.display()),
            )));
        }
    }
    files.sort();
    let loaded: Vec<Result<Vec<AgentTrack>>> = files
        .par_iter()
        .map(|f| match spec.format {
            Format::BevText => load_bev_text(f, spec.fps, spec.stride),
            Format::BboxCsv => load_bbox_csv(f, spec.fps, spec.stride),
            Format::Synthetic => Err(Error::Config("synthetic data is generated, not loaded".into())),
        })
        .collect();
    let mut out = Vec::new();
    for r in loaded {
        out.extend(r?);
    }
    if spec.format == Format::BboxCsv && spec.coords == CoordKind::Centroid {
        for t in &mut out {
            for s in &mut t.states {
                *s = box_centroid(s).to_vec();
            }
        }
    }
    Ok(out)
}

/// Writes centroid tracks as `frame agent_id x y` rows ordered by frame,
/// then agent.
pub fn write_bev_text<W: Write>(tracks: &[AgentTrack], mut out: W) -> Result<()> {
    let mut rows: Vec<(i64, u64, f64, f64)> = Vec::new();
    for t in tracks {
        for (i, s) in t.states.iter().enumerate() {
            if s.len() != 2 {
                return Err(Error::Contract("bev-text holds centroid tracks only".into()));
            }
            rows.push((t.frame(i), t.agent, s[0], s[1]));
        }
    }
    rows.sort_by_key(|a| (a.0, a.1));
    for (f, a, x, y) in rows {
        writeln!(out, "{} {} {} {}", f, a, x, y)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consecutive_rows_form_one_track() {
        let t = parse_bev_text("0 1 0.0 0.0\n10 1 1.0 0.0\n20 1 2.0 0\n30 1 3 0\n", "s", 2.5, None).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 4);
        assert_eq!(t[0].stride, 10);
        assert_eq!(t[0].states[3], vec![3.0, 0.0]);
    }

    #[test]
    fn gap_splits_track() {
        let t = parse_bev_text("0 1 0 0\n1 1 1 0\n2 1 2 0\n5 1 5 0\n6 1 6 0\n", "s", 1.0, None).unwrap();
        assert_eq!(t.iter().map(|t| t.len()).collect::<Vec<_>>(), vec![3, 2]);
        assert_eq!(t[1].start_frame, 5);
    }

    #[test]
    fn rows_are_sorted_per_agent() {
        let t = parse_bev_text("2 7 2 0\n0 7 0 0\n1 7 1 0\n", "s", 1.0, Some(1)).unwrap();
        assert_eq!(t[0].states, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]);
    }

    #[test]
    fn malformed_rows_report_line() {
        let e = parse_bev_text("0 1 0 0\n\n1 1 x 0\n", "s", 1.0, None).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{:?}", e);
        assert!(matches!(parse_bev_text("0 1 0\n", "s", 1.0, None), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_bev_text("0.5 1 0 0\n", "s", 1.0, None), Err(Error::Parse { .. })));
        assert!(matches!(parse_bev_text("0 1 0 0\n0 1 1 1\n", "s", 1.0, None), Err(Error::Validation(_))));
    }

    #[test]
    fn bbox_rows_and_aux_columns() {
        let text = "frame,agent_id,x1,y1,x2,y2,flow_u,flow_v\n0,1,0,0,10,20,0.5,0.1\n1,1,1,1,11,21,0.4,0.2\n";
        let (t, aux) = parse_bbox_csv(text, "v", 30.0, None).unwrap();
        assert_eq!(aux, vec!["flow_u", "flow_v"]);
        assert_eq!(t[0].states[1], vec![1.0, 1.0, 11.0, 21.0]);
        assert_eq!(t[0].aux[1], vec![0.4, 0.2]);
        let bad = "frame,agent_id,x1,y1,x2,y2\n0,1,5,0,4,2\n";
        assert!(matches!(parse_bbox_csv(bad, "v", 30.0, None), Err(Error::Validation(_))));
        assert!(matches!(parse_bbox_csv("f,a,x1,y1,x2,y2\n", "v", 30.0, None), Err(Error::Parse { line: 1, .. })));
        let short = "frame,agent_id,x1,y1,x2,y2\n0,1,5,0\n";
        assert!(matches!(parse_bbox_csv(short, "v", 30.0, None), Err(Error::Parse { .. })));
    }

    #[test]
    fn bev_export_round_trips() {
        let text = "0 1 0.25 -1\n0 2 3 4\n1 1 0.5 -1\n1 2 3.5 4\n";
        let t = parse_bev_text(text, "s", 1.0, None).unwrap();
        let mut out = Vec::new();
        write_bev_text(&t, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
