//! On-disk scene format: line-delimited records, one scene per line.
//!
//! Record schema:
//! `{version, scene_id, agents: [{agent_id, type, states: [[x,y,ts,valid],..]}],
//!   roads: [{lane_id, start, end, length, turn, intersection, succ_ids}],
//!   target_index, future: [[x,y],..] | null}`
//!
//! Floats are written with 17 significant digits so every `f64` round-trips
//! bit-exactly.

use super::{AgentHistory, AgentKind, AgentState, RoadVector, Scene, SceneError, TurnDirection};
use serde::Deserialize;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

fn scene_to_line(scene: &Scene) -> Result<String, SceneError> {
    let mut s = String::with_capacity(4096);
    let f = |v: f64| -> Result<String, SceneError> {
        if !v.is_finite() {
            return Err(SceneError::Invalid(format!(
                "non-finite value {v} in scene {}",
                scene.scene_id
            )));
        }
        Ok(fmt_f64(v))
    };
    let _ = write!(
        s,
        "{{\"version\":{FORMAT_VERSION},\"scene_id\":\"{}\",\"agents\":[",
        escape(&scene.scene_id)
    );
    for (i, a) in scene.agents.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(
            s,
            "{{\"agent_id\":\"{}\",\"type\":{},\"states\":[",
            escape(&a.agent_id),
            a.kind.index()
        );
        for (j, st) in a.states.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(
                s,
                "[{},{},{},{}]",
                f(st.x)?,
                f(st.y)?,
                f(st.t)?,
                u8::from(st.valid)
            );
        }
        s.push_str("]}");
    }
    s.push_str("],\"roads\":[");
    for (i, r) in scene.roads.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(
            s,
            "{{\"lane_id\":\"{}\",\"start\":[{},{}],\"end\":[{},{}],\"length\":{},\"turn\":{},\"intersection\":{},\"succ_ids\":[",
            escape(&r.lane_id),
            f(r.start[0])?,
            f(r.start[1])?,
            f(r.end[0])?,
            f(r.end[1])?,
            f(r.length)?,
            r.turn.index(),
            r.is_intersection
        );
        for (j, id) in r.succ_ids.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            let _ = write!(s, "\"{}\"", escape(id));
        }
        s.push_str("]}");
    }
    let _ = write!(s, "],\"target_index\":{},\"future\":", scene.target_index);
    match &scene.future {
        None => s.push_str("null"),
        Some(fut) => {
            s.push('[');
            for (j, p) in fut.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "[{},{}]", f(p[0])?, f(p[1])?);
            }
            s.push(']');
        }
    }
    s.push('}');
    Ok(s)
}

#[derive(Deserialize)]
struct AgentRec {
    agent_id: String,
    #[serde(rename = "type")]
    kind: usize,
    states: Vec<[f64; 4]>,
}

#[derive(Deserialize)]
struct RoadRec {
    lane_id: String,
    start: [f64; 2],
    end: [f64; 2],
    length: f64,
    turn: usize,
    intersection: bool,
    succ_ids: Vec<String>,
}

#[derive(Deserialize)]
struct SceneRec {
    version: u32,
    scene_id: String,
    agents: Vec<AgentRec>,
    roads: Vec<RoadRec>,
    target_index: usize,
    future: Option<Vec<[f64; 2]>>,
}

fn scene_from_line(line: &str, line_no: usize) -> Result<Scene, SceneError> {
    let rec: SceneRec = serde_json::from_str(line).map_err(|e| SceneError::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    if rec.version != FORMAT_VERSION {
        return Err(SceneError::Parse {
            line: line_no,
            msg: format!(
                "scene {}: unsupported version {}",
                rec.scene_id, rec.version
            ),
        });
    }
    let mut agents = Vec::with_capacity(rec.agents.len());
    for a in rec.agents {
        let kind = AgentKind::from_index(a.kind).ok_or_else(|| SceneError::Parse {
            line: line_no,
            msg: format!("scene {}: agent {} has bad type {}", rec.scene_id, a.agent_id, a.kind),
        })?;
        agents.push(AgentHistory {
            agent_id: a.agent_id,
            kind,
            states: a
                .states
                .into_iter()
                .map(|[x, y, t, v]| AgentState {
                    x,
                    y,
                    t,
                    valid: v != 0.0,
                })
                .collect(),
        });
    }
    let mut roads = Vec::with_capacity(rec.roads.len());
    for r in rec.roads {
        let turn = TurnDirection::from_index(r.turn).ok_or_else(|| SceneError::Parse {
            line: line_no,
            msg: format!("scene {}: road {} has bad turn {}", rec.scene_id, r.lane_id, r.turn),
        })?;
        roads.push(RoadVector {
            lane_id: r.lane_id,
            start: r.start,
            end: r.end,
            length: r.length,
            turn,
            is_intersection: r.intersection,
            succ_ids: r.succ_ids,
        });
    }
    if rec.target_index >= agents.len() {
        return Err(SceneError::Parse {
            line: line_no,
            msg: format!(
                "scene {}: target_index {} out of range ({} agents)",
                rec.scene_id,
                rec.target_index,
                agents.len()
            ),
        });
    }
    Ok(Scene {
        scene_id: rec.scene_id,
        agents,
        roads,
        target_index: rec.target_index,
        future: rec.future,
    })
}

pub fn save_scenes(path: &Path, scenes: &[Scene]) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    for scene in scenes {
        let line = scene_to_line(scene)?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>, SceneError> {
    let r = BufReader::new(File::open(path)?);
    let mut scenes = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(scene_from_line(&line, i + 1)?);
    }
    Ok(scenes)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    save_scenes(path, std::slice::from_ref(scene))
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let scenes = load_scenes(path)?;
    match scenes.len() {
        1 => Ok(scenes.into_iter().next().unwrap()),
        n => Err(SceneError::Parse {
            line: 1,
            msg: format!("expected exactly one scene record, found {n}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, future: bool) -> Scene {
        Scene {
            scene_id: id.into(),
            agents: vec![AgentHistory {
                agent_id: "t-0".into(),
                kind: AgentKind::Vehicle,
                states: vec![
                    AgentState::default(),
                    AgentState {
                        x: 0.1,
                        y: -2.5e-7,
                        t: 0.1,
                        valid: true,
                    },
                    AgentState {
                        x: 1.0 / 3.0,
                        y: 7.25,
                        t: 0.2,
                        valid: true,
                    },
                ],
            }],
            roads: vec![RoadVector {
                lane_id: "l0#3".into(),
                start: [0.0, -0.0],
                end: [3.0, 4.0],
                length: 5.0,
                turn: TurnDirection::Left,
                is_intersection: true,
                succ_ids: vec!["l0#4".into(), "l1#0".into()],
            }],
            target_index: 0,
            future: future.then(|| vec![[0.30000000000000004, 1e-300]]),
        }
    }

    #[test]
    fn empty_roads_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let mut s = sample("empty", false);
        s.roads.clear();
        save_scene(&s, &path).unwrap();
        assert_eq!(load_scene(&path).unwrap(), s);
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.jsonl");
        let scenes = vec![sample("a", true), sample("b", false)];
        save_scenes(&path, &scenes).unwrap();
        let back = load_scenes(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (orig, got) in scenes.iter().zip(&back) {
            assert_eq!(orig, got);
            // explicit bit check on a hairy float
            assert_eq!(
                orig.agents[0].states[2].x.to_bits(),
                got.agents[0].states[2].x.to_bits()
            );
        }
    }

    #[test]
    fn truncated_record_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut line = scene_to_line(&sample("broken", true)).unwrap();
        line.truncate(line.len() / 2);
        std::fs::write(&path, line).unwrap();
        match load_scenes(&path) {
            Err(SceneError::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_enum_value_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enum.jsonl");
        let line = scene_to_line(&sample("s99", false))
            .unwrap()
            .replace("\"type\":0", "\"type\":9");
        std::fs::write(&path, line).unwrap();
        let err = load_scenes(&path).unwrap_err();
        assert!(err.to_string().contains("s99"), "{err}");
    }

    #[test]
    fn floats_have_seventeen_significant_digits() {
        let line = scene_to_line(&sample("digits", false)).unwrap();
        assert!(line.contains("3.3333333333333331e-1"), "{line}");
    }
}
