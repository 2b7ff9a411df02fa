//! Domain types for vectorized traffic scenes.
//!
//! A [`Scene`] is one prediction instance: per-agent state histories sampled
//! at 10 Hz, a set of directed road vectors, the target-agent index (always 0
//! by convention) and, for labeled corpora, the target's ground-truth future.
//! All types are immutable after construction and all operations here are
//! pure functions.

mod io;
mod normalize;

pub use io::{load_scene, load_scenes, save_scene, save_scenes};
pub use normalize::{apply_rigid, normalize_to_target_frame};

use thiserror::Error;

/// Sampling interval of all trajectories (10 Hz).
pub const FRAME_DT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("degenerate target history: no non-degenerate displacement to derive heading")]
    DegenerateTargetHistory,
    #[error("history for agent {agent} has {len} frames, longer than T = {t}")]
    HistoryTooLong { agent: String, len: usize, t: usize },
    #[error("scene file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            AgentKind::Vehicle => 0,
            AgentKind::Pedestrian => 1,
            AgentKind::Cyclist => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(AgentKind::Vehicle),
            1 => Some(AgentKind::Pedestrian),
            2 => Some(AgentKind::Cyclist),
            _ => None,
        }
    }
}

/// One observed frame of an agent. Padded frames have `valid = false` and
/// zeroed numeric fields.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentHistory {
    pub agent_id: String,
    pub kind: AgentKind,
    pub states: Vec<AgentState>,
}

impl AgentHistory {
    pub fn valid_len(&self) -> usize {
        self.states.iter().filter(|s| s.valid).count()
    }

    pub fn last_valid(&self) -> Option<&AgentState> {
        self.states.iter().rev().find(|s| s.valid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TurnDirection {
    None,
    Left,
    Right,
}

impl TurnDirection {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            TurnDirection::None => 0,
            TurnDirection::Left => 1,
            TurnDirection::Right => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(TurnDirection::None),
            1 => Some(TurnDirection::Left),
            2 => Some(TurnDirection::Right),
            _ => None,
        }
    }
}

/// Directed lane-centerline segment, at most 5 m long after segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadVector {
    pub lane_id: String,
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub length: f64,
    pub turn: TurnDirection,
    pub is_intersection: bool,
    /// Successor vectors reachable from `end`.
    pub succ_ids: Vec<String>,
}

impl RoadVector {
    pub const MAX_LEN: f64 = 5.0;

    /// Squared distance from a point to this segment.
    pub fn dist2_to_point(&self, p: [f64; 2]) -> f64 {
        let dx = self.end[0] - self.start[0];
        let dy = self.end[1] - self.start[1];
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p[0] - self.start[0]) * dx + (p[1] - self.start[1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let cx = self.start[0] + t * dx;
        let cy = self.start[1] + t * dy;
        (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy)
    }
}

/// One prediction instance. Agents are padded to a common frame count with
/// the target agent first; `future` is present only in labeled corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub agents: Vec<AgentHistory>,
    pub roads: Vec<RoadVector>,
    pub target_index: usize,
    pub future: Option<Vec<[f64; 2]>>,
}

impl Scene {
    pub fn target(&self) -> &AgentHistory {
        &self.agents[self.target_index]
    }

    pub fn num_frames(&self) -> usize {
        self.agents.first().map_or(0, |a| a.states.len())
    }

    /// Checks the documented scene invariants for a padded scene with
    /// `t` history frames.
    pub fn validate(&self, t: usize) -> Result<(), SceneError> {
        if self.agents.is_empty() {
            return Err(SceneError::Invalid("no agents".into()));
        }
        if self.target_index >= self.agents.len() {
            return Err(SceneError::Invalid(format!(
                "target_index {} out of range",
                self.target_index
            )));
        }
        if self.target().valid_len() != t {
            return Err(SceneError::Invalid(format!(
                "target agent has {} valid frames, expected {t}",
                self.target().valid_len()
            )));
        }
        for a in &self.agents {
            if a.states.len() != t {
                return Err(SceneError::Invalid(format!(
                    "agent {} has {} frames after padding, expected {t}",
                    a.agent_id,
                    a.states.len()
                )));
            }
            let mut seen_valid = false;
            let mut prev_t: Option<f64> = None;
            for s in &a.states {
                if seen_valid && !s.valid {
                    return Err(SceneError::Invalid(format!(
                        "agent {}: valid frames are not a contiguous suffix",
                        a.agent_id
                    )));
                }
                seen_valid |= s.valid;
                if s.valid {
                    if let Some(pt) = prev_t {
                        if ((s.t - pt) - FRAME_DT).abs() > 1e-9 {
                            return Err(SceneError::Invalid(format!(
                                "agent {}: timestamp step {} != {FRAME_DT}",
                                a.agent_id,
                                s.t - pt
                            )));
                        }
                    }
                    prev_t = Some(s.t);
                } else if s.x != 0.0 || s.y != 0.0 || s.t != 0.0 {
                    return Err(SceneError::Invalid(format!(
                        "agent {}: padded frame has nonzero fields",
                        a.agent_id
                    )));
                }
            }
        }
        for r in &self.roads {
            let d = ((r.end[0] - r.start[0]).powi(2) + (r.end[1] - r.start[1]).powi(2)).sqrt();
            if (d - r.length).abs() > 1e-6 {
                return Err(SceneError::Invalid(format!(
                    "road {}: stored length {} != endpoint distance {d}",
                    r.lane_id, r.length
                )));
            }
            if r.length > RoadVector::MAX_LEN + 1e-9 {
                return Err(SceneError::Invalid(format!(
                    "road {} longer than {} m",
                    r.lane_id,
                    RoadVector::MAX_LEN
                )));
            }
        }
        Ok(())
    }
}

/// Validity mask over agents x frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    pub agents: usize,
    pub frames: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn get(&self, agent: usize, frame: usize) -> bool {
        self.data[agent * self.frames + frame]
    }

    pub fn row(&self, agent: usize) -> &[bool] {
        &self.data[agent * self.frames..(agent + 1) * self.frames]
    }

    pub fn flat(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Left-pads each raw history to exactly `t` frames and derives the validity
/// mask. Padded frames have zeroed numeric fields; the mask is true exactly
/// at valid frames.
pub fn pad_and_mask(
    agents: &[AgentHistory],
    t: usize,
) -> Result<(Vec<AgentHistory>, ValidityMask), SceneError> {
    let mut out = Vec::with_capacity(agents.len());
    let mut data = vec![false; agents.len() * t];
    for (ai, a) in agents.iter().enumerate() {
        if a.states.len() > t {
            return Err(SceneError::HistoryTooLong {
                agent: a.agent_id.clone(),
                len: a.states.len(),
                t,
            });
        }
        let pad = t - a.states.len();
        let mut states = vec![AgentState::default(); pad];
        states.extend(a.states.iter().copied());
        for (fi, s) in states.iter().enumerate() {
            data[ai * t + fi] = s.valid;
        }
        out.push(AgentHistory {
            agent_id: a.agent_id.clone(),
            kind: a.kind,
            states,
        });
    }
    Ok((
        out,
        ValidityMask {
            agents: agents.len(),
            frames: t,
            data,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(id: &str, n: usize, t0: f64) -> AgentHistory {
        AgentHistory {
            agent_id: id.into(),
            kind: AgentKind::Vehicle,
            states: (0..n)
                .map(|i| AgentState {
                    x: i as f64,
                    y: 0.5,
                    t: t0 + i as f64 * FRAME_DT,
                    valid: true,
                })
                .collect(),
        }
    }

    #[test]
    fn left_pad_three_of_five() {
        let (padded, mask) = pad_and_mask(&[hist("a", 3, 0.2)], 5).unwrap();
        assert_eq!(mask.row(0), &[false, false, true, true, true]);
        assert_eq!(padded[0].states.len(), 5);
        assert_eq!(padded[0].states[0], AgentState::default());
        assert_eq!(padded[0].states[2].x, 0.0);
        assert_eq!(padded[0].states[4].x, 2.0);
    }

    #[test]
    fn full_history_unchanged() {
        let h = hist("a", 5, 0.0);
        let (padded, mask) = pad_and_mask(&[h.clone()], 5).unwrap();
        assert_eq!(padded[0], h);
        assert!(mask.row(0).iter().all(|&b| b));
    }

    #[test]
    fn too_long_history_errors() {
        let err = pad_and_mask(&[hist("a", 6, 0.0)], 5).unwrap_err();
        assert!(matches!(err, SceneError::HistoryTooLong { len: 6, t: 5, .. }));
    }

    #[test]
    fn mask_popcount_equals_raw_length() {
        // counting oracle over a batch of random lengths
        let lengths = [1usize, 4, 7, 2, 9, 10, 3];
        let agents: Vec<_> = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| hist(&format!("a{i}"), n, 0.0))
            .collect();
        let (_, mask) = pad_and_mask(&agents, 10).unwrap();
        for (i, &n) in lengths.iter().enumerate() {
            assert_eq!(mask.row(i).iter().filter(|&&b| b).count(), n);
        }
    }
}
