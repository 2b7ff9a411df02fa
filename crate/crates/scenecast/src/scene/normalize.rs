//! Target-frame normalization.

use super::{Scene, SceneError};

/// Applies a rigid motion (rotation by `theta`, then translation by `t`) to
/// every position in the scene. Padded frames are left untouched so their
/// numeric fields stay zero.
pub fn apply_rigid(scene: &Scene, theta: f64, t: [f64; 2]) -> Scene {
    let (c, s) = (theta.cos(), theta.sin());
    let map = |p: [f64; 2]| -> [f64; 2] {
        [
            c * p[0] - s * p[1] + t[0],
            s * p[0] + c * p[1] + t[1],
        ]
    };
    transform_scene(scene, map)
}

fn transform_scene(scene: &Scene, map: impl Fn([f64; 2]) -> [f64; 2]) -> Scene {
    let mut out = scene.clone();
    for a in &mut out.agents {
        for st in &mut a.states {
            if st.valid {
                let p = map([st.x, st.y]);
                st.x = p[0];
                st.y = p[1];
            }
        }
    }
    for r in &mut out.roads {
        r.start = map(r.start);
        r.end = map(r.end);
    }
    if let Some(fut) = &mut out.future {
        for p in fut.iter_mut() {
            *p = map(*p);
        }
    }
    out
}

/// Derives the target heading from the most recent non-degenerate
/// displacement between consecutive valid frames.
fn target_heading(scene: &Scene) -> Result<f64, SceneError> {
    let target = scene.target();
    let valid: Vec<[f64; 2]> = target
        .states
        .iter()
        .filter(|s| s.valid)
        .map(|s| [s.x, s.y])
        .collect();
    for w in valid.windows(2).rev() {
        let dx = w[1][0] - w[0][0];
        let dy = w[1][1] - w[0][1];
        if (dx * dx + dy * dy).sqrt() > 1e-9 {
            return Ok(dy.atan2(dx));
        }
    }
    Err(SceneError::DegenerateTargetHistory)
}

/// Rotates and translates the scene so the target agent's latest pose is the
/// origin with zero heading. All non-positional attributes are unchanged.
pub fn normalize_to_target_frame(scene: &Scene) -> Result<Scene, SceneError> {
    let last = scene
        .target()
        .last_valid()
        .ok_or(SceneError::DegenerateTargetHistory)?;
    let center = [last.x, last.y];
    let theta = target_heading(scene)?;
    let (c, s) = (theta.cos(), theta.sin());
    // p' = R(-theta) * (p - center)
    let map = move |p: [f64; 2]| -> [f64; 2] {
        let dx = p[0] - center[0];
        let dy = p[1] - center[1];
        [c * dx + s * dy, -s * dx + c * dy]
    };
    Ok(transform_scene(scene, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AgentHistory, AgentKind, AgentState, RoadVector, TurnDirection, FRAME_DT};

    fn agent(id: &str, pts: &[[f64; 2]]) -> AgentHistory {
        AgentHistory {
            agent_id: id.into(),
            kind: AgentKind::Vehicle,
            states: pts
                .iter()
                .enumerate()
                .map(|(i, p)| AgentState {
                    x: p[0],
                    y: p[1],
                    t: i as f64 * FRAME_DT,
                    valid: true,
                })
                .collect(),
        }
    }

    fn road(id: &str, start: [f64; 2], end: [f64; 2]) -> RoadVector {
        let length = ((end[0] - start[0]).powi(2) + (end[1] - start[1]).powi(2)).sqrt();
        RoadVector {
            lane_id: id.into(),
            start,
            end,
            length,
            turn: TurnDirection::None,
            is_intersection: false,
            succ_ids: vec![],
        }
    }

    fn sample_scene() -> Scene {
        Scene {
            scene_id: "s".into(),
            agents: vec![
                agent("t", &[[1.0, 2.0], [2.0, 2.5], [3.0, 3.0]]),
                agent("o", &[[0.0, -1.0], [0.5, -1.0], [1.0, -1.0]]),
            ],
            roads: vec![road("r0", [0.0, 0.0], [4.0, 0.0])],
            target_index: 0,
            future: Some(vec![[4.0, 3.5], [5.0, 4.0]]),
        }
    }

    fn max_abs_diff(a: &Scene, b: &Scene) -> f64 {
        let mut m: f64 = 0.0;
        for (x, y) in a.agents.iter().zip(&b.agents) {
            for (s1, s2) in x.states.iter().zip(&y.states) {
                m = m.max((s1.x - s2.x).abs()).max((s1.y - s2.y).abs());
            }
        }
        for (r1, r2) in a.roads.iter().zip(&b.roads) {
            for k in 0..2 {
                m = m.max((r1.start[k] - r2.start[k]).abs());
                m = m.max((r1.end[k] - r2.end[k]).abs());
            }
        }
        if let (Some(f1), Some(f2)) = (&a.future, &b.future) {
            for (p1, p2) in f1.iter().zip(f2) {
                m = m.max((p1[0] - p2[0]).abs()).max((p1[1] - p2[1]).abs());
            }
        }
        m
    }

    #[test]
    fn already_normalized_scene_is_unchanged() {
        let scene = Scene {
            scene_id: "s".into(),
            agents: vec![agent("t", &[[-2.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])],
            roads: vec![],
            target_index: 0,
            future: None,
        };
        let n = normalize_to_target_frame(&scene).unwrap();
        assert!(max_abs_diff(&scene, &n) < 1e-9);
    }

    #[test]
    fn heading_from_last_two_positions() {
        // brute-force rotation oracle for the two axis-aligned cases
        for (pts, theta) in [
            (vec![[4.0, 0.0], [5.0, 0.0]], 0.0),
            (vec![[0.0, 4.0], [0.0, 5.0]], std::f64::consts::FRAC_PI_2),
        ] {
            let scene = Scene {
                scene_id: "s".into(),
                agents: vec![agent("t", &pts)],
                roads: vec![road("r", [1.0, 1.0], [2.0, 1.0])],
                target_index: 0,
                future: None,
            };
            let n = normalize_to_target_frame(&scene).unwrap();
            // oracle: p' = R(-theta) (p - last)
            let last = pts[1];
            let (c, s) = (theta.cos(), theta.sin());
            let oracle = |p: [f64; 2]| {
                let d = [p[0] - last[0], p[1] - last[1]];
                [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
            };
            let exp_start = oracle([1.0, 1.0]);
            let exp_end = oracle([2.0, 1.0]);
            for k in 0..2 {
                assert!((n.roads[0].start[k] - exp_start[k]).abs() < 1e-12);
                assert!((n.roads[0].end[k] - exp_end[k]).abs() < 1e-12);
            }
            let lt = n.agents[0].states.last().unwrap();
            assert!(lt.x.abs() < 1e-9 && lt.y.abs() < 1e-9);
        }
    }

    #[test]
    fn rigid_motion_invariance() {
        let scene = sample_scene();
        let moved = apply_rigid(&scene, std::f64::consts::FRAC_PI_2, [10.0, -3.0]);
        let n1 = normalize_to_target_frame(&scene).unwrap();
        let n2 = normalize_to_target_frame(&moved).unwrap();
        assert!(max_abs_diff(&n1, &n2) < 1e-6, "diff {}", max_abs_diff(&n1, &n2));
    }

    #[test]
    fn normalization_is_idempotent() {
        let n1 = normalize_to_target_frame(&sample_scene()).unwrap();
        let n2 = normalize_to_target_frame(&n1).unwrap();
        assert!(max_abs_diff(&n1, &n2) < 1e-9);
    }

    #[test]
    fn degenerate_heading_falls_back_then_errors() {
        // last two positions coincide; earlier displacement defines heading
        let scene = Scene {
            scene_id: "s".into(),
            agents: vec![agent("t", &[[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])],
            roads: vec![road("r", [2.0, 0.0], [3.0, 0.0])],
            target_index: 0,
            future: None,
        };
        let n = normalize_to_target_frame(&scene).unwrap();
        // heading +x from the earlier displacement; road stays on +x axis
        assert!((n.roads[0].start[1]).abs() < 1e-12);

        let stuck = Scene {
            scene_id: "s".into(),
            agents: vec![agent("t", &[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])],
            roads: vec![],
            target_index: 0,
            future: None,
        };
        assert!(matches!(
            normalize_to_target_frame(&stuck),
            Err(SceneError::DegenerateTargetHistory)
        ));
    }

    #[test]
    fn padded_frames_stay_zero() {
        let mut scene = sample_scene();
        scene.agents[1].states[0] = AgentState::default();
        let n = normalize_to_target_frame(&scene).unwrap();
        let p = &n.agents[1].states[0];
        assert_eq!((p.x, p.y, p.t, p.valid), (0.0, 0.0, 0.0, false));
    }
}
