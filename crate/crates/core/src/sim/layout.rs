//! Room layouts: JSON schema, validation, and the two frozen rooms.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangular obstacle with appearance attributes used by the
/// renderer and by instruction embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub name: String,
    /// [x_min, y_min, x_max, y_max] in meters.
    pub rect: [f32; 4],
    /// RGB in [0,1].
    pub color: [f32; 3],
    /// Billboard height in meters, used only by the renderer.
    pub height: f32,
}

/// One instruction template. The family tag groups templates that share
/// phrasing style (plain, color-attribute, spatial-relation).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub text: String,
    pub family: String,
}

/// A navigation goal: a semantic category anchored to one or more candidate
/// positions (object centers).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub category: String,
    /// Matches the color of the obstacle that embodies this goal.
    pub color: [f32; 3],
    /// Candidate target coordinates; resets pick the one nearest the start.
    pub positions: Vec<[f32; 2]>,
    /// Safe-adjustment clearance in meters.
    pub clearance: f32,
    pub prompts: Vec<Prompt>,
}

/// A complete static room: bounds, furniture, and the goal table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomLayout {
    pub name: String,
    /// [x_min, y_min, x_max, y_max] in meters.
    pub bounds: [f32; 4],
    pub start: [f32; 2],
    pub obstacles: Vec<Obstacle>,
    pub goals: Vec<GoalSpec>,
}

impl RoomLayout {
    pub fn from_json(text: &str) -> Result<Self> {
        let layout: RoomLayout = serde_json::from_str(text)?;
        validate_layout(&layout)?;
        Ok(layout)
    }

    pub fn center(&self) -> [f32; 2] {
        [
            0.5 * (self.bounds[0] + self.bounds[2]),
            0.5 * (self.bounds[1] + self.bounds[3]),
        ]
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.bounds[0] && x <= self.bounds[2] && y >= self.bounds[1] && y <= self.bounds[3]
    }

    /// Moves a goal candidate toward the room center by `clearance`, then
    /// clamps it into the bounds shrunk by `margin`. A candidate already at
    /// the center stays there.
    pub fn safe_goal_position(&self, pos: [f32; 2], clearance: f32, margin: f32) -> [f32; 2] {
        let c = self.center();
        let dx = c[0] - pos[0];
        let dy = c[1] - pos[1];
        let norm = (dx * dx + dy * dy).sqrt();
        let (mut x, mut y) = if norm > 1e-9 {
            (
                pos[0] + clearance * dx / norm,
                pos[1] + clearance * dy / norm,
            )
        } else {
            (pos[0], pos[1])
        };
        x = x.clamp(self.bounds[0] + margin, self.bounds[2] - margin);
        y = y.clamp(self.bounds[1] + margin, self.bounds[3] - margin);
        [x, y]
    }
}

/// Structural checks applied to every layout before use.
pub fn validate_layout(layout: &RoomLayout) -> Result<()> {
    let b = layout.bounds;
    if !(b[0] < b[2] && b[1] < b[3]) {
        return Err(Error::Layout(format!("degenerate bounds {b:?}")));
    }
    if !layout.contains(layout.start[0], layout.start[1]) {
        return Err(Error::Layout("start outside bounds".into()));
    }
    if layout.goals.is_empty() {
        return Err(Error::Layout("layout has no goals".into()));
    }
    for o in &layout.obstacles {
        let r = o.rect;
        if !(r[0] < r[2] && r[1] < r[3]) {
            return Err(Error::Layout(format!("obstacle {} degenerate rect", o.name)));
        }
        if r[0] < b[0] || r[1] < b[1] || r[2] > b[2] || r[3] > b[3] {
            return Err(Error::Layout(format!("obstacle {} outside bounds", o.name)));
        }
        if o.height <= 0.0 {
            return Err(Error::Layout(format!("obstacle {} has no height", o.name)));
        }
        if o.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Layout(format!("obstacle {} color out of range", o.name)));
        }
    }
    // The start must not sit inside or on any obstacle.
    for o in &layout.obstacles {
        if super::disc_rect_distance(layout.start[0], layout.start[1], &o.rect) < 0.25 {
            return Err(Error::Layout(format!(
                "start position too close to obstacle {}",
                o.name
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for g in &layout.goals {
        if !seen.insert(g.category.clone()) {
            return Err(Error::Layout(format!("duplicate goal category {}", g.category)));
        }
        if g.positions.is_empty() {
            return Err(Error::Layout(format!("goal {} has no candidates", g.category)));
        }
        for p in &g.positions {
            if !layout.contains(p[0], p[1]) {
                return Err(Error::Layout(format!(
                    "goal {} candidate outside bounds",
                    g.category
                )));
            }
        }
        if g.clearance < 0.0 {
            return Err(Error::Layout(format!("goal {} negative clearance", g.category)));
        }
        if g.prompts.is_empty() {
            return Err(Error::Layout(format!("goal {} has no prompts", g.category)));
        }
        // Each goal must be embodied by an obstacle of the same color at its
        // first candidate, so the renderer actually shows the target.
        let anchored = layout.obstacles.iter().any(|o| {
            let p = g.positions[0];
            let inside = p[0] >= o.rect[0] - 0.05
                && p[0] <= o.rect[2] + 0.05
                && p[1] >= o.rect[1] - 0.05
                && p[1] <= o.rect[3] + 0.05;
            inside && o.color == g.color
        });
        if !anchored {
            return Err(Error::Layout(format!(
                "goal {} has no matching obstacle at its position",
                g.category
            )));
        }
    }
    Ok(())
}

/// Training room, 18 goal categories.
pub fn room_a() -> RoomLayout {
    RoomLayout::from_json(include_str!("../../assets/room_a.json"))
        .expect("embedded room A must validate")
}

/// Held-out room, 12 goal categories of which 2 overlap Room A.
pub fn room_b() -> RoomLayout {
    RoomLayout::from_json(include_str!("../../assets/room_b.json"))
        .expect("embedded room B must validate")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_layout() -> RoomLayout {
        RoomLayout {
            name: "test".into(),
            bounds: [-5.0, -5.0, 5.0, 5.0],
            start: [0.0, 0.0],
            obstacles: vec![Obstacle {
                name: "box".into(),
                rect: [3.0, 3.0, 4.0, 4.0],
                color: [1.0, 0.0, 0.0],
                height: 1.0,
            }],
            goals: vec![GoalSpec {
                category: "box".into(),
                color: [1.0, 0.0, 0.0],
                positions: vec![[3.5, 3.5]],
                clearance: 0.3,
                prompts: vec![Prompt {
                    text: "Go to the box".into(),
                    family: "plain".into(),
                }],
            }],
        }
    }

    #[test]
    fn minimal_layout_validates() {
        assert!(validate_layout(&minimal_layout()).is_ok());
    }

    #[test]
    fn validation_rejects_structural_problems() {
        let mut l = minimal_layout();
        l.obstacles[0].rect = [4.0, 3.0, 3.0, 4.0];
        assert!(validate_layout(&l).is_err());

        let mut l = minimal_layout();
        l.goals[0].positions = vec![[9.0, 0.0]];
        assert!(validate_layout(&l).is_err());

        let mut l = minimal_layout();
        l.goals.clear();
        assert!(validate_layout(&l).is_err());

        let mut l = minimal_layout();
        l.start = [3.5, 3.5];
        assert!(validate_layout(&l).is_err());

        // Goal color not matching any obstacle at the position.
        let mut l = minimal_layout();
        l.goals[0].color = [0.0, 1.0, 0.0];
        assert!(validate_layout(&l).is_err());
    }

    #[test]
    fn safe_goal_position_at_center_is_identity() {
        let l = minimal_layout();
        let c = l.center();
        let p = l.safe_goal_position(c, 0.5, 0.1);
        assert_eq!(p, c);
    }

    #[test]
    fn safe_goal_position_matches_two_step_formula() {
        // Room center (0,0); candidate (4.9, 0) displaced 0.3 toward center
        // lands at (4.6, 0); clamp inactive.
        let l = minimal_layout();
        let p = l.safe_goal_position([4.9, 0.0], 0.3, 0.1);
        assert!((p[0] - 4.6).abs() < 1e-6);
        assert!(p[1].abs() < 1e-6);
    }

    #[test]
    fn safe_goal_position_clamps_outside_candidates() {
        let l = minimal_layout();
        let p = l.safe_goal_position([8.0, -7.0], 0.0, 0.1);
        assert_eq!(p, [4.9, -4.9]);
    }

    #[test]
    fn unknown_json_keys_are_rejected() {
        let text = r#"{"name":"x","bounds":[0,0,1,1],"start":[0.5,0.5],
                       "obstacles":[],"goals":[],"extra":1}"#;
        assert!(RoomLayout::from_json(text).is_err());
    }

    #[test]
    fn embedded_rooms_load_and_validate() {
        let a = room_a();
        assert_eq!(a.bounds, [-4.25, -3.64, 6.5, 3.5]);
        assert_eq!(a.goals.len(), 18);
        let b = room_b();
        assert_eq!(b.goals.len(), 12);
        // Exactly two categories overlap between rooms.
        let cats_a: std::collections::HashSet<_> =
            a.goals.iter().map(|g| g.category.clone()).collect();
        let shared = b.goals.iter().filter(|g| cats_a.contains(&g.category)).count();
        assert_eq!(shared, 2);
        // Every goal ships at least 8 prompt templates.
        for g in a.goals.iter().chain(&b.goals) {
            assert!(g.prompts.len() >= 8, "goal {} has {} prompts", g.category, g.prompts.len());
            let families: std::collections::HashSet<_> =
                g.prompts.iter().map(|p| p.family.as_str()).collect();
            assert!(families.len() >= 3, "goal {} families {families:?}", g.category);
        }
    }
}
