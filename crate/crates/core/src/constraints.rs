//! State constraint sets shared by planners and verification.

use serde::{Deserialize, Serialize};

/// A set of states with a signed violation measure.
///
/// `violation(x, margin)` is `<= 0` iff `x` lies in the set shrunk by
/// the per-component `margin` (empty slice = no margin).
pub trait StateSet: Send + Sync {
    fn violation(&self, x: &[f64], margin: &[f64]) -> f64;

    fn contains(&self, x: &[f64]) -> bool {
        self.violation(x, &[]) <= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Aabb {
    /// Depth of `p` inside the box grown by `grow`; negative when outside.
    pub fn penetration(&self, p: &[f64], grow: &[f64; 3]) -> f64 {
        let mut depth = f64::INFINITY;
        for i in 0..3 {
            depth = depth
                .min(p[i] - (self.lo[i] - grow[i]))
                .min((self.hi[i] + grow[i]) - p[i]);
        }
        depth
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.penetration(p, &[0.0; 3]) > 0.0
    }
}

/// Walled corridor with box obstacles and a speed limit, for the quadrotor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadArena {
    pub pos_lo: [f64; 3],
    pub pos_hi: [f64; 3],
    pub obstacles: Vec<Aabb>,
    pub speed_max: f64,
}

fn norm3(v: &[f64]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn margin3(margin: &[f64], offset: usize) -> [f64; 3] {
    let mut m = [0.0; 3];
    if margin.len() >= offset + 3 {
        m.copy_from_slice(&margin[offset..offset + 3]);
    }
    m
}

impl StateSet for QuadArena {
    fn violation(&self, x: &[f64], margin: &[f64]) -> f64 {
        let mr = margin3(margin, 0);
        let mv = margin3(margin, 3);
        let mut worst = f64::NEG_INFINITY;
        for i in 0..3 {
            worst = worst
                .max(x[i] + mr[i] - self.pos_hi[i])
                .max(self.pos_lo[i] - x[i] + mr[i]);
        }
        for ob in &self.obstacles {
            worst = worst.max(ob.penetration(x, &mr));
        }
        worst.max(norm3(&x[3..6]) + norm3(&mv) - self.speed_max)
    }
}

/// Ball around a goal position with a speed cap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: [f64; 3],
    pub radius: f64,
    pub speed: f64,
}

impl StateSet for GoalRegion {
    fn violation(&self, x: &[f64], margin: &[f64]) -> f64 {
        let d = [
            x[0] - self.center[0],
            x[1] - self.center[1],
            x[2] - self.center[2],
        ];
        let mr = margin3(margin, 0);
        let mv = margin3(margin, 3);
        (norm3(&d) + norm3(&mr) - self.radius).max(norm3(&x[3..6]) + norm3(&mv) - self.speed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arena() -> QuadArena {
        QuadArena {
            pos_lo: [-1.0, -3.0, -2.0],
            pos_hi: [21.0, 3.0, 2.0],
            obstacles: vec![Aabb {
                lo: [6.0, -3.0, -2.0],
                hi: [8.0, 0.0, 2.0],
            }],
            speed_max: 4.0,
        }
    }

    #[test]
    fn inside_outside() {
        let a = arena();
        assert!(a.violation(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[]) < 0.0);
        assert!(a.violation(&[7.0, -1.0, 0.0, 0.0, 0.0, 0.0], &[]) > 0.0);
        assert!(a.violation(&[0.0, 0.0, 0.0, 5.0, 0.0, 0.0], &[]) > 0.0);
        assert!(a.violation(&[0.0, 3.5, 0.0, 0.0, 0.0, 0.0], &[]) > 0.0);
    }

    #[test]
    fn margin_tightens() {
        let a = arena();
        let x = [7.0, 0.3, 0.0, 0.0, 0.0, 0.0];
        assert!(a.violation(&x, &[]) < 0.0);
        assert!(a.violation(&x, &[0.5; 6]) > 0.0);
    }

    #[test]
    fn goal_region() {
        let g = GoalRegion {
            center: [20.0, 0.0, 0.0],
            radius: 1.0,
            speed: 0.5,
        };
        assert!(g.contains(&[20.5, 0.0, 0.0, 0.1, 0.0, 0.0]));
        assert!(!g.contains(&[20.5, 0.0, 0.0, 1.0, 0.0, 0.0]));
        assert!(!g.contains(&[18.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    }
}
