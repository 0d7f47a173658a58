//! Static 2-D world: a bounding room plus rectangle and circle obstacles.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min: [min_x, min_y],
            max: [max_x, max_y],
        }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        )
    }

    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    /// Euclidean distance from a point to the (solid) rectangle; 0 inside.
    pub fn distance(&self, (x, y): (f64, f64)) -> f64 {
        let dx = (self.min[0] - x).max(0.0).max(x - self.max[0]);
        let dy = (self.min[1] - y).max(0.0).max(y - self.max[1]);
        dx.hypot(dy)
    }

    /// Distance from an interior point to the nearest wall.
    pub fn inner_clearance(&self, (x, y): (f64, f64)) -> f64 {
        (x - self.min[0])
            .min(self.max[0] - x)
            .min(y - self.min[1])
            .min(self.max[1] - y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Rect {
        min: [f64; 2],
        max: [f64; 2],
    },
    Circle {
        center: [f64; 2],
        radius: f64,
    },
}

impl Shape {
    pub fn rect(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Shape::Rect {
            min: [min_x, min_y],
            max: [max_x, max_y],
        }
    }

    pub fn circle(cx: f64, cy: f64, radius: f64) -> Self {
        Shape::Circle {
            center: [cx, cy],
            radius,
        }
    }

    /// Euclidean distance from a point to the solid shape; 0 inside.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        match *self {
            Shape::Rect { min, max } => Rect { min, max }.distance(p),
            Shape::Circle { center, radius } => {
                ((p.0 - center[0]).hypot(p.1 - center[1]) - radius).max(0.0)
            }
        }
    }

    /// Unsigned distance to the outline, from inside or outside.
    pub fn boundary_distance(&self, p: (f64, f64)) -> f64 {
        match *self {
            Shape::Rect { min, max } => {
                let r = Rect { min, max };
                if r.contains(p) {
                    r.inner_clearance(p)
                } else {
                    r.distance(p)
                }
            }
            Shape::Circle { center, radius } => {
                ((p.0 - center[0]).hypot(p.1 - center[1]) - radius).abs()
            }
        }
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        self.distance(p) <= 0.0
    }

    pub fn bounding_box(&self) -> Rect {
        match *self {
            Shape::Rect { min, max } => Rect { min, max },
            Shape::Circle { center, radius } => Rect::new(
                center[0] - radius,
                center[1] - radius,
                center[0] + radius,
                center[1] + radius,
            ),
        }
    }

    /// Smallest t ≥ 0 at which `origin + t·dir` enters the shape (`dir` unit).
    pub fn ray_entry(&self, origin: (f64, f64), dir: (f64, f64)) -> Option<f64> {
        match *self {
            Shape::Rect { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for axis in 0..2 {
                    let (o, d) = if axis == 0 {
                        (origin.0, dir.0)
                    } else {
                        (origin.1, dir.1)
                    };
                    if d.abs() < 1e-15 {
                        if o < min[axis] || o > max[axis] {
                            return None;
                        }
                    } else {
                        let a = (min[axis] - o) / d;
                        let b = (max[axis] - o) / d;
                        t0 = t0.max(a.min(b));
                        t1 = t1.min(a.max(b));
                    }
                }
                if t1 < t0 || t1 < 0.0 {
                    None
                } else {
                    Some(t0.max(0.0))
                }
            }
            Shape::Circle { center, radius } => {
                let ox = origin.0 - center[0];
                let oy = origin.1 - center[1];
                let b = ox * dir.0 + oy * dir.1;
                let c = ox * ox + oy * oy - radius * radius;
                if c <= 0.0 {
                    return Some(0.0);
                }
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t >= 0.0).then_some(t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub bounds: Rect,
    #[serde(default)]
    pub obstacles: Vec<Shape>,
}

impl WorldModel {
    pub fn empty(bounds: Rect) -> Self {
        Self {
            bounds,
            obstacles: Vec::new(),
        }
    }

    /// 10 m × 10 m room with eight obstacles clustered inside a 5 m square
    /// tour loop (corners (2.5, 2.5) and (7.5, 7.5)), so every face is
    /// visible from the loop and the outer ring stays open.
    pub fn sample() -> Self {
        Self {
            bounds: Rect::new(0.0, 0.0, 10.0, 10.0),
            obstacles: vec![
                Shape::rect(4.6, 4.6, 5.4, 5.4),
                Shape::rect(3.3, 3.3, 3.9, 3.9),
                Shape::circle(6.3, 3.6, 0.35),
                Shape::rect(6.1, 6.1, 6.7, 6.7),
                Shape::circle(3.6, 6.4, 0.3),
                Shape::rect(3.3, 4.8, 3.7, 5.2),
                Shape::rect(4.8, 3.3, 5.2, 3.7),
                Shape::circle(6.4, 5.0, 0.25),
            ],
        }
    }

    /// Problems with the world definition, as human-readable strings.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.bounds.width() > 0.0 && self.bounds.height() > 0.0) {
            out.push("bounds must have positive width and height".to_string());
        }
        for (i, s) in self.obstacles.iter().enumerate() {
            let bb = s.bounding_box();
            if let Shape::Circle { radius, .. } = s {
                if !(*radius > 0.0) {
                    out.push(format!("obstacles[{i}].radius must be positive"));
                }
            }
            if !(bb.width() >= 0.0 && bb.height() >= 0.0) {
                out.push(format!("obstacles[{i}] has min greater than max"));
            }
            if bb.min[0] < self.bounds.min[0]
                || bb.min[1] < self.bounds.min[1]
                || bb.max[0] > self.bounds.max[0]
                || bb.max[1] > self.bounds.max[1]
            {
                out.push(format!("obstacles[{i}] lies outside bounds"));
            }
        }
        out
    }

    /// Distance from a point inside the room to the nearest surface
    /// (obstacle or wall).
    pub fn clearance(&self, p: (f64, f64)) -> f64 {
        self.obstacles
            .iter()
            .map(|s| s.distance(p))
            .fold(self.bounds.inner_clearance(p), f64::min)
    }

    /// Distance along a unit ray from an interior point to the first surface.
    pub fn raycast(&self, origin: (f64, f64), dir: (f64, f64)) -> f64 {
        let b = &self.bounds;
        let mut best = f64::INFINITY;
        if dir.0 > 1e-15 {
            best = best.min((b.max[0] - origin.0) / dir.0);
        } else if dir.0 < -1e-15 {
            best = best.min((b.min[0] - origin.0) / dir.0);
        }
        if dir.1 > 1e-15 {
            best = best.min((b.max[1] - origin.1) / dir.1);
        } else if dir.1 < -1e-15 {
            best = best.min((b.min[1] - origin.1) / dir.1);
        }
        for s in &self.obstacles {
            if let Some(t) = s.ray_entry(origin, dir) {
                best = best.min(t);
            }
        }
        best.max(0.0)
    }

    pub fn inside_bounds(&self, p: (f64, f64)) -> bool {
        self.bounds.contains(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_ray_entry() {
        let r = Shape::rect(1.0, -1.0, 2.0, 1.0);
        assert_eq!(r.ray_entry((0.0, 0.0), (1.0, 0.0)), Some(1.0));
        assert_eq!(r.ray_entry((0.0, 0.0), (-1.0, 0.0)), None);
        assert_eq!(r.ray_entry((1.5, 0.0), (1.0, 0.0)), Some(0.0));
        assert_eq!(r.ray_entry((0.0, 2.0), (1.0, 0.0)), None);
    }

    #[test]
    fn circle_ray_entry() {
        let c = Shape::circle(3.0, 0.0, 1.0);
        assert!((c.ray_entry((0.0, 0.0), (1.0, 0.0)).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(c.ray_entry((0.0, 0.0), (0.0, 1.0)), None);
        assert_eq!(c.ray_entry((5.0, 0.0), (1.0, 0.0)), None);
    }

    #[test]
    fn raycast_room_walls() {
        let w = WorldModel::empty(Rect::new(-2.0, -2.0, 2.0, 2.0));
        assert!((w.raycast((0.0, 0.0), (1.0, 0.0)) - 2.0).abs() < 1e-12);
        let d = std::f64::consts::FRAC_1_SQRT_2;
        assert!((w.raycast((0.0, 0.0), (d, d)) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn problems_reported() {
        let mut w = WorldModel::empty(Rect::new(0.0, 0.0, 1.0, 1.0));
        assert!(w.problems().is_empty());
        w.obstacles.push(Shape::circle(0.9, 0.5, 0.5));
        assert_eq!(w.problems().len(), 1);
    }
}
