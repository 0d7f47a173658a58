//! Planar rigid transforms and the named frame tree (`map -> odom -> base_link -> lidar_link`).

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAP_FRAME: &str = "map";
pub const ODOM_FRAME: &str = "odom";
pub const BASE_FRAME: &str = "base_link";
pub const LIDAR_FRAME: &str = "lidar_link";

/// Wraps an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Signed smallest difference `a - b`, wrapped.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn origin() -> Self {
        Self::default()
    }

    pub fn as_transform(&self) -> Transform2D {
        Transform2D::new(self.x, self.y, self.theta)
    }

    /// Applies a body-frame motion to this pose.
    pub fn compose(&self, delta: &Transform2D) -> Pose2D {
        self.as_transform().compose(delta).as_pose()
    }

    /// Maps a point expressed in this pose's frame into the parent frame.
    pub fn transform_point(&self, p: (f64, f64)) -> (f64, f64) {
        self.as_transform().apply(p)
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Rotate-then-translate rigid motion in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Transform2D {
    pub x: f64,
    pub y: f64,
    pub rotation: f64,
}

impl Transform2D {
    pub fn new(x: f64, y: f64, rotation: f64) -> Self {
        Self {
            x,
            y,
            rotation: normalize_angle(rotation),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(x: f64, y: f64) -> Self {
        Self::new(x, y, 0.0)
    }

    pub fn apply(&self, (px, py): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (c * px - s * py + self.x, s * px + c * py + self.y)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Transform2D) -> Transform2D {
        let (x, y) = self.apply((other.x, other.y));
        Transform2D::new(x, y, self.rotation + other.rotation)
    }

    pub fn inverse(&self) -> Transform2D {
        let (s, c) = self.rotation.sin_cos();
        Transform2D::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.rotation,
        )
    }

    pub fn as_pose(&self) -> Pose2D {
        Pose2D::new(self.x, self.y, self.rotation)
    }

    pub fn is_near(&self, other: &Transform2D, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && angle_diff(self.rotation, other.rotation).abs() <= tol
    }
}

pub fn compose(a: &Transform2D, b: &Transform2D) -> Transform2D {
    a.compose(b)
}

pub fn invert(t: &Transform2D) -> Transform2D {
    t.inverse()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TfError {
    #[error("adding {parent} -> {child} would create a cycle")]
    Cycle { parent: String, child: String },
    #[error("frame {child} already has parent {existing}; cannot attach to {parent}")]
    MultipleParent {
        parent: String,
        child: String,
        existing: String,
    },
    #[error("unknown frame {0}")]
    UnknownFrame(String),
    #[error("frames {0} and {1} are not connected")]
    Disconnected(String, String),
}

#[derive(Debug, Clone, PartialEq)]
struct Edge {
    parent: String,
    transform: Transform2D,
    stamp: f64,
}

/// Frame graph keyed by child frame. Each edge stores the pose of the child
/// in its parent's frame; only the latest stamp is kept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransformTree {
    edges: BTreeMap<String, Edge>,
}

impl TransformTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, frame: &str) -> bool {
        self.edges.contains_key(frame) || self.edges.values().any(|e| e.parent == frame)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn parent_of(&self, frame: &str) -> Option<&str> {
        self.edges.get(frame).map(|e| e.parent.as_str())
    }

    pub fn stamp(&self, parent: &str, child: &str) -> Option<f64> {
        self.edges
            .get(child)
            .filter(|e| e.parent == parent)
            .map(|e| e.stamp)
    }

    /// Every edge as (parent, child, transform, stamp), ordered by child.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str, Transform2D, f64)> {
        self.edges
            .iter()
            .map(|(c, e)| (e.parent.as_str(), c.as_str(), e.transform, e.stamp))
    }

    /// Frames with no parent.
    pub fn roots(&self) -> Vec<&str> {
        let mut roots: Vec<&str> = self
            .edges
            .values()
            .map(|e| e.parent.as_str())
            .filter(|p| !self.edges.contains_key(*p))
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots
    }

    pub fn set_transform(
        &mut self,
        parent: &str,
        child: &str,
        t: Transform2D,
        stamp: f64,
    ) -> Result<(), TfError> {
        if let Some(existing) = self.edges.get(child) {
            if existing.parent != parent {
                return Err(TfError::MultipleParent {
                    parent: parent.to_string(),
                    child: child.to_string(),
                    existing: existing.parent.clone(),
                });
            }
        } else if parent == child || self.ancestors(parent).any(|a| a == child) {
            return Err(TfError::Cycle {
                parent: parent.to_string(),
                child: child.to_string(),
            });
        }
        self.edges.insert(
            child.to_string(),
            Edge {
                parent: parent.to_string(),
                transform: Transform2D::new(t.x, t.y, t.rotation),
                stamp,
            },
        );
        Ok(())
    }

    /// Builder-style variant of [`set_transform`](Self::set_transform).
    pub fn with_transform(
        mut self,
        parent: &str,
        child: &str,
        t: Transform2D,
        stamp: f64,
    ) -> Result<Self, TfError> {
        self.set_transform(parent, child, t, stamp)?;
        Ok(self)
    }

    fn ancestors<'a>(&'a self, frame: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        let mut cur = Some(frame);
        std::iter::from_fn(move || {
            let f = cur?;
            cur = self.edges.get(f).map(|e| e.parent.as_str());
            Some(f)
        })
    }

    /// Pose of `frame` expressed in `ancestor`, composing edges downward.
    fn pose_in_ancestor(&self, frame: &str, ancestor: &str) -> Transform2D {
        let mut chain = Vec::new();
        let mut cur = frame;
        while cur != ancestor {
            let e = &self.edges[cur];
            chain.push(e.transform);
            cur = &e.parent;
        }
        chain
            .iter()
            .rev()
            .fold(Transform2D::identity(), |acc, t| acc.compose(t))
    }

    /// Transform mapping coordinates in `to_frame` into `from_frame`
    /// (equivalently, the pose of `to_frame` seen from `from_frame`).
    pub fn lookup(&self, from_frame: &str, to_frame: &str) -> Result<Transform2D, TfError> {
        for f in [from_frame, to_frame] {
            if !self.contains(f) {
                return Err(TfError::UnknownFrame(f.to_string()));
            }
        }
        let from_chain: Vec<&str> = self.ancestors(from_frame).collect();
        let common = self
            .ancestors(to_frame)
            .find(|a| from_chain.contains(a))
            .ok_or_else(|| TfError::Disconnected(from_frame.to_string(), to_frame.to_string()))?;
        let from_pose = self.pose_in_ancestor(from_frame, common);
        let to_pose = self.pose_in_ancestor(to_frame, common);
        Ok(from_pose.inverse().compose(&to_pose))
    }

    /// Text dump, one frame per line, children indented under parents.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for root in self.roots() {
            self.dump_frame(root, 0, &mut out);
        }
        out
    }

    fn dump_frame(&self, frame: &str, depth: usize, out: &mut String) {
        let indent = "  ".repeat(depth);
        match self.edges.get(frame) {
            Some(e) => {
                let _ = writeln!(
                    out,
                    "{indent}{frame}  [x={:.3} y={:.3} yaw={:.3} stamp={:.3}]",
                    e.transform.x, e.transform.y, e.transform.rotation, e.stamp
                );
            }
            None => {
                let _ = writeln!(out, "{indent}{frame}");
            }
        }
        for (child, _) in self.edges.iter().filter(|(_, e)| e.parent == frame) {
            self.dump_frame(child, depth + 1, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn matrix(t: &Transform2D) -> [[f64; 3]; 3] {
        let (s, c) = t.rotation.sin_cos();
        [[c, -s, t.x], [s, c, t.y], [0.0, 0.0, 1.0]]
    }

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    }

    fn from_matrix(m: &[[f64; 3]; 3]) -> Transform2D {
        Transform2D::new(m[0][2], m[1][2], m[1][0].atan2(m[0][0]))
    }

    fn assert_tf_eq(a: &Transform2D, b: &Transform2D, tol: f64) {
        assert!(a.is_near(b, tol), "{a:?} != {b:?}");
    }

    #[test]
    fn normalize_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_abs_diff_eq!(normalize_angle(-PI), PI);
        assert_abs_diff_eq!(normalize_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(normalize_angle(-0.5), -0.5);
        assert!(normalize_angle(-1e-300) <= 0.0);
    }

    #[test]
    fn compose_identity() {
        let t = Transform2D::new(1.5, -2.0, 0.7);
        assert_eq!(compose(&Transform2D::identity(), &t), t);
    }

    #[test]
    fn compose_quarter_turn_matches_matrix_product() {
        let a = Transform2D::new(1.0, 0.0, FRAC_PI_2);
        let b = Transform2D::new(1.0, 0.0, 0.0);
        let oracle = from_matrix(&matmul(&matrix(&a), &matrix(&b)));
        let got = compose(&a, &b);
        assert_tf_eq(&got, &oracle, 1e-12);
        assert_tf_eq(&got, &Transform2D::new(1.0, 1.0, FRAC_PI_2), 1e-12);
    }

    #[test]
    fn invert_cases() {
        assert_eq!(invert(&Transform2D::identity()), Transform2D::identity());
        assert_tf_eq(
            &invert(&Transform2D::new(1.0, 0.0, 0.0)),
            &Transform2D::new(-1.0, 0.0, 0.0),
            1e-12,
        );
        // matrix-inverse oracle: inverse of [[R, t]] is [[Rᵀ, -Rᵀt]]
        let t = Transform2D::new(1.0, 0.0, FRAC_PI_2);
        let m = matrix(&t);
        let inv = [
            [m[0][0], m[1][0], -(m[0][0] * m[0][2] + m[1][0] * m[1][2])],
            [m[0][1], m[1][1], -(m[0][1] * m[0][2] + m[1][1] * m[1][2])],
            [0.0, 0.0, 1.0],
        ];
        assert_tf_eq(&invert(&t), &from_matrix(&inv), 1e-12);
        assert_tf_eq(&invert(&t), &Transform2D::new(0.0, 1.0, -FRAC_PI_2), 1e-12);
        assert_tf_eq(&compose(&t, &invert(&t)), &Transform2D::identity(), 1e-9);
    }

    #[test]
    fn set_transform_errors() {
        let mut tree = TransformTree::new();
        tree.set_transform(MAP_FRAME, ODOM_FRAME, Transform2D::identity(), 0.0)
            .unwrap();
        assert_eq!(tree.len(), 1);
        assert!(matches!(
            tree.set_transform(ODOM_FRAME, MAP_FRAME, Transform2D::identity(), 0.0),
            Err(TfError::Cycle { .. })
        ));
        assert!(matches!(
            tree.set_transform("world", ODOM_FRAME, Transform2D::identity(), 0.0),
            Err(TfError::MultipleParent { .. })
        ));
        assert!(matches!(
            tree.set_transform(MAP_FRAME, MAP_FRAME, Transform2D::identity(), 0.0),
            Err(TfError::Cycle { .. })
        ));
    }

    #[test]
    fn last_write_wins() {
        let mut tree = TransformTree::new();
        tree.set_transform(MAP_FRAME, ODOM_FRAME, Transform2D::translation(1.0, 0.0), 1.0)
            .unwrap();
        tree.set_transform(MAP_FRAME, ODOM_FRAME, Transform2D::translation(2.0, 0.0), 2.0)
            .unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.stamp(MAP_FRAME, ODOM_FRAME), Some(2.0));
        assert_tf_eq(
            &tree.lookup(MAP_FRAME, ODOM_FRAME).unwrap(),
            &Transform2D::translation(2.0, 0.0),
            1e-12,
        );
    }

    #[test]
    fn lookup_chain_matches_matrix_product() {
        let m_o = Transform2D::new(0.5, -0.2, 0.3);
        let o_b = Transform2D::new(2.0, 1.0, -1.1);
        let b_l = Transform2D::new(0.05, 0.0, PI);
        let tree = TransformTree::new()
            .with_transform(MAP_FRAME, ODOM_FRAME, m_o, 0.0)
            .unwrap()
            .with_transform(ODOM_FRAME, BASE_FRAME, o_b, 0.0)
            .unwrap()
            .with_transform(BASE_FRAME, LIDAR_FRAME, b_l, 0.0)
            .unwrap();
        assert_tf_eq(&tree.lookup(BASE_FRAME, LIDAR_FRAME).unwrap(), &b_l, 1e-12);
        let oracle = from_matrix(&matmul(&matmul(&matrix(&m_o), &matrix(&o_b)), &matrix(&b_l)));
        assert_tf_eq(&tree.lookup(MAP_FRAME, LIDAR_FRAME).unwrap(), &oracle, 1e-9);
        assert_tf_eq(
            &tree.lookup(LIDAR_FRAME, BASE_FRAME).unwrap(),
            &invert(&tree.lookup(BASE_FRAME, LIDAR_FRAME).unwrap()),
            1e-12,
        );
        assert_tf_eq(
            &tree.lookup(LIDAR_FRAME, LIDAR_FRAME).unwrap(),
            &Transform2D::identity(),
            1e-12,
        );
    }

    #[test]
    fn lookup_errors() {
        let tree = TransformTree::new()
            .with_transform(MAP_FRAME, ODOM_FRAME, Transform2D::identity(), 0.0)
            .unwrap()
            .with_transform("a", "b", Transform2D::identity(), 0.0)
            .unwrap();
        assert_eq!(
            tree.lookup(MAP_FRAME, "nowhere"),
            Err(TfError::UnknownFrame("nowhere".into()))
        );
        assert!(matches!(
            tree.lookup(ODOM_FRAME, "b"),
            Err(TfError::Disconnected(..))
        ));
    }

    #[test]
    fn dump_indents_children() {
        let tree = TransformTree::new()
            .with_transform(MAP_FRAME, ODOM_FRAME, Transform2D::identity(), 0.0)
            .unwrap()
            .with_transform(ODOM_FRAME, BASE_FRAME, Transform2D::identity(), 0.0)
            .unwrap()
            .with_transform(BASE_FRAME, LIDAR_FRAME, Transform2D::identity(), 0.0)
            .unwrap();
        let dump = tree.dump();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines[0], "map");
        assert!(lines[1].starts_with("  odom"));
        assert!(lines[2].starts_with("    base_link"));
        assert!(lines[3].starts_with("      lidar_link"));
    }
}
