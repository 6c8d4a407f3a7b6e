//! Rotation representations, planar body-frame kinematics and goal encoding.
//!
//! Conventions: the world frame is z-up, heading `psi` is yaw about z, and the
//! body frame has x forward and y to the left. A [`BodyDelta`] at step t is
//! expressed in the body frame of pose t-1; heading is updated after the
//! translation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum norm accepted for either Gram-Schmidt column.
pub const DEGENERACY_EPS: f64 = 1e-8;

const ROTATION_TOL: f64 = 1e-6;

/// Continuous 6D rotation vector: the first two matrix columns, `a1` then `a2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub const IDENTITY: Rot6D = Rot6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn a1(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn a2(&self) -> [f64; 3] {
        [self.0[3], self.0[4], self.0[5]]
    }
}

/// Row-major 3x3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotMatrix(pub [[f64; 3]; 3]);

impl RotMatrix {
    pub const IDENTITY: RotMatrix = RotMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Checks orthonormality and unit determinant within 1e-6.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = RotMatrix(m);
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NotARotation("non-finite entry".into()));
        }
        let rtr = self.transpose().mul(self);
        let err = frobenius_distance(&rtr, &RotMatrix::IDENTITY);
        if err > ROTATION_TOL {
            return Err(Error::NotARotation(format!("|R^T R - I|_F = {err:e}")));
        }
        let det = self.det();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotARotation(format!("det = {det}")));
        }
        Ok(())
    }

    pub fn transpose(&self) -> RotMatrix {
        let m = &self.0;
        RotMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul(&self, other: &RotMatrix) -> RotMatrix {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        RotMatrix(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn column(&self, j: usize) -> [f64; 3] {
        [self.0[0][j], self.0[1][j], self.0[2][j]]
    }

    /// Row-major flattening.
    pub fn to_flat(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[3 * i + j] = self.0[i][j];
            }
        }
        out
    }

    /// Rotation by `angle` about z.
    pub fn rz(angle: f64) -> RotMatrix {
        let (s, c) = angle.sin_cos();
        RotMatrix([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation by `angle` about y.
    pub fn ry(angle: f64) -> RotMatrix {
        let (s, c) = angle.sin_cos();
        RotMatrix([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    /// Rotation by `angle` about x.
    pub fn rx(angle: f64) -> RotMatrix {
        let (s, c) = angle.sin_cos();
        RotMatrix([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }
}

pub fn frobenius_distance(a: &RotMatrix, b: &RotMatrix) -> f64 {
    a.0.iter()
        .flatten()
        .zip(b.0.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Per-step planar body-frame motion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyDelta {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
}

impl BodyDelta {
    pub fn new(dx: f64, dy: f64, dpsi: f64) -> Self {
        BodyDelta { dx, dy, dpsi }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.dpsi]
    }
}

/// World-frame planar pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Pose2 { x, y, psi }
    }

    /// Applies one body-frame delta.
    pub fn step(&self, d: &BodyDelta) -> Pose2 {
        let (s, c) = self.psi.sin_cos();
        Pose2 {
            x: self.x + c * d.dx - s * d.dy,
            y: self.y + s * d.dx + c * d.dy,
            psi: self.psi + d.dpsi,
        }
    }
}

/// Distance and bearing of the goal in the current body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalEncoding {
    pub d: f64,
    pub sb: f64,
    pub cb: f64,
}

impl GoalEncoding {
    pub fn to_array(self) -> [f64; 3] {
        [self.d, self.sb, self.cb]
    }
}

/// Normalized image coordinates, both in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    pub u: f64,
    pub v: f64,
}

impl GazePoint {
    /// Clamps into the unit square. Returns the point and whether clamping happened.
    pub fn clamped(u: f64, v: f64) -> (GazePoint, bool) {
        let cu = u.clamp(0.0, 1.0);
        let cv = v.clamp(0.0, 1.0);
        (GazePoint { u: cu, v: cv }, cu != u || cv != v)
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Gram-Schmidt on the two 6D columns; third column is their cross product.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<RotMatrix> {
    if r.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite 6D rotation".into()));
    }
    let a1 = r.a1();
    let a2 = r.a2();
    let n1 = dot3(&a1, &a1).sqrt();
    if n1 <= DEGENERACY_EPS {
        return Err(Error::DegenerateInput(format!("|a1| = {n1:e}")));
    }
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let proj = dot3(&b1, &a2);
    let p = [
        a2[0] - proj * b1[0],
        a2[1] - proj * b1[1],
        a2[2] - proj * b1[2],
    ];
    let n2 = dot3(&p, &p).sqrt();
    if n2 <= DEGENERACY_EPS {
        return Err(Error::DegenerateInput(format!(
            "a2 residual after projection = {n2:e}"
        )));
    }
    let b2 = [p[0] / n2, p[1] / n2, p[2] / n2];
    let b3 = cross3(&b1, &b2);
    Ok(RotMatrix([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ]))
}

pub fn matrix_to_rot6d(m: &RotMatrix) -> Result<Rot6D> {
    m.validate()?;
    let c0 = m.column(0);
    let c1 = m.column(1);
    Ok(Rot6D([c0[0], c0[1], c0[2], c1[0], c1[1], c1[2]]))
}

/// Entrywise L1 norm of `pred^T gt - I`; zero iff the rotations coincide.
pub fn relative_rotation_l1(pred: &RotMatrix, gt: &RotMatrix) -> f64 {
    let rel = pred.transpose().mul(gt);
    let mut total = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { 1.0 } else { 0.0 };
            total += (rel.0[i][j] - eye).abs();
        }
    }
    total
}

/// Integrates body-frame deltas from `start`; returns one pose per delta.
pub fn integrate_deltas(start: Pose2, deltas: &[BodyDelta]) -> Vec<Pose2> {
    let mut pose = start;
    deltas
        .iter()
        .map(|d| {
            pose = pose.step(d);
            pose
        })
        .collect()
}

/// Inverse of [`integrate_deltas`]; `dpsi` is wrapped into (-pi, pi].
pub fn world_to_body_deltas(poses: &[Pose2]) -> Result<Vec<BodyDelta>> {
    if poses.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: poses.len(),
        });
    }
    Ok(poses
        .windows(2)
        .map(|w| {
            let (prev, next) = (w[0], w[1]);
            let (s, c) = prev.psi.sin_cos();
            let ex = next.x - prev.x;
            let ey = next.y - prev.y;
            BodyDelta {
                dx: c * ex + s * ey,
                dy: -s * ex + c * ey,
                dpsi: wrap_angle(next.psi - prev.psi),
            }
        })
        .collect())
}

/// Goal distance and body-frame bearing. At zero distance the bearing is
/// undefined and `(0, 0, 1)` is returned.
pub fn encode_goal(current: Pose2, goal_xy: (f64, f64)) -> GoalEncoding {
    let ex = goal_xy.0 - current.x;
    let ey = goal_xy.1 - current.y;
    let d = ex.hypot(ey);
    if d == 0.0 {
        return GoalEncoding {
            d: 0.0,
            sb: 0.0,
            cb: 1.0,
        };
    }
    let (s, c) = current.psi.sin_cos();
    let bx = c * ex + s * ey;
    let by = -s * ex + c * ey;
    let beta = by.atan2(bx);
    let (sb, cb) = beta.sin_cos();
    GoalEncoding { d, sb, cb }
}
