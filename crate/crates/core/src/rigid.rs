//! Rigid-body value types shared by every subsystem.
//!
//! Positions are metres in the base frame, whose z = 0 plane is the top of
//! the coil cores. Orientations map handle-frame vectors into the base frame.

use nalgebra::{UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Position and orientation of a rigid body.
///
/// Serialized as `{"position": [x, y, z], "orientation": [w, x, y, z]}`.
/// On input the orientation may instead be given as `"rpy_deg": [roll,
/// pitch, yaw]`, or omitted for identity; quaternions are renormalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            position: Vec3::zeros(),
            orientation: Quat::identity(),
        }
    }

    pub fn new(position: Vec3, orientation: Quat) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vec3::new(x, y, z), Quat::identity())
    }

    /// Builds a pose from a translation and roll/pitch/yaw angles in radians.
    pub fn from_xyz_rpy(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::new(
            Vec3::new(x, y, z),
            Quat::from_euler_angles(roll, pitch, yaw),
        )
    }

    /// Maps a point expressed in this body's frame into the parent frame.
    #[inline]
    pub fn transform_point(&self, local: &Vec3) -> Vec3 {
        self.position + self.orientation * local
    }

    #[inline]
    pub fn transform_vector(&self, local: &Vec3) -> Vec3 {
        self.orientation * local
    }

    /// Composes a small perturbation: translation added in the parent frame and
    /// rotation vector applied on the left (parent frame).
    pub fn perturbed(&self, dp: &Vec3, drot: &Vec3) -> Self {
        Self::new(
            self.position + dp,
            Quat::from_scaled_axis(*drot) * self.orientation,
        )
    }

    /// `[x, y, z, qw, qx, qy, qz]`, the layout used by logs and the wire protocol.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation.quaternion();
        [
            self.position.x,
            self.position.y,
            self.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]
    }

    /// Inverse of [`Pose::to_array`]. The quaternion is renormalized; `None`
    /// when it is degenerate or a component is not finite.
    pub fn from_array(a: &[f64; 7]) -> Option<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let q = nalgebra::Quaternion::new(a[3], a[4], a[5], a[6]);
        if q.norm() < 1e-9 {
            return None;
        }
        Some(Self::new(
            Vec3::new(a[0], a[1], a[2]),
            UnitQuaternion::from_quaternion(q),
        ))
    }

    /// Rotation vector taking `self.orientation` to `target.orientation`,
    /// expressed in the parent frame.
    pub fn rotation_error_to(&self, target: &Pose) -> Vec3 {
        rotation_vector(&(target.orientation * self.orientation.inverse()))
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    orientation: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rpy_deg: Option<[f64; 3]>,
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let a = p.to_array();
        Self {
            position: [a[0], a[1], a[2]],
            orientation: Some([a[3], a[4], a[5], a[6]]),
            rpy_deg: None,
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = String;

    fn try_from(r: PoseRepr) -> Result<Self, String> {
        let [x, y, z] = r.position;
        let q = match (r.orientation, r.rpy_deg) {
            (Some(_), Some(_)) => return Err("give either orientation or rpy_deg, not both".into()),
            (Some(q), None) => q,
            (None, Some([roll, pitch, yaw])) => {
                let p = Pose::from_xyz_rpy(
                    x,
                    y,
                    z,
                    roll.to_radians(),
                    pitch.to_radians(),
                    yaw.to_radians(),
                );
                return if p.to_array().iter().all(|v| v.is_finite()) {
                    Ok(p)
                } else {
                    Err("pose must be finite".into())
                };
            }
            (None, None) => [1.0, 0.0, 0.0, 0.0],
        };
        Pose::from_array(&[x, y, z, q[0], q[1], q[2], q[3]])
            .ok_or_else(|| "pose must be finite with a non-zero quaternion".into())
    }
}

/// Rotation vector (axis times angle, angle in [0, pi]) of a unit quaternion.
pub fn rotation_vector(q: &Quat) -> Vec3 {
    // Pick the short way round so the angle never exceeds pi.
    let q = if q.w < 0.0 {
        Quat::new_unchecked(-q.into_inner())
    } else {
        *q
    };
    q.scaled_axis()
}

/// Linear and angular velocity. Angular velocity is expressed in the frame
/// stated by the producer; control code uses the base frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(linear: Vec3, angular: Vec3) -> Self {
        Self { linear, angular }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        ]
    }
}

/// Force and torque acting on the handle. The torque is taken about the
/// handle's centre of mass and expressed in the base frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(force: Vec3, torque: Vec3) -> Self {
        Self { force, torque }
    }

    pub fn from_force(force: Vec3) -> Self {
        Self::new(force, Vec3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        let v = self.to_vector();
        [v[0], v[1], v[2], v[3], v[4], v[5]]
    }

    pub fn is_finite(&self) -> bool {
        self.force
            .iter()
            .chain(self.torque.iter())
            .all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.force * s, self.torque * s)
    }

    /// Moves the reference point of this wrench: `offset` is the vector from
    /// the new reference point to the old one.
    pub fn shifted(&self, offset: &Vec3) -> Self {
        Self::new(self.force, self.torque + offset.cross(&self.force))
    }

    /// Euclidean norm of the stacked 6-vector (mixed units; for diagnostics).
    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

impl std::ops::Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.force + rhs.force, self.torque + rhs.torque)
    }
}

impl std::ops::AddAssign for Wrench {
    fn add_assign(&mut self, rhs: Wrench) {
        self.force += rhs.force;
        self.torque += rhs.torque;
    }
}

impl std::ops::Sub for Wrench {
    type Output = Wrench;
    fn sub(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.force - rhs.force, self.torque - rhs.torque)
    }
}

impl std::ops::Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        Wrench::new(-self.force, -self.torque)
    }
}
