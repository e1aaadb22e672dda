//! Virtual environment for haptic rendering: a spherical tool tip rigidly
//! attached below the handle, penalty contacts with planes, spheres and
//! boxes, and explicit dynamics for movable objects.
//!
//! Scene coordinates put z = 0 on the top of the display screen; the base
//! frame is shifted up by the screen thickness.

use std::f64::consts::PI;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::magnetics::special::gauss_legendre;
use crate::rigid::{Pose, Quat, Twist, Vec3, Wrench};

pub const SCREEN_THICKNESS: f64 = 0.008;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene object `{name}`: {reason}")]
    Object { name: String, reason: String },
    #[error("scene: {0}")]
    Invalid(String),
    #[error("scene file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VirtualTool {
    pub tip_radius: f64,
    /// Drawn only; contacts use the tip sphere.
    pub shaft_length: f64,
    /// Offset of the tip centre along the handle's −z axis.
    pub extension: f64,
}

impl Default for VirtualTool {
    fn default() -> Self {
        Self {
            tip_radius: 0.005,
            shaft_length: 0.05,
            extension: 0.0,
        }
    }
}

/// Tool tip pose in scene coordinates for a handle pose in the base frame.
pub fn tool_pose_from_handle(handle: &Pose, screen_thickness: f64, extension: f64) -> Pose {
    let offset = handle.orientation * Vec3::new(0.0, 0.0, -extension);
    Pose::new(
        handle.position + offset - Vec3::new(0.0, 0.0, screen_thickness),
        handle.orientation,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Half-space below the object's local z = 0 plane.
    Plane,
    Sphere {
        radius: f64,
    },
    Box {
        half_extents: Vec3,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Texture {
    pub amplitude: f64,
    pub wavelength: f64,
    pub enabled: bool,
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            amplitude: 2e-4,
            wavelength: 2e-3,
            enabled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    #[serde(default)]
    pub name: String,
    pub shape: Shape,
    #[serde(default)]
    pub pose: Pose,
    /// kg; absent for static objects.
    #[serde(default)]
    pub mass: Option<f64>,
    pub stiffness: f64,
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub friction: f64,
    #[serde(default)]
    pub texture: Texture,
    /// Base-frame velocity of the object's centre.
    #[serde(default)]
    pub velocity: Vec3,
    #[serde(default)]
    pub angular_velocity: Vec3,
}

impl SceneObject {
    pub fn is_dynamic(&self) -> bool {
        self.mass.is_some()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |reason: &str| {
            Err(SceneError::Object {
                name: self.name.clone(),
                reason: reason.into(),
            })
        };
        if !(self.stiffness > 0.0) {
            return fail("stiffness must be > 0");
        }
        if !(self.damping >= 0.0) {
            return fail("damping must be >= 0");
        }
        if !(self.friction >= 0.0) {
            return fail("friction must be >= 0");
        }
        if self.texture.enabled && !(self.texture.wavelength > 0.0) {
            return fail("texture wavelength must be > 0 when enabled");
        }
        match self.shape {
            Shape::Sphere { radius } if !(radius > 0.0) => {
                return fail("sphere radius must be > 0")
            }
            Shape::Box { half_extents } if half_extents.iter().any(|h| !(*h > 0.0)) => {
                return fail("box half extents must be > 0")
            }
            Shape::Plane if self.is_dynamic() => return fail("planes must be static"),
            _ => {}
        }
        if let Some(m) = self.mass {
            if !(m > 0.0 && m.is_finite()) {
                return fail("mass must be positive and finite (omit it for static objects)");
            }
        }
        Ok(())
    }

    /// Body-frame inertia about the centre.
    fn inertia(&self) -> Matrix3<f64> {
        let m = self.mass.unwrap_or(0.0);
        match self.shape {
            Shape::Sphere { radius } => Matrix3::identity() * (0.4 * m * radius * radius),
            Shape::Box { half_extents: h } => Matrix3::from_diagonal(&Vec3::new(
                m * (h.y * h.y + h.z * h.z) / 3.0,
                m * (h.x * h.x + h.z * h.z) / 3.0,
                m * (h.x * h.x + h.y * h.y) / 3.0,
            )),
            Shape::Plane => Matrix3::zeros(),
        }
    }

    fn point_velocity(&self, p: &Vec3) -> Vec3 {
        self.velocity + self.angular_velocity.cross(&(p - self.pose.position))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ForceLaw {
    /// `k·depth`.
    Depth,
    /// `k·V^(1/3)` on the interpenetration volume.
    Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    /// Gravity acting on dynamic objects, m/s².
    pub gravity: Vec3,
    pub tool: VirtualTool,
    /// Friction regularization speed, m/s.
    pub friction_velocity: f64,
    pub force_law: ForceLaw,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            objects: Vec::new(),
            gravity: Vec3::new(0.0, 0.0, -9.81),
            tool: VirtualTool::default(),
            friction_velocity: 1e-3,
            force_law: ForceLaw::Depth,
        }
    }
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.tool.tip_radius > 0.0) {
            return Err(SceneError::Invalid("tool.tip_radius must be > 0".into()));
        }
        if !(self.friction_velocity > 0.0) {
            return Err(SceneError::Invalid("friction_velocity must be > 0".into()));
        }
        self.objects.iter().try_for_each(SceneObject::validate)
    }

    /// A textured floor on the screen surface and a movable ball.
    pub fn demo() -> Self {
        Self {
            objects: vec![
                SceneObject {
                    name: "floor".into(),
                    shape: Shape::Plane,
                    pose: Pose::identity(),
                    mass: None,
                    stiffness: 2000.0,
                    damping: 5.0,
                    friction: 0.3,
                    texture: Texture {
                        enabled: true,
                        ..Texture::default()
                    },
                    velocity: Vec3::zeros(),
                    angular_velocity: Vec3::zeros(),
                },
                SceneObject {
                    name: "ball".into(),
                    shape: Shape::Sphere { radius: 0.008 },
                    pose: Pose::from_translation(0.02, 0.0, 0.008 - 0.03 * 9.81 / 2000.0),
                    mass: Some(0.03),
                    stiffness: 2000.0,
                    damping: 2.0,
                    friction: 0.0,
                    texture: Texture::default(),
                    velocity: Vec3::zeros(),
                    angular_velocity: Vec3::zeros(),
                },
            ],
            ..Self::default()
        }
    }
}

/// One interpenetration between the tool tip (or a dynamic object) and a
/// scene object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Contact {
    pub object: usize,
    pub depth: f64,
    /// Unit normal pointing from the object into the tool.
    pub normal: Vec3,
    pub point: Vec3,
    pub volume: f64,
}

/// Volume of a sphere cap of height `h` cut from a sphere of radius `r`.
pub fn cap_volume(r: f64, h: f64) -> f64 {
    let h = h.clamp(0.0, 2.0 * r);
    PI * h * h * (3.0 * r - h) / 3.0
}

/// Volume of the intersection of two spheres whose centres are `d` apart.
pub fn lens_volume(r1: f64, r2: f64, d: f64) -> f64 {
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        let r = r1.min(r2);
        return 4.0 / 3.0 * PI * r * r * r;
    }
    let s = r1 + r2 - d;
    PI * s * s * (d * d + 2.0 * d * (r1 + r2) - 3.0 * (r1 - r2).powi(2)) / (12.0 * d)
}

/// Area of the disc of radius `rho` centred at the origin inside the
/// rectangle `[x0, x1] × [y0, y1]`.
fn disc_rect_area(rho: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    let a = x0.max(-rho);
    let b = x1.min(rho);
    if a >= b {
        return 0.0;
    }
    let half = |t: f64| (rho * rho - t * t).max(0.0).sqrt();
    // antiderivative of half(t)
    let prim = |t: f64| 0.5 * (t * half(t) + rho * rho * (t / rho).clamp(-1.0, 1.0).asin());
    let mut cuts = vec![a, b];
    for y in [y0, y1] {
        if y.abs() < rho {
            let t = half(y);
            cuts.extend([-t, t]);
        }
    }
    cuts.retain(|t| *t >= a && *t <= b);
    cuts.sort_by(f64::total_cmp);
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let (l, r) = (w[0], w[1]);
        if r <= l {
            continue;
        }
        let s = half(0.5 * (l + r));
        // integrand min(y1, s) - max(y0, -s), piecewise in closed form
        let top_is_arc = s < y1;
        let bottom_is_arc = -s > y0;
        if (top_is_arc && s <= y0) || (bottom_is_arc && -s >= y1) {
            continue;
        }
        if top_is_arc && bottom_is_arc {
            area += 2.0 * (prim(r) - prim(l));
        } else if top_is_arc {
            area += prim(r) - prim(l) - y0 * (r - l);
        } else if bottom_is_arc {
            area += y1 * (r - l) + prim(r) - prim(l);
        } else {
            area += (y1 - y0).max(0.0) * (r - l);
        }
    }
    area
}

/// Volume of a sphere (centre `c`, radius `r`, in box coordinates) inside the
/// box `|x| ≤ h`. Exact slice areas integrated by Gauss–Legendre between the
/// heights where the slice topology changes.
pub fn sphere_box_volume(c: &Vec3, r: f64, h: &Vec3) -> f64 {
    let z_lo = (-h.z - c.z).max(-r);
    let z_hi = (h.z - c.z).min(r);
    if z_lo >= z_hi {
        return 0.0;
    }
    let (x0, x1, y0, y1) = (-h.x - c.x, h.x - c.x, -h.y - c.y, h.y - c.y);
    let mut cuts = vec![z_lo, z_hi];
    let mut add = |dist: f64| {
        if dist < r {
            let z = (r * r - dist * dist).sqrt();
            cuts.extend([-z, z]);
        }
    };
    for x in [x0, x1] {
        add(x.abs());
        for y in [y0, y1] {
            add(x.hypot(y));
        }
    }
    for y in [y0, y1] {
        add(y.abs());
    }
    cuts.retain(|z| *z >= z_lo && *z <= z_hi);
    cuts.sort_by(f64::total_cmp);
    let (nodes, weights) = gauss_legendre(24);
    let mut vol = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 0.0 {
            continue;
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (x, wt) in nodes.iter().zip(&weights) {
            let z = mid + half * x;
            let rho = (r * r - z * z).max(0.0).sqrt();
            vol += wt * half * disc_rect_area(rho, x0, x1, y0, y1);
        }
    }
    vol
}

/// Contact of a sphere (centre `c`, radius `r`) with one object, if any.
fn sphere_contact(c: &Vec3, r: f64, index: usize, obj: &SceneObject) -> Option<Contact> {
    let pose = &obj.pose;
    match obj.shape {
        Shape::Plane => {
            let n = pose.orientation * Vec3::z();
            let height = (c - pose.position).dot(&n);
            let depth = r - height;
            (depth > 0.0).then(|| Contact {
                object: index,
                depth,
                normal: n,
                point: c - n * (r - 0.5 * depth),
                volume: cap_volume(r, depth),
            })
        }
        Shape::Sphere { radius } => {
            let delta = c - pose.position;
            let d = delta.norm();
            let depth = r + radius - d;
            if depth <= 0.0 {
                return None;
            }
            let normal = if d > 1e-12 { delta / d } else { Vec3::z() };
            Some(Contact {
                object: index,
                depth,
                normal,
                point: pose.position + normal * (radius - 0.5 * depth),
                volume: lens_volume(r, radius, d),
            })
        }
        Shape::Box { half_extents: h } => {
            let local = pose.orientation.inverse() * (c - pose.position);
            let closest = Vec3::from_fn(|i, _| local[i].clamp(-h[i], h[i]));
            let outside = local - closest;
            let dist = outside.norm();
            let (depth, normal_local, surface) = if dist > 1e-12 {
                (r - dist, outside / dist, closest)
            } else {
                // centre inside: push out through the nearest face
                let gaps = Vec3::from_fn(|i, _| h[i] - local[i].abs());
                let axis = gaps.imin();
                let mut n = Vec3::zeros();
                n[axis] = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
                let mut s = local;
                s[axis] = n[axis] * h[axis];
                (r + gaps[axis], n, s)
            };
            if depth <= 0.0 {
                return None;
            }
            let normal = pose.orientation * normal_local;
            let surface_world = pose.transform_point(&surface);
            Some(Contact {
                object: index,
                depth,
                normal,
                point: surface_world - normal * (0.5 * depth),
                volume: sphere_box_volume(&local, r, &h),
            })
        }
    }
}

/// All contacts of a sphere at `center` with the scene objects.
pub fn detect_contacts(center: &Vec3, radius: f64, scene: &Scene) -> Vec<Contact> {
    scene
        .objects
        .iter()
        .enumerate()
        .filter_map(|(k, o)| sphere_contact(center, radius, k, o))
        .collect()
}

/// Surface coordinate used for texture: the contact point's x coordinate in
/// the object frame.
fn texture_offset(obj: &SceneObject, point: &Vec3) -> f64 {
    let t = &obj.texture;
    if !t.enabled {
        return 0.0;
    }
    let s = (obj.pose.orientation.inverse() * (point - obj.pose.position)).x;
    t.amplitude * (2.0 * PI * s / t.wavelength).sin()
}

/// Force on the body owning the contact's sphere, with `v_rel` the velocity of
/// that body at the contact point relative to the object. Also returns the
/// normal and friction magnitudes the force was built from.
fn penalty_force(
    c: &Contact,
    obj: &SceneObject,
    v_rel: &Vec3,
    law: ForceLaw,
    v_eps: f64,
) -> (Vec3, f64, f64) {
    let depth = (c.depth + texture_offset(obj, &c.point)).max(0.0);
    let elastic = match law {
        ForceLaw::Depth => obj.stiffness * depth,
        ForceLaw::Volume => {
            let scale = if c.depth > 0.0 { depth / c.depth } else { 0.0 };
            obj.stiffness * (c.volume * scale * scale * scale).cbrt()
        }
    };
    let vn = v_rel.dot(&c.normal);
    let fn_mag = elastic + obj.damping * (-vn).max(0.0);
    let vt = v_rel - c.normal * vn;
    let speed = vt.norm();
    let ft_mag = if speed > 0.0 {
        obj.friction * fn_mag * (speed / v_eps).tanh()
    } else {
        0.0
    };
    let friction = if speed > 0.0 {
        -vt / speed * ft_mag
    } else {
        Vec3::zeros()
    };
    (c.normal * fn_mag + friction, fn_mag, ft_mag)
}

/// Reaction wrench on one object, about the object's centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Reaction {
    pub object: usize,
    pub wrench: Wrench,
    /// Force applied at the contact point, for reporting.
    pub force: Vec3,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ContactResult {
    /// Wrench on the tool about its tip centre.
    pub tool: Wrench,
    pub reactions: Vec<Reaction>,
    /// Per contact: normal-force magnitude and tangential-force magnitude.
    pub normal_forces: Vec<f64>,
    pub tangential_forces: Vec<f64>,
}

/// Penalty, friction and texture forces for the tool tip at `tool` moving with
/// `tool_twist` (base-frame axes), with equal and opposite reactions on the
/// objects.
pub fn contact_wrench(
    contacts: &[Contact],
    tool: &Pose,
    tool_twist: &Twist,
    scene: &Scene,
) -> ContactResult {
    let mut out = ContactResult::default();
    for c in contacts {
        let obj = &scene.objects[c.object];
        let lever = c.point - tool.position;
        let v_tool = tool_twist.linear + tool_twist.angular.cross(&lever);
        let v_rel = v_tool - obj.point_velocity(&c.point);
        let (f, fn_mag, ft_mag) =
            penalty_force(c, obj, &v_rel, scene.force_law, scene.friction_velocity);
        out.normal_forces.push(fn_mag);
        out.tangential_forces.push(ft_mag);
        out.tool += Wrench::new(f, lever.cross(&f));
        let r = -f;
        out.reactions.push(Reaction {
            object: c.object,
            wrench: Wrench::new(r, (c.point - obj.pose.position).cross(&r)),
            force: r,
        });
    }
    out
}

/// Corners of a box that lie below a plane, as point contacts.
fn box_plane_contacts(
    bx: &SceneObject,
    h: &Vec3,
    plane: &SceneObject,
    index: usize,
) -> Vec<Contact> {
    let n = plane.pose.orientation * Vec3::z();
    let mut out = Vec::new();
    for k in 0..8 {
        let corner = Vec3::new(
            if k & 1 == 0 { -h.x } else { h.x },
            if k & 2 == 0 { -h.y } else { h.y },
            if k & 4 == 0 { -h.z } else { h.z },
        );
        let p = bx.pose.transform_point(&corner);
        let depth = -(p - plane.pose.position).dot(&n);
        if depth > 0.0 {
            out.push(Contact {
                object: index,
                depth,
                normal: n,
                point: p,
                volume: 0.0,
            });
        }
    }
    out
}

/// Advances the dynamic objects by `dt` under the tool reactions, scene
/// gravity and object–object contacts (same force laws). Static objects are
/// left untouched.
pub fn step_scene(scene: &mut Scene, reactions: &[Reaction], dt: f64) {
    assert!(dt > 0.0, "scene step must be positive");
    let n = scene.objects.len();
    let mut wrenches = vec![Wrench::zero(); n];
    for r in reactions {
        wrenches[r.object] += r.wrench;
    }
    // object-object contacts, each unordered pair once; `mover` owns the
    // contact sphere (or box corners) and `other` the surface
    for a in 0..n {
        for b in a + 1..n {
            let (oa, ob) = (&scene.objects[a], &scene.objects[b]);
            if !oa.is_dynamic() && !ob.is_dynamic() {
                continue;
            }
            let pair = match (oa.shape, ob.shape) {
                (Shape::Sphere { radius }, _)
                    if oa.is_dynamic() || matches!(ob.shape, Shape::Plane | Shape::Box { .. }) =>
                {
                    Some((
                        a,
                        b,
                        sphere_contact(&oa.pose.position, radius, b, ob)
                            .into_iter()
                            .collect(),
                    ))
                }
                (_, Shape::Sphere { radius }) => Some((
                    b,
                    a,
                    sphere_contact(&ob.pose.position, radius, a, oa)
                        .into_iter()
                        .collect(),
                )),
                (Shape::Box { half_extents }, Shape::Plane) => {
                    Some((a, b, box_plane_contacts(oa, &half_extents, ob, b)))
                }
                (Shape::Plane, Shape::Box { half_extents }) => {
                    Some((b, a, box_plane_contacts(ob, &half_extents, oa, a)))
                }
                // box–box is not modelled
                _ => None,
            };
            let Some((mover, other, contacts)) = pair else {
                continue;
            };
            let contacts: Vec<Contact> = contacts;
            let (om, oo) = (&scene.objects[mover], &scene.objects[other]);
            for c in contacts {
                let v_rel = om.point_velocity(&c.point) - oo.point_velocity(&c.point);
                let (f, _, _) =
                    penalty_force(&c, oo, &v_rel, scene.force_law, scene.friction_velocity);
                wrenches[mover] += Wrench::new(f, (c.point - om.pose.position).cross(&f));
                wrenches[other] += Wrench::new(-f, (c.point - oo.pose.position).cross(&-f));
            }
        }
    }
    let gravity = scene.gravity;
    for (o, w) in scene.objects.iter_mut().zip(&wrenches) {
        let Some(m) = o.mass else { continue };
        o.velocity += (w.force / m + gravity) * dt;
        let r = o.pose.orientation.to_rotation_matrix();
        let inertia_world = r * o.inertia() * r.transpose();
        if let Some(inv) = inertia_world.try_inverse() {
            let l = inertia_world * o.angular_velocity;
            o.angular_velocity += inv * (w.torque - o.angular_velocity.cross(&l)) * dt;
        }
        o.pose.position += o.velocity * dt;
        let q = Quat::from_scaled_axis(o.angular_velocity * dt) * o.pose.orientation;
        o.pose.orientation = Quat::new_normalize(q.into_inner());
    }
}
