//! Analytic sphere-and-plane scenes with closed-form color, depth and
//! normals, and a ring of pinhole cameras looking at them.

use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_atomic, write_pfm, write_png_gray, write_png_rgb};
use crate::rays::{Ray, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub albedo: [f64; 3],
}

/// Horizontal plane `z = height`; unbounded unless `half_extent` limits
/// `|x|` and `|y|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plane {
    pub height: f64,
    pub albedo: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_extent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    /// Training views on the ring.
    pub views: usize,
    /// Held-out views, placed halfway between training azimuths.
    pub heldout_views: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub look_at: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            views: 8,
            heldout_views: 3,
            radius: 4.0,
            elevation_deg: 45.0,
            look_at: [0.0; 3],
            fov_deg: 40.0,
            width: 64,
            height: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    /// Direction the light travels.
    pub light_dir: [f64; 3],
    pub ambient: f64,
    #[serde(default, rename = "sphere")]
    pub spheres: Vec<Sphere>,
    #[serde(default, rename = "plane")]
    pub planes: Vec<Plane>,
    #[serde(default)]
    pub rig: RigConfig,
}

impl Default for SyntheticScene {
    /// Red unit sphere resting on a gray plane.
    fn default() -> Self {
        Self {
            light_dir: normalized([-0.4, -0.3, -1.0]),
            ambient: 0.2,
            spheres: vec![Sphere {
                center: [0.0; 3],
                radius: 1.0,
                albedo: [0.9, 0.15, 0.1],
            }],
            planes: vec![Plane {
                height: -1.0,
                albedo: [0.6, 0.6, 0.6],
                half_extent: None,
            }],
            rig: RigConfig::default(),
        }
    }
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = Vec3::from(v).normalize();
    [n[0], n[1], n[2]]
}

/// Surface point found by [`intersect`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter (in units of the ray's `d`).
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub albedo: Vec3,
}

const T_MIN: f64 = 1e-9;

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        let l = Vec3::from(self.light_dir);
        if !(l.norm() > 0.0) {
            return bad("light_dir must be nonzero".into());
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return bad(format!("ambient {} outside [0, 1]", self.ambient));
        }
        let albedos = self
            .spheres
            .iter()
            .map(|s| s.albedo)
            .chain(self.planes.iter().map(|p| p.albedo));
        for a in albedos {
            if a.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("albedo {a:?} outside [0, 1]"));
            }
        }
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0) {
                return bad(format!("sphere {i} radius must be positive"));
            }
            for t in &self.spheres[i + 1..] {
                let gap = (Vec3::from(s.center) - Vec3::from(t.center)).norm();
                if gap < s.radius + t.radius - 1e-12 {
                    return bad(format!("sphere {i} overlaps another sphere"));
                }
            }
            for p in &self.planes {
                if (s.center[2] - p.height).abs() < s.radius - 1e-12 {
                    return bad(format!("sphere {i} cuts through the plane at z = {}", p.height));
                }
            }
        }
        for p in &self.planes {
            if p.half_extent.is_some_and(|h| !(h > 0.0)) {
                return bad("plane half_extent must be positive".into());
            }
        }
        let r = &self.rig;
        if r.views == 0 || r.width == 0 || r.height == 0 {
            return bad("rig needs at least one view and a nonempty image".into());
        }
        if !(r.fov_deg > 0.0 && r.fov_deg < 180.0) || !(r.radius > 0.0) {
            return bad("rig fov must lie in (0, 180) and radius must be positive".into());
        }
        Ok(())
    }

    pub fn light(&self) -> Vec3 {
        Vec3::from(self.light_dir).normalize()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn training_cameras(&self) -> Vec<Camera> {
        camera_ring(self.rig.views, &self.rig, 0.0)
    }

    pub fn heldout_cameras(&self) -> Vec<Camera> {
        let n = self.rig.heldout_views;
        if n == 0 {
            return Vec::new();
        }
        camera_ring(n, &self.rig, 180.0 / self.rig.views as f64)
    }
}

fn hit_sphere(s: &Sphere, ray: &Ray) -> Option<Hit> {
    let c = Vec3::from(s.center);
    let oc = ray.o - c;
    let a = ray.d.dot(&ray.d);
    let b = 2.0 * ray.d.dot(&oc);
    let k = oc.dot(&oc) - s.radius * s.radius;
    let disc = b * b - 4.0 * a * k;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let t = [(-b - root) / (2.0 * a), (-b + root) / (2.0 * a)]
        .into_iter()
        .find(|&t| t > T_MIN)?;
    let point = ray.at(t);
    Some(Hit {
        t,
        point,
        normal: (point - c) / s.radius,
        albedo: Vec3::from(s.albedo),
    })
}

fn hit_plane(p: &Plane, ray: &Ray) -> Option<Hit> {
    if ray.d[2] == 0.0 {
        return None;
    }
    let t = (p.height - ray.o[2]) / ray.d[2];
    if !(t > T_MIN) {
        return None;
    }
    let point = ray.at(t);
    if p.half_extent.is_some_and(|h| point[0].abs() > h || point[1].abs() > h) {
        return None;
    }
    let up = if ray.o[2] >= p.height { 1.0 } else { -1.0 };
    Some(Hit {
        t,
        point: Vec3::new(point[0], point[1], p.height),
        normal: Vec3::new(0.0, 0.0, up),
        albedo: Vec3::from(p.albedo),
    })
}

/// Nearest intersection in front of the ray origin.
pub fn intersect(scene: &SyntheticScene, ray: &Ray) -> Option<Hit> {
    scene
        .spheres
        .iter()
        .filter_map(|s| hit_sphere(s, ray))
        .chain(scene.planes.iter().filter_map(|p| hit_plane(p, ray)))
        .min_by(|a, b| a.t.total_cmp(&b.t))
}

/// Lambertian shading with ambient term and no shadows.
pub fn shade(scene: &SyntheticScene, normal: &Vec3, albedo: &Vec3) -> Vec3 {
    let lambert = normal.dot(&-scene.light()).max(0.0);
    albedo * (scene.ambient + (1.0 - scene.ambient) * lambert)
}

/// Color seen along `ray` (black background).
pub fn trace(scene: &SyntheticScene, ray: &Ray) -> Vec3 {
    intersect(scene, ray).map_or(Vec3::zeros(), |h| shade(scene, &h.normal, &h.albedo))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Camera-to-world rotation with columns right, up, back.
    pub rotation: Matrix3<f64>,
    pub position: Vec3,
    /// Horizontal field of view.
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Ray through the center of pixel `(i, j)` (column, row); `d` has unit
    /// depth along the viewing axis.
    pub fn pixel_ray(&self, i: usize, j: usize) -> Ray {
        let f = self.focal();
        let cam = Vec3::new(
            (i as f64 + 0.5 - self.width as f64 / 2.0) / f,
            -(j as f64 + 0.5 - self.height as f64 / 2.0) / f,
            -1.0,
        );
        Ray::new(self.position, self.rotation * cam, Vec3::zeros()).expect("nonzero direction")
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

fn ring_camera(rig: &RigConfig, azimuth_deg: f64) -> Camera {
    let (az, el) = (azimuth_deg.to_radians(), rig.elevation_deg.to_radians());
    let target = Vec3::from(rig.look_at);
    let position = target + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * rig.radius;
    let back = (position - target).normalize();
    let right = Vec3::z().cross(&back).normalize();
    let up = back.cross(&right);
    Camera {
        rotation: Matrix3::from_columns(&[right, up, back]),
        position,
        fov_deg: rig.fov_deg,
        width: rig.width,
        height: rig.height,
    }
}

/// `n` cameras at equal azimuth spacing starting at `offset_deg`, aimed at
/// the rig's look-at point.
pub fn camera_ring(n: usize, rig: &RigConfig, offset_deg: f64) -> Vec<Camera> {
    (0..n)
        .map(|k| ring_camera(rig, offset_deg + 360.0 * k as f64 / n as f64))
        .collect()
}

/// Ground-truth images, row-major with the top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct GtImages {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Vec3>,
    /// Euclidean distance from the camera center; 0 on background.
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub mask: Vec<bool>,
}

pub fn render_gt(scene: &SyntheticScene, camera: &Camera) -> GtImages {
    let n = camera.pixels();
    let mut out = GtImages {
        width: camera.width,
        height: camera.height,
        rgb: vec![Vec3::zeros(); n],
        depth: vec![0.0; n],
        normal: vec![Vec3::zeros(); n],
        mask: vec![false; n],
    };
    for j in 0..camera.height {
        for i in 0..camera.width {
            let ray = camera.pixel_ray(i, j);
            if let Some(hit) = intersect(scene, &ray) {
                let p = j * camera.width + i;
                out.rgb[p] = shade(scene, &hit.normal, &hit.albedo);
                out.depth[p] = hit.t * ray.d.norm();
                out.normal[p] = hit.normal;
                out.mask[p] = true;
            }
        }
    }
    out
}

/// Writes `{stem}_rgb.png`, `{stem}_mask.png`, `{stem}_depth.pfm` and
/// `{stem}_normal.pfm` into `dir`.
pub fn write_gt(dir: &Path, stem: &str, gt: &GtImages) -> Result<()> {
    let (w, h) = (gt.width, gt.height);
    let rgb: Vec<[f64; 3]> = gt.rgb.iter().map(|c| [c[0], c[1], c[2]]).collect();
    write_png_rgb(&dir.join(format!("{stem}_rgb.png")), w, h, &rgb)?;
    let mask: Vec<f64> = gt.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_png_gray(&dir.join(format!("{stem}_mask.png")), w, h, &mask)?;
    write_pfm(&dir.join(format!("{stem}_depth.pfm")), w, h, 1, &gt.depth)?;
    let normals: Vec<f64> = gt.normal.iter().flat_map(|n| [n[0], n[1], n[2]]).collect();
    write_pfm(&dir.join(format!("{stem}_normal.pfm")), w, h, 3, &normals)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_sphere() -> SyntheticScene {
        SyntheticScene {
            planes: Vec::new(),
            ..SyntheticScene::default()
        }
    }

    #[test]
    fn intersect_examples() {
        let scene = unit_sphere();
        let ray = Ray::new(Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, -1.0), Vec3::zeros()).unwrap();
        let hit = intersect(&scene, &ray).unwrap();
        assert_eq!(hit.t, 4.0);
        assert_eq!(hit.normal, Vec3::z());

        let plane_only = SyntheticScene {
            spheres: Vec::new(),
            ..SyntheticScene::default()
        };
        let parallel = Ray::new(Vec3::new(0.0, 0.0, 1.0), Vec3::x(), Vec3::zeros()).unwrap();
        assert!(intersect(&plane_only, &parallel).is_none());

        let grazing = Ray::new(Vec3::new(-5.0, 1.0, 0.0), Vec3::x(), Vec3::zeros()).unwrap();
        let hit = intersect(&scene, &grazing).unwrap();
        assert!((hit.t - 5.0).abs() < 1e-12);
        assert!((hit.point - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn shade_examples() {
        let mut scene = unit_sphere();
        scene.ambient = 0.1;
        let l = scene.light();
        let red = Vec3::new(1.0, 0.0, 0.0);
        let lit = shade(&scene, &-l, &red);
        assert!((lit - red).norm() < 1e-15);
        let side = l.cross(&Vec3::new(0.3, 0.9, 0.1)).normalize();
        assert!((shade(&scene, &side, &red) - red * 0.1).norm() < 1e-15);
        assert_eq!(shade(&scene, &l, &red), red * 0.1);
    }

    #[test]
    fn ring_rotations_are_proper() {
        let rig = RigConfig::default();
        let one = camera_ring(1, &rig, 0.0);
        assert_eq!(one.len(), 1);
        assert!(one[0].position[1].abs() < 1e-12 && one[0].position[0] > 0.0);
        for cam in camera_ring(4, &rig, 0.0) {
            let r = cam.rotation;
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            let forward = -r.column(2);
            let to_target = (Vec3::from(rig.look_at) - cam.position).normalize();
            assert!((forward - to_target).norm() < 1e-12);
        }
        let az: Vec<f64> = camera_ring(4, &rig, 0.0)
            .iter()
            .map(|c| c.position[1].atan2(c.position[0]).to_degrees().rem_euclid(360.0))
            .collect();
        for (a, e) in az.iter().zip([0.0, 90.0, 180.0, 270.0]) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn default_scene_validates_and_round_trips() {
        let scene = SyntheticScene::default();
        scene.validate().unwrap();
        assert_eq!(SyntheticScene::from_toml(&scene.to_toml()).unwrap(), scene);
        let mut bad = scene.to_toml();
        bad.push_str("\nspecular = 1.0\n");
        assert!(SyntheticScene::from_toml(&bad).is_err());
        let mut cut = scene.clone();
        cut.planes[0].height = -0.5;
        assert!(cut.validate().is_err());
    }
}
