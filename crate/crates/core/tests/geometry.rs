use nalgebra::Matrix3;
use proptest::prelude::*;
use reflray::rays::{flip_direction, flip_origin, kept_fraction, mask_flipped, Ray, Vec3};
use reflray::scenes::{intersect, trace, RigConfig, Sphere, SyntheticScene, camera_ring, render_gt};

fn unit() -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-4)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn reflection_matches_householder_form(d in unit(), n in unit()) {
        // Negated reflection through the plane orthogonal to n.
        let householder = Matrix3::identity() - n * n.transpose() * 2.0;
        let oracle = -(householder * d);
        let flipped = flip_direction(&d, &n);
        prop_assert!((flipped - oracle).norm() < 1e-12);
    }

    #[test]
    fn reflection_is_an_isometric_involution(d in unit(), n in unit()) {
        let f = flip_direction(&d, &n);
        prop_assert!((f.norm() - 1.0).abs() < 1e-12);
        prop_assert!((f.dot(&n) - d.dot(&n)).abs() < 1e-12);
        prop_assert!((flip_direction(&f, &n) - d).norm() < 1e-12);
        prop_assert!((f + d).cross(&n).norm() < 1e-12);
    }

    #[test]
    fn flipped_ray_passes_through_the_surface_point(
        p in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
        d in unit(),
        n in unit(),
        t in 0.1f64..8.0,
    ) {
        let p = Vec3::new(p.0, p.1, p.2);
        let f = flip_direction(&d, &n);
        let o = flip_origin(&p, t, &f);
        prop_assert!((o + f * t - p).norm() < 1e-12);
    }

    #[test]
    fn mask_is_monotone_in_threshold(d in unit(), n in unit(), a in 1.0f64..180.0, b in 1.0f64..180.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(!mask_flipped(&d, &n, lo) || mask_flipped(&d, &n, hi));
        prop_assert!(mask_flipped(&d, &n, 180.0));
    }
}

#[test]
fn kept_fraction_grows_with_threshold() {
    let d: Vec<Vec3> = (0..200)
        .map(|i| Vec3::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos(), -1.0).normalize())
        .collect();
    let n: Vec<Vec3> = (0..200)
        .map(|i| Vec3::new((i as f64 * 0.53).cos(), (i as f64 * 0.29).sin(), 0.4).normalize() * 0.7)
        .collect();
    let peak = vec![true; 200];
    let fractions: Vec<f64> = [30.0, 60.0, 90.0, 120.0, 180.0]
        .iter()
        .map(|&tau| kept_fraction(&d, &n, &peak, tau))
        .collect();
    assert!(fractions.windows(2).all(|p| p[0] <= p[1]), "{fractions:?}");
    assert_eq!(fractions[4], 1.0);
}

fn sphere_only() -> SyntheticScene {
    SyntheticScene {
        planes: Vec::new(),
        spheres: vec![Sphere {
            center: [0.2, -0.1, 0.3],
            radius: 1.3,
            albedo: [0.3, 0.7, 0.5],
        }],
        ..SyntheticScene::default()
    }
}

/// Flipping about the true normal of a Lambertian sphere lands on the
/// same point, so the flipped ray sees the same color.
#[test]
fn flipped_rays_are_photo_consistent_on_a_lambertian_sphere() {
    let scene = sphere_only();
    let center = Vec3::from(scene.spheres[0].center);
    let mut checked = 0;
    for cam in camera_ring(6, &scene.rig, 10.0) {
        for j in (0..cam.height).step_by(5) {
            for i in (0..cam.width).step_by(5) {
                let ray = cam.pixel_ray(i, j);
                let Some(hit) = intersect(&scene, &ray) else { continue };
                let n = (hit.point - center).normalize();
                let f = flip_direction(&ray.d, &n);
                let o = flip_origin(&hit.point, hit.t, &f);
                let flipped = Ray::new(o, f, Vec3::zeros()).unwrap();
                let back = intersect(&scene, &flipped).expect("flipped ray hits");
                assert!((back.point - hit.point).norm() < 1e-8);
                assert!((trace(&scene, &flipped) - trace(&scene, &ray)).norm() < 1e-9);
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

/// Silhouette width of a sphere centered on the optical axis matches the
/// pinhole projection of its tangent cone.
#[test]
fn sphere_silhouette_matches_projected_radius() {
    let rig = RigConfig {
        width: 201,
        height: 201,
        elevation_deg: 0.0,
        radius: 5.0,
        fov_deg: 40.0,
        ..RigConfig::default()
    };
    let scene = SyntheticScene {
        planes: Vec::new(),
        spheres: vec![Sphere {
            center: [0.0; 3],
            radius: 1.0,
            albedo: [1.0; 3],
        }],
        rig: rig.clone(),
        ..SyntheticScene::default()
    };
    let cam = &camera_ring(1, &rig, 0.0)[0];
    let gt = render_gt(&scene, cam);
    let row = cam.height / 2;
    let covered = (0..cam.width).filter(|&i| gt.mask[row * cam.width + i]).count() as f64;
    let half_angle = (1.0f64 / 5.0).asin();
    let expected = 2.0 * cam.focal() * half_angle.tan();
    assert!((covered - expected).abs() <= 2.0, "{covered} vs {expected}");
}
