use std::f64::consts::PI;

use proptest::prelude::*;
use viewforge::camera::{
    encode_pose, relative_pose, spherical_to_extrinsics, wrap_delta, SphericalPose,
};

fn pose() -> impl Strategy<Value = SphericalPose> {
    (0.05..PI - 0.05, -10.0..10.0f64, 1.5..2.5f64)
        .prop_map(|(t, p, r)| SphericalPose::new(t, p, r).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn extrinsics_are_rigid_and_look_at_origin(p in pose()) {
        let e = spherical_to_extrinsics(&p);
        let rrt = e.rotation * e.rotation.transpose();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((rrt[(i, j)] - want).abs() < 1e-9);
            }
        }
        prop_assert!((e.rotation.determinant() - 1.0).abs() < 1e-9);
        prop_assert!((e.center() - p.position()).norm() < 1e-9);
        let o = e.world_to_camera(&nalgebra::Vector3::zeros());
        prop_assert!(o.x.abs() < 1e-9 && o.y.abs() < 1e-9);
        prop_assert!((o.z - p.radius).abs() < 1e-9);
    }

    #[test]
    fn relative_then_offset_recovers_target(a in pose(), b in pose()) {
        let rel = relative_pose(&a, &b);
        prop_assert!(rel.d_phi > -PI - 1e-12 && rel.d_phi <= PI + 1e-12);
        let c = a.offset(&rel).unwrap();
        prop_assert!((c.theta - b.theta).abs() < 1e-9);
        prop_assert!((c.radius - b.radius).abs() < 1e-9);
        prop_assert!(wrap_delta(c.phi - b.phi).abs() < 1e-9);
        let enc = encode_pose(&rel).0;
        prop_assert!((enc[1] * enc[1] + enc[2] * enc[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_relative_is_identity(a in pose()) {
        let enc = encode_pose(&relative_pose(&a, &a)).0;
        prop_assert_eq!(enc, [0.0, 0.0, 1.0, 0.0]);
    }
}
