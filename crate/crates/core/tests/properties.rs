use nalgebra::{Matrix4, Vector3, Vector4};
use proptest::prelude::*;

use splatbody::deform::{deform_with_weights, polar_rotation};
use splatbody::gaussian::{build_covariance, GaussianSet, Space};
use splatbody::io::checkpoint::Checkpoint;
use splatbody::io::ply::PlyCloud;
use splatbody::math;
use splatbody::optim::OptimizerState;
use splatbody::priors::{build_knn, iso_loss, knn_weight, rigid_loss, rot_loss, IsoMode};
use splatbody::raster::{render, Camera, RenderSettings};
use splatbody::skinning::{bake_weight_grid, bone_transforms, lbs_transform, GridSettings, PoseParams, ShapeParams, Skeleton, SkinnedTemplate};
use splatbody::trainer::{max_activated_scale, split_with_scale, TrainConfig};

fn quat() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(-1.0..1.0f64).prop_filter("away from zero", |q| math::quat_norm(q) > 0.2)
}

fn unit(q: &[f64; 4]) -> [f64; 4] {
    math::quat_scale(q, 1.0 / math::quat_norm(q))
}

fn rigid(q: &[f64; 4], t: [f64; 3]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&math::unit_quat_to_rotmat(&unit(q)));
    for a in 0..3 {
        m[(a, 3)] = t[a];
    }
    m
}

prop_compose! {
    fn gaussians(min: usize, max: usize, spread: f64)(
        rows in prop::collection::vec(
            (prop::array::uniform3(-spread..spread), quat(), prop::array::uniform3(-4.0..-2.0f64), -2.0..2.0f64, prop::array::uniform3(-1.0..1.0f64)),
            min..max,
        )
    ) -> GaussianSet {
        let mut set = GaussianSet::empty(0, Space::Canonical);
        for (p, q, s, o, c) in rows {
            set.positions.push(p);
            set.rotations.push(q);
            set.log_scales.push(s);
            set.opacity_logits.push(o);
            set.sh_coeffs.extend(c);
        }
        set
    }
}

fn observation(mut set: GaussianSet) -> GaussianSet {
    set.space = Space::Observation;
    set
}

fn camera(eye: [f64; 3]) -> Camera {
    Camera::look_at(Vector3::from(eye), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.1), 40.0, 24, 24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn covariance_is_spd(q in quat(), s in prop::array::uniform3(-9.0..1.0f64)) {
        let c = build_covariance(&q, &s).unwrap();
        prop_assert!((c - c.transpose()).abs().max() <= 1e-15 * c.abs().max());
        let chol = c.cholesky();
        prop_assert!(chol.is_some());
        let l = chol.unwrap().l();
        prop_assert!((0..3).all(|i| l[(i, i)] * l[(i, i)] > 1e-18));
    }

    #[test]
    fn render_is_a_convex_combination(set in gaussians(1, 12, 0.5), bg in prop::array::uniform3(0.0..1.0f64)) {
        let img = render(&observation(set), &camera([0.3, 0.4, 2.5]), bg, &RenderSettings::default()).unwrap();
        prop_assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn render_ignores_input_order(set in gaussians(2, 12, 0.5), seed in any::<u64>()) {
        let set = observation(set);
        let n = set.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left((seed as usize) % n);
        if seed % 2 == 0 {
            order.reverse();
        }
        let mut shuffled = GaussianSet::empty(0, Space::Observation);
        for &i in &order {
            shuffled.positions.push(set.positions[i]);
            shuffled.rotations.push(set.rotations[i]);
            shuffled.log_scales.push(set.log_scales[i]);
            shuffled.opacity_logits.push(set.opacity_logits[i]);
            shuffled.sh_coeffs.extend_from_slice(set.sh(i));
        }
        let cam = camera([0.2, -0.3, 2.0]);
        let a = render(&set, &cam, [1.0; 3], &RenderSettings::default()).unwrap();
        let b = render(&shuffled, &cam, [1.0; 3], &RenderSettings::default()).unwrap();
        prop_assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn moving_camera_and_scene_together_changes_nothing(
        set in gaussians(1, 10, 0.4),
        q in quat(),
        t in prop::array::uniform3(-3.0..3.0f64),
    ) {
        let set = observation(set);
        let m = rigid(&q, t);
        let qu = unit(&q);
        let mut moved = set.clone();
        for i in 0..set.len() {
            let p = m * Vector4::new(set.positions[i][0], set.positions[i][1], set.positions[i][2], 1.0);
            moved.positions[i] = [p.x, p.y, p.z];
            moved.rotations[i] = math::quat_mul(&qu, &set.rotations[i]);
        }
        let cam = camera([0.5, 0.2, 2.4]);
        let mut cam2 = cam.clone();
        let r = m.fixed_view::<3, 3>(0, 0).transpose();
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        let back = -(r * Vector3::from(t));
        for a in 0..3 {
            inv[(a, 3)] = back[a];
        }
        cam2.world_to_camera = cam.world_to_camera * inv;
        cam2.world_to_camera.fixed_view_mut::<1, 4>(3, 0).copy_from(&Matrix4::<f64>::identity().fixed_view::<1, 4>(3, 0));
        let a = render(&set, &cam, [0.2, 0.5, 0.9], &RenderSettings::default()).unwrap();
        let b = render(&moved, &cam2, [0.2, 0.5, 0.9], &RenderSettings::default()).unwrap();
        let worst = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1e-9, "max pixel difference {worst:e}");
    }

    #[test]
    fn polar_factor_matches_svd(m in prop::array::uniform9(-1.0..1.0f64)) {
        let a = nalgebra::Matrix3::from_row_slice(&m) + nalgebra::Matrix3::identity() * 1.5;
        prop_assume!(a.determinant() > 1e-2);
        let r = polar_rotation(&a).unwrap();
        let svd = a.svd(true, true);
        let oracle = svd.u.unwrap() * svd.v_t.unwrap();
        prop_assert!((r - oracle).abs().max() <= 1e-9);
    }

    #[test]
    fn deformation_preserves_appearance_and_inverts(
        set in gaussians(1, 8, 0.5),
        raw in prop::collection::vec(prop::array::uniform3(0.01..1.0f64), 8),
        angles in prop::collection::vec(prop::array::uniform3(-0.8..0.8f64), 3),
        root in prop::array::uniform3(-1.0..1.0f64),
    ) {
        let skeleton = Skeleton {
            parents: vec![None, Some(0), Some(1)],
            rest_local_transforms: vec![
                Matrix4::identity(),
                rigid(&[1.0, 0.0, 0.0, 0.2], [0.0, 0.3, 0.0]),
                rigid(&[1.0, 0.1, 0.0, 0.0], [0.2, 0.0, 0.1]),
            ],
        };
        let weights: Vec<Vec<f64>> = raw[..set.len()].iter().map(|w| {
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        }).collect();
        let pose = PoseParams { joint_rotations: angles, root_translation: root };
        let (obs, record) = deform_with_weights(&set, weights, &skeleton, &pose, &ShapeParams::default()).unwrap();
        prop_assert_eq!(&obs.log_scales, &set.log_scales);
        prop_assert_eq!(&obs.opacity_logits, &set.opacity_logits);
        prop_assert_eq!(&obs.sh_coeffs, &set.sh_coeffs);
        for i in 0..set.len() {
            let inv = record.transforms[i].try_inverse().unwrap();
            let back = inv * Vector4::new(obs.positions[i][0], obs.positions[i][1], obs.positions[i][2], 1.0);
            for a in 0..3 {
                prop_assert!((back[a] - set.positions[i][a]).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn grid_weights_partition_unity(
        verts in prop::collection::vec(prop::array::uniform3(-0.5..0.5f64), 8..30),
        raw in prop::collection::vec(prop::array::uniform3(0.0..1.0f64), 30),
        probes in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 40),
    ) {
        let weights = raw[..verts.len()].iter().map(|w| {
            let w = [w[0] + 1e-3, w[1], w[2]];
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v / s).collect()
        }).collect();
        let template = SkinnedTemplate { vertices: verts, weights };
        let grid = bake_weight_grid(&template, &GridSettings { resolution: [12; 3], dilation_steps: 2 }).unwrap();
        for p in &probes {
            let w = grid.sample(p);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
        }
        let skeleton = Skeleton {
            parents: vec![None, Some(0), Some(0)],
            rest_local_transforms: vec![Matrix4::identity(), rigid(&[1.0, 0.0, 0.3, 0.0], [0.1, 0.2, 0.0]), rigid(&[0.5, 0.5, 0.0, 0.0], [0.0, -0.2, 0.0])],
        };
        let bones = bone_transforms(&skeleton, &PoseParams::rest(3), &ShapeParams::default()).unwrap();
        let d = lbs_transform(&grid.sample(&probes[0]), &bones).unwrap();
        prop_assert!((d - Matrix4::identity()).abs().max() <= 1e-9);
    }

    #[test]
    fn priors_vanish_under_rigid_motion(
        set in gaussians(25, 40, 0.1),
        q in quat(),
        t in prop::array::uniform3(-2.0..2.0f64),
    ) {
        let graph = build_knn(&set.positions, 10, 2000.0).unwrap();
        let m = rigid(&q, t);
        let qu = unit(&q);
        let mut moved = observation(set.clone());
        for i in 0..set.len() {
            let p = m * Vector4::new(set.positions[i][0], set.positions[i][1], set.positions[i][2], 1.0);
            moved.positions[i] = [p.x, p.y, p.z];
            moved.rotations[i] = math::quat_mul(&qu, &set.rotations[i]);
        }
        prop_assert!(rigid_loss(&graph, &set, &moved).unwrap().loss <= 1e-9);
        prop_assert!(iso_loss(&graph, &set, &moved, IsoMode::Signed).unwrap().loss.abs() <= 1e-9);
        prop_assert!(iso_loss(&graph, &set, &moved, IsoMode::Absolute).unwrap().loss <= 1e-9);
        prop_assert!(rot_loss(&graph, &set, &moved).unwrap().loss <= 1e-9);
        let same = observation(set.clone());
        prop_assert!(rigid_loss(&graph, &set, &same).unwrap().loss <= 1e-15);
        prop_assert!(rot_loss(&graph, &set, &same).unwrap().loss <= 1e-12);
    }

    #[test]
    fn priors_are_nonnegative(a in gaussians(25, 40, 0.1), b in gaussians(40, 41, 0.1)) {
        let graph = build_knn(&a.positions, 8, 2000.0).unwrap();
        let mut observed = observation(a.clone());
        for i in 0..a.len() {
            observed.positions[i] = b.positions[i];
            observed.rotations[i] = b.rotations[i];
        }
        prop_assert!(rigid_loss(&graph, &a, &observed).unwrap().loss >= 0.0);
        prop_assert!(rot_loss(&graph, &a, &observed).unwrap().loss >= 0.0);
        prop_assert!(iso_loss(&graph, &a, &observed, IsoMode::Absolute).unwrap().loss >= 0.0);
    }

    #[test]
    fn neighbor_weights_are_symmetric(set in gaussians(12, 40, 0.2)) {
        let graph = build_knn(&set.positions, 6, 2000.0).unwrap();
        for i in 0..set.len() {
            for (&j, &w) in graph.neighbors_of(i).iter().zip(graph.weights_of(i)) {
                prop_assert!(j != i);
                prop_assert!(w > 0.0 && w <= 1.0);
                if let Some(slot) = graph.neighbors_of(j).iter().position(|&x| x == i) {
                    prop_assert_eq!(graph.weights_of(j)[slot], w);
                }
            }
        }
        prop_assert_eq!(knn_weight(0.0, 2000.0), 1.0);
    }

    #[test]
    fn splitting_keeps_shapes_consistent(
        set in gaussians(1, 20, 0.5),
        big in prop::collection::vec(-3.5..-1.5f64, 20),
        rounds in 1usize..4,
        eps in 0.03..0.2f64,
    ) {
        let mut set = set;
        for i in 0..set.len() {
            set.log_scales[i][i % 3] = big[i];
        }
        let mut opt = OptimizerState::new(set.len(), 0, 2, 6);
        for _ in 0..rounds {
            let before_max = max_activated_scale(&set);
            let expected = set.len() + set.log_scales.iter().filter(|s| s.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)).exp() > eps).count();
            let r = split_with_scale(&mut set, eps, &mut opt).unwrap();
            prop_assert_eq!(set.len(), expected);
            prop_assert_eq!(r.count_after, expected);
            prop_assert_eq!(opt.gaussians.rows(), set.len());
            prop_assert_eq!(opt.gaussians.sh_coeffs.m.len(), set.sh_coeffs.len());
            prop_assert_eq!(opt.gaussians.rotations.v.len(), 4 * set.len());
            prop_assert!(max_activated_scale(&set) <= before_max);
            set.validate().unwrap();
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(set in gaussians(0, 15, 2.0), step in any::<u64>(), frames in 0usize..4) {
        let mut opt = OptimizerState::new(set.len(), 0, frames, 9);
        opt.step = step / 3;
        opt.gaussians.positions.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1 - 0.3);
        let ck = Checkpoint {
            config: TrainConfig { seed: step, ..Default::default() },
            step,
            gaussians: set,
            poses: vec![PoseParams { joint_rotations: vec![[0.1, -0.2, 1e-17]; 2], root_translation: [3.0, 0.0, -1.0] }; frames],
            optimizer: opt,
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn ply_bytes_round_trip(set in gaussians(0, 15, 2.0)) {
        let cloud = PlyCloud::from_set(&set).unwrap();
        let bytes = cloud.to_bytes();
        let back = PlyCloud::parse(&bytes).unwrap();
        prop_assert_eq!(&back, &cloud);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
