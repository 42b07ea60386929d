mod common;

use common::*;
use proptest::prelude::*;
use splatmask::imaging::Image;
use splatmask::io;
use splatmask::losses::{spatial_mask_loss, ssim, total_loss};
use splatmask::model::{Gaussian3D, Scene};
use splatmask::rasterizer::{render_mask_inverse, render_mask_proposed, trace_ray};
use splatmask::schedule::{actions_at, prune, ScheduleConfig};

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f64..1.0, w * h * 3).prop_map(move |d| Image::new(w, h, 3, d).unwrap())
}

fn gaussian() -> impl Strategy<Value = Gaussian3D> {
    (
        proptest::array::uniform3(-2.0f64..2.0),
        proptest::array::uniform3(-5.0f64..0.0),
        proptest::array::uniform4(-1.0f64..1.0),
        -6.0f64..6.0,
        proptest::array::uniform3(0.0f64..1.0),
        proptest::array::uniform3(-0.3f64..0.3),
        -20.0f64..20.0,
    )
        .prop_filter("non-degenerate rotation", |t| t.2.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|(p, s, q, o, c, c1, m)| {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut g = Gaussian3D::new(p, s, q.map(|v| v / n), o, c);
            g.color[1] = c1;
            g.mask_logit = m;
            g
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_is_one_on_identical_images(a in image(12, 12)) {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric(a in image(12, 12), b in image(12, 12)) {
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn spatial_loss_is_non_negative(f in proptest::collection::vec(0.0f64..20.0, 1..64)) {
        let l = spatial_mask_loss(&f);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn total_loss_is_monotone_in_mask_loss(l_rgb in 0.0f64..2.0, a in 0.0f64..100.0, b in 0.0f64..100.0, lambda in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(total_loss(l_rgb, lo, lambda).unwrap() <= total_loss(l_rgb, hi, lambda).unwrap());
    }

    #[test]
    fn trace_transmittance_stays_in_unit_interval(
        a in proptest::collection::vec(0.0f64..0.999, 1..64),
        bits in proptest::collection::vec(any::<bool>(), 64),
    ) {
        let m: Vec<f64> = a.iter().zip(&bits).map(|(_, b)| if *b { 1.0 } else { 0.0 }).collect();
        let ray = trace_ray(&a, &m);
        prop_assert_eq!(ray[0].transmittance, 1.0);
        for w in ray.windows(2) {
            prop_assert!(w[1].transmittance <= w[0].transmittance);
            prop_assert!(w[1].transmittance >= 0.0);
        }
    }

    #[test]
    fn inverse_mask_is_a_weighted_mean(
        a in proptest::collection::vec(0.0f64..0.999, 1..64),
        m in proptest::collection::vec(0.0f64..1.0, 64),
    ) {
        let ray = trace_ray(&a, &m[..a.len()]);
        let f = render_mask_inverse(&ray, 1e-6);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&f));
    }

    #[test]
    fn many_unimportant_fragments_give_a_large_mask(k in 1usize..64, alpha in 0.0f64..0.1) {
        // Every α_i T_i ≤ α ≤ 0.1, so each term is at least 0.9.
        let ray = trace_ray(&vec![alpha; k], &vec![1.0; k]);
        let bound = 0.9 * k as f64 / (1.0 + k as f64).ln();
        prop_assert!(render_mask_proposed(&ray) >= bound - 1e-12);
    }

    #[test]
    fn text_scene_round_trip(gs in proptest::collection::vec(gaussian(), 0..20), sh in 0u8..=1) {
        let scene = Scene::from_gaussians(sh, gs.clone());
        let mut buf = Vec::new();
        io::write_scene_text(&scene, &mut buf).unwrap();
        let back = io::read_scene_text(&buf[..]).unwrap();
        prop_assert_eq!(back.sh_degree, sh);
        for (a, b) in scene.gaussians.iter().zip(&back.gaussians) {
            let mut expect = a.clone();
            if sh == 0 {
                expect.color[1..].iter_mut().for_each(|c| *c = [0.0; 3]);
            }
            prop_assert_eq!(&expect, b);
        }
    }

    #[test]
    fn binary_scene_round_trip(gs in proptest::collection::vec(gaussian(), 1..20)) {
        let scene = Scene::from_gaussians(1, gs);
        let mut buf = Vec::new();
        io::write_scene_binary(&scene, &mut buf).unwrap();
        let back = io::read_scene_binary(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), scene.len());
        for (a, b) in scene.gaussians.iter().zip(&back.gaussians) {
            for (x, y) in a.to_params().iter().zip(b.to_params()) {
                prop_assert_eq!(*x as f32 as f64, y);
            }
        }
    }

    #[test]
    fn prune_only_removes(gs in proptest::collection::vec(gaussian(), 1..40), seed in any::<u64>()) {
        let mut scene = Scene::from_gaussians(0, gs);
        scene.gaussians[0].mask_logit = 20.0;
        let before = scene.clone();
        let report = prune(&mut scene, &mut rng(seed), 10).unwrap();
        prop_assert_eq!(report.survivors, scene.len());
        prop_assert_eq!(report.removed.len() + scene.len(), before.len());
        for g in &scene.gaussians {
            let orig = before.gaussians.iter().find(|o| o.id == g.id).unwrap();
            prop_assert_eq!(orig, g);
        }
    }

    #[test]
    fn saturated_logits_are_never_pruned(n in 1usize..200, seed in any::<u64>()) {
        let mut scene = Scene::from_gaussians(0, (0..n).map(|_| {
            Gaussian3D::new([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0, [0.5; 3])
        }));
        let report = prune(&mut scene, &mut rng(seed), 10).unwrap();
        prop_assert!(report.removed.is_empty());
    }

    #[test]
    fn schedule_is_a_pure_function(iter in 0usize..40_000) {
        let cfg = ScheduleConfig::default();
        let a = actions_at(iter, &cfg);
        prop_assert_eq!(a, actions_at(iter, &cfg.clone()));
        if a.densify {
            prop_assert!(a.prune);
        }
        prop_assert_eq!(a.recovery_only, iter > cfg.total_iters);
    }
}
