use nthp::assign::{
    activated_grids, build_targets, candidate_cells, default_levels, instance_scale, route_levels, DEFAULT_EPSILON,
};
use nthp::mask::{mass_center_extent, BinaryMask};
use nthp::scene::{GroundTruthInstance, GroundTruthScene, InstanceKind};
use proptest::prelude::*;

fn rect(h: usize, w: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y)).unwrap()
}

fn arb_rect() -> impl Strategy<Value = (usize, usize, BinaryMask)> {
    (8usize..300, 8usize..300).prop_flat_map(|(h, w)| {
        (0..w, 0..h).prop_flat_map(move |(x0, y0)| {
            (x0..w, y0..h).prop_map(move |(x1, y1)| (h, w, rect(h, w, x0, x1, y0, y1)))
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn activated_count_is_between_one_and_nine((h, w, m) in arb_rect(), grid in 1usize..48, eps in 0.01f64..1.0) {
        let cells = activated_grids(&m, grid, eps, (h, w)).unwrap();
        prop_assert!((1..=9).contains(&cells.len()));
        prop_assert!(cells.iter().all(|&(i, j)| i < grid && j < grid));
        prop_assert!(cells.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn larger_epsilon_never_shrinks((h, w, m) in arb_rect(), grid in 1usize..48, e1 in 0.01f64..1.0, e2 in 0.01f64..1.0) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let c = mass_center_extent::<f64>(&m).unwrap();
        let at = |e| candidate_cells((c.cx + 0.5, c.cy + 0.5), (c.width as f64, c.height as f64), grid, e, (h, w)).unwrap();
        let (small, large) = (at(lo), at(hi));
        prop_assert!(small.iter().all(|x| large.contains(x)));
        let n = |e| activated_grids(&m, grid, e, (h, w)).unwrap().len();
        prop_assert!(n(lo) <= n(hi));
    }

    #[test]
    fn every_part_routes_somewhere((_, _, m) in arb_rect()) {
        let scale = instance_scale::<f64>(&m).unwrap();
        prop_assert!(!route_levels(scale, InstanceKind::Part, &default_levels()).unwrap().is_empty());
    }

    #[test]
    fn each_cell_has_one_owner((h, w, a) in arb_rect(), seed in 0usize..1000) {
        // a second instance inside the image, shifted
        let b = rect(h, w, seed % w, w - 1, (seed / 7) % h, h - 1);
        let scene = GroundTruthScene {
            height: h,
            width: w,
            instances: vec![
                GroundTruthInstance { kind: InstanceKind::Human, category: 0, parent: None, mask: a.clone() },
                GroundTruthInstance { kind: InstanceKind::Human, category: 0, parent: None, mask: b },
            ],
        };
        let targets = build_targets(&scene, &default_levels(), DEFAULT_EPSILON).unwrap();
        for t in &targets {
            for (cell, &label) in t.category_target.iter().enumerate() {
                prop_assert_eq!(label != 0, t.mask_targets.contains_key(&cell));
            }
        }
    }
}

#[test]
fn quoted_center_region_example() {
    // a 9x9 square spanning pixels 46..=54 of a 100x100 image at grid 10
    let m = rect(100, 100, 46, 54, 46, 54);
    let cells = activated_grids(&m, 10, 0.2, (100, 100)).unwrap();
    assert_eq!(cells, vec![(4, 4), (4, 5), (5, 4), (5, 5)]);
}

#[test]
fn scale_routing_table() {
    let specs = default_levels();
    let ids = |s| route_levels(s, InstanceKind::Part, &specs).unwrap();
    use nthp::assign::LevelId::*;
    assert_eq!(ids(20.0), vec![F1]);
    assert_eq!(ids(50.0), vec![F1, F2]);
    assert_eq!(ids(150.0), vec![F2, F3]);
    assert_eq!(ids(300.0), vec![F3, F4]);
    assert_eq!(ids(1000.0), vec![F4]);
    assert_eq!(route_levels(10.0, InstanceKind::Human, &specs).unwrap(), vec![F5]);
}
