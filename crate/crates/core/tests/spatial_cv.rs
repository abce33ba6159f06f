mod common;

use cropmap::raster_io::{rasterize_labels, LabeledPolygon};
use cropmap::spatial_cv::{apply_dead_zone, assign_folds_reseeding, build_block_grid};
use cropmap::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_invariants_hold_on_random_layouts(seed in any::<u64>(), cells in 4usize..10, k in 2usize..6, block_cells in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = common::random_layout(&mut rng, cells, k * 3);
        let labels = rasterize_labels(&layout.polys, &layout.georef, layout.size, layout.size).unwrap();
        let block = 100.0 * block_cells as f64;
        prop_assume!(!matches!(assign_folds_reseeding(&layout.polys, block, k, seed), Err(Error::Fold(_))));
        let r = common::check_cv_layout(&layout, &labels, k, block, seed);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    /// Folds follow the block holding each centroid, computed here from the
    /// grid origin directly.
    #[test]
    fn polygon_fold_is_the_fold_of_its_centroid_block(seed in any::<u64>(), cells in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = common::random_layout(&mut rng, cells, 6);
        // clustered layouts can leave a fold empty under every seed
        let r = assign_folds_reseeding(&layout.polys, 170.0, 3, seed);
        prop_assume!(!matches!(r, Err(Error::Fold(_))));
        let (grid, assign) = r.unwrap();
        prop_assert!(assign.fold_sizes().iter().all(|&n| n > 0));
        for p in &layout.polys {
            let (x, y) = p.centroid().unwrap();
            let col = (((x - grid.origin.0) / grid.block_size).floor() as usize).min(grid.cols - 1);
            let row = (((y - grid.origin.1) / grid.block_size).floor() as usize).min(grid.rows - 1);
            prop_assert_eq!(assign.polygon_fold[&p.id], grid.block_to_fold[row * grid.cols + col]);
        }
    }

    #[test]
    fn dead_zone_matches_pairwise_distances(seed in any::<u64>(), radius in 0.0f64..600.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = common::random_layout(&mut rng, 6, 6);
        let (_, assign) = assign_folds_reseeding(&layout.polys, 200.0, 3, seed).unwrap();
        let dz = apply_dead_zone(&assign, &layout.polys, radius).unwrap();
        for f in 0..3 {
            for p in &layout.polys {
                let (px, py) = p.centroid().unwrap();
                let near = assign.polygon_fold[&p.id] != f
                    && layout.polys.iter().any(|q| {
                        let (qx, qy) = q.centroid().unwrap();
                        assign.polygon_fold[&q.id] == f && ((px - qx).powi(2) + (py - qy).powi(2)).sqrt() < radius
                    });
                prop_assert_eq!(dz.excluded[f].contains(&p.id), near);
            }
        }
    }
}

#[test]
fn too_few_polygons_or_folds_are_rejected() {
    let polys = vec![
        LabeledPolygon::rect("a", 0.0, 0.0, 10.0, 10.0, 1),
        LabeledPolygon::rect("b", 500.0, 500.0, 510.0, 510.0, 0),
    ];
    assert!(matches!(assign_folds_reseeding(&polys, 100.0, 3, 1), Err(Error::Fold(_))));
    assert!(matches!(assign_folds_reseeding(&polys, 100.0, 1, 1), Err(Error::Config(_))));
    assert!(matches!(assign_folds_reseeding(&polys, -1.0, 2, 1), Err(Error::Config(_))));
    let one_block = polys[0].bbox().union(&polys[1].bbox());
    assert!(matches!(build_block_grid(&one_block, 1e4, 2, 0), Err(Error::Fold(_))));
}

#[test]
fn negative_dead_zone_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layout = common::random_layout(&mut rng, 4, 4);
    let (_, assign) = assign_folds_reseeding(&layout.polys, 100.0, 2, 0).unwrap();
    assert!(matches!(apply_dead_zone(&assign, &layout.polys, -5.0), Err(Error::Config(_))));
}
