use labelguide::bevgrid::{foreground_mask, gt_heatmap, soft_foreground_mask, BevGridSpec, HeatmapParams};
use labelguide::detectors::{encode_maps, head_decode};
use labelguide::synthworld::{canonical_yaw, BoxLabel, WorldSpec};
use proptest::prelude::*;

fn grid() -> BevGridSpec {
    BevGridSpec::for_world(&WorldSpec { extent: 20.0, ..WorldSpec::default() }, 32)
}

prop_compose! {
    fn a_box()(class_id in 0u32..3, x in -9.9f32..9.9, y in 0.1f32..19.9, w in 0.4f32..2.5, l in 0.4f32..5.0, yaw in -std::f32::consts::PI..std::f32::consts::PI) -> BoxLabel {
        BoxLabel { class_id, x, y, w, l, yaw }
    }
}

proptest! {
    #[test]
    fn cell_lookup_inverts_cell_centers(row in 0usize..32, col in 0usize..32) {
        let g = grid();
        let (x, y) = g.cell_center(row, col);
        prop_assert_eq!(g.cell_of(x, y), Some((row, col)));
    }

    #[test]
    fn heatmap_is_bounded_and_peaks_at_centers(boxes in prop::collection::vec(a_box(), 1..5)) {
        let g = grid();
        let h = gt_heatmap(&boxes, 3, &g, &HeatmapParams::default()).unwrap();
        prop_assert!(h.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for b in &boxes {
            let (r, c) = g.cell_of(b.x as f64, b.y as f64).unwrap();
            prop_assert_eq!(h.at(b.class_id as usize, r, c), 1.0);
        }
    }

    #[test]
    fn masks_shrink_as_tau_grows(boxes in prop::collection::vec(a_box(), 1..5), lo in 0.05f64..0.5, hi in 0.5f64..0.99) {
        let h = gt_heatmap(&boxes, 3, &grid(), &HeatmapParams::default()).unwrap();
        let (a, b) = (foreground_mask(&h, lo), foreground_mask(&h, hi));
        prop_assert!(b.n_p <= a.n_p && b.n_p >= 1);
        prop_assert!(a.mask.iter().zip(&b.mask).all(|(x, y)| *x || !*y));
        let soft = soft_foreground_mask(&h, lo);
        prop_assert_eq!(&soft.mask, &a.mask);
        prop_assert!(soft.weights.iter().zip(&a.weights).all(|(s, w)| *s <= *w && *s >= 0.0));
    }

    #[test]
    fn encoded_boxes_decode_back(b in a_box()) {
        let g = grid();
        let maps = encode_maps::<f64>(&[b], 3, &g, &HeatmapParams::default()).unwrap();
        let dets = head_decode(&maps, &g, 0.5, 10).remove(0);
        prop_assert_eq!(dets.len(), 1);
        let d = dets[0].label;
        prop_assert_eq!(d.class_id, b.class_id);
        prop_assert!(((d.x - b.x) as f64).hypot((d.y - b.y) as f64) < 1e-4);
        prop_assert!((d.w / b.w - 1.0).abs() < 1e-4 && (d.l / b.l - 1.0).abs() < 1e-4);
        prop_assert!(canonical_yaw(d.yaw as f64 - b.yaw as f64).abs() < 1e-4);
    }
}
