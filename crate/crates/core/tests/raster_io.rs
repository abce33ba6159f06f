use chrono::NaiveDate;
use cropmap::raster_io::{
    label_polygons_to_geojson, parse_label_polygons, rasterize_labels, read_bandstack, read_mask, write_bandstack,
    write_mask, Band, BandStack, GeoRef, LabeledPolygon, Mask, TimeKey, UNLABELED,
};
use proptest::prelude::*;

fn stack_strategy() -> impl Strategy<Value = BandStack> {
    (1usize..4, 1usize..9, 1usize..9, any::<bool>(), 0.5f64..60.0).prop_flat_map(|(nt, h, w, dated, px)| {
        let bands = vec![Band::B02, Band::B04, Band::B08, Band::Scl];
        let n = nt * bands.len() * h * w;
        proptest::collection::vec(any::<u16>(), n).prop_map(move |mut pixels| {
            let times: Vec<TimeKey> = (0..nt)
                .map(|t| {
                    if dated {
                        TimeKey::Date(NaiveDate::from_ymd_opt(2020, 1, 3).unwrap() + chrono::Days::new(5 * t as u64))
                    } else {
                        TimeKey::Week(t as u32 * 3)
                    }
                })
                .collect();
            let mut s = BandStack::new(
                GeoRef::north_up(500000.0, 3600000.0, px, "EPSG:32643"),
                bands.clone(),
                times,
                h,
                w,
            );
            // SCL codes must stay in 0..=11
            for t in 0..nt {
                let o = (t * 4 + 3) * h * w;
                for v in &mut pixels[o..o + h * w] {
                    *v %= 12;
                }
            }
            s.pixels = pixels;
            s
        })
    })
}

/// Even-odd ray casting, independent of the library's implementation.
fn inside(ring: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut c = false;
    let n = ring.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi, xj, yj) = (ring[i][0], ring[i][1], ring[j][0], ring[j][1]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            c = !c;
        }
        j = i;
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bandstack_round_trip(s in stack_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bstk");
        write_bandstack(&s, &p).unwrap();
        let back = read_bandstack(&p).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn mask_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let values: Vec<u8> = (0..h * w).map(|i| [0u8, 1, 255][((seed >> (i % 60)) as usize + i) % 3]).collect();
        let m = Mask { georef: GeoRef::north_up(0.0, 100.0, 10.0, "EPSG:32643"), width: w, height: h, values };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_mask(&m, &p).unwrap();
        prop_assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn rasterize_matches_point_in_polygon(
        tris in proptest::collection::vec(
            (0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0, 0.0f64..200.0),
            1..4,
        ),
        cls in 0u8..2,
    ) {
        // one class for all so overlaps are allowed
        let polys: Vec<LabeledPolygon> = tris
            .iter()
            .enumerate()
            .map(|(i, t)| LabeledPolygon::simple(format!("t{i}"), vec![[t.0, t.1], [t.2, t.3], [t.4, t.5]], cls))
            .collect();
        let area = |t: &(f64, f64, f64, f64, f64, f64)| ((t.2 - t.0) * (t.5 - t.1) - (t.4 - t.0) * (t.3 - t.1)).abs();
        prop_assume!(tris.iter().all(|t| area(t) > 1.0));
        let g = GeoRef::north_up(0.0, 200.0, 10.0, "EPSG:32643");
        let Ok(lr) = rasterize_labels(&polys, &g, 20, 20) else {
            return Err(TestCaseError::reject("invalid geometry"));
        };
        for r in 0..20 {
            for c in 0..20 {
                let (x, y) = (c as f64 * 10.0 + 5.0, 200.0 - r as f64 * 10.0 - 5.0);
                let want = polys.iter().any(|p| inside(&p.parts[0][0], x, y));
                prop_assert_eq!(lr.label(r, c).is_some(), want, "pixel ({}, {})", r, c);
                prop_assert_eq!(lr.polygon_at(r, c).is_some(), want);
            }
        }
        let counts = lr.class_counts();
        prop_assert_eq!(counts[0] + counts[1], lr.labeled_count());
        prop_assert_eq!(rasterize_labels(&polys, &g, 20, 20).unwrap(), lr);
    }
}

#[test]
fn geojson_round_trip_rasterizes_identically() {
    let polys = vec![
        LabeledPolygon::rect("a", 10.0, 10.0, 55.0, 48.0, 1),
        LabeledPolygon::simple("b", vec![[60.0, 60.0], [95.0, 62.0], [70.0, 95.0]], 0),
    ];
    let parsed = parse_label_polygons(&label_polygons_to_geojson(&polys)).unwrap();
    assert_eq!(parsed, polys);
    let g = GeoRef::north_up(0.0, 100.0, 5.0, "EPSG:32643");
    let a = rasterize_labels(&polys, &g, 20, 20).unwrap();
    let b = rasterize_labels(&parsed, &g, 20, 20).unwrap();
    assert_eq!(a, b);
    assert!(a.values.contains(&UNLABELED));
}

#[test]
fn conflicting_overlap_is_an_error() {
    let polys = vec![
        LabeledPolygon::rect("a", 0.0, 0.0, 50.0, 50.0, 1),
        LabeledPolygon::rect("b", 20.0, 20.0, 80.0, 80.0, 0),
    ];
    let g = GeoRef::north_up(0.0, 100.0, 10.0, "EPSG:32643");
    assert!(rasterize_labels(&polys, &g, 10, 10).is_err());
}
