//! Property tests for the mesh algebra and data round-trips.

use proptest::prelude::*;

use immunerec::data::{read_series_csv, write_series_csv, ClinicalPoint, ClinicalSeries};
use immunerec::mesh::{flagged_intervals, jumps, refine_where, transfer, PiecewiseFn, TimeMesh};

fn coarse_mesh_and_values() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // Random interval count with random values and a random refinement mask.
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(0.0..1.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn refinement_is_nested_and_transfer_round_trips((values, mask) in coarse_mesh_and_values()) {
        let n = values.len();
        let mesh = TimeMesh::uniform(n as f64, 1.0).unwrap();
        let f = PiecewiseFn::new(mesh.clone(), values.clone()).unwrap();
        // Indicator from the mask: flagged intervals get weight 1.
        let indicator = PiecewiseFn::new(
            mesh.clone(),
            mask.iter().map(|&m| if m > 0.5 { 1.0 } else { 0.0 }).collect(),
        ).unwrap();
        let fine = refine_where(&mesh, &indicator, 0.5).unwrap();

        // Nestedness is exact.
        prop_assert!(mesh.is_nested_in(&fine));

        // Transfer up and back is the identity on nested meshes.
        let up = transfer(&f, &fine).unwrap();
        let down = transfer(&up, &mesh).unwrap();
        prop_assert_eq!(down.values(), f.values());

        // Jumps of the refined function vanish at inserted midpoints.
        let j = jumps(&up);
        for (i, &t) in fine.nodes()[1..fine.node_count() - 1].iter().enumerate() {
            if !mesh.nodes().contains(&t) {
                prop_assert_eq!(j[i], 0.0);
            }
        }
    }

    #[test]
    fn l2_norm_is_positive_definite(values in prop::collection::vec(-100.0..100.0f64, 1..50)) {
        let mesh = TimeMesh::uniform(values.len() as f64, 1.0).unwrap();
        let f = PiecewiseFn::new(mesh, values.clone()).unwrap();
        let norm = f.l2_norm();
        prop_assert!(norm >= 0.0);
        prop_assert_eq!(norm == 0.0, values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flagged_intervals_respect_the_threshold(
        values in prop::collection::vec(-10.0..10.0f64, 1..60),
        beta in 0.01..0.99f64,
    ) {
        let mesh = TimeMesh::uniform(values.len() as f64, 1.0).unwrap();
        let f = PiecewiseFn::new(mesh, values.clone()).unwrap();
        let flags = flagged_intervals(&f, beta).unwrap();
        let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (k, v) in values.iter().enumerate() {
            let should_flag = max > 0.0 && v.abs() >= beta * max;
            prop_assert_eq!(flags.contains(&k), should_flag);
        }
    }

    #[test]
    fn clinical_csv_round_trips(
        log10_v in prop::collection::vec(0.0..9.0f64, 7),
        sigma in prop::collection::vec(1.0..2e6f64, 8),
        times in prop::collection::vec(0.01..80.0f64, 7),
    ) {
        // Build strictly increasing times starting at 0.
        let mut t = 0.0;
        let mut points = vec![ClinicalPoint { time_days: 0.0, log10_v: 0.0, sigma: sigma[0] }];
        for i in 0..7 {
            t += times[i];
            points.push(ClinicalPoint { time_days: t, log10_v: log10_v[i], sigma: sigma[i + 1] });
        }
        let series = ClinicalSeries::new("prop", points).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&series, &mut buf).unwrap();
        let back = read_series_csv(buf.as_slice(), "prop").unwrap();
        prop_assert_eq!(series, back);
    }
}
