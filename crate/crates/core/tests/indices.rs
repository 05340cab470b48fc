mod common;

use busvar::geostats::{morans_i, morans_i_test, SpatialField};
use busvar::variability::{spatial_variability, temporal_variability};
use busvar::{Error, Point};
use common::{blocks, checkerboard, dense_morans_i, lattice, oracle_sv, oracle_tv, random_trips, trip};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn origin_offset_gives_500_metres() {
    let trips = [trip((0.0, 0.0), (50.0, 50.0), 0, 60), trip((300.0, 400.0), (50.0, 50.0), 0, 60)];
    assert!((spatial_variability(&trips).unwrap() - 500.0).abs() < 1e-9);
}

#[test]
fn both_ends_offset_gives_707_metres() {
    let trips = [trip((0.0, 0.0), (0.0, 0.0), 0, 60), trip((300.0, 400.0), (300.0, 400.0), 0, 60)];
    assert!((spatial_variability(&trips).unwrap() - 707.1068).abs() < 1e-4);
}

#[test]
fn half_hour_shift_gives_0_70711_hours() {
    let trips = [
        trip((0.0, 0.0), (0.0, 0.0), 7 * 3600, 7 * 3600 + 1800),
        trip((0.0, 0.0), (0.0, 0.0), 7 * 3600 + 1800, 8 * 3600),
    ];
    assert!((temporal_variability(&trips).unwrap() - 0.5 * 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn repeated_trip_dilutes_the_mean() {
    let a = trip((0.0, 0.0), (0.0, 0.0), 0, 60);
    let b = trip((300.0, 400.0), (0.0, 0.0), 0, 60);
    let sv = spatial_variability(&[a.clone(), a, b]).unwrap();
    assert!((sv - 1000.0 / 3.0).abs() < 1e-9);
}

#[test]
fn single_trip_is_undefined() {
    let one = [trip((0.0, 0.0), (1.0, 1.0), 0, 60)];
    assert!(matches!(spatial_variability(&one), Err(Error::UndefinedInput(_))));
    assert!(matches!(temporal_variability(&one), Err(Error::UndefinedInput(_))));
}

#[test]
fn streaming_indices_match_the_pair_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.gen_range(2..=50);
        let trips = random_trips(&mut rng, n);
        let (sv, want_sv) = (spatial_variability(&trips).unwrap(), oracle_sv(&trips));
        let (tv, want_tv) = (temporal_variability(&trips).unwrap(), oracle_tv(&trips));
        assert!((sv - want_sv).abs() <= 1e-9 * want_sv.max(1.0), "{sv} vs {want_sv}");
        assert!((tv - want_tv).abs() <= 1e-9 * want_tv.max(1.0), "{tv} vs {want_tv}");
    }
}

#[test]
fn moran_matches_dense_oracle_on_unit_checkerboard() {
    let field = SpatialField::new(lattice(2), vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    let i = morans_i(&field).unwrap();
    assert!(i < 0.0);
    assert!((i - dense_morans_i(&lattice(2), &[1.0, -1.0, -1.0, 1.0])).abs() < 1e-12);
}

#[test]
fn moran_clustered_blocks_are_positive_and_significant() {
    let field = SpatialField::new(lattice(8), blocks(8)).unwrap();
    let test = morans_i_test(&field, 999, 1).unwrap();
    assert!(test.morans_i > 0.0);
    let p = test.p_value.unwrap();
    assert!(p < 0.01, "p = {p}");
    assert!((test.expected_i + 1.0 / 63.0).abs() < 1e-12);
}

#[test]
fn moran_checkerboard_is_negative() {
    let field = SpatialField::new(lattice(8), checkerboard(8)).unwrap();
    assert!(morans_i(&field).unwrap() < 0.0);
}

#[test]
fn moran_constant_field_is_degenerate() {
    let field = SpatialField::new(lattice(3), vec![2.0; 9]).unwrap();
    assert!(matches!(morans_i(&field), Err(Error::DegenerateField)));
}

#[test]
fn moran_coincident_locations_are_rejected() {
    let pts = vec![Point::new(0.0, 0.0), Point::new(0.0, 0.0), Point::new(1.0, 0.0)];
    let err = SpatialField::new(pts, vec![1.0, 2.0, 3.0]).and_then(|f| morans_i(&f));
    assert!(matches!(err, Err(Error::CoincidentCentroids(0, 1))));
}

#[test]
fn permutation_test_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<Point> = (0..40).map(|_| Point::new(rng.gen_range(0.0..1e4), rng.gen_range(0.0..1e4))).collect();
    let vals: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
    let field = SpatialField::new(pts, vals).unwrap();
    let a = morans_i_test(&field, 199, 9).unwrap();
    let b = morans_i_test(&field, 199, 9).unwrap();
    assert_eq!(a, b);
    let p = a.p_value.unwrap();
    assert!(p > 0.0 && p <= 1.0);
}

#[test]
fn unstructured_fields_are_rarely_significant() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let trials = 200;
    let mut inside = 0;
    for seed in 0..trials {
        let pts: Vec<Point> = (0..30).map(|_| Point::new(rng.gen_range(0.0..5e3), rng.gen_range(0.0..5e3))).collect();
        let vals: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = morans_i_test(&SpatialField::new(pts, vals).unwrap(), 999, seed).unwrap().p_value.unwrap();
        inside += usize::from((0.01..=0.99).contains(&p));
    }
    assert!(inside * 100 >= trials as usize * 95, "{inside}/{trials} inside [0.01, 0.99]");
}

proptest! {
    #[test]
    fn variability_is_order_invariant_and_nonnegative(seed in any::<u64>(), n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trips = random_trips(&mut rng, n);
        let mut rev = trips.clone();
        rev.reverse();
        let sv = spatial_variability(&trips).unwrap();
        prop_assert!(sv >= 0.0);
        prop_assert!((sv - spatial_variability(&rev).unwrap()).abs() < 1e-9 * sv.max(1.0));
        let tv = temporal_variability(&trips).unwrap();
        prop_assert!((tv - temporal_variability(&rev).unwrap()).abs() < 1e-9 * tv.max(1.0));
    }

    #[test]
    fn translating_every_trip_leaves_sv_unchanged(seed in any::<u64>(), dx in -1e4..1e4f64, dy in -1e4..1e4f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trips = random_trips(&mut rng, 8);
        let moved: Vec<_> = trips
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.origin = Point::new(t.origin.x + dx, t.origin.y + dy);
                t.destination = Point::new(t.destination.x + dx, t.destination.y + dy);
                t
            })
            .collect();
        let (a, b) = (spatial_variability(&trips).unwrap(), spatial_variability(&moved).unwrap());
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn moran_is_invariant_to_affine_value_changes(seed in any::<u64>(), scale in 0.1..100.0f64, shift in -50.0..50.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Point> = (0..30).map(|_| Point::new(rng.gen_range(0.0..5e3), rng.gen_range(0.0..5e3))).collect();
        let vals: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let moved: Vec<f64> = vals.iter().map(|v| v * scale + shift).collect();
        let a = morans_i(&SpatialField::new(pts.clone(), vals.clone()).unwrap()).unwrap();
        let b = morans_i(&SpatialField::new(pts.clone(), moved).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((a - dense_morans_i(&pts, &vals)).abs() < 1e-9);
    }
}
