//! Global Moran's I with inverse-distance weights.
//!
//! Weights are `w_ij = 1 / d_ij` for `i != j`, with no distance cutoff and no
//! row standardisation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geom::Point;

/// Values observed at distinct locations.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    pub locations: Vec<Point>,
    pub values: Vec<f64>,
}

impl SpatialField {
    pub fn new(locations: Vec<Point>, values: Vec<f64>) -> Result<Self> {
        if locations.len() != values.len() {
            return Err(Error::UndefinedInput(format!(
                "{} locations but {} values",
                locations.len(),
                values.len()
            )));
        }
        if locations.len() < 3 {
            return Err(Error::UndefinedInput(format!(
                "Moran's I needs at least 3 locations, got {}",
                locations.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) || locations.iter().any(|p| !p.is_finite()) {
            return Err(Error::UndefinedInput("non-finite value or location in field".into()));
        }
        Ok(SpatialField { locations, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn deviations(&self) -> Result<(Vec<f64>, f64)> {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let z: Vec<f64> = self.values.iter().map(|v| v - mean).collect();
        let m2: f64 = z.iter().map(|v| v * v).sum();
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        if m2 <= (scale * 1e-12).powi(2) * n {
            return Err(Error::DegenerateField);
        }
        Ok((z, m2))
    }
}

fn inverse_distance(a: Point, b: Point, i: usize, j: usize) -> Result<f64> {
    let d = a.distance(&b);
    if d == 0.0 {
        return Err(Error::CoincidentCentroids(i, j));
    }
    Ok(1.0 / d)
}

/// Global Moran's I, accumulating weights pair by pair without building the
/// weight matrix.
pub fn morans_i(field: &SpatialField) -> Result<f64> {
    let (z, m2) = field.deviations()?;
    let pts = &field.locations;
    let (s0, cross) = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut s0 = 0.0;
            let mut cross = 0.0;
            for j in i + 1..pts.len() {
                let w = inverse_distance(pts[i], pts[j], i, j)?;
                s0 += w;
                cross += w * z[i] * z[j];
            }
            Ok((s0, cross))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    // Symmetric weights: each unordered pair counts twice in both sums,
    // which cancels in the ratio.
    Ok(field.len() as f64 / s0 * cross / m2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoranTest {
    pub n: usize,
    pub morans_i: f64,
    /// `-1 / (n - 1)`, the expectation under spatial randomness.
    pub expected_i: f64,
    /// Pseudo p-value, one-sided in the direction of the observed deviation
    /// from `expected_i`. `None` when no permutations were run.
    pub p_value: Option<f64>,
    pub permutations: usize,
}

/// Moran's I plus a permutation test shuffling values over locations.
///
/// Each permutation draws from its own ChaCha stream derived from `seed`, so
/// the result does not depend on the worker count.
pub fn morans_i_test(field: &SpatialField, permutations: usize, seed: u64) -> Result<MoranTest> {
    let observed = morans_i(field)?;
    let n = field.len();
    let expected_i = -1.0 / (n as f64 - 1.0);
    if permutations == 0 {
        return Ok(MoranTest {
            n,
            morans_i: observed,
            expected_i,
            p_value: None,
            permutations,
        });
    }
    let (z, m2) = field.deviations()?;
    let weights = PackedWeights::new(&field.locations)?;
    let scale = n as f64 / weights.s0 / m2;
    let upper = observed >= expected_i;

    let extreme = (0..permutations)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let mut zp = z.clone();
            zp.shuffle(&mut rng);
            let stat = weights.cross(&zp) * scale;
            let hit = if upper { stat >= observed } else { stat <= observed };
            usize::from(hit)
        })
        .sum::<usize>();

    Ok(MoranTest {
        n,
        morans_i: observed,
        expected_i,
        p_value: Some((extreme + 1) as f64 / (permutations + 1) as f64),
        permutations,
    })
}

/// Upper-triangular inverse-distance weights, row-major.
struct PackedWeights {
    w: Vec<f64>,
    n: usize,
    s0: f64,
}

impl PackedWeights {
    fn new(pts: &[Point]) -> Result<Self> {
        let n = pts.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| inverse_distance(pts[i], pts[j], i, j))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let w: Vec<f64> = rows.into_iter().flatten().collect();
        let s0 = w.iter().sum();
        Ok(PackedWeights { w, n, s0 })
    }

    fn cross(&self, z: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut off = 0;
        for i in 0..self.n {
            let len = self.n - i - 1;
            let row = &self.w[off..off + len];
            let dot: f64 = row.iter().zip(&z[i + 1..]).map(|(w, zj)| w * zj).sum();
            total += z[i] * dot;
            off += len;
        }
        total
    }
}

/// JSON report for one variability field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoranReport {
    pub field: String,
    pub period: String,
    pub role: String,
    pub n: usize,
    pub morans_i: f64,
    pub p_value: Option<f64>,
    pub permutations: usize,
    pub expected_i: f64,
    pub weights: &'static str,
    pub row_standardized: bool,
    pub distance_cutoff_m: Option<f64>,
}

impl MoranReport {
    pub fn new(field: &str, period: &str, role: &str, test: &MoranTest) -> Self {
        MoranReport {
            field: field.to_owned(),
            period: period.to_owned(),
            role: role.to_owned(),
            n: test.n,
            morans_i: test.morans_i,
            p_value: test.p_value,
            permutations: test.permutations,
            expected_i: test.expected_i,
            weights: "inverse_distance",
            row_standardized: false,
            distance_cutoff_m: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::needless_range_loop)]
    fn dense_oracle(field: &SpatialField) -> f64 {
        let n = field.len();
        let mean = field.values.iter().sum::<f64>() / n as f64;
        let mut w = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    w[i][j] = 1.0 / field.locations[i].distance(&field.locations[j]);
                }
            }
        }
        let s0: f64 = w.iter().flatten().sum();
        let mut num = 0.0;
        for i in 0..n {
            for j in 0..n {
                num += w[i][j] * (field.values[i] - mean) * (field.values[j] - mean);
            }
        }
        let den: f64 = field.values.iter().map(|v| (v - mean).powi(2)).sum();
        n as f64 / s0 * num / den
    }

    fn lattice(side: usize, value: impl Fn(usize, usize) -> f64) -> SpatialField {
        let mut locs = Vec::new();
        let mut vals = Vec::new();
        for r in 0..side {
            for c in 0..side {
                locs.push(Point::new(c as f64, r as f64));
                vals.push(value(c, r));
            }
        }
        SpatialField::new(locs, vals).unwrap()
    }

    #[test]
    fn constant_field_is_degenerate() {
        let f = lattice(3, |_, _| 5.0);
        assert!(matches!(morans_i(&f), Err(Error::DegenerateField)));
    }

    #[test]
    fn coincident_locations_are_fatal() {
        let f = SpatialField::new(
            vec![Point::new(0.0, 0.0), Point::new(0.0, 0.0), Point::new(1.0, 0.0)],
            vec![1.0, 2.0, 3.0],
        )
        .unwrap();
        assert!(matches!(morans_i(&f), Err(Error::CoincidentCentroids(0, 1))));
    }

    #[test]
    fn checkerboard_is_negative_and_matches_oracle() {
        let f = lattice(2, |c, r| if (c + r) % 2 == 0 { 1.0 } else { -1.0 });
        let i = morans_i(&f).unwrap();
        assert!(i < 0.0);
        assert!((i - dense_oracle(&f)).abs() < 1e-12);
        // 2x2 unit square: side weights 1, diagonal 1/sqrt2.
        let s = 2.0f64.sqrt();
        let expected = 4.0 / (8.0 + 4.0 / s) * (-8.0 + 4.0 / s) / 4.0;
        assert!((i - expected).abs() < 1e-12);
    }

    #[test]
    fn blocks_are_positive_and_significant() {
        let f = lattice(4, |c, _| if c < 2 { 1.0 } else { -1.0 });
        let t = morans_i_test(&f, 999, 7).unwrap();
        assert!(t.morans_i > 0.0);
        assert!((t.morans_i - dense_oracle(&f)).abs() < 1e-12);
        assert!(t.p_value.unwrap() < 0.01, "{:?}", t.p_value);
    }

    #[test]
    fn affine_value_transform_preserves_i() {
        let f = lattice(5, |c, r| ((c * 7 + r * 3) % 5) as f64);
        let g = SpatialField::new(f.locations.clone(), f.values.iter().map(|v| -3.0 * v + 11.0).collect()).unwrap();
        assert!((morans_i(&f).unwrap() - morans_i(&g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn permutation_test_is_deterministic() {
        let f = lattice(6, |c, r| ((c * 13 + r * 5) % 7) as f64);
        let a = morans_i_test(&f, 99, 42).unwrap();
        let b = morans_i_test(&f, 99, 42).unwrap();
        assert_eq!(a, b);
        let none = morans_i_test(&f, 0, 42).unwrap();
        assert_eq!(none.p_value, None);
    }
}
