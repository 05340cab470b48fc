use serde::{Deserialize, Serialize};

/// A planar point in projected metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Equirectangular projection of WGS84 lon/lat onto a local plane in metres.
///
/// Adequate at city scale; distortion grows with distance from
/// `reference_lat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equirectangular {
    pub reference_lat: f64,
    #[serde(default)]
    pub reference_lon: f64,
}

impl Equirectangular {
    pub fn new(reference_lat: f64, reference_lon: f64) -> Self {
        Equirectangular {
            reference_lat,
            reference_lon,
        }
    }

    pub fn project(&self, lon: f64, lat: f64) -> Point {
        let cos_ref = self.reference_lat.to_radians().cos();
        Point {
            x: EARTH_RADIUS_M * (lon - self.reference_lon).to_radians() * cos_ref,
            y: EARTH_RADIUS_M * (lat - self.reference_lat).to_radians(),
        }
    }
}
