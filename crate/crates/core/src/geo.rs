//! Geographic coordinates, great-circle distance, and the equirectangular
//! grid used for origin-destination cell aggregation.

use serde::{Deserialize, Serialize};

use crate::num::Real;

/// Mean Earth radius in meters (IUGG value, 6371.0088 km).
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// A WGS84-style coordinate in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    /// Latitude in [-90, 90] and longitude in [-180, 180].
    pub fn in_bounds(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }

    pub fn haversine_m(&self, other: &GeoPoint) -> f64 {
        haversine_m::<f64>(self.lat, self.lon, other.lat, other.lon)
    }
}

/// Great-circle distance in meters between two (lat, lon) pairs in degrees.
pub fn haversine_m<T: Real>(lat1: T, lon1: T, lat2: T, lon2: T) -> T {
    let radius = T::from_f64(EARTH_RADIUS_M).unwrap();
    let two = T::from_f64(2.0).unwrap();
    let phi1 = lat1.to_radians();
    let phi2 = lat2.to_radians();
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / two).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / two).sin().powi(2);
    two * radius * a.sqrt().min(T::one()).asin()
}

/// Equirectangular projection centered on a reference point, used to assign
/// coordinates to fixed-size square grid cells. The projection center must be
/// shared between the two datasets being compared for cell keys to line up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridProjection {
    pub center: GeoPoint,
    pub cell_size_m: f64,
}

impl GridProjection {
    pub fn new(center: GeoPoint, cell_size_m: f64) -> Self {
        Self { center, cell_size_m }
    }

    /// Local planar coordinates in meters relative to the center.
    pub fn project(&self, p: &GeoPoint) -> (f64, f64) {
        let x = EARTH_RADIUS_M
            * (p.lon - self.center.lon).to_radians()
            * self.center.lat.to_radians().cos();
        let y = EARTH_RADIUS_M * (p.lat - self.center.lat).to_radians();
        (x, y)
    }

    /// Integer cell index of a coordinate.
    pub fn cell(&self, p: &GeoPoint) -> (i32, i32) {
        let (x, y) = self.project(p);
        (
            (x / self.cell_size_m).floor() as i32,
            (y / self.cell_size_m).floor() as i32,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Oracle: spherical law of cosines, an independent route to the same
    // great-circle distance.
    fn law_of_cosines_m(a: &GeoPoint, b: &GeoPoint) -> f64 {
        let phi1 = a.lat.to_radians();
        let phi2 = b.lat.to_radians();
        let dl = (b.lon - a.lon).to_radians();
        let c = (phi1.sin() * phi2.sin() + phi1.cos() * phi2.cos() * dl.cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_M * c.acos()
    }

    #[test]
    fn haversine_zero_for_identical_points() {
        let p = GeoPoint::new(22.54, 114.06);
        assert_eq!(p.haversine_m(&p), 0.0);
    }

    #[test]
    fn haversine_matches_law_of_cosines() {
        let pts = [
            (GeoPoint::new(22.54, 114.06), GeoPoint::new(22.55, 114.07)),
            (GeoPoint::new(0.0, 0.0), GeoPoint::new(0.0, 1.0)),
            (GeoPoint::new(-33.86, 151.21), GeoPoint::new(-33.87, 151.22)),
        ];
        for (a, b) in pts {
            let h = a.haversine_m(&b);
            let o = law_of_cosines_m(&a, &b);
            assert!((h - o).abs() < 1e-3, "haversine {h} vs oracle {o}");
        }
    }

    #[test]
    fn one_degree_longitude_at_equator() {
        // One degree of longitude on the equator is R * pi / 180.
        let d = haversine_m::<f64>(0.0, 0.0, 0.0, 1.0);
        let expected = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        assert!((d - expected).abs() < 1e-6);
    }

    #[test]
    fn haversine_generic_over_f32() {
        let d32 = haversine_m::<f32>(22.54, 114.06, 22.55, 114.07);
        let d64 = haversine_m::<f64>(22.54, 114.06, 22.55, 114.07);
        assert!((d32 as f64 - d64).abs() < 1.0);
    }

    #[test]
    fn grid_cells_are_stable_around_the_center() {
        let proj = GridProjection::new(GeoPoint::new(22.54, 114.06), 1000.0);
        assert_eq!(proj.cell(&GeoPoint::new(22.54, 114.06)), (0, 0));
        // ~1.2 km north is one cell away.
        let north = GeoPoint::new(22.54 + 1200.0 / 111_195.0, 114.06);
        assert_eq!(proj.cell(&north).1, 1);
    }
}
