//! Geographic coordinates in a local equirectangular approximation.
//!
//! Offsets, distances and polygon geometry all use the same local frame:
//! latitude differences map directly to kilometres, longitude differences
//! are scaled by the cosine of the region's reference latitude.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Kilometres per degree along a great circle.
pub const KM_PER_DEG: f64 = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() || !(-180.0..=180.0).contains(&lon) || lat.abs() >= 90.0 {
            return Err(Error::Geometry(format!("invalid point lon={lon} lat={lat}")));
        }
        Ok(Self { lon, lat })
    }
}

/// `[lat - lat0, (lon - lon0) cos(lat0)]` in degree units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationOffset(pub [f64; 2]);

impl LocationOffset {
    pub fn km(self) -> [f64; 2] {
        [self.0[0] * KM_PER_DEG, self.0[1] * KM_PER_DEG]
    }
}

pub fn location_offset(p: GeoPoint, origin: GeoPoint) -> LocationOffset {
    let c = origin.lat.to_radians().cos();
    LocationOffset([p.lat - origin.lat, (p.lon - origin.lon) * c])
}

/// Equirectangular distance in km, with the east-west scale fixed by `lat0`.
pub fn distance_km(a: GeoPoint, b: GeoPoint, lat0: f64) -> f64 {
    let c = lat0.to_radians().cos();
    let dphi = a.lat - b.lat;
    let dlam = (a.lon - b.lon) * c;
    KM_PER_DEG * (dphi * dphi + dlam * dlam).sqrt()
}

/// `[a.len(), b.len()]` matrix of [`distance_km`].
pub fn pairwise_distance_km(a: &[GeoPoint], b: &[GeoPoint], lat0: f64) -> Tensor {
    let mut data = Vec::with_capacity(a.len() * b.len());
    for &p in a {
        for &q in b {
            data.push(distance_km(p, q, lat0));
        }
    }
    Tensor::from_vec(&[a.len(), b.len()], data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceBiasConfig {
    /// Distance at which the bias crosses zero (km).
    pub d0_km: f64,
    /// Temperature (km).
    pub tau_km: f64,
}

impl Default for DistanceBiasConfig {
    fn default() -> Self {
        Self {
            d0_km: 10.0,
            tau_km: 25.0,
        }
    }
}

impl DistanceBiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_km > 0.0) || !self.d0_km.is_finite() {
            return Err(Error::config(format!(
                "distance bias needs tau > 0 (d0={}, tau={})",
                self.d0_km, self.tau_km
            )));
        }
        Ok(())
    }
}

/// `tanh((d0 - d) / tau)`.
pub fn distance_bias(d_km: f64, cfg: &DistanceBiasConfig) -> f64 {
    ((cfg.d0_km - d_km) / cfg.tau_km).tanh()
}

/// Planar km frame anchored at a reference point; `x` east, `y` north.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame {
    pub origin: GeoPoint,
}

impl LocalFrame {
    pub fn new(origin: GeoPoint) -> Self {
        Self { origin }
    }

    pub fn to_geo(&self, x_km: f64, y_km: f64) -> GeoPoint {
        let c = self.origin.lat.to_radians().cos();
        GeoPoint {
            lon: self.origin.lon + x_km / (KM_PER_DEG * c),
            lat: self.origin.lat + y_km / KM_PER_DEG,
        }
    }

    pub fn to_km(&self, p: GeoPoint) -> [f64; 2] {
        let o = location_offset(p, self.origin);
        [o.0[1] * KM_PER_DEG, o.0[0] * KM_PER_DEG]
    }
}
