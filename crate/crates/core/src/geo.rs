//! Coordinate math: WGS84 <-> spherical Web Mercator (EPSG:3857), slippy-map
//! tile bounds, pixel georeferencing, great-circle distance and bearing.
//!
//! Two sphere radii are in play. Projection math uses the EPSG:3857 radius
//! ([`MERCATOR_RADIUS_M`]); distances use the mean Earth radius
//! ([`EARTH_MEAN_RADIUS_M`]).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MERCATOR_RADIUS_M: f64 = 6_378_137.0;
pub const EARTH_MEAN_RADIUS_M: f64 = 6_371_000.0;
/// Half the width of the projected world, `pi * MERCATOR_RADIUS_M`.
pub const MERCATOR_HALF_WORLD_M: f64 = 20_037_508.342_789_244;
/// Latitude at which the square Mercator world ends: `atan(sinh(pi))`.
pub const MERCATOR_MAX_LAT: f64 = 85.051_128_779_806_59;
pub const MAX_ZOOM: u8 = 30;

// Slack for values that land on a boundary through rounding.
const LAT_EPS: f64 = 1e-12;
const MERC_EPS: f64 = 1e-6;

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Checked constructor. Longitude may sit on either edge of
    /// `[-180, 180]` so that tile corners on the antimeridian are representable.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::domain(format!(
                "non-finite coordinate ({lat}, {lon})"
            )));
        }
        if lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(Error::domain(format!(
                "coordinate out of range ({lat}, {lon})"
            )));
        }
        Ok(GeoPoint { lat, lon })
    }

    /// Wraps longitude into `[-180, 180)`.
    pub fn normalized(lat: f64, lon: f64) -> Result<Self> {
        let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
        GeoPoint::new(lat, wrapped)
    }

    pub fn in_mercator_range(&self) -> bool {
        self.lat.abs() <= MERCATOR_MAX_LAT + LAT_EPS
    }
}

/// A position in EPSG:3857 meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MercatorPoint {
    pub x: f64,
    pub y: f64,
}

/// Slippy-map tile address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileId {
    pub zoom: u8,
    pub x: u32,
    pub y: u32,
}

impl TileId {
    pub fn new(zoom: u8, x: u32, y: u32) -> Result<Self> {
        if zoom > MAX_ZOOM {
            return Err(Error::domain(format!("zoom {zoom} exceeds {MAX_ZOOM}")));
        }
        let n = 1u64 << zoom;
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(Error::domain(format!(
                "tile ({x}, {y}) out of range for zoom {zoom}"
            )));
        }
        Ok(TileId { zoom, x, y })
    }

    /// Number of tiles along one axis at this zoom.
    pub fn grid_size(&self) -> u64 {
        1u64 << self.zoom
    }

    /// The four tiles one zoom level down that partition this one.
    pub fn children(&self) -> Result<[TileId; 4]> {
        let z = self.zoom + 1;
        let (x, y) = (self.x * 2, self.y * 2);
        Ok([
            TileId::new(z, x, y)?,
            TileId::new(z, x + 1, y)?,
            TileId::new(z, x, y + 1)?,
            TileId::new(z, x + 1, y + 1)?,
        ])
    }
}

impl std::fmt::Display for TileId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.zoom, self.x, self.y)
    }
}

/// Axis-aligned box in image pixels, origin at the top-left corner.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`, the layout used on the
/// backend wire protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PixelBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let all = [x_min, y_min, x_max, y_max];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain(format!("invalid pixel box {all:?}")));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(Error::domain(format!("empty pixel box {all:?}")));
        }
        Ok(PixelBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for PixelBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        PixelBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        b.as_array()
    }
}

/// Geographic bounding box in degrees. Never crosses the antimeridian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

impl GeoBox {
    pub fn new(south: f64, west: f64, north: f64, east: f64) -> Result<Self> {
        let all = [south, west, north, east];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite box {all:?}")));
        }
        if !(south < north && west < east) {
            return Err(Error::domain(format!(
                "box must satisfy south < north and west < east, got {all:?}"
            )));
        }
        if south < -90.0 || north > 90.0 || west < -180.0 || east > 180.0 {
            return Err(Error::domain(format!("box out of range {all:?}")));
        }
        Ok(GeoBox {
            south,
            west,
            north,
            east,
        })
    }

    /// Closed containment test.
    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.south && p.lat <= self.north && p.lon >= self.west && p.lon <= self.east
    }

    pub fn northwest(&self) -> GeoPoint {
        GeoPoint {
            lat: self.north,
            lon: self.west,
        }
    }

    pub fn southeast(&self) -> GeoPoint {
        GeoPoint {
            lat: self.south,
            lon: self.east,
        }
    }
}

fn check_mercator_lat(lat: f64) -> Result<()> {
    if !lat.is_finite() || lat.abs() > MERCATOR_MAX_LAT + LAT_EPS {
        return Err(Error::domain(format!(
            "latitude {lat} outside Web Mercator range ±{MERCATOR_MAX_LAT}"
        )));
    }
    Ok(())
}

pub fn geo_to_mercator(p: GeoPoint) -> Result<MercatorPoint> {
    check_mercator_lat(p.lat)?;
    if !p.lon.is_finite() || p.lon.abs() > 180.0 {
        return Err(Error::domain(format!("longitude {} out of range", p.lon)));
    }
    let x = MERCATOR_RADIUS_M * p.lon.to_radians();
    let y = MERCATOR_RADIUS_M * p.lat.to_radians().tan().asinh();
    Ok(MercatorPoint { x, y })
}

pub fn mercator_to_geo(m: MercatorPoint) -> Result<GeoPoint> {
    let limit = MERCATOR_HALF_WORLD_M + MERC_EPS;
    if !m.x.is_finite() || !m.y.is_finite() || m.x.abs() > limit || m.y.abs() > limit {
        return Err(Error::domain(format!(
            "mercator point ({}, {}) outside the projected world",
            m.x, m.y
        )));
    }
    let lon = (m.x / MERCATOR_RADIUS_M).to_degrees().clamp(-180.0, 180.0);
    let lat = (m.y / MERCATOR_RADIUS_M).sinh().atan().to_degrees();
    Ok(GeoPoint { lat, lon })
}

fn tile_lon(x: u64, n: u64) -> f64 {
    x as f64 / n as f64 * 360.0 - 180.0
}

fn tile_lat(y: u64, n: u64) -> f64 {
    (PI * (1.0 - 2.0 * y as f64 / n as f64))
        .sinh()
        .atan()
        .to_degrees()
}

/// Geographic bounds of a tile using the standard slippy-map formulas.
pub fn tile_bounds(t: TileId) -> GeoBox {
    let n = t.grid_size();
    let (x, y) = (u64::from(t.x), u64::from(t.y));
    GeoBox {
        south: tile_lat(y + 1, n),
        west: tile_lon(x, n),
        north: tile_lat(y, n),
        east: tile_lon(x + 1, n),
    }
}

/// Northwest and southeast tile corners in Mercator meters.
pub fn tile_mercator_corners(t: TileId) -> (MercatorPoint, MercatorPoint) {
    let span = 2.0 * MERCATOR_HALF_WORLD_M / t.grid_size() as f64;
    let west = -MERCATOR_HALF_WORLD_M + f64::from(t.x) * span;
    let east = -MERCATOR_HALF_WORLD_M + f64::from(t.x + 1) * span;
    let north = MERCATOR_HALF_WORLD_M - f64::from(t.y) * span;
    let south = MERCATOR_HALF_WORLD_M - f64::from(t.y + 1) * span;
    (
        MercatorPoint { x: west, y: north },
        MercatorPoint { x: east, y: south },
    )
}

/// Affine map from tile pixels to Mercator meters.
pub fn pixel_to_mercator(t: TileId, px: (f64, f64), tile_size: u32) -> Result<MercatorPoint> {
    let size = f64::from(tile_size);
    if tile_size == 0 {
        return Err(Error::domain("tile size must be positive"));
    }
    let (u, v) = px;
    if !(0.0..=size).contains(&u) || !(0.0..=size).contains(&v) {
        return Err(Error::domain(format!(
            "pixel ({u}, {v}) outside {tile_size}x{tile_size} tile"
        )));
    }
    let (nw, se) = tile_mercator_corners(t);
    Ok(MercatorPoint {
        x: nw.x + (se.x - nw.x) * (u / size),
        y: nw.y + (se.y - nw.y) * (v / size),
    })
}

/// Georeferences a pixel of a tile: affine in Mercator space, then inverse-projected.
pub fn pixel_to_geo(t: TileId, px: (f64, f64), tile_size: u32) -> Result<GeoPoint> {
    mercator_to_geo(pixel_to_mercator(t, px, tile_size)?)
}

/// The tree location for a detection box: the georeferenced box center.
pub fn box_center_geo(t: TileId, b: &PixelBox, tile_size: u32) -> Result<GeoPoint> {
    if !b.fits_within(f64::from(tile_size), f64::from(tile_size)) {
        return Err(Error::domain(format!(
            "box {:?} exceeds {tile_size}px tile",
            b.as_array()
        )));
    }
    pixel_to_geo(t, b.center(), tile_size)
}

/// Tile containing a point at the given zoom.
pub fn tile_for_point(p: GeoPoint, zoom: u8) -> Result<TileId> {
    let m = geo_to_mercator(p)?;
    let n = 1u64 << zoom;
    let span = 2.0 * MERCATOR_HALF_WORLD_M / n as f64;
    let fx = ((m.x + MERCATOR_HALF_WORLD_M) / span).floor();
    let fy = ((MERCATOR_HALF_WORLD_M - m.y) / span).floor();
    let clamp = |f: f64| f.max(0.0).min((n - 1) as f64) as u32;
    TileId::new(zoom, clamp(fx), clamp(fy))
}

/// Ground resolution of a 256px tile pixel, meters, at a latitude.
pub fn ground_resolution_m(lat: f64, zoom: u8, tile_size: u32) -> f64 {
    2.0 * PI * MERCATOR_RADIUS_M * lat.to_radians().cos()
        / (f64::from(tile_size) * (1u64 << zoom) as f64)
}

pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_MEAN_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `from` toward `to`, degrees clockwise
/// from true north in `[0, 360)`.
pub fn bearing_deg(from: GeoPoint, to: GeoPoint) -> Result<f64> {
    if from == to {
        return Err(Error::domain("bearing between coincident points"));
    }
    let (phi1, phi2) = (from.lat.to_radians(), to.lat.to_radians());
    let dlambda = (to.lon - from.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    Ok(normalize_heading(y.atan2(x).to_degrees()))
}

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Point reached by travelling `distance_m` along the great circle from `a` toward `b`.
pub fn interpolate_great_circle(a: GeoPoint, b: GeoPoint, distance_m: f64) -> GeoPoint {
    let total = haversine_m(a, b);
    if total == 0.0 {
        return a;
    }
    let delta = total / EARTH_MEAN_RADIUS_M;
    let f = distance_m / total;
    let (phi1, lam1) = (a.lat.to_radians(), a.lon.to_radians());
    let (phi2, lam2) = (b.lat.to_radians(), b.lon.to_radians());
    let sa = ((1.0 - f) * delta).sin() / delta.sin();
    let sb = (f * delta).sin() / delta.sin();
    let x = sa * phi1.cos() * lam1.cos() + sb * phi2.cos() * lam2.cos();
    let y = sa * phi1.cos() * lam1.sin() + sb * phi2.cos() * lam2.sin();
    let z = sa * phi1.sin() + sb * phi2.sin();
    GeoPoint {
        lat: z.atan2((x * x + y * y).sqrt()).to_degrees(),
        lon: y.atan2(x).to_degrees(),
    }
}

/// Destination from `start` after `distance_m` on initial bearing `bearing`.
pub fn destination(start: GeoPoint, bearing: f64, distance_m: f64) -> GeoPoint {
    let delta = distance_m / EARTH_MEAN_RADIUS_M;
    let theta = bearing.to_radians();
    let phi1 = start.lat.to_radians();
    let lam1 = start.lon.to_radians();
    let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos()).asin();
    let lam2 = lam1
        + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * phi2.sin());
    GeoPoint {
        lat: phi2.to_degrees(),
        lon: (lam2.to_degrees() + 180.0).rem_euclid(360.0) - 180.0,
    }
}
