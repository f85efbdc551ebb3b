//! Acquisition planning: which aerial tiles cover an area of interest, where
//! to sample street panoramas, and which views to request at each sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{
    haversine_m, interpolate_great_circle, tile_bounds, tile_for_point, GeoBox, GeoPoint, TileId,
    MERCATOR_MAX_LAT,
};
use crate::linker::StreetImageRequest;

pub const DEFAULT_SPACING_M: f64 = 8.0;
pub const DEFAULT_HEADINGS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const DEFAULT_FOV: f64 = 90.0;
pub const MAX_PLAN_ZOOM: u8 = 22;

/// Boundary of a survey area: a lat/lon box or a simple polygon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Box(GeoBox),
    /// Ring of vertices, not repeated at the end.
    Polygon(Vec<GeoPoint>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaOfInterest {
    pub name: String,
    pub boundary: Boundary,
}

impl AreaOfInterest {
    pub fn from_box(name: impl Into<String>, b: GeoBox) -> Result<Self> {
        let aoi = AreaOfInterest {
            name: name.into(),
            boundary: Boundary::Box(b),
        };
        aoi.validate()?;
        Ok(aoi)
    }

    pub fn from_polygon(name: impl Into<String>, mut ring: Vec<GeoPoint>) -> Result<Self> {
        if ring.len() > 1 && ring.first() == ring.last() {
            ring.pop();
        }
        let aoi = AreaOfInterest {
            name: name.into(),
            boundary: Boundary::Polygon(ring),
        };
        aoi.validate()?;
        Ok(aoi)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |p: &GeoPoint| p.lat.abs() <= MERCATOR_MAX_LAT && p.lon.abs() <= 180.0;
        match &self.boundary {
            Boundary::Box(b) => {
                GeoBox::new(b.south, b.west, b.north, b.east)?;
                if !in_range(&b.northwest()) || !in_range(&b.southeast()) {
                    return Err(Error::domain(format!(
                        "area `{}` extends beyond Web Mercator latitudes",
                        self.name
                    )));
                }
            }
            Boundary::Polygon(ring) => {
                if ring.len() < 3 {
                    return Err(Error::domain("polygon needs at least 3 distinct vertices"));
                }
                if let Some(p) = ring.iter().find(|p| !in_range(p)) {
                    return Err(Error::domain(format!(
                        "polygon vertex ({}, {}) outside Web Mercator range",
                        p.lat, p.lon
                    )));
                }
                if polygon_area(ring).abs() == 0.0 {
                    return Err(Error::domain("polygon has zero area"));
                }
                if !is_simple(ring) {
                    return Err(Error::domain("polygon is self-intersecting"));
                }
            }
        }
        Ok(())
    }

    pub fn bbox(&self) -> GeoBox {
        match &self.boundary {
            Boundary::Box(b) => *b,
            Boundary::Polygon(ring) => {
                let mut b = GeoBox {
                    south: f64::INFINITY,
                    west: f64::INFINITY,
                    north: f64::NEG_INFINITY,
                    east: f64::NEG_INFINITY,
                };
                for p in ring {
                    b.south = b.south.min(p.lat);
                    b.north = b.north.max(p.lat);
                    b.west = b.west.min(p.lon);
                    b.east = b.east.max(p.lon);
                }
                b
            }
        }
    }

    /// Closed point-in-area test.
    pub fn contains(&self, p: GeoPoint) -> bool {
        match &self.boundary {
            Boundary::Box(b) => b.contains(p),
            Boundary::Polygon(ring) => self.bbox().contains(p) && point_in_ring(ring, p),
        }
    }

    /// Whether the area and the box overlap with positive area.
    pub fn overlaps_box(&self, b: &GeoBox) -> bool {
        match &self.boundary {
            Boundary::Box(a) => {
                a.west < b.east && b.west < a.east && a.south < b.north && b.south < a.north
            }
            Boundary::Polygon(ring) => polygon_area(&clip_to_box(ring, b)).abs() > 0.0,
        }
    }
}

/// Shoelace area in squared degrees (signed, counter-clockwise positive).
fn polygon_area(ring: &[GeoPoint]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        acc += a.lon * b.lat - b.lon * a.lat;
    }
    acc / 2.0
}

fn orient(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

fn segments_intersect(a: GeoPoint, b: GeoPoint, c: GeoPoint, d: GeoPoint) -> bool {
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

fn is_simple(ring: &[GeoPoint]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn point_in_ring(ring: &[GeoPoint], p: GeoPoint) -> bool {
    let n = ring.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if orient(a, b, p) == 0.0 && on_segment(a, b, p) {
            return true;
        }
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let lon_at = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
            if p.lon < lon_at {
                inside = !inside;
            }
        }
    }
    inside
}

/// Sutherland–Hodgman clip of a ring against an axis-aligned box.
fn clip_to_box(ring: &[GeoPoint], b: &GeoBox) -> Vec<GeoPoint> {
    #[derive(Clone, Copy)]
    enum Edge {
        West(f64),
        East(f64),
        South(f64),
        North(f64),
    }
    let inside = |e: Edge, p: GeoPoint| match e {
        Edge::West(v) => p.lon >= v,
        Edge::East(v) => p.lon <= v,
        Edge::South(v) => p.lat >= v,
        Edge::North(v) => p.lat <= v,
    };
    let cross = |e: Edge, a: GeoPoint, c: GeoPoint| match e {
        Edge::West(v) | Edge::East(v) => {
            let t = (v - a.lon) / (c.lon - a.lon);
            GeoPoint {
                lat: a.lat + t * (c.lat - a.lat),
                lon: v,
            }
        }
        Edge::South(v) | Edge::North(v) => {
            let t = (v - a.lat) / (c.lat - a.lat);
            GeoPoint {
                lat: v,
                lon: a.lon + t * (c.lon - a.lon),
            }
        }
    };
    let mut out = ring.to_vec();
    for e in [
        Edge::West(b.west),
        Edge::East(b.east),
        Edge::South(b.south),
        Edge::North(b.north),
    ] {
        if out.is_empty() {
            break;
        }
        let input = std::mem::take(&mut out);
        let mut prev = *input.last().unwrap();
        for &cur in &input {
            match (inside(e, cur), inside(e, prev)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cross(e, prev, cur));
                    out.push(cur);
                }
                (false, true) => out.push(cross(e, prev, cur)),
                (false, false) => {}
            }
            prev = cur;
        }
    }
    out
}

/// The aerial tiles of a survey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub zoom: u8,
    pub tile_size: u32,
    pub tiles: Vec<TileId>,
}

/// Every tile at `zoom` whose bounds overlap the area, in row-major order.
///
/// Tiles are treated as half-open (`[west, east) x (south, north]`), so a box
/// that coincides with one tile's bounds claims that tile alone.
pub fn enumerate_tiles(aoi: &AreaOfInterest, zoom: u8, tile_size: u32) -> Result<TilePlan> {
    if zoom > MAX_PLAN_ZOOM {
        return Err(Error::domain(format!(
            "zoom {zoom} exceeds {MAX_PLAN_ZOOM}"
        )));
    }
    aoi.validate()?;
    let bb = aoi.bbox();
    let nw = tile_for_point(bb.northwest(), zoom)?;
    let se = tile_for_point(bb.southeast(), zoom)?;
    let max_index = ((1u64 << zoom) - 1) as u32;
    let mut tiles = Vec::new();
    for y in nw.y.saturating_sub(1)..=(se.y + 1).min(max_index) {
        for x in nw.x.saturating_sub(1)..=(se.x + 1).min(max_index) {
            let t = TileId::new(zoom, x, y)?;
            if aoi.overlaps_box(&tile_bounds(t)) {
                tiles.push(t);
            }
        }
    }
    Ok(TilePlan {
        zoom,
        tile_size,
        tiles,
    })
}

/// A street centerline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    vertices: Vec<GeoPoint>,
}

impl Polyline {
    pub fn new(vertices: Vec<GeoPoint>) -> Result<Self> {
        if vertices.len() < 2 {
            return Err(Error::domain("polyline needs at least 2 vertices"));
        }
        if vertices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("polyline has repeated consecutive vertices"));
        }
        Ok(Polyline { vertices })
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    pub fn length_m(&self) -> f64 {
        self.vertices
            .windows(2)
            .map(|w| haversine_m(w[0], w[1]))
            .sum()
    }
}

/// Points every `spacing` meters of arclength along the line, starting at
/// its first vertex. A line shorter than `spacing` yields its start only.
pub fn sample_street_points(line: &Polyline, spacing: f64) -> Result<Vec<GeoPoint>> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::domain(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    // absorbs rounding so a 16 m line sampled at 8 m includes its end
    const EPS_M: f64 = 1e-6;
    let mut out = vec![line.vertices[0]];
    let mut next = spacing;
    let mut travelled = 0.0;
    for w in line.vertices.windows(2) {
        let seg = haversine_m(w[0], w[1]);
        while next <= travelled + seg + EPS_M {
            let along = next - travelled;
            out.push(if along >= seg {
                w[1]
            } else {
                interpolate_great_circle(w[0], w[1], along)
            });
            next += spacing;
        }
        travelled += seg;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetSample {
    pub location: GeoPoint,
    pub headings: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetSamplePlan {
    pub spacing_m: f64,
    pub samples: Vec<StreetSample>,
}

pub fn plan_street_samples(
    lines: &[Polyline],
    spacing: f64,
    headings: &[f64],
) -> Result<StreetSamplePlan> {
    let mut samples = Vec::new();
    for line in lines {
        for p in sample_street_points(line, spacing)? {
            samples.push(StreetSample {
                location: p,
                headings: headings.to_vec(),
            });
        }
    }
    Ok(StreetSamplePlan {
        spacing_m: spacing,
        samples,
    })
}

/// One street-image request per heading at `p`, sized 640x640.
pub fn panorama_view_set(
    p: GeoPoint,
    headings: &[f64],
    fov: f64,
) -> Result<Vec<StreetImageRequest>> {
    if !(fov > 0.0 && fov <= 120.0) {
        return Err(Error::domain(format!("fov {fov} outside (0, 120]")));
    }
    headings
        .iter()
        .map(|&h| {
            if !(0.0..360.0).contains(&h) {
                return Err(Error::domain(format!("heading {h} outside [0, 360)")));
            }
            StreetImageRequest::at_location(p, h).map(|r| StreetImageRequest { fov, ..r })
        })
        .collect()
}

/// Reads street centerlines from a GeoJSON FeatureCollection of
/// `LineString` / `MultiLineString` features. Consecutive duplicate vertices
/// are collapsed; features that collapse below two vertices are skipped.
pub fn parse_street_geojson(text: &str) -> Result<Vec<Polyline>> {
    let doc: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::json("street GeoJSON", e))?;
    if doc.get("type").and_then(|t| t.as_str()) != Some("FeatureCollection") {
        return Err(Error::domain(
            "street layer must be a GeoJSON FeatureCollection",
        ));
    }
    let features = doc
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::domain("FeatureCollection without features array"))?;

    let mut lines = Vec::new();
    for (i, feature) in features.iter().enumerate() {
        let Some(geom) = feature.get("geometry").filter(|g| !g.is_null()) else {
            continue;
        };
        let kind = geom
            .get("type")
            .and_then(|t| t.as_str())
            .unwrap_or_default();
        let coords = geom.get("coordinates");
        let parts: Vec<&serde_json::Value> = match (kind, coords) {
            ("LineString", Some(c)) => vec![c],
            ("MultiLineString", Some(serde_json::Value::Array(parts))) => parts.iter().collect(),
            _ => continue,
        };
        for part in parts {
            let mut verts: Vec<GeoPoint> = Vec::new();
            for pos in part.as_array().into_iter().flatten() {
                let pair = pos.as_array().filter(|a| a.len() >= 2).ok_or_else(|| {
                    Error::domain(format!("feature {i}: position must be [lon, lat]"))
                })?;
                let (lon, lat) = match (pair[0].as_f64(), pair[1].as_f64()) {
                    (Some(lon), Some(lat)) => (lon, lat),
                    _ => return Err(Error::domain(format!("feature {i}: non-numeric position"))),
                };
                let p = GeoPoint::new(lat, lon)?;
                if verts.last() != Some(&p) {
                    verts.push(p);
                }
            }
            match Polyline::new(verts) {
                Ok(line) => lines.push(line),
                Err(_) => log::warn!("skipping degenerate street feature {i}"),
            }
        }
    }
    Ok(lines)
}

/// Renders polylines as a GeoJSON FeatureCollection of LineStrings.
pub fn street_geojson(lines: &[Polyline]) -> serde_json::Value {
    let features: Vec<serde_json::Value> = lines
        .iter()
        .map(|l| {
            let coords: Vec<[f64; 2]> = l.vertices.iter().map(|p| [p.lon, p.lat]).collect();
            serde_json::json!({
                "type": "Feature",
                "properties": {},
                "geometry": {"type": "LineString", "coordinates": coords},
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": features})
}
