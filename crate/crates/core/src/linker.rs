//! Linking georeferenced trees to street-level panoramas.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::geo::{bearing_deg, haversine_m, normalize_heading, GeoPoint, PixelBox};

/// Largest street image the provider serves, per side.
pub const MAX_STREET_IMAGE_PX: u32 = 640;
pub const STREET_FOV_DEG: f64 = 90.0;

/// One street-level capture. On disk: `{"pano_id", "lat", "lon", "date"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoramaRecord {
    pub pano_id: String,
    #[serde(flatten)]
    pub location: GeoPoint,
    #[serde(rename = "date")]
    pub capture_date: YearMonth,
}

/// A rectilinear view cut out of a panorama.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetImageRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pano_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    pub heading: f64,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

impl StreetImageRequest {
    pub fn at_location(location: GeoPoint, heading: f64) -> Result<Self> {
        Self::build(None, Some(location), heading)
    }

    pub fn for_pano(pano: &PanoramaRecord, heading: f64) -> Result<Self> {
        Self::build(Some(pano.pano_id.clone()), Some(pano.location), heading)
    }

    fn build(pano_id: Option<String>, location: Option<GeoPoint>, heading: f64) -> Result<Self> {
        if !heading.is_finite() {
            return Err(Error::domain("heading must be finite"));
        }
        Ok(StreetImageRequest {
            pano_id,
            location,
            heading: normalize_heading(heading),
            fov: STREET_FOV_DEG,
            width: MAX_STREET_IMAGE_PX,
            height: MAX_STREET_IMAGE_PX,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.pano_id.is_none() && self.location.is_none() {
            return Err(Error::domain(
                "street request needs a pano id or a location",
            ));
        }
        if !(0.0..360.0).contains(&self.heading) {
            return Err(Error::domain(format!(
                "heading {} not normalized",
                self.heading
            )));
        }
        if self.width == 0
            || self.height == 0
            || self.width > MAX_STREET_IMAGE_PX
            || self.height > MAX_STREET_IMAGE_PX
        {
            return Err(Error::domain(format!(
                "street image {}x{} exceeds {MAX_STREET_IMAGE_PX}px",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Closest panorama by great-circle distance; equal distances go to the
/// lexicographically smallest `pano_id`.
pub fn nearest_panorama(tree: GeoPoint, panos: &[PanoramaRecord]) -> Result<&PanoramaRecord> {
    panos
        .iter()
        .map(|p| (haversine_m(tree, p.location), p))
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.pano_id.cmp(&b.pano_id)))
        .map(|(_, p)| p)
        .ok_or_else(|| Error::domain("no panoramas to choose from"))
}

/// Heading that points a camera at `pano` toward the tree.
pub fn camera_heading(pano: GeoPoint, tree: GeoPoint) -> Result<f64> {
    bearing_deg(pano, tree)
}

/// Angular offset of a crown from the optical axis of a 90° view:
/// `90 * center_x / width - 45`.
pub fn pixel_shift_deg(crown_box: &PixelBox, image_width: u32) -> f64 {
    shift_for_center_deg(crown_box.center().0, image_width)
}

/// The same offset for a bare horizontal pixel position.
pub fn shift_for_center_deg(center_x: f64, image_width: u32) -> f64 {
    90.0 * center_x / f64::from(image_width) - 45.0
}

/// The crown as seen in the view used to link a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalView {
    pub pano: PanoramaRecord,
    pub heading: f64,
    pub crown_box: PixelBox,
}

/// Aims a historical panorama at a tree.
///
/// A historical viewpoint farther from the tree than the original one uses
/// the geometric heading alone. A nearer one adds the crown's pixel offset
/// from the original image to the geometric heading.
pub fn recenter_heading(
    tree: GeoPoint,
    original: &OriginalView,
    historical: &PanoramaRecord,
    image_width: u32,
) -> Result<StreetImageRequest> {
    if historical.location == tree {
        return Err(Error::domain(format!(
            "historical panorama {} coincides with the tree",
            historical.pano_id
        )));
    }
    if !original
        .crown_box
        .fits_within(f64::from(image_width), f64::from(MAX_STREET_IMAGE_PX))
    {
        return Err(Error::domain("crown box exceeds the original image"));
    }
    let base = camera_heading(historical.location, tree)?;
    let farther =
        haversine_m(historical.location, tree) > haversine_m(original.pano.location, tree);
    let heading = if farther {
        base
    } else {
        normalize_heading(base + pixel_shift_deg(&original.crown_box, image_width))
    };
    StreetImageRequest::for_pano(historical, heading)
}

pub fn read_catalog(path: &Path) -> Result<Vec<PanoramaRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PanoramaRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes a catalog sorted by `pano_id`, rejecting duplicate ids.
pub fn write_catalog(path: &Path, panos: &[PanoramaRecord]) -> Result<()> {
    let mut sorted: Vec<&PanoramaRecord> = panos.iter().collect();
    sorted.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].pano_id == w[1].pano_id) {
        return Err(Error::domain(format!("duplicate pano id {}", w[0].pano_id)));
    }
    let mut buf = Vec::new();
    for p in sorted {
        serde_json::to_writer(&mut buf, p).map_err(|e| Error::json("catalog", e))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
