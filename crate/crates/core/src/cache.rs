//! On-disk cache layout shared by the provider client, the pipeline and
//! geometry-driven backends.
//!
//! ```text
//! <root>/tiles/<z>/<x>/<y>.png
//! <root>/street/<pano>/<heading>.jpg
//! <root>/crops/<pano>/<heading>/<x0>_<y0>_<x1>_<y1>.png
//! <root>/meta/*.jsonl
//! ```

use std::path::{Path, PathBuf};

use crate::geo::{PixelBox, TileId};

/// Canonical text for a heading in file names.
pub fn heading_key(heading: f64) -> String {
    format!("{heading:.6}")
}

fn box_key(b: &PixelBox) -> String {
    format!(
        "{:.3}_{:.3}_{:.3}_{:.3}",
        b.x_min, b.y_min, b.x_max, b.y_max
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheLayout {
    pub root: PathBuf,
}

impl CacheLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CacheLayout { root: root.into() }
    }

    pub fn tile(&self, t: TileId) -> PathBuf {
        self.root
            .join("tiles")
            .join(t.zoom.to_string())
            .join(t.x.to_string())
            .join(format!("{}.png", t.y))
    }

    pub fn street(&self, pano_id: &str, heading: f64) -> PathBuf {
        self.root
            .join("street")
            .join(pano_id)
            .join(format!("{}.jpg", heading_key(heading)))
    }

    pub fn crop(&self, pano_id: &str, heading: f64, b: &PixelBox) -> PathBuf {
        self.root
            .join("crops")
            .join(pano_id)
            .join(heading_key(heading))
            .join(format!("{}.png", box_key(b)))
    }

    pub fn meta(&self, name: &str) -> PathBuf {
        self.root.join("meta").join(name)
    }
}

/// What a cached image path refers to.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    Tile(TileId),
    Street {
        pano_id: String,
        heading: f64,
    },
    Crop {
        pano_id: String,
        heading: f64,
        bbox: PixelBox,
    },
}

impl ImageRef {
    /// Root-independent identity of the image.
    pub fn key(&self) -> String {
        match self {
            ImageRef::Tile(t) => format!("tiles/{}/{}/{}", t.zoom, t.x, t.y),
            ImageRef::Street { pano_id, heading } => {
                format!("street/{pano_id}/{}", heading_key(*heading))
            }
            ImageRef::Crop {
                pano_id,
                heading,
                bbox,
            } => {
                format!(
                    "crops/{pano_id}/{}/{}",
                    heading_key(*heading),
                    box_key(bbox)
                )
            }
        }
    }
}

fn stem(name: &str) -> &str {
    name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name)
}

/// Recognises paths built by [`CacheLayout`], whatever the root.
pub fn parse_image_ref(path: &str) -> Option<ImageRef> {
    let parts: Vec<&str> = Path::new(path)
        .components()
        .filter_map(|c| c.as_os_str().to_str())
        .collect();
    let n = parts.len();
    if n >= 4 && parts[n - 4] == "tiles" {
        let zoom = parts[n - 3].parse().ok()?;
        let x = parts[n - 2].parse().ok()?;
        let y = stem(parts[n - 1]).parse().ok()?;
        return TileId::new(zoom, x, y).ok().map(ImageRef::Tile);
    }
    if n >= 3 && parts[n - 3] == "street" {
        return Some(ImageRef::Street {
            pano_id: parts[n - 2].to_string(),
            heading: stem(parts[n - 1]).parse().ok()?,
        });
    }
    if n >= 4 && parts[n - 4] == "crops" {
        let coords: Vec<f64> = stem(parts[n - 1])
            .split('_')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .ok()?;
        let [x0, y0, x1, y1] = coords[..] else {
            return None;
        };
        return Some(ImageRef::Crop {
            pano_id: parts[n - 3].to_string(),
            heading: parts[n - 2].parse().ok()?,
            bbox: PixelBox::new(x0, y0, x1, y1).ok()?,
        });
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_roundtrip() {
        let c = CacheLayout::new("/tmp/run/cache");
        let t = TileId::new(20, 183_000, 418_000).unwrap();
        assert_eq!(
            c.tile(t),
            PathBuf::from("/tmp/run/cache/tiles/20/183000/418000.png")
        );
        assert_eq!(
            parse_image_ref(c.tile(t).to_str().unwrap()),
            Some(ImageRef::Tile(t))
        );
        let s = c.street("s00012-4", 87.25);
        assert_eq!(
            s,
            PathBuf::from("/tmp/run/cache/street/s00012-4/87.250000.jpg")
        );
        assert_eq!(
            parse_image_ref(s.to_str().unwrap()),
            Some(ImageRef::Street {
                pano_id: "s00012-4".into(),
                heading: 87.25
            })
        );
        let b = PixelBox::new(300.5, 120.0, 340.25, 280.0).unwrap();
        let crop = c.crop("p", 0.0, &b);
        assert_eq!(
            parse_image_ref(crop.to_str().unwrap()),
            Some(ImageRef::Crop {
                pano_id: "p".into(),
                heading: 0.0,
                bbox: b
            })
        );
        assert_eq!(parse_image_ref("photos/holiday.jpg"), None);
        let other = CacheLayout::new("elsewhere").crop("p", 0.0, &b);
        assert_eq!(
            parse_image_ref(crop.to_str().unwrap()).unwrap().key(),
            parse_image_ref(other.to_str().unwrap()).unwrap().key()
        );
    }
}
