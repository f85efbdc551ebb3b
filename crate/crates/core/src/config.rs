//! Survey configuration: one JSON file, relative paths resolved against
//! the file's directory. API keys are read from a named environment
//! variable and never stored here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::{AERIAL_TILE_PX, DEFAULT_SCORE_THRESHOLD};
use crate::geo::{GeoBox, GeoPoint};
use crate::linker::MAX_STREET_IMAGE_PX;
use crate::planner::{AreaOfInterest, MAX_PLAN_ZOOM};
use crate::provider::{UnitCosts, DEFAULT_RATE_LIMIT};
use crate::report::{CostInputs, DEFAULT_CELL_SIZE_M};
use crate::sim::NoiseModel;

/// Survey area: a lat/lon box, a `[lat, lon]` ring, or a GeoJSON file
/// holding a Polygon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AoiSpec {
    Box {
        #[serde(default)]
        name: Option<String>,
        south: f64,
        west: f64,
        north: f64,
        east: f64,
    },
    Polygon {
        #[serde(default)]
        name: Option<String>,
        polygon: Vec<[f64; 2]>,
    },
    File {
        geojson: PathBuf,
    },
}

impl AoiSpec {
    /// Parses `south,west,north,east`.
    pub fn parse_box(text: &str) -> Result<Self> {
        let v: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Config(format!("AOI `{text}` is not four comma-separated numbers"))
            })?;
        let [south, west, north, east] = v[..] else {
            return Err(Error::Config(format!(
                "AOI `{text}` needs south,west,north,east"
            )));
        };
        Ok(AoiSpec::Box {
            name: None,
            south,
            west,
            north,
            east,
        })
    }

    pub fn resolve(&self) -> Result<AreaOfInterest> {
        let invalid = |e: Error| Error::Config(format!("invalid AOI: {e}"));
        match self {
            AoiSpec::Box {
                name,
                south,
                west,
                north,
                east,
            } => {
                let b = GeoBox::new(*south, *west, *north, *east).map_err(invalid)?;
                AreaOfInterest::from_box(name.clone().unwrap_or_else(|| "aoi".into()), b)
                    .map_err(invalid)
            }
            AoiSpec::Polygon { name, polygon } => {
                let ring = polygon
                    .iter()
                    .map(|[lat, lon]| GeoPoint::new(*lat, *lon))
                    .collect::<Result<Vec<_>>>()
                    .map_err(invalid)?;
                AreaOfInterest::from_polygon(name.clone().unwrap_or_else(|| "aoi".into()), ring)
                    .map_err(invalid)
            }
            AoiSpec::File { geojson } => {
                let text = std::fs::read_to_string(geojson).map_err(|e| Error::io(geojson, e))?;
                aoi_from_geojson(&text).map_err(invalid)
            }
        }
    }
}

/// First Polygon (outer ring) in a GeoJSON geometry, Feature or
/// FeatureCollection.
pub fn aoi_from_geojson(text: &str) -> Result<AreaOfInterest> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::json("AOI GeoJSON", e))?;
    fn find(v: &serde_json::Value) -> Option<(&serde_json::Value, Option<String>)> {
        let name = v
            .pointer("/properties/name")
            .and_then(|n| n.as_str())
            .map(str::to_string);
        match v.get("type")?.as_str()? {
            "FeatureCollection" => v.get("features")?.as_array()?.iter().find_map(find),
            "Feature" => find(v.get("geometry")?).map(|(g, n)| (g, n.or(name))),
            "Polygon" => Some((v, None)),
            _ => None,
        }
    }
    let (geom, name) = find(&v).ok_or_else(|| Error::domain("GeoJSON holds no Polygon"))?;
    let ring = geom
        .pointer("/coordinates/0")
        .and_then(|r| r.as_array())
        .ok_or_else(|| Error::domain("Polygon without an outer ring"))?;
    let pts = ring
        .iter()
        .map(|c| {
            match c.as_array().map(|a| {
                (
                    a.first().and_then(|x| x.as_f64()),
                    a.get(1).and_then(|x| x.as_f64()),
                )
            }) {
                Some((Some(lon), Some(lat))) => GeoPoint::new(lat, lon),
                _ => Err(Error::domain(format!("bad coordinate {c}"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    AreaOfInterest::from_polygon(name.unwrap_or_else(|| "aoi".into()), pts)
}

/// How to reach one detector or classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// In-process simulator backend answering from a world file.
    Mock {
        world: PathBuf,
        #[serde(default)]
        noise: NoiseModel,
    },
    /// Long-running process speaking the JSON-lines protocol on stdio.
    Stdio {
        command: Vec<String>,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
    },
    /// Batch exchange through request/result manifests in `dir`.
    Manifest {
        dir: PathBuf,
        #[serde(default)]
        command: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    Simulated {
        world: PathBuf,
    },
    /// Imagery already on disk in cache layout plus panorama catalogs.
    Directory {
        root: PathBuf,
        catalog: PathBuf,
        #[serde(default)]
        history_catalog: Option<PathBuf>,
    },
    Http {
        tile_url: String,
        street_url: String,
        metadata_url: String,
        key_env: String,
        #[serde(default = "default_rate_limit")]
        rate_limit: f64,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
        #[serde(default)]
        history_catalog: Option<PathBuf>,
    },
}

fn default_timeout_s() -> f64 {
    30.0
}
fn default_rate_limit() -> f64 {
    DEFAULT_RATE_LIMIT
}
fn default_zoom() -> u8 {
    20
}
fn default_tile_size() -> u32 {
    AERIAL_TILE_PX
}
fn default_street_size() -> u32 {
    MAX_STREET_IMAGE_PX
}
fn default_fov() -> f64 {
    90.0
}
fn default_spacing() -> f64 {
    crate::planner::DEFAULT_SPACING_M
}
fn default_threshold() -> f64 {
    DEFAULT_SCORE_THRESHOLD
}
fn default_dedup() -> f64 {
    3.0
}
fn default_visibility() -> f64 {
    50.0
}
fn default_history_radius() -> f64 {
    5.0
}
fn default_cell() -> f64 {
    DEFAULT_CELL_SIZE_M
}
fn default_hotspot() -> u64 {
    3
}
fn default_workers() -> usize {
    4
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_cache() -> PathBuf {
    PathBuf::from("cache")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyConfig {
    /// Optional when the provider is simulated (the world's extent is used).
    #[serde(default)]
    pub aoi: Option<AoiSpec>,
    #[serde(default = "default_zoom")]
    pub zoom: u8,
    #[serde(default = "default_tile_size")]
    pub tile_size: u32,
    #[serde(default = "default_street_size")]
    pub street_image_size: u32,
    #[serde(default = "default_fov")]
    pub fov: f64,
    #[serde(default = "default_spacing")]
    pub sample_spacing_m: f64,
    #[serde(default = "default_threshold")]
    pub score_threshold: f64,
    #[serde(default = "default_dedup")]
    pub dedup_radius_m: f64,
    /// Farthest panorama accepted when linking a tree.
    #[serde(default = "default_visibility")]
    pub visibility_radius_m: f64,
    /// Historical captures within this distance of the linking panorama.
    #[serde(default = "default_history_radius")]
    pub history_radius_m: f64,
    #[serde(default = "default_cell")]
    pub heatmap_cell_m: f64,
    #[serde(default = "default_hotspot")]
    pub hotspot_min_count: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Street centerlines (GeoJSON LineStrings).
    #[serde(default)]
    pub streets: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_cache")]
    pub cache_dir: PathBuf,
    pub backend: BackendSpec,
    #[serde(default)]
    pub crown_backend: Option<BackendSpec>,
    #[serde(default)]
    pub classifier_backend: Option<BackendSpec>,
    pub provider: ProviderSpec,
    #[serde(default)]
    pub costs: UnitCosts,
    /// Replaces the counts derived from the run in the cost report.
    #[serde(default)]
    pub cost_inputs: Option<CostInputs>,
}

fn resolve_path(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_backend(base: &Path, b: &mut BackendSpec) {
    match b {
        BackendSpec::Mock { world, .. } => resolve_path(base, world),
        BackendSpec::Manifest { dir, .. } => resolve_path(base, dir),
        BackendSpec::Stdio { .. } => {}
    }
}

impl SurveyConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: SurveyConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(AoiSpec::File { geojson }) = &mut self.aoi {
            resolve_path(base, geojson);
        }
        if let Some(s) = &mut self.streets {
            resolve_path(base, s);
        }
        resolve_path(base, &mut self.output_dir);
        resolve_path(base, &mut self.cache_dir);
        resolve_backend(base, &mut self.backend);
        for b in [&mut self.crown_backend, &mut self.classifier_backend]
            .into_iter()
            .flatten()
        {
            resolve_backend(base, b);
        }
        match &mut self.provider {
            ProviderSpec::Simulated { world } => resolve_path(base, world),
            ProviderSpec::Directory {
                root,
                catalog,
                history_catalog,
            } => {
                resolve_path(base, root);
                resolve_path(base, catalog);
                if let Some(h) = history_catalog {
                    resolve_path(base, h);
                }
            }
            ProviderSpec::Http {
                history_catalog, ..
            } => {
                if let Some(h) = history_catalog {
                    resolve_path(base, h);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.zoom == 0 || self.zoom > MAX_PLAN_ZOOM {
            return bad(format!(
                "zoom must be in 1..={MAX_PLAN_ZOOM}, got {}",
                self.zoom
            ));
        }
        if self.tile_size != AERIAL_TILE_PX {
            return bad(format!(
                "tile_size must be {AERIAL_TILE_PX}, got {}",
                self.tile_size
            ));
        }
        if self.street_image_size == 0 || self.street_image_size > MAX_STREET_IMAGE_PX {
            return bad(format!(
                "street_image_size must be in 1..={MAX_STREET_IMAGE_PX}, got {}",
                self.street_image_size
            ));
        }
        if !(self.fov > 0.0 && self.fov <= 120.0) {
            return bad(format!("fov must be in (0, 120], got {}", self.fov));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold <= 1.0) {
            return bad(format!(
                "score_threshold must be in (0, 1], got {}",
                self.score_threshold
            ));
        }
        for (name, v) in [
            ("sample_spacing_m", self.sample_spacing_m),
            ("dedup_radius_m", self.dedup_radius_m),
            ("visibility_radius_m", self.visibility_radius_m),
            ("history_radius_m", self.history_radius_m),
            ("heatmap_cell_m", self.heatmap_cell_m),
            ("costs.street_image_usd", self.costs.street_image_usd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.costs.aerial_tile_usd >= 0.0 && self.costs.aerial_tile_usd.is_finite()) {
            return bad(format!(
                "costs.aerial_tile_usd must be non-negative, got {}",
                self.costs.aerial_tile_usd
            ));
        }
        if self.hotspot_min_count == 0 {
            return bad("hotspot_min_count must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        for b in [
            Some(&self.backend),
            self.crown_backend.as_ref(),
            self.classifier_backend.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            match b {
                BackendSpec::Stdio { command, timeout_s } => {
                    if command.is_empty() {
                        return bad("backend command is empty".into());
                    }
                    if !(*timeout_s > 0.0 && timeout_s.is_finite()) {
                        return bad(format!("backend timeout must be positive, got {timeout_s}"));
                    }
                }
                BackendSpec::Manifest {
                    command: Some(c), ..
                } if c.is_empty() => {
                    return bad("manifest command is empty".into());
                }
                BackendSpec::Mock { noise, .. } => {
                    noise.validate().map_err(|e| Error::Config(e.to_string()))?;
                }
                _ => {}
            }
        }
        if let ProviderSpec::Http {
            rate_limit,
            timeout_s,
            ..
        } = &self.provider
        {
            if !(*rate_limit > 0.0 && rate_limit.is_finite()) {
                return bad(format!("rate_limit must be positive, got {rate_limit}"));
            }
            if !(*timeout_s > 0.0 && timeout_s.is_finite()) {
                return bad(format!(
                    "provider timeout must be positive, got {timeout_s}"
                ));
            }
        }
        if let Some(a) = &self.aoi {
            if !matches!(a, AoiSpec::File { .. }) {
                a.resolve()?;
            }
        }
        Ok(())
    }

    /// Mock backend and simulated provider over a saved world, with output
    /// and cache under `root`.
    pub fn simulated(world: &Path, root: &Path, noise: NoiseModel) -> Result<Self> {
        let mut cfg: SurveyConfig = serde_json::from_value(serde_json::json!({
            "backend": { "kind": "mock", "world": world, "noise": noise },
            "provider": { "kind": "simulated", "world": world },
        }))
        .map_err(|e| Error::Config(e.to_string()))?;
        cfg.output_dir = root.join("out");
        cfg.cache_dir = root.join("cache");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn crown_backend(&self) -> &BackendSpec {
        self.crown_backend.as_ref().unwrap_or(&self.backend)
    }

    pub fn classifier_backend(&self) -> &BackendSpec {
        self.classifier_backend.as_ref().unwrap_or(&self.backend)
    }

    /// Hash of every setting that can change results (`workers` excluded).
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.workers = 1;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "aoi": {"south": 32.75, "west": -117.13, "north": 32.752, "east": -117.128},
        "backend": {"kind": "stdio", "command": ["detector"]},
        "provider": {"kind": "simulated", "world": "world.json"}
    }"#;

    #[test]
    fn defaults_and_relative_paths() {
        let c = SurveyConfig::from_json(MINIMAL, Path::new("/srv/survey")).unwrap();
        assert_eq!((c.zoom, c.tile_size, c.street_image_size), (20, 256, 640));
        assert_eq!(
            (
                c.fov,
                c.sample_spacing_m,
                c.score_threshold,
                c.dedup_radius_m
            ),
            (90.0, 8.0, 0.5, 3.0)
        );
        assert_eq!(c.costs.street_image_usd, 0.007);
        assert_eq!(c.output_dir, PathBuf::from("/srv/survey/out"));
        assert_eq!(
            c.provider,
            ProviderSpec::Simulated {
                world: "/srv/survey/world.json".into()
            }
        );
        assert_eq!(c.crown_backend(), &c.backend);
    }

    #[test]
    fn rejects_bad_values() {
        let base = Path::new(".");
        let with = |k: &str, v: &str| {
            let mut j: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
            j[k] = serde_json::from_str(v).unwrap();
            SurveyConfig::from_json(&j.to_string(), base)
        };
        assert!(matches!(with("zoom", "23"), Err(Error::Config(_))));
        assert!(matches!(
            with("sample_spacing_m", "0"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            with("dedup_radius_m", "-3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            with("aoi", r#"{"south":1,"west":1,"north":0,"east":2}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            with("api_key", r#""secret""#),
            Err(Error::Config(_))
        ));
        assert!(with("zoom", "19").is_ok());
    }

    #[test]
    fn aoi_forms() {
        let b = AoiSpec::parse_box("32.75, -117.13, 32.76, -117.12")
            .unwrap()
            .resolve()
            .unwrap();
        assert!(b.contains(GeoPoint::new(32.755, -117.125).unwrap()));
        assert!(AoiSpec::parse_box("1,2,3").is_err());
        let gj = r#"{"type":"Feature","properties":{"name":"blk"},"geometry":{"type":"Polygon",
            "coordinates":[[[-117.13,32.75],[-117.12,32.75],[-117.12,32.76],[-117.13,32.75]]]}}"#;
        let a = aoi_from_geojson(gj).unwrap();
        assert_eq!(a.name, "blk");
        assert!(a.contains(GeoPoint::new(32.752, -117.121).unwrap()));
    }

    #[test]
    fn digest_ignores_workers_only() {
        let a = SurveyConfig::from_json(MINIMAL, Path::new("/x")).unwrap();
        let mut b = a.clone();
        b.workers = 16;
        assert_eq!(a.digest(), b.digest());
        b.zoom = 19;
        assert_ne!(a.digest(), b.digest());
    }
}
