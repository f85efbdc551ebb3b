//! Python bindings for the palm survey pipeline.

use std::path::PathBuf;

use palmscan_core::calendar::YearMonth;
use palmscan_core::config::SurveyConfig;
use palmscan_core::geo::{self, GeoPoint, MercatorPoint, PixelBox, TileId};
use palmscan_core::linker;
use palmscan_core::metrics;
use palmscan_core::pipeline::{Stage, Survey as CoreSurvey};
use palmscan_core::report::{cost_comparison as core_cost, CostInputs};
use palmscan_core::sim::{self, NoiseModel, SyntheticWorld, WorldParams};
use palmscan_core::timeline::{self, ClassProbs, ClassificationResult, CrownLabel};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(palmscan, PalmscanError, PyException);
create_exception!(palmscan, ConfigError, PalmscanError);
create_exception!(palmscan, BackendError, PalmscanError);
create_exception!(palmscan, ProviderError, PalmscanError);

fn err(e: palmscan_core::Error) -> PyErr {
    let msg = e.to_string();
    match e {
        palmscan_core::Error::Domain(_) => PyValueError::new_err(msg),
        palmscan_core::Error::Config(_) | palmscan_core::Error::StageOrder { .. } => {
            ConfigError::new_err(msg)
        }
        palmscan_core::Error::Backend(_) | palmscan_core::Error::Protocol { .. } => {
            BackendError::new_err(msg)
        }
        palmscan_core::Error::Provider(_) => ProviderError::new_err(msg),
        _ => PalmscanError::new_err(msg),
    }
}

/// Hands a serializable value to Python as plain dicts and lists.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PalmscanError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn point(lat: f64, lon: f64) -> PyResult<GeoPoint> {
    GeoPoint::new(lat, lon).map_err(err)
}

fn tile(z: u8, x: u32, y: u32) -> PyResult<TileId> {
    TileId::new(z, x, y).map_err(err)
}

fn pixel_box(b: [f64; 4]) -> PyResult<PixelBox> {
    PixelBox::new(b[0], b[1], b[2], b[3]).map_err(err)
}

#[pyfunction]
fn geo_to_mercator(lat: f64, lon: f64) -> PyResult<(f64, f64)> {
    let m = geo::geo_to_mercator(point(lat, lon)?).map_err(err)?;
    Ok((m.x, m.y))
}

#[pyfunction]
fn mercator_to_geo(x: f64, y: f64) -> PyResult<(f64, f64)> {
    let p = geo::mercator_to_geo(MercatorPoint { x, y }).map_err(err)?;
    Ok((p.lat, p.lon))
}

/// `(south, west, north, east)` in degrees.
#[pyfunction]
fn tile_bounds(z: u8, x: u32, y: u32) -> PyResult<(f64, f64, f64, f64)> {
    let b = geo::tile_bounds(tile(z, x, y)?);
    Ok((b.south, b.west, b.north, b.east))
}

#[pyfunction]
fn tile_for_point(lat: f64, lon: f64, zoom: u8) -> PyResult<(u8, u32, u32)> {
    let t = geo::tile_for_point(point(lat, lon)?, zoom).map_err(err)?;
    Ok((t.zoom, t.x, t.y))
}

#[pyfunction]
#[pyo3(signature = (z, x, y, px, py, tile_size = 256))]
fn pixel_to_geo(z: u8, x: u32, y: u32, px: f64, py: f64, tile_size: u32) -> PyResult<(f64, f64)> {
    let p = geo::pixel_to_geo(tile(z, x, y)?, (px, py), tile_size).map_err(err)?;
    Ok((p.lat, p.lon))
}

#[pyfunction]
fn haversine_m(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> PyResult<f64> {
    Ok(geo::haversine_m(point(lat1, lon1)?, point(lat2, lon2)?))
}

#[pyfunction]
fn camera_heading(pano_lat: f64, pano_lon: f64, tree_lat: f64, tree_lon: f64) -> PyResult<f64> {
    linker::camera_heading(point(pano_lat, pano_lon)?, point(tree_lat, tree_lon)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (crown_box, image_width = 640))]
fn pixel_shift_deg(crown_box: [f64; 4], image_width: u32) -> PyResult<f64> {
    Ok(linker::pixel_shift_deg(&pixel_box(crown_box)?, image_width))
}

#[pyfunction]
#[pyo3(signature = (panoramas, aerial_tiles, street_images_for_detected, street_image_unit_cost = 0.007))]
fn cost_comparison<'py>(
    py: Python<'py>,
    panoramas: u64,
    aerial_tiles: u64,
    street_images_for_detected: u64,
    street_image_unit_cost: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let mut inputs = CostInputs::new(panoramas, aerial_tiles, street_images_for_detected);
    inputs.street_image_unit_cost = street_image_unit_cost;
    to_py(py, &core_cost(&inputs).map_err(err)?)
}

/// Takes `(YYYY-MM, label)` pairs with label `healthy`, `infested` or `unknown`.
#[pyfunction]
fn build_timeline<'py>(
    py: Python<'py>,
    points: Vec<(String, String)>,
) -> PyResult<Bound<'py, PyAny>> {
    let dated = points
        .iter()
        .map(|(d, l)| {
            let date: YearMonth = d.parse().map_err(err)?;
            let label: CrownLabel = serde_json::from_value(serde_json::Value::String(l.clone()))
                .map_err(|_| PyValueError::new_err(format!("unknown label `{l}`")))?;
            let c = ClassificationResult::from_probs(ClassProbs::one_hot(label)).map_err(err)?;
            Ok((date, c))
        })
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &timeline::build_timeline(&dated).map_err(err)?)
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> PyResult<f64> {
    Ok(metrics::iou(&pixel_box(a)?, &pixel_box(b)?))
}

/// AUC over `(score, is_positive)` pairs; `None` without both classes.
#[pyfunction]
fn roc_auc(scored: Vec<(f64, bool)>) -> Option<f64> {
    metrics::roc_auc(&scored)
}

/// Generates a synthetic world, saves it and returns its summary.
#[pyfunction]
#[pyo3(signature = (seed, path, palms = None))]
fn generate_world<'py>(
    py: Python<'py>,
    seed: u64,
    path: PathBuf,
    palms: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let params = WorldParams {
        palm_count: palms,
        ..WorldParams::default()
    };
    let w = sim::generate_world(seed, &params).map_err(err)?;
    w.save(&path).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({
            "seed": w.seed,
            "palms": w.palms.len(),
            "visible_palms": w.visible_palms().len(),
            "panoramas": w.panoramas.len(),
        }),
    )
}

/// A survey over a config file, or over a saved synthetic world.
#[pyclass(unsendable)]
struct Survey {
    inner: CoreSurvey,
}

#[pymethods]
impl Survey {
    #[new]
    fn new(config: PathBuf) -> PyResult<Self> {
        let cfg = SurveyConfig::load(&config).map_err(err)?;
        Ok(Survey {
            inner: CoreSurvey::open(cfg).map_err(err)?,
        })
    }

    /// Mock backend and simulated imagery; outputs go under `root`.
    #[staticmethod]
    #[pyo3(signature = (world, root, miss_rate = 0.0, false_positive_rate = 0.0, bbox_jitter = 0.0))]
    fn simulated(
        world: PathBuf,
        root: PathBuf,
        miss_rate: f64,
        false_positive_rate: f64,
        bbox_jitter: f64,
    ) -> PyResult<Self> {
        let noise = NoiseModel {
            miss_rate,
            false_positive_rate,
            bbox_jitter_sigma: bbox_jitter,
            ..NoiseModel::zero()
        };
        let cfg = SurveyConfig::simulated(&world, &root, noise).map_err(err)?;
        Ok(Survey {
            inner: CoreSurvey::open(cfg).map_err(err)?,
        })
    }

    #[pyo3(signature = (dry_run = false))]
    fn plan<'py>(&self, py: Python<'py>, dry_run: bool) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.plan(dry_run).map_err(err)?)
    }

    /// Runs one stage by name, or all of them.
    #[pyo3(signature = (stage = None, dry_run = false))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        stage: Option<&str>,
        dry_run: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let reports = match stage {
            Some(s) => {
                let s: Stage = s.parse().map_err(err)?;
                vec![self.inner.run_stage(s, dry_run).map_err(err)?]
            }
            None => self.inner.run_all(dry_run).map_err(err)?,
        };
        to_py(py, &reports)
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.report().map_err(err)?)
    }

    fn trees<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.trees().map_err(err)?)
    }

    /// Scores the registry against the world it was simulated from.
    fn score<'py>(&self, py: Python<'py>, world: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let w = SyntheticWorld::load(&world).map_err(err)?;
        to_py(py, &sim::score_run(&w, &self.inner.trees().map_err(err)?))
    }
}

#[pymodule]
fn palmscan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("PalmscanError", py.get_type::<PalmscanError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("BackendError", py.get_type::<BackendError>())?;
    m.add("ProviderError", py.get_type::<ProviderError>())?;
    m.add_function(wrap_pyfunction!(geo_to_mercator, m)?)?;
    m.add_function(wrap_pyfunction!(mercator_to_geo, m)?)?;
    m.add_function(wrap_pyfunction!(tile_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(tile_for_point, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_to_geo, m)?)?;
    m.add_function(wrap_pyfunction!(haversine_m, m)?)?;
    m.add_function(wrap_pyfunction!(camera_heading, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_shift_deg, m)?)?;
    m.add_function(wrap_pyfunction!(cost_comparison, m)?)?;
    m.add_function(wrap_pyfunction!(build_timeline, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_class::<Survey>()?;
    Ok(())
}
