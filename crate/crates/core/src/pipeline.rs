//! Survey stages: plan, detect-aerial, link, detect-street, classify,
//! history, report.
//!
//! Each stage reads the registry, does its work through the provider client
//! and the backends, compacts the registry and records
//! `<out>/state/<stage>.json`. A stage whose recorded output matches the
//! current registry under the same config is skipped.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{heading_key, parse_image_ref, CacheLayout};
use crate::config::{BackendSpec, ProviderSpec, SurveyConfig};
use crate::error::{Error, Result};
use crate::gateway::{
    georeference, merge_candidates, run_classification_batch, run_detection_batch,
    DetectionRequest, Exchange, ManifestExchange, RequestFailure, SubprocessFactory, WorkerPool,
};
use crate::geo::{ground_resolution_m, haversine_m, GeoPoint, PixelBox};
use crate::linker::{
    camera_heading, read_catalog, write_catalog, PanoramaRecord, StreetImageRequest,
};
use crate::planner::{
    enumerate_tiles, parse_street_geojson, plan_street_samples, AreaOfInterest, Polyline,
    StreetSamplePlan, TilePlan, DEFAULT_HEADINGS,
};
use crate::provider::{
    read_ledger, write_atomic, DirectorySource, FetchItem, ImagerySource, LedgerTotals,
    ProviderClient, SimulatedSource,
};
use crate::registry::{Observation, TreeRecord, TreeStore};
use crate::report::{
    build_heatmap, cost_comparison, export_geojson, hotspots, render_html, summarize,
    timeline_summaries, CostInputs, CostReport, SurveySummary,
};
use crate::sim::{MockBackend, SyntheticWorld};
use crate::timeline::{
    build_timeline, classify_tree_history, ClassificationResult, CrownClassifier, CrownReading,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    DetectAerial,
    Link,
    DetectStreet,
    Classify,
    History,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::DetectAerial,
        Stage::Link,
        Stage::DetectStreet,
        Stage::Classify,
        Stage::History,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::DetectAerial => "detect-aerial",
            Stage::Link => "link",
            Stage::DetectStreet => "detect-street",
            Stage::Classify => "classify",
            Stage::History => "history",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|&s| s == self).expect("listed");
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// Files under the output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn tile_plan(&self) -> PathBuf {
        self.root.join("plan").join("tiles.json")
    }
    pub fn street_plan(&self) -> PathBuf {
        self.root.join("plan").join("street_samples.json")
    }
    pub fn plan_summary(&self) -> PathBuf {
        self.root.join("plan").join("summary.json")
    }
    pub fn registry(&self) -> PathBuf {
        self.root.join("registry.jsonl")
    }
    /// Panoramas that linked trees, kept for the history stage.
    pub fn linked_panoramas(&self) -> PathBuf {
        self.root.join("linked_panoramas.jsonl")
    }
    pub fn state(&self, stage: Stage) -> PathBuf {
        self.root.join("state").join(format!("{stage}.json"))
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub aoi: String,
    pub zoom: u8,
    pub ground_resolution_m: f64,
    pub tiles: u64,
    pub street_samples: u64,
    pub street_images: u64,
    pub projected_street_only_cost_usd: f64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub skipped: bool,
    pub dry_run: bool,
    /// Work items the stage selected (tiles, trees or views).
    pub requested: u64,
    pub failures: Vec<RequestFailure>,
    pub trees: u64,
    /// Registry records written by this run.
    pub writes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageState {
    stage: String,
    config: String,
    input: String,
    output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub summary: SurveySummary,
    pub cost: CostReport,
    pub ledger: LedgerTotals,
    pub hotspots: u64,
    pub files: Vec<PathBuf>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn view_key(pano_id: &str, heading: f64) -> String {
    format!("{pano_id}/{}", heading_key(heading))
}

struct Backends {
    aerial: Box<dyn Exchange>,
    crown: Box<dyn Exchange>,
    classifier: Box<dyn Exchange>,
}

/// A configured survey: the entry point for every CLI command.
pub struct Survey {
    config: SurveyConfig,
    aoi: AreaOfInterest,
    streets: Vec<Polyline>,
    out: OutputLayout,
    cache: CacheLayout,
    worlds: Mutex<HashMap<PathBuf, Arc<SyntheticWorld>>>,
    client: OnceLock<ProviderClient>,
    backends: OnceLock<Backends>,
}

impl Survey {
    pub fn open(config: SurveyConfig) -> Result<Self> {
        config.validate()?;
        let mut worlds = HashMap::new();
        let sim_world = match &config.provider {
            ProviderSpec::Simulated { world } => {
                let w = load_world(world)?;
                worlds.insert(world.clone(), Arc::clone(&w));
                Some(w)
            }
            _ => None,
        };
        let aoi = match (&config.aoi, &sim_world) {
            (Some(spec), _) => spec.resolve()?,
            (None, Some(w)) => w.aoi()?,
            (None, None) => {
                return Err(Error::Config("no AOI given (config `aoi` or --aoi)".into()))
            }
        };
        let streets = match (&config.streets, &sim_world) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read streets {}: {e}", path.display()))
                })?;
                parse_street_geojson(&text).map_err(|e| Error::Config(format!("streets: {e}")))?
            }
            (None, Some(w)) => w.streets.clone(),
            (None, None) => {
                log::warn!("no street centerlines configured; the street plan will be empty");
                Vec::new()
            }
        };
        Ok(Survey {
            aoi,
            streets,
            out: OutputLayout {
                root: config.output_dir.clone(),
            },
            cache: CacheLayout::new(&config.cache_dir),
            worlds: Mutex::new(worlds),
            client: OnceLock::new(),
            backends: OnceLock::new(),
            config,
        })
    }

    pub fn config(&self) -> &SurveyConfig {
        &self.config
    }

    pub fn aoi(&self) -> &AreaOfInterest {
        &self.aoi
    }

    pub fn output(&self) -> &OutputLayout {
        &self.out
    }

    pub fn cache(&self) -> &CacheLayout {
        &self.cache
    }

    fn world(&self, path: &Path) -> Result<Arc<SyntheticWorld>> {
        let mut worlds = self.worlds.lock().unwrap();
        if let Some(w) = worlds.get(path) {
            return Ok(Arc::clone(w));
        }
        let w = load_world(path)?;
        worlds.insert(path.to_path_buf(), Arc::clone(&w));
        Ok(w)
    }

    fn client(&self) -> Result<&ProviderClient> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let source: Arc<dyn ImagerySource> = match &self.config.provider {
            ProviderSpec::Simulated { world } => Arc::new(SimulatedSource::new(self.world(world)?)),
            ProviderSpec::Directory {
                root,
                catalog,
                history_catalog,
            } => Arc::new(DirectorySource::open(
                root,
                catalog,
                history_catalog.as_deref(),
            )?),
            #[cfg(feature = "http")]
            ProviderSpec::Http {
                tile_url,
                street_url,
                metadata_url,
                key_env,
                rate_limit,
                timeout_s,
                history_catalog,
            } => {
                let history = match history_catalog {
                    Some(p) => read_catalog(p)?,
                    None => Vec::new(),
                };
                Arc::new(crate::provider::HttpSource::new(
                    crate::provider::HttpTemplates {
                        tile_url: tile_url.clone(),
                        street_url: street_url.clone(),
                        metadata_url: metadata_url.clone(),
                    },
                    key_env,
                    *rate_limit,
                    Duration::from_secs_f64(*timeout_s),
                    history,
                )?)
            }
            #[cfg(not(feature = "http"))]
            ProviderSpec::Http { .. } => {
                return Err(Error::Config(
                    "this build has no HTTP provider support".into(),
                ));
            }
        };
        let client = ProviderClient::new(source, self.cache.clone(), self.config.costs)?;
        Ok(self.client.get_or_init(|| client))
    }

    fn exchange_for(&self, spec: &BackendSpec, role: &str) -> Result<Box<dyn Exchange>> {
        let workers = self.config.workers;
        Ok(match spec {
            BackendSpec::Mock { world, noise } => {
                let mock = Arc::new(MockBackend::new(self.world(world)?, noise.clone())?);
                Box::new(WorkerPool::new(mock, workers))
            }
            BackendSpec::Stdio { command, timeout_s } => Box::new(WorkerPool::new(
                SubprocessFactory {
                    command: command.clone(),
                    timeout: Duration::from_secs_f64(*timeout_s),
                },
                workers,
            )),
            BackendSpec::Manifest { dir, command } => Box::new(ManifestExchange {
                dir: dir.join(role),
                command: command.clone(),
            }),
        })
    }

    fn backends(&self) -> Result<&Backends> {
        if let Some(b) = self.backends.get() {
            return Ok(b);
        }
        let b = Backends {
            aerial: self.exchange_for(&self.config.backend, "aerial")?,
            crown: self.exchange_for(self.config.crown_backend(), "crown")?,
            classifier: self.exchange_for(self.config.classifier_backend(), "classifier")?,
        };
        Ok(self.backends.get_or_init(|| b))
    }

    fn compute_plan(&self) -> Result<(TilePlan, StreetSamplePlan, PlanSummary)> {
        let c = &self.config;
        let tiles = enumerate_tiles(&self.aoi, c.zoom, c.tile_size)?;
        let mut streets =
            plan_street_samples(&self.streets, c.sample_spacing_m, &DEFAULT_HEADINGS)?;
        streets.samples.retain(|s| self.aoi.contains(s.location));
        let cost = cost_comparison(&self.cost_inputs_for(
            tiles.tiles.len() as u64,
            streets.samples.len() as u64,
            0,
        ))?;
        let b = self.aoi.bbox();
        let summary = PlanSummary {
            aoi: self.aoi.name.clone(),
            zoom: c.zoom,
            ground_resolution_m: ground_resolution_m(
                (b.south + b.north) / 2.0,
                c.zoom,
                c.tile_size,
            ),
            tiles: tiles.tiles.len() as u64,
            street_samples: streets.samples.len() as u64,
            street_images: cost.street_only_images,
            projected_street_only_cost_usd: cost.street_only_cost_usd,
            config_digest: c.digest(),
        };
        Ok((tiles, streets, summary))
    }

    fn cost_inputs_for(&self, tiles: u64, samples: u64, linked: u64) -> CostInputs {
        let mut inputs = CostInputs::new(samples, tiles, linked);
        inputs.street_image_unit_cost = self.config.costs.street_image_usd;
        inputs.aerial_tile_unit_cost = self.config.costs.aerial_tile_usd;
        inputs
    }

    /// Computes the tile and street plans; writes them unless `dry_run`.
    pub fn plan(&self, dry_run: bool) -> Result<PlanSummary> {
        let (tiles, streets, summary) = self.compute_plan()?;
        if !dry_run {
            write_json(&self.out.tile_plan(), &tiles)?;
            write_json(&self.out.street_plan(), &streets)?;
            write_json(&self.out.plan_summary(), &summary)?;
        }
        Ok(summary)
    }

    fn check_order(&self, stage: Stage) -> Result<()> {
        let order = |missing: &str| Error::StageOrder {
            stage: stage.to_string(),
            missing: missing.to_string(),
        };
        match stage.previous() {
            None => {
                if !self.out.plan_summary().is_file() {
                    return Err(order("plan"));
                }
                let planned: PlanSummary = read_json(&self.out.plan_summary())?;
                if planned.config_digest != self.config.digest() {
                    return Err(order("plan (the config changed since planning)"));
                }
            }
            Some(prev) => {
                if !self.out.state(prev).is_file() {
                    return Err(order(prev.as_str()));
                }
            }
        }
        Ok(())
    }

    fn open_store(&self, dry_run: bool) -> Result<TreeStore> {
        let path = self.out.registry();
        if dry_run && !path.exists() {
            return TreeStore::in_memory(self.config.dedup_radius_m);
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        TreeStore::open(&path, self.config.dedup_radius_m)
    }

    /// Every registry tree, ordered by id. Empty when no stage has run.
    pub fn trees(&self) -> Result<Vec<TreeRecord>> {
        if !self.out.registry().exists() {
            return Ok(Vec::new());
        }
        let store = TreeStore::open(self.out.registry(), self.config.dedup_radius_m)?;
        Ok(store.snapshot().trees().to_vec())
    }

    pub fn run_stage(&self, stage: Stage, dry_run: bool) -> Result<StageReport> {
        self.check_order(stage)?;
        let mut store = self.open_store(dry_run)?;
        let input = sha_hex(&store.canonical_bytes()?);
        let config = self.config.digest();
        let state_path = self.out.state(stage);
        let mut report = StageReport {
            stage: stage.to_string(),
            skipped: false,
            dry_run,
            requested: 0,
            failures: Vec::new(),
            trees: store.len() as u64,
            writes: 0,
        };
        if state_path.is_file() {
            let prior: StageState = read_json(&state_path)?;
            if prior.config == config && prior.output == input {
                log::info!("{stage}: inputs unchanged, nothing to do");
                report.skipped = true;
                return Ok(report);
            }
        }
        match stage {
            Stage::DetectAerial => self.detect_aerial(&mut store, dry_run, &mut report)?,
            Stage::Link => self.link(&mut store, dry_run, &mut report)?,
            Stage::DetectStreet => self.detect_street(&mut store, dry_run, &mut report)?,
            Stage::Classify => self.classify(&mut store, dry_run, &mut report)?,
            Stage::History => self.history(&mut store, dry_run, &mut report)?,
        }
        report.trees = store.len() as u64;
        report.writes = store.writes();
        for f in &report.failures {
            log::warn!("{stage}: {}: {}", f.image_ref, f.message);
        }
        if dry_run {
            return Ok(report);
        }
        store.compact()?;
        let output = sha_hex(&store.canonical_bytes()?);
        write_json(
            &state_path,
            &StageState {
                stage: stage.to_string(),
                config,
                input,
                output,
            },
        )?;
        Ok(report)
    }

    /// Runs every stage in order.
    pub fn run_all(&self, dry_run: bool) -> Result<Vec<StageReport>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            out.push(self.run_stage(stage, dry_run)?);
            if dry_run {
                break;
            }
        }
        Ok(out)
    }

    fn fetch_paths(
        &self,
        items: &[FetchItem],
        report: &mut StageReport,
    ) -> Result<Vec<Option<PathBuf>>> {
        let client = self.client()?;
        let got = client.fetch_many(items, self.config.workers)?;
        Ok(got
            .into_iter()
            .zip(items)
            .map(|(r, item)| match r {
                Ok(f) => Some(f.path),
                Err(e) => {
                    let image_ref = client
                        .cached_path(item)
                        .map(|p| p.display().to_string())
                        .unwrap_or_default();
                    report.failures.push(RequestFailure {
                        image_ref,
                        message: e.to_string(),
                    });
                    None
                }
            })
            .collect())
    }

    fn detect_aerial(
        &self,
        store: &mut TreeStore,
        dry_run: bool,
        report: &mut StageReport,
    ) -> Result<()> {
        let plan: TilePlan = read_json(&self.out.tile_plan())?;
        report.requested = plan.tiles.len() as u64;
        if dry_run {
            return Ok(());
        }
        let items: Vec<FetchItem> = plan.tiles.iter().map(|&t| FetchItem::Tile(t)).collect();
        let paths = self.fetch_paths(&items, report)?;
        let requests: Vec<DetectionRequest> = plan
            .tiles
            .iter()
            .zip(paths)
            .filter_map(|(&t, p)| p.map(|p| DetectionRequest::aerial(p.display().to_string(), t)))
            .collect();
        let batch = run_detection_batch(
            &requests,
            self.backends()?.aerial.as_ref(),
            self.config.score_threshold,
        )?;
        report.failures.extend(batch.failures);
        let mut cands = georeference(&batch.detections)?;
        cands.retain(|c| self.aoi.contains(c.location));
        for tree in merge_candidates(&cands, self.config.dedup_radius_m)? {
            store.upsert_tree(tree)?;
        }
        Ok(())
    }

    fn street_request(&self, pano: &PanoramaRecord, heading: f64) -> Result<StreetImageRequest> {
        let mut r = StreetImageRequest::for_pano(pano, heading)?;
        r.fov = self.config.fov;
        r.width = self.config.street_image_size;
        r.height = self.config.street_image_size;
        Ok(r)
    }

    fn expected_width(&self, tree: &TreeRecord, pano: Option<GeoPoint>) -> Option<f64> {
        let d = haversine_m(pano?, tree.location);
        expected_crown_px(
            tree.crown_diameter_m?,
            d,
            self.config.fov,
            self.config.street_image_size,
        )
    }

    fn observed_request(&self, o: &Observation) -> Option<StreetImageRequest> {
        Some(StreetImageRequest {
            pano_id: Some(o.pano_id.clone()?),
            location: None,
            heading: o.heading?,
            fov: self.config.fov,
            width: self.config.street_image_size,
            height: self.config.street_image_size,
        })
    }

    fn link(&self, store: &mut TreeStore, dry_run: bool, report: &mut StageReport) -> Result<()> {
        let todo: Vec<TreeRecord> = store
            .snapshot()
            .trees()
            .iter()
            .filter(|t| !t.street_unreachable && t.link_observation().is_none())
            .cloned()
            .collect();
        report.requested = todo.len() as u64;
        if dry_run {
            return Ok(());
        }
        let client = self.client()?;
        let mut linked: Vec<(TreeRecord, PanoramaRecord, StreetImageRequest)> = Vec::new();
        for mut tree in todo {
            let pano = client.source().nearest_panorama(tree.location)?;
            let pano = pano.filter(|p| {
                p.location != tree.location
                    && haversine_m(p.location, tree.location) <= self.config.visibility_radius_m
            });
            match pano {
                None => {
                    tree.street_unreachable = true;
                    store.replace_tree(tree)?;
                }
                Some(p) => {
                    let req =
                        self.street_request(&p, camera_heading(p.location, tree.location)?)?;
                    linked.push((tree, p, req));
                }
            }
        }
        let items: Vec<FetchItem> = linked
            .iter()
            .map(|(_, _, r)| FetchItem::Street(r.clone()))
            .collect();
        let paths = self.fetch_paths(&items, report)?;
        let mut panos: BTreeMap<String, PanoramaRecord> = BTreeMap::new();
        if self.out.linked_panoramas().is_file() {
            for p in read_catalog(&self.out.linked_panoramas())? {
                panos.insert(p.pano_id.clone(), p);
            }
        }
        for ((mut tree, pano, req), path) in linked.into_iter().zip(paths) {
            if path.is_none() {
                continue;
            }
            tree.observations.push(Observation {
                capture_date: pano.capture_date,
                pano_id: Some(pano.pano_id.clone()),
                heading: Some(req.heading),
                crown_box: None,
                classification: None,
                link: true,
            });
            store.replace_tree(tree)?;
            panos.insert(pano.pano_id.clone(), pano);
        }
        let panos: Vec<PanoramaRecord> = panos.into_values().collect();
        write_catalog(&self.out.linked_panoramas(), &panos)
    }

    /// Fetches the views, detects crowns and keeps the best-fitting crown
    /// per view (see [`crown_misfit`]). Each view comes with the expected
    /// crown width in pixels, when known.
    fn locate_crowns(
        &self,
        views: &[(StreetImageRequest, Option<f64>)],
        report: &mut StageReport,
    ) -> Result<HashMap<String, (PathBuf, PixelBox)>> {
        let items: Vec<FetchItem> = views
            .iter()
            .map(|(r, _)| FetchItem::Street(r.clone()))
            .collect();
        let paths = self.fetch_paths(&items, report)?;
        let mut requests = Vec::new();
        let mut by_ref: HashMap<String, (String, PathBuf, Option<f64>)> = HashMap::new();
        for ((view, expected), path) in views.iter().zip(paths) {
            let Some(path) = path else { continue };
            let image_ref = path.display().to_string();
            let key = view_key(view.pano_id.as_deref().unwrap_or_default(), view.heading);
            by_ref.insert(image_ref.clone(), (key, path, *expected));
            requests.push(DetectionRequest::street(image_ref, view.clone()));
        }
        let batch = run_detection_batch(
            &requests,
            self.backends()?.crown.as_ref(),
            self.config.score_threshold,
        )?;
        report.failures.extend(batch.failures);
        let mut best: HashMap<String, (f64, f64, PixelBox)> = HashMap::new();
        for d in &batch.detections {
            let expected = by_ref[&d.request.image_ref].2;
            let misfit = crown_misfit(&d.bbox, d.request.image_size().0, expected);
            let better = match best.get(&d.request.image_ref) {
                None => true,
                Some(&(m, sc, b)) => {
                    misfit < m
                        || (misfit == m && d.score > sc)
                        || (misfit == m && d.score == sc && d.bbox.as_array() < b.as_array())
                }
            };
            if better {
                best.insert(d.request.image_ref.clone(), (misfit, d.score, d.bbox));
            }
        }
        Ok(best
            .into_iter()
            .map(|(image_ref, (_, _, b))| {
                let (key, path, _) = by_ref[&image_ref].clone();
                (key, (path, b))
            })
            .collect())
    }

    fn detect_street(
        &self,
        store: &mut TreeStore,
        dry_run: bool,
        report: &mut StageReport,
    ) -> Result<()> {
        let todo: Vec<TreeRecord> = store
            .snapshot()
            .trees()
            .iter()
            .filter(|t| t.link_observation().is_some_and(|o| o.crown_box.is_none()))
            .cloned()
            .collect();
        report.requested = todo.len() as u64;
        if dry_run {
            return Ok(());
        }
        let linked: HashMap<String, GeoPoint> = if self.out.linked_panoramas().is_file() {
            read_catalog(&self.out.linked_panoramas())?
                .into_iter()
                .map(|p| (p.pano_id, p.location))
                .collect()
        } else {
            HashMap::new()
        };
        let views: Vec<(StreetImageRequest, Option<f64>)> = todo
            .iter()
            .filter_map(|t| {
                let o = t.link_observation()?;
                let at = o.pano_id.as_ref().and_then(|id| linked.get(id)).copied();
                Some((self.observed_request(o)?, self.expected_width(t, at)))
            })
            .collect();
        let crowns = self.locate_crowns(&views, report)?;
        for mut tree in todo {
            let Some(obs) = tree
                .observations
                .iter_mut()
                .filter(|o| o.link)
                .max_by_key(|o| o.capture_date)
            else {
                continue;
            };
            let (Some(pano), Some(h)) = (obs.pano_id.as_deref(), obs.heading) else {
                continue;
            };
            if let Some((_, b)) = crowns.get(&view_key(pano, h)) {
                obs.crown_box = Some(*b);
                store.replace_tree(tree)?;
            }
        }
        Ok(())
    }

    /// Crops each crown out of its street image and classifies the crops.
    fn classify_crowns(
        &self,
        crowns: &[(String, f64, PathBuf, PixelBox)],
        report: &mut StageReport,
    ) -> Result<HashMap<String, ClassificationResult>> {
        let mut images = Vec::new();
        let mut keys = Vec::new();
        for (pano, heading, street, b) in crowns {
            let crop = self.cache.crop(pano, *heading, b);
            write_crop(street, b, &crop)?;
            images.push(crop.display().to_string());
            keys.push(view_key(pano, *heading));
        }
        let results = run_classification_batch(&images, self.backends()?.classifier.as_ref())?;
        let mut out = HashMap::new();
        for ((key, image), r) in keys.into_iter().zip(images).zip(results) {
            match r.and_then(|p| ClassificationResult::from_probs(p).map_err(|e| e.to_string())) {
                Ok(c) => {
                    out.insert(key, c);
                }
                Err(message) => report.failures.push(RequestFailure {
                    image_ref: image,
                    message,
                }),
            }
        }
        Ok(out)
    }

    fn classify(
        &self,
        store: &mut TreeStore,
        dry_run: bool,
        report: &mut StageReport,
    ) -> Result<()> {
        let todo: Vec<TreeRecord> = store
            .snapshot()
            .trees()
            .iter()
            .filter(|t| {
                t.current_observation()
                    .is_some_and(|o| o.classification.is_none())
            })
            .cloned()
            .collect();
        report.requested = todo.len() as u64;
        if dry_run {
            return Ok(());
        }
        let mut crowns = Vec::new();
        for t in &todo {
            let o = t.current_observation().expect("filtered");
            let (Some(req), Some(b)) = (self.observed_request(o), o.crown_box) else {
                continue;
            };
            let street = self
                .client()?
                .cached_path(&FetchItem::Street(req.clone()))?;
            crowns.push((req.pano_id.clone().expect("set"), req.heading, street, b));
        }
        let classes = self.classify_crowns(&crowns, report)?;
        for mut tree in todo {
            let Some(obs) = tree
                .observations
                .iter_mut()
                .filter(|o| o.link && o.crown_box.is_some())
                .max_by_key(|o| o.capture_date)
            else {
                continue;
            };
            let (Some(pano), Some(h)) = (obs.pano_id.as_deref(), obs.heading) else {
                continue;
            };
            let Some(c) = classes.get(&view_key(pano, h)) else {
                continue;
            };
            obs.classification = Some(*c);
            let dated: Vec<_> = tree
                .observations
                .iter()
                .filter_map(|o| o.classification.map(|c| (o.capture_date, c)))
                .collect();
            // an all-unknown history has no timeline yet
            tree.timeline = build_timeline(&dated).ok();
            store.replace_tree(tree)?;
        }
        Ok(())
    }

    fn history_catalog(&self) -> Result<Vec<PanoramaRecord>> {
        let mut all: BTreeMap<String, PanoramaRecord> = BTreeMap::new();
        for p in self.client()?.source().panorama_catalog()? {
            all.insert(p.pano_id.clone(), p);
        }
        if self.out.linked_panoramas().is_file() {
            for p in read_catalog(&self.out.linked_panoramas())? {
                all.entry(p.pano_id.clone()).or_insert(p);
            }
        }
        Ok(all.into_values().collect())
    }

    fn history(
        &self,
        store: &mut TreeStore,
        dry_run: bool,
        report: &mut StageReport,
    ) -> Result<()> {
        let todo: Vec<TreeRecord> = store
            .snapshot()
            .trees()
            .iter()
            .filter(|t| t.current_observation().is_some())
            .cloned()
            .collect();
        let catalog = self.history_catalog()?;
        let width = self.config.street_image_size;
        let radius = self.config.history_radius_m;

        // first pass records the views each tree needs
        let mut recorder = Recorder::default();
        let mut eligible = Vec::new();
        let mut views: Vec<(StreetImageRequest, Option<f64>)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for tree in todo {
            let start = recorder.views.len();
            match classify_tree_history(&tree, &catalog, radius, width, &mut recorder) {
                Ok(_) => {
                    for (mut v, at) in recorder.views[start..].iter().cloned() {
                        if seen.insert(view_key(
                            v.pano_id.as_deref().unwrap_or_default(),
                            v.heading,
                        )) {
                            v.fov = self.config.fov;
                            v.width = width;
                            v.height = width;
                            views.push((v, self.expected_width(&tree, Some(at))));
                        }
                    }
                    eligible.push(tree);
                }
                Err(e) => report.failures.push(RequestFailure {
                    image_ref: tree.id.clone(),
                    message: e.to_string(),
                }),
            }
        }
        report.requested = views.len() as u64;
        if dry_run {
            return Ok(());
        }

        let crowns = self.locate_crowns(&views, report)?;
        let mut located: Vec<(String, f64, PathBuf, PixelBox)> = views
            .iter()
            .filter_map(|(v, _)| {
                let pano = v.pano_id.clone()?;
                let (path, b) = crowns.get(&view_key(&pano, v.heading))?.clone();
                Some((pano, v.heading, path, b))
            })
            .collect();
        located.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let classes = self.classify_crowns(&located, report)?;
        let readings: HashMap<String, CrownReading> = located
            .iter()
            .filter_map(|(pano, h, _, b)| {
                let key = view_key(pano, *h);
                let c = classes.get(&key)?;
                Some((
                    key,
                    CrownReading {
                        crown_box: *b,
                        classification: *c,
                    },
                ))
            })
            .collect();

        let mut lookup = Lookup {
            readings: &readings,
        };
        for mut tree in eligible {
            let h = classify_tree_history(&tree, &catalog, radius, width, &mut lookup)?;
            if h.observations.is_empty() {
                continue;
            }
            tree.observations.extend(h.observations);
            if h.timeline.is_some() {
                tree.timeline = h.timeline;
            }
            store.replace_tree(tree)?;
        }
        Ok(())
    }

    /// Writes the report artifacts under `<out>/report`.
    pub fn report(&self) -> Result<ReportSummary> {
        let trees = self.trees()?;
        let c = &self.config;
        let dir = self.out.report_dir();
        let grid = build_heatmap(&trees, &self.aoi, c.heatmap_cell_m)?;
        let infested: Vec<TreeRecord> = trees
            .iter()
            .filter(|t| {
                t.timeline
                    .as_ref()
                    .is_some_and(|tl| tl.status.is_infested())
            })
            .cloned()
            .collect();
        let infested_grid = build_heatmap(&infested, &self.aoi, c.heatmap_cell_m)?;
        let spots = hotspots(&infested_grid, c.hotspot_min_count)?;
        let inputs = match &c.cost_inputs {
            Some(i) => i.clone(),
            None => {
                let (tiles, streets, _) = self.compute_plan()?;
                let linked = trees
                    .iter()
                    .filter(|t| t.link_observation().is_some())
                    .count() as u64;
                self.cost_inputs_for(
                    tiles.tiles.len() as u64,
                    streets.samples.len() as u64,
                    linked,
                )
            }
        };
        let cost = cost_comparison(&inputs)?;
        let ledger = read_ledger(&self.cache)?;
        let summary = summarize(&trees);

        let json = |v: Result<serde_json::Value, serde_json::Error>| {
            v.map_err(|e| Error::json("report", e))
        };
        let artifacts = [
            ("trees.geojson", export_geojson(&trees)),
            ("heatmap.json", json(serde_json::to_value(&grid))?),
            (
                "infested_heatmap.json",
                json(serde_json::to_value(&infested_grid))?,
            ),
            ("hotspots.json", json(serde_json::to_value(&spots))?),
            (
                "cost.json",
                serde_json::json!({
                    "inputs": inputs,
                    "comparison": cost,
                    "ledger": ledger,
                    "ledger_usd": crate::report::micro_to_usd(ledger.micro_usd),
                }),
            ),
            (
                "timelines.json",
                json(serde_json::to_value(timeline_summaries(&trees)))?,
            ),
            ("summary.json", json(serde_json::to_value(&summary))?),
        ];
        let mut files = Vec::new();
        for (name, value) in &artifacts {
            let path = dir.join(name);
            write_json(&path, value)?;
            files.push(path);
        }
        let html = render_html(
            &format!("Palm survey: {}", self.aoi.name),
            &summary,
            Some(&cost),
            &infested_grid,
            &spots,
        );
        let path = dir.join("report.html");
        write_atomic(&path, html.as_bytes())?;
        files.push(path);
        Ok(ReportSummary {
            summary,
            cost,
            ledger,
            hotspots: spots.len() as u64,
            files,
        })
    }
}

/// How poorly a detected box fits the crown a view was aimed at: its
/// offset from the vertical midline in half-widths plus, when the crown size
/// is known from the air, the log ratio of its width to the expected width.
/// Lower is better.
fn crown_misfit(b: &PixelBox, image_width: u32, expected_px: Option<f64>) -> f64 {
    let offset = (b.center().0 - f64::from(image_width) / 2.0).abs();
    let width = b.x_max - b.x_min;
    match expected_px {
        Some(e) if e > 0.0 && width > 0.0 => offset / (e / 2.0) + (width / e).ln().abs(),
        _ => offset,
    }
}

/// Pixel width of a crown of `diameter_m` seen from `d_m` away.
fn expected_crown_px(diameter_m: f64, d_m: f64, fov: f64, image_width: u32) -> Option<f64> {
    (diameter_m > 0.0 && d_m > 0.0)
        .then(|| 2.0 * (diameter_m / 2.0 / d_m).atan().to_degrees() * f64::from(image_width) / fov)
}

fn load_world(path: &Path) -> Result<Arc<SyntheticWorld>> {
    SyntheticWorld::load(path)
        .map(Arc::new)
        .map_err(|e| Error::Config(format!("world file {}: {e}", path.display())))
}

#[derive(Default)]
struct Recorder {
    views: Vec<(StreetImageRequest, GeoPoint)>,
}

impl CrownClassifier for Recorder {
    fn classify_view(
        &mut self,
        pano: &PanoramaRecord,
        request: &StreetImageRequest,
    ) -> Result<Option<CrownReading>> {
        self.views.push((request.clone(), pano.location));
        Ok(None)
    }
}

struct Lookup<'a> {
    readings: &'a HashMap<String, CrownReading>,
}

impl CrownClassifier for Lookup<'_> {
    fn classify_view(
        &mut self,
        _pano: &PanoramaRecord,
        request: &StreetImageRequest,
    ) -> Result<Option<CrownReading>> {
        let pano = request.pano_id.as_deref().unwrap_or_default();
        Ok(self.readings.get(&view_key(pano, request.heading)).cloned())
    }
}

/// Cuts the crown out of a decodable street image as PNG. Placeholder
/// images get a small JSON descriptor naming the source view and box.
fn write_crop(street: &Path, b: &PixelBox, dest: &Path) -> Result<()> {
    if dest.is_file() {
        return Ok(());
    }
    let bytes = match image::open(street) {
        Ok(img) => {
            let (w, h) = (img.width(), img.height());
            let x0 = (b.x_min.floor().max(0.0) as u32).min(w.saturating_sub(1));
            let y0 = (b.y_min.floor().max(0.0) as u32).min(h.saturating_sub(1));
            let x1 = (b.x_max.ceil() as u32).clamp(x0 + 1, w.max(x0 + 1));
            let y1 = (b.y_max.ceil() as u32).clamp(y0 + 1, h.max(y0 + 1));
            let crop = img.crop_imm(x0, y0, x1 - x0, y1 - y0);
            let mut buf = Cursor::new(Vec::new());
            crop.write_to(&mut buf, image::ImageFormat::Png)
                .map_err(|e| {
                    Error::domain(format!("cannot encode crop of {}: {e}", street.display()))
                })?;
            buf.into_inner()
        }
        Err(_) => {
            let source = parse_image_ref(&street.display().to_string())
                .map(|r| r.key())
                .unwrap_or_else(|| street.display().to_string());
            let mut v = serde_json::to_vec(&serde_json::json!({ "crop_of": source, "box": b }))
                .map_err(|e| Error::json("crop descriptor", e))?;
            v.push(b'\n');
            v
        }
    };
    write_atomic(dest, &bytes)
}
