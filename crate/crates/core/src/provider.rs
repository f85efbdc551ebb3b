//! Imagery sources and the caching client in front of them.
//!
//! Every image is stored under its cache address ([`CacheLayout`]) and only
//! fetched on a miss; each miss appends one line to the cost ledger at
//! `<cache>/meta/fetches.jsonl`.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cache::{heading_key, CacheLayout};
use crate::error::{Error, ProviderError, Result};
use crate::geo::{haversine_m, GeoPoint, TileId};
use crate::linker::{read_catalog, PanoramaRecord, StreetImageRequest};
use crate::report::to_micro_usd;
use crate::sim::SyntheticWorld;

pub const LEDGER_FILE: &str = "fetches.jsonl";
pub const DEFAULT_RATE_LIMIT: f64 = 10.0;

/// Where imagery and panorama metadata come from.
pub trait ImagerySource: Send + Sync {
    fn tile(&self, tile: TileId) -> Result<Vec<u8>>;
    /// `request.pano_id` is always set by the pipeline.
    fn street(&self, request: &StreetImageRequest) -> Result<Vec<u8>>;
    /// Most recent panorama nearest to `p`, if the provider has one.
    fn nearest_panorama(&self, p: GeoPoint) -> Result<Option<PanoramaRecord>>;
    /// Every known capture, historical ones included.
    fn panorama_catalog(&self) -> Result<Vec<PanoramaRecord>>;
}

fn nearest_of<'a>(
    p: GeoPoint,
    panos: impl Iterator<Item = &'a PanoramaRecord>,
) -> Option<PanoramaRecord> {
    panos
        .map(|q| (haversine_m(p, q.location), q))
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.pano_id.cmp(&b.pano_id)))
        .map(|(_, q)| q.clone())
}

fn pano_of(request: &StreetImageRequest) -> Result<&str> {
    request
        .pano_id
        .as_deref()
        .ok_or_else(|| Error::domain("street request without a panorama id"))
}

/// Serves placeholder bytes and metadata straight from a synthetic world.
pub struct SimulatedSource {
    world: Arc<SyntheticWorld>,
}

impl SimulatedSource {
    pub fn new(world: Arc<SyntheticWorld>) -> Self {
        SimulatedSource { world }
    }
}

impl ImagerySource for SimulatedSource {
    fn tile(&self, t: TileId) -> Result<Vec<u8>> {
        Ok(format!("synthetic tile {}/{}/{}\n", t.zoom, t.x, t.y).into_bytes())
    }

    fn street(&self, request: &StreetImageRequest) -> Result<Vec<u8>> {
        let pano = pano_of(request)?;
        if self.world.panorama(pano).is_none() {
            return Err(ProviderError::NotFound(format!("panorama {pano}")).into());
        }
        Ok(format!("synthetic street {pano} {}\n", heading_key(request.heading)).into_bytes())
    }

    fn nearest_panorama(&self, p: GeoPoint) -> Result<Option<PanoramaRecord>> {
        Ok(nearest_of(p, self.world.current_panoramas().into_iter()))
    }

    fn panorama_catalog(&self) -> Result<Vec<PanoramaRecord>> {
        Ok(self.world.panoramas.clone())
    }
}

/// Imagery laid out on disk like the cache, plus JSON-lines catalogs.
pub struct DirectorySource {
    layout: CacheLayout,
    current: Vec<PanoramaRecord>,
    history: Vec<PanoramaRecord>,
}

impl DirectorySource {
    /// `current` lists the panoramas used for linking; `history` the older
    /// captures (may be absent).
    pub fn open(root: &Path, current: &Path, history: Option<&Path>) -> Result<Self> {
        let current = read_catalog(current)?;
        let mut history = match history {
            Some(p) => read_catalog(p)?,
            None => Vec::new(),
        };
        history.extend(current.iter().cloned());
        history.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
        history.dedup_by(|a, b| a.pano_id == b.pano_id);
        Ok(DirectorySource {
            layout: CacheLayout::new(root),
            current,
            history,
        })
    }

    fn read(path: PathBuf) -> Result<Vec<u8>> {
        match std::fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(ProviderError::NotFound(path.display().to_string()).into())
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl ImagerySource for DirectorySource {
    fn tile(&self, t: TileId) -> Result<Vec<u8>> {
        Self::read(self.layout.tile(t))
    }

    fn street(&self, request: &StreetImageRequest) -> Result<Vec<u8>> {
        Self::read(self.layout.street(pano_of(request)?, request.heading))
    }

    fn nearest_panorama(&self, p: GeoPoint) -> Result<Option<PanoramaRecord>> {
        Ok(nearest_of(p, self.current.iter()))
    }

    fn panorama_catalog(&self) -> Result<Vec<PanoramaRecord>> {
        Ok(self.history.clone())
    }
}

/// Token bucket holding at most one second's worth of requests.
pub struct TokenBucket {
    rate: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_s: f64) -> Result<Self> {
        if !(rate_per_s > 0.0 && rate_per_s.is_finite()) {
            return Err(Error::Config(format!(
                "rate limit must be positive, got {rate_per_s}"
            )));
        }
        let cap = rate_per_s.max(1.0);
        Ok(TokenBucket {
            rate: rate_per_s,
            state: Mutex::new((cap, Instant::now())),
        })
    }

    /// Blocks until a request may go out.
    pub fn acquire(&self) {
        let cap = self.rate.max(1.0);
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.rate).min(cap);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

/// URL templates for a static-imagery HTTP API.
///
/// Placeholders: `{z} {x} {y}` for tiles; `{pano} {heading} {fov} {width}
/// {height}` for street images; `{lat} {lon}` for metadata; `{key}` in all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpTemplates {
    pub tile_url: String,
    pub street_url: String,
    pub metadata_url: String,
}

#[cfg(feature = "http")]
pub struct HttpSource {
    templates: HttpTemplates,
    key: String,
    client: reqwest::blocking::Client,
    bucket: TokenBucket,
    history: Vec<PanoramaRecord>,
}

#[cfg(feature = "http")]
#[derive(Deserialize)]
struct MetadataReply {
    status: String,
    #[serde(default)]
    pano_id: Option<String>,
    #[serde(default)]
    location: Option<MetadataLocation>,
    #[serde(default)]
    date: Option<String>,
}

#[cfg(feature = "http")]
#[derive(Deserialize)]
struct MetadataLocation {
    lat: f64,
    lng: f64,
}

#[cfg(feature = "http")]
impl HttpSource {
    /// Reads the key from `key_env`; it never lives in the config.
    pub fn new(
        templates: HttpTemplates,
        key_env: &str,
        rate_per_s: f64,
        timeout: Duration,
        history: Vec<PanoramaRecord>,
    ) -> Result<Self> {
        let key = std::env::var(key_env).map_err(|_| {
            ProviderError::Auth(format!("environment variable {key_env} is not set"))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Request(e.to_string()))?;
        Ok(HttpSource {
            templates,
            key,
            client,
            bucket: TokenBucket::new(rate_per_s)?,
            history,
        })
    }

    fn fill(&self, template: &str, vars: &[(&str, String)]) -> String {
        let mut url = template.replace("{key}", &self.key);
        for (k, v) in vars {
            url = url.replace(&format!("{{{k}}}"), v);
        }
        url
    }

    fn get(&self, url: &str) -> Result<Vec<u8>> {
        let mut last = String::new();
        for attempt in 0..3u32 {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 << attempt));
            }
            self.bucket.acquire();
            let resp = match self.client.get(url).send() {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status().as_u16();
            match status {
                200..=299 => {
                    return resp
                        .bytes()
                        .map(|b| b.to_vec())
                        .map_err(|e| ProviderError::Request(e.to_string()).into())
                }
                401 | 403 => return Err(ProviderError::Auth(format!("HTTP {status}")).into()),
                404 => {
                    return Err(
                        ProviderError::NotFound(format!("HTTP 404 for {}", redact(url))).into(),
                    )
                }
                429 => return Err(ProviderError::Quota(format!("HTTP {status}")).into()),
                _ => last = format!("HTTP {status}"),
            }
        }
        Err(ProviderError::Request(last).into())
    }
}

#[cfg(feature = "http")]
fn redact(url: &str) -> String {
    url.split('?').next().unwrap_or(url).to_string()
}

#[cfg(feature = "http")]
impl ImagerySource for HttpSource {
    fn tile(&self, t: TileId) -> Result<Vec<u8>> {
        let url = self.fill(
            &self.templates.tile_url,
            &[
                ("z", t.zoom.to_string()),
                ("x", t.x.to_string()),
                ("y", t.y.to_string()),
            ],
        );
        self.get(&url)
    }

    fn street(&self, r: &StreetImageRequest) -> Result<Vec<u8>> {
        let url = self.fill(
            &self.templates.street_url,
            &[
                ("pano", pano_of(r)?.to_string()),
                ("heading", heading_key(r.heading)),
                ("fov", r.fov.to_string()),
                ("width", r.width.to_string()),
                ("height", r.height.to_string()),
            ],
        );
        self.get(&url)
    }

    fn nearest_panorama(&self, p: GeoPoint) -> Result<Option<PanoramaRecord>> {
        let url = self.fill(
            &self.templates.metadata_url,
            &[
                ("lat", format!("{:.7}", p.lat)),
                ("lon", format!("{:.7}", p.lon)),
            ],
        );
        let body = self.get(&url)?;
        let reply: MetadataReply = serde_json::from_slice(&body)
            .map_err(|e| ProviderError::Request(format!("bad metadata reply: {e}")))?;
        match reply.status.as_str() {
            "OK" => {}
            "ZERO_RESULTS" | "NOT_FOUND" => return Ok(None),
            "OVER_QUERY_LIMIT" => return Err(ProviderError::Quota(reply.status).into()),
            "REQUEST_DENIED" => return Err(ProviderError::Auth(reply.status).into()),
            other => return Err(ProviderError::Request(format!("metadata status {other}")).into()),
        }
        let (Some(pano_id), Some(loc), Some(date)) = (reply.pano_id, reply.location, reply.date)
        else {
            return Err(ProviderError::Request("metadata reply missing fields".into()).into());
        };
        let capture_date = date
            .get(..7)
            .unwrap_or(&date)
            .parse()
            .map_err(|_| ProviderError::Request(format!("bad capture date {date}")))?;
        Ok(Some(PanoramaRecord {
            pano_id,
            location: GeoPoint::new(loc.lat, loc.lng)?,
            capture_date,
        }))
    }

    fn panorama_catalog(&self) -> Result<Vec<PanoramaRecord>> {
        Ok(self.history.clone())
    }
}

/// Unit prices charged per fetched image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitCosts {
    #[serde(default = "default_street_cost")]
    pub street_image_usd: f64,
    #[serde(default)]
    pub aerial_tile_usd: f64,
}

fn default_street_cost() -> f64 {
    crate::report::STREET_IMAGE_UNIT_COST_USD
}

impl Default for UnitCosts {
    fn default() -> Self {
        UnitCosts {
            street_image_usd: default_street_cost(),
            aerial_tile_usd: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchKind {
    Tile,
    Street,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: FetchKind,
    pub key: String,
    pub micro_usd: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerTotals {
    pub tiles: u64,
    pub street_images: u64,
    pub micro_usd: u64,
}

pub fn read_ledger(cache: &CacheLayout) -> Result<LedgerTotals> {
    let path = cache.meta(LEDGER_FILE);
    let mut totals = LedgerTotals::default();
    let file = match std::fs::File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(totals),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LedgerEntry = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        match entry.kind {
            FetchKind::Tile => totals.tiles += 1,
            FetchKind::Street => totals.street_images += 1,
        }
        totals.micro_usd += entry.micro_usd;
    }
    Ok(totals)
}

/// What to fetch.
#[derive(Debug, Clone, PartialEq)]
pub enum FetchItem {
    Tile(TileId),
    Street(StreetImageRequest),
}

/// A cached image and whether this call paid for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetched {
    pub path: PathBuf,
    pub fetched: bool,
}

pub struct ProviderClient {
    source: Arc<dyn ImagerySource>,
    cache: CacheLayout,
    tile_micro: u64,
    street_micro: u64,
}

impl ProviderClient {
    pub fn new(
        source: Arc<dyn ImagerySource>,
        cache: CacheLayout,
        costs: UnitCosts,
    ) -> Result<Self> {
        Ok(ProviderClient {
            source,
            cache,
            tile_micro: to_micro_usd(costs.aerial_tile_usd)?,
            street_micro: to_micro_usd(costs.street_image_usd)?,
        })
    }

    pub fn cache(&self) -> &CacheLayout {
        &self.cache
    }

    pub fn source(&self) -> &dyn ImagerySource {
        self.source.as_ref()
    }

    pub fn cached_path(&self, item: &FetchItem) -> Result<PathBuf> {
        Ok(match item {
            FetchItem::Tile(t) => self.cache.tile(*t),
            FetchItem::Street(r) => self.cache.street(pano_of(r)?, r.heading),
        })
    }

    fn fetch_one(&self, item: &FetchItem) -> Result<(Fetched, Option<LedgerEntry>)> {
        let path = self.cached_path(item)?;
        if path.is_file() {
            return Ok((
                Fetched {
                    path,
                    fetched: false,
                },
                None,
            ));
        }
        let (bytes, entry) = match item {
            FetchItem::Tile(t) => (
                self.source.tile(*t)?,
                LedgerEntry {
                    kind: FetchKind::Tile,
                    key: format!("{}/{}/{}", t.zoom, t.x, t.y),
                    micro_usd: self.tile_micro,
                },
            ),
            FetchItem::Street(r) => (
                self.source.street(r)?,
                LedgerEntry {
                    kind: FetchKind::Street,
                    key: format!("{}/{}", pano_of(r)?, heading_key(r.heading)),
                    micro_usd: self.street_micro,
                },
            ),
        };
        write_atomic(&path, &bytes)?;
        Ok((
            Fetched {
                path,
                fetched: true,
            },
            Some(entry),
        ))
    }

    fn append_ledger(&self, entries: &[LedgerEntry]) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let path = self.cache.meta(LEDGER_FILE);
        create_parent(&path)?;
        let mut buf = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut buf, e).map_err(|e| Error::json("ledger entry", e))?;
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))
    }

    pub fn fetch(&self, item: &FetchItem) -> Result<Fetched> {
        let (f, entry) = self.fetch_one(item)?;
        self.append_ledger(entry.as_slice())?;
        Ok(f)
    }

    /// Fetches over `workers` threads. Missing resources fail in place;
    /// auth, quota and I/O errors abort. Ledger lines follow input order.
    pub fn fetch_many(&self, items: &[FetchItem], workers: usize) -> Result<Vec<Result<Fetched>>> {
        type Slot = Option<Result<(Fetched, Option<LedgerEntry>)>>;
        let slots: Mutex<Vec<Slot>> = Mutex::new((0..items.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers.clamp(1, items.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let r = self.fetch_one(&items[i]);
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        let mut out = Vec::with_capacity(items.len());
        let mut ledger = Vec::new();
        let mut fatal = None;
        for slot in slots.into_inner().unwrap() {
            match slot.expect("every slot filled") {
                Ok((f, entry)) => {
                    ledger.extend(entry);
                    out.push(Ok(f));
                }
                Err(
                    e @ Error::Provider(ProviderError::NotFound(_) | ProviderError::Request(_)),
                ) => out.push(Err(e)),
                Err(e) => {
                    fatal.get_or_insert(e);
                }
            }
        }
        self.append_ledger(&ledger)?;
        match fatal {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Writes through a temporary sibling so readers never see partial files.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".{}.part", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_world, WorldParams};

    fn client(dir: &Path) -> (Arc<SyntheticWorld>, ProviderClient) {
        let w = Arc::new(
            generate_world(
                3,
                &WorldParams {
                    palm_count: Some(5),
                    ..WorldParams::default()
                },
            )
            .unwrap(),
        );
        let c = ProviderClient::new(
            Arc::new(SimulatedSource::new(Arc::clone(&w))),
            CacheLayout::new(dir),
            UnitCosts::default(),
        )
        .unwrap();
        (w, c)
    }

    #[test]
    fn cache_hits_are_free() {
        let dir = tempfile::tempdir().unwrap();
        let (w, c) = client(dir.path());
        let pano = w.current_panoramas()[0].clone();
        let items: Vec<FetchItem> = [0.0, 90.0, 0.0]
            .iter()
            .map(|&h| FetchItem::Street(StreetImageRequest::for_pano(&pano, h).unwrap()))
            .collect();
        let first = c.fetch_many(&items, 1).unwrap();
        assert!(first[0].as_ref().unwrap().fetched);
        // the repeated view is a hit even within one batch
        assert!(!first[2].as_ref().unwrap().fetched);
        c.fetch_many(&items, 4).unwrap();
        let totals = read_ledger(c.cache()).unwrap();
        assert_eq!(totals.street_images, 2);
        assert_eq!(totals.micro_usd, 14_000);
    }

    #[test]
    fn unknown_panorama_fails_in_place() {
        let dir = tempfile::tempdir().unwrap();
        let (w, c) = client(dir.path());
        let mut ghost = w.panoramas[0].clone();
        ghost.pano_id = "nope".into();
        let items = vec![
            FetchItem::Street(StreetImageRequest::for_pano(&ghost, 0.0).unwrap()),
            FetchItem::Tile(TileId::new(20, 1, 1).unwrap()),
        ];
        let got = c.fetch_many(&items, 2).unwrap();
        assert!(matches!(
            got[0],
            Err(Error::Provider(ProviderError::NotFound(_)))
        ));
        assert!(got[1].is_ok());
        assert_eq!(
            read_ledger(c.cache()).unwrap(),
            LedgerTotals {
                tiles: 1,
                street_images: 0,
                micro_usd: 0
            }
        );
    }

    #[test]
    fn nearest_uses_current_captures() {
        let dir = tempfile::tempdir().unwrap();
        let (w, c) = client(dir.path());
        let p = w.palms[0].location;
        let got = c.source().nearest_panorama(p).unwrap().unwrap();
        assert!(w.current.contains(&got.pano_id));
    }

    #[test]
    fn token_bucket_paces_requests() {
        let b = TokenBucket::new(50.0).unwrap();
        let t = Instant::now();
        for _ in 0..75 {
            b.acquire();
        }
        // 50 come from the full bucket, the remaining 25 take ~0.5 s
        assert!(t.elapsed() >= Duration::from_millis(400));
        assert!(TokenBucket::new(0.0).is_err());
    }
}
