//! Durable tree store.
//!
//! The store file holds one JSON record per line. Writes append; on open the
//! file is replayed and the last record for an id wins. [`TreeStore::compact`]
//! rewrites the file sorted by id, which is the canonical on-disk form.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::geo::{haversine_m, GeoBox, GeoPoint, PixelBox, EARTH_MEAN_RADIUS_M};
use crate::timeline::{ClassificationResult, InfestationTimeline};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DEDUP_RADIUS_M: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TreeSource {
    Aerial,
    StreetOnly,
}

/// One look at a tree from the street.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub capture_date: YearMonth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pano_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crown_box: Option<PixelBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationResult>,
    /// Set on the view that linked the tree to its nearest panorama.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub link: bool,
}

impl Observation {
    fn key(&self) -> (YearMonth, Option<&str>, Option<u64>) {
        (
            self.capture_date,
            self.pano_id.as_deref(),
            self.heading.map(f64::to_bits),
        )
    }

    /// Fills fields this observation lacks from `other`; `other` wins where both are set.
    fn absorb(&mut self, other: &Observation) {
        if other.crown_box.is_some() {
            self.crown_box = other.crown_box;
        }
        if other.classification.is_some() {
            self.classification = other.classification;
        }
        self.link |= other.link;
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = &self.classification {
            c.probs.validate()?;
        }
        if let Some(h) = self.heading {
            if !(0.0..360.0).contains(&h) {
                return Err(Error::domain(format!("heading {h} not in [0, 360)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    pub id: String,
    pub location: GeoPoint,
    pub source: TreeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_score: Option<f64>,
    /// Crown width measured on the aerial detection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crown_diameter_m: Option<f64>,
    /// No panorama within line of sight; kept in the registry unclassified.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub street_unreachable: bool,
    #[serde(default)]
    pub observations: Vec<Observation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeline: Option<InfestationTimeline>,
}

impl TreeRecord {
    pub fn new(location: GeoPoint, source: TreeSource) -> Self {
        TreeRecord {
            id: tree_id(location),
            location,
            source,
            detection_score: None,
            crown_diameter_m: None,
            street_unreachable: false,
            observations: Vec::new(),
            timeline: None,
        }
    }

    /// The observation that linked this tree to the street, if it has a crown.
    pub fn current_observation(&self) -> Option<&Observation> {
        self.observations
            .iter()
            .filter(|o| o.link && o.crown_box.is_some())
            .max_by_key(|o| o.capture_date)
    }

    pub fn link_observation(&self) -> Option<&Observation> {
        self.observations
            .iter()
            .filter(|o| o.link)
            .max_by_key(|o| o.capture_date)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id != tree_id(self.location) {
            return Err(Error::domain(format!(
                "tree id {} does not match its location",
                self.id
            )));
        }
        GeoPoint::new(self.location.lat, self.location.lon)?;
        for o in &self.observations {
            o.validate()?;
        }
        if self
            .observations
            .windows(2)
            .any(|w| w[0].capture_date > w[1].capture_date)
        {
            return Err(Error::domain(format!(
                "tree {} observations out of order",
                self.id
            )));
        }
        Ok(())
    }

    fn merge_observations(&mut self, incoming: &[Observation]) {
        for obs in incoming {
            match self.observations.iter_mut().find(|o| o.key() == obs.key()) {
                Some(existing) => existing.absorb(obs),
                None => self.observations.push(obs.clone()),
            }
        }
        sort_observations(&mut self.observations);
    }
}

fn sort_observations(obs: &mut [Observation]) {
    obs.sort_by(|a, b| {
        a.capture_date
            .cmp(&b.capture_date)
            .then_with(|| a.pano_id.cmp(&b.pano_id))
            .then_with(|| {
                a.heading
                    .unwrap_or(-1.0)
                    .total_cmp(&b.heading.unwrap_or(-1.0))
            })
    });
}

/// Stable tree identifier: digest of the location rounded to 1e-6 degrees.
pub fn tree_id(p: GeoPoint) -> String {
    // adding 0.0 folds -0.0 into 0.0 so the text form is unique
    let round = |v: f64| (v * 1e6).round() / 1e6 + 0.0;
    let text = format!("{:.6},{:.6}", round(p.lat), round(p.lon));
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Serialize, Deserialize)]
struct StoredLine {
    schema: u32,
    #[serde(flatten)]
    tree: TreeRecord,
}

/// Uniform lat/lon grid for radius queries.
#[derive(Debug, Clone, Default)]
struct GridIndex {
    cell_deg: f64,
    cells: HashMap<(i64, i64), Vec<String>>,
}

impl GridIndex {
    fn new(radius_m: f64) -> Self {
        GridIndex {
            cell_deg: (radius_m / EARTH_MEAN_RADIUS_M).to_degrees().max(1e-9),
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: GeoPoint) -> (i64, i64) {
        (
            (p.lat / self.cell_deg).floor() as i64,
            (p.lon / self.cell_deg).floor() as i64,
        )
    }

    fn insert(&mut self, p: GeoPoint, id: &str) {
        let k = self.key(p);
        self.cells.entry(k).or_default().push(id.to_string());
    }

    fn near(&self, p: GeoPoint) -> impl Iterator<Item = &String> {
        let (r, c) = self.key(p);
        // a degree of longitude shrinks by cos(lat); widen the column span to match
        let cos = p.lat.to_radians().cos().max(1e-6);
        let span = (1.0 / cos).ceil() as i64 + 1;
        (r - 1..=r + 1)
            .flat_map(move |rr| (c - span..=c + span).map(move |cc| (rr, cc)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
    }
}

/// Immutable view of the registry at one point in time.
#[derive(Debug, Clone)]
pub struct RegistrySnapshot {
    trees: Arc<Vec<TreeRecord>>,
}

impl RegistrySnapshot {
    /// Trees ordered by id.
    pub fn trees(&self) -> &[TreeRecord] {
        &self.trees
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn query_by_box(&self, b: &GeoBox) -> Vec<TreeRecord> {
        self.trees
            .iter()
            .filter(|t| b.contains(t.location))
            .cloned()
            .collect()
    }
}

/// Single-writer tree store.
#[derive(Debug)]
pub struct TreeStore {
    path: Option<PathBuf>,
    radius_m: f64,
    trees: BTreeMap<String, TreeRecord>,
    index: GridIndex,
    journal: Option<File>,
    writes: u64,
}

impl TreeStore {
    pub fn in_memory(radius_m: f64) -> Result<Self> {
        if !(radius_m > 0.0) {
            return Err(Error::domain(format!(
                "dedup radius must be positive, got {radius_m}"
            )));
        }
        Ok(TreeStore {
            path: None,
            radius_m,
            trees: BTreeMap::new(),
            index: GridIndex::new(radius_m),
            journal: None,
            writes: 0,
        })
    }

    /// Opens or creates the store file and replays it.
    pub fn open(path: impl AsRef<Path>, radius_m: f64) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut store = TreeStore::in_memory(radius_m)?;
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (n, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let stored: StoredLine = serde_json::from_str(&line)
                    .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
                if stored.schema != SCHEMA_VERSION {
                    return Err(Error::domain(format!(
                        "{}:{}: unsupported schema version {}",
                        path.display(),
                        n + 1,
                        stored.schema
                    )));
                }
                store.put(stored.tree);
            }
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        store.journal = Some(journal);
        store.path = Some(path);
        Ok(store)
    }

    pub fn radius_m(&self) -> f64 {
        self.radius_m
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    /// Number of records written since the store was opened.
    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn get(&self, id: &str) -> Option<&TreeRecord> {
        self.trees.get(id)
    }

    fn put(&mut self, tree: TreeRecord) {
        if !self.trees.contains_key(&tree.id) {
            self.index.insert(tree.location, &tree.id);
        }
        self.trees.insert(tree.id.clone(), tree);
    }

    fn append(&mut self, tree: &TreeRecord) -> Result<()> {
        self.writes += 1;
        let (Some(journal), Some(path)) = (self.journal.as_mut(), self.path.as_ref()) else {
            return Ok(());
        };
        let mut line = serde_json::to_vec(&StoredLine {
            schema: SCHEMA_VERSION,
            tree: tree.clone(),
        })
        .map_err(|e| Error::json("registry record", e))?;
        line.push(b'\n');
        journal.write_all(&line).map_err(|e| Error::io(path, e))
    }

    /// Nearest stored tree within the dedup radius; ties go to the smaller id.
    pub fn find_near(&self, p: GeoPoint) -> Option<&TreeRecord> {
        self.index
            .near(p)
            .filter_map(|id| self.trees.get(id))
            .map(|t| (haversine_m(p, t.location), t))
            .filter(|(d, _)| *d <= self.radius_m)
            .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.id.cmp(&b.id)))
            .map(|(_, t)| t)
    }

    /// Inserts the candidate, or merges its observations into a stored tree
    /// within the dedup radius. Observations are keyed by
    /// (capture date, pano id, heading).
    pub fn upsert_tree(&mut self, candidate: TreeRecord) -> Result<TreeRecord> {
        candidate.validate()?;
        let merged = match self.find_near(candidate.location) {
            None => {
                let mut fresh = candidate;
                sort_observations(&mut fresh.observations);
                fresh
            }
            Some(existing) => {
                let mut merged = existing.clone();
                merged.merge_observations(&candidate.observations);
                if candidate.source == TreeSource::Aerial {
                    merged.source = TreeSource::Aerial;
                }
                merged.detection_score = match (merged.detection_score, candidate.detection_score) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
                merged.crown_diameter_m = merged.crown_diameter_m.or(candidate.crown_diameter_m);
                merged.street_unreachable |= candidate.street_unreachable;
                if candidate.timeline.is_some() {
                    merged.timeline = candidate.timeline;
                }
                merged
            }
        };
        if self.trees.get(&merged.id) != Some(&merged) {
            self.append(&merged)?;
            self.put(merged.clone());
        }
        Ok(merged)
    }

    /// Replaces a stored tree wholesale (same id).
    pub fn replace_tree(&mut self, mut tree: TreeRecord) -> Result<()> {
        sort_observations(&mut tree.observations);
        tree.validate()?;
        if !self.trees.contains_key(&tree.id) {
            return Err(Error::domain(format!("unknown tree {}", tree.id)));
        }
        if self.trees.get(&tree.id) != Some(&tree) {
            self.append(&tree)?;
            self.put(tree);
        }
        Ok(())
    }

    /// Trees inside the (closed) box, ordered by id.
    pub fn query_by_box(&self, b: &GeoBox) -> Vec<TreeRecord> {
        self.trees
            .values()
            .filter(|t| b.contains(t.location))
            .cloned()
            .collect()
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        RegistrySnapshot {
            trees: Arc::new(self.trees.values().cloned().collect()),
        }
    }

    /// Serializes all trees sorted by id, one per line.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        for tree in self.trees.values() {
            serde_json::to_writer(
                &mut buf,
                &StoredLine {
                    schema: SCHEMA_VERSION,
                    tree: tree.clone(),
                },
            )
            .map_err(|e| Error::json("registry record", e))?;
            buf.push(b'\n');
        }
        Ok(buf)
    }

    /// Rewrites the store file in canonical order. No-op for in-memory stores.
    pub fn compact(&mut self) -> Result<()> {
        let Some(path) = self.path.clone() else {
            return Ok(());
        };
        let bytes = self.canonical_bytes()?;
        let on_disk = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if on_disk == bytes {
            return Ok(());
        }
        let tmp = path.with_extension("jsonl.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        self.journal = Some(
            OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?,
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::destination;
    use crate::timeline::{ClassProbs, CrownLabel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gp(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn obs(date: &str, pano: &str, heading: f64) -> Observation {
        Observation {
            capture_date: date.parse().unwrap(),
            pano_id: Some(pano.into()),
            heading: Some(heading),
            crown_box: None,
            classification: None,
            link: false,
        }
    }

    #[test]
    fn ids_follow_rounded_location() {
        let a = tree_id(gp(32.123_456_1, -117.000_000_2));
        let b = tree_id(gp(32.123_455_9, -116.999_999_8));
        assert_eq!(a, b);
        assert_ne!(a, tree_id(gp(32.123_457, -117.0)));
        assert_eq!(a.len(), 16);
        assert_eq!(tree_id(gp(-0.0000001, 0.0)), tree_id(gp(0.0, 0.0)));
    }

    #[test]
    fn upsert_is_idempotent() {
        let mut store = TreeStore::in_memory(3.0).unwrap();
        let mut t = TreeRecord::new(gp(32.75, -117.13), TreeSource::Aerial);
        t.observations.push(obs("2018-04", "p1", 90.0));
        let first = store.upsert_tree(t.clone()).unwrap();
        let second = store.upsert_tree(t).unwrap();
        assert_eq!(first, second);
        assert_eq!(store.len(), 1);
        assert_eq!(store.writes(), 1);
    }

    #[test]
    fn nearby_candidate_merges_observations_in_date_order() {
        let mut store = TreeStore::in_memory(3.0).unwrap();
        let base = gp(32.75, -117.13);
        let mut a = TreeRecord::new(base, TreeSource::Aerial);
        a.observations.push(obs("2019-04", "p9", 10.0));
        store.upsert_tree(a).unwrap();
        let mut b = TreeRecord::new(destination(base, 45.0, 1.0), TreeSource::StreetOnly);
        b.observations.push(obs("2015-11", "p1", 10.0));
        b.observations.push(obs("2017-11", "p1", 10.0));
        let merged = store.upsert_tree(b).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(merged.location, base);
        assert_eq!(merged.source, TreeSource::Aerial);
        let dates: Vec<String> = merged
            .observations
            .iter()
            .map(|o| o.capture_date.to_string())
            .collect();
        assert_eq!(dates, vec!["2015-11", "2017-11", "2019-04"]);
    }

    #[test]
    fn distant_candidate_inserts() {
        let mut store = TreeStore::in_memory(3.0).unwrap();
        let base = gp(32.75, -117.13);
        store
            .upsert_tree(TreeRecord::new(base, TreeSource::Aerial))
            .unwrap();
        store
            .upsert_tree(TreeRecord::new(
                destination(base, 0.0, 10.0),
                TreeSource::Aerial,
            ))
            .unwrap();
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn merge_fills_missing_fields() {
        let mut store = TreeStore::in_memory(3.0).unwrap();
        let mut t = TreeRecord::new(gp(32.75, -117.13), TreeSource::Aerial);
        t.observations.push(obs("2018-04", "p1", 90.0));
        store.upsert_tree(t.clone()).unwrap();
        let mut o = obs("2018-04", "p1", 90.0);
        o.crown_box = Some(PixelBox::new(1.0, 2.0, 3.0, 4.0).unwrap());
        o.classification = Some(
            ClassificationResult::from_probs(ClassProbs::one_hot(CrownLabel::Healthy)).unwrap(),
        );
        t.observations = vec![o.clone()];
        let merged = store.upsert_tree(t).unwrap();
        assert_eq!(merged.observations, vec![o]);
    }

    #[test]
    fn invalid_records_rejected() {
        let mut store = TreeStore::in_memory(3.0).unwrap();
        let mut t = TreeRecord::new(gp(32.75, -117.13), TreeSource::Aerial);
        t.id = "bogus".into();
        assert!(store.upsert_tree(t).is_err());
        let mut t = TreeRecord::new(gp(32.75, -117.13), TreeSource::Aerial);
        t.observations = vec![obs("2019-01", "a", 0.0), obs("2018-01", "b", 0.0)];
        assert!(store.upsert_tree(t).is_err());
        assert!(TreeStore::in_memory(0.0).is_err());
    }

    #[test]
    fn box_query_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = TreeStore::in_memory(3.0).unwrap();
        assert!(store
            .query_by_box(&GeoBox::new(32.0, -118.0, 33.0, -117.0).unwrap())
            .is_empty());
        let mut all = Vec::new();
        for _ in 0..400 {
            let p = gp(
                32.7 + rng.random::<f64>() * 0.01,
                -117.2 + rng.random::<f64>() * 0.01,
            );
            all.push(
                store
                    .upsert_tree(TreeRecord::new(p, TreeSource::Aerial))
                    .unwrap(),
            );
        }
        let everything = GeoBox::new(32.0, -118.0, 33.0, -117.0).unwrap();
        assert_eq!(store.query_by_box(&everything).len(), store.len());
        for _ in 0..20 {
            let s = 32.7 + rng.random::<f64>() * 0.008;
            let w = -117.2 + rng.random::<f64>() * 0.008;
            let b = GeoBox::new(s, w, s + 0.002, w + 0.003).unwrap();
            let mut expected: Vec<TreeRecord> = store
                .snapshot()
                .trees()
                .iter()
                .filter(|t| {
                    t.location.lat >= s
                        && t.location.lat <= s + 0.002
                        && t.location.lon >= w
                        && t.location.lon <= w + 0.003
                })
                .cloned()
                .collect();
            expected.sort_by(|a, b| a.id.cmp(&b.id));
            assert_eq!(store.query_by_box(&b), expected);
        }
        // no two stored trees within the dedup radius
        let snap = store.snapshot();
        for (i, a) in snap.trees().iter().enumerate() {
            for b in &snap.trees()[i + 1..] {
                assert!(haversine_m(a.location, b.location) > 3.0);
            }
        }
    }

    #[test]
    fn reload_after_write_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.jsonl");
        let mut store = TreeStore::open(&path, 3.0).unwrap();
        let base = gp(32.75, -117.13);
        for k in 0..20 {
            let mut t = TreeRecord::new(
                destination(base, 17.0 * k as f64, 5.0 * k as f64 + 4.0),
                TreeSource::Aerial,
            );
            t.observations.push(obs("2018-04", &format!("p{k}"), 90.0));
            store.upsert_tree(t).unwrap();
        }
        // a superseding write before compaction
        let mut first = store.snapshot().trees()[0].clone();
        first.street_unreachable = true;
        store.replace_tree(first).unwrap();
        let b = GeoBox::new(32.7, -117.2, 32.8, -117.1).unwrap();
        let before = store.query_by_box(&b);
        drop(store);
        let mut reopened = TreeStore::open(&path, 3.0).unwrap();
        assert_eq!(reopened.query_by_box(&b), before);
        reopened.compact().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, reopened.canonical_bytes().unwrap());
        let again = TreeStore::open(&path, 3.0).unwrap();
        assert_eq!(again.query_by_box(&b), before);
        let first_line = String::from_utf8(bytes)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        assert!(first_line.starts_with("{\"schema\":1,\"id\":"));
    }

    #[test]
    fn unknown_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let t = TreeRecord::new(gp(1.0, 1.0), TreeSource::Aerial);
        let mut v = serde_json::to_value(&t).unwrap();
        v["schema"] = 99.into();
        std::fs::write(&path, format!("{v}\n")).unwrap();
        assert!(TreeStore::open(&path, 3.0).is_err());
    }
}
