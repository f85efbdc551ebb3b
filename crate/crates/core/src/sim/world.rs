use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::geo::{haversine_m, GeoBox, GeoPoint, EARTH_MEAN_RADIUS_M};
use crate::linker::PanoramaRecord;
use crate::planner::{sample_street_points, AreaOfInterest, Polyline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    /// South-west corner of the synthetic city.
    pub origin: GeoPoint,
    pub width_m: f64,
    pub height_m: f64,
    /// Street grid pitch.
    pub block_m: f64,
    /// Lateral jitter applied to each street vertex.
    pub street_jitter_m: f64,
    pub pano_spacing_m: f64,
    /// Capture campaigns, oldest first.
    pub capture_dates: Vec<YearMonth>,
    /// Chance that a site was captured in a given campaign; the latest
    /// campaign always covers every site.
    pub capture_probability: f64,
    /// Older captures sit this far (at most) from the site.
    pub history_jitter_m: f64,
    pub palm_cell_m: f64,
    pub palm_jitter_m: f64,
    /// Minimum distance from a palm to the nearest street centerline.
    pub street_clearance_m: f64,
    /// Palms per square kilometre of eligible land; ignored when `palm_count` is set.
    pub density_per_km2: f64,
    pub palm_count: Option<usize>,
    pub infested_fraction: f64,
    pub visibility_radius_m: f64,
    pub crown_radius_m: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            origin: GeoPoint {
                lat: 32.75,
                lon: -117.13,
            },
            width_m: 300.0,
            height_m: 300.0,
            block_m: 100.0,
            street_jitter_m: 3.0,
            pano_spacing_m: 8.0,
            capture_dates: ["2014-06", "2016-02", "2017-11", "2019-04", "2021-08"]
                .iter()
                .map(|s| s.parse().expect("static date"))
                .collect(),
            capture_probability: 1.0,
            history_jitter_m: 1.0,
            palm_cell_m: 10.0,
            palm_jitter_m: 2.5,
            street_clearance_m: 4.0,
            density_per_km2: 1500.0,
            palm_count: None,
            infested_fraction: 0.3,
            visibility_radius_m: 50.0,
            crown_radius_m: 2.0,
        }
    }
}

impl WorldParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width_m", self.width_m),
            ("height_m", self.height_m),
            ("block_m", self.block_m),
            ("pano_spacing_m", self.pano_spacing_m),
            ("palm_cell_m", self.palm_cell_m),
            ("visibility_radius_m", self.visibility_radius_m),
            ("crown_radius_m", self.crown_radius_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!(
                    "world parameter {name} must be positive, got {v}"
                )));
            }
        }
        let non_negative = [
            ("street_jitter_m", self.street_jitter_m),
            ("history_jitter_m", self.history_jitter_m),
            ("palm_jitter_m", self.palm_jitter_m),
            ("street_clearance_m", self.street_clearance_m),
            ("density_per_km2", self.density_per_km2),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(format!(
                    "world parameter {name} must be non-negative, got {v}"
                )));
            }
        }
        if self.palm_jitter_m * 2.0 >= self.palm_cell_m {
            return Err(Error::domain("palm jitter must stay within half a cell"));
        }
        if self.street_jitter_m * 2.0 >= self.block_m {
            return Err(Error::domain("street jitter must stay within half a block"));
        }
        if self.capture_dates.is_empty() || self.capture_dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain(
                "capture dates must be non-empty and strictly increasing",
            ));
        }
        for (name, v) in [
            ("capture_probability", self.capture_probability),
            ("infested_fraction", self.infested_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!(
                    "world parameter {name} must lie in [0, 1], got {v}"
                )));
            }
        }
        let cell_area_km2 = self.palm_cell_m * self.palm_cell_m / 1e6;
        if self.palm_count.is_none() && self.density_per_km2 * cell_area_km2 > 1.0 {
            return Err(Error::domain("density exceeds one palm per cell"));
        }
        Ok(())
    }
}

/// When a palm became infested; `None` means it never was.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPalm {
    pub location: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset: Option<YearMonth>,
}

impl SyntheticPalm {
    pub fn infested_at(&self, date: YearMonth) -> bool {
        self.onset.is_some_and(|o| date >= o)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub params: WorldParams,
    pub streets: Vec<Polyline>,
    pub palms: Vec<SyntheticPalm>,
    pub panoramas: Vec<PanoramaRecord>,
    /// Latest capture at each site: what a nearest-panorama lookup returns.
    pub current: Vec<String>,
    /// Area of the cells palms may occupy, in square meters.
    pub eligible_area_m2: f64,
}

/// Local east/north meters around an origin, equirectangular.
#[derive(Debug, Clone, Copy)]
struct Frame {
    origin: GeoPoint,
    cos_lat: f64,
}

impl Frame {
    fn new(origin: GeoPoint) -> Self {
        Frame {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    fn point(&self, east: f64, north: f64) -> GeoPoint {
        let k = (1.0 / EARTH_MEAN_RADIUS_M).to_degrees();
        GeoPoint {
            lat: self.origin.lat + north * k,
            lon: self.origin.lon + east * k / self.cos_lat,
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

impl SyntheticWorld {
    pub fn aoi(&self) -> Result<AreaOfInterest> {
        let f = Frame::new(self.params.origin);
        let ne = f.point(self.params.width_m, self.params.height_m);
        AreaOfInterest::from_box(
            format!("synthetic-{}", self.seed),
            GeoBox::new(
                self.params.origin.lat,
                self.params.origin.lon,
                ne.lat,
                ne.lon,
            )?,
        )
    }

    pub fn panorama(&self, pano_id: &str) -> Option<&PanoramaRecord> {
        self.panoramas
            .binary_search_by(|p| p.pano_id.as_str().cmp(pano_id))
            .ok()
            .map(|i| &self.panoramas[i])
    }

    pub fn current_panoramas(&self) -> Vec<&PanoramaRecord> {
        self.current
            .iter()
            .filter_map(|id| self.panorama(id))
            .collect()
    }

    /// Distance from a point to the nearest current panorama.
    pub fn street_distance_m(&self, p: GeoPoint) -> f64 {
        self.current_panoramas()
            .iter()
            .map(|q| haversine_m(q.location, p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn visible_palms(&self) -> Vec<usize> {
        (0..self.palms.len())
            .filter(|&i| {
                self.street_distance_m(self.palms[i].location) <= self.params.visibility_radius_m
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut w: SyntheticWorld =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        w.params.validate()?;
        w.panoramas.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
        Ok(w)
    }
}

/// Builds a street grid with jittered vertices, panorama sites along the
/// streets, and palms on a jittered cell grid away from the streets.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<SyntheticWorld> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = Frame::new(params.origin);
    let (w, h) = (params.width_m, params.height_m);
    let j = params.street_jitter_m;

    // streets in local meters: north-south lines first, then east-west
    let mut local_streets: Vec<Vec<(f64, f64)>> = Vec::new();
    let nx = (w / params.block_m).floor() as usize;
    let ny = (h / params.block_m).floor() as usize;
    for k in 0..=nx {
        let base = k as f64 * params.block_m;
        let line = (0..=ny.max(1))
            .map(|i| {
                let north = (i as f64 * params.block_m).min(h);
                let east = (base + rng.random_range(-j..=j)).clamp(0.0, w);
                (east, north)
            })
            .collect();
        local_streets.push(line);
    }
    for k in 0..=ny {
        let base = k as f64 * params.block_m;
        let line = (0..=nx.max(1))
            .map(|i| {
                let east = (i as f64 * params.block_m).min(w);
                let north = (base + rng.random_range(-j..=j)).clamp(0.0, h);
                (east, north)
            })
            .collect();
        local_streets.push(line);
    }
    let mut streets = Vec::new();
    for line in &local_streets {
        let mut pts: Vec<GeoPoint> = line.iter().map(|&(e, n)| frame.point(e, n)).collect();
        pts.dedup();
        if pts.len() >= 2 {
            streets.push(Polyline::new(pts)?);
        }
    }

    // panorama sites and their capture history
    let latest = *params.capture_dates.last().expect("validated non-empty");
    let mut panoramas = Vec::new();
    let mut current = Vec::new();
    let mut site = 0usize;
    for line in &streets {
        for p in sample_street_points(line, params.pano_spacing_m)? {
            for (k, &date) in params.capture_dates.iter().enumerate() {
                let is_latest = date == latest;
                if !is_latest && rng.random::<f64>() >= params.capture_probability {
                    continue;
                }
                let location = if is_latest || params.history_jitter_m == 0.0 {
                    p
                } else {
                    let r = params.history_jitter_m * rng.random::<f64>().sqrt();
                    let theta = rng.random_range(0.0..360.0);
                    crate::geo::destination(p, theta, r)
                };
                let pano_id = format!("s{site:05}-{k}");
                if is_latest {
                    current.push(pano_id.clone());
                }
                panoramas.push(PanoramaRecord {
                    pano_id,
                    location,
                    capture_date: date,
                });
            }
            site += 1;
        }
    }
    panoramas.sort_by(|a, b| a.pano_id.cmp(&b.pano_id));
    current.sort();

    // cells whose every jittered position keeps clear of streets and within sight
    let cell = params.palm_cell_m;
    let reach = params.palm_jitter_m * std::f64::consts::SQRT_2;
    let current_sites: Vec<GeoPoint> = current
        .iter()
        .map(|id| {
            panoramas
                .binary_search_by(|p| p.pano_id.cmp(id))
                .map(|i| panoramas[i].location)
                .expect("current id present")
        })
        .collect();
    let mut eligible = Vec::new();
    let cols = (w / cell).floor() as usize;
    let rows = (h / cell).floor() as usize;
    for r in 0..rows {
        for c in 0..cols {
            let center = ((c as f64 + 0.5) * cell, (r as f64 + 0.5) * cell);
            let street = local_streets
                .iter()
                .flat_map(|l| l.windows(2).map(|s| segment_distance(center, s[0], s[1])))
                .fold(f64::INFINITY, f64::min);
            if street < params.street_clearance_m + reach {
                continue;
            }
            let g = frame.point(center.0, center.1);
            let sight = current_sites
                .iter()
                .map(|&q| haversine_m(q, g))
                .fold(f64::INFINITY, f64::min);
            if sight + reach > params.visibility_radius_m {
                continue;
            }
            eligible.push(center);
        }
    }
    let eligible_area_m2 = eligible.len() as f64 * cell * cell;

    let chosen: Vec<usize> = match params.palm_count {
        Some(n) => {
            if n > eligible.len() {
                return Err(Error::domain(format!(
                    "{n} palms requested but only {} cells are eligible",
                    eligible.len()
                )));
            }
            let mut idx = sample(&mut rng, eligible.len(), n).into_vec();
            idx.sort_unstable();
            idx
        }
        None => {
            let p = params.density_per_km2 * cell * cell / 1e6;
            (0..eligible.len())
                .filter(|_| rng.random::<f64>() < p)
                .collect()
        }
    };

    let first = params.capture_dates[0].ordinal();
    let last = latest.ordinal();
    let mut palms = Vec::with_capacity(chosen.len());
    for i in chosen {
        let (e, n) = eligible[i];
        let pj = params.palm_jitter_m;
        let e = e + if pj > 0.0 {
            rng.random_range(-pj..=pj)
        } else {
            0.0
        };
        let n = n + if pj > 0.0 {
            rng.random_range(-pj..=pj)
        } else {
            0.0
        };
        let onset = if last > first && rng.random::<f64>() < params.infested_fraction {
            Some(YearMonth::from_ordinal(rng.random_range(first + 1..=last))?)
        } else {
            None
        };
        palms.push(SyntheticPalm {
            location: frame.point(e, n),
            onset,
        });
    }

    Ok(SyntheticWorld {
        seed,
        params: params.clone(),
        streets,
        palms,
        panoramas,
        current,
        eligible_area_m2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let p = WorldParams::default();
        let a = generate_world(7, &p).unwrap();
        let b = generate_world(7, &p).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = generate_world(8, &p).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn zero_density_has_no_palms() {
        let p = WorldParams {
            density_per_km2: 0.0,
            ..WorldParams::default()
        };
        assert!(generate_world(1, &p).unwrap().palms.is_empty());
    }

    #[test]
    fn palm_count_within_binomial_band() {
        let p = WorldParams::default();
        for seed in 0..5 {
            let w = generate_world(seed, &p).unwrap();
            let cells = w.eligible_area_m2 / (p.palm_cell_m * p.palm_cell_m);
            let q = p.density_per_km2 * p.palm_cell_m * p.palm_cell_m / 1e6;
            let mean = p.density_per_km2 * w.eligible_area_m2 / 1e6;
            let sigma = (cells * q * (1.0 - q)).sqrt();
            let n = w.palms.len() as f64;
            assert!(
                (n - mean).abs() <= 3.0 * sigma,
                "seed {seed}: {n} vs {mean} +- {sigma}"
            );
        }
    }

    #[test]
    fn exact_count_palms_are_visible_separated_and_inside() {
        let p = WorldParams {
            palm_count: Some(200),
            ..WorldParams::default()
        };
        let w = generate_world(3, &p).unwrap();
        assert_eq!(w.palms.len(), 200);
        assert_eq!(w.visible_palms().len(), 200);
        let aoi = w.aoi().unwrap();
        for (i, a) in w.palms.iter().enumerate() {
            assert!(aoi.contains(a.location));
            for b in &w.palms[i + 1..] {
                assert!(haversine_m(a.location, b.location) > 4.0);
            }
            assert!(w.street_distance_m(a.location) > p.street_clearance_m);
        }
    }

    #[test]
    fn onsets_fall_between_campaigns() {
        let p = WorldParams {
            palm_count: Some(150),
            infested_fraction: 0.5,
            ..WorldParams::default()
        };
        let w = generate_world(4, &p).unwrap();
        let infested: Vec<YearMonth> = w.palms.iter().filter_map(|x| x.onset).collect();
        assert!(!infested.is_empty());
        for o in infested {
            assert!(o > p.capture_dates[0] && o <= *p.capture_dates.last().unwrap());
        }
    }

    #[test]
    fn panoramas_cover_every_campaign() {
        let w = generate_world(2, &WorldParams::default()).unwrap();
        let sites = w.current.len();
        assert_eq!(w.panoramas.len(), sites * w.params.capture_dates.len());
        assert!(w.panoramas.windows(2).all(|p| p[0].pano_id < p[1].pano_id));
        let latest = *w.params.capture_dates.last().unwrap();
        assert!(w
            .current_panoramas()
            .iter()
            .all(|p| p.capture_date == latest));
    }

    #[test]
    fn degenerate_params_rejected() {
        let bad = WorldParams {
            width_m: 0.0,
            ..WorldParams::default()
        };
        assert!(generate_world(1, &bad).is_err());
        let crowded = WorldParams {
            palm_count: Some(100_000),
            ..WorldParams::default()
        };
        assert!(generate_world(1, &crowded).is_err());
    }

    #[test]
    fn world_json_roundtrip() {
        let w = generate_world(
            9,
            &WorldParams {
                palm_count: Some(20),
                ..WorldParams::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.json");
        w.save(&path).unwrap();
        assert_eq!(SyntheticWorld::load(&path).unwrap(), w);
    }
}
