use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::world::SyntheticWorld;
use crate::cache::{parse_image_ref, ImageRef};
use crate::error::{Error, Result};
use crate::gateway::{
    RawDetection, Request, Responder, Response, Task, AERIAL_TILE_PX, STREET_IMAGE_PX,
};
use crate::geo::{
    bearing_deg, geo_to_mercator, haversine_m, tile_mercator_corners, PixelBox, TileId,
};
use crate::linker::{PanoramaRecord, STREET_FOV_DEG};
use crate::metrics::iou;
use crate::timeline::{ClassProbs, CrownLabel};

pub const PALM_LABEL: &str = "palm";
pub const CROWN_LABEL: &str = "crown";
/// Share of a crown that must fall inside an image for it to be detected.
pub const MIN_VISIBLE_FRACTION: f64 = 0.15;

/// Row-stochastic confusion matrix indexed `[true][reported]` in the order
/// healthy, infested, unknown.
pub type Confusion = [[f64; 3]; 3];

pub const IDENTITY_CONFUSION: Confusion = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

const LABELS: [CrownLabel; 3] = [
    CrownLabel::Healthy,
    CrownLabel::Infested,
    CrownLabel::Unknown,
];

fn label_index(l: CrownLabel) -> usize {
    LABELS.iter().position(|&x| x == l).expect("label listed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    /// Chance that a palm is never seen from the air.
    pub miss_rate: f64,
    /// Mean number of spurious aerial detections per tile.
    pub false_positive_rate: f64,
    /// Standard deviation of each box coordinate, in pixels.
    pub bbox_jitter_sigma: f64,
    pub confusion: Confusion,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::zero()
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        NoiseModel {
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            bbox_jitter_sigma: 0.0,
            confusion: IDENTITY_CONFUSION,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::domain(format!(
                "miss rate {} outside [0, 1]",
                self.miss_rate
            )));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(Error::domain("false positive rate must be non-negative"));
        }
        if !(self.bbox_jitter_sigma >= 0.0 && self.bbox_jitter_sigma.is_finite()) {
            return Err(Error::domain("box jitter must be non-negative"));
        }
        for row in &self.confusion {
            if row.iter().any(|p| !(0.0..=1.0).contains(p))
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::domain(format!(
                    "confusion row {row:?} is not a distribution"
                )));
            }
        }
        Ok(())
    }

    /// Draws the reported label for a crown whose true state is `truth`.
    pub fn sample_label(&self, truth: CrownLabel, rng: &mut impl Rng) -> CrownLabel {
        let row = &self.confusion[label_index(truth)];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return LABELS[k];
            }
        }
        // rounding left u above the cumulative sum: take the last non-zero entry
        LABELS[row.iter().rposition(|&p| p > 0.0).unwrap_or(0)]
    }
}

/// Deterministic generator for one (seed, key...) combination.
pub fn keyed_rng(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Signed angle from `heading` to `bearing`, in (-180, 180].
fn offset_deg(bearing: f64, heading: f64) -> f64 {
    let d = (bearing - heading).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Answers detection and classification requests straight from the world's
/// geometry. Noise is keyed by (seed, image reference), so a reply never
/// depends on scheduling or batch composition.
pub struct MockBackend {
    world: Arc<SyntheticWorld>,
    noise: NoiseModel,
    seed: u64,
}

impl MockBackend {
    pub fn new(world: Arc<SyntheticWorld>, noise: NoiseModel) -> Result<Self> {
        noise.validate()?;
        let seed = world.seed;
        Ok(MockBackend { world, noise, seed })
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn jitter(&self, b: [f64; 4], rng: &mut ChaCha8Rng) -> [f64; 4] {
        if self.noise.bbox_jitter_sigma == 0.0 {
            return b;
        }
        let n = Normal::new(0.0, self.noise.bbox_jitter_sigma).expect("validated sigma");
        [
            b[0] + n.sample(rng),
            b[1] + n.sample(rng),
            b[2] + n.sample(rng),
            b[3] + n.sample(rng),
        ]
    }

    fn missed(&self, palm: usize) -> bool {
        if self.noise.miss_rate == 0.0 {
            return false;
        }
        keyed_rng(self.seed, &["miss", &palm.to_string()]).random::<f64>() < self.noise.miss_rate
    }

    /// Clips a box to a square image. Slivers under [`MIN_VISIBLE_FRACTION`]
    /// go unseen; other boxes score `0.5 + 0.5 * visible fraction`, so every
    /// seen crown passes the default threshold and whole crowns outrank
    /// pieces.
    fn clipped(raw: [f64; 4], size: f64, label: &str) -> Option<RawDetection> {
        let full = (raw[2] - raw[0]) * (raw[3] - raw[1]);
        let b = [
            raw[0].max(0.0),
            raw[1].max(0.0),
            raw[2].min(size),
            raw[3].min(size),
        ];
        if !(b[2] > b[0] && b[3] > b[1]) || !(full > 0.0) {
            return None;
        }
        let visible = ((b[2] - b[0]) * (b[3] - b[1]) / full).clamp(0.0, 1.0);
        if visible < MIN_VISIBLE_FRACTION {
            return None;
        }
        let score = 0.5 + 0.5 * visible;
        Some(RawDetection {
            bbox: PixelBox::new(b[0], b[1], b[2], b[3]).ok()?,
            score,
            label: label.to_string(),
        })
    }

    pub fn aerial_detections(&self, tile: TileId, image: &str) -> Vec<RawDetection> {
        let size = f64::from(AERIAL_TILE_PX);
        let (nw, se) = tile_mercator_corners(tile);
        let k = size / (se.x - nw.x);
        let mut out = Vec::new();
        for (i, palm) in self.world.palms.iter().enumerate() {
            let Ok(m) = geo_to_mercator(palm.location) else {
                continue;
            };
            let r = self.world.params.crown_radius_m / palm.location.lat.to_radians().cos();
            let raw = [
                (m.x - r - nw.x) * k,
                (nw.y - m.y - r) * k,
                (m.x + r - nw.x) * k,
                (nw.y - m.y + r) * k,
            ];
            if raw[2] <= 0.0 || raw[0] >= size || raw[3] <= 0.0 || raw[1] >= size || self.missed(i)
            {
                continue;
            }
            let mut rng = keyed_rng(self.seed, &["aerial", image, &i.to_string()]);
            if let Some(d) = Self::clipped(self.jitter(raw, &mut rng), size, PALM_LABEL) {
                out.push(d);
            }
        }
        if self.noise.false_positive_rate > 0.0 {
            let mut rng = keyed_rng(self.seed, &["false-positive", image]);
            let count = Poisson::new(self.noise.false_positive_rate)
                .map(|p| p.sample(&mut rng) as u64)
                .unwrap_or(0);
            let side = 2.0 * self.world.params.crown_radius_m
                / crate::geo::ground_resolution_m(
                    crate::geo::tile_bounds(tile).north,
                    tile.zoom,
                    AERIAL_TILE_PX,
                );
            for _ in 0..count {
                let x = rng.random_range(0.0..size);
                let y = rng.random_range(0.0..size);
                let score = rng.random_range(0.5..=1.0);
                let raw = [
                    x - side / 2.0,
                    y - side / 2.0,
                    x + side / 2.0,
                    y + side / 2.0,
                ];
                if let Some(mut d) = Self::clipped(raw, size, PALM_LABEL) {
                    d.score = score;
                    out.push(d);
                }
            }
        }
        out
    }

    /// Predicted crown box of palm `i` in a street view, before noise.
    fn crown_box(&self, pano: &PanoramaRecord, heading: f64, i: usize) -> Option<[f64; 4]> {
        let palm = &self.world.palms[i];
        let d = haversine_m(pano.location, palm.location);
        if d == 0.0 || d > self.world.params.visibility_radius_m {
            return None;
        }
        let offset = offset_deg(bearing_deg(pano.location, palm.location).ok()?, heading);
        let half_fov = STREET_FOV_DEG / 2.0;
        if offset.abs() >= half_fov {
            return None;
        }
        let px_per_deg = f64::from(STREET_IMAGE_PX) / STREET_FOV_DEG;
        let cx = (offset + half_fov) * px_per_deg;
        let half = (self.world.params.crown_radius_m / d).atan().to_degrees() * px_per_deg;
        let cy = 0.3 * f64::from(STREET_IMAGE_PX);
        Some([cx - half, cy - half, cx + half, cy + half])
    }

    pub fn crown_detections(
        &self,
        pano_id: &str,
        heading: f64,
        image: &str,
    ) -> Result<Vec<RawDetection>> {
        let pano = self
            .world
            .panorama(pano_id)
            .ok_or_else(|| Error::domain(format!("unknown panorama {pano_id}")))?;
        let size = f64::from(STREET_IMAGE_PX);
        let mut out = Vec::new();
        for i in 0..self.world.palms.len() {
            let Some(raw) = self.crown_box(pano, heading, i) else {
                continue;
            };
            let mut rng = keyed_rng(self.seed, &["crown", image, &i.to_string()]);
            if let Some(d) = Self::clipped(self.jitter(raw, &mut rng), size, CROWN_LABEL) {
                out.push(d);
            }
        }
        Ok(out)
    }

    /// True state of the crown inside `bbox`: the palm whose predicted crown
    /// box overlaps it most.
    pub fn crown_truth(&self, pano_id: &str, heading: f64, bbox: &PixelBox) -> Result<CrownLabel> {
        let pano = self
            .world
            .panorama(pano_id)
            .ok_or_else(|| Error::domain(format!("unknown panorama {pano_id}")))?;
        let best = (0..self.world.palms.len())
            .filter_map(|i| {
                let b = self.crown_box(pano, heading, i)?;
                let overlap = iou(&PixelBox::new(b[0], b[1], b[2], b[3]).ok()?, bbox);
                (overlap > 0.0).then_some((overlap, i))
            })
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        Ok(match best {
            Some((_, i)) if self.world.palms[i].infested_at(pano.capture_date) => {
                CrownLabel::Infested
            }
            Some(_) => CrownLabel::Healthy,
            None => CrownLabel::Unknown,
        })
    }

    pub fn classify(
        &self,
        pano_id: &str,
        heading: f64,
        bbox: &PixelBox,
        image: &str,
    ) -> Result<ClassProbs> {
        let truth = self.crown_truth(pano_id, heading, bbox)?;
        let mut rng = keyed_rng(self.seed, &["classify", image]);
        let label = self.noise.sample_label(truth, &mut rng);
        let top = 0.6 + 0.4 * rng.random::<f64>();
        let a = (1.0 - top) / 2.0;
        let b = 1.0 - top - a;
        let (h, inf, unk) = match label {
            CrownLabel::Healthy => (top, a, b),
            CrownLabel::Infested => (a, top, b),
            CrownLabel::Unknown => (a, b, top),
        };
        ClassProbs::new(h, inf, unk)
    }
}

impl Responder for MockBackend {
    fn labels(&self, task: Task) -> Vec<String> {
        match task {
            Task::Detect => vec![PALM_LABEL.into(), CROWN_LABEL.into()],
            Task::Classify => LABELS.iter().map(|l| l.as_str().to_string()).collect(),
        }
    }

    fn respond(&self, request: &Request) -> Response {
        let fail = |id: u64, message: String| Response::Error { id, message };
        match request {
            Request::Hello { .. } => Response::Hello {
                version: crate::gateway::protocol::PROTOCOL_VERSION,
                labels: Vec::new(),
            },
            Request::Detect { id, image } => {
                let Some(r) = parse_image_ref(image) else {
                    return fail(*id, format!("no detector for image {image}"));
                };
                let key = r.key();
                match r {
                    ImageRef::Tile(t) => Response::detections(*id, self.aerial_detections(t, &key)),
                    ImageRef::Street { pano_id, heading } => {
                        match self.crown_detections(&pano_id, heading, &key) {
                            Ok(d) => Response::detections(*id, d),
                            Err(e) => fail(*id, e.to_string()),
                        }
                    }
                    ImageRef::Crop { .. } => fail(*id, format!("no detector for image {image}")),
                }
            }
            Request::Classify { id, image } => {
                let Some(r) = parse_image_ref(image) else {
                    return fail(*id, format!("no crown crop at {image}"));
                };
                let key = r.key();
                match r {
                    ImageRef::Crop {
                        pano_id,
                        heading,
                        bbox,
                    } => match self.classify(&pano_id, heading, &bbox, &key) {
                        Ok(p) => Response::probs(*id, p),
                        Err(e) => fail(*id, e.to_string()),
                    },
                    _ => fail(*id, format!("no crown crop at {image}")),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheLayout;
    use crate::geo::{box_center_geo, tile_for_point};
    use crate::sim::world::{generate_world, WorldParams};

    fn world() -> Arc<SyntheticWorld> {
        Arc::new(
            generate_world(
                5,
                &WorldParams {
                    palm_count: Some(40),
                    ..WorldParams::default()
                },
            )
            .unwrap(),
        )
    }

    #[test]
    fn zero_noise_boxes_center_on_palms() {
        let w = world();
        let m = MockBackend::new(Arc::clone(&w), NoiseModel::zero()).unwrap();
        let cache = CacheLayout::new("c");
        for palm in &w.palms {
            let t = tile_for_point(palm.location, 20).unwrap();
            let image = cache.tile(t).display().to_string();
            let dets = m.aerial_detections(t, &image);
            // the home tile always shows the palm; unclipped boxes center on it exactly
            let own: Vec<&RawDetection> = dets
                .iter()
                .filter(|d| {
                    let c = box_center_geo(t, &d.bbox, AERIAL_TILE_PX).unwrap();
                    haversine_m(c, palm.location) < 2.0 * w.params.crown_radius_m
                })
                .collect();
            assert!(!own.is_empty());
            for d in own {
                let c = box_center_geo(t, &d.bbox, AERIAL_TILE_PX).unwrap();
                if d.score == 1.0 {
                    assert!(haversine_m(c, palm.location) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn full_miss_rate_sees_nothing() {
        let w = world();
        let noise = NoiseModel {
            miss_rate: 1.0,
            ..NoiseModel::zero()
        };
        let m = MockBackend::new(Arc::clone(&w), noise).unwrap();
        for palm in &w.palms {
            let t = tile_for_point(palm.location, 20).unwrap();
            assert!(m.aerial_detections(t, "x").is_empty());
        }
    }

    #[test]
    fn confusion_sampling_matches_matrix() {
        let noise = NoiseModel {
            confusion: [[0.8, 0.15, 0.05], [0.1, 0.85, 0.05], [0.3, 0.3, 0.4]],
            ..NoiseModel::zero()
        };
        noise.validate().unwrap();
        let mut rng = keyed_rng(1, &["confusion-test"]);
        for (t, truth) in LABELS.iter().enumerate() {
            let mut counts = [0usize; 3];
            let n = 10_000;
            for _ in 0..n {
                counts[label_index(noise.sample_label(*truth, &mut rng))] += 1;
            }
            for (k, &count) in counts.iter().enumerate() {
                let freq = count as f64 / n as f64;
                assert!(
                    (freq - noise.confusion[t][k]).abs() < 0.02,
                    "{t} {k} {freq}"
                );
            }
        }
    }

    #[test]
    fn invalid_noise_rejected() {
        let bad = NoiseModel {
            confusion: [[0.5, 0.4, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            ..NoiseModel::zero()
        };
        assert!(bad.validate().is_err());
        assert!(NoiseModel {
            miss_rate: 1.5,
            ..NoiseModel::zero()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn street_view_centers_the_target_crown() {
        let w = world();
        let m = MockBackend::new(Arc::clone(&w), NoiseModel::zero()).unwrap();
        let palm = &w.palms[0];
        let pano = w
            .current_panoramas()
            .into_iter()
            .min_by(|a, b| {
                haversine_m(a.location, palm.location)
                    .total_cmp(&haversine_m(b.location, palm.location))
            })
            .unwrap()
            .clone();
        let heading = bearing_deg(pano.location, palm.location).unwrap();
        let dets = m.crown_detections(&pano.pano_id, heading, "img").unwrap();
        let best = dets
            .iter()
            .min_by(|a, b| {
                (a.bbox.center().0 - 320.0)
                    .abs()
                    .total_cmp(&(b.bbox.center().0 - 320.0).abs())
            })
            .unwrap();
        assert!((best.bbox.center().0 - 320.0).abs() < 1e-9);
        let truth = m.crown_truth(&pano.pano_id, heading, &best.bbox).unwrap();
        let expected = if palm.infested_at(pano.capture_date) {
            CrownLabel::Infested
        } else {
            CrownLabel::Healthy
        };
        assert_eq!(truth, expected);
    }

    #[test]
    fn replies_are_keyed_by_image_not_request_id() {
        let w = world();
        let noise = NoiseModel {
            bbox_jitter_sigma: 2.0,
            false_positive_rate: 1.0,
            ..NoiseModel::zero()
        };
        let m = MockBackend::new(Arc::clone(&w), noise).unwrap();
        let t = tile_for_point(w.palms[0].location, 20).unwrap();
        let image = CacheLayout::new("c").tile(t).display().to_string();
        let a = m.respond(&Request::Detect {
            id: 1,
            image: image.clone(),
        });
        let b = m.respond(&Request::Detect { id: 9, image });
        match (a, b) {
            (
                Response::Result {
                    detections: Some(x),
                    ..
                },
                Response::Result {
                    detections: Some(y),
                    ..
                },
            ) => {
                assert_eq!(x, y)
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            m.respond(&Request::Detect {
                id: 2,
                image: "nope.png".into()
            }),
            Response::Error { id: 2, .. }
        ));
    }
}
