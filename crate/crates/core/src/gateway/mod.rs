//! Detection backends and the conversion of aerial detections into
//! deduplicated, georeferenced tree candidates.

pub mod backend;
pub mod protocol;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{box_center_geo, haversine_m, pixel_to_geo, GeoPoint, PixelBox, TileId};
use crate::linker::StreetImageRequest;
use crate::registry::{TreeRecord, TreeSource};
use crate::timeline::ClassProbs;

pub use backend::{
    Backend, BackendFactory, Exchange, InProcessBackend, ManifestExchange, SubprocessBackend,
    SubprocessFactory, WorkerPool,
};
pub use protocol::{RawDetection, Reply, Request, Responder, Response, Task};

pub const AERIAL_TILE_PX: u32 = 256;
pub const STREET_IMAGE_PX: u32 = 640;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageKind {
    AerialTile,
    StreetView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRequest {
    pub image_ref: String,
    pub kind: ImageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile: Option<TileId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub street: Option<StreetImageRequest>,
}

impl DetectionRequest {
    pub fn aerial(image_ref: impl Into<String>, tile: TileId) -> Self {
        DetectionRequest {
            image_ref: image_ref.into(),
            kind: ImageKind::AerialTile,
            tile: Some(tile),
            street: None,
        }
    }

    pub fn street(image_ref: impl Into<String>, request: StreetImageRequest) -> Self {
        DetectionRequest {
            image_ref: image_ref.into(),
            kind: ImageKind::StreetView,
            tile: None,
            street: Some(request),
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            ImageKind::AerialTile if self.tile.is_none() => Err(Error::domain(format!(
                "aerial request {} lacks a tile",
                self.image_ref
            ))),
            ImageKind::StreetView if self.street.is_none() => Err(Error::domain(format!(
                "street request {} lacks view metadata",
                self.image_ref
            ))),
            _ => Ok(()),
        }
    }

    /// Width and height of the source image in pixels.
    pub fn image_size(&self) -> (u32, u32) {
        match (&self.kind, &self.street) {
            (ImageKind::StreetView, Some(s)) => (s.width, s.height),
            (ImageKind::StreetView, None) => (STREET_IMAGE_PX, STREET_IMAGE_PX),
            (ImageKind::AerialTile, _) => (AERIAL_TILE_PX, AERIAL_TILE_PX),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub score: f64,
    pub label: String,
    pub request: DetectionRequest,
}

/// A request the backend could not answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestFailure {
    pub image_ref: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionBatch {
    pub detections: Vec<Detection>,
    pub failures: Vec<RequestFailure>,
}

fn lexicographic(a: &[f64; 4], b: &[f64; 4]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::domain(format!(
            "score threshold {threshold} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Runs detection over every request and keeps results scoring at least
/// `score_threshold`, ordered by request, then descending score, then box.
///
/// Backend crashes, timeouts, error replies and out-of-range boxes or scores
/// fail only the affected request.
pub fn run_detection_batch(
    requests: &[DetectionRequest],
    backend: &dyn Exchange,
    score_threshold: f64,
) -> Result<DetectionBatch> {
    check_threshold(score_threshold)?;
    for r in requests {
        r.validate()?;
    }
    let images: Vec<String> = requests.iter().map(|r| r.image_ref.clone()).collect();
    let replies = backend.exchange(Task::Detect, &images)?;
    let mut batch = DetectionBatch::default();
    for (request, reply) in requests.iter().zip(replies) {
        let raw = match reply {
            Reply::Detections(d) => d,
            Reply::Failed(message) => {
                batch.failures.push(RequestFailure {
                    image_ref: request.image_ref.clone(),
                    message,
                });
                continue;
            }
            Reply::Probs(_) => unreachable!("detect replies never carry probs"),
        };
        let (w, h) = request.image_size();
        if let Some(bad) = raw.iter().find(|d| {
            !d.bbox.fits_within(f64::from(w), f64::from(h)) || !(0.0..=1.0).contains(&d.score)
        }) {
            batch.failures.push(RequestFailure {
                image_ref: request.image_ref.clone(),
                message: format!(
                    "detection box {:?} score {} outside a {w}x{h} image or [0, 1]",
                    bad.bbox.as_array(),
                    bad.score
                ),
            });
            continue;
        }
        let mut kept: Vec<Detection> = raw
            .into_iter()
            .filter(|d| d.score >= score_threshold)
            .map(|d| Detection {
                bbox: d.bbox,
                score: d.score,
                label: d.label,
                request: request.clone(),
            })
            .collect();
        kept.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| lexicographic(&a.bbox.as_array(), &b.bbox.as_array()))
        });
        batch.detections.extend(kept);
    }
    Ok(batch)
}

/// Classifies each image; failures come back as `Err(message)` in place.
pub fn run_classification_batch(
    images: &[String],
    backend: &dyn Exchange,
) -> Result<Vec<std::result::Result<ClassProbs, String>>> {
    let replies = backend.exchange(Task::Classify, images)?;
    Ok(replies
        .into_iter()
        .map(|r| match r {
            Reply::Probs(p) => p.validate().map(|_| p).map_err(|e| e.to_string()),
            Reply::Failed(m) => Err(m),
            Reply::Detections(_) => unreachable!("classify replies never carry detections"),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoCandidate {
    pub location: GeoPoint,
    pub score: f64,
    pub source_tile: TileId,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

/// Turns aerial detections into located candidates at their box centers.
pub fn georeference(detections: &[Detection]) -> Result<Vec<GeoCandidate>> {
    detections
        .iter()
        .map(|d| {
            let tile = match (d.request.kind, d.request.tile) {
                (ImageKind::AerialTile, Some(t)) => t,
                _ => {
                    return Err(Error::domain(format!(
                        "cannot georeference street-view detection from {}",
                        d.request.image_ref
                    )))
                }
            };
            Ok(GeoCandidate {
                location: box_center_geo(tile, &d.bbox, AERIAL_TILE_PX)?,
                score: d.score,
                source_tile: tile,
                bbox: d.bbox,
            })
        })
        .collect()
}

/// Result of greedy clustering: `members[i]` lists indices into the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub seed: usize,
    pub members: Vec<usize>,
}

fn candidate_order(a: &GeoCandidate, b: &GeoCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.location.lat.total_cmp(&b.location.lat))
        .then_with(|| a.location.lon.total_cmp(&b.location.lon))
}

/// Greedy clustering: by descending score (ties by location), each
/// candidate joins the first cluster whose seed is within `radius_m`,
/// otherwise it seeds a new cluster.
pub fn cluster_candidates(cands: &[GeoCandidate], radius_m: f64) -> Result<Vec<Cluster>> {
    if !(radius_m > 0.0) {
        return Err(Error::domain(format!(
            "merge radius must be positive, got {radius_m}"
        )));
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| candidate_order(&cands[i], &cands[j]));
    let mut clusters: Vec<Cluster> = Vec::new();
    for i in order {
        let home = clusters
            .iter_mut()
            .find(|c| haversine_m(cands[c.seed].location, cands[i].location) <= radius_m);
        match home {
            Some(c) => c.members.push(i),
            None => clusters.push(Cluster {
                seed: i,
                members: vec![i],
            }),
        }
    }
    Ok(clusters)
}

/// Longer side, in meters, of the union of the members' boxes. Pieces of a
/// crown cut by tile edges add up; a crown cut along one axis keeps its true
/// extent along the other.
fn crown_diameter_m(cands: &[GeoCandidate], members: &[usize]) -> Result<f64> {
    let (mut s, mut w, mut n, mut e) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &i in members {
        let c = &cands[i];
        let nw = pixel_to_geo(c.source_tile, (c.bbox.x_min, c.bbox.y_min), AERIAL_TILE_PX)?;
        let se = pixel_to_geo(c.source_tile, (c.bbox.x_max, c.bbox.y_max), AERIAL_TILE_PX)?;
        s = s.min(se.lat);
        n = n.max(nw.lat);
        w = w.min(nw.lon);
        e = e.max(se.lon);
    }
    let mid = (s + n) / 2.0;
    let width = haversine_m(GeoPoint::new(mid, w)?, GeoPoint::new(mid, e)?);
    let height = haversine_m(GeoPoint::new(s, w)?, GeoPoint::new(n, w)?);
    Ok(width.max(height))
}

/// One tree per cluster, located at its seed, ordered by tree id.
pub fn merge_candidates(cands: &[GeoCandidate], radius_m: f64) -> Result<Vec<TreeRecord>> {
    let mut trees = Vec::new();
    for c in cluster_candidates(cands, radius_m)? {
        let seed = &cands[c.seed];
        let mut t = TreeRecord::new(seed.location, TreeSource::Aerial);
        t.detection_score = Some(seed.score);
        t.crown_diameter_m = Some(crown_diameter_m(cands, &c.members)?);
        trees.push(t);
    }
    trees.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(trees)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{destination, tile_bounds};
    use std::collections::HashMap;
    use std::sync::Arc;

    struct Replay {
        boxes: HashMap<String, Vec<RawDetection>>,
    }

    impl Responder for Replay {
        fn labels(&self, _task: Task) -> Vec<String> {
            vec!["palm".into()]
        }

        fn respond(&self, request: &Request) -> Response {
            match request {
                Request::Detect { id, image } => match self.boxes.get(image) {
                    Some(d) => Response::detections(*id, d.clone()),
                    None => Response::Error {
                        id: *id,
                        message: format!("unknown image {image}"),
                    },
                },
                other => Response::Error {
                    id: other.id().unwrap_or(0),
                    message: "unsupported".into(),
                },
            }
        }
    }

    fn raw(b: [f64; 4], score: f64) -> RawDetection {
        RawDetection {
            bbox: PixelBox::try_from(b).unwrap(),
            score,
            label: "palm".into(),
        }
    }

    fn tile() -> TileId {
        TileId::new(20, 183_100, 418_000).unwrap()
    }

    fn pool(boxes: HashMap<String, Vec<RawDetection>>, workers: usize) -> WorkerPool<Arc<Replay>> {
        WorkerPool::new(Arc::new(Replay { boxes }), workers)
    }

    #[test]
    fn empty_batch() {
        let out = run_detection_batch(&[], &pool(HashMap::new(), 2), 0.5).unwrap();
        assert!(out.detections.is_empty() && out.failures.is_empty());
    }

    #[test]
    fn replay_identity_and_threshold() {
        let boxes = vec![
            raw([0.0, 0.0, 10.0, 10.0], 0.2),
            raw([20.0, 20.0, 40.0, 40.0], 0.5),
            raw([50.0, 5.0, 60.0, 15.0], 0.9),
        ];
        let p = pool(HashMap::from([("t.png".to_string(), boxes.clone())]), 1);
        let reqs = [DetectionRequest::aerial("t.png", tile())];
        let all = run_detection_batch(&reqs, &p, 0.0).unwrap();
        assert_eq!(all.detections.len(), 3);
        let scores: Vec<f64> = all.detections.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.5, 0.2]);
        let kept = run_detection_batch(&reqs, &p, 0.5).unwrap();
        assert_eq!(kept.detections.len(), 2);
        assert!(run_detection_batch(&reqs, &p, 1.5).is_err());
    }

    #[test]
    fn failures_are_per_request_and_order_is_canonical() {
        let boxes = boxes_again();
        let mut reqs: Vec<DetectionRequest> = (0..30)
            .map(|i| DetectionRequest::aerial(format!("t{i}.png"), tile()))
            .collect();
        reqs.insert(10, DetectionRequest::aerial("missing.png", tile()));
        reqs.insert(20, DetectionRequest::aerial("bad.png", tile()));
        let one = run_detection_batch(&reqs, &pool(boxes.clone(), 1), 0.5).unwrap();
        let many = run_detection_batch(&reqs, &pool(boxes, 7), 0.5).unwrap();
        assert_eq!(one, many);
        assert_eq!(one.detections.len(), 60);
        assert_eq!(one.failures.len(), 2);
        assert_eq!(one.failures[0].image_ref, "missing.png");
        // equal scores fall back to box order
        assert_eq!(one.detections[0].bbox.as_array(), [0.0, 0.0, 5.0, 5.0]);
        // replay backends are idempotent down to the bytes
        let again = run_detection_batch(&reqs, &pool(boxes_again(), 3), 0.5).unwrap();
        assert_eq!(
            serde_json::to_vec(&one).unwrap(),
            serde_json::to_vec(&again).unwrap()
        );
    }

    fn boxes_again() -> HashMap<String, Vec<RawDetection>> {
        let mut boxes = HashMap::new();
        for i in 0..30 {
            boxes.insert(
                format!("t{i}.png"),
                vec![
                    raw([1.0, 1.0, 5.0, 5.0], 0.7),
                    raw([0.0, 0.0, 5.0, 5.0], 0.7),
                ],
            );
        }
        boxes.insert("bad.png".into(), vec![raw([0.0, 0.0, 300.0, 5.0], 0.7)]);
        boxes
    }

    #[test]
    fn aerial_request_needs_tile() {
        let mut r = DetectionRequest::aerial("x", tile());
        r.tile = None;
        assert!(run_detection_batch(&[r], &pool(HashMap::new(), 1), 0.5).is_err());
    }

    #[test]
    fn georeference_full_tile_and_corner() {
        let t = tile();
        let full = Detection {
            bbox: PixelBox::new(0.0, 0.0, 256.0, 256.0).unwrap(),
            score: 0.9,
            label: "palm".into(),
            request: DetectionRequest::aerial("t", t),
        };
        let corner = Detection {
            bbox: PixelBox::new(0.0, 0.0, 1e-9, 1e-9).unwrap(),
            ..full.clone()
        };
        let c = georeference(&[full, corner]).unwrap();
        let center = pixel_to_geo(t, (128.0, 128.0), 256).unwrap();
        assert_eq!(c[0].location, center);
        let b = tile_bounds(t);
        assert!(
            (c[1].location.lat - b.north).abs() < 1e-9 && (c[1].location.lon - b.west).abs() < 1e-9
        );
    }

    #[test]
    fn georeference_rejects_street_detections() {
        let req = DetectionRequest::street(
            "s.jpg",
            StreetImageRequest::at_location(GeoPoint::new(1.0, 1.0).unwrap(), 0.0).unwrap(),
        );
        let d = Detection {
            bbox: PixelBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
            score: 0.9,
            label: "palm".into(),
            request: req,
        };
        assert!(georeference(&[d]).is_err());
    }

    fn cand(p: GeoPoint, score: f64) -> GeoCandidate {
        GeoCandidate {
            location: p,
            score,
            source_tile: tile(),
            bbox: PixelBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
        }
    }

    #[test]
    fn merge_by_radius() {
        let p = GeoPoint::new(32.75, -117.13).unwrap();
        let near = [cand(p, 0.8), cand(destination(p, 90.0, 1.0), 0.9)];
        let trees = merge_candidates(&near, 3.0).unwrap();
        assert_eq!(trees.len(), 1);
        // the higher score seeds the cluster
        assert_eq!(trees[0].location, near[1].location);
        let far = [cand(p, 0.8), cand(destination(p, 90.0, 10.0), 0.9)];
        assert_eq!(merge_candidates(&far, 3.0).unwrap().len(), 2);
        assert!(merge_candidates(&far, 0.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn merge_is_order_free_and_partitions(
            pts in proptest::collection::vec((0.0f64..60.0, 0.0f64..60.0, 0.0f64..1.0), 1..40),
            rot in 0usize..40,
        ) {
            let origin = GeoPoint::new(32.75, -117.13).unwrap();
            let cands: Vec<GeoCandidate> = pts
                .iter()
                .map(|(e, n, s)| cand(destination(destination(origin, 90.0, *e), 0.0, *n), (s * 20.0).round() / 20.0))
                .collect();
            let mut permuted = cands.clone();
            let k = rot % permuted.len();
            permuted.rotate_left(k);
            permuted.reverse();
            proptest::prop_assert_eq!(merge_candidates(&cands, 3.0).unwrap(), merge_candidates(&permuted, 3.0).unwrap());

            let clusters = cluster_candidates(&cands, 3.0).unwrap();
            let mut seen = vec![0; cands.len()];
            for c in &clusters {
                for &m in &c.members {
                    seen[m] += 1;
                }
            }
            proptest::prop_assert!(seen.iter().all(|&n| n == 1));
            for (i, a) in clusters.iter().enumerate() {
                for b in &clusters[i + 1..] {
                    proptest::prop_assert!(haversine_m(cands[a.seed].location, cands[b.seed].location) > 3.0);
                }
            }
        }
    }
}
