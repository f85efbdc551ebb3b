//! Survey outputs: tree density heatmaps, hotspot lists, GeoJSON export and
//! the aerial-assisted versus street-only acquisition cost comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geo::{geo_to_mercator, mercator_to_geo, GeoPoint, MercatorPoint};
use crate::planner::AreaOfInterest;
use crate::registry::{TreeRecord, TreeSource};
use crate::timeline::TimelineStatus;

pub const DEFAULT_CELL_SIZE_M: f64 = 100.0;
pub const STREET_IMAGE_UNIT_COST_USD: f64 = 0.007;
pub const VIEWS_PER_PANORAMA: u64 = 4;

/// Tree counts over a regular grid laid on the AOI's bounding box.
///
/// Cells are square in Mercator space, half-open `[west, east) x (south, north]`,
/// numbered from the north-west corner. `cell_size_m` is the ground edge
/// length at the AOI's center latitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    /// North-west corner of cell (0, 0).
    pub origin: GeoPoint,
    pub cell_size_m: f64,
    /// Cell edge in Mercator meters.
    pub cell_size_mercator: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `counts[row][col]`.
    pub counts: Vec<Vec<u64>>,
    /// Trees outside the AOI.
    pub remainder: u64,
}

impl HeatmapGrid {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Center of a cell in WGS84.
    pub fn cell_center(&self, row: usize, col: usize) -> Result<GeoPoint> {
        let o = geo_to_mercator(self.origin)?;
        mercator_to_geo(MercatorPoint {
            x: o.x + (col as f64 + 0.5) * self.cell_size_mercator,
            y: o.y - (row as f64 + 0.5) * self.cell_size_mercator,
        })
    }

    fn cell_of(&self, origin: MercatorPoint, m: MercatorPoint) -> Option<(usize, usize)> {
        let col = ((m.x - origin.x) / self.cell_size_mercator).floor();
        let row = ((origin.y - m.y) / self.cell_size_mercator).floor();
        if col < 0.0 || row < 0.0 {
            return None;
        }
        // the AOI's own east/south edge falls on the last cell
        let col = (col as usize).min(self.cols - 1);
        let row = (row as usize).min(self.rows - 1);
        Some((row, col))
    }
}

pub fn build_heatmap(
    trees: &[TreeRecord],
    aoi: &AreaOfInterest,
    cell_size_m: f64,
) -> Result<HeatmapGrid> {
    if !(cell_size_m > 0.0 && cell_size_m.is_finite()) {
        return Err(Error::domain(format!(
            "cell size must be positive, got {cell_size_m}"
        )));
    }
    let bbox = aoi.bbox();
    let nw = geo_to_mercator(bbox.northwest())?;
    let se = geo_to_mercator(bbox.southeast())?;
    let mid_lat = 0.5 * (bbox.south + bbox.north);
    let cell_merc = cell_size_m / mid_lat.to_radians().cos();
    let cols = (((se.x - nw.x) / cell_merc).ceil() as usize).max(1);
    let rows = (((nw.y - se.y) / cell_merc).ceil() as usize).max(1);
    let mut grid = HeatmapGrid {
        origin: bbox.northwest(),
        cell_size_m,
        cell_size_mercator: cell_merc,
        rows,
        cols,
        counts: vec![vec![0; cols]; rows],
        remainder: 0,
    };
    for t in trees {
        let cell = if aoi.contains(t.location) {
            grid.cell_of(nw, geo_to_mercator(t.location)?)
        } else {
            None
        };
        match cell {
            Some((r, c)) => grid.counts[r][c] += 1,
            None => grid.remainder += 1,
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub row: usize,
    pub col: usize,
    pub count: u64,
    pub center: GeoPoint,
}

/// Cells with at least `min_count` trees, densest first, ties by (row, col).
pub fn hotspots(grid: &HeatmapGrid, min_count: u64) -> Result<Vec<Hotspot>> {
    if min_count == 0 {
        return Err(Error::domain("hotspot minimum count must be at least 1"));
    }
    let mut out = Vec::new();
    for (row, line) in grid.counts.iter().enumerate() {
        for (col, &count) in line.iter().enumerate() {
            if count >= min_count {
                out.push(Hotspot {
                    row,
                    col,
                    count,
                    center: grid.cell_center(row, col)?,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then((a.row, a.col).cmp(&(b.row, b.col)))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub panoramas_needed: u64,
    #[serde(default = "default_views")]
    pub views_per_panorama: u64,
    pub aerial_tiles: u64,
    pub street_images_for_detected: u64,
    #[serde(default = "default_street_cost")]
    pub street_image_unit_cost: f64,
    #[serde(default)]
    pub aerial_tile_unit_cost: f64,
}

fn default_views() -> u64 {
    VIEWS_PER_PANORAMA
}

fn default_street_cost() -> f64 {
    STREET_IMAGE_UNIT_COST_USD
}

impl CostInputs {
    pub fn new(panoramas_needed: u64, aerial_tiles: u64, street_images_for_detected: u64) -> Self {
        CostInputs {
            panoramas_needed,
            views_per_panorama: VIEWS_PER_PANORAMA,
            aerial_tiles,
            street_images_for_detected,
            street_image_unit_cost: STREET_IMAGE_UNIT_COST_USD,
            aerial_tile_unit_cost: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub street_only_images: u64,
    pub combined_street_images: u64,
    pub combined_aerial_tiles: u64,
    pub street_image_unit_cost: f64,
    pub aerial_tile_unit_cost: f64,
    /// Costs are accumulated in integer micro-dollars.
    pub street_only_cost_micro_usd: u64,
    pub combined_cost_micro_usd: u64,
    pub street_only_cost_usd: f64,
    pub combined_cost_usd: f64,
    /// `None` when no street images are needed after aerial detection.
    pub reduction_factor: Option<f64>,
}

/// Converts a unit price to whole micro-dollars.
pub fn to_micro_usd(price: f64) -> Result<u64> {
    if !(price >= 0.0 && price.is_finite()) {
        return Err(Error::domain(format!(
            "unit cost must be non-negative, got {price}"
        )));
    }
    Ok((price * 1e6).round() as u64)
}

pub fn micro_to_usd(micro: u64) -> f64 {
    micro as f64 / 1e6
}

pub fn cost_comparison(inputs: &CostInputs) -> Result<CostReport> {
    let street_unit = to_micro_usd(inputs.street_image_unit_cost)?;
    let aerial_unit = to_micro_usd(inputs.aerial_tile_unit_cost)?;
    let street_only = inputs
        .panoramas_needed
        .checked_mul(inputs.views_per_panorama)
        .ok_or_else(|| Error::domain("street-only image count overflows"))?;
    let combined = inputs.street_images_for_detected;
    let street_only_cost = street_only * street_unit;
    let combined_cost = combined * street_unit + inputs.aerial_tiles * aerial_unit;
    Ok(CostReport {
        street_only_images: street_only,
        combined_street_images: combined,
        combined_aerial_tiles: inputs.aerial_tiles,
        street_image_unit_cost: inputs.street_image_unit_cost,
        aerial_tile_unit_cost: inputs.aerial_tile_unit_cost,
        street_only_cost_micro_usd: street_only_cost,
        combined_cost_micro_usd: combined_cost,
        street_only_cost_usd: micro_to_usd(street_only_cost),
        combined_cost_usd: micro_to_usd(combined_cost),
        reduction_factor: (combined > 0).then(|| street_only as f64 / combined as f64),
    })
}

fn status_of(t: &TreeRecord) -> Option<TimelineStatus> {
    t.timeline.as_ref().map(|tl| tl.status)
}

/// RFC 7946 FeatureCollection of tree points ordered by id.
pub fn export_geojson(trees: &[TreeRecord]) -> Value {
    let mut sorted: Vec<&TreeRecord> = trees.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let features: Vec<Value> = sorted
        .into_iter()
        .map(|t| {
            let transition = t
                .timeline
                .as_ref()
                .and_then(|tl| tl.transition)
                .map(|tr| json!({"last_healthy": tr.last_healthy, "first_infested": tr.first_infested}))
                .unwrap_or(Value::Null);
            json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [t.location.lon, t.location.lat]},
                "properties": {
                    "id": t.id,
                    "status": status_of(t).map(|s| s.as_str()).unwrap_or("unclassified"),
                    "transition": transition,
                    "source": match t.source {
                        TreeSource::Aerial => "aerial",
                        TreeSource::StreetOnly => "street-only",
                    },
                    "street_unreachable": t.street_unreachable,
                }
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSummary {
    pub id: String,
    pub status: String,
    pub points: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<(String, String)>,
}

pub fn timeline_summaries(trees: &[TreeRecord]) -> Vec<TimelineSummary> {
    let mut out: Vec<TimelineSummary> = trees
        .iter()
        .filter_map(|t| {
            let tl = t.timeline.as_ref()?;
            Some(TimelineSummary {
                id: t.id.clone(),
                status: tl.status.as_str().to_string(),
                points: tl
                    .points
                    .iter()
                    .map(|p| (p.date.to_string(), p.label.as_str().to_string()))
                    .collect(),
                transition: tl
                    .transition
                    .map(|tr| (tr.last_healthy.to_string(), tr.first_infested.to_string())),
            })
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// Headline counts for a registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveySummary {
    pub trees: u64,
    pub aerial_trees: u64,
    pub street_only_trees: u64,
    pub street_unreachable: u64,
    /// Aerial trees whose crown was found in a street view.
    pub confirmed_aerial: u64,
    /// `confirmed_aerial / aerial_trees`, `None` with no aerial trees.
    pub confirmable_ratio: Option<f64>,
    pub status_counts: BTreeMap<String, u64>,
}

pub fn summarize(trees: &[TreeRecord]) -> SurveySummary {
    let aerial = trees
        .iter()
        .filter(|t| t.source == TreeSource::Aerial)
        .count() as u64;
    let confirmed = trees
        .iter()
        .filter(|t| t.source == TreeSource::Aerial && t.current_observation().is_some())
        .count() as u64;
    let mut status_counts = BTreeMap::new();
    for t in trees {
        let key = status_of(t).map(|s| s.as_str()).unwrap_or("unclassified");
        *status_counts.entry(key.to_string()).or_insert(0) += 1;
    }
    SurveySummary {
        trees: trees.len() as u64,
        aerial_trees: aerial,
        street_only_trees: trees.len() as u64 - aerial,
        street_unreachable: trees.iter().filter(|t| t.street_unreachable).count() as u64,
        confirmed_aerial: confirmed,
        confirmable_ratio: (aerial > 0).then(|| confirmed as f64 / aerial as f64),
        status_counts,
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Static HTML page: summary, cost table, hotspot list and the heatmap as a table.
pub fn render_html(
    title: &str,
    summary: &SurveySummary,
    cost: Option<&CostReport>,
    grid: &HeatmapGrid,
    spots: &[Hotspot],
) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{0}</title>\n<style>td,th{{border:1px solid #999;padding:2px 6px}}table{{border-collapse:collapse}}</style></head><body>\n<h1>{0}</h1>\n",
        escape(title)
    );
    h.push_str("<h2>Summary</h2>\n<table>\n");
    let _ = writeln!(h, "<tr><th>trees</th><td>{}</td></tr>", summary.trees);
    let _ = writeln!(
        h,
        "<tr><th>aerial</th><td>{}</td></tr>",
        summary.aerial_trees
    );
    let _ = writeln!(
        h,
        "<tr><th>street-only</th><td>{}</td></tr>",
        summary.street_only_trees
    );
    let _ = writeln!(
        h,
        "<tr><th>street-unreachable</th><td>{}</td></tr>",
        summary.street_unreachable
    );
    let _ = writeln!(
        h,
        "<tr><th>confirmed aerial</th><td>{}</td></tr>",
        summary.confirmed_aerial
    );
    for (status, n) in &summary.status_counts {
        let _ = writeln!(h, "<tr><th>{}</th><td>{n}</td></tr>", escape(status));
    }
    h.push_str("</table>\n");
    if let Some(c) = cost {
        h.push_str(
            "<h2>Acquisition cost</h2>\n<table>\n<tr><th></th><th>images</th><th>USD</th></tr>\n",
        );
        let _ = writeln!(
            h,
            "<tr><th>street only</th><td>{}</td><td>{:.3}</td></tr>",
            c.street_only_images, c.street_only_cost_usd
        );
        let _ = writeln!(
            h,
            "<tr><th>aerial + street</th><td>{} + {} tiles</td><td>{:.3}</td></tr>",
            c.combined_street_images, c.combined_aerial_tiles, c.combined_cost_usd
        );
        let reduction = c
            .reduction_factor
            .map(|r| format!("{r:.3}"))
            .unwrap_or_else(|| "undefined".into());
        let _ = writeln!(
            h,
            "<tr><th>reduction</th><td colspan=\"2\">{reduction}</td></tr>\n</table>"
        );
    }
    h.push_str("<h2>Hotspots</h2>\n<table>\n<tr><th>row</th><th>col</th><th>count</th><th>lat</th><th>lon</th></tr>\n");
    for s in spots {
        let _ = writeln!(
            h,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{:.6}</td><td>{:.6}</td></tr>",
            s.row, s.col, s.count, s.center.lat, s.center.lon
        );
    }
    h.push_str("</table>\n");
    let _ = writeln!(
        h,
        "<h2>Heatmap ({} m cells, {} outside AOI)</h2>\n<table>",
        grid.cell_size_m, grid.remainder
    );
    for row in &grid.counts {
        h.push_str("<tr>");
        for c in row {
            let _ = write!(h, "<td>{c}</td>");
        }
        h.push_str("</tr>\n");
    }
    h.push_str("</table>\n</body></html>\n");
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{destination, GeoBox};
    use crate::timeline::{build_timeline, ClassProbs, ClassificationResult, CrownLabel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn aoi() -> AreaOfInterest {
        AreaOfInterest::from_box("t", GeoBox::new(32.75, -117.14, 32.76, -117.12).unwrap()).unwrap()
    }

    fn tree(lat: f64, lon: f64) -> TreeRecord {
        TreeRecord::new(GeoPoint::new(lat, lon).unwrap(), TreeSource::Aerial)
    }

    #[test]
    fn single_and_shared_cells() {
        let g = build_heatmap(&[tree(32.755, -117.13)], &aoi(), 100.0).unwrap();
        assert_eq!(g.total(), 1);
        assert_eq!(g.counts.iter().flatten().filter(|&&c| c == 1).count(), 1);
        let a = tree(32.755, -117.13);
        let b = TreeRecord::new(destination(a.location, 45.0, 1.0), TreeSource::Aerial);
        let g = build_heatmap(&[a, b], &aoi(), 100.0).unwrap();
        assert_eq!(*g.counts.iter().flatten().max().unwrap(), 2);
        assert!(build_heatmap(&[], &aoi(), 0.0).is_err());
    }

    #[test]
    fn outside_trees_go_to_remainder() {
        let g =
            build_heatmap(&[tree(32.755, -117.13), tree(40.0, -117.13)], &aoi(), 100.0).unwrap();
        assert_eq!((g.total(), g.remainder), (1, 1));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn heatmap_matches_point_in_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trees: Vec<TreeRecord> = (0..500)
            .map(|_| {
                tree(
                    rng.random_range(32.74..32.77),
                    rng.random_range(-117.145..-117.115),
                )
            })
            .collect();
        let area = aoi();
        let g = build_heatmap(&trees, &area, 100.0).unwrap();
        let o = geo_to_mercator(g.origin).unwrap();
        let s = g.cell_size_mercator;
        let mut expected = vec![vec![0u64; g.cols]; g.rows];
        let mut outside = 0;
        for t in &trees {
            if !area.contains(t.location) {
                outside += 1;
                continue;
            }
            let m = geo_to_mercator(t.location).unwrap();
            // scan every cell with explicit half-open bounds
            let mut hits = 0;
            for r in 0..g.rows {
                for c in 0..g.cols {
                    let west = o.x + c as f64 * s;
                    let north = o.y - r as f64 * s;
                    let east_ok = m.x < west + s || c == g.cols - 1;
                    let south_ok = m.y > north - s || r == g.rows - 1;
                    let north_ok = m.y <= north || r == 0;
                    if m.x >= west && east_ok && north_ok && south_ok {
                        expected[r][c] += 1;
                        hits += 1;
                    }
                }
            }
            assert_eq!(hits, 1);
        }
        assert_eq!(g.counts, expected);
        assert_eq!(g.remainder, outside);
        assert_eq!(g.total() + g.remainder, 500);
    }

    fn grid_of(counts: Vec<Vec<u64>>) -> HeatmapGrid {
        HeatmapGrid {
            origin: GeoPoint::new(32.76, -117.14).unwrap(),
            cell_size_m: 100.0,
            cell_size_mercator: 118.0,
            rows: counts.len(),
            cols: counts[0].len(),
            counts,
            remainder: 0,
        }
    }

    #[test]
    fn hotspot_order_and_threshold() {
        assert!(hotspots(&grid_of(vec![vec![1, 1], vec![1, 1]]), 2)
            .unwrap()
            .is_empty());
        let spots = hotspots(&grid_of(vec![vec![1, 9], vec![3, 3]]), 2).unwrap();
        let cells: Vec<(usize, usize, u64)> =
            spots.iter().map(|s| (s.row, s.col, s.count)).collect();
        assert_eq!(cells, vec![(0, 1, 9), (1, 0, 3), (1, 1, 3)]);
        assert!(hotspots(&grid_of(vec![vec![1]]), 0).is_err());
    }

    #[test]
    fn hotspots_match_filter_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts: Vec<Vec<u64>> = (0..12)
            .map(|_| (0..9).map(|_| rng.random_range(0..6)).collect())
            .collect();
        let g = grid_of(counts.clone());
        let mut oracle: Vec<(u64, usize, usize)> = Vec::new();
        for (r, row) in counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                if n >= 3 {
                    oracle.push((n, r, c));
                }
            }
        }
        oracle.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let got: Vec<(u64, usize, usize)> = hotspots(&g, 3)
            .unwrap()
            .iter()
            .map(|s| (s.count, s.row, s.col))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn normal_heights_costs() {
        let c = cost_comparison(&CostInputs::new(1136, 546, 756)).unwrap();
        assert_eq!(c.street_only_images, 4544);
        assert_eq!(c.combined_street_images, 756);
        assert_eq!(c.street_only_cost_micro_usd, 31_808_000);
        assert_eq!(c.street_only_cost_usd, 31.808);
        assert!(c.street_only_images >= 6 * c.combined_street_images);
        assert!((c.reduction_factor.unwrap() - 6.0106).abs() < 1e-4);
        assert_eq!(
            cost_comparison(&CostInputs::new(10, 1, 0))
                .unwrap()
                .reduction_factor,
            None
        );
    }

    #[test]
    fn geojson_export() {
        let empty = export_geojson(&[]);
        assert_eq!(empty["features"].as_array().unwrap().len(), 0);
        let mut t = tree(32.755, -117.13);
        let cls = |l| ClassificationResult::from_probs(ClassProbs::one_hot(l)).unwrap();
        t.timeline = Some(
            build_timeline(&[
                ("2017-11".parse().unwrap(), cls(CrownLabel::Healthy)),
                ("2018-04".parse().unwrap(), cls(CrownLabel::Infested)),
            ])
            .unwrap(),
        );
        let other = tree(32.751, -117.121);
        let doc = export_geojson(&[t.clone(), other.clone()]);
        let text = serde_json::to_string(&doc).unwrap();
        let back: Value = serde_json::from_str(&text).unwrap();
        let features = back["features"].as_array().unwrap();
        assert_eq!(features.len(), 2);
        let ids: Vec<&str> = features
            .iter()
            .map(|f| f["properties"]["id"].as_str().unwrap())
            .collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        let f = features
            .iter()
            .find(|f| f["properties"]["id"] == t.id.as_str())
            .unwrap();
        assert_eq!(f["properties"]["transition"]["last_healthy"], "2017-11");
        assert_eq!(f["properties"]["transition"]["first_infested"], "2018-04");
        assert_eq!(f["properties"]["status"], "infested-onset-known");
        let again = serde_json::to_string(&export_geojson(&[other, t])).unwrap();
        assert_eq!(text, again);
    }

    #[test]
    fn html_mentions_counts() {
        let g = build_heatmap(&[tree(32.755, -117.13)], &aoi(), 250.0).unwrap();
        let s = summarize(&[tree(32.755, -117.13)]);
        let c = cost_comparison(&CostInputs::new(1136, 546, 756)).unwrap();
        let html = render_html("Survey <test>", &s, Some(&c), &g, &hotspots(&g, 1).unwrap());
        assert!(html.contains("Survey &lt;test&gt;"));
        assert!(html.contains("31.808"));
        assert!(html.contains("<td>1</td>"));
    }
}
