use serde::{Deserialize, Serialize};

use super::world::SyntheticWorld;
use crate::geo::haversine_m;
use crate::registry::TreeRecord;

pub const MATCH_RADIUS_M: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub palms: usize,
    pub visible_palms: usize,
    pub trees: usize,
    pub matched: usize,
    /// Matched street-visible palms over all street-visible palms.
    pub recall: f64,
    /// Matched trees over all trees; `None` for an empty registry.
    pub precision: Option<f64>,
    pub mean_coord_error_m: Option<f64>,
    /// Matched infested palms.
    pub infested_matched: usize,
    /// Share of matched infested palms whose transition contains the onset.
    pub timeline_accuracy: Option<f64>,
}

/// Greedy one-to-one matching: pairs within `radius_m`, closest first,
/// ties by (palm, tree) index. Returns `(palm, tree, distance)`.
pub fn match_palms(
    world: &SyntheticWorld,
    trees: &[TreeRecord],
    radius_m: f64,
) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (p, palm) in world.palms.iter().enumerate() {
        for (t, tree) in trees.iter().enumerate() {
            let d = haversine_m(palm.location, tree.location);
            if d <= radius_m {
                pairs.push((p, t, d));
            }
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut palm_used = vec![false; world.palms.len()];
    let mut tree_used = vec![false; trees.len()];
    let mut out = Vec::new();
    for (p, t, d) in pairs {
        if !palm_used[p] && !tree_used[t] {
            palm_used[p] = true;
            tree_used[t] = true;
            out.push((p, t, d));
        }
    }
    out
}

pub fn score_run(world: &SyntheticWorld, trees: &[TreeRecord]) -> RunScore {
    let matches = match_palms(world, trees, MATCH_RADIUS_M);
    let visible = world.visible_palms();
    let mut is_visible = vec![false; world.palms.len()];
    for &i in &visible {
        is_visible[i] = true;
    }
    let matched_visible = matches.iter().filter(|m| is_visible[m.0]).count();
    let mut infested = 0;
    let mut correct = 0;
    for &(p, t, _) in &matches {
        if let Some(onset) = world.palms[p].onset {
            infested += 1;
            let tr = trees[t].timeline.as_ref().and_then(|tl| tl.transition);
            if tr.is_some_and(|tr| tr.contains(onset)) {
                correct += 1;
            }
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    RunScore {
        palms: world.palms.len(),
        visible_palms: visible.len(),
        trees: trees.len(),
        matched: matches.len(),
        recall: ratio(matched_visible, visible.len()).unwrap_or(0.0),
        precision: ratio(matches.len(), trees.len()),
        mean_coord_error_m: (!matches.is_empty())
            .then(|| matches.iter().map(|m| m.2).sum::<f64>() / matches.len() as f64),
        infested_matched: infested,
        timeline_accuracy: ratio(correct, infested),
    }
}
