//! Per-tree infestation timelines from dated crown classifications.

use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::geo::{haversine_m, PixelBox};
use crate::linker::{recenter_heading, OriginalView, PanoramaRecord, StreetImageRequest};
use crate::registry::{Observation, TreeRecord};

pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrownLabel {
    Healthy,
    Infested,
    Unknown,
}

impl CrownLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            CrownLabel::Healthy => "healthy",
            CrownLabel::Infested => "infested",
            CrownLabel::Unknown => "unknown",
        }
    }
}

/// Classifier output: one probability per crown class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs {
    pub healthy: f64,
    pub infested: f64,
    pub unknown: f64,
}

impl ClassProbs {
    pub fn new(healthy: f64, infested: f64, unknown: f64) -> Result<Self> {
        let p = ClassProbs {
            healthy,
            infested,
            unknown,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.healthy, self.infested, self.unknown];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::domain(format!(
                "probabilities out of [0, 1]: {all:?}"
            )));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::domain(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Highest-probability class; ties resolve in the order healthy, infested, unknown.
    pub fn argmax(&self) -> CrownLabel {
        let mut best = (CrownLabel::Healthy, self.healthy);
        for (label, p) in [
            (CrownLabel::Infested, self.infested),
            (CrownLabel::Unknown, self.unknown),
        ] {
            if p > best.1 {
                best = (label, p);
            }
        }
        best.0
    }

    pub fn get(&self, label: CrownLabel) -> f64 {
        match label {
            CrownLabel::Healthy => self.healthy,
            CrownLabel::Infested => self.infested,
            CrownLabel::Unknown => self.unknown,
        }
    }

    pub fn one_hot(label: CrownLabel) -> Self {
        let mut p = ClassProbs {
            healthy: 0.0,
            infested: 0.0,
            unknown: 0.0,
        };
        match label {
            CrownLabel::Healthy => p.healthy = 1.0,
            CrownLabel::Infested => p.infested = 1.0,
            CrownLabel::Unknown => p.unknown = 1.0,
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub probs: ClassProbs,
    pub label: CrownLabel,
}

impl ClassificationResult {
    pub fn from_probs(probs: ClassProbs) -> Result<Self> {
        probs.validate()?;
        Ok(ClassificationResult {
            probs,
            label: probs.argmax(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimelineStatus {
    NeverInfested,
    InfestedOnsetKnown,
    InfestedOnsetUnknown,
    /// An infested observation is followed by a healthy one.
    Inconsistent,
}

impl TimelineStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TimelineStatus::NeverInfested => "never-infested",
            TimelineStatus::InfestedOnsetKnown => "infested-onset-known",
            TimelineStatus::InfestedOnsetUnknown => "infested-onset-unknown",
            TimelineStatus::Inconsistent => "inconsistent",
        }
    }

    pub fn is_infested(&self) -> bool {
        !matches!(self, TimelineStatus::NeverInfested)
    }
}

/// Onset window `(last_healthy, first_infested]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub last_healthy: YearMonth,
    pub first_infested: YearMonth,
}

impl Transition {
    pub fn contains(&self, date: YearMonth) -> bool {
        self.last_healthy < date && date <= self.first_infested
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub date: YearMonth,
    pub label: CrownLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfestationTimeline {
    pub points: Vec<TimelinePoint>,
    pub transition: Option<Transition>,
    pub status: TimelineStatus,
}

/// Reduces dated classifications to a timeline.
///
/// Unknown-labelled points are dropped. The transition runs from the latest
/// healthy observation strictly before the first infested one to that first
/// infested observation. A healthy observation after the onset marks the
/// sequence inconsistent; the transition is still reported.
pub fn build_timeline(points: &[(YearMonth, ClassificationResult)]) -> Result<InfestationTimeline> {
    if points.is_empty() {
        return Err(Error::domain("timeline needs at least one observation"));
    }
    let mut pts: Vec<TimelinePoint> = points
        .iter()
        .filter(|(_, c)| c.probs.argmax() != CrownLabel::Unknown)
        .map(|(date, c)| TimelinePoint {
            date: *date,
            label: c.probs.argmax(),
        })
        .collect();
    if pts.is_empty() {
        return Err(Error::domain("every observation was classified unknown"));
    }
    pts.sort_by_key(|p| (p.date, p.label));

    let Some(first_inf) = pts.iter().position(|p| p.label == CrownLabel::Infested) else {
        return Ok(InfestationTimeline {
            points: pts,
            transition: None,
            status: TimelineStatus::NeverInfested,
        });
    };
    let onset = pts[first_inf].date;
    let transition = pts[..first_inf]
        .iter()
        .rev()
        .find(|p| p.date < onset)
        .map(|p| Transition {
            last_healthy: p.date,
            first_infested: onset,
        });
    let relapse = pts[first_inf..]
        .iter()
        .any(|p| p.label == CrownLabel::Healthy && p.date > onset);
    let status = match (relapse, transition) {
        (true, _) => TimelineStatus::Inconsistent,
        (false, Some(_)) => TimelineStatus::InfestedOnsetKnown,
        (false, None) => TimelineStatus::InfestedOnsetUnknown,
    };
    Ok(InfestationTimeline {
        points: pts,
        transition,
        status,
    })
}

/// A crown found and classified in one street view.
#[derive(Debug, Clone, PartialEq)]
pub struct CrownReading {
    pub crown_box: PixelBox,
    pub classification: ClassificationResult,
}

/// Fetches a street view, locates the crown and classifies it.
/// `Ok(None)` is a gap: the view failed or showed no crown.
pub trait CrownClassifier {
    fn classify_view(
        &mut self,
        pano: &PanoramaRecord,
        request: &StreetImageRequest,
    ) -> Result<Option<CrownReading>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeHistory {
    /// Newly produced observations, gaps included (without classification).
    pub observations: Vec<Observation>,
    pub timeline: Option<InfestationTimeline>,
}

/// Classifies a tree's crown in the historical panoramas around the
/// panorama that first linked it, and rebuilds its timeline.
///
/// Panoramas already observed for this tree are not requested again.
pub fn classify_tree_history(
    tree: &TreeRecord,
    catalog: &[PanoramaRecord],
    history_radius_m: f64,
    image_width: u32,
    classifier: &mut dyn CrownClassifier,
) -> Result<TreeHistory> {
    let current = tree
        .current_observation()
        .ok_or_else(|| Error::domain(format!("tree {} has no linked street view", tree.id)))?;
    let (Some(pano_id), Some(heading), Some(crown_box)) =
        (current.pano_id.as_ref(), current.heading, current.crown_box)
    else {
        return Err(Error::domain(format!(
            "tree {} current observation incomplete",
            tree.id
        )));
    };
    let original_pano = catalog
        .iter()
        .find(|p| &p.pano_id == pano_id)
        .cloned()
        .ok_or_else(|| Error::domain(format!("pano {pano_id} missing from catalog")))?;
    let original = OriginalView {
        pano: original_pano,
        heading,
        crown_box,
    };

    let mut candidates: Vec<&PanoramaRecord> = catalog
        .iter()
        .filter(|p| p.pano_id != original.pano.pano_id)
        .filter(|p| haversine_m(p.location, original.pano.location) <= history_radius_m)
        .filter(|p| {
            !tree
                .observations
                .iter()
                .any(|o| o.pano_id.as_ref() == Some(&p.pano_id))
        })
        .collect();
    candidates.sort_by(|a, b| {
        a.capture_date
            .cmp(&b.capture_date)
            .then_with(|| a.pano_id.cmp(&b.pano_id))
    });

    let mut observations = Vec::new();
    for hist in candidates {
        if hist.location == tree.location {
            continue;
        }
        let request = recenter_heading(tree.location, &original, hist, image_width)?;
        let reading = classifier.classify_view(hist, &request)?;
        observations.push(Observation {
            capture_date: hist.capture_date,
            pano_id: Some(hist.pano_id.clone()),
            heading: Some(request.heading),
            crown_box: reading.as_ref().map(|r| r.crown_box),
            classification: reading.map(|r| r.classification),
            link: false,
        });
    }

    let dated: Vec<(YearMonth, ClassificationResult)> = tree
        .observations
        .iter()
        .chain(&observations)
        .filter_map(|o| o.classification.map(|c| (o.capture_date, c)))
        .collect();
    let timeline = if dated.is_empty() {
        None
    } else {
        build_timeline(&dated).ok()
    };
    Ok(TreeHistory {
        observations,
        timeline,
    })
}
