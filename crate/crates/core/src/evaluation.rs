//! Scoring against simulator ground truth, and the result report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::ba::median;
use crate::geometry::{compose_motion, rotation_geodesic_distance, RigidMotion};
use crate::merging::similarity_from_points;
use crate::scene::{bounding_diameter, GroundTruth, Label, LabeledScene, MultiTakeScene, PointRef, TakeId, TrackId};
use crate::tracks::TrackSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentationScore {
    pub accuracy: f64,
    pub swapped: bool,
    pub coverage: f64,
    /// Labeled points that had a ground-truth label.
    pub scored: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MotionError {
    pub rotation_rad: f64,
    /// Translation error over the scene diameter.
    pub translation_rel: f64,
}

/// Ground-truth label of every track: the majority label of its members.
/// Tracks with a tie, or with no labeled member, are left out.
pub fn track_ground_truth(tracks: &TrackSet, labels: &BTreeMap<PointRef, Label>) -> BTreeMap<TrackId, Label> {
    let mut out = BTreeMap::new();
    for t in &tracks.tracks {
        let (mut b, mut f) = (0usize, 0usize);
        for m in &t.members {
            match labels.get(m) {
                Some(Label::Background) => b += 1,
                Some(Label::Foreground) => f += 1,
                _ => {}
            }
        }
        if b > f {
            out.insert(t.id, Label::Background);
        } else if f > b {
            out.insert(t.id, Label::Foreground);
        }
    }
    out
}

/// Swap-invariant accuracy over labeled points, plus coverage over all points.
pub fn segmentation_accuracy(labels: &BTreeMap<TrackId, Label>, gt: &BTreeMap<TrackId, Label>) -> SegmentationScore {
    let (mut straight, mut crossed, mut scored, mut labeled) = (0usize, 0usize, 0usize, 0usize);
    for (id, l) in labels {
        if *l == Label::Unknown {
            continue;
        }
        labeled += 1;
        let Some(g) = gt.get(id) else { continue };
        scored += 1;
        if l == g {
            straight += 1;
        } else if l.swapped() == *g {
            crossed += 1;
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    SegmentationScore {
        accuracy: ratio(straight.max(crossed), scored),
        swapped: crossed > straight,
        coverage: ratio(labeled, labels.len()),
        scored,
    }
}

/// Motion of the foreground from the reference take to take `t`, in the
/// reference take's frame.
pub fn ground_truth_motion(gt: &GroundTruth, reference: TakeId, t: TakeId) -> Option<RigidMotion> {
    let w_r = gt.similarities.get(&reference)?;
    Some(compose_motion(gt.motions.get(&reference)?, gt.motions.get(&t)?).conjugate(w_r))
}

/// Per-take motion error in the reference frame. With swapped labels the
/// estimate moves the true background, so it is compared with the inverse.
pub fn motion_error(
    estimated: &BTreeMap<TakeId, RigidMotion>,
    gt: &GroundTruth,
    reference: TakeId,
    swapped: bool,
    diameter: f64,
) -> BTreeMap<TakeId, Option<MotionError>> {
    gt.similarities
        .keys()
        .map(|t| {
            let err = estimated.get(t).zip(ground_truth_motion(gt, reference, *t)).map(|(m, want)| {
                let want = if swapped { want.inverse() } else { want };
                MotionError {
                    rotation_rad: rotation_geodesic_distance(&m.rotation, &want.rotation),
                    translation_rel: (m.translation - want.translation).norm() / diameter.max(f64::MIN_POSITIVE),
                }
            });
            (*t, err)
        })
        .collect()
}

/// RMSE of merged positions against the truth after a similarity alignment,
/// over the scene diameter. The truth of a track is its first member moved to
/// the reference take's configuration in world coordinates, where both bodies
/// of the merged model sit whichever way the labels point.
pub fn merged_rmse(
    merged: &LabeledScene,
    tracks: &TrackSet,
    scene: &MultiTakeScene,
    gt: &GroundTruth,
    gt_tracks: &BTreeMap<TrackId, Label>,
) -> Option<f64> {
    let r = merged.reference;
    let (mut est, mut truth) = (Vec::new(), Vec::new());
    for (id, p) in &merged.points {
        if p.label == Label::Unknown {
            continue;
        }
        let (Some(g), Some(track)) = (gt_tracks.get(id), tracks.get(*id)) else { continue };
        let (take, point) = track.members[0];
        let Some(x) = scene.take(take).and_then(|tm| tm.points.get(&point)) else { continue };
        let world = gt.similarities.get(&take)?.inverse().apply(x);
        let world = match g {
            Label::Foreground => compose_motion(gt.motions.get(&take)?, gt.motions.get(&r)?).apply(&world),
            _ => world,
        };
        est.push(p.position);
        truth.push(world);
    }
    let s = similarity_from_points(&est, &truth).ok()?;
    let sum: f64 = est.iter().zip(&truth).map(|(e, t)| (s.apply(e) - t).norm_squared()).sum();
    let d = bounding_diameter(truth.iter());
    Some((sum / est.len() as f64).sqrt() / d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    #[serde(rename = "points_F")]
    pub points_f: usize,
    #[serde(rename = "points_B")]
    pub points_b: usize,
    #[serde(rename = "points_U")]
    pub points_u: usize,
    pub median_reproj_px: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motions: Option<BTreeMap<TakeId, Option<MotionError>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merged_rmse_rel: Option<f64>,
}

/// Ground truth plus what is needed to map it onto merged tracks.
pub struct Truth<'a> {
    pub gt: &'a GroundTruth,
    pub tracks: &'a TrackSet,
    /// The per-take input, for position errors.
    pub scene: Option<&'a MultiTakeScene>,
}

pub fn report(merged: &LabeledScene, truth: Option<&Truth<'_>>) -> Report {
    let mut out = Report {
        points_f: merged.count(Label::Foreground),
        points_b: merged.count(Label::Background),
        points_u: merged.count(Label::Unknown),
        median_reproj_px: median(&mut merged.labeled_reprojection_errors()),
        segmentation: None,
        motions: None,
        merged_rmse_rel: None,
    };
    if let Some(truth) = truth {
        let gt_tracks = track_ground_truth(truth.tracks, &truth.gt.labels);
        let labels: BTreeMap<TrackId, Label> = merged.points.iter().map(|(id, p)| (*id, p.label)).collect();
        let score = segmentation_accuracy(&labels, &gt_tracks);
        let diameter = bounding_diameter(merged.points.values().map(|p| &p.position));
        let mut estimated = merged.motions.clone();
        estimated.entry(merged.reference).or_insert_with(RigidMotion::identity);
        out.motions = Some(motion_error(&estimated, truth.gt, merged.reference, score.swapped, diameter));
        out.segmentation = Some(score);
        out.merged_rmse_rel = truth.scene.and_then(|s| merged_rmse(merged, truth.tracks, s, truth.gt, &gt_tracks));
    }
    out
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("points_F".into(), self.points_f.to_string()),
            ("points_B".into(), self.points_b.to_string()),
            ("points_U".into(), self.points_u.to_string()),
            ("median_reproj_px".into(), format!("{:.4}", self.median_reproj_px)),
        ];
        if let Some(s) = &self.segmentation {
            rows.push(("accuracy".into(), format!("{:.4}", s.accuracy)));
            rows.push(("swapped".into(), s.swapped.to_string()));
            rows.push(("coverage".into(), format!("{:.4}", s.coverage)));
        }
        for (t, e) in self.motions.iter().flatten() {
            let v = match e {
                Some(e) => format!("{:.3e} rad  {:.3e} rel", e.rotation_rad, e.translation_rel),
                None => "absent".into(),
            };
            rows.push((format!("motion_{t}"), v));
        }
        if let Some(r) = self.merged_rmse_rel {
            rows.push(("merged_rmse_rel".into(), format!("{r:.3e}")));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}
