//! Clustering of sequentially registered poses into two point groups per take
//! by intersection linkage, with an optional motion-consistency filter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, RigidMotion, Vec3};
use crate::registration::{RegisteredPose, Registrations};
use crate::scene::{ImageId, MultiTakeScene, PointId, TakeId};
use crate::text;

/// Fraction of the smaller set an intersection may reach and still count as
/// "nearly empty" in the linkage constraints.
pub const LINKAGE_FRACTION: f64 = 0.02;

/// Two sequential poses of one image toward one take, with the points each
/// observes (sorted, disjoint at creation).
#[derive(Debug, Clone, PartialEq)]
pub struct PosePair {
    pub image: ImageId,
    pub source: TakeId,
    pub target: TakeId,
    pub poses: [CameraPose; 2],
    pub observed: [Vec<PointId>; 2],
    pub support: usize,
}

impl PosePair {
    pub fn motion(&self) -> RigidMotion {
        foreground_motion_from_pair(&self.poses[0], &self.poses[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TakeGroupPair {
    pub take: TakeId,
    pub groups: [BTreeSet<PointId>; 2],
    pub support: usize,
}

impl TakeGroupPair {
    pub fn total(&self) -> usize {
        self.groups[0].len() + self.groups[1].len()
    }

    /// One group nearly empty: no second rigid object was found.
    pub fn is_degenerate(&self, min_points: usize) -> bool {
        let small = self.groups[0].len().min(self.groups[1].len());
        let large = self.groups[0].len().max(self.groups[1].len());
        small < min_points || (small as f64) < 0.05 * large as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupingOptions {
    pub motion_criterion: bool,
    /// Scene scale used by the motion criterion tolerances; zero or less
    /// means the target take's diameter.
    pub scene_scale: f64,
}

/// Motion of the foreground between the two configurations seen by a pose
/// pair, in the frame both poses live in: `A = R_B^-1 R_F`, `a = c_B - A c_F`.
pub fn foreground_motion_from_pair(pose_b: &CameraPose, pose_f: &CameraPose) -> RigidMotion {
    let a = pose_b.rotation.inverse().mul(&pose_f.rotation);
    let t = pose_b.center - a.apply(&pose_f.center);
    RigidMotion::new(a, t)
}

/// All 2-combinations of the poses of each image, in sequential (inlier count)
/// order, with support 1.
pub fn extract_pose_pairs(sets: &[&[RegisteredPose]]) -> Vec<PosePair> {
    let mut out = Vec::new();
    for set in sets {
        let mut order: Vec<&RegisteredPose> = set.iter().collect();
        order.sort_by_key(|p| std::cmp::Reverse(p.inlier_count()));
        for i in 0..order.len() {
            for j in i + 1..order.len() {
                let (p, q) = (order[i], order[j]);
                out.push(PosePair {
                    image: p.image,
                    source: p.source,
                    target: p.target,
                    poses: [p.pose, q.pose],
                    observed: [sorted_points(p), sorted_points(q)],
                    support: 1,
                });
            }
        }
    }
    out
}

fn sorted_points(p: &RegisteredPose) -> Vec<PointId> {
    p.inlier_points().into_iter().collect()
}

fn intersection_len(a: &[PointId], b: &[PointId]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn union(a: &[PointId], b: &[PointId]) -> Vec<PointId> {
    let set: BTreeSet<PointId> = a.iter().chain(b).copied().collect();
    set.into_iter().collect()
}

/// An intersection passes the "small" constraint when it is empty or below
/// `LINKAGE_FRACTION` of the smaller of the two sets it came from.
pub fn small_enough(intersection: usize, a: usize, b: usize) -> bool {
    intersection == 0 || (intersection as f64) < LINKAGE_FRACTION * a.min(b) as f64
}

/// Straight and crossed criterion values of two set pairs; `None` when the
/// respective constraints fail or the value is zero.
pub fn linkage_criteria(p: &[Vec<PointId>; 2], q: &[Vec<PointId>; 2]) -> (Option<usize>, Option<usize>) {
    let n = |a: usize, b: usize| intersection_len(&p[a], &q[b]);
    let (i11, i22, i12, i21) = (n(0, 0), n(1, 1), n(0, 1), n(1, 0));
    let len = |s: &[Vec<PointId>; 2], k: usize| s[k].len();
    let straight_ok = small_enough(i12, len(p, 0), len(q, 1)) && small_enough(i21, len(p, 1), len(q, 0));
    let crossed_ok = small_enough(i11, len(p, 0), len(q, 0)) && small_enough(i22, len(p, 1), len(q, 1));
    let straight = Some(i11 + i22).filter(|v| straight_ok && *v > 0);
    let crossed = Some(i12 + i21).filter(|v| crossed_ok && *v > 0);
    (straight, crossed)
}

/// Merges two set pairs (crossed: second pair enters in swapped order).
/// Points claimed by both resulting sets are removed from both.
pub fn merge_sets(p: &[Vec<PointId>; 2], q: &[Vec<PointId>; 2], crossed: bool) -> [Vec<PointId>; 2] {
    let (q0, q1) = if crossed { (&q[1], &q[0]) } else { (&q[0], &q[1]) };
    let a = union(&p[0], q0);
    let b = union(&p[1], q1);
    let sb: BTreeSet<PointId> = b.iter().copied().collect();
    let sa: BTreeSet<PointId> = a.iter().copied().collect();
    [a.into_iter().filter(|x| !sb.contains(x)).collect(), b.into_iter().filter(|x| !sa.contains(x)).collect()]
}

/// Orientation of a pose pair within the motion clusters of its source take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionClass {
    Forward,
    Backward,
    Zero,
    Outlier,
}

impl MotionClass {
    fn sign(self) -> i8 {
        match self {
            MotionClass::Forward => 1,
            MotionClass::Backward => -1,
            _ => 0,
        }
    }
}

/// Working cluster during linkage: the merged sets plus, for the motion
/// criterion, the orientation of each contributing source take.
#[derive(Debug, Clone)]
struct Cluster {
    sets: [Vec<PointId>; 2],
    support: usize,
    orientation: BTreeMap<TakeId, i8>,
}

fn motion_compatible(a: &Cluster, b: &Cluster, crossed: bool) -> bool {
    a.orientation.iter().all(|(s, oa)| match b.orientation.get(s) {
        None => true,
        Some(ob) => *oa != 0 && *ob != 0 && if crossed { *oa == -*ob } else { oa == ob },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    value: usize,
    // straight wins a tie in value against crossed
    straight: bool,
    union: usize,
    // lower indices win, so stored reversed for max-selection
    rev_i: std::cmp::Reverse<usize>,
    rev_j: std::cmp::Reverse<usize>,
}

fn best_candidate(clusters: &[Cluster]) -> Option<(usize, usize, bool)> {
    let mut best: Option<Candidate> = None;
    for i in 0..clusters.len() {
        for j in i + 1..clusters.len() {
            let (p, q) = (&clusters[i], &clusters[j]);
            let (straight, crossed) = linkage_criteria(&p.sets, &q.sets);
            let mut consider = |value: usize, crossed: bool| {
                if !motion_compatible(p, q, crossed) {
                    return;
                }
                let merged = merge_sets(&p.sets, &q.sets, crossed);
                let c = Candidate {
                    value,
                    union: merged[0].len() + merged[1].len(),
                    rev_i: std::cmp::Reverse(i),
                    rev_j: std::cmp::Reverse(j),
                    straight: !crossed,
                };
                if best.is_none_or(|b| c > b) {
                    best = Some(c);
                }
            };
            if let Some(v) = straight {
                consider(v, false);
            }
            if let Some(v) = crossed {
                consider(v, true);
            }
        }
    }
    best.map(|c| (c.rev_i.0, c.rev_j.0, !c.straight))
}

/// One linkage step on plain pose pairs: merges the best admissible pair of
/// entries in place. Returns `false` when nothing can be merged.
pub fn linkage_step(pairs: &mut Vec<PosePair>) -> bool {
    let mut clusters: Vec<Cluster> = pairs
        .iter()
        .map(|p| Cluster { sets: p.observed.clone(), support: p.support, orientation: BTreeMap::new() })
        .collect();
    let Some((i, j, crossed)) = best_candidate(&clusters) else { return false };
    apply_merge(&mut clusters, i, j, crossed);
    let q = pairs.remove(j);
    let p = &mut pairs[i];
    p.observed = clusters[i].sets.clone();
    p.support += q.support;
    true
}

fn apply_merge(clusters: &mut Vec<Cluster>, i: usize, j: usize, crossed: bool) {
    let q = clusters.remove(j);
    let p = &mut clusters[i];
    p.sets = merge_sets(&p.sets, &q.sets, crossed);
    p.support += q.support;
    for (s, o) in q.orientation {
        let o = if crossed { -o } else { o };
        p.orientation.entry(s).or_insert(o);
    }
}

/// Sequential RANSAC on motions of one (source, target) take pair in
/// (axis-angle, translation) space. Zero motions are split off by a metric
/// threshold; the two largest clusters become forward and backward.
pub fn motion_cluster(motions: &[RigidMotion], scene_scale: f64) -> Option<Vec<MotionClass>> {
    let zero_rot = 1e-2;
    let zero_trans = 1e-2 * scene_scale;
    let tol_rot = 0.05;
    let tol_trans = 0.02 * scene_scale;
    let mut classes = vec![MotionClass::Outlier; motions.len()];
    let mut live = Vec::new();
    for (i, m) in motions.iter().enumerate() {
        if m.rotation.angle() < zero_rot && m.translation.norm() < zero_trans {
            classes[i] = MotionClass::Zero;
        } else {
            live.push(i);
        }
    }
    if live.len() < 2 {
        return None;
    }
    let params: Vec<(Vec3, Vec3)> = motions.iter().map(|m| (m.rotation.to_axis_angle(), m.translation)).collect();
    let close = |a: usize, b: usize| {
        (params[a].0 - params[b].0).norm() < tol_rot && (params[a].1 - params[b].1).norm() < tol_trans
    };
    // exhaustive single-point hypotheses: deterministic and cheap at these sizes
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut remaining = live;
    while !remaining.is_empty() && clusters.len() < 2 {
        let best = remaining
            .iter()
            .map(|&h| remaining.iter().copied().filter(|&k| close(h, k)).collect::<Vec<_>>())
            .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b[0].cmp(&a[0])))
            .unwrap();
        remaining.retain(|k| !best.contains(k));
        clusters.push(best);
    }
    for (c, members) in clusters.iter().enumerate() {
        let class = if c == 0 { MotionClass::Forward } else { MotionClass::Backward };
        for &m in members {
            classes[m] = class;
        }
    }
    Some(classes)
}

/// Runs linkage to a fixpoint on the pose pairs of one take and returns the
/// cluster merged from the most cameras (ties: larger total, lower index).
pub fn group_take(take: TakeId, pairs: &[PosePair], options: &GroupingOptions) -> Result<TakeGroupPair> {
    if pairs.is_empty() {
        return Err(Error::UnderConstrained(format!("no pose pairs toward take {take}")));
    }
    let mut ordered: Vec<&PosePair> = pairs.iter().collect();
    ordered.sort_by(|a, b| a.image.cmp(&b.image).then_with(|| a.observed.cmp(&b.observed)));
    let mut orientation: Vec<BTreeMap<TakeId, i8>> = vec![BTreeMap::new(); ordered.len()];
    if options.motion_criterion {
        let mut by_source: BTreeMap<TakeId, Vec<usize>> = BTreeMap::new();
        for (i, p) in ordered.iter().enumerate() {
            by_source.entry(p.source).or_default().push(i);
        }
        for (s, members) in by_source {
            let motions: Vec<RigidMotion> = members.iter().map(|&i| ordered[i].motion()).collect();
            if let Some(classes) = motion_cluster(&motions, options.scene_scale) {
                for (&i, c) in members.iter().zip(classes) {
                    orientation[i].insert(s, c.sign());
                }
            }
        }
    }
    let mut clusters: Vec<Cluster> = ordered
        .iter()
        .zip(orientation)
        .map(|(p, o)| Cluster { sets: p.observed.clone(), support: p.support, orientation: o })
        .collect();
    while let Some((i, j, crossed)) = best_candidate(&clusters) {
        apply_merge(&mut clusters, i, j, crossed);
    }
    let best = clusters
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.support
                .cmp(&b.support)
                .then((a.sets[0].len() + a.sets[1].len()).cmp(&(b.sets[0].len() + b.sets[1].len())))
                .then(ib.cmp(ia))
        })
        .map(|(_, c)| c)
        .unwrap();
    Ok(TakeGroupPair {
        take,
        groups: [best.sets[0].iter().copied().collect(), best.sets[1].iter().copied().collect()],
        support: best.support,
    })
}

/// Outcome of grouping every take.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grouping {
    pub pairs: BTreeMap<TakeId, TakeGroupPair>,
    /// Takes without any pose pair.
    pub failed: Vec<TakeId>,
    /// Per-pair motions for the debug dump: `(source, target, motion)`.
    pub motions: Vec<(TakeId, TakeId, RigidMotion)>,
}

pub fn group_all(scene: &MultiTakeScene, regs: &Registrations, options: &GroupingOptions) -> Result<Grouping> {
    let takes = scene.take_ids();
    let per_take: Vec<(TakeId, Vec<PosePair>)> = takes
        .iter()
        .map(|&t| {
            let sets: Vec<&[RegisteredPose]> =
                regs.iter().filter(|((_, target), _)| *target == t).map(|(_, v)| v.as_slice()).collect();
            (t, extract_pose_pairs(&sets))
        })
        .collect();
    let results: Vec<(TakeId, Option<TakeGroupPair>)> = per_take
        .par_iter()
        .map(|(t, pairs)| {
            let mut opts = options.clone();
            if opts.scene_scale <= 0.0 {
                opts.scene_scale = scene.take_diameter(*t);
            }
            (*t, group_take(*t, pairs, &opts).ok())
        })
        .collect();
    let mut out = Grouping::default();
    for (t, r) in results {
        match r {
            Some(g) => {
                out.pairs.insert(t, g);
            }
            None => out.failed.push(t),
        }
    }
    for (_, pairs) in &per_take {
        for p in pairs {
            out.motions.push((p.source, p.target, p.motion()));
        }
    }
    Ok(out)
}

pub fn format_groups(g: &Grouping) -> String {
    let mut out = String::new();
    for (t, pair) in &g.pairs {
        let _ = writeln!(out, "SUP {t} {}", pair.support);
        for (k, set) in pair.groups.iter().enumerate() {
            let _ = write!(out, "GRP {t} {} {}", k + 1, set.len());
            for p in set {
                let _ = write!(out, " {p}");
            }
            out.push('\n');
        }
    }
    for t in &g.failed {
        let _ = writeln!(out, "FAIL {t}");
    }
    for (s, t, m) in &g.motions {
        let _ = write!(out, "MOT {s} {t}");
        text::push_vec3(&mut out, &m.rotation.to_axis_angle());
        text::push_vec3(&mut out, &m.translation);
        out.push('\n');
    }
    out
}

pub fn save_groups(g: &Grouping, path: &Path) -> Result<()> {
    text::write(path, &format_groups(g))
}

pub fn load_groups(path: &Path) -> Result<Grouping> {
    let contents = text::read(path)?;
    let mut out = Grouping::default();
    for mut line in text::lines(path, &contents) {
        match line.tag() {
            "SUP" => {
                let t: TakeId = line.next("take id")?;
                let support: usize = line.next("support")?;
                line.finish()?;
                if out.pairs.contains_key(&t) {
                    return Err(line.err(format!("duplicate take {t}")));
                }
                out.pairs.insert(t, TakeGroupPair { take: t, groups: Default::default(), support });
            }
            "GRP" => {
                let t: TakeId = line.next("take id")?;
                let k: usize = line.next("group index")?;
                let n: usize = line.next("count")?;
                if !(1..=2).contains(&k) {
                    return Err(line.err(format!("group index {k} not 1 or 2")));
                }
                let mut set = BTreeSet::new();
                for _ in 0..n {
                    set.insert(line.next::<PointId>("point id")?);
                }
                line.finish()?;
                let pair = out.pairs.get_mut(&t).ok_or_else(|| line.err(format!("GRP before SUP for take {t}")))?;
                pair.groups[k - 1] = set;
            }
            "FAIL" => {
                out.failed.push(line.next("take id")?);
                line.finish()?;
            }
            "MOT" => {
                let s: TakeId = line.next("take id")?;
                let t: TakeId = line.next("take id")?;
                let w = line.vec3("axis-angle")?;
                let a = line.vec3("translation")?;
                line.finish()?;
                out.motions.push((s, t, RigidMotion::new(crate::geometry::Rotation3::from_axis_angle(&w), a)));
            }
            other => return Err(line.err(format!("unknown tag {other}"))),
        }
    }
    Ok(out)
}
