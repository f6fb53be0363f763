//! Global two-way partition of tracks: per-take groups are lifted to tracks,
//! merged greedily from a reference take, labeled, and extended to unlabeled
//! tracks by unanimous nearest neighbors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::grouping::{linkage_criteria, merge_sets, TakeGroupPair};
use crate::scene::{Label, TakeId, TrackId};
use crate::text;
use crate::tracks::TrackSet;

pub const DEFAULT_KNN: usize = 10;

/// A take's group pair expressed in track ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPair {
    pub take: TakeId,
    pub sets: [Vec<TrackId>; 2],
    pub support: usize,
}

impl LiftedPair {
    fn total(&self) -> usize {
        self.sets[0].len() + self.sets[1].len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGroups {
    pub reference: TakeId,
    pub groups: [BTreeSet<TrackId>; 2],
    /// Takes merged after the reference, with whether the crossed criterion won.
    pub order: Vec<(TakeId, bool)>,
    pub unmerged: Vec<TakeId>,
}

/// Maps a take's point groups to track ids. A track claimed by both groups
/// goes to the group holding more of its members; ties are dropped.
pub fn lift_to_tracks(pair: &TakeGroupPair, tracks: &TrackSet) -> LiftedPair {
    let mut votes: BTreeMap<TrackId, [usize; 2]> = BTreeMap::new();
    for (g, set) in pair.groups.iter().enumerate() {
        for p in set {
            if let Some(t) = tracks.track_of((pair.take, *p)) {
                votes.entry(t).or_default()[g] += 1;
            }
        }
    }
    let mut sets = [Vec::new(), Vec::new()];
    for (t, [a, b]) in votes {
        if a > b {
            sets[0].push(t);
        } else if b > a {
            sets[1].push(t);
        }
    }
    LiftedPair { take: pair.take, sets, support: pair.support }
}

/// Reference take: maximal support, then larger total, then smaller id.
pub fn choose_reference(pairs: &BTreeMap<TakeId, LiftedPair>) -> Option<TakeId> {
    pairs
        .values()
        .max_by(|a, b| a.support.cmp(&b.support).then(a.total().cmp(&b.total())).then(b.take.cmp(&a.take)))
        .map(|p| p.take)
}

/// Greedy merge of all lifted pairs into the reference pair. Each step takes
/// the admissible pair with the largest criterion value (straight before
/// crossed, then larger union, then smaller take id).
pub fn merge_global(pairs: &BTreeMap<TakeId, LiftedPair>) -> Option<GlobalGroups> {
    let reference = choose_reference(pairs)?;
    let mut current = pairs[&reference].sets.clone();
    let mut remaining: BTreeSet<TakeId> = pairs.keys().copied().filter(|t| *t != reference).collect();
    let mut order = Vec::new();
    loop {
        let mut best: Option<(MergeKey, [Vec<TrackId>; 2])> = None;
        for t in &remaining {
            let (straight, crossed) = linkage_criteria(&current, &pairs[t].sets);
            for (value, is_crossed) in [(straight, false), (crossed, true)] {
                let Some(v) = value else { continue };
                let merged = merge_sets(&current, &pairs[t].sets, is_crossed);
                let key = (v, !is_crossed, merged[0].len() + merged[1].len(), std::cmp::Reverse(*t));
                if best.as_ref().is_none_or(|(k, _)| key > *k) {
                    best = Some((key, merged));
                }
            }
        }
        let Some(((_, straight, _, std::cmp::Reverse(t)), merged)) = best else { break };
        current = merged;
        remaining.remove(&t);
        order.push((t, !straight));
    }
    Some(GlobalGroups {
        reference,
        groups: [current[0].iter().copied().collect(), current[1].iter().copied().collect()],
        order,
        unmerged: remaining.into_iter().collect(),
    })
}

/// First global group is background, second foreground, everything else
/// unknown; `swap` exchanges the two object labels.
pub fn label_points(groups: &GlobalGroups, tracks: &TrackSet, swap: bool) -> BTreeMap<TrackId, Label> {
    tracks
        .tracks
        .iter()
        .map(|t| {
            let l = if groups.groups[0].contains(&t.id) {
                Label::Background
            } else if groups.groups[1].contains(&t.id) {
                Label::Foreground
            } else {
                Label::Unknown
            };
            (t.id, if swap { l.swapped() } else { l })
        })
        .collect()
}

/// One simultaneous pass: an unknown track with a position takes a label when
/// all of its `k` nearest labeled neighbors agree. Returns the number of
/// tracks relabeled, or `None` when fewer than `k` labeled points exist.
pub fn knn_propagate(
    labels: &mut BTreeMap<TrackId, Label>,
    positions: &BTreeMap<TrackId, Vec3>,
    k: usize,
) -> Option<usize> {
    let labeled: Vec<(TrackId, Label, [f64; 3])> = labels
        .iter()
        .filter(|(_, l)| **l != Label::Unknown)
        .filter_map(|(t, l)| positions.get(t).map(|p| (*t, *l, [p.x, p.y, p.z])))
        .collect();
    if k == 0 || labeled.len() < k {
        log::warn!("{} labeled points, fewer than k = {k}; propagation skipped", labeled.len());
        return None;
    }
    let coords: Vec<[f64; 3]> = labeled.iter().map(|l| l.2).collect();
    let tree: ImmutableKdTree<f64, 3> = match ImmutableKdTree::new_from_slice(&coords) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("spatial index construction failed ({e:?}); propagation skipped");
            return None;
        }
    };
    let unknown: Vec<(TrackId, [f64; 3])> = labels
        .iter()
        .filter(|(_, l)| **l == Label::Unknown)
        .filter_map(|(t, _)| positions.get(t).map(|p| (*t, [p.x, p.y, p.z])))
        .collect();
    let k_nz = std::num::NonZeroUsize::new(k).unwrap();
    let updates: Vec<(TrackId, Label)> = unknown
        .par_iter()
        .filter_map(|(t, q)| {
            let nn = tree.query(q).nearest_n::<SquaredEuclidean<f64>>(k_nz).execute();
            let first = labeled[nn[0].item as usize].1;
            nn.iter().all(|n| labeled[n.item as usize].1 == first).then_some((*t, first))
        })
        .collect();
    let n = updates.len();
    for (t, l) in updates {
        labels.insert(t, l);
    }
    Some(n)
}

/// Criterion value, straight, union size, then the smaller take id.
type MergeKey = (usize, bool, usize, std::cmp::Reverse<TakeId>);

/// Persisted segmentation result.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub groups: GlobalGroups,
    pub labels: BTreeMap<TrackId, Label>,
}

pub fn format_segmentation(seg: &Segmentation) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "REF {}", seg.groups.reference);
    for (t, crossed) in &seg.groups.order {
        let _ = writeln!(out, "ORDER {t} {}", if *crossed { "crossed" } else { "straight" });
    }
    for t in &seg.groups.unmerged {
        let _ = writeln!(out, "UNMERGED {t}");
    }
    for (g, set) in seg.groups.groups.iter().enumerate() {
        let _ = write!(out, "GGR {} {}", g + 1, set.len());
        for t in set {
            let _ = write!(out, " {t}");
        }
        out.push('\n');
    }
    for (t, l) in &seg.labels {
        let _ = writeln!(out, "LBL {t} {}", l.as_char());
    }
    out
}

pub fn save_segmentation(seg: &Segmentation, path: &Path) -> Result<()> {
    text::write(path, &format_segmentation(seg))
}

pub fn load_segmentation(path: &Path) -> Result<Segmentation> {
    let contents = text::read(path)?;
    let mut reference = None;
    let mut order = Vec::new();
    let mut unmerged = Vec::new();
    let mut groups: [BTreeSet<TrackId>; 2] = Default::default();
    let mut labels = BTreeMap::new();
    for mut line in text::lines(path, &contents) {
        match line.tag() {
            "REF" => {
                reference = Some(line.next::<TakeId>("take id")?);
            }
            "ORDER" => {
                let t: TakeId = line.next("take id")?;
                let kind: String = line.next("merge kind")?;
                let crossed = match kind.as_str() {
                    "straight" => false,
                    "crossed" => true,
                    _ => return Err(line.err(format!("bad merge kind {kind:?}"))),
                };
                order.push((t, crossed));
            }
            "UNMERGED" => unmerged.push(line.next("take id")?),
            "GGR" => {
                let g: usize = line.next("group index")?;
                if !(1..=2).contains(&g) {
                    return Err(line.err(format!("group index {g} not 1 or 2")));
                }
                let n: usize = line.next("count")?;
                for _ in 0..n {
                    groups[g - 1].insert(line.next("track id")?);
                }
            }
            "LBL" => {
                let t: TrackId = line.next("track id")?;
                let s: String = line.next("label")?;
                let l = Label::parse(&s).ok_or_else(|| line.err(format!("bad label {s:?}")))?;
                if labels.insert(t, l).is_some() {
                    return Err(line.err(format!("duplicate label for track {t}")));
                }
            }
            other => return Err(line.err(format!("unknown tag {other}"))),
        }
        line.finish()?;
    }
    let reference = reference.ok_or_else(|| Error::parse(path, 0, "missing REF line"))?;
    Ok(Segmentation { groups: GlobalGroups { reference, groups, order, unmerged }, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracks::Track;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn singleton_tracks(take: TakeId, n: u32) -> TrackSet {
        TrackSet::from_tracks((0..n).map(|i| Track { id: i, members: vec![(take, i)] }).collect())
    }

    fn group_pair(take: TakeId, a: &[u32], b: &[u32], support: usize) -> TakeGroupPair {
        TakeGroupPair { take, groups: [a.iter().copied().collect(), b.iter().copied().collect()], support }
    }

    #[test]
    fn singleton_lift_is_identity() {
        let lifted = lift_to_tracks(&group_pair(1, &[0, 1, 2], &[5, 6], 3), &singleton_tracks(1, 10));
        assert_eq!(lifted.sets, [vec![0, 1, 2], vec![5, 6]]);
    }

    #[test]
    fn lift_majority_and_tie() {
        let tracks = TrackSet::from_tracks(vec![
            Track { id: 0, members: vec![(1, 0), (1, 1), (1, 2)] },
            Track { id: 1, members: vec![(1, 3), (1, 4)] },
        ]);
        let lifted = lift_to_tracks(&group_pair(1, &[0, 1, 3], &[2, 4], 1), &tracks);
        assert_eq!(lifted.sets, [vec![0], vec![]]);
    }

    fn lifted(take: TakeId, a: &[u32], b: &[u32], support: usize) -> LiftedPair {
        LiftedPair { take, sets: [a.to_vec(), b.to_vec()], support }
    }

    #[test]
    fn global_merge_straight_crossed_and_unmerged() {
        let mut pairs = BTreeMap::new();
        pairs.insert(1, lifted(1, &[1, 2, 3], &[10, 11], 5));
        pairs.insert(2, lifted(2, &[2, 3, 4], &[11, 12], 3));
        pairs.insert(3, lifted(3, &[12, 13], &[4, 5], 3));
        pairs.insert(4, lifted(4, &[100], &[200], 1));
        let g = merge_global(&pairs).unwrap();
        assert_eq!(g.reference, 1);
        assert_eq!(g.order, vec![(2, false), (3, true)]);
        assert_eq!(g.unmerged, vec![4]);
        assert_eq!(g.groups[0], [1, 2, 3, 4, 5].into_iter().collect());
        assert_eq!(g.groups[1], [10, 11, 12, 13].into_iter().collect());

        let tracks = TrackSet::from_tracks((0..20).map(|i| Track { id: i, members: vec![(1, i)] }).collect());
        let labels = label_points(&g, &tracks, false);
        assert_eq!(labels[&1], Label::Background);
        assert_eq!(labels[&10], Label::Foreground);
        assert_eq!(labels[&7], Label::Unknown);
        let swapped = label_points(&g, &tracks, true);
        for (t, l) in &labels {
            assert_eq!(swapped[t], l.swapped());
        }
    }

    #[test]
    fn reference_tie_break() {
        let mut pairs = BTreeMap::new();
        pairs.insert(3, lifted(3, &[1, 2], &[3], 4));
        pairs.insert(2, lifted(2, &[1, 2], &[3], 4));
        pairs.insert(1, lifted(1, &[1], &[3], 4));
        assert_eq!(choose_reference(&pairs), Some(2));
    }

    #[test]
    fn knn_unanimous_and_mixed() {
        let mut labels = BTreeMap::new();
        let mut positions = BTreeMap::new();
        for i in 0..10u32 {
            let a = i as f64 * 0.6;
            labels.insert(i, Label::Background);
            positions.insert(i, Vec3::new(a.cos(), a.sin(), 0.0));
        }
        labels.insert(100, Label::Unknown);
        positions.insert(100, Vec3::zeros());
        assert_eq!(knn_propagate(&mut labels, &positions, 10), Some(1));
        assert_eq!(labels[&100], Label::Background);

        labels.insert(9, Label::Foreground);
        labels.insert(100, Label::Unknown);
        assert_eq!(knn_propagate(&mut labels, &positions, 10), Some(0));
        assert_eq!(labels[&100], Label::Unknown);
        assert_eq!(knn_propagate(&mut labels, &positions, 50), None);
    }

    #[test]
    fn knn_erase_and_recover() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut truth = BTreeMap::new();
        let mut positions = BTreeMap::new();
        for i in 0..2000u32 {
            let fg = i % 3 == 0;
            let p = if fg {
                let d =
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                Vec3::new(0.0, 0.0, 0.5) + d.normalize() * 0.35
            } else {
                Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0)
            };
            truth.insert(i, if fg { Label::Foreground } else { Label::Background });
            positions.insert(i, p);
        }
        let mut labels = truth.clone();
        let erased: Vec<u32> = (0..2000).filter(|_| rng.random_bool(0.5)).collect();
        for e in &erased {
            labels.insert(*e, Label::Unknown);
        }
        knn_propagate(&mut labels, &positions, DEFAULT_KNN).unwrap();
        let correct = erased.iter().filter(|e| labels[e] == truth[e]).count();
        let wrong = erased.iter().filter(|e| labels[e] != Label::Unknown && labels[e] != truth[e]).count();
        assert!(correct as f64 >= 0.95 * erased.len() as f64, "{correct}/{}", erased.len());
        assert_eq!(wrong, 0);
        for (t, l) in &truth {
            if !erased.contains(t) {
                assert_eq!(labels[t], *l);
            }
        }
    }

    #[test]
    fn segmentation_round_trip() {
        let seg = Segmentation {
            groups: GlobalGroups {
                reference: 2,
                groups: [[1, 2].into_iter().collect(), [5].into_iter().collect()],
                order: vec![(1, true), (3, false)],
                unmerged: vec![4],
            },
            labels: [(1, Label::Background), (5, Label::Foreground), (7, Label::Unknown)].into_iter().collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("segmentation.txt");
        save_segmentation(&seg, &path).unwrap();
        assert_eq!(load_segmentation(&path).unwrap(), seg);
    }
}
