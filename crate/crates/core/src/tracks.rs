//! Cross-take point identities: a graph over `(take, point)` vertices whose
//! connected components are tracks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use petgraph::unionfind::UnionFind;

use crate::error::{Error, Result};
use crate::registration::Registrations;
use crate::scene::{MultiTakeScene, PointRef, TakeId, TrackId};
use crate::text;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackGraph {
    /// Sorted vertex list.
    pub vertices: Vec<PointRef>,
    /// Edges as index pairs into `vertices`, `a < b`, sorted and unique.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Track {
    pub id: TrackId,
    /// Sorted members.
    pub members: Vec<PointRef>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    pub of: BTreeMap<PointRef, TrackId>,
}

impl TrackSet {
    pub fn from_tracks(tracks: Vec<Track>) -> Self {
        let mut of = BTreeMap::new();
        for t in &tracks {
            for m in &t.members {
                of.insert(*m, t.id);
            }
        }
        Self { tracks, of }
    }

    pub fn get(&self, id: TrackId) -> Option<&Track> {
        self.tracks.get(id as usize).filter(|t| t.id == id)
    }

    pub fn track_of(&self, p: PointRef) -> Option<TrackId> {
        self.of.get(&p).copied()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

impl TrackGraph {
    pub fn new(vertices: impl IntoIterator<Item = PointRef>) -> Self {
        let set: BTreeSet<PointRef> = vertices.into_iter().collect();
        Self { vertices: set.into_iter().collect(), edges: Vec::new() }
    }

    fn index(&self, p: PointRef) -> Option<usize> {
        self.vertices.binary_search(&p).ok()
    }

    /// Adds an edge between points of different takes; returns `false` when
    /// either vertex is unknown or both lie in the same take.
    pub fn add_edge(&mut self, a: PointRef, b: PointRef) -> bool {
        if a.0 == b.0 {
            return false;
        }
        let (Some(i), Some(j)) = (self.index(a), self.index(b)) else { return false };
        self.edges.push((i.min(j), i.max(j)));
        true
    }

    fn normalize(&mut self) {
        self.edges.sort_unstable();
        self.edges.dedup();
    }
}

/// Connects the points linked by one observation. A link enters the graph only
/// when it is verified: the link into the observation's own take, or a link
/// that is an inlier of some registered pose of that image toward that take.
pub fn build_graph(scene: &MultiTakeScene, regs: &Registrations) -> TrackGraph {
    let mut graph = TrackGraph::new(scene.takes.iter().flat_map(|t| t.points.keys().map(move |p| (t.id, *p))));
    let mut verified: BTreeMap<(u32, usize), Vec<PointRef>> = BTreeMap::new();
    for ((image, target), poses) in regs {
        for pose in poses {
            for (point, obs) in &pose.inliers {
                verified.entry((*image, *obs)).or_default().push((*target, *point));
            }
        }
    }
    for take in &scene.takes {
        for img in take.images.values() {
            for (k, obs) in img.observations.iter().enumerate() {
                let mut members: Vec<PointRef> = obs.link_to(take.id).map(|p| (take.id, p)).into_iter().collect();
                if let Some(v) = verified.get(&(img.id, k)) {
                    members.extend(v.iter().filter(|m| obs.links.contains(m)));
                }
                for w in members.windows(2) {
                    graph.add_edge(w[0], w[1]);
                }
            }
        }
    }
    graph.normalize();
    graph
}

/// Component label of each vertex `0..n`: the smallest vertex index in its
/// component.
pub fn component_labels(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut uf = UnionFind::<usize>::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    let roots = uf.into_labeling();
    let mut smallest: BTreeMap<usize, usize> = BTreeMap::new();
    for (v, r) in roots.iter().enumerate() {
        smallest.entry(*r).or_insert(v);
    }
    roots.iter().map(|r| smallest[r]).collect()
}

/// Tracks as connected components; ids follow the smallest member in
/// `(take, point)` order.
pub fn connected_components(graph: &TrackGraph) -> TrackSet {
    let labels = component_labels(graph.vertices.len(), &graph.edges);
    let mut groups: BTreeMap<usize, Vec<PointRef>> = BTreeMap::new();
    for (v, l) in labels.iter().enumerate() {
        groups.entry(*l).or_default().push(graph.vertices[v]);
    }
    // vertices are sorted, so the smallest vertex index is the smallest member
    let tracks = groups.into_values().enumerate().map(|(i, members)| Track { id: i as TrackId, members }).collect();
    TrackSet::from_tracks(tracks)
}

pub fn format_tracks(tracks: &TrackSet) -> String {
    let mut out = String::new();
    for t in &tracks.tracks {
        let _ = write!(out, "TRK {} {}", t.id, t.members.len());
        for (take, p) in &t.members {
            let _ = write!(out, " {take} {p}");
        }
        out.push('\n');
    }
    out
}

pub fn save_tracks(tracks: &TrackSet, path: &Path) -> Result<()> {
    text::write(path, &format_tracks(tracks))
}

pub fn load_tracks(path: &Path) -> Result<TrackSet> {
    let contents = text::read(path)?;
    let mut tracks = Vec::new();
    let mut seen = BTreeSet::new();
    for mut line in text::lines(path, &contents) {
        if line.tag() != "TRK" {
            return Err(line.err(format!("unknown tag {}", line.tag())));
        }
        let id: TrackId = line.next("track id")?;
        if id as usize != tracks.len() {
            return Err(line.err(format!("track id {id} out of sequence")));
        }
        let n: usize = line.next("member count")?;
        let mut members = Vec::with_capacity(n);
        for _ in 0..n {
            let take: TakeId = line.next("take id")?;
            let point = line.next("point id")?;
            if !seen.insert((take, point)) {
                return Err(line.err(format!("point ({take}, {point}) in two tracks")));
            }
            members.push((take, point));
        }
        line.finish()?;
        members.sort_unstable();
        tracks.push(Track { id, members });
    }
    Ok(TrackSet::from_tracks(tracks))
}

/// Checks that every point of the scene belongs to exactly one track.
pub fn check_covers(tracks: &TrackSet, scene: &MultiTakeScene) -> Result<()> {
    for take in &scene.takes {
        for p in take.points.keys() {
            if !tracks.of.contains_key(&(take.id, *p)) {
                return Err(Error::Integrity(format!("point ({}, {p}) missing from tracks", take.id)));
            }
        }
    }
    Ok(())
}
