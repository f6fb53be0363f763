//! Synthetic semidynamic two-body scenes with ground truth.
//!
//! A static background plane with low bumps, and a small spherical
//! foreground object that moves rigidly between takes. Every take is
//! reconstructed in its own scrambled similarity frame, as an independent
//! per-take SfM run would be.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraPose, Intrinsics, RigidMotion, Rotation3, SimilarityTransform, Vec3};
use crate::scene::{
    GroundTruth, Image, Label, MultiTakeScene, Observation, PointId, PointRef, TakeId, TakeModel, TrackId,
};
use crate::tracks::{Track, TrackSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub takes: usize,
    pub background_points: usize,
    pub foreground_points: usize,
    pub cameras_per_take: usize,
    /// Standard deviation of the pixel noise, per axis.
    pub pixel_noise: f64,
    /// Fraction of cross-take links rewired to a wrong point.
    pub outlier_fraction: f64,
    /// Probability that a point inside the image is observed.
    pub visibility: f64,
    /// Upper bound of the foreground rotation angle (radians).
    pub motion_rotation: f64,
    /// Upper bound of the foreground translation (scene units).
    pub motion_translation: f64,
    /// Put every take in a random similarity frame.
    pub scramble: bool,
    pub image_width: u32,
    pub image_height: u32,
    pub focal_length: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            takes: 4,
            background_points: 500,
            foreground_points: 200,
            cameras_per_take: 10,
            pixel_noise: 0.0,
            outlier_fraction: 0.0,
            visibility: 0.7,
            motion_rotation: 0.6,
            motion_translation: 0.4,
            scramble: true,
            image_width: 640,
            image_height: 480,
            focal_length: 600.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.takes < 2 {
            return bad("takes must be >= 2");
        }
        if self.cameras_per_take < 2 {
            return bad("cameras_per_take must be >= 2");
        }
        if !(self.pixel_noise >= 0.0) {
            return bad("pixel_noise must be >= 0");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must be in [0, 1)");
        }
        if !(self.visibility > 0.0 && self.visibility <= 1.0) {
            return bad("visibility must be in (0, 1]");
        }
        if self.background_points + self.foreground_points == 0 {
            return bad("scene has no points");
        }
        if !(self.focal_length > 0.0) || self.image_width == 0 || self.image_height == 0 {
            return bad("camera parameters must be positive");
        }
        if !(self.motion_rotation >= 0.0 && self.motion_translation >= 0.0) {
            return bad("motion magnitudes must be >= 0");
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ground-truth bookkeeping beyond the file format.
#[derive(Clone, Debug, Default)]
pub struct Visibility {
    /// Per image, the physical point index behind every observation.
    pub observed: BTreeMap<u32, Vec<usize>>,
    /// Per take, physical point index -> point id in that take.
    pub point_ids: BTreeMap<TakeId, BTreeMap<usize, PointId>>,
    /// Per physical point, its label.
    pub labels: Vec<Label>,
    /// Cross-take links written, and how many of them were rewired.
    pub cross_links: usize,
    pub rewired_links: usize,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub scene: MultiTakeScene,
    pub ground_truth: GroundTruth,
    pub visibility: Visibility,
    pub warnings: Vec<String>,
}

const OBJECT_CENTER: [f64; 3] = [0.0, 0.0, 0.45];
const OBJECT_RADIUS: f64 = 0.35;
const PLANE_HALF_EXTENT: f64 = 2.0;

fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
    let q: [f64; 4] = Normal::new(0.0, 1.0).map(|n| std::array::from_fn(|_| n.sample(rng))).unwrap();
    Rotation3::from_quaternion(q).canonical()
}

fn look_at(center: &Vec3, target: &Vec3) -> Rotation3 {
    let z = (target - center).normalize();
    let up = Vec3::new(0.0, 0.0, 1.0);
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    let m = crate::geometry::Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Rotation3::project(&m).canonical()
}

fn sample_points(cfg: &SimConfig, rng: &mut impl Rng) -> (Vec<Vec3>, Vec<Label>) {
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    let (f1, f2) = (rng.random_range(1.5..3.0), rng.random_range(1.5..3.0));
    for _ in 0..cfg.background_points {
        let x = rng.random_range(-PLANE_HALF_EXTENT..PLANE_HALF_EXTENT);
        let y = rng.random_range(-PLANE_HALF_EXTENT..PLANE_HALF_EXTENT);
        let z = 0.04 * (f1 * x).sin() * (f2 * y).cos();
        pts.push(Vec3::new(x, y, z));
        labels.push(Label::Background);
    }
    let c = Vec3::from(OBJECT_CENTER);
    for _ in 0..cfg.foreground_points {
        let d: [f64; 3] = UnitSphere.sample(rng);
        let r = OBJECT_RADIUS * rng.random_range(0.9..1.0);
        pts.push(c + Vec3::from(d) * r);
        labels.push(Label::Foreground);
    }
    (pts, labels)
}

/// Foreground motion about the object center: rotation angle and planar
/// translation length are drawn from `[0.5, 1]` times the configured bounds.
fn sample_motion(cfg: &SimConfig, rng: &mut impl Rng) -> RigidMotion {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = cfg.motion_rotation * rng.random_range(0.5..1.0);
    let rot = Rotation3::from_axis_angle(&(Vec3::from(axis) * angle)).canonical();
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let shift = Vec3::new(phi.cos(), phi.sin(), 0.0) * cfg.motion_translation * rng.random_range(0.5..1.0);
    let c = Vec3::from(OBJECT_CENTER);
    RigidMotion::new(rot, c + shift - rot.apply(&c))
}

/// Generates a scene and its ground truth. Pure function of the config.
pub fn generate(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (initial, labels) = sample_points(cfg, &mut rng);
    let n = initial.len();
    let take_ids: Vec<TakeId> = (1..=cfg.takes as TakeId).collect();
    let intrinsics = Intrinsics::new(
        cfg.focal_length,
        cfg.focal_length,
        cfg.image_width as f64 / 2.0,
        cfg.image_height as f64 / 2.0,
    );
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).unwrap();

    let mut gt = GroundTruth::default();
    let mut positions: BTreeMap<TakeId, Vec<Vec3>> = BTreeMap::new();
    for &t in &take_ids {
        let motion = if t == 1 { RigidMotion::identity() } else { sample_motion(cfg, &mut rng) };
        let scramble = if cfg.scramble {
            let rot = random_rotation(&mut rng);
            let b = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            SimilarityTransform::new(rot, b, rng.random_range(0.5..2.0))
        } else {
            SimilarityTransform::identity()
        };
        let pos = initial
            .iter()
            .zip(&labels)
            .map(|(x, l)| if *l == Label::Foreground { motion.apply(x) } else { *x })
            .collect();
        positions.insert(t, pos);
        gt.motions.insert(t, motion);
        gt.similarities.insert(t, scramble);
    }

    // cameras and raw visibility, world frame
    let mut next_image = 1u32;
    let mut cams: BTreeMap<TakeId, Vec<(u32, CameraPose, Vec<usize>)>> = BTreeMap::new();
    for &t in &take_ids {
        let m = cfg.cameras_per_take;
        let offset = rng.random_range(0.0..std::f64::consts::TAU);
        let target_base = gt.motions[&t].apply(&Vec3::from(OBJECT_CENTER));
        let mut list = Vec::with_capacity(m);
        for j in 0..m {
            let az = offset + std::f64::consts::TAU * (j as f64 + rng.random_range(-0.3..0.3)) / m as f64;
            let el = rng.random_range(0.45..0.85f64);
            let dist = rng.random_range(3.0..4.0);
            let target = target_base
                + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            let center = target + Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * dist;
            let pose = CameraPose::new(intrinsics, look_at(&center, &target), center);
            let mut seen = Vec::new();
            for (i, x) in positions[&t].iter().enumerate() {
                let Ok(p) = project(&pose, x) else { continue };
                let inside = p.x >= 0.0
                    && p.y >= 0.0
                    && p.x < cfg.image_width as f64
                    && p.y < cfg.image_height as f64
                    && pose.to_camera(x).z > 0.1;
                if inside && rng.random::<f64>() < cfg.visibility {
                    seen.push(i);
                }
            }
            list.push((next_image, pose, seen));
            next_image += 1;
        }
        cams.insert(t, list);
    }

    // per-take reconstructions keep points seen by at least two cameras
    let mut vis = Visibility { labels: labels.clone(), ..Default::default() };
    let mut takes = Vec::new();
    for &t in &take_ids {
        let mut count = vec![0usize; n];
        for (_, _, seen) in &cams[&t] {
            for &i in seen {
                count[i] += 1;
            }
        }
        let mut ids: Vec<PointId> = (1..=n as PointId).collect();
        ids.shuffle(&mut rng);
        let s = gt.similarities[&t];
        let mut take = TakeModel { id: t, ..Default::default() };
        take.cameras.insert(1, intrinsics);
        let mut map = BTreeMap::new();
        for i in 0..n {
            if count[i] >= 2 {
                map.insert(i, ids[i]);
                take.points.insert(ids[i], s.apply(&positions[&t][i]));
                gt.labels.insert((t, ids[i]), labels[i]);
            }
        }
        vis.point_ids.insert(t, map);
        takes.push(take);
    }

    for (ti, &t) in take_ids.iter().enumerate() {
        let s = gt.similarities[&t];
        for (img_id, pose, seen) in &cams[&t] {
            let mut observations = Vec::with_capacity(seen.len());
            for &i in seen {
                let clean = project(pose, &positions[&t][i]).expect("visible point in front");
                let pixel = if cfg.pixel_noise > 0.0 {
                    clean + crate::geometry::Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    clean
                };
                let mut links = Vec::new();
                for &u in &take_ids {
                    let Some(&pid) = vis.point_ids[&u].get(&i) else { continue };
                    if u == t {
                        links.push((u, pid));
                        continue;
                    }
                    vis.cross_links += 1;
                    if rng.random::<f64>() < cfg.outlier_fraction {
                        let others: Vec<PointId> = takes[take_ids.iter().position(|x| *x == u).unwrap()]
                            .points
                            .keys()
                            .copied()
                            .filter(|p| *p != pid)
                            .collect();
                        if let Some(&wrong) = others.get(rng.random_range(0..others.len().max(1))) {
                            links.push((u, wrong));
                            vis.rewired_links += 1;
                            continue;
                        }
                    }
                    links.push((u, pid));
                }
                observations.push(Observation { pixel, links });
            }
            vis.observed.insert(*img_id, seen.clone());
            let local = pose.transported(&s);
            let local = CameraPose::new(local.intrinsics, local.rotation.canonical(), local.center);
            takes[ti].images.insert(*img_id, Image { id: *img_id, cam_id: 1, pose: local, observations });
            gt.poses.insert(*img_id, *pose);
        }
    }

    let scene = MultiTakeScene { takes };
    let mut warnings = Vec::new();
    for &s in &take_ids {
        for &t in &take_ids {
            if s == t {
                continue;
            }
            let links: usize = scene
                .take(s)
                .unwrap()
                .images
                .values()
                .flat_map(|img| img.observations.iter())
                .filter(|o| o.link_to(t).is_some())
                .count();
            if links < 4 {
                warnings.push(format!("take {s} has only {links} correspondences toward take {t}"));
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SimOutput { scene, ground_truth: gt, visibility: vis, warnings })
}

/// Tracks and labels straight from the simulator's point identities; one
/// track per physical point, ids in order of the smallest member.
pub fn ground_truth_tracks(out: &SimOutput) -> (TrackSet, BTreeMap<TrackId, Label>) {
    let mut members: BTreeMap<usize, Vec<PointRef>> = BTreeMap::new();
    for (take, ids) in &out.visibility.point_ids {
        for (phys, p) in ids {
            members.entry(*phys).or_default().push((*take, *p));
        }
    }
    let mut list: Vec<(usize, Vec<PointRef>)> = members
        .into_iter()
        .map(|(phys, mut m)| {
            m.sort_unstable();
            (phys, m)
        })
        .collect();
    list.sort_by(|a, b| a.1.cmp(&b.1));
    let mut labels = BTreeMap::new();
    let tracks = list
        .into_iter()
        .enumerate()
        .map(|(i, (phys, members))| {
            labels.insert(i as TrackId, out.visibility.labels[phys]);
            Track { id: i as TrackId, members }
        })
        .collect();
    (TrackSet::from_tracks(tracks), labels)
}
