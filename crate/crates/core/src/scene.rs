//! Per-take reconstructions, cross-take links, the merged labeled scene, and
//! the on-disk scene directory format.
//!
//! Layout of a scene directory:
//!
//! ```text
//! take_<t>/cameras.txt   CAM <cam_id> <fx> <fy> <cx> <cy>
//! take_<t>/images.txt    IMG <img_id> <cam_id> <qw> <qx> <qy> <qz> <cx> <cy> <cz>
//!                        OBS <px> <py> <n> { <take_id> <point_id> }xn
//! take_<t>/points.txt    PT <point_id> <x> <y> <z>
//! ground_truth.txt       GTL / GTM / GTS / GTP lines (optional)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, RigidMotion, SimilarityTransform, Vec2, Vec3};
use crate::text::{self, push_quaternion, push_vec3};

pub type TakeId = u32;
pub type PointId = u32;
pub type ImageId = u32;
pub type CamId = u32;
pub type TrackId = u32;

/// Per-take point reference `(take, point)`.
pub type PointRef = (TakeId, PointId);

/// One 2D feature and the per-take 3D points it is matched to.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub pixel: Vec2,
    pub links: Vec<PointRef>,
}

impl Observation {
    pub fn is_matched(&self) -> bool {
        !self.links.is_empty()
    }

    pub fn link_to(&self, take: TakeId) -> Option<PointId> {
        self.links.iter().find(|(t, _)| *t == take).map(|(_, p)| *p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub id: ImageId,
    pub cam_id: CamId,
    pub pose: CameraPose,
    pub observations: Vec<Observation>,
}

/// One take's reconstruction, in that take's own coordinate frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TakeModel {
    pub id: TakeId,
    pub cameras: BTreeMap<CamId, Intrinsics>,
    pub images: BTreeMap<ImageId, Image>,
    pub points: BTreeMap<PointId, Vec3>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MultiTakeScene {
    pub takes: Vec<TakeModel>,
}

/// A 2D-3D match of an image toward one take.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub pixel: Vec2,
    pub point: PointId,
    pub position: Vec3,
    pub obs_index: usize,
}

impl MultiTakeScene {
    pub fn take(&self, id: TakeId) -> Option<&TakeModel> {
        self.takes.iter().find(|t| t.id == id)
    }

    pub fn take_ids(&self) -> Vec<TakeId> {
        self.takes.iter().map(|t| t.id).collect()
    }

    /// The take an image belongs to, and the image.
    pub fn image(&self, id: ImageId) -> Option<(TakeId, &Image)> {
        self.takes.iter().find_map(|t| t.images.get(&id).map(|img| (t.id, img)))
    }

    /// All `(take, image id)` pairs in take then image order.
    pub fn image_ids(&self) -> Vec<(TakeId, ImageId)> {
        self.takes.iter().flat_map(|t| t.images.keys().map(move |i| (t.id, *i))).collect()
    }

    /// Every feature of `image` linked to a point of `target`, at most once per feature.
    pub fn correspondences(&self, image: ImageId, target: TakeId) -> Result<Vec<Correspondence>> {
        let (_, img) = self.image(image).ok_or(Error::UnknownImage(image))?;
        let take = self.take(target).ok_or_else(|| Error::Integrity(format!("unknown take {target}")))?;
        let mut out = Vec::new();
        for (obs_index, obs) in img.observations.iter().enumerate() {
            if let Some(point) = obs.link_to(target) {
                let position = *take.points.get(&point).ok_or_else(|| {
                    Error::Integrity(format!("image {image} links missing point {point} of take {target}"))
                })?;
                out.push(Correspondence { pixel: obs.pixel, point, position, obs_index });
            }
        }
        Ok(out)
    }

    /// Checks ids, links and camera references.
    pub fn validate(&self) -> Result<()> {
        let mut takes = BTreeSet::new();
        let mut images = BTreeSet::new();
        for t in &self.takes {
            if !takes.insert(t.id) {
                return Err(Error::Integrity(format!("duplicate take id {}", t.id)));
            }
            for id in t.images.keys() {
                if !images.insert(*id) {
                    return Err(Error::Integrity(format!("image id {id} used by two takes")));
                }
            }
        }
        for t in &self.takes {
            for img in t.images.values() {
                let cam = t.cameras.get(&img.cam_id).ok_or_else(|| {
                    Error::Integrity(format!("image {} references missing camera {}", img.id, img.cam_id))
                })?;
                if *cam != img.pose.intrinsics {
                    return Err(Error::Integrity(format!(
                        "image {} intrinsics differ from camera {}",
                        img.id, img.cam_id
                    )));
                }
                for obs in &img.observations {
                    let mut seen = BTreeSet::new();
                    for (lt, lp) in &obs.links {
                        if !seen.insert(*lt) {
                            return Err(Error::Integrity(format!("image {} has duplicate link take {lt}", img.id)));
                        }
                        let target = self
                            .take(*lt)
                            .ok_or_else(|| Error::Integrity(format!("image {} links unknown take {lt}", img.id)))?;
                        if !target.points.contains_key(lp) {
                            return Err(Error::Integrity(format!(
                                "image {} links missing point {lp} of take {lt}",
                                img.id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Bounding-box diagonal of one take's points, in that take's frame.
    pub fn take_diameter(&self, take: TakeId) -> f64 {
        self.take(take).map(|t| bounding_diameter(t.points.values())).unwrap_or(0.0)
    }
}

pub fn bounding_diameter<'a>(points: impl Iterator<Item = &'a Vec3>) -> f64 {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
        any = true;
    }
    if any {
        (hi - lo).norm()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Background,
    Foreground,
    Unknown,
}

impl Label {
    pub fn as_char(self) -> char {
        match self {
            Label::Background => 'B',
            Label::Foreground => 'F',
            Label::Unknown => 'U',
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "B" => Some(Label::Background),
            "F" => Some(Label::Foreground),
            "U" => Some(Label::Unknown),
            _ => None,
        }
    }

    /// B <-> F, U unchanged.
    pub fn swapped(self) -> Label {
        match self {
            Label::Background => Label::Foreground,
            Label::Foreground => Label::Background,
            Label::Unknown => Label::Unknown,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedObservation {
    pub pixel: Vec2,
    pub track: Option<TrackId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedImage {
    pub id: ImageId,
    pub take: TakeId,
    pub cam_id: CamId,
    pub background_pose: CameraPose,
    pub foreground_pose: CameraPose,
    pub observations: Vec<MergedObservation>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergedPoint {
    pub position: Vec3,
    pub label: Label,
}

/// The merged two-body model in the reference take's frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabeledScene {
    pub reference: TakeId,
    pub points: BTreeMap<TrackId, MergedPoint>,
    pub images: BTreeMap<ImageId, MergedImage>,
    /// Foreground motion from the reference configuration to each take.
    pub motions: BTreeMap<TakeId, RigidMotion>,
}

/// Foreground-facing pose of a camera from its background-facing pose under
/// the take's foreground motion `(A, a)`: `R_F = R_B A`, `c_F = A^-1 (c_B - a)`.
pub fn foreground_pose(background: &CameraPose, motion: &RigidMotion) -> CameraPose {
    CameraPose::new(
        background.intrinsics,
        background.rotation.mul(&motion.rotation),
        motion.rotation.inverse().apply(&(background.center - motion.translation)),
    )
}

impl LabeledScene {
    pub fn motion(&self, take: TakeId) -> RigidMotion {
        self.motions.get(&take).copied().unwrap_or_default()
    }

    /// Recomputes every foreground pose from the background pose and motion.
    pub fn refresh_foreground_poses(&mut self) {
        let motions = self.motions.clone();
        for img in self.images.values_mut() {
            let m = motions.get(&img.take).copied().unwrap_or_default();
            img.foreground_pose = foreground_pose(&img.background_pose, &m);
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.points.values().filter(|p| p.label == label).count()
    }

    /// Reprojection errors of all observations of B- or F-labeled points.
    pub fn labeled_reprojection_errors(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for img in self.images.values() {
            for obs in &img.observations {
                let Some(point) = obs.track.and_then(|t| self.points.get(&t)) else { continue };
                let pose = match point.label {
                    Label::Background => &img.background_pose,
                    Label::Foreground => &img.foreground_pose,
                    Label::Unknown => continue,
                };
                if let Ok(p) = crate::geometry::project(pose, &point.position) {
                    out.push((p - obs.pixel).norm());
                }
            }
        }
        out
    }
}

/// Simulator ground truth.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GroundTruth {
    pub labels: BTreeMap<PointRef, Label>,
    /// Foreground motion from the initial configuration (take 1) to each take, world frame.
    pub motions: BTreeMap<TakeId, RigidMotion>,
    /// Change of coordinates from the world frame to each take's frame.
    pub similarities: BTreeMap<TakeId, SimilarityTransform>,
    /// World-frame camera poses.
    pub poses: BTreeMap<ImageId, CameraPose>,
}

// ---------------------------------------------------------------------------
// Text I/O

fn take_dir(root: &Path, take: TakeId) -> std::path::PathBuf {
    root.join(format!("take_{take}"))
}

pub fn format_take(take: &TakeModel) -> (String, String, String) {
    let mut cams = String::new();
    for (id, k) in &take.cameras {
        let _ = writeln!(cams, "CAM {id} {} {} {} {}", k.fx, k.fy, k.cx, k.cy);
    }
    let mut imgs = String::new();
    for img in take.images.values() {
        let _ = write!(imgs, "IMG {} {}", img.id, img.cam_id);
        push_quaternion(&mut imgs, &img.pose.rotation);
        push_vec3(&mut imgs, &img.pose.center);
        imgs.push('\n');
        for obs in &img.observations {
            let _ = write!(imgs, "OBS {} {} {}", obs.pixel.x, obs.pixel.y, obs.links.len());
            for (t, p) in &obs.links {
                let _ = write!(imgs, " {t} {p}");
            }
            imgs.push('\n');
        }
    }
    let mut pts = String::new();
    for (id, x) in &take.points {
        let _ = write!(pts, "PT {id}");
        push_vec3(&mut pts, x);
        pts.push('\n');
    }
    (cams, imgs, pts)
}

pub fn save_take(take: &TakeModel, dir: &Path) -> Result<()> {
    let (cams, imgs, pts) = format_take(take);
    text::write(&dir.join("cameras.txt"), &cams)?;
    text::write(&dir.join("images.txt"), &imgs)?;
    text::write(&dir.join("points.txt"), &pts)
}

pub fn save_scene(scene: &MultiTakeScene, root: &Path) -> Result<()> {
    for take in &scene.takes {
        save_take(take, &take_dir(root, take.id))?;
    }
    Ok(())
}

/// Parses one take directory. Links are not checked here.
pub fn load_take(dir: &Path, id: TakeId) -> Result<TakeModel> {
    let mut take = TakeModel { id, ..Default::default() };

    let path = dir.join("cameras.txt");
    let content = text::read(&path)?;
    for mut line in text::lines(&path, &content) {
        if line.tag() != "CAM" {
            return Err(line.err(format!("unexpected tag {}", line.tag())));
        }
        let cam: CamId = line.next("cam_id")?;
        let k = Intrinsics::new(line.next("fx")?, line.next("fy")?, line.next("cx")?, line.next("cy")?);
        line.finish()?;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(line.err("focal lengths must be positive"));
        }
        if take.cameras.insert(cam, k).is_some() {
            return Err(line.err(format!("duplicate camera {cam}")));
        }
    }

    let path = dir.join("points.txt");
    let content = text::read(&path)?;
    for mut line in text::lines(&path, &content) {
        if line.tag() != "PT" {
            return Err(line.err(format!("unexpected tag {}", line.tag())));
        }
        let id: PointId = line.next("point_id")?;
        let x = line.vec3("coordinate")?;
        line.finish()?;
        if take.points.insert(id, x).is_some() {
            return Err(line.err(format!("duplicate point {id}")));
        }
    }

    let path = dir.join("images.txt");
    let content = text::read(&path)?;
    let mut current: Option<Image> = None;
    for mut line in text::lines(&path, &content) {
        match line.tag() {
            "IMG" => {
                if let Some(img) = current.take() {
                    take.images.insert(img.id, img);
                }
                let id: ImageId = line.next("img_id")?;
                let cam_id: CamId = line.next("cam_id")?;
                let rotation = line.quaternion()?;
                let center = line.vec3("center")?;
                line.finish()?;
                let intrinsics =
                    *take.cameras.get(&cam_id).ok_or_else(|| line.err(format!("unknown camera {cam_id}")))?;
                if take.images.contains_key(&id) {
                    return Err(line.err(format!("duplicate image {id}")));
                }
                current = Some(Image {
                    id,
                    cam_id,
                    pose: CameraPose::new(intrinsics, rotation, center),
                    observations: Vec::new(),
                });
            }
            "OBS" => {
                let pixel = Vec2::new(line.next("px")?, line.next("py")?);
                let n: usize = line.next("n")?;
                if line.remaining() != 2 * n {
                    return Err(line.err(format!("expected {n} links")));
                }
                let mut links = Vec::with_capacity(n);
                for _ in 0..n {
                    links.push((line.next("take_id")?, line.next("point_id")?));
                }
                let img = current.as_mut().ok_or_else(|| line.err("OBS before any IMG"))?;
                img.observations.push(Observation { pixel, links });
            }
            other => return Err(line.err(format!("unexpected tag {other}"))),
        }
    }
    if let Some(img) = current.take() {
        take.images.insert(img.id, img);
    }
    Ok(take)
}

/// Loads every `take_<t>` directory under `root` and checks referential integrity.
pub fn load_scene(root: &Path) -> Result<MultiTakeScene> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name();
        let Some(rest) = name.to_str().and_then(|n| n.strip_prefix("take_")) else { continue };
        if entry.path().is_dir() {
            if let Ok(id) = rest.parse::<TakeId>() {
                ids.push(id);
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::NoTakes(root.to_path_buf()));
    }
    ids.sort_unstable();
    let takes = ids.iter().map(|id| load_take(&take_dir(root, *id), *id)).collect::<Result<Vec<_>>>()?;
    let scene = MultiTakeScene { takes };
    scene.validate()?;
    Ok(scene)
}

pub fn format_ground_truth(gt: &GroundTruth) -> String {
    let mut out = String::new();
    for ((t, p), l) in &gt.labels {
        let _ = writeln!(out, "GTL {t} {p} {}", l.as_char());
    }
    for (t, m) in &gt.motions {
        let _ = write!(out, "GTM {t}");
        push_quaternion(&mut out, &m.rotation);
        push_vec3(&mut out, &m.translation);
        out.push('\n');
    }
    for (t, s) in &gt.similarities {
        let _ = write!(out, "GTS {t}");
        push_quaternion(&mut out, &s.rotation);
        push_vec3(&mut out, &s.translation);
        let _ = writeln!(out, " {}", s.scale);
    }
    for (i, pose) in &gt.poses {
        let _ = write!(out, "GTP {i}");
        push_quaternion(&mut out, &pose.rotation);
        push_vec3(&mut out, &pose.center);
        let k = pose.intrinsics;
        let _ = writeln!(out, " {} {} {} {}", k.fx, k.fy, k.cx, k.cy);
    }
    out
}

pub fn save_ground_truth(gt: &GroundTruth, path: &Path) -> Result<()> {
    text::write(path, &format_ground_truth(gt))
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let content = text::read(path)?;
    let mut gt = GroundTruth::default();
    for mut line in text::lines(path, &content) {
        match line.tag() {
            "GTL" => {
                let t: TakeId = line.next("take_id")?;
                let p: PointId = line.next("point_id")?;
                let s: String = line.next("label")?;
                let l = match Label::parse(&s) {
                    Some(l @ (Label::Background | Label::Foreground)) => l,
                    _ => return Err(line.err(format!("bad label {s}"))),
                };
                gt.labels.insert((t, p), l);
            }
            "GTM" => {
                let t: TakeId = line.next("take_id")?;
                let r = line.quaternion()?;
                let a = line.vec3("translation")?;
                gt.motions.insert(t, RigidMotion::new(r, a));
            }
            "GTS" => {
                let t: TakeId = line.next("take_id")?;
                let r = line.quaternion()?;
                let b = line.vec3("translation")?;
                let s: f64 = line.next("scale")?;
                if !(s > 0.0) {
                    return Err(line.err("scale must be positive"));
                }
                gt.similarities.insert(t, SimilarityTransform::new(r, b, s));
            }
            "GTP" => {
                let i: ImageId = line.next("img_id")?;
                let r = line.quaternion()?;
                let c = line.vec3("center")?;
                let k = Intrinsics::new(line.next("fx")?, line.next("fy")?, line.next("cx")?, line.next("cy")?);
                gt.poses.insert(i, CameraPose::new(k, r, c));
            }
            other => return Err(line.err(format!("unexpected tag {other}"))),
        }
        line.finish()?;
    }
    Ok(gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation3;

    fn fixture(dir: &Path) {
        let t = dir.join("take_1");
        fs::create_dir_all(&t).unwrap();
        fs::write(t.join("cameras.txt"), "# cams\nCAM 1 500 500 320 240\n").unwrap();
        fs::write(
            t.join("images.txt"),
            "IMG 10 1 1 0 0 0 0 0 -5\nOBS 320 240 1 1 7\nIMG 11 1 1 0 0 0 1 0 -5\nOBS 220 240 1 1 7\n",
        )
        .unwrap();
        fs::write(t.join("points.txt"), "PT 7 0 0 0\n").unwrap();
    }

    #[test]
    fn empty_directory_has_no_takes() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_scene(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no takes found"), "{err}");
    }

    #[test]
    fn minimal_fixture_counts() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let scene = load_scene(dir.path()).unwrap();
        assert_eq!(scene.takes.len(), 1);
        assert_eq!(scene.takes[0].points.len(), 1);
        assert_eq!(scene.takes[0].images.len(), 2);
    }

    #[test]
    fn malformed_line_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::write(dir.path().join("take_1/points.txt"), "PT 7 0 0 0\nPT 8 0 zero 0\n").unwrap();
        match load_scene(dir.path()).unwrap_err() {
            Error::Parse { file, line, .. } => {
                assert!(file.ends_with("points.txt"));
                assert_eq!(line, 2);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dangling_link_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::write(dir.path().join("take_1/images.txt"), "IMG 10 1 1 0 0 0 0 0 -5\nOBS 1 2 1 1 99\n").unwrap();
        assert!(matches!(load_scene(dir.path()).unwrap_err(), Error::Integrity(_)));
    }

    fn two_take_scene() -> MultiTakeScene {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
        let pose = CameraPose::new(k, Rotation3::identity(), Vec3::new(0.0, 0.0, -5.0));
        let mut takes = Vec::new();
        for t in [1u32, 2] {
            let mut take = TakeModel { id: t, ..Default::default() };
            take.cameras.insert(1, k);
            take.points.insert(1, Vec3::new(0.0, 0.0, 0.0));
            take.points.insert(2, Vec3::new(1.0, 0.0, 0.0));
            let observations = if t == 1 {
                vec![
                    Observation { pixel: Vec2::new(1.0, 2.0), links: vec![(1, 1)] },
                    Observation { pixel: Vec2::new(3.0, 4.0), links: vec![(1, 2), (2, 1)] },
                    Observation { pixel: Vec2::new(5.0, 6.0), links: vec![] },
                ]
            } else {
                vec![]
            };
            take.images.insert(t * 10, Image { id: t * 10, cam_id: 1, pose, observations });
            takes.push(take);
        }
        MultiTakeScene { takes }
    }

    #[test]
    fn correspondences_filter_by_target_take() {
        let scene = two_take_scene();
        let to2 = scene.correspondences(10, 2).unwrap();
        assert_eq!(to2.len(), 1);
        assert_eq!((to2[0].point, to2[0].obs_index), (1, 1));
        let to1 = scene.correspondences(10, 1).unwrap();
        assert_eq!(to1.len(), 2);
        assert!(matches!(scene.correspondences(99, 1), Err(Error::UnknownImage(99))));
    }

    #[test]
    fn save_load_round_trip() {
        let mut scene = two_take_scene();
        for t in &mut scene.takes {
            for img in t.images.values_mut() {
                img.pose.rotation = Rotation3::from_axis_angle(&Vec3::new(0.1, 0.2, 0.3)).canonical();
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path()).unwrap();
        assert_eq!(load_scene(dir.path()).unwrap(), scene);
    }

    #[test]
    fn foreground_pose_relation() {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
        let bg = CameraPose::new(k, Rotation3::from_axis_angle(&Vec3::new(0.1, -0.2, 0.05)), Vec3::new(0.5, 0.1, -4.0));
        let m = RigidMotion::new(Rotation3::from_axis_angle(&Vec3::new(0.0, 0.3, 0.1)), Vec3::new(0.2, 0.0, 0.1));
        let fg = foreground_pose(&bg, &m);
        let x = Vec3::new(0.1, 0.2, 0.3);
        let a = crate::geometry::project(&bg, &m.apply(&x)).unwrap();
        let b = crate::geometry::project(&fg, &x).unwrap();
        assert!((a - b).norm() < 1e-9);
    }
}
