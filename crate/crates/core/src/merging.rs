//! Similarity estimation between takes, model and camera transport into the
//! reference frame, and assembly of the merged labeled scene.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, GeometryError, Result};
use crate::geometry::{
    rotation_geodesic_distance, CameraPose, Mat3, RigidMotion, Rotation3, SimilarityTransform, Vec3,
};
use crate::grouping::foreground_motion_from_pair;
use crate::registration::Registrations;
use crate::scene::{
    bounding_diameter, foreground_pose, CamId, Image, ImageId, Label, LabeledScene, MergedImage, MergedObservation,
    MergedPoint, MultiTakeScene, PointRef, TakeId, TakeModel, TrackId,
};
use crate::text;
use crate::tracks::TrackSet;

/// Least-squares similarity `dst ~ scale * R src + t` (closed form with
/// centroid subtraction, covariance SVD, reflection fix, variance-ratio scale).
pub fn similarity_from_points(src: &[Vec3], dst: &[Vec3]) -> std::result::Result<SimilarityTransform, GeometryError> {
    align(src, dst, true)
}

/// As [`similarity_from_points`] with the scale fixed to one.
pub fn rigid_from_points(src: &[Vec3], dst: &[Vec3]) -> std::result::Result<RigidMotion, GeometryError> {
    align(src, dst, false).map(|s| s.rigid_part())
}

fn align(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> std::result::Result<SimilarityTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::Degenerate(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::Degenerate(format!("{n} correspondences, need 3")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src.iter().sum::<Vec3>() * inv_n;
    let mu_d = dst.iter().sum::<Vec3>() * inv_n;
    let mut cov = Mat3::zeros();
    let mut scatter = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (ds, dd) = (s - mu_s, d - mu_d);
        cov += dd * ds.transpose();
        scatter += ds * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;
    let eig = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = eig.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(GeometryError::Degenerate("collinear or coincident points".into()));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut signs = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        signs.z = -1.0;
    }
    let rot = u * Mat3::from_diagonal(&signs) * v_t;
    let scale = if with_scale { svd.singular_values.dot(&signs) / var_s } else { 1.0 };
    if !(scale > 0.0) {
        return Err(GeometryError::Degenerate("non-positive scale".into()));
    }
    let rotation = Rotation3::project(&rot);
    let translation = mu_d - scale * rotation.apply(&mu_s);
    Ok(SimilarityTransform::new(rotation, translation, scale))
}

/// Fit on all correspondences, drop those whose residual exceeds three times
/// the median (plus a tiny absolute floor), refit. Returns the transform and
/// the number of correspondences kept.
fn trimmed_fit(
    src: &[Vec3],
    dst: &[Vec3],
    with_scale: bool,
    floor: f64,
) -> std::result::Result<(SimilarityTransform, usize), GeometryError> {
    let mut s = align(src, dst, with_scale)?;
    let mut kept = src.len();
    for _ in 0..2 {
        let res: Vec<f64> = src.iter().zip(dst).map(|(a, b)| (s.apply(a) - b).norm()).collect();
        let mut sorted = res.clone();
        sorted.sort_by(f64::total_cmp);
        let limit = 3.0 * sorted[sorted.len() / 2] + floor;
        let keep: Vec<usize> = (0..res.len()).filter(|i| res[*i] <= limit).collect();
        if keep.len() == kept || keep.len() < 3 {
            break;
        }
        let (a, b): (Vec<Vec3>, Vec<Vec3>) = keep.iter().map(|&i| (src[i], dst[i])).unzip();
        match align(&a, &b, with_scale) {
            Ok(refit) => {
                s = refit;
                kept = keep.len();
            }
            Err(_) => break,
        }
    }
    Ok((s, kept))
}

/// Similarity from one or more camera pairs: poses of the same physical
/// cameras in their native frame and as registered in another frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPairSimilarity {
    /// Maps the native frame into the registered frame.
    pub transform: SimilarityTransform,
    /// Only one pair: translation and scale are not determined (scale is set
    /// to one and the translation fits that single pair).
    pub rotation_only: bool,
}

/// Rotation `B = R_reg^-1 R_native` averaged over pairs (chordal mean then
/// projection), then `(b, beta)` from least squares on `c_reg = beta B c_native + b`.
pub fn similarity_from_camera_pair(
    native: &[CameraPose],
    registered: &[CameraPose],
) -> std::result::Result<CameraPairSimilarity, GeometryError> {
    if native.len() != registered.len() || native.is_empty() {
        return Err(GeometryError::Degenerate(format!(
            "{} native vs {} registered poses",
            native.len(),
            registered.len()
        )));
    }
    let mut sum = Mat3::zeros();
    for (n, r) in native.iter().zip(registered) {
        sum += r.rotation.inverse().mul(&n.rotation).matrix();
    }
    let rotation = if native.len() == 1 {
        registered[0].rotation.inverse().mul(&native[0].rotation)
    } else {
        Rotation3::project(&sum)
    };
    if native.len() == 1 {
        let b = registered[0].center - rotation.apply(&native[0].center);
        return Ok(CameraPairSimilarity { transform: SimilarityTransform::new(rotation, b, 1.0), rotation_only: true });
    }
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for (n, r) in native.iter().zip(registered) {
        let bc = rotation.apply(&n.center);
        for row in 0..3 {
            let mut a = Vector4::zeros();
            a[row] = 1.0;
            a[3] = bc[row];
            ata += a * a.transpose();
            atb += a * r.center[row];
        }
    }
    let x = ata
        .cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| GeometryError::Degenerate("coincident camera centers".into()))?;
    let scale = x[3];
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(GeometryError::Degenerate(format!("scale {scale} from camera pairs")));
    }
    Ok(CameraPairSimilarity {
        transform: SimilarityTransform::new(rotation, Vec3::new(x[0], x[1], x[2]), scale),
        rotation_only: false,
    })
}

/// Points and camera poses of a take mapped by `s`.
pub fn transform_model(take: &TakeModel, s: &SimilarityTransform) -> TakeModel {
    let mut out = take.clone();
    for x in out.points.values_mut() {
        *x = s.apply(x);
    }
    for img in out.images.values_mut() {
        img.pose = img.pose.transported(s);
    }
    out
}

/// Which object a pose registers: `Any` for a take's own reconstruction pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseObject {
    Any,
    Background,
    Foreground,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilaritySource {
    Points,
    CameraPairs,
}

/// Everything needed to move takes into the reference frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergePlan {
    pub reference: TakeId,
    /// Background similarity from each take's frame into the reference frame.
    pub similarities: BTreeMap<TakeId, SimilarityTransform>,
    pub sources: BTreeMap<TakeId, SimilaritySource>,
    /// Foreground motion from the reference configuration to each take,
    /// in the reference frame.
    pub motions: BTreeMap<TakeId, RigidMotion>,
    /// Takes left out, with the reason.
    pub excluded: Vec<(TakeId, String)>,
}

impl MergePlan {
    pub fn similarity(&self, take: TakeId) -> Result<SimilarityTransform> {
        self.similarities
            .get(&take)
            .copied()
            .ok_or_else(|| Error::UnderConstrained(format!("no similarity for take {take}")))
    }

    pub fn motion(&self, take: TakeId) -> Result<RigidMotion> {
        self.motions
            .get(&take)
            .copied()
            .ok_or_else(|| Error::UnderConstrained(format!("no foreground motion for take {take}")))
    }

    /// Maps foreground points of `take` (its own frame and configuration) to
    /// the reference frame and reference configuration.
    pub fn foreground_similarity(&self, take: TakeId) -> Result<SimilarityTransform> {
        let m = self.motion(take)?;
        Ok(self.similarity(take)?.then(&SimilarityTransform::from_motion(&m.inverse())))
    }

    pub fn includes(&self, take: TakeId) -> bool {
        self.similarities.contains_key(&take)
    }
}

/// Background-facing pose from a foreground-facing pose under motion `(A, a)`:
/// `R_B = R_F A^-1`, `c_B = a + A c_F`.
pub fn background_pose(foreground: &CameraPose, motion: &RigidMotion) -> CameraPose {
    CameraPose::new(
        foreground.intrinsics,
        foreground.rotation.mul(&motion.rotation.inverse()),
        motion.apply(&foreground.center),
    )
}

/// Background and foreground poses in the reference frame of a camera from
/// take `camera_take`, given its `pose` in the frame of take `frame` where it
/// registers `object`.
pub fn transform_camera(
    pose: &CameraPose,
    frame: TakeId,
    camera_take: TakeId,
    object: PoseObject,
    plan: &MergePlan,
) -> Result<(CameraPose, CameraPose)> {
    let r = plan.reference;
    let motion = if camera_take == r { RigidMotion::identity() } else { plan.motion(camera_take)? };
    let background = match object {
        PoseObject::Any | PoseObject::Background => {
            if frame == r {
                *pose
            } else {
                pose.transported(&plan.similarity(frame)?)
            }
        }
        PoseObject::Foreground => {
            let in_reference = if frame == r { *pose } else { pose.transported(&plan.foreground_similarity(frame)?) };
            if camera_take == r {
                in_reference
            } else {
                background_pose(&in_reference, &motion)
            }
        }
    };
    let foreground = foreground_pose(&background, &motion);
    Ok((background, foreground))
}

fn centroid<'a>(points: impl Iterator<Item = &'a Vec3>) -> Option<Vec3> {
    let (mut sum, mut n) = (Vec3::zeros(), 0usize);
    for p in points {
        sum += p;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Per-take centroid of each track's members.
fn member_centroid(scene: &MultiTakeScene, members: &[PointRef], take: TakeId) -> Option<Vec3> {
    let t = scene.take(take)?;
    centroid(members.iter().filter(|m| m.0 == take).filter_map(|m| t.points.get(&m.1)))
}

fn label_correspondences(
    scene: &MultiTakeScene,
    tracks: &TrackSet,
    labels: &BTreeMap<TrackId, Label>,
    label: Label,
    take: TakeId,
    reference: TakeId,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for t in &tracks.tracks {
        if labels.get(&t.id) != Some(&label) {
            continue;
        }
        if let (Some(a), Some(b)) =
            (member_centroid(scene, &t.members, take), member_centroid(scene, &t.members, reference))
        {
            src.push(a);
            dst.push(b);
        }
    }
    (src, dst)
}

/// Majority label of a registered pose's inliers among the target's tracks.
fn pose_label(
    tracks: &TrackSet,
    labels: &BTreeMap<TrackId, Label>,
    target: TakeId,
    inliers: &[(u32, usize)],
) -> Option<Label> {
    let (mut b, mut f) = (0usize, 0usize);
    for (p, _) in inliers {
        match tracks.track_of((target, *p)).and_then(|t| labels.get(&t)) {
            Some(Label::Background) => b += 1,
            Some(Label::Foreground) => f += 1,
            _ => {}
        }
    }
    if b > 2 * f {
        Some(Label::Background)
    } else if f > 2 * b {
        Some(Label::Foreground)
    } else {
        None
    }
}

/// Poses of `take`'s images registered toward `reference`, split by the label
/// their inliers carry: `(image, native pose, background pose, foreground pose)`.
#[allow(clippy::type_complexity)]
fn registered_pairs(
    scene: &MultiTakeScene,
    regs: &Registrations,
    tracks: &TrackSet,
    labels: &BTreeMap<TrackId, Label>,
    take: TakeId,
    reference: TakeId,
) -> Vec<(ImageId, CameraPose, Option<(CameraPose, usize)>, Option<(CameraPose, usize)>)> {
    let mut out = Vec::new();
    let Some(model) = scene.take(take) else { return out };
    for (j, img) in &model.images {
        let Some(poses) = regs.get(&(*j, reference)) else { continue };
        let mut b = None;
        let mut f = None;
        for p in poses {
            let slot = match pose_label(tracks, labels, reference, &p.inliers) {
                Some(Label::Background) => &mut b,
                Some(Label::Foreground) => &mut f,
                _ => continue,
            };
            if slot.is_none() {
                *slot = Some((p.pose, p.inlier_count()));
            }
        }
        out.push((*j, img.pose, b, f));
    }
    out
}

/// Estimates the background similarity and foreground motion of every take
/// relative to `reference`. Points are the primary route; registered camera
/// pairs are the fallback and, when both exist, a consistency check.
pub fn plan_merge(
    scene: &MultiTakeScene,
    tracks: &TrackSet,
    labels: &BTreeMap<TrackId, Label>,
    reference: TakeId,
    regs: Option<&Registrations>,
) -> Result<MergePlan> {
    let ref_model =
        scene.take(reference).ok_or_else(|| Error::Integrity(format!("reference take {reference} not in scene")))?;
    let floor = 1e-9 * bounding_diameter(ref_model.points.values()).max(f64::MIN_POSITIVE);
    let mut plan = MergePlan { reference, ..Default::default() };
    plan.similarities.insert(reference, SimilarityTransform::identity());
    plan.sources.insert(reference, SimilaritySource::Points);
    plan.motions.insert(reference, RigidMotion::identity());

    for take in scene.take_ids() {
        if take == reference {
            continue;
        }
        let pairs = regs.map(|r| registered_pairs(scene, r, tracks, labels, take, reference)).unwrap_or_default();
        let camera_route = || {
            let (native, registered): (Vec<CameraPose>, Vec<CameraPose>) =
                pairs.iter().filter_map(|(_, n, b, _)| b.map(|(p, _)| (*n, p))).unzip();
            similarity_from_camera_pair(&native, &registered).ok().filter(|s| !s.rotation_only)
        };
        let (src, dst) = label_correspondences(scene, tracks, labels, Label::Background, take, reference);
        let similarity = match trimmed_fit(&src, &dst, true, floor) {
            Ok((s, kept)) => {
                log::debug!("take {take}: similarity from {kept}/{} background tracks", src.len());
                if let Some(c) = camera_route() {
                    let d = rotation_geodesic_distance(&c.transform.rotation, &s.rotation);
                    if d > 1e-3 {
                        log::warn!("take {take}: point and camera-pair similarities differ by {d:.2e} rad");
                    }
                }
                plan.sources.insert(take, SimilaritySource::Points);
                s
            }
            Err(e) => match camera_route() {
                Some(c) => {
                    log::warn!("take {take}: {e}; using registered camera pairs");
                    plan.sources.insert(take, SimilaritySource::CameraPairs);
                    c.transform
                }
                None => {
                    log::warn!("take {take} excluded from merging: {e}");
                    plan.excluded.push((take, e.to_string()));
                    continue;
                }
            },
        };
        plan.similarities.insert(take, similarity);

        let (fsrc, fdst) = label_correspondences(scene, tracks, labels, Label::Foreground, take, reference);
        // reference configuration -> this take's configuration, both in the reference frame
        let moved: Vec<Vec3> = fsrc.iter().map(|x| similarity.apply(x)).collect();
        let pose_route = || {
            pairs
                .iter()
                .filter_map(|(_, _, b, f)| match (b, f) {
                    (Some((pb, nb)), Some((pf, nf))) => Some((*nb.min(nf), foreground_motion_from_pair(pb, pf))),
                    _ => None,
                })
                .max_by(|a, b| a.0.cmp(&b.0))
                .map(|(_, m)| m)
        };
        let motion = match trimmed_fit(&fdst, &moved, false, floor) {
            Ok((m, kept)) => {
                log::debug!("take {take}: motion from {kept}/{} foreground tracks", fsrc.len());
                let m = m.rigid_part();
                if let Some(p) = pose_route() {
                    let d = rotation_geodesic_distance(&p.rotation, &m.rotation);
                    if d > 1e-2 {
                        log::warn!("take {take}: point and pose-pair motions differ by {d:.2e} rad");
                    }
                }
                m
            }
            Err(e) => match pose_route() {
                Some(m) => {
                    log::warn!("take {take}: {e}; motion from a registered pose pair");
                    m
                }
                None => {
                    log::warn!("take {take}: no foreground correspondences, motion set to identity");
                    RigidMotion::identity()
                }
            },
        };
        plan.motions.insert(take, motion);
    }
    Ok(plan)
}

/// Position of every track with a member in an included take, in the
/// reference frame and, for the foreground, the reference configuration.
/// Labeled tracks average all transported members; unknown tracks use the
/// reference take's member when present, otherwise the first member under
/// the background similarity.
pub fn track_positions(
    scene: &MultiTakeScene,
    tracks: &TrackSet,
    labels: &BTreeMap<TrackId, Label>,
    plan: &MergePlan,
) -> BTreeMap<TrackId, Vec3> {
    let mut out = BTreeMap::new();
    for t in &tracks.tracks {
        let label = labels.get(&t.id).copied().unwrap_or(Label::Unknown);
        let members: Vec<(TakeId, Vec3)> = t
            .members
            .iter()
            .filter(|m| plan.includes(m.0))
            .filter_map(|m| scene.take(m.0).and_then(|tk| tk.points.get(&m.1)).map(|x| (m.0, *x)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let moved = |(take, x): &(TakeId, Vec3)| -> Vec3 {
            let s = plan.similarities[take];
            match label {
                Label::Foreground => plan.motions[take].inverse().apply(&s.apply(x)),
                _ => s.apply(x),
            }
        };
        let position = match label {
            Label::Unknown => match centroid(members.iter().filter(|m| m.0 == plan.reference).map(|m| &m.1)) {
                Some(p) => p,
                None => moved(&members[0]),
            },
            _ => {
                let transported: Vec<Vec3> = members.iter().map(moved).collect();
                centroid(transported.iter()).unwrap()
            }
        };
        out.insert(t.id, position);
    }
    out
}

/// Assembles the labeled scene: points at `track_positions`, every image of
/// an included take with its background and foreground poses, and one motion
/// per included take.
pub fn merge_scene(
    scene: &MultiTakeScene,
    tracks: &TrackSet,
    labels: &BTreeMap<TrackId, Label>,
    plan: &MergePlan,
) -> Result<LabeledScene> {
    let positions = track_positions(scene, tracks, labels, plan);
    let points = positions
        .iter()
        .map(|(t, p)| (*t, MergedPoint { position: *p, label: labels.get(t).copied().unwrap_or(Label::Unknown) }))
        .collect::<BTreeMap<_, _>>();
    let mut cam_ids: BTreeMap<(TakeId, CamId), CamId> = BTreeMap::new();
    let mut images = BTreeMap::new();
    for take in &scene.takes {
        if !plan.includes(take.id) {
            continue;
        }
        for img in take.images.values() {
            let (bg, fg) = transform_camera(&img.pose, take.id, take.id, PoseObject::Any, plan)?;
            let next = cam_ids.len() as CamId + 1;
            let cam_id = *cam_ids.entry((take.id, img.cam_id)).or_insert(next);
            images.insert(img.id, merged_image(img, take.id, cam_id, bg, fg, tracks, &points));
        }
    }
    let motions = plan.motions.iter().filter(|(t, _)| plan.includes(**t)).map(|(t, m)| (*t, *m)).collect();
    Ok(LabeledScene { reference: plan.reference, points, images, motions })
}

fn merged_image(
    img: &Image,
    take: TakeId,
    cam_id: CamId,
    background_pose: CameraPose,
    foreground_pose: CameraPose,
    tracks: &TrackSet,
    points: &BTreeMap<TrackId, MergedPoint>,
) -> MergedImage {
    let observations = img
        .observations
        .iter()
        .map(|o| MergedObservation {
            pixel: o.pixel,
            track: o.link_to(take).and_then(|p| tracks.track_of((take, p))).filter(|t| points.contains_key(t)),
        })
        .collect();
    MergedImage { id: img.id, take, cam_id, background_pose, foreground_pose, observations }
}

// ---------------------------------------------------------------------------
// Merged model text I/O: merged/{cameras,images,points,takes}.txt,
// labels.txt and motions.txt side by side.

pub fn save_labeled_scene(ls: &LabeledScene, root: &Path) -> Result<()> {
    let dir = root.join("merged");
    let mut cams: BTreeMap<CamId, crate::geometry::Intrinsics> = BTreeMap::new();
    let mut imgs = String::new();
    let mut takes = String::new();
    let _ = writeln!(takes, "REF {}", ls.reference);
    for img in ls.images.values() {
        cams.insert(img.cam_id, img.background_pose.intrinsics);
        let _ = write!(imgs, "IMG {} {}", img.id, img.cam_id);
        text::push_quaternion(&mut imgs, &img.background_pose.rotation);
        text::push_vec3(&mut imgs, &img.background_pose.center);
        imgs.push('\n');
        for o in &img.observations {
            match o.track {
                Some(t) => {
                    let _ = writeln!(imgs, "OBS {} {} 1 {} {t}", o.pixel.x, o.pixel.y, ls.reference);
                }
                None => {
                    let _ = writeln!(imgs, "OBS {} {} 0", o.pixel.x, o.pixel.y);
                }
            }
        }
        let _ = writeln!(takes, "IMT {} {}", img.id, img.take);
    }
    let mut cam_text = String::new();
    for (id, k) in &cams {
        let _ = writeln!(cam_text, "CAM {id} {} {} {} {}", k.fx, k.fy, k.cx, k.cy);
    }
    let mut pts = String::new();
    let mut lbl = String::new();
    for (t, p) in &ls.points {
        let _ = write!(pts, "PT {t}");
        text::push_vec3(&mut pts, &p.position);
        pts.push('\n');
        let _ = writeln!(lbl, "LBL {t} {}", p.label.as_char());
    }
    let mut mot = String::new();
    for (t, m) in &ls.motions {
        let _ = write!(mot, "FGM {t}");
        text::push_quaternion(&mut mot, &m.rotation);
        text::push_vec3(&mut mot, &m.translation);
        mot.push('\n');
    }
    text::write(&dir.join("cameras.txt"), &cam_text)?;
    text::write(&dir.join("images.txt"), &imgs)?;
    text::write(&dir.join("points.txt"), &pts)?;
    text::write(&dir.join("takes.txt"), &takes)?;
    text::write(&root.join("labels.txt"), &lbl)?;
    text::write(&root.join("motions.txt"), &mot)
}

pub fn load_labeled_scene(root: &Path) -> Result<LabeledScene> {
    let dir = root.join("merged");
    let model = crate::scene::load_take(&dir, 0)?;
    let mut ls = LabeledScene::default();

    let path = dir.join("takes.txt");
    let contents = text::read(&path)?;
    let mut take_of: BTreeMap<ImageId, TakeId> = BTreeMap::new();
    let mut reference = None;
    for mut line in text::lines(&path, &contents) {
        match line.tag() {
            "REF" => reference = Some(line.next::<TakeId>("take id")?),
            "IMT" => {
                let img: ImageId = line.next("image id")?;
                let take: TakeId = line.next("take id")?;
                if !model.images.contains_key(&img) {
                    return Err(line.err(format!("unknown image {img}")));
                }
                take_of.insert(img, take);
            }
            other => return Err(line.err(format!("unknown tag {other}"))),
        }
        line.finish()?;
    }
    ls.reference = reference.ok_or_else(|| Error::parse(&path, 0, "missing REF line"))?;

    let path = root.join("labels.txt");
    let contents = text::read(&path)?;
    let mut labels = BTreeMap::new();
    for mut line in text::lines(&path, &contents) {
        if line.tag() != "LBL" {
            return Err(line.err(format!("unknown tag {}", line.tag())));
        }
        let t: TrackId = line.next("track id")?;
        let s: String = line.next("label")?;
        line.finish()?;
        labels.insert(t, Label::parse(&s).ok_or_else(|| line.err(format!("bad label {s:?}")))?);
    }

    let path = root.join("motions.txt");
    let contents = text::read(&path)?;
    for mut line in text::lines(&path, &contents) {
        if line.tag() != "FGM" {
            return Err(line.err(format!("unknown tag {}", line.tag())));
        }
        let t: TakeId = line.next("take id")?;
        let rotation = line.quaternion()?;
        let translation = line.vec3("translation")?;
        line.finish()?;
        ls.motions.insert(t, RigidMotion::new(rotation, translation));
    }

    for (id, x) in &model.points {
        let label = *labels
            .get(id)
            .ok_or_else(|| Error::Integrity(format!("track {id} has no label in {}", path.display())))?;
        ls.points.insert(*id, MergedPoint { position: *x, label });
    }
    for (id, img) in &model.images {
        let take = *take_of.get(id).ok_or_else(|| Error::Integrity(format!("image {id} has no take")))?;
        let observations = img
            .observations
            .iter()
            .map(|o| {
                let track = o.links.first().map(|l| l.1);
                if let Some(t) = track {
                    if !ls.points.contains_key(&t) {
                        return Err(Error::Integrity(format!("image {id} observes unknown track {t}")));
                    }
                }
                Ok(MergedObservation { pixel: o.pixel, track })
            })
            .collect::<Result<Vec<_>>>()?;
        let motion = ls.motions.get(&take).copied().unwrap_or_default();
        ls.images.insert(
            *id,
            MergedImage {
                id: *id,
                take,
                cam_id: img.cam_id,
                background_pose: img.pose,
                foreground_pose: foreground_pose(&img.pose, &motion),
                observations,
            },
        );
    }
    Ok(ls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn identity_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = cloud(&mut rng, 20);
        let s = similarity_from_points(&src, &src).unwrap();
        assert!(s.rotation.angle() < 1e-12);
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn scale_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = cloud(&mut rng, 20);
        let dst: Vec<Vec3> = src.iter().map(|x| 2.0 * x + Vec3::new(1.0, 0.0, 0.0)).collect();
        let s = similarity_from_points(&src, &dst).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-12);
        assert!((s.translation - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(s.rotation.angle() < 1e-12);
    }

    #[test]
    fn noisy_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = SimilarityTransform::new(
            Rotation3::from_axis_angle(&Vec3::new(0.3, -1.0, 0.4)),
            Vec3::new(2.0, -1.0, 0.5),
            1.7,
        );
        let src = cloud(&mut rng, 100);
        let normal = rand_distr::Normal::new(0.0, 1e-3).unwrap();
        let dst: Vec<Vec3> = src
            .iter()
            .map(|x| {
                use rand_distr::Distribution;
                truth.apply(x) + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng))
            })
            .collect();
        let s = similarity_from_points(&src, &dst).unwrap();
        let rmse = (src.iter().zip(&dst).map(|(a, b)| (s.apply(a) - b).norm_squared()).sum::<f64>() / 100.0).sqrt();
        assert!(rmse <= 3e-3, "{rmse}");
    }

    #[test]
    fn degenerate_inputs() {
        let two = vec![Vec3::zeros(), Vec3::x()];
        assert!(similarity_from_points(&two, &two).is_err());
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(similarity_from_points(&line, &line).is_err());
    }

    #[test]
    fn reflection_is_not_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = cloud(&mut rng, 10);
        let dst: Vec<Vec3> = src.iter().map(|x| Vec3::new(-x.x, x.y, x.z)).collect();
        let s = similarity_from_points(&src, &dst).unwrap();
        assert!((s.rotation.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equivariant_under_common_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = cloud(&mut rng, 30);
        let truth = SimilarityTransform::new(
            Rotation3::from_axis_angle(&Vec3::new(0.5, 0.2, -0.1)),
            Vec3::new(1.0, 2.0, 3.0),
            0.8,
        );
        let dst: Vec<Vec3> = src.iter().map(|x| truth.apply(x)).collect();
        let q = Rotation3::from_axis_angle(&Vec3::new(-0.7, 0.1, 1.2));
        let src_q: Vec<Vec3> = src.iter().map(|x| q.apply(x)).collect();
        let dst_q: Vec<Vec3> = dst.iter().map(|x| q.apply(x)).collect();
        let a = similarity_from_points(&src, &dst).unwrap();
        let b = similarity_from_points(&src_q, &dst_q).unwrap();
        let conj = q.mul(&a.rotation).mul(&q.inverse());
        assert!(crate::geometry::rotation_geodesic_distance(&conj, &b.rotation) < 1e-9);
        assert!((a.scale - b.scale).abs() < 1e-9);
    }

    fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
        Rotation3::from_axis_angle(&Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ))
    }

    fn random_similarity(rng: &mut impl Rng) -> SimilarityTransform {
        SimilarityTransform::new(random_rotation(rng), cloud(rng, 1)[0] * 3.0, rng.random_range(0.3..3.0))
    }

    fn random_motion(rng: &mut impl Rng) -> RigidMotion {
        RigidMotion::new(random_rotation(rng), cloud(rng, 1)[0])
    }

    fn random_pose(rng: &mut impl Rng) -> CameraPose {
        CameraPose::new(
            crate::geometry::Intrinsics::new(600.0, 600.0, 320.0, 240.0),
            random_rotation(rng),
            cloud(rng, 1)[0] * 4.0,
        )
    }

    fn pose_error(a: &CameraPose, b: &CameraPose) -> f64 {
        (a.rotation.matrix() - b.rotation.matrix()).amax().max((a.center - b.center).amax())
    }

    #[test]
    fn camera_pair_similarity_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let s = random_similarity(&mut rng);
            let n = rng.random_range(2..6);
            let native: Vec<CameraPose> = (0..n).map(|_| random_pose(&mut rng)).collect();
            let registered: Vec<CameraPose> = native.iter().map(|p| p.transported(&s)).collect();
            let est = similarity_from_camera_pair(&native, &registered).unwrap();
            assert!(!est.rotation_only);
            let t = est.transform;
            assert!((t.rotation.matrix() - s.rotation.matrix()).amax() < 1e-9);
            assert!((t.translation - s.translation).amax() < 1e-8);
            assert!((t.scale - s.scale).abs() < 1e-9);
        }
    }

    #[test]
    fn camera_pair_single_is_rotation_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let s = random_similarity(&mut rng);
        let p = random_pose(&mut rng);
        let est = similarity_from_camera_pair(&[p], &[p.transported(&s)]).unwrap();
        assert!(est.rotation_only);
        assert!(rotation_geodesic_distance(&est.transform.rotation, &s.rotation) < 1e-9);
    }

    #[test]
    fn camera_pairs_agree_with_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let s = random_similarity(&mut rng);
            let src = cloud(&mut rng, 20);
            let dst: Vec<Vec3> = src.iter().map(|x| s.apply(x)).collect();
            let a = similarity_from_points(&src, &dst).unwrap();
            let native: Vec<CameraPose> = (0..3).map(|_| random_pose(&mut rng)).collect();
            let registered: Vec<CameraPose> = native.iter().map(|p| p.transported(&s)).collect();
            let b = similarity_from_camera_pair(&native, &registered).unwrap().transform;
            assert!((a.rotation.matrix() - s.rotation.matrix()).amax() < 1e-9);
            assert!((a.translation - s.translation).amax() < 1e-9);
            assert!((a.scale - s.scale).abs() < 1e-9);
            assert!(rotation_geodesic_distance(&a.rotation, &b.rotation) < 1e-6);
            assert!((a.translation - b.translation).norm() < 1e-6);
            assert!((a.scale - b.scale).abs() < 1e-6);
        }
    }

    #[test]
    fn transform_model_round_trip_and_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut take = TakeModel { id: 1, ..Default::default() };
        for (i, x) in cloud(&mut rng, 30).into_iter().enumerate() {
            take.points.insert(i as u32, x);
        }
        let s = random_similarity(&mut rng);
        let moved = transform_model(&take, &s);
        let back = transform_model(&moved, &s.inverse());
        for (id, x) in &take.points {
            assert!((back.points[id] - x).norm() < 1e-10);
        }
        let ids: Vec<u32> = take.points.keys().copied().collect();
        for w in ids.windows(2) {
            let d0 = (take.points[&w[0]] - take.points[&w[1]]).norm();
            let d1 = (moved.points[&w[0]] - moved.points[&w[1]]).norm();
            assert!((d1 / d0 - s.scale).abs() < 1e-10);
        }
        assert_eq!(transform_model(&take, &SimilarityTransform::identity()).points, take.points);
    }

    #[test]
    fn five_camera_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..1000 {
            // reference 1; take 2 and 3 have frames and foreground motions
            let mut plan = MergePlan { reference: 1, ..Default::default() };
            plan.similarities.insert(1, SimilarityTransform::identity());
            plan.motions.insert(1, RigidMotion::identity());
            for t in [2, 3] {
                plan.similarities.insert(t, random_similarity(&mut rng));
                plan.motions.insert(t, random_motion(&mut rng));
            }
            for camera_take in [1u32, 2] {
                let m = plan.motions[&camera_take];
                let bg = random_pose(&mut rng);
                let fg = foreground_pose(&bg, &m);
                let to_frame = |s: TakeId, object: PoseObject| -> CameraPose {
                    match object {
                        PoseObject::Foreground => fg.transported(&plan.foreground_similarity(s).unwrap().inverse()),
                        _ => bg.transported(&plan.similarity(s).unwrap().inverse()),
                    }
                };
                let cases = [
                    (1, PoseObject::Any),
                    (3, PoseObject::Background),
                    (1, PoseObject::Foreground),
                    (3, PoseObject::Foreground),
                ];
                for (frame, object) in cases {
                    let input = if frame == 1 {
                        match object {
                            PoseObject::Foreground => fg,
                            _ => bg,
                        }
                    } else {
                        to_frame(frame, object)
                    };
                    let (b, f) = transform_camera(&input, frame, camera_take, object, &plan).unwrap();
                    assert!(pose_error(&b, &bg) <= 1e-8, "case {frame} {object:?} take {camera_take}");
                    assert!(pose_error(&f, &fg) <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn camera_case_identity_and_inverse_relations() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let plan = MergePlan {
            reference: 1,
            similarities: [(1, SimilarityTransform::identity())].into_iter().collect(),
            motions: [(1, RigidMotion::identity())].into_iter().collect(),
            ..Default::default()
        };
        let p = random_pose(&mut rng);
        let (b, f) = transform_camera(&p, 1, 1, PoseObject::Any, &plan).unwrap();
        assert_eq!(b, p);
        assert_eq!(f.center, p.center);
        for _ in 0..100 {
            let m = random_motion(&mut rng);
            let p = random_pose(&mut rng);
            let back = background_pose(&foreground_pose(&p, &m), &m);
            assert!(pose_error(&back, &p) < 1e-10);
        }
        assert!(transform_camera(&p, 2, 1, PoseObject::Background, &plan).is_err());
    }

    #[test]
    fn noiseless_merge_matches_ground_truth() {
        use crate::geometry::compose_motion;
        use crate::simulator::{generate, SimConfig};
        let out = generate(&SimConfig { takes: 3, ..SimConfig::default() }).unwrap();
        let (tracks, labels) = crate::simulator::ground_truth_tracks(&out);
        let reference = 2;
        let plan = plan_merge(&out.scene, &tracks, &labels, reference, None).unwrap();
        assert!(plan.excluded.is_empty());
        let gt = &out.ground_truth;
        let w_r = gt.similarities[&reference];
        for t in out.scene.take_ids() {
            let expect = gt.similarities[&t].inverse().then(&w_r);
            let s = plan.similarities[&t];
            assert!((s.rotation.matrix() - expect.rotation.matrix()).amax() < 1e-9);
            assert!((s.translation - expect.translation).amax() < 1e-8);
            let motion = compose_motion(&gt.motions[&reference], &gt.motions[&t]).conjugate(&w_r);
            let m = plan.motions[&t];
            assert!(rotation_geodesic_distance(&m.rotation, &motion.rotation) < 1e-9);
            assert!((m.translation - motion.translation).norm() < 1e-8);
        }
        let merged = merge_scene(&out.scene, &tracks, &labels, &plan).unwrap();
        assert_eq!(merged.points.len(), tracks.len());
        let errors = merged.labeled_reprojection_errors();
        assert!(!errors.is_empty());
        assert!(errors.iter().all(|e| *e < 1e-6), "max {}", errors.iter().cloned().fold(0.0, f64::max));
        for img in merged.images.values() {
            let p = gt.poses[&img.id].transported(&w_r);
            assert!(pose_error(&img.background_pose, &p) < 1e-8);
        }

        let dir = tempfile::tempdir().unwrap();
        save_labeled_scene(&merged, dir.path()).unwrap();
        let loaded = load_labeled_scene(dir.path()).unwrap();
        assert_eq!(loaded.points, merged.points);
        assert_eq!(loaded.motions.len(), merged.motions.len());
        let dir2 = tempfile::tempdir().unwrap();
        save_labeled_scene(&loaded, dir2.path()).unwrap();
        for f in ["merged/images.txt", "merged/points.txt", "labels.txt", "motions.txt", "merged/takes.txt"] {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn take_without_background_is_excluded() {
        use crate::simulator::{generate, SimConfig};
        let out = generate(&SimConfig { takes: 2, ..SimConfig::default() }).unwrap();
        let (tracks, mut labels) = crate::simulator::ground_truth_tracks(&out);
        for l in labels.values_mut() {
            if *l == Label::Background {
                *l = Label::Unknown;
            }
        }
        let plan = plan_merge(&out.scene, &tracks, &labels, 1, None).unwrap();
        assert_eq!(plan.excluded.len(), 1);
        assert_eq!(plan.excluded[0].0, 2);
        let merged = merge_scene(&out.scene, &tracks, &labels, &plan).unwrap();
        assert!(merged.images.values().all(|i| i.take == 1));
    }
}
