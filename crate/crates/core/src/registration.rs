//! Registration of every image against every other take: a P3P minimal
//! solver inside RANSAC, applied sequentially so that one image can yield a
//! pose per independently moving object.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix6, SMatrix, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project, projection_jacobian, skew, CameraPose, Intrinsics, Mat3, Rotation3, Vec2, Vec3};
use crate::merging::rigid_from_points;
use crate::scene::{Correspondence, ImageId, MultiTakeScene, PointId, TakeId};
use crate::text;

/// A pose of image `image` (from take `source`) in the frame of take `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredPose {
    pub image: ImageId,
    pub source: TakeId,
    pub target: TakeId,
    pub pose: CameraPose,
    /// `(point id in target, observation index in image)`, sorted.
    pub inliers: Vec<(PointId, usize)>,
}

impl RegisteredPose {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }

    pub fn inlier_points(&self) -> BTreeSet<PointId> {
        self.inliers.iter().map(|(p, _)| *p).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacParams {
    /// Inlier threshold in pixels.
    pub tau: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub max_models: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { tau: 4.0, max_iterations: 10_000, confidence: 0.999, min_inliers: 15, max_models: 4, seed: 0 }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("inlier threshold must be positive, got {}", self.tau)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!("confidence must lie in (0, 1), got {}", self.confidence)));
        }
        if self.max_models < 2 {
            return Err(Error::Config(format!("max models must be at least 2, got {}", self.max_models)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Registrations keyed by `(image, target take)`.
pub type Registrations = BTreeMap<(ImageId, TakeId), Vec<RegisteredPose>>;

fn bearing(k: &Intrinsics, pixel: &Vec2) -> Vec3 {
    let n = k.normalize(pixel);
    Vec3::new(n.x, n.y, 1.0).normalize()
}

fn min_triangle_height(p: &[Vec3; 3]) -> f64 {
    let area2 = (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
    let longest = [(p[1] - p[0]).norm(), (p[2] - p[1]).norm(), (p[0] - p[2]).norm()].into_iter().fold(0.0, f64::max);
    if longest == 0.0 {
        0.0
    } else {
        area2 / longest
    }
}

/// Real roots of `c[0] + c[1] x + ... + c[n] x^n`, from the companion matrix
/// eigenvalues polished by Newton steps.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0, |m: f64, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let comp = nalgebra::DMatrix::from_fn(deg, deg, |i, j| {
        if i == 0 {
            -coeffs[deg - 1 - j] / lead
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    let eval = |x: f64| {
        let (mut p, mut dp) = (0.0, 0.0);
        for &c in coeffs[..=deg].iter().rev() {
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp)
    };
    let mut roots = Vec::new();
    for z in comp.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-4 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let (p, dp) = eval(x);
            if dp == 0.0 {
                break;
            }
            let step = p / dp;
            x -= step;
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots
}

/// Polishes the three depths against the three pairwise distance equations.
fn polish_depths(s: &mut [f64; 3], cosines: &[f64; 3], d2: &[f64; 3]) {
    // pairs (0,1) uses cos gamma, (0,2) cos beta, (1,2) cos alpha
    const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
    for _ in 0..5 {
        let mut r = Vec3::zeros();
        let mut jac = Mat3::zeros();
        for (row, &(i, j)) in PAIRS.iter().enumerate() {
            let c = cosines[row];
            r[row] = s[i] * s[i] + s[j] * s[j] - 2.0 * s[i] * s[j] * c - d2[row];
            jac[(row, i)] = 2.0 * s[i] - 2.0 * s[j] * c;
            jac[(row, j)] = 2.0 * s[j] - 2.0 * s[i] * c;
        }
        let Some(step) = jac.lu().solve(&r) else { return };
        if !step.iter().all(|v| v.is_finite()) {
            return;
        }
        for k in 0..3 {
            s[k] -= step[k];
        }
        if step.norm() <= 1e-16 * (s[0].abs() + s[1].abs() + s[2].abs()) {
            return;
        }
    }
}

/// Grunert's three-point pose solutions. Returns an empty list for collinear
/// samples or when no real, in-front solution exists.
pub fn p3p_minimal(corrs: &[(Vec2, Vec3); 3], k: &Intrinsics) -> Vec<CameraPose> {
    let x = [corrs[0].1, corrs[1].1, corrs[2].1];
    if min_triangle_height(&x) <= 1e-9 {
        return Vec::new();
    }
    let f = [bearing(k, &corrs[0].0), bearing(k, &corrs[1].0), bearing(k, &corrs[2].0)];
    let a2 = (x[1] - x[2]).norm_squared();
    let b2 = (x[0] - x[2]).norm_squared();
    let c2 = (x[0] - x[1]).norm_squared();
    let ca = f[1].dot(&f[2]);
    let cb = f[0].dot(&f[2]);
    let cg = f[0].dot(&f[1]);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let cb2 = c2 / b2;
    let ab2 = a2 / b2;
    let bmc = (b2 - c2) / b2;
    let bma = (b2 - a2) / b2;
    let a4 = (amc - 1.0).powi(2) - 4.0 * cb2 * ca * ca;
    let a3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * cb2 * ca * ca * cb);
    let a2c = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg);
    let a1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * ab2 * cg * cg * cb - (1.0 - apc) * ca * cg);
    let a0 = (1.0 + amc).powi(2) - 4.0 * ab2 * cg * cg;

    let cosines = [cg, cb, ca];
    let d2 = [c2, b2, a2];
    let mut poses = Vec::new();
    for v in real_roots(&[a0, a1, a2c, a3, a4]) {
        let denom = 2.0 * (cg - v * ca);
        if denom.abs() < 1e-14 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / denom;
        let q = 1.0 + v * v - 2.0 * v * cb;
        if !(q > 0.0) {
            continue;
        }
        let s1 = (b2 / q).sqrt();
        let mut s = [s1, u * s1, v * s1];
        polish_depths(&mut s, &cosines, &d2);
        if s.iter().any(|d| !(*d > 0.0)) {
            continue;
        }
        let y: Vec<Vec3> = (0..3).map(|i| f[i] * s[i]).collect();
        let Ok(m) = rigid_from_points(&x, &y) else { continue };
        let rotation = m.rotation;
        let center = -rotation.inverse().apply(&m.translation);
        let pose = CameraPose::new(*k, rotation, center);
        let ok = corrs.iter().all(|(px, pt)| project(&pose, pt).map(|p| (p - px).norm() <= 1e-6).unwrap_or(false));
        if ok {
            poses.push(pose);
        }
    }
    poses
}

fn inliers_of(pose: &CameraPose, corrs: &[Correspondence], tau: f64) -> Vec<usize> {
    corrs
        .iter()
        .enumerate()
        .filter(|(_, c)| project(pose, &c.position).map(|p| (p - c.pixel).norm() < tau).unwrap_or(false))
        .map(|(i, _)| i)
        .collect()
}

/// Levenberg-Marquardt on squared reprojection error over `corrs`, updating
/// the rotation by a left increment and the center additively.
pub fn refine_pose(pose: &CameraPose, corrs: &[&Correspondence], iterations: usize) -> CameraPose {
    let cost = |p: &CameraPose| -> Option<f64> {
        let mut c = 0.0;
        for corr in corrs {
            c += (project(p, &corr.position).ok()? - corr.pixel).norm_squared();
        }
        Some(c)
    };
    let mut best = *pose;
    let Some(mut best_cost) = cost(&best) else { return best };
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let r = best.rotation.matrix();
        for corr in corrs {
            let y = best.to_camera(&corr.position);
            let proj = projection_jacobian(&best.intrinsics, &y);
            let res = best.intrinsics.denormalize(&Vec2::new(y.x / y.z, y.y / y.z)) - corr.pixel;
            let mut dy = SMatrix::<f64, 3, 6>::zeros();
            dy.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&y)));
            dy.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r));
            let j = proj * dy;
            h += j.transpose() * j;
            g += j.transpose() * res;
        }
        if g.amax() < 1e-12 {
            break;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-9);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vec3::new(step[0], step[1], step[2]);
            let dc = Vec3::new(step[3], step[4], step[5]);
            let cand =
                CameraPose::new(best.intrinsics, Rotation3::from_axis_angle(&w).mul(&best.rotation), best.center + dc);
            match cost(&cand) {
                Some(c) if c < best_cost => {
                    let rel = (best_cost - c) / best_cost.max(f64::MIN_POSITIVE);
                    best = cand;
                    best_cost = c;
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = rel > 1e-14;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    best
}

/// RANSAC over P3P with a fourth point for disambiguation; the winning pose
/// is refined on its inliers and the inlier set recomputed. `Ok(None)` when
/// no hypothesis reaches `min_inliers`.
pub fn pnp_ransac(
    corrs: &[Correspondence],
    k: &Intrinsics,
    params: &RansacParams,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(CameraPose, Vec<usize>)>> {
    let n = corrs.len();
    if n < 4 {
        return Err(Error::TooFewCorrespondences { got: n, need: 4 });
    }
    let mut best: Option<(CameraPose, Vec<usize>)> = None;
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let idx = sample(rng, n, 4);
        let s = [&corrs[idx.index(0)], &corrs[idx.index(1)], &corrs[idx.index(2)]];
        let check = &corrs[idx.index(3)];
        let minimal = [(s[0].pixel, s[0].position), (s[1].pixel, s[1].position), (s[2].pixel, s[2].position)];
        let hypothesis = p3p_minimal(&minimal, k)
            .into_iter()
            .filter_map(|p| project(&p, &check.position).ok().map(|px| ((px - check.pixel).norm(), p)))
            .filter(|(e, _)| *e < params.tau)
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let Some((_, pose)) = hypothesis else { continue };
        let inl = inliers_of(&pose, corrs, params.tau);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let w = inl.len() as f64 / n as f64;
            needed = adaptive_iterations(w, params.confidence, params.max_iterations);
            best = Some((pose, inl));
        }
    }
    let Some((mut pose, mut inl)) = best else { return Ok(None) };
    if inl.len() < params.min_inliers.max(4) {
        return Ok(None);
    }
    for _ in 0..3 {
        let subset: Vec<&Correspondence> = inl.iter().map(|&i| &corrs[i]).collect();
        let refined = refine_pose(&pose, &subset, 10);
        let refined_inl = inliers_of(&refined, corrs, params.tau);
        if refined_inl.len() < inl.len() {
            break;
        }
        let same = refined_inl == inl;
        pose = refined;
        inl = refined_inl;
        if same {
            break;
        }
    }
    if inl.len() < params.min_inliers {
        return Ok(None);
    }
    Ok(Some((pose, inl)))
}

fn adaptive_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let p = inlier_ratio.powi(4);
    if p <= 0.0 {
        return cap;
    }
    if p >= 1.0 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

fn rng_for(seed: u64, image: ImageId, target: TakeId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((image as u64) << 32) | target as u64);
    rng
}

/// Greedy sequential RANSAC of one image against one take: after each
/// accepted pose its inliers are removed and fitting continues on the rest.
pub fn sequential_register(
    scene: &MultiTakeScene,
    image: ImageId,
    target: TakeId,
    params: &RansacParams,
) -> Result<Vec<RegisteredPose>> {
    let (source, img) = scene.image(image).ok_or(Error::UnknownImage(image))?;
    let k = *scene
        .take(source)
        .and_then(|t| t.cameras.get(&img.cam_id))
        .ok_or_else(|| Error::Integrity(format!("image {image} has no camera {}", img.cam_id)))?;
    let mut remaining = scene.correspondences(image, target)?;
    let mut rng = rng_for(params.seed, image, target);
    let mut out = Vec::new();
    while out.len() < params.max_models && remaining.len() >= params.min_inliers.max(4) {
        let Some((pose, inl)) = pnp_ransac(&remaining, &k, params, &mut rng)? else { break };
        let mut inliers: Vec<(PointId, usize)> =
            inl.iter().map(|&i| (remaining[i].point, remaining[i].obs_index)).collect();
        inliers.sort_unstable();
        let taken: BTreeSet<usize> = inl.into_iter().collect();
        remaining = remaining.into_iter().enumerate().filter(|(i, _)| !taken.contains(i)).map(|(_, c)| c).collect();
        out.push(RegisteredPose { image, source, target, pose, inliers });
    }
    Ok(out)
}

/// Registers every image toward every other take. Work is spread over the
/// current rayon pool; the result does not depend on the thread count.
pub fn register_all(scene: &MultiTakeScene, params: &RansacParams) -> Result<Registrations> {
    params.validate()?;
    let takes = scene.take_ids();
    let jobs: Vec<(ImageId, TakeId)> = scene
        .image_ids()
        .into_iter()
        .flat_map(|(s, j)| takes.iter().filter(move |t| **t != s).map(move |t| (j, *t)))
        .collect();
    let results: Vec<((ImageId, TakeId), Vec<RegisteredPose>)> = jobs
        .par_iter()
        .map(|&(j, t)| sequential_register(scene, j, t, params).map(|r| ((j, t), r)))
        .collect::<Result<_>>()?;
    Ok(results.into_iter().collect())
}

pub fn format_registrations(regs: &Registrations) -> String {
    let mut out = String::new();
    for ((j, t), poses) in regs {
        for (idx, p) in poses.iter().enumerate() {
            let _ = write!(out, "REG {j} {t} {idx}");
            text::push_quaternion(&mut out, &p.pose.rotation);
            text::push_vec3(&mut out, &p.pose.center);
            let _ = writeln!(out, " {}", p.inliers.len());
            out.push_str("INL");
            for (pt, obs) in &p.inliers {
                let _ = write!(out, " {pt} {obs}");
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_registrations(regs: &Registrations, path: &Path) -> Result<()> {
    text::write(path, &format_registrations(regs))
}

/// Reads a registration dump; intrinsics are taken from the scene.
pub fn load_registrations(path: &Path, scene: &MultiTakeScene) -> Result<Registrations> {
    let contents = text::read(path)?;
    let mut regs = Registrations::new();
    let mut pending: Option<(usize, RegisteredPose, usize)> = None;
    for mut line in text::lines(path, &contents) {
        match line.tag() {
            "REG" => {
                if let Some((no, ..)) = pending {
                    return Err(Error::parse(path, no, "REG without INL line"));
                }
                let j: ImageId = line.next("image id")?;
                let t: TakeId = line.next("take id")?;
                let idx: usize = line.next("pose index")?;
                let rotation = line.quaternion()?;
                let center = line.vec3("center")?;
                let n: usize = line.next("inlier count")?;
                line.finish()?;
                let (source, img) = scene.image(j).ok_or_else(|| line.err(format!("unknown image {j}")))?;
                if scene.take(t).is_none() {
                    return Err(line.err(format!("unknown take {t}")));
                }
                let k = *scene
                    .take(source)
                    .and_then(|m| m.cameras.get(&img.cam_id))
                    .ok_or_else(|| line.err(format!("image {j} has no camera")))?;
                let entry = regs.entry((j, t)).or_default();
                if entry.len() != idx {
                    return Err(line.err(format!("pose index {idx} out of order")));
                }
                let pose = CameraPose::new(k, rotation, center);
                let reg = RegisteredPose { image: j, source, target: t, pose, inliers: Vec::new() };
                pending = Some((line.number, reg, n));
            }
            "INL" => {
                let Some((_, mut reg, n)) = pending.take() else {
                    return Err(line.err("INL without REG"));
                };
                while line.remaining() > 0 {
                    reg.inliers.push((line.next("point id")?, line.next("observation index")?));
                }
                if reg.inliers.len() != n {
                    return Err(line.err(format!("expected {n} inliers, found {}", reg.inliers.len())));
                }
                regs.entry((reg.image, reg.target)).or_default().push(reg);
            }
            other => return Err(line.err(format!("unknown tag {other}"))),
        }
    }
    if let Some((no, ..)) = pending {
        return Err(Error::parse(path, no, "REG without INL line"));
    }
    Ok(regs)
}
