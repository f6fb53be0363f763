//! Two-body bundle adjustment: Levenberg-Marquardt over background poses,
//! per-take foreground motions and track positions, with the point blocks
//! eliminated by the Schur complement.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{projection_jacobian, skew, Intrinsics, RigidMotion, Rotation3, Vec2, Vec3, CHEIRALITY_EPS};
use crate::scene::{ImageId, Label, LabeledScene, TakeId, TrackId};

type Mat2x6 = SMatrix<f64, 2, 6>;
type Mat6x3 = SMatrix<f64, 6, 3>;

#[derive(Debug, Clone, PartialEq)]
pub struct BaOptions {
    pub max_iterations: usize,
    /// Huber loss with scale `2 * tau` when set.
    pub robust: bool,
    pub tau: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self { max_iterations: 100, robust: false, tau: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub median_reproj_px: f64,
    /// Cost after every accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub termination: String,
}

impl BaReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "initial_cost {}", self.initial_cost);
        let _ = writeln!(out, "final_cost {}", self.final_cost);
        let _ = writeln!(out, "iterations {}", self.iterations);
        let _ = writeln!(out, "median_reproj_px {}", self.median_reproj_px);
        let _ = writeln!(out, "termination {}", self.termination);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Residual {
    image: usize,
    point: usize,
    motion: Option<usize>,
    pixel: Vec2,
}

/// Parameter values; rotations are updated by left increments.
#[derive(Debug, Clone, PartialEq)]
pub struct BaState {
    pub poses: Vec<(Rotation3, Vec3)>,
    pub motions: Vec<RigidMotion>,
    pub points: Vec<Vec3>,
}

#[derive(Debug, Clone)]
pub struct BaProblem {
    image_ids: Vec<ImageId>,
    intrinsics: Vec<Intrinsics>,
    motion_takes: Vec<TakeId>,
    point_ids: Vec<TrackId>,
    residuals: Vec<Residual>,
    /// One flag per camera-side parameter (6 per image, then 6 per motion).
    fixed: Vec<bool>,
    pub state: BaState,
}

struct Linearized {
    res: Vec2,
    j_img: Mat2x6,
    j_mot: Option<Mat2x6>,
    j_pt: Matrix2x3<f64>,
}

impl BaProblem {
    pub fn residual_count(&self) -> usize {
        self.residuals.len()
    }

    pub fn motion_count(&self) -> usize {
        self.motion_takes.len()
    }

    fn camera_dim(&self) -> usize {
        6 * (self.image_ids.len() + self.motion_takes.len())
    }

    fn moved_point(&self, state: &BaState, r: &Residual) -> Vec3 {
        let x = state.points[r.point];
        match r.motion {
            Some(m) => state.motions[m].apply(&x),
            None => x,
        }
    }

    fn residual(&self, state: &BaState, r: &Residual) -> Option<Vec2> {
        let (rot, c) = &state.poses[r.image];
        let y = rot.apply(&(self.moved_point(state, r) - c));
        if y.z <= CHEIRALITY_EPS {
            return None;
        }
        let k = &self.intrinsics[r.image];
        Some(k.denormalize(&Vec2::new(y.x / y.z, y.y / y.z)) - r.pixel)
    }

    fn linearize(&self, state: &BaState, r: &Residual) -> Option<Linearized> {
        let (rot, c) = &state.poses[r.image];
        let xm = self.moved_point(state, r);
        let y = rot.apply(&(xm - c));
        if y.z <= CHEIRALITY_EPS {
            return None;
        }
        let k = &self.intrinsics[r.image];
        let res = k.denormalize(&Vec2::new(y.x / y.z, y.y / y.z)) - r.pixel;
        let p = projection_jacobian(k, &y);
        let rm = rot.matrix();
        let mut j_img = Mat2x6::zeros();
        j_img.fixed_view_mut::<2, 3>(0, 0).copy_from(&(p * (-skew(&y))));
        j_img.fixed_view_mut::<2, 3>(0, 3).copy_from(&(p * (-rm)));
        let base = 6 * r.image;
        for col in 0..6 {
            if self.fixed[base + col] {
                j_img.column_mut(col).fill(0.0);
            }
        }
        let pr = p * rm;
        let (j_mot, j_pt) = match r.motion {
            Some(m) => {
                let a = state.motions[m].rotation;
                let ax = a.apply(&state.points[r.point]);
                let mut jm = Mat2x6::zeros();
                jm.fixed_view_mut::<2, 3>(0, 0).copy_from(&(pr * (-skew(&ax))));
                jm.fixed_view_mut::<2, 3>(0, 3).copy_from(&pr);
                (Some(jm), pr * a.matrix())
            }
            None => (None, pr),
        };
        Some(Linearized { res, j_img, j_mot, j_pt })
    }

    fn loss(&self, options: &BaOptions, norm: f64) -> (f64, f64) {
        // (cost contribution, IRLS weight)
        let delta = 2.0 * options.tau;
        if options.robust && norm > delta {
            (delta * (norm - 0.5 * delta), delta / norm)
        } else {
            (0.5 * norm * norm, 1.0)
        }
    }

    /// Total cost, `None` when a residual loses cheirality.
    pub fn cost(&self, state: &BaState, options: &BaOptions) -> Option<f64> {
        let parts: Vec<Option<f64>> = self
            .residuals
            .par_iter()
            .map(|r| self.residual(state, r).map(|v| self.loss(options, v.norm()).0))
            .collect();
        let mut sum = 0.0;
        for p in parts {
            sum += p?;
        }
        Some(sum)
    }

    fn apply_step(&self, state: &BaState, dc: &DVector<f64>, dp: &[Vec3]) -> BaState {
        let mut next = state.clone();
        for (i, (rot, c)) in next.poses.iter_mut().enumerate() {
            let w = Vec3::new(dc[6 * i], dc[6 * i + 1], dc[6 * i + 2]);
            *rot = Rotation3::from_axis_angle(&w).mul(rot);
            *c += Vec3::new(dc[6 * i + 3], dc[6 * i + 4], dc[6 * i + 5]);
        }
        let off = 6 * self.image_ids.len();
        for (m, motion) in next.motions.iter_mut().enumerate() {
            let b = off + 6 * m;
            let w = Vec3::new(dc[b], dc[b + 1], dc[b + 2]);
            motion.rotation = Rotation3::from_axis_angle(&w).mul(&motion.rotation);
            motion.translation += Vec3::new(dc[b + 3], dc[b + 4], dc[b + 5]);
        }
        for (x, d) in next.points.iter_mut().zip(dp) {
            *x += d;
        }
        next
    }

    /// Analytic Jacobian against central differences with step `h` on up to
    /// 100 seeded random residuals. Returns the largest relative error.
    pub fn check_gradients(&self, h: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.residuals.len();
        let picks = sample(&mut rng, n, n.min(100));
        let mut worst: f64 = 0.0;
        let zero_c = DVector::zeros(self.camera_dim());
        let zero_p = vec![Vec3::zeros(); self.state.points.len()];
        for idx in picks.iter() {
            let r = &self.residuals[idx];
            let Some(lin) = self.linearize(&self.state, r) else { continue };
            let mut check = |analytic: Vec2, plus: &BaState, minus: &BaState| {
                let (Some(a), Some(b)) = (self.residual(plus, r), self.residual(minus, r)) else { return };
                let numeric = (a - b) / (2.0 * h);
                for k in 0..2 {
                    let scale = analytic[k].abs().max(numeric[k].abs()).max(1e-6);
                    worst = worst.max((analytic[k] - numeric[k]).abs() / scale);
                }
            };
            let mut blocks: Vec<(usize, Mat2x6)> = vec![(r.image, lin.j_img)];
            if let (Some(m), Some(jm)) = (r.motion, lin.j_mot) {
                blocks.push((self.image_ids.len() + m, jm));
            }
            for (block, j) in blocks {
                for col in 0..6 {
                    if block < self.image_ids.len() && self.fixed[6 * block + col] {
                        continue;
                    }
                    let mut d = zero_c.clone();
                    d[6 * block + col] = h;
                    let plus = self.apply_step(&self.state, &d, &zero_p);
                    d[6 * block + col] = -h;
                    let minus = self.apply_step(&self.state, &d, &zero_p);
                    check(j.column(col).into_owned(), &plus, &minus);
                }
            }
            for col in 0..3 {
                let mut dp = zero_p.clone();
                dp[r.point][col] = h;
                let plus = self.apply_step(&self.state, &zero_c, &dp);
                dp[r.point][col] = -h;
                let minus = self.apply_step(&self.state, &zero_c, &dp);
                check(lin.j_pt.column(col).into_owned(), &plus, &minus);
            }
        }
        worst
    }

    /// Damped Schur-complement step. `None` when the reduced system is not
    /// positive definite.
    fn step(&self, lins: &[Option<Linearized>], lambda: f64, options: &BaOptions) -> Option<(DVector<f64>, Vec<Vec3>)> {
        let cdim = self.camera_dim();
        let npts = self.state.points.len();
        let mut u = DMatrix::<f64>::zeros(cdim, cdim);
        let mut gc = DVector::<f64>::zeros(cdim);
        let mut v = vec![Matrix3::<f64>::zeros(); npts];
        let mut gp = vec![Vec3::zeros(); npts];
        // per point: camera-side block -> accumulated J_b^T J_p
        let mut w: Vec<Vec<(usize, Mat6x3)>> = vec![Vec::new(); npts];
        let n_img = self.image_ids.len();
        for (r, lin) in self.residuals.iter().zip(lins) {
            let Some(lin) = lin else { continue };
            let weight = self.loss(options, lin.res.norm()).1;
            let blocks: [(Option<usize>, Option<&Mat2x6>); 2] =
                [(Some(r.image), Some(&lin.j_img)), (r.motion.map(|m| n_img + m), lin.j_mot.as_ref())];
            for (bi, ji) in blocks.iter().filter_map(|(b, j)| Some(((*b)?, (*j)?))) {
                let g = ji.transpose() * lin.res * weight;
                for k in 0..6 {
                    gc[6 * bi + k] += g[k];
                }
                for (bj, jj) in blocks.iter().filter_map(|(b, j)| Some(((*b)?, (*j)?))) {
                    let h = ji.transpose() * jj * weight;
                    let mut view = u.view_mut((6 * bi, 6 * bj), (6, 6));
                    view += h;
                }
                let cross = ji.transpose() * lin.j_pt * weight;
                match w[r.point].iter_mut().find(|(b, _)| *b == bi) {
                    Some((_, m)) => *m += cross,
                    None => w[r.point].push((bi, cross)),
                }
            }
            v[r.point] += lin.j_pt.transpose() * lin.j_pt * weight;
            gp[r.point] += lin.j_pt.transpose() * lin.res * weight;
        }
        for i in 0..cdim {
            let d = u[(i, i)];
            u[(i, i)] = if i < 6 * n_img && self.fixed[i] { 1.0 } else { d + lambda * d.max(1e-9) };
        }
        let mut v_inv = Vec::with_capacity(npts);
        for vp in v.iter_mut() {
            for k in 0..3 {
                vp[(k, k)] += lambda * vp[(k, k)].max(1e-9);
            }
            v_inv.push(vp.try_inverse()?);
        }
        let mut s = u;
        let mut rhs = -gc;
        for p in 0..npts {
            let vi = &v_inv[p];
            for (bi, wi) in &w[p] {
                let wv = wi * vi;
                let t = wv * gp[p];
                for k in 0..6 {
                    rhs[6 * bi + k] += t[k];
                }
                for (bj, wj) in &w[p] {
                    let mut view = s.view_mut((6 * bi, 6 * bj), (6, 6));
                    view -= wv * wj.transpose();
                }
            }
        }
        let dc = s.cholesky()?.solve(&rhs);
        let dp = (0..npts)
            .map(|p| {
                let mut acc = -gp[p];
                for (b, wb) in &w[p] {
                    acc -= wb.transpose() * dc.rows(6 * b, 6);
                }
                v_inv[p] * acc
            })
            .collect();
        Some((dc, dp))
    }

    fn gradient_norm(&self, lins: &[Option<Linearized>], options: &BaOptions) -> f64 {
        let n_img = self.image_ids.len();
        let mut gc = DVector::<f64>::zeros(self.camera_dim());
        let mut gp = vec![Vec3::zeros(); self.state.points.len()];
        for (r, lin) in self.residuals.iter().zip(lins) {
            let Some(lin) = lin else { continue };
            let weight = self.loss(options, lin.res.norm()).1;
            let g = lin.j_img.transpose() * lin.res * weight;
            for k in 0..6 {
                gc[6 * r.image + k] += g[k];
            }
            if let (Some(m), Some(jm)) = (r.motion, &lin.j_mot) {
                let g = jm.transpose() * lin.res * weight;
                for k in 0..6 {
                    gc[6 * (n_img + m) + k] += g[k];
                }
            }
            gp[r.point] += lin.j_pt.transpose() * lin.res * weight;
        }
        gp.iter().fold(gc.amax(), |acc, g| acc.max(g.amax()))
    }

    /// Levenberg-Marquardt. Stops on relative cost decrease below 1e-9,
    /// gradient norm below 1e-10, the iteration cap, or runaway damping.
    pub fn solve(&mut self, options: &BaOptions) -> Result<BaReport> {
        let initial = self
            .cost(&self.state, options)
            .ok_or_else(|| Error::UnderConstrained("a point lies behind a camera at the start".into()))?;
        let mut cost = initial;
        let mut history = vec![cost];
        let mut lambda = 1e-4;
        let mut iterations = 0;
        let termination;
        'outer: loop {
            if iterations >= options.max_iterations {
                termination = "max_iterations".to_string();
                break;
            }
            // 1e-10 px RMS is roundoff for pixel coordinates
            if cost <= 0.5e-20 * self.residuals.len() as f64 {
                termination = "negligible_cost".to_string();
                break;
            }
            let lins: Vec<Option<Linearized>> =
                self.residuals.par_iter().map(|r| self.linearize(&self.state, r)).collect();
            if self.gradient_norm(&lins, options) < 1e-10 {
                termination = "gradient".to_string();
                break;
            }
            loop {
                if lambda > 1e12 {
                    log::warn!("damping exceeded 1e12; returning best parameters so far");
                    termination = "damping".to_string();
                    break 'outer;
                }
                let candidate = self
                    .step(&lins, lambda, options)
                    .map(|(dc, dp)| self.apply_step(&self.state, &dc, &dp))
                    .and_then(|s| self.cost(&s, options).map(|c| (s, c)));
                match candidate {
                    Some((state, c)) if c < cost => {
                        let rel = (cost - c) / cost;
                        self.state = state;
                        cost = c;
                        history.push(c);
                        iterations += 1;
                        lambda = (lambda * 0.1).max(1e-15);
                        if rel < 1e-9 {
                            termination = "relative_decrease".to_string();
                            break 'outer;
                        }
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
        }
        Ok(BaReport {
            initial_cost: initial,
            final_cost: cost,
            iterations,
            median_reproj_px: 0.0,
            cost_history: history,
            termination,
        })
    }

    /// Writes the parameters back into `scene` and refreshes foreground poses.
    pub fn write_back(&self, scene: &mut LabeledScene) {
        for (i, id) in self.image_ids.iter().enumerate() {
            if let Some(img) = scene.images.get_mut(id) {
                let (rot, c) = self.state.poses[i];
                img.background_pose.rotation = rot;
                img.background_pose.center = c;
            }
        }
        for (m, t) in self.motion_takes.iter().enumerate() {
            scene.motions.insert(*t, self.state.motions[m]);
        }
        for (p, id) in self.point_ids.iter().enumerate() {
            if let Some(pt) = scene.points.get_mut(id) {
                pt.position = self.state.points[p];
            }
        }
        scene.refresh_foreground_poses();
    }
}

/// One residual per labeled observation; unknown points are left out.
/// Foreground residuals of takes other than the reference go through the
/// take's motion. The gauge is fixed by the first reference image's pose and
/// one center coordinate of the second reference image.
pub fn build_problem(scene: &LabeledScene) -> Result<BaProblem> {
    let image_ids: Vec<ImageId> = scene.images.keys().copied().collect();
    if image_ids.len() < 2 {
        return Err(Error::UnderConstrained(format!("{} cameras, need 2", image_ids.len())));
    }
    let mut point_index = std::collections::BTreeMap::new();
    let mut point_ids = Vec::new();
    let mut motion_index = std::collections::BTreeMap::new();
    let mut motion_takes = Vec::new();
    let mut residuals = Vec::new();
    for (i, id) in image_ids.iter().enumerate() {
        let img = &scene.images[id];
        for obs in &img.observations {
            let Some(track) = obs.track else { continue };
            let Some(point) = scene.points.get(&track) else { continue };
            let motion = match point.label {
                Label::Unknown => continue,
                Label::Background => None,
                Label::Foreground if img.take == scene.reference => None,
                Label::Foreground => {
                    let next = motion_takes.len();
                    Some(*motion_index.entry(img.take).or_insert_with(|| {
                        motion_takes.push(img.take);
                        next
                    }))
                }
            };
            let next = point_ids.len();
            let p = *point_index.entry(track).or_insert_with(|| {
                point_ids.push(track);
                next
            });
            residuals.push(Residual { image: i, point: p, motion, pixel: obs.pixel });
        }
    }
    if point_ids.len() < 4 {
        return Err(Error::UnderConstrained(format!("{} labeled points, need 4", point_ids.len())));
    }
    let mut fixed = vec![false; 6 * image_ids.len()];
    let ref_images: Vec<usize> =
        (0..image_ids.len()).filter(|i| scene.images[&image_ids[*i]].take == scene.reference).collect();
    let anchors: Vec<usize> = if ref_images.len() >= 2 { ref_images } else { (0..image_ids.len()).collect() };
    let (a, b) = (anchors[0], anchors[1]);
    fixed[6 * a..6 * a + 6].fill(true);
    let baseline =
        scene.images[&image_ids[b]].background_pose.center - scene.images[&image_ids[a]].background_pose.center;
    let axis = baseline.iamax();
    fixed[6 * b + 3 + axis] = true;

    let state = BaState {
        poses: image_ids
            .iter()
            .map(|id| {
                let p = &scene.images[id].background_pose;
                (p.rotation, p.center)
            })
            .collect(),
        motions: motion_takes.iter().map(|t| scene.motion(*t)).collect(),
        points: point_ids.iter().map(|t| scene.points[t].position).collect(),
    };
    let intrinsics = image_ids.iter().map(|id| scene.images[id].background_pose.intrinsics).collect();
    let mut problem = BaProblem { image_ids, intrinsics, motion_takes, point_ids, residuals, fixed, state };
    // observations already behind their camera cannot be linearized
    let before = problem.residuals.len();
    let kept: Vec<Residual> =
        problem.residuals.iter().filter(|r| problem.residual(&problem.state, r).is_some()).copied().collect();
    problem.residuals = kept;
    if problem.residuals.len() < before {
        log::warn!("{} observations behind their camera left out", before - problem.residuals.len());
    }
    Ok(problem)
}

/// Builds, solves and writes back; the report carries the median labeled
/// reprojection error of the refined scene.
pub fn adjust(scene: &mut LabeledScene, options: &BaOptions) -> Result<BaReport> {
    let mut problem = build_problem(scene)?;
    let mut report = problem.solve(options)?;
    problem.write_back(scene);
    report.median_reproj_px = median(&mut scene.labeled_reprojection_errors());
    Ok(report)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_geodesic_distance, SimilarityTransform};
    use crate::merging::{merge_scene, plan_merge, similarity_from_points};
    use crate::scene::bounding_diameter;
    use crate::simulator::{generate, ground_truth_tracks, SimConfig};
    use rand::Rng;
    use rand_distr::{Distribution, UnitSphere};

    fn small(seed: u64, noise: f64) -> SimConfig {
        SimConfig {
            seed,
            takes: 2,
            background_points: 120,
            foreground_points: 60,
            cameras_per_take: 6,
            pixel_noise: noise,
            ..SimConfig::default()
        }
    }

    fn gt_scene(cfg: &SimConfig) -> LabeledScene {
        let out = generate(cfg).unwrap();
        let (tracks, labels) = ground_truth_tracks(&out);
        let plan = plan_merge(&out.scene, &tracks, &labels, 1, None).unwrap();
        merge_scene(&out.scene, &tracks, &labels, &plan).unwrap()
    }

    fn diameter(s: &LabeledScene) -> f64 {
        bounding_diameter(s.points.values().map(|p| &p.position))
    }

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::from(UnitSphere.sample(rng))
    }

    /// Rotations by `angle`, translations by `fraction` of the scene diameter.
    fn perturb(s: &mut LabeledScene, angle: f64, fraction: f64, seed: u64) {
        let shift = fraction * diameter(s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for img in s.images.values_mut() {
            let p = &mut img.background_pose;
            p.rotation = Rotation3::from_axis_angle(&(random_unit(&mut rng) * angle)).mul(&p.rotation);
            p.center += random_unit(&mut rng) * shift;
        }
        let reference = s.reference;
        for (_, m) in s.motions.iter_mut().filter(|(t, _)| **t != reference) {
            m.rotation = Rotation3::from_axis_angle(&(random_unit(&mut rng) * angle)).mul(&m.rotation);
            m.translation += random_unit(&mut rng) * shift;
        }
        for p in s.points.values_mut() {
            p.position += random_unit(&mut rng) * shift * rng.random_range(0.0..1.0);
        }
        s.refresh_foreground_poses();
    }

    #[test]
    fn ground_truth_start_is_already_optimal() {
        let mut s = gt_scene(&small(5, 0.0));
        let report = adjust(&mut s, &BaOptions::default()).unwrap();
        assert!(report.iterations <= 2, "{report:?}");
        assert!(report.final_cost < 1e-12, "{report:?}");
        assert!(report.median_reproj_px < 1e-6);
    }

    #[test]
    fn analytic_jacobian_matches_differences() {
        let mut s = gt_scene(&small(6, 0.5));
        perturb(&mut s, 0.01, 0.01, 1);
        let problem = build_problem(&s).unwrap();
        assert!(problem.motion_count() > 0);
        let err = problem.check_gradients(1e-6, 9);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn accepted_cost_never_increases() {
        for seed in 0..20 {
            let mut s = gt_scene(&small(100 + seed, 1.0));
            perturb(&mut s, 0.005, 0.005, seed);
            let report = adjust(&mut s, &BaOptions { max_iterations: 30, ..BaOptions::default() }).unwrap();
            assert!(report.final_cost <= report.initial_cost);
            for w in report.cost_history.windows(2) {
                assert!(w[1] <= w[0], "seed {seed}: {} then {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn perturbed_start_recovers_ground_truth() {
        let truth = gt_scene(&small(7, 0.0));
        let d = diameter(&truth);
        let mut s = truth.clone();
        perturb(&mut s, 0.01, 0.01, 3);
        let report = adjust(&mut s, &BaOptions::default()).unwrap();
        assert!(report.median_reproj_px < 1e-6, "{report:?}");
        let ids: Vec<_> = truth.points.keys().copied().collect();
        let src: Vec<Vec3> = ids.iter().map(|i| s.points[i].position).collect();
        let dst: Vec<Vec3> = ids.iter().map(|i| truth.points[i].position).collect();
        let g = similarity_from_points(&src, &dst).unwrap();
        for i in &ids {
            assert!((g.apply(&s.points[i].position) - truth.points[i].position).norm() < 1e-4 * d);
        }
        for (id, img) in &s.images {
            let p = img.background_pose.transported(&g);
            let t = &truth.images[id].background_pose;
            assert!(rotation_geodesic_distance(&p.rotation, &t.rotation) < 1e-4);
            assert!((p.center - t.center).norm() < 1e-4 * d);
        }
        for (t, m) in &s.motions {
            let m = m.conjugate(&g);
            let want = truth.motion(*t);
            assert!(rotation_geodesic_distance(&m.rotation, &want.rotation) < 1e-4);
            assert!((m.translation - want.translation).norm() < 1e-4 * d);
        }
    }

    #[test]
    fn cost_is_similarity_invariant() {
        let mut s = gt_scene(&small(8, 1.0));
        perturb(&mut s, 0.01, 0.01, 4);
        let opts = BaOptions::default();
        let before = build_problem(&s).unwrap();
        let g = SimilarityTransform::new(
            Rotation3::from_axis_angle(&Vec3::new(0.3, -0.2, 0.7)),
            Vec3::new(4.0, -1.0, 2.5),
            1.7,
        );
        let mut moved = s.clone();
        for img in moved.images.values_mut() {
            img.background_pose = img.background_pose.transported(&g);
        }
        for m in moved.motions.values_mut() {
            *m = m.conjugate(&g);
        }
        for p in moved.points.values_mut() {
            p.position = g.apply(&p.position);
        }
        moved.refresh_foreground_poses();
        let after = build_problem(&moved).unwrap();
        let (a, b) = (before.cost(&before.state, &opts).unwrap(), after.cost(&after.state, &opts).unwrap());
        assert!((a - b).abs() <= 1e-10 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn background_only_problem_has_no_motions() {
        let mut s = gt_scene(&small(9, 0.5));
        for p in s.points.values_mut() {
            if p.label == Label::Foreground {
                p.label = Label::Unknown;
            }
        }
        let problem = build_problem(&s).unwrap();
        assert_eq!(problem.motion_count(), 0);
        let before = s.motions.clone();
        let report = adjust(&mut s, &BaOptions::default()).unwrap();
        assert!(report.final_cost <= report.initial_cost);
        assert_eq!(s.motions, before);
    }

    #[test]
    fn huber_bounds_outlier_influence() {
        let mut s = gt_scene(&small(10, 0.5));
        let first = *s.images.keys().next().unwrap();
        for obs in s.images.get_mut(&first).unwrap().observations.iter_mut().take(5) {
            obs.pixel += Vec2::new(80.0, -60.0);
        }
        let mut plain = s.clone();
        let robust = adjust(&mut s, &BaOptions { robust: true, ..BaOptions::default() }).unwrap();
        let squared = adjust(&mut plain, &BaOptions::default()).unwrap();
        assert!(robust.median_reproj_px <= squared.median_reproj_px + 1e-9);
    }

    #[test]
    fn too_few_cameras_is_rejected() {
        let mut s = gt_scene(&small(11, 0.0));
        let keep = *s.images.keys().next().unwrap();
        s.images.retain(|id, _| *id == keep);
        assert!(matches!(build_problem(&s), Err(Error::UnderConstrained(_))));
    }

    #[test]
    fn report_text_lists_fields() {
        let r = BaReport {
            initial_cost: 2.0,
            final_cost: 1.0,
            iterations: 3,
            median_reproj_px: 0.5,
            cost_history: vec![2.0, 1.0],
            termination: "gradient".into(),
        };
        assert_eq!(
            r.to_text(),
            "initial_cost 2\nfinal_cost 1\niterations 3\nmedian_reproj_px 0.5\ntermination gradient\n"
        );
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&mut []), 0.0);
    }
}
