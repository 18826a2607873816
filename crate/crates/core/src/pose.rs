//! Camera pose from 2D-3D correspondences: EPnP inside a RANSAC loop.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finematch::CorrespondenceSet;
use crate::geom::{project_point, CameraIntrinsics, Pixel, RigidTransform};
use crate::linalg::{solve_linear, symmetric_eigen, Mat3, Matrix, Vec3};
use crate::scalar::Real;

pub const DEFAULT_RANSAC_ITERS: usize = 500;
pub const DEFAULT_INLIER_GATE: f64 = 1.0;
pub const MIN_SAMPLE: usize = 4;
const BETA_GN_ITERS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate<T: Real> {
    pub transform: RigidTransform<T>,
    pub inlier_indices: Vec<usize>,
    pub mean_reprojection_error: T,
}

/// Pixel distance between `px` and the projection of `p`, or `None` when
/// the point is behind the camera.
pub fn reprojection_error<T: Real>(
    k: &CameraIntrinsics<T>,
    t: &RigidTransform<T>,
    p: Vec3<T>,
    px: &Pixel<T>,
) -> Option<T> {
    project_point(k, t, p).ok().map(|q| q.distance(px))
}

fn mean_error<T: Real>(k: &CameraIntrinsics<T>, t: &RigidTransform<T>, pts: &[Vec3<T>], px: &[Pixel<T>]) -> T {
    let mut sum = T::zero();
    for (p, q) in pts.iter().zip(px) {
        match reprojection_error(k, t, *p, q) {
            Some(e) => sum += e,
            None => return T::infinity(),
        }
    }
    sum / T::from_usize_lossy(pts.len())
}

/// Rotation and translation with `cam ≈ R world + t` (Horn's closed form).
pub fn absolute_orientation<T: Real>(world: &[Vec3<T>], cam: &[Vec3<T>]) -> Result<RigidTransform<T>> {
    let n = T::from_usize_lossy(world.len());
    let mean = |v: &[Vec3<T>]| v.iter().fold(Vec3::zeros(), |a, &b| a + b) * (T::one() / n);
    let (mw, mc) = (mean(world), mean(cam));
    let mut s = [[T::zero(); 3]; 3];
    for (w, c) in world.iter().zip(cam) {
        let (a, b) = (*w - mw, *c - mc);
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] += a[i] * b[j];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let nmat = Matrix::from_rows(&[
        vec![sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        vec![syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        vec![szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        vec![sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])?;
    let (_, vecs) = symmetric_eigen(&nmat);
    let q: Vec<T> = vecs.column(3);
    let norm = q.iter().map(|v| *v * *v).sum::<T>().sqrt();
    if !(norm > T::zero()) {
        return Err(Error::DegenerateConfiguration);
    }
    let r = Mat3::from_quaternion([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]);
    let t = mc - r.mul_vec(mw);
    RigidTransform::new(r, t).map_err(|_| Error::DegenerateConfiguration)
}

fn least_squares<T: Real>(a: &Matrix<T>, b: &[T]) -> Option<Vec<T>> {
    let at = a.transpose();
    let ata = at.matmul(a).ok()?;
    let atb: Vec<T> = (0..a.cols())
        .map(|j| (0..a.rows()).map(|i| a[(i, j)] * b[i]).sum())
        .collect();
    solve_linear(&ata, &atb)
}

/// Control points in world coordinates plus barycentric weights per point.
struct ControlBasis<T> {
    controls: Vec<Vec3<T>>,
    alphas: Vec<Vec<T>>,
}

fn control_basis<T: Real>(pts: &[Vec3<T>]) -> Result<ControlBasis<T>> {
    let n = T::from_usize_lossy(pts.len());
    let c0 = pts.iter().fold(Vec3::zeros(), |a, &b| a + b) * (T::one() / n);
    let cov = Matrix::from_fn(3, 3, |i, j| pts.iter().map(|p| (p[i] - c0[i]) * (p[j] - c0[j])).sum::<T>() / n);
    let (vals, vecs) = symmetric_eigen(&cov);
    let top = vals[2];
    if !(top > T::zero()) || !(vals[1] > top * T::lit(1e-18)) {
        return Err(Error::DegenerateConfiguration);
    }
    let planar = !(vals[0] > top * T::lit(1e-14));
    let axes: Vec<usize> = if planar { vec![2, 1] } else { vec![2, 1, 0] };
    let dirs: Vec<Vec3<T>> = axes
        .iter()
        .map(|&a| {
            let s = vals[a].sqrt();
            Vec3::new(vecs[(0, a)] * s, vecs[(1, a)] * s, vecs[(2, a)] * s)
        })
        .collect();
    let mut controls = vec![c0];
    controls.extend(dirs.iter().map(|&d| c0 + d));
    // Coordinates along each scaled principal direction; the directions are
    // orthogonal, so projection gives the barycentric weights directly.
    let alphas = pts
        .iter()
        .map(|&p| {
            let d = p - c0;
            let mut a: Vec<T> = dirs.iter().map(|&e| d.dot(e) / e.norm_squared()).collect();
            let a0 = T::one() - a.iter().copied().sum::<T>();
            a.insert(0, a0);
            a
        })
        .collect();
    Ok(ControlBasis { controls, alphas })
}

/// Coefficient rows of the squared inter-control distances as quadratic
/// forms in the betas, ordered by pairs `(a, b)` with `a ≤ b`.
fn distance_system<T: Real>(kernel: &[Vec<T>], controls: &[Vec3<T>]) -> (Matrix<T>, Vec<T>, Vec<(usize, usize)>) {
    let nc = controls.len();
    let nb = kernel.len();
    let mut ctrl_pairs = Vec::new();
    for i in 0..nc {
        for j in (i + 1)..nc {
            ctrl_pairs.push((i, j));
        }
    }
    let mut prods = Vec::new();
    for a in 0..nb {
        for b in a..nb {
            prods.push((a, b));
        }
    }
    let diff = |v: &[T], i: usize, j: usize| Vec3::new(v[3 * i] - v[3 * j], v[3 * i + 1] - v[3 * j + 1], v[3 * i + 2] - v[3 * j + 2]);
    let l = Matrix::from_fn(ctrl_pairs.len(), prods.len(), |r, c| {
        let (i, j) = ctrl_pairs[r];
        let (a, b) = prods[c];
        let d = diff(&kernel[a], i, j).dot(diff(&kernel[b], i, j));
        if a == b {
            d
        } else {
            d * T::lit(2.0)
        }
    });
    let rho = ctrl_pairs
        .iter()
        .map(|&(i, j)| controls[i].distance_squared(controls[j]))
        .collect();
    (l, rho, prods)
}

fn refine_betas<T: Real>(l: &Matrix<T>, rho: &[T], prods: &[(usize, usize)], betas: &mut [T]) {
    let nb = betas.len();
    for _ in 0..BETA_GN_ITERS {
        let mut jac = Matrix::zeros(l.rows(), nb);
        let mut res = vec![T::zero(); l.rows()];
        for r in 0..l.rows() {
            let mut f = T::zero();
            for (c, &(a, b)) in prods.iter().enumerate() {
                let coef = l[(r, c)];
                f += coef * betas[a] * betas[b];
                jac[(r, a)] += coef * betas[b];
                jac[(r, b)] += coef * betas[a];
            }
            res[r] = rho[r] - f;
        }
        match least_squares(&jac, &res) {
            Some(step) if step.iter().all(|s| s.is_finite()) => {
                for (b, s) in betas.iter_mut().zip(step) {
                    *b += s;
                }
            }
            _ => break,
        }
    }
}

/// Initial betas using only the first `dim` kernel vectors.
fn initial_betas<T: Real>(l: &Matrix<T>, rho: &[T], prods: &[(usize, usize)], dim: usize, nb: usize) -> Option<Vec<T>> {
    // Products among the first `dim` kernel vectors when the system is
    // determined, otherwise only those pairing with the first vector.
    let full: Vec<usize> = (0..prods.len()).filter(|&c| prods[c].1 < dim).collect();
    let cols: Vec<usize> = if full.len() <= l.rows() {
        full
    } else {
        (0..prods.len()).filter(|&c| prods[c].0 == 0 && prods[c].1 < dim).collect()
    };
    let sub = Matrix::from_fn(l.rows(), cols.len(), |r, c| l[(r, cols[c])]);
    let mut x = least_squares(&sub, rho)?;
    let at = |a: usize, b: usize| cols.iter().position(|&c| prods[c] == (a, b));
    let b11 = x[at(0, 0)?];
    if b11 < T::zero() {
        x.iter_mut().for_each(|v| *v = -*v);
    }
    let b1 = x[at(0, 0)?].sqrt();
    if !(b1 > T::zero()) {
        return None;
    }
    let mut betas = vec![T::zero(); nb];
    betas[0] = b1;
    for (i, beta) in betas.iter_mut().enumerate().take(dim).skip(1) {
        *beta = x[at(0, i)?] / b1;
    }
    Some(betas)
}

/// EPnP pose from at least four point-pixel pairs.
pub fn epnp<T: Real>(points: &[Vec3<T>], pixels: &[Pixel<T>], k: &CameraIntrinsics<T>) -> Result<RigidTransform<T>> {
    if points.len() != pixels.len() {
        return Err(Error::DimensionMismatch(format!("{} points, {} pixels", points.len(), pixels.len())));
    }
    if points.len() < MIN_SAMPLE {
        return Err(Error::TooFewPoints {
            required: MIN_SAMPLE,
            got: points.len(),
        });
    }
    if !points.iter().all(|p| p.is_finite()) || !pixels.iter().all(|q| q.u.is_finite() && q.v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let basis = control_basis(points)?;
    let nc = basis.controls.len();

    // Two rows per correspondence in normalized image coordinates.
    let mut mtm = Matrix::zeros(3 * nc, 3 * nc);
    let mut row = vec![T::zero(); 3 * nc];
    for (alpha, px) in basis.alphas.iter().zip(pixels) {
        let xn = (px.u - k.cx) / k.fx;
        let yn = (px.v - k.cy) / k.fy;
        for (axis, coord) in [(0, xn), (1, yn)] {
            row.iter_mut().for_each(|v| *v = T::zero());
            for (j, &a) in alpha.iter().enumerate() {
                row[3 * j + axis] = a;
                row[3 * j + 2] = -a * coord;
            }
            for r in 0..3 * nc {
                if row[r] == T::zero() {
                    continue;
                }
                for c in 0..3 * nc {
                    mtm[(r, c)] += row[r] * row[c];
                }
            }
        }
    }
    let (_, vecs) = symmetric_eigen(&mtm);
    let kernel: Vec<Vec<T>> = (0..nc).map(|i| vecs.column(i)).collect();
    let (l, rho, prods) = distance_system(&kernel, &basis.controls);

    let mut best: Option<(T, RigidTransform<T>)> = None;
    for dim in 1..=nc {
        let Some(mut betas) = initial_betas(&l, &rho, &prods, dim, nc) else {
            continue;
        };
        refine_betas(&l, &rho, &prods, &mut betas);
        let Ok(t) = pose_from_betas(&kernel, &betas, &basis, points) else {
            continue;
        };
        let err = mean_error(k, &t, points, pixels);
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, t));
        }
    }
    best.map(|(_, t)| t).ok_or(Error::DegenerateConfiguration)
}

fn pose_from_betas<T: Real>(
    kernel: &[Vec<T>],
    betas: &[T],
    basis: &ControlBasis<T>,
    points: &[Vec3<T>],
) -> Result<RigidTransform<T>> {
    let nc = basis.controls.len();
    let mut x = vec![T::zero(); 3 * nc];
    for (v, &b) in kernel.iter().zip(betas) {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += b * *vi;
        }
    }
    let ctrl: Vec<Vec3<T>> = (0..nc).map(|j| Vec3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2])).collect();
    let mut cam: Vec<Vec3<T>> = basis
        .alphas
        .iter()
        .map(|a| a.iter().zip(&ctrl).fold(Vec3::zeros(), |acc, (&w, &c)| acc + c * w))
        .collect();
    let front = cam.iter().filter(|p| p.z > T::zero()).count();
    if 2 * front < cam.len() {
        cam.iter_mut().for_each(|p| *p = -*p);
    }
    if !cam.iter().all(|p| p.is_finite()) {
        return Err(Error::DegenerateConfiguration);
    }
    absolute_orientation(points, &cam)
}

/// EPnP over a correspondence set.
pub fn epnp_correspondences<T: Real>(c: &CorrespondenceSet<T>, k: &CameraIntrinsics<T>) -> Result<RigidTransform<T>> {
    let (pts, px): (Vec<_>, Vec<_>) = c.entries.iter().map(|e| (e.point, e.pixel)).unzip();
    epnp(&pts, &px, k)
}

/// Indices within the gate and their mean reprojection error.
pub fn consensus<T: Real>(
    k: &CameraIntrinsics<T>,
    t: &RigidTransform<T>,
    points: &[Vec3<T>],
    pixels: &[Pixel<T>],
    gate: T,
) -> (Vec<usize>, T) {
    let mut idx = Vec::new();
    let mut sum = T::zero();
    for (i, (p, q)) in points.iter().zip(pixels).enumerate() {
        if let Some(e) = reprojection_error(k, t, *p, q) {
            if e <= gate {
                idx.push(i);
                sum += e;
            }
        }
    }
    let mean = if idx.is_empty() {
        T::infinity()
    } else {
        sum / T::from_usize_lossy(idx.len())
    };
    (idx, mean)
}

fn better<T: Real>(a: &(Vec<usize>, T), b: &(Vec<usize>, T)) -> bool {
    a.0.len() > b.0.len() || (a.0.len() == b.0.len() && a.1 < b.1)
}

/// RNG for RANSAC iteration `i` under `seed`.
pub fn iteration_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Robust pose: minimal EPnP hypotheses scored by inlier count, ties broken
/// by mean inlier error, followed by a refit on the best consensus.
pub fn ransac_pnp<T: Real>(
    c: &CorrespondenceSet<T>,
    k: &CameraIntrinsics<T>,
    iterations: usize,
    gate: T,
    seed: u64,
) -> Result<PoseEstimate<T>> {
    let (pts, px): (Vec<_>, Vec<_>) = c.entries.iter().map(|e| (e.point, e.pixel)).unzip();
    ransac_pnp_pairs(&pts, &px, k, iterations, gate, seed)
}

pub fn ransac_pnp_pairs<T: Real>(
    points: &[Vec3<T>],
    pixels: &[Pixel<T>],
    k: &CameraIntrinsics<T>,
    iterations: usize,
    gate: T,
    seed: u64,
) -> Result<PoseEstimate<T>> {
    let n = points.len();
    if n != pixels.len() {
        return Err(Error::DimensionMismatch(format!("{n} points, {} pixels", pixels.len())));
    }
    if n < MIN_SAMPLE {
        return Err(Error::TooFewPoints {
            required: MIN_SAMPLE,
            got: n,
        });
    }
    let mut best: Option<(RigidTransform<T>, (Vec<usize>, T))> = None;
    for it in 0..iterations {
        let mut rng = iteration_rng(seed, it);
        let pick = index::sample(&mut rng, n, MIN_SAMPLE).into_vec();
        let sp: Vec<_> = pick.iter().map(|&i| points[i]).collect();
        let sx: Vec<_> = pick.iter().map(|&i| pixels[i]).collect();
        let Ok(t) = epnp(&sp, &sx, k) else { continue };
        let score = consensus(k, &t, points, pixels, gate);
        if best.as_ref().is_none_or(|(_, b)| better(&score, b)) {
            best = Some((t, score));
        }
    }
    let Some((mut t, mut score)) = best else {
        return Err(Error::NoConsensus(0));
    };
    if score.0.len() < MIN_SAMPLE {
        return Err(Error::NoConsensus(score.0.len()));
    }
    let sp: Vec<_> = score.0.iter().map(|&i| points[i]).collect();
    let sx: Vec<_> = score.0.iter().map(|&i| pixels[i]).collect();
    if let Ok(refit) = epnp(&sp, &sx, k) {
        let rescore = consensus(k, &refit, points, pixels, gate);
        if rescore.0.len() >= score.0.len() {
            t = refit;
            score = rescore;
        }
    }
    Ok(PoseEstimate {
        transform: t,
        inlier_indices: score.0,
        mean_reprojection_error: score.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_rotation, rotation_to_euler};
    use rand::Rng;

    fn scene(seed: u64, n: usize) -> (CameraIntrinsics<f64>, RigidTransform<f64>, Vec<Vec3<f64>>, Vec<Pixel<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::new(400.0, 380.0, 320.0, 240.0, 640, 480).unwrap();
        let t = RigidTransform::new(
            random_rotation(&mut rng),
            Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        )
        .unwrap();
        let inv = t.inverse();
        let mut pts = Vec::new();
        let mut px = Vec::new();
        for _ in 0..n {
            let z = rng.random_range(2.0..8.0);
            let pc = Vec3::new(rng.random_range(-0.7..0.7) * z, rng.random_range(-0.5..0.5) * z, z);
            let pw = inv.apply(pc);
            px.push(project_point(&k, &t, pw).unwrap());
            pts.push(pw);
        }
        (k, t, pts, px)
    }

    fn rre_deg(a: &RigidTransform<f64>, b: &RigidTransform<f64>) -> f64 {
        let d = a.rotation().transpose().mul_mat(b.rotation());
        rotation_to_euler(&d).degrees.iter().map(|v| v.abs()).sum()
    }

    #[test]
    fn horn_recovers_a_rigid_motion() {
        let (_, t, pts, _) = scene(3, 10);
        let cam: Vec<_> = pts.iter().map(|&p| t.apply(p)).collect();
        let est = absolute_orientation(&pts, &cam).unwrap();
        assert!(est.rotation().frobenius_distance(t.rotation()) < 1e-12);
        assert!((est.translation() - t.translation()).norm() < 1e-12);
    }

    #[test]
    fn epnp_noise_free() {
        for seed in 0..20 {
            let (k, t, pts, px) = scene(seed, 6);
            let est = epnp(&pts, &px, &k).unwrap();
            assert!(rre_deg(&est, &t) < 1e-6, "seed {seed}: {}", rre_deg(&est, &t));
            assert!((est.translation() - t.translation()).norm() < 1e-8);
        }
    }

    #[test]
    fn epnp_minimal_and_planar() {
        let (k, t, pts, px) = scene(11, 4);
        let est = epnp(&pts, &px, &k).unwrap();
        assert!(rre_deg(&est, &t) < 1e-6);

        let k = CameraIntrinsics::new(300.0, 300.0, 160.0, 120.0, 320, 240).unwrap();
        let t = RigidTransform::from_translation(Vec3::new(0.1, -0.2, 0.3));
        let pts: Vec<_> = (0..8)
            .map(|i| Vec3::new((i % 4) as f64 - 1.5, 0.7 * (i / 4) as f64 - 0.3, 5.0))
            .collect();
        let px: Vec<_> = pts.iter().map(|&p| project_point(&k, &t, p).unwrap()).collect();
        let est = epnp(&pts, &px, &k).unwrap();
        assert!(rre_deg(&est, &t) < 1e-6);
        assert!((est.translation() - t.translation()).norm() < 1e-8);
    }

    #[test]
    fn epnp_too_few() {
        let (k, _, pts, px) = scene(1, 3);
        assert_eq!(
            epnp(&pts, &px, &k),
            Err(Error::TooFewPoints { required: 4, got: 3 })
        );
    }

    #[test]
    fn ransac_exact_input_keeps_everything() {
        let (k, t, pts, px) = scene(5, 40);
        let est = ransac_pnp_pairs(&pts, &px, &k, 50, 1.0, 9).unwrap();
        assert_eq!(est.inlier_indices, (0..40).collect::<Vec<_>>());
        assert!(est.mean_reprojection_error < 1e-6);
        assert!(rre_deg(&est.transform, &t) < 1e-6);
    }
}
