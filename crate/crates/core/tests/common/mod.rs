//! Brute-force reference implementations shared by the integration tests.
//! Each one is written from the definition with plain loops and no shortcuts.

#![allow(dead_code)]

use i2preg::cloud::ProxyDecomposition;
use i2preg::finematch::CorrespondenceSet;
use i2preg::geom::{CameraIntrinsics, Pixel, RigidTransform};
use i2preg::linalg::{Matrix, Vec3};
use i2preg::sampling::{PatchLayout, SampleBatch};

/// Pixel of `p` through the 3×4 matrix `K [R | t]`, or `None` when the
/// homogeneous depth is not above `z_min`.
pub fn project_homogeneous(
    k: &CameraIntrinsics<f64>,
    t: &RigidTransform<f64>,
    p: Vec3<f64>,
    z_min: f64,
) -> Option<(f64, f64)> {
    let km = [[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]];
    let r = t.rotation().m;
    let tr = t.translation();
    let rt = [
        [r[0][0], r[0][1], r[0][2], tr.x],
        [r[1][0], r[1][1], r[1][2], tr.y],
        [r[2][0], r[2][1], r[2][2], tr.z],
    ];
    let mut proj = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            for (l, row) in rt.iter().enumerate() {
                proj[i][j] += km[i][l] * row[j];
            }
        }
    }
    let x = [p.x, p.y, p.z, 1.0];
    let mut h = [0.0; 3];
    for i in 0..3 {
        for j in 0..4 {
            h[i] += proj[i][j] * x[j];
        }
    }
    (h[2] > z_min).then(|| (h[0] / h[2], h[1] / h[2]))
}

/// Double-double value `hi + lo`.
#[derive(Clone, Copy)]
struct Dd(f64, f64);

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd(s, (a - (s - bb)) + (b - bb))
}

fn dd_add(x: Dd, y: Dd) -> Dd {
    let s = two_sum(x.0, y.0);
    two_sum(s.0, s.1 + x.1 + y.1)
}

fn dd_mul(x: Dd, y: Dd) -> Dd {
    let p = x.0 * y.0;
    two_sum(p, x.0.mul_add(y.0, -p) + x.0 * y.1 + x.1 * y.0)
}

fn dd_div(x: Dd, y: Dd) -> f64 {
    let q = x.0 / y.0;
    let r = dd_add(x, dd_mul(Dd(-q, 0.0), y));
    q + r.0 / y.0
}

/// [`project_homogeneous`] carried out in double-double arithmetic, close
/// enough to exact that the remaining difference belongs to the other side.
pub fn project_homogeneous_exact(
    k: &CameraIntrinsics<f64>,
    t: &RigidTransform<f64>,
    p: Vec3<f64>,
    z_min: f64,
) -> Option<(f64, f64)> {
    let zero = Dd(0.0, 0.0);
    let km = [[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]];
    let r = t.rotation().m;
    let tr = t.translation();
    let rt = [
        [r[0][0], r[0][1], r[0][2], tr.x],
        [r[1][0], r[1][1], r[1][2], tr.y],
        [r[2][0], r[2][1], r[2][2], tr.z],
    ];
    let mut proj = [[zero; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            for (l, row) in rt.iter().enumerate() {
                proj[i][j] = dd_add(proj[i][j], dd_mul(Dd(km[i][l], 0.0), Dd(row[j], 0.0)));
            }
        }
    }
    let x = [p.x, p.y, p.z, 1.0];
    let mut h = [zero; 3];
    for i in 0..3 {
        for j in 0..4 {
            h[i] = dd_add(h[i], dd_mul(proj[i][j], Dd(x[j], 0.0)));
        }
    }
    (h[2].0 > z_min).then(|| (dd_div(h[0], h[2]), dd_div(h[1], h[2])))
}

fn d2(a: Vec3<f64>, b: Vec3<f64>) -> f64 {
    let (x, y, z) = (a.x - b.x, a.y - b.y, a.z - b.z);
    x * x + y * y + z * z
}

/// Farthest point sampling by recomputing every distance to the selected
/// set at each step. Ties go to the lowest index.
pub fn fps_oracle(points: &[Vec3<f64>], count: usize, start: usize) -> Vec<usize> {
    let mut selected = vec![start];
    while selected.len() < count {
        let mut best: Option<(usize, f64)> = None;
        for (i, &p) in points.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let dist = selected.iter().map(|&s| d2(p, points[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, b)| dist > b) {
                best = Some((i, dist));
            }
        }
        selected.push(best.expect("candidate left").0);
    }
    selected
}

/// Nearest-center assignment. A center belongs to the first group it
/// heads; other ties go to the lowest center position.
pub fn group_oracle(points: &[Vec3<f64>], centers: &[usize]) -> Vec<usize> {
    (0..points.len())
        .map(|i| {
            if let Some(j) = centers.iter().position(|&c| c == i) {
                return j;
            }
            let mut best = 0;
            for j in 1..centers.len() {
                if d2(points[i], points[centers[j]]) < d2(points[i], points[centers[best]]) {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Sinkhorn scaling on `exp(Z)` without logarithms.
pub fn sinkhorn_direct(z: &Matrix<f64>, a: &[f64], b: &[f64], iters: usize) -> Matrix<f64> {
    let (r, c) = (z.rows(), z.cols());
    let kmat = z.map(f64::exp);
    let mut u = vec![1.0; r];
    let mut v = vec![1.0; c];
    for _ in 0..iters {
        for i in 0..r {
            let s: f64 = (0..c).map(|j| kmat[(i, j)] * v[j]).sum();
            u[i] = a[i] / s;
        }
        for j in 0..c {
            let s: f64 = (0..r).map(|i| kmat[(i, j)] * u[i]).sum();
            v[j] = b[j] / s;
        }
    }
    Matrix::from_fn(r, c, |i, j| u[i] * kmat[(i, j)] * v[j])
}

/// `−Σ W log P / Σ W` over positive weights, `None` when a positive weight
/// meets a non-positive plan entry.
pub fn nll_loop(plan: &Matrix<f64>, w: &Matrix<f64>) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            if w[(i, j)] > 0.0 {
                if plan[(i, j)] <= 0.0 {
                    return None;
                }
                num -= w[(i, j)] * plan[(i, j)].max(1e-30).ln();
                den += w[(i, j)];
            }
        }
    }
    Some(if den > 0.0 { num / den } else { 0.0 })
}

/// Patch under a pixel by explicit bounds, `None` outside the image.
pub fn patch_oracle(layout: &PatchLayout, u: f64, v: f64) -> Option<usize> {
    let w = layout.w as f64;
    for row in 0..layout.grid_rows {
        for col in 0..layout.grid_cols {
            let (u0, v0) = (col as f64 * w, row as f64 * w);
            if u >= u0 && u < u0 + w && v >= v0 && v < v0 + w {
                return Some(row * layout.grid_cols + col);
            }
        }
    }
    None
}

/// Coarse weights entry by entry: every cell recounts the set's points
/// landing in the patch.
pub fn coarse_weights_oracle(
    k: &CameraIntrinsics<f64>,
    gt: &RigidTransform<f64>,
    points: &[Vec3<f64>],
    decomp: &ProxyDecomposition,
    layout: &PatchLayout,
) -> Matrix<f64> {
    let patch: Vec<Option<usize>> = points
        .iter()
        .map(|&p| {
            i2preg::geom::project_point(k, gt, p)
                .ok()
                .and_then(|px| patch_oracle(layout, px.u, px.v))
        })
        .collect();
    let (ni, nq) = (layout.num_patches(), decomp.num_groups());
    let mut w = Matrix::zeros(ni + 1, nq + 1);
    let mut left = Matrix::zeros(ni, nq);
    for i in 0..ni {
        let total = patch.iter().filter(|&&p| p == Some(i)).count() as f64;
        let mut s = 0.0;
        for j in 0..nq {
            let count = decomp.members(j).iter().filter(|&&p| patch[p] == Some(i)).count() as f64;
            let r_left = count / decomp.members(j).len() as f64;
            let r_right = if total == 0.0 { 0.0 } else { count / total };
            left[(i, j)] = r_left;
            w[(i, j)] = r_left.min(r_right);
            s += r_right;
        }
        w[(i, nq)] = (1.0 - s).clamp(0.0, 1.0);
    }
    for j in 0..nq {
        let s: f64 = (0..ni).map(|i| left[(i, j)]).sum();
        w[(ni, j)] = (1.0 - s).clamp(0.0, 1.0);
    }
    w
}

/// Binary fine weights with slack edges.
pub fn fine_weights_oracle(
    batch: &SampleBatch<f64>,
    k: &CameraIntrinsics<f64>,
    gt: &RigidTransform<f64>,
    points: &[Vec3<f64>],
    tau: f64,
) -> Matrix<f64> {
    let (m, n) = (batch.pixel_coords.len(), batch.point_indices.len());
    let mut w = Matrix::zeros(m + 1, n + 1);
    let proj: Vec<_> = batch
        .point_indices
        .iter()
        .map(|&idx| i2preg::geom::project_point(k, gt, points[idx]).ok())
        .collect();
    for i in 0..m {
        for j in 0..n {
            if !batch.pixel_mask[i] || !batch.point_mask[j] {
                continue;
            }
            let Some(q) = proj[j] else {
                continue;
            };
            let px = batch.pixel_coords[i];
            if ((px.u - q.u).powi(2) + (px.v - q.v).powi(2)).sqrt() <= tau {
                w[(i, j)] = 1.0;
            }
        }
    }
    for j in 0..n {
        let s: f64 = (0..m).map(|i| w[(i, j)]).sum();
        w[(m, j)] = (1.0 - s).max(0.0);
    }
    for i in 0..m {
        let s: f64 = (0..n).map(|j| w[(i, j)]).sum();
        w[(i, n)] = (1.0 - s).max(0.0);
    }
    w
}

/// Fraction of pairs whose pixel is strictly within `tau_d` of the
/// ground-truth projection of its point.
pub fn inlier_ratio_loop(
    c: &CorrespondenceSet<f64>,
    k: &CameraIntrinsics<f64>,
    gt: &RigidTransform<f64>,
    tau_d: f64,
) -> f64 {
    if c.entries.is_empty() {
        return 0.0;
    }
    let mut hits = 0;
    for e in &c.entries {
        if let Ok(q) = i2preg::geom::project_point(k, gt, e.point) {
            if Pixel::distance(&q, &e.pixel) < tau_d {
                hits += 1;
            }
        }
    }
    hits as f64 / c.entries.len() as f64
}

/// Seeded standard Gaussian matrix.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    use rand::SeedableRng;
    i2preg::attention::random_features(rows, cols, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}
