//! Attention kernels used for proxy generation and learning: grouped vector
//! attention, scalar dot-product attention, the point-transformer residual
//! layer, masked cross-attention, sinusoidal position embeddings and a
//! central-difference gradient checker.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::ProxyDecomposition;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Vec3};
use crate::scalar::Real;

/// Token-by-channel feature array.
pub type FeatureMatrix<T> = Matrix<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::Identity => v,
        }
    }
}

/// Affine layer `x ↦ x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::DimensionMismatch(format!(
                "bias of {} for {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![T::zero(); output],
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Matrix::identity(d),
            bias: vec![T::zero(); d],
        }
    }

    /// Gaussian weights with standard deviation `1/√input`, zero bias.
    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: gaussian_matrix(input, output, 1.0 / (input as f64).sqrt(), rng),
            bias: vec![T::zero(); output],
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    fn apply_row(&self, x: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.bias);
        for (k, &xk) in x.iter().enumerate() {
            if xk == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.weight.row(k)) {
                *o += xk * w;
            }
        }
    }
}

/// Multilayer perceptron with the activation applied between layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<T> {
    pub layers: Vec<Linear<T>>,
    pub activation: Activation,
}

impl<T: Real> MlpParams<T> {
    pub fn new(layers: Vec<Linear<T>>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::DimensionMismatch("MLP needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "layer output {} feeds input {}",
                    w[0].output_dim(),
                    w[1].input_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn single(layer: Linear<T>) -> Self {
        Self {
            layers: vec![layer],
            activation: Activation::Relu,
        }
    }

    /// Random MLP through the listed widths, e.g. `[3, d, d]`.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::random(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activation: Activation::Relu,
        }
    }

    /// MLP with the given widths whose output is identically zero.
    pub fn zero(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            activation: Activation::Relu,
        }
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Applies the MLP to one row.
    pub fn apply_row(&self, x: &[T]) -> Vec<T> {
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![T::zero(); layer.output_dim()];
            layer.apply_row(&cur, &mut next);
            if l < last {
                for v in &mut next {
                    *v = self.activation.apply(*v);
                }
            }
            cur = next;
        }
        cur
    }
}

/// Row-wise MLP application.
pub fn mlp_apply<T: Real>(params: &MlpParams<T>, x: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>> {
    if x.cols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} input channels for an MLP taking {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let out_dim = params.output_dim();
    let mut data = Vec::with_capacity(x.rows() * out_dim);
    for i in 0..x.rows() {
        data.extend(params.apply_row(x.row(i)));
    }
    Matrix::new(x.rows(), out_dim, data)
}

/// The five maps of a vector-attention block.
///
/// `phi`, `psi`, `alpha` take `input_dim` channels to `d`; `gamma` maps `d`
/// to `d`; `theta` embeds a relative 3D offset into `d` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorAttentionParams<T> {
    pub gamma: MlpParams<T>,
    pub phi: MlpParams<T>,
    pub psi: MlpParams<T>,
    pub alpha: MlpParams<T>,
    pub theta: MlpParams<T>,
}

impl<T: Real> VectorAttentionParams<T> {
    /// Single linear `phi`, `psi`, `alpha`; two-layer ReLU `gamma` and `theta`.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, d: usize, rng: &mut R) -> Self {
        Self {
            phi: MlpParams::random(&[input_dim, d], rng),
            psi: MlpParams::random(&[input_dim, d], rng),
            alpha: MlpParams::random(&[input_dim, d], rng),
            gamma: MlpParams::random(&[d, d, d], rng),
            theta: MlpParams::random(&[3, d, d], rng),
        }
    }

    /// Uniform weights over the neighborhood and identity values: the block
    /// averages its inputs.
    pub fn averaging(d: usize) -> Self {
        Self {
            phi: MlpParams::zero(&[d, d]),
            psi: MlpParams::zero(&[d, d]),
            alpha: MlpParams::single(Linear::identity(d)),
            gamma: MlpParams::zero(&[d, d, d]),
            theta: MlpParams::zero(&[3, d, d]),
        }
    }

    /// Zero value map: a residual layer built from these parameters is the
    /// identity.
    pub fn silent(d: usize) -> Self {
        Self {
            phi: MlpParams::zero(&[d, d]),
            psi: MlpParams::zero(&[d, d]),
            alpha: MlpParams::zero(&[d, d]),
            gamma: MlpParams::zero(&[d, d, d]),
            theta: MlpParams::zero(&[3, d, d]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.alpha.output_dim()
    }

    fn validate(&self) -> Result<()> {
        let d = self.alpha.output_dim();
        let ok = self.phi.input_dim() == self.psi.input_dim()
            && self.phi.input_dim() == self.alpha.input_dim()
            && self.phi.output_dim() == d
            && self.psi.output_dim() == d
            && self.gamma.input_dim() == d
            && self.gamma.output_dim() == d
            && self.theta.input_dim() == 3
            && self.theta.output_dim() == d;
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("inconsistent vector attention maps".into()))
        }
    }
}

/// Softmax of one slice in place, with the maximum subtracted first.
pub fn softmax_in_place<T: Real>(v: &mut [T]) {
    let m = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

/// Pools the `neighbors` of one query with channel-wise vector attention:
/// `Σ_i softmax_i(γ(φ_q − ψ_i + δ_i)) ⊙ (α_i + δ_i)`, `δ_i = θ(q − p_i)`.
fn vector_attention_pool<T: Real>(
    params: &VectorAttentionParams<T>,
    phi_q: &[T],
    q: Vec3<T>,
    neighbors: &[usize],
    coords: &[Vec3<T>],
    psi: &Matrix<T>,
    alpha: &Matrix<T>,
) -> Vec<T> {
    let d = phi_q.len();
    let mut logits = Matrix::zeros(neighbors.len(), d);
    let mut values = Matrix::zeros(neighbors.len(), d);
    let mut pre = vec![T::zero(); d];
    for (r, &i) in neighbors.iter().enumerate() {
        let rel = q - coords[i];
        let delta = params.theta.apply_row(&rel.to_array());
        for c in 0..d {
            pre[c] = phi_q[c] - psi[(i, c)] + delta[c];
        }
        logits.row_mut(r).copy_from_slice(&params.gamma.apply_row(&pre));
        for (c, v) in values.row_mut(r).iter_mut().enumerate() {
            *v = alpha[(i, c)] + delta[c];
        }
    }
    let mut out = vec![T::zero(); d];
    let mut col = vec![T::zero(); neighbors.len()];
    for c in 0..d {
        for (r, x) in col.iter_mut().enumerate() {
            *x = logits[(r, c)];
        }
        softmax_in_place(&mut col);
        let mut acc = T::zero();
        for (r, &w) in col.iter().enumerate() {
            acc += w * values[(r, c)];
        }
        out[c] = acc;
    }
    out
}

/// Attentive aggregation: one proxy feature per group of `decomp`.
///
/// `center_coords[j]` / `center_features` row `j` describe center `j`;
/// `point_coords` / `point_features` describe the grouped points.
pub fn attentive_aggregate<T: Real>(
    decomp: &ProxyDecomposition,
    center_coords: &[Vec3<T>],
    point_coords: &[Vec3<T>],
    center_features: &FeatureMatrix<T>,
    point_features: &FeatureMatrix<T>,
    params: &VectorAttentionParams<T>,
) -> Result<FeatureMatrix<T>> {
    params.validate()?;
    let g = decomp.num_groups();
    if center_coords.len() != g || center_features.rows() != g {
        return Err(Error::DimensionMismatch(format!(
            "{} groups, {} center coords, {} center features",
            g,
            center_coords.len(),
            center_features.rows()
        )));
    }
    if point_coords.len() != decomp.num_points() || point_features.rows() != decomp.num_points() {
        return Err(Error::DimensionMismatch(format!(
            "{} grouped points, {} coords, {} features",
            decomp.num_points(),
            point_coords.len(),
            point_features.rows()
        )));
    }
    let phi = mlp_apply(&params.phi, center_features)?;
    let psi = mlp_apply(&params.psi, point_features)?;
    let alpha = mlp_apply(&params.alpha, point_features)?;
    let d = params.output_dim();
    let mut out = Matrix::zeros(g, d);
    for j in 0..g {
        let pooled = vector_attention_pool(
            params,
            phi.row(j),
            center_coords[j],
            decomp.members(j),
            point_coords,
            &psi,
            &alpha,
        );
        out.row_mut(j).copy_from_slice(&pooled);
    }
    Ok(out)
}

/// Square `d × d` query/key/value projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            w_q: gaussian_matrix(d, d, s, rng),
            w_k: gaussian_matrix(d, d, s, rng),
            w_v: gaussian_matrix(d, d, s, rng),
        }
    }

    /// Zero value projection; the residual update is then the identity.
    pub fn silent(d: usize) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let d = self.w_q.rows();
        let square = |m: &Matrix<T>| m.rows() == d && m.cols() == d;
        if !(square(&self.w_q) && square(&self.w_k) && square(&self.w_v)) || d != channels {
            return Err(Error::DimensionMismatch(format!(
                "attention projections for {d} channels applied to {channels}"
            )));
        }
        Ok(())
    }
}

/// Residual scalar dot-product attention
/// `X_q + softmax(X_q W_Q (X_kv W_K)ᵀ / √d) X_kv W_V`.
///
/// Self-attention passes the same matrix twice; cross-attention passes the
/// other modality as `x_kv`.
pub fn scalar_attention<T: Real>(
    params: &AttentionParams<T>,
    x_q: &FeatureMatrix<T>,
    x_kv: &FeatureMatrix<T>,
) -> Result<FeatureMatrix<T>> {
    params.validate(x_q.cols())?;
    params.validate(x_kv.cols())?;
    let q = x_q.matmul(&params.w_q)?;
    let k = x_kv.matmul(&params.w_k)?;
    let v = x_kv.matmul(&params.w_v)?;
    let scale = T::one() / T::from_usize_lossy(x_q.cols()).sqrt();
    let logits = q.matmul_transpose(&k)?.map(|x| x * scale);
    let weights = softmax_rows(&logits);
    x_q.add(&weights.matmul(&v)?)
}

/// Interleaved sinusoidal embedding: channel `2i` holds
/// `sin(pos / 10000^(2i/channels))`, channel `2i+1` the cosine.
pub fn sinusoidal_pe<T: Real>(count: usize, channels: usize) -> Result<FeatureMatrix<T>> {
    let positions: Vec<T> = (0..count).map(T::from_usize_lossy).collect();
    sinusoidal_embedding(&positions, channels)
}

/// Sinusoidal embedding of arbitrary real positions.
pub fn sinusoidal_embedding<T: Real>(positions: &[T], channels: usize) -> Result<FeatureMatrix<T>> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::OddChannels(channels));
    }
    let freqs: Vec<T> = (0..channels / 2)
        .map(|i| T::lit(10000f64.powf(-(2.0 * i as f64) / channels as f64)))
        .collect();
    let mut out = Matrix::zeros(positions.len(), channels);
    for (r, &p) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (p * f).sin_cos();
            row[2 * i] = s;
            row[2 * i + 1] = c;
        }
    }
    Ok(out)
}

/// Indices of the `k` nearest coordinates to each coordinate (self
/// included, ties by index), ordered by distance.
pub fn knn_indices<T: Real>(coords: &[Vec3<T>], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > coords.len() {
        return Err(Error::KExceedsCenters {
            k,
            centers: coords.len(),
        });
    }
    Ok(coords
        .iter()
        .map(|&q| {
            let mut best: Vec<(T, usize)> = Vec::with_capacity(k + 1);
            for (i, &p) in coords.iter().enumerate() {
                let d = q.distance_squared(p);
                if best.len() == k && !(d < best[k - 1].0) {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| !(d < bd));
                best.insert(pos, (d, i));
                best.truncate(k);
            }
            best.into_iter().map(|(_, i)| i).collect()
        })
        .collect())
}

/// Point-transformer layer: every center adds the vector-attention residual
/// pooled over its `k` nearest centers.
pub fn point_transformer_layer<T: Real>(
    coords: &[Vec3<T>],
    features: &FeatureMatrix<T>,
    k: usize,
    params: &VectorAttentionParams<T>,
) -> Result<FeatureMatrix<T>> {
    params.validate()?;
    if features.rows() != coords.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} features for {} centers",
            features.rows(),
            coords.len()
        )));
    }
    if params.input_dim() != features.cols() || params.output_dim() != features.cols() {
        return Err(Error::DimensionMismatch(
            "point transformer must preserve the channel count".into(),
        ));
    }
    let neighbors = knn_indices(coords, k)?;
    let phi = mlp_apply(&params.phi, features)?;
    let psi = mlp_apply(&params.psi, features)?;
    let alpha = mlp_apply(&params.alpha, features)?;
    let mut out = features.clone();
    for (j, nbrs) in neighbors.iter().enumerate() {
        let residual =
            vector_attention_pool(params, phi.row(j), coords[j], nbrs, coords, &psi, &alpha);
        for (o, r) in out.row_mut(j).iter_mut().zip(residual) {
            *o += r;
        }
    }
    Ok(out)
}

fn masked_projection<T: Real>(x: &Matrix<T>, w: &Matrix<T>, mask: &[bool]) -> Result<Matrix<T>> {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for (k, &xk) in x.row(i).iter().enumerate() {
            for (o, &wk) in out.row_mut(i).iter_mut().zip(w.row(k)) {
                *o += xk * wk;
            }
        }
    }
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFiniteInput)
    }
}

/// Cross-attention from `f_points` into `f_pixels` with binary masks.
///
/// Masked rows are zeroed after projection (not removed), so they still take
/// softmax mass `exp(0)`; their feature values never reach the output.
pub fn masked_cross_attention<T: Real>(
    params: &AttentionParams<T>,
    f_pixels: &FeatureMatrix<T>,
    f_points: &FeatureMatrix<T>,
    pixel_mask: &[bool],
    point_mask: &[bool],
) -> Result<FeatureMatrix<T>> {
    params.validate(f_pixels.cols())?;
    params.validate(f_points.cols())?;
    if pixel_mask.len() != f_pixels.rows() || point_mask.len() != f_points.rows() {
        return Err(Error::DimensionMismatch(format!(
            "masks of {}/{} for {}/{} rows",
            pixel_mask.len(),
            point_mask.len(),
            f_pixels.rows(),
            f_points.rows()
        )));
    }
    let q = masked_projection(f_pixels, &params.w_q, pixel_mask)?;
    let k = masked_projection(f_points, &params.w_k, point_mask)?;
    let v = masked_projection(f_points, &params.w_v, point_mask)?;
    let scale = T::one() / T::from_usize_lossy(f_pixels.cols()).sqrt();
    let logits = q.matmul_transpose(&k)?.map(|x| x * scale);
    let weights = softmax_rows(&logits);
    let mut out = f_pixels.clone();
    for i in 0..out.rows() {
        let w = weights.row(i);
        for (c, o) in out.row_mut(i).iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &wij) in w.iter().enumerate() {
                acc += wij * v[(j, c)];
            }
            *o += acc;
        }
    }
    Ok(out)
}

/// Central-difference gradient `(f(x + εe_i) − f(x − εe_i)) / 2ε`.
pub fn finite_difference_gradient<T: Real>(
    mut f: impl FnMut(&[T]) -> T,
    x: &[T],
    eps: T,
) -> Result<Vec<T>> {
    let mut probe = x.to_vec();
    let two_eps = eps + eps;
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            if hi.is_finite() && lo.is_finite() {
                Ok((hi - lo) / two_eps)
            } else {
                Err(Error::NonFiniteEvaluation(i))
            }
        })
        .collect()
}

pub(crate) fn gaussian_matrix<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// Seeded Gaussian feature matrix.
pub fn random_features<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> FeatureMatrix<T> {
    gaussian_matrix(rows, cols, 1.0, rng)
}

/// Row `i` of `a` dotted with row `j` of `b`.
#[inline]
pub fn row_dot<T: Real>(a: &Matrix<T>, i: usize, b: &Matrix<T>, j: usize) -> T {
    dot(a.row(i), b.row(j))
}
