//! The neighbor-pooling network.
//!
//! ```text
//! v_x    = relu(W_xᵀ x + b_x)
//! v_z    = max_i relu(W_zᵀ z_i + b_z)        (elementwise over neighbors)
//! scores = W_yᵀ [v_x; v_z (; tag indicator)] + b_y
//! ```
//!
//! Features are stored as f32 and promoted to f64 on entry; all arithmetic
//! is in f64.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::optim::ParamSet;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub dropout_p: f64,
    /// Width of the appended binary tag indicator block, if enabled.
    #[serde(default)]
    pub tag_vector_width: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 500,
            dropout_p: 0.5,
            tag_vector_width: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidArgument("hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!("dropout p = {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w_x: Matrix,
    pub b_x: Vec<f64>,
    pub w_z: Matrix,
    pub b_z: Vec<f64>,
    /// Rows: `h` image rows, `h` neighbor rows, then the optional tag block.
    pub w_y: Matrix,
    pub b_y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub labels: usize,
    pub tag_width: usize,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let Dims {
            input: d,
            hidden: h,
            labels: l,
            tag_width,
        } = dims;
        ModelParams {
            w_x: Matrix::zeros(d, h),
            b_x: vec![0.0; h],
            w_z: Matrix::zeros(d, h),
            b_z: vec![0.0; h],
            w_y: Matrix::zeros(2 * h + tag_width, l),
            b_y: vec![0.0; l],
        }
    }

    pub fn dims(&self) -> Dims {
        let h = self.b_x.len();
        Dims {
            input: self.w_x.rows(),
            hidden: h,
            labels: self.b_y.len(),
            tag_width: self.w_y.rows() - 2 * h,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

impl ParamSet for ModelParams {
    fn arrays(&self) -> Vec<&[f64]> {
        vec![
            self.w_x.as_slice(),
            &self.b_x,
            self.w_z.as_slice(),
            &self.b_z,
            self.w_y.as_slice(),
            &self.b_y,
        ]
    }

    fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_x.as_mut_slice(),
            &mut self.b_x,
            self.w_z.as_mut_slice(),
            &mut self.b_z,
            self.w_y.as_mut_slice(),
            &mut self.b_y,
        ]
    }

    fn regularized(&self) -> Vec<bool> {
        vec![true, false, true, false, true, false]
    }
}

/// He-normal initialization: weights ~ N(0, 2 / fan_in), biases zero.
pub fn init_params(dims: Dims, seed: u64) -> Result<ModelParams> {
    if dims.input == 0 || dims.hidden == 0 || dims.labels == 0 {
        return Err(Error::InvalidArgument(format!("degenerate model dimensions {dims:?}")));
    }
    let mut rng = seed::rng(seed);
    let mut p = ModelParams::zeros(dims);
    for m in [&mut p.w_x, &mut p.w_z, &mut p.w_y] {
        let std = (2.0 / m.rows() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in m.as_mut_slice() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(p)
}

/// Inverted-dropout scale factors (0 or 1/(1-p)) for the two hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl DropoutMasks {
    pub fn sample(hidden: usize, p: f64, rng: &mut impl Rng) -> Self {
        let keep = 1.0 / (1.0 - p);
        let mut draw = || {
            (0..hidden)
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        DropoutMasks { x: draw(), z: draw() }
    }
}

/// One forward input: the image, a neighborhood, and optionally the active
/// positions of the tag indicator block.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub image: &'a [f32],
    pub neighbors: Vec<&'a [f32]>,
    pub tags: Option<&'a [u32]>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: Dims,
    image: Vec<f32>,
    neighbors: Vec<Vec<f32>>,
    tags: Option<Vec<u32>>,
    pre_x: Vec<f64>,
    pre_z: Vec<Vec<f64>>,
    /// Pooled neighbor state before dropout.
    pub v_z: Vec<f64>,
    pub v_x: Vec<f64>,
    /// Winning neighbor per hidden coordinate (first on ties); empty when
    /// the neighborhood is empty.
    pub argmax: Vec<usize>,
    masks: Option<DropoutMasks>,
    hidden_x: Vec<f64>,
    hidden_z: Vec<f64>,
}

/// Per-label decomposition of forward scores by `W_y` row block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub image: Vec<f64>,
    pub neighbor: Vec<f64>,
    pub tag: Option<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Attribution {
    /// Recombines the parts in the order the forward pass sums them.
    pub fn total(&self) -> Vec<f64> {
        (0..self.bias.len())
            .map(|c| {
                let mut s = self.image[c] + self.neighbor[c];
                if let Some(t) = &self.tag {
                    s += t[c];
                }
                s + self.bias[c]
            })
            .collect()
    }
}

fn check_finite(xs: &[f32], what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} features")))
    }
}

fn hidden_layer(w: &Matrix, b: &[f64], x: &[f32]) -> Vec<f64> {
    let mut pre = b.to_vec();
    w.accumulate_transposed(x, 0, &mut pre);
    pre
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&a| a.max(0.0)).collect()
}

fn attribute_hidden(params: &ModelParams, hx: &[f64], hz: &[f64], tags: Option<&[u32]>) -> Attribution {
    let h = hx.len();
    let l = params.b_y.len();
    let mut image = vec![0.0; l];
    params.w_y.accumulate_transposed(hx, 0, &mut image);
    let mut neighbor = vec![0.0; l];
    params.w_y.accumulate_transposed(hz, h, &mut neighbor);
    let tag = tags.map(|active| {
        let mut t = vec![0.0; l];
        for &p in active {
            axpy(1.0, params.w_y.row(2 * h + p as usize), &mut t);
        }
        t
    });
    Attribution {
        image,
        neighbor,
        tag,
        bias: params.b_y.clone(),
    }
}

/// Runs the network on one example. `masks` enables training-mode dropout.
pub fn forward(params: &ModelParams, input: &Example, masks: Option<&DropoutMasks>) -> Result<(Vec<f64>, ForwardCache)> {
    let dims = params.dims();
    let d = dims.input;
    if input.image.len() != d || input.neighbors.iter().any(|z| z.len() != d) {
        return Err(Error::Shape(format!("feature width differs from model input width {d}")));
    }
    check_finite(input.image, "image")?;
    for z in &input.neighbors {
        check_finite(z, "neighbor")?;
    }
    match (input.tags, dims.tag_width) {
        (Some(active), w) if w > 0 => {
            if active.iter().any(|&p| p as usize >= w) {
                return Err(Error::Shape(format!("tag position beyond tag block width {w}")));
            }
        }
        (None, 0) => {}
        (Some(_), _) => return Err(Error::Shape("tag vector given but model has no tag block".into())),
        (None, _) => return Err(Error::Shape("model expects a tag vector".into())),
    }
    if let Some(m) = masks {
        if m.x.len() != dims.hidden || m.z.len() != dims.hidden {
            return Err(Error::Shape("dropout mask width".into()));
        }
    }

    let pre_x = hidden_layer(&params.w_x, &params.b_x, input.image);
    let v_x = relu(&pre_x);
    let pre_z: Vec<Vec<f64>> = input
        .neighbors
        .iter()
        .map(|z| hidden_layer(&params.w_z, &params.b_z, z))
        .collect();

    let h = dims.hidden;
    let mut v_z = vec![0.0; h];
    let mut argmax = Vec::new();
    if !pre_z.is_empty() {
        argmax = vec![0; h];
        for j in 0..h {
            let mut best = pre_z[0][j].max(0.0);
            for (i, pz) in pre_z.iter().enumerate().skip(1) {
                let v = pz[j].max(0.0);
                if v > best {
                    best = v;
                    argmax[j] = i;
                }
            }
            v_z[j] = best;
        }
    }

    let (hidden_x, hidden_z) = match masks {
        Some(m) => (
            v_x.iter().zip(&m.x).map(|(a, s)| a * s).collect(),
            v_z.iter().zip(&m.z).map(|(a, s)| a * s).collect(),
        ),
        None => (v_x.clone(), v_z.clone()),
    };
    let scores = attribute_hidden(params, &hidden_x, &hidden_z, input.tags).total();
    let cache = ForwardCache {
        dims,
        image: input.image.to_vec(),
        neighbors: input.neighbors.iter().map(|z| z.to_vec()).collect(),
        tags: input.tags.map(<[u32]>::to_vec),
        pre_x,
        pre_z,
        v_z,
        v_x,
        argmax,
        masks: masks.cloned(),
        hidden_x,
        hidden_z,
    };
    Ok((scores, cache))
}

/// Mean evaluation-mode score over the given neighborhoods.
pub fn score_image(
    params: &ModelParams,
    image: &[f32],
    neighborhoods: &[Vec<&[f32]>],
    tags: Option<&[u32]>,
) -> Result<Vec<f64>> {
    if neighborhoods.is_empty() {
        return Err(Error::InvalidArgument("at least one neighborhood is required".into()));
    }
    let mut total = vec![0.0; params.b_y.len()];
    for nb in neighborhoods {
        let ex = Example {
            image,
            neighbors: nb.clone(),
            tags,
        };
        let (s, _) = forward(params, &ex, None)?;
        axpy(1.0, &s, &mut total);
    }
    let n = neighborhoods.len() as f64;
    Ok(total.into_iter().map(|v| v / n).collect())
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum of one-vs-all logistic losses `Σ_c softplus(-y_c s_c)` with
/// `y_c = ±1`, and its gradient with respect to the scores.
pub fn loss_and_grad_scores(scores: &[f64], labels: &[u32]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (c, &s) in scores.iter().enumerate() {
        let y = if labels.contains(&(c as u32)) { 1.0 } else { -1.0 };
        loss += softplus(-y * s);
        grad.push(-y * sigmoid(-y * s));
    }
    (loss, grad)
}

/// Backpropagates `dscores` through the computation recorded in `cache`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dscores: &[f64]) -> Result<ModelParams> {
    let dims = params.dims();
    if dims != cache.dims {
        return Err(Error::Shape(format!(
            "cache built for {:?}, parameters are {dims:?}",
            cache.dims
        )));
    }
    if dscores.len() != dims.labels {
        return Err(Error::Shape("dscores length".into()));
    }
    let h = dims.hidden;
    let mut g = ModelParams::zeros(dims);

    g.b_y.copy_from_slice(dscores);
    g.w_y.add_outer(&cache.hidden_x, 0, dscores);
    g.w_y.add_outer(&cache.hidden_z, h, dscores);
    if let Some(active) = &cache.tags {
        for &p in active {
            axpy(1.0, dscores, g.w_y.row_mut(2 * h + p as usize));
        }
    }

    let back = |row_offset: usize, mask: Option<&Vec<f64>>, pre: Option<&[f64]>| -> Vec<f64> {
        (0..h)
            .map(|j| {
                let mut v = crate::linalg::dot(params.w_y.row(row_offset + j), dscores);
                if let Some(m) = mask {
                    v *= m[j];
                }
                if let Some(pre) = pre {
                    if pre[j] <= 0.0 {
                        v = 0.0;
                    }
                }
                v
            })
            .collect()
    };
    let masks = cache.masks.as_ref();
    let dpre_x = back(0, masks.map(|m| &m.x), Some(&cache.pre_x));
    g.b_x.copy_from_slice(&dpre_x);
    g.w_x.add_outer(&cache.image, 0, &dpre_x);

    if !cache.neighbors.is_empty() {
        let dv_z = back(h, masks.map(|m| &m.z), None);
        let mut per_neighbor = vec![vec![0.0; h]; cache.neighbors.len()];
        for j in 0..h {
            let i = cache.argmax[j];
            if cache.pre_z[i][j] > 0.0 {
                per_neighbor[i][j] = dv_z[j];
            }
        }
        for (i, dpre) in per_neighbor.iter().enumerate() {
            if dpre.iter().all(|&v| v == 0.0) {
                continue;
            }
            axpy(1.0, dpre, &mut g.b_z);
            g.w_z.add_outer(&cache.neighbors[i], 0, dpre);
        }
    }
    Ok(g)
}

/// `(λ/2)(‖W_x‖² + ‖W_z‖² + ‖W_y‖²)` and its gradient (biases excluded).
pub fn l2_term(params: &ModelParams, lambda: f64) -> (f64, ModelParams) {
    let mut grad = ModelParams::zeros(params.dims());
    let penalty = crate::optim::add_l2(params, lambda, &mut grad);
    (penalty, grad)
}

/// Splits the scores recorded in an evaluation-mode cache into image,
/// neighbor, tag and bias contributions.
pub fn attribute_scores(params: &ModelParams, cache: &ForwardCache) -> Result<Attribution> {
    if params.dims() != cache.dims {
        return Err(Error::Shape("cache does not match parameters".into()));
    }
    if cache.masks.is_some() {
        return Err(Error::InvalidArgument("attribution needs an evaluation-mode cache".into()));
    }
    Ok(attribute_hidden(params, &cache.hidden_x, &cache.hidden_z, cache.tags.as_deref()))
}

/// Maps an image's tag ids to positions in the model's tag indicator block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagVectorizer {
    vocab: Vec<u32>,
}

impl TagVectorizer {
    pub fn new(mut vocab: Vec<u32>) -> Self {
        vocab.sort_unstable();
        vocab.dedup();
        TagVectorizer { vocab }
    }

    pub fn width(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[u32] {
        &self.vocab
    }

    /// Block positions of the in-vocabulary terms, ascending.
    pub fn positions(&self, terms: &[u32]) -> Vec<u32> {
        terms
            .iter()
            .filter_map(|t| self.vocab.binary_search(t).ok().map(|p| p as u32))
            .collect()
    }
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NLPM";
pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelParams {
    /// Binary checkpoint: magic, version, `d h L tag_width` as u64, then every
    /// array as little-endian f64 in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        let d = self.dims();
        for v in [d.input, d.hidden, d.labels, d.tag_width] {
            w.write_all(&(v as u64).to_le_bytes()).map_err(io)?;
        }
        for a in self.arrays() {
            for v in a {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let truncated = |detail: &str| Error::Truncated {
            path: path.into(),
            record: 0,
            detail: detail.into(),
        };
        if bytes.len() < 40 {
            return Err(truncated("checkpoint header"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let header: Vec<usize> = bytes[8..40]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let dims = Dims {
            input: header[0],
            hidden: header[1],
            labels: header[2],
            tag_width: header[3],
        };
        let mut p = ModelParams::zeros(dims);
        let total: usize = p.arrays().iter().map(|a| a.len()).sum();
        if bytes.len() != 40 + 8 * total {
            return Err(truncated("checkpoint body"));
        }
        let mut values = bytes[40..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for a in p.arrays_mut() {
            for v in a.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("{}: checkpoint values", path.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn dims(d: usize, h: usize, l: usize, t: usize) -> Dims {
        Dims {
            input: d,
            hidden: h,
            labels: l,
            tag_width: t,
        }
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
    }

    /// Perturbs parameters so biases are nonzero too.
    fn random_params(dims: Dims, seed: u64) -> ModelParams {
        let mut p = init_params(dims, seed).unwrap();
        let mut rng = seed::rng(seed ^ 0xabc);
        for a in p.arrays_mut() {
            for v in a.iter_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    /// Straight-line dense evaluation written independently of `forward`.
    fn dense_oracle(p: &ModelParams, x: &[f32], zs: &[Vec<f32>], tags: Option<&[u32]>) -> Vec<f64> {
        let Dims {
            input: d,
            hidden: h,
            labels: l,
            tag_width,
        } = p.dims();
        let hid = |w: &Matrix, b: &[f64], v: &[f32]| -> Vec<f64> {
            (0..h)
                .map(|j| {
                    let mut s = b[j];
                    for i in 0..d {
                        s += w.get(i, j) * v[i] as f64;
                    }
                    if s > 0.0 {
                        s
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let vx = hid(&p.w_x, &p.b_x, x);
        let mut vz = vec![f64::NEG_INFINITY; h];
        for z in zs {
            for (j, v) in hid(&p.w_z, &p.b_z, z).into_iter().enumerate() {
                vz[j] = vz[j].max(v);
            }
        }
        let mut input = vx;
        input.extend(vz);
        let mut tv = vec![0.0; tag_width];
        if let Some(t) = tags {
            for &i in t {
                tv[i as usize] = 1.0;
            }
        }
        input.extend(tv);
        (0..l)
            .map(|c| p.b_y[c] + (0..input.len()).map(|r| p.w_y.get(r, c) * input[r]).sum::<f64>())
            .collect()
    }

    #[test]
    fn zero_params_give_zero_scores() {
        let p = ModelParams::zeros(dims(3, 2, 4, 0));
        let x = [1.0f32, -2.0, 3.0];
        let (s, _) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&x],
                tags: None,
            },
            None,
        )
        .unwrap();
        assert_eq!(s, vec![0.0; 4]);
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let p = init_params(dims(4096, 500, 81, 0), 1).unwrap();
        assert_eq!(p.w_x.shape(), (4096, 500));
        assert_eq!(p.w_z.shape(), (4096, 500));
        assert_eq!(p.w_y.shape(), (1000, 81));
        assert!(p.b_x.iter().chain(&p.b_z).chain(&p.b_y).all(|&b| b == 0.0));
        assert!(init_params(dims(0, 1, 1, 0), 0).is_err());
    }

    #[test]
    fn init_std_follows_fan_in() {
        let d = 1000;
        let p = init_params(dims(d, 200, 3, 0), 9).unwrap();
        let w = p.w_x.as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = (2.0 / d as f64).sqrt();
        assert!((var.sqrt() / target - 1.0).abs() < 0.05);
        assert_eq!(init_params(dims(d, 200, 3, 0), 9).unwrap(), p);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut rng = seed::rng(77);
        for (trial, tag_width) in [(0u64, 0usize), (1, 0), (2, 6), (3, 6)] {
            let p = random_params(dims(7, 5, 4, tag_width), trial);
            let x = random_vec(&mut rng, 7);
            let zs: Vec<Vec<f32>> = (0..3).map(|_| random_vec(&mut rng, 7)).collect();
            let tags: Option<Vec<u32>> = (tag_width > 0).then(|| vec![0, 3, 5]);
            let ex = Example {
                image: &x,
                neighbors: zs.iter().map(|z| z.as_slice()).collect(),
                tags: tags.as_deref(),
            };
            let (s, _) = forward(&p, &ex, None).unwrap();
            let want = dense_oracle(&p, &x, &zs, tags.as_deref());
            for (a, b) in s.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_neighbor_pool_is_identity() {
        let p = random_params(dims(4, 3, 2, 0), 5);
        let x = [0.5f32, -1.0, 2.0, 0.1];
        let z = [1.0f32, 1.0, -0.5, 0.3];
        let (_, cache) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&z],
                tags: None,
            },
            None,
        )
        .unwrap();
        let direct = relu(&hidden_layer(&p.w_z, &p.b_z, &z));
        assert_eq!(cache.v_z, direct);
        assert!(cache.argmax.iter().all(|&a| a == 0));
    }

    #[test]
    fn empty_neighborhood_gives_zero_neighbor_state() {
        let p = random_params(dims(4, 3, 2, 0), 6);
        let x = [0.5f32, -1.0, 2.0, 0.1];
        let (s, cache) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![],
                tags: None,
            },
            None,
        )
        .unwrap();
        assert_eq!(cache.v_z, vec![0.0; 3]);
        let attr = attribute_scores(&p, &cache).unwrap();
        assert_eq!(attr.neighbor, vec![0.0; 2]);
        assert_eq!(attr.total(), s);
        let g = backward(&p, &cache, &[1.0, -1.0]).unwrap();
        assert!(g.w_z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let p = random_params(dims(3, 2, 2, 0), 1);
        let good = [0.0f32; 3];
        let short = [0.0f32; 2];
        let nan = [f32::NAN, 0.0, 0.0];
        let ex = |image, nb| Example {
            image,
            neighbors: vec![nb],
            tags: None,
        };
        assert!(matches!(forward(&p, &ex(&short, &good), None), Err(Error::Shape(_))));
        assert!(matches!(forward(&p, &ex(&good, &nan), None), Err(Error::NonFinite(_))));
        let with_tags = Example {
            image: &good,
            neighbors: vec![],
            tags: Some(&[0]),
        };
        assert!(forward(&p, &with_tags, None).is_err());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let p = random_params(dims(3, 2, 2, 0), 1);
        let other = random_params(dims(3, 4, 2, 0), 1);
        let x = [1.0f32, 2.0, 3.0];
        let (_, cache) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&x],
                tags: None,
            },
            None,
        )
        .unwrap();
        assert!(matches!(backward(&other, &cache, &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_examples() {
        let (loss, _) = loss_and_grad_scores(&[0.0; 5], &[1, 3]);
        assert!((loss - 5.0 * 2f64.ln()).abs() < 1e-12);
        let (loss, grad) = loss_and_grad_scores(&[800.0, -800.0], &[0]);
        assert!(loss < 1e-300 && loss.is_finite());
        assert!(grad[0].abs() < 1e-300 && grad[1].abs() < 1e-300);
        let (big, _) = loss_and_grad_scores(&[-800.0], &[0]);
        assert!((big - 800.0).abs() < 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = seed::rng(3);
        let scores: Vec<f64> = (0..6).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let labels = [0u32, 2, 5];
        let (_, grad) = loss_and_grad_scores(&scores, &labels);
        let step = 1e-5;
        for c in 0..scores.len() {
            let mut plus = scores.clone();
            plus[c] += step;
            let mut minus = scores.clone();
            minus[c] -= step;
            let fd = (loss_and_grad_scores(&plus, &labels).0 - loss_and_grad_scores(&minus, &labels).0) / (2.0 * step);
            assert!((fd - grad[c]).abs() <= 1e-6 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn zero_dscores_give_zero_gradients() {
        let p = random_params(dims(4, 3, 2, 2), 2);
        let x = [1.0f32, -1.0, 0.5, 2.0];
        let (_, cache) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&x, &x],
                tags: Some(&[1]),
            },
            None,
        )
        .unwrap();
        let g = backward(&p, &cache, &[0.0, 0.0]).unwrap();
        assert!(g.arrays().iter().all(|a| a.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_neighbor_gradient_is_plain_chain_rule() {
        let p = random_params(dims(4, 3, 2, 0), 12);
        let x = [1.0f32, -1.0, 0.5, 2.0];
        let z = [0.3f32, 0.7, -1.2, 0.4];
        let (_, cache) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&z],
                tags: None,
            },
            None,
        )
        .unwrap();
        let ds = [0.7, -0.2];
        let g = backward(&p, &cache, &ds).unwrap();
        let pre = hidden_layer(&p.w_z, &p.b_z, &z);
        for j in 0..3 {
            let up: f64 = (0..2).map(|c| p.w_y.get(3 + j, c) * ds[c]).sum();
            let dpre = if pre[j] > 0.0 { up } else { 0.0 };
            assert!((g.b_z[j] - dpre).abs() < 1e-15);
            for i in 0..4 {
                assert!((g.w_z.get(i, j) - dpre * z[i] as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn l2_examples() {
        let mut p = ModelParams::zeros(dims(1, 1, 1, 0));
        p.w_x.set(0, 0, 3.0);
        p.b_x[0] = 10.0;
        let (pen, g) = l2_term(&p, 0.0);
        assert_eq!(pen, 0.0);
        assert!(g.arrays().iter().all(|a| a.iter().all(|&v| v == 0.0)));
        let lambda = 3e-3;
        let (pen, g) = l2_term(&p, lambda);
        assert!((pen - lambda * 9.0 / 2.0).abs() < 1e-15);
        assert!((g.w_x.get(0, 0) - lambda * 3.0).abs() < 1e-15);
        assert_eq!(g.b_x[0], 0.0);
    }

    #[test]
    fn score_image_averages_forwards() {
        let p = random_params(dims(3, 4, 2, 0), 8);
        let x = [0.2f32, 0.4, -0.1];
        let a = [1.0f32, 0.0, 0.5];
        let b = [-1.0f32, 2.0, 0.0];
        let c = [0.3f32, -0.3, 0.9];
        let one = score_image(&p, &x, &[vec![&a, &b]], None).unwrap();
        let (f, _) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&a, &b],
                tags: None,
            },
            None,
        )
        .unwrap();
        assert_eq!(one, f);
        let same = score_image(&p, &x, &vec![vec![&a[..], &b[..]]; 10], None).unwrap();
        for (s, t) in same.iter().zip(&f) {
            assert!((s - t).abs() <= 1e-14 * t.abs().max(1.0));
        }
        let mixed = score_image(&p, &x, &[vec![&a, &b], vec![&c, &b]], None).unwrap();
        let (g, _) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&c, &b],
                tags: None,
            },
            None,
        )
        .unwrap();
        for k in 0..2 {
            assert!((mixed[k] - (f[k] + g[k]) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn attribution_sums_exactly() {
        let p = random_params(dims(5, 4, 3, 4), 21);
        let mut rng = seed::rng(1);
        let x = random_vec(&mut rng, 5);
        let z1 = random_vec(&mut rng, 5);
        let z2 = random_vec(&mut rng, 5);
        let (s, cache) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&z1, &z2],
                tags: Some(&[1, 2]),
            },
            None,
        )
        .unwrap();
        let attr = attribute_scores(&p, &cache).unwrap();
        assert_eq!(attr.total(), s);
        assert!(attr.tag.is_some());
        let masks = DropoutMasks::sample(4, 0.5, &mut rng);
        let (_, train_cache) = forward(
            &p,
            &Example {
                image: &x,
                neighbors: vec![&z1],
                tags: Some(&[0]),
            },
            Some(&masks),
        )
        .unwrap();
        assert!(attribute_scores(&p, &train_cache).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pooling_is_permutation_invariant(seed in any::<u64>(), m in 1usize..6, rot in 0usize..6) {
            let p = random_params(dims(6, 5, 3, 0), seed);
            let mut rng = seed::rng(seed);
            let x = random_vec(&mut rng, 6);
            let zs: Vec<Vec<f32>> = (0..m).map(|_| random_vec(&mut rng, 6)).collect();
            let mut perm: Vec<&[f32]> = zs.iter().map(|z| z.as_slice()).collect();
            let orig = perm.clone();
            perm.rotate_left(rot % m);
            perm.reverse();
            let run = |nb: Vec<&[f32]>| forward(&p, &Example { image: &x, neighbors: nb, tags: None }, None).unwrap();
            let (a, ca) = run(orig.clone());
            let (b, _) = run(perm);
            prop_assert_eq!(a.clone(), b);

            let mut dup = orig.clone();
            dup.push(orig[0]);
            let (_, cd) = run(dup);
            prop_assert_eq!(&ca.v_z, &cd.v_z);

            let attr = attribute_scores(&p, &ca).unwrap();
            prop_assert_eq!(attr.total(), a);
        }
    }
}
