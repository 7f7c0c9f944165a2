//! Implicit neural representation of a dynamic image: random Fourier
//! features of normalized `(x, y, t)` coordinates feeding a ReLU MLP with a
//! sigmoid output, with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layer `k` stores its weight matrix
//! (`out x in`, row-major) followed by its bias.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{ImageGrid, ImageSequence};

pub const DEFAULT_FEATURES: usize = 256;
pub const DEFAULT_SIGMA: f64 = 10.0;
pub const HIDDEN_WIDTH: usize = 256;
pub const HIDDEN_LAYERS: usize = 3;

/// Coordinates evaluated together per matrix product.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct FourierEncoder {
    /// `L x 3`, drawn once from `N(0, sigma^2)`.
    b_matrix: Array2<f64>,
    sigma: f64,
    seed: u64,
}

impl FourierEncoder {
    pub fn new(seed: u64, length: usize, sigma: f64) -> Result<Self> {
        if length < 1 {
            return Err(Error::InvalidParameter("feature count L must be >= 1".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma {sigma} must be positive")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, sigma).expect("sigma checked");
        let b_matrix = Array2::from_shape_simple_fn((length, 3), || normal.sample(&mut rng));
        Ok(Self { b_matrix, sigma, seed })
    }

    pub fn length(&self) -> usize {
        self.b_matrix.nrows()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn b_matrix(&self) -> ArrayView2<'_, f64> {
        self.b_matrix.view()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.length()
    }

    /// `[cos(2 pi B p), sin(2 pi B p)]`.
    pub fn encode(&self, p: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(p, &mut out);
        out
    }

    fn encode_into(&self, p: [f64; 3], out: &mut [f64]) {
        let l = self.length();
        for (k, b) in self.b_matrix.outer_iter().enumerate() {
            let phase = 2.0 * PI * (b[0] * p[0] + b[1] * p[1] + b[2] * p[2]);
            let (s, c) = phase.sin_cos();
            out[k] = c;
            out[l + k] = s;
        }
    }

    pub fn encode_batch(&self, batch: &CoordinateBatch) -> Array2<f64> {
        let mut out = Array2::zeros((batch.len(), self.output_dim()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(batch.coords.par_iter())
            .for_each(|(mut row, &p)| {
                self.encode_into(p, row.as_slice_mut().expect("contiguous row"));
            });
        out
    }

    /// SHA-256 over the little-endian bytes of the B-matrix.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.b_matrix.iter() {
            h.update(v.to_le_bytes());
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Normalized `(x, y, t)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateBatch {
    pub coords: Vec<[f64; 3]>,
}

impl CoordinateBatch {
    /// All pixels of an `n x n` grid at the given normalized times, pixel-major
    /// and frame-minor so outputs fill a row-major Casorati matrix.
    /// `x = col / (n - 1)`, `y = row / (n - 1)`.
    pub fn casorati(n: usize, times: &[f64]) -> Self {
        let denom = (n.max(2) - 1) as f64;
        let mut coords = Vec::with_capacity(n * n * times.len());
        for row in 0..n {
            for col in 0..n {
                for &t in times {
                    coords.push([col as f64 / denom, row as f64 / denom, t]);
                }
            }
        }
        Self { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Number of triples with a component outside `[0, 1]` (extrapolation).
    pub fn out_of_range(&self) -> usize {
        self.coords
            .iter()
            .filter(|p| p.iter().any(|v| !(0.0..=1.0).contains(v)))
            .count()
    }
}

/// Maps physical frame times onto `[0, 1]` over the trained span.
pub fn normalize_times(times: &[f64], first: f64, last: f64) -> Vec<f64> {
    if last > first {
        times.iter().map(|t| (t - first) / (last - first)).collect()
    } else {
        vec![0.0; times.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InrModel {
    pub encoder: FourierEncoder,
    layer_dims: Vec<usize>,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Hidden activations of one coordinate chunk, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ChunkPass {
    start: usize,
    hidden: Vec<Array2<f64>>,
    output: Array1<f64>,
}

impl ChunkPass {
    pub fn output(&self) -> ArrayView1<'_, f64> {
        self.output.view()
    }
}

/// Cached forward evaluation of a whole coordinate batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub chunks: Vec<ChunkPass>,
}

impl ForwardPass {
    pub fn output(&self) -> Vec<f64> {
        self.chunks.iter().flat_map(|c| c.output.iter().copied()).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn layer_offsets(dims: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(dims.len());
    let mut acc = 0;
    for w in dims.windows(2) {
        offsets.push(acc);
        acc += w[0] * w[1] + w[1];
    }
    offsets.push(acc);
    offsets
}

impl InrModel {
    /// `[2L, 256, 256, 256, 1]` with Glorot-uniform weights and zero biases.
    pub fn new(seed: u64, length: usize, sigma: f64) -> Result<Self> {
        let encoder = FourierEncoder::new(seed, length, sigma)?;
        let mut dims = vec![encoder.output_dim()];
        dims.extend(std::iter::repeat(HIDDEN_WIDTH).take(HIDDEN_LAYERS));
        dims.push(1);
        Self::with_dims(encoder, dims, seed)
    }

    pub fn with_dims(encoder: FourierEncoder, layer_dims: Vec<usize>, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims[0] != encoder.output_dim() || *layer_dims.last().unwrap() != 1 {
            return Err(Error::InvalidParameter(format!(
                "layer dims {layer_dims:?} must start at {} and end at 1",
                encoder.output_dim()
            )));
        }
        let offsets = layer_offsets(&layer_dims);
        let mut params = vec![0.0; *offsets.last().unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        for (k, w) in layer_dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let start = offsets[k];
            for v in &mut params[start..start + fan_in * fan_out] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { encoder, layer_dims, params, offsets })
    }

    pub fn from_params(encoder: FourierEncoder, layer_dims: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let offsets = layer_offsets(&layer_dims);
        if params.len() != *offsets.last().unwrap() {
            return Err(Error::DimensionMismatch(format!(
                "{} parameters for layer dims {layer_dims:?}",
                params.len()
            )));
        }
        if layer_dims[0] != encoder.output_dim() {
            return Err(Error::DimensionMismatch("encoder width differs from the first layer".into()));
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite weights".into()));
        }
        Ok(Self { encoder, layer_dims, params, offsets })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Range of layer `k`'s parameters in the flat vector.
    pub fn layer_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    fn weight(&self, k: usize) -> ArrayView2<'_, f64> {
        let (fin, fout) = (self.layer_dims[k], self.layer_dims[k + 1]);
        let start = self.offsets[k];
        ArrayView2::from_shape((fout, fin), &self.params[start..start + fin * fout]).expect("layer shape")
    }

    fn bias(&self, k: usize) -> ArrayView1<'_, f64> {
        let (fin, fout) = (self.layer_dims[k], self.layer_dims[k + 1]);
        let start = self.offsets[k] + fin * fout;
        ArrayView1::from(&self.params[start..start + fout])
    }

    fn hidden_layer(&self, k: usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = Array2::zeros((x.nrows(), self.layer_dims[k + 1]));
        general_mat_mul(1.0, &x, &self.weight(k).t(), 0.0, &mut z);
        let b = self.bias(k);
        for mut row in z.axis_iter_mut(Axis(0)) {
            row.zip_mut_with(&b, |v, &bb| *v = (*v + bb).max(0.0));
        }
        z
    }

    fn output_layer(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let k = self.num_layers() - 1;
        let b = self.bias(k)[0];
        x.dot(&self.weight(k).row(0)).mapv(|z| sigmoid(z + b))
    }

    fn forward_chunk(&self, features: ArrayView2<'_, f64>, start: usize) -> ChunkPass {
        let layers = self.num_layers();
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(layers - 1);
        for k in 0..layers - 1 {
            let z = match hidden.last() {
                None => self.hidden_layer(k, features),
                Some(prev) => self.hidden_layer(k, prev.view()),
            };
            hidden.push(z);
        }
        let output = match hidden.last() {
            None => self.output_layer(features),
            Some(prev) => self.output_layer(prev.view()),
        };
        ChunkPass { start, hidden, output }
    }

    /// Forward pass over precomputed Fourier features, keeping activations.
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> ForwardPass {
        let rows = features.nrows();
        let starts: Vec<usize> = (0..rows).step_by(CHUNK).collect();
        let chunks = starts
            .into_par_iter()
            .map(|start| {
                let end = (start + CHUNK).min(rows);
                self.forward_chunk(features.slice(s![start..end, ..]), start)
            })
            .collect();
        ForwardPass { chunks }
    }

    /// Outputs only; no activations are retained.
    pub fn predict(&self, batch: &CoordinateBatch) -> Vec<f64> {
        let rows = batch.len();
        let starts: Vec<usize> = (0..rows).step_by(CHUNK).collect();
        let parts: Vec<Array1<f64>> = starts
            .into_par_iter()
            .map(|start| {
                let end = (start + CHUNK).min(rows);
                let sub = CoordinateBatch { coords: batch.coords[start..end].to_vec() };
                let feats = self.encoder.encode_batch(&sub);
                self.forward_chunk(feats.view(), start).output
            })
            .collect();
        parts.into_iter().flat_map(|a| a.into_iter()).collect()
    }

    /// Gradient of `sum_i g_i * out_i` with respect to every parameter.
    pub fn backward(&self, features: ArrayView2<'_, f64>, pass: &ForwardPass, output_grad: &[f64]) -> Result<Vec<f64>> {
        let total: usize = pass.chunks.iter().map(|c| c.output.len()).sum();
        if output_grad.len() != total || features.nrows() != total {
            return Err(Error::DimensionMismatch(format!(
                "{} output gradients / {} feature rows for {total} outputs",
                output_grad.len(),
                features.nrows()
            )));
        }
        let partials: Vec<Vec<f64>> = pass
            .chunks
            .par_iter()
            .map(|chunk| {
                let end = chunk.start + chunk.output.len();
                self.backward_chunk(
                    features.slice(s![chunk.start..end, ..]),
                    chunk,
                    &output_grad[chunk.start..end],
                )
            })
            .collect();
        let mut grad = vec![0.0; self.params.len()];
        for part in &partials {
            for (g, p) in grad.iter_mut().zip(part) {
                *g += p;
            }
        }
        for k in 0..self.num_layers() {
            if !grad[self.layer_range(k)].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: k });
            }
        }
        Ok(grad)
    }

    fn backward_chunk<'a>(&self, features: ArrayView2<'a, f64>, chunk: &'a ChunkPass, g: &[f64]) -> Vec<f64> {
        let layers = self.num_layers();
        let mut grad = vec![0.0; self.params.len()];
        let rows = g.len();
        // d/dz of sigmoid
        let mut delta = Array2::from_shape_fn((rows, 1), |(i, _)| {
            let y = chunk.output[i];
            g[i] * y * (1.0 - y)
        });
        for k in (0..layers).rev() {
            let input = if k == 0 { features } else { chunk.hidden[k - 1].view() };
            let (fin, fout) = (self.layer_dims[k], self.layer_dims[k + 1]);
            let start = self.offsets[k];
            {
                let (w_part, b_part) = grad[start..start + fin * fout + fout].split_at_mut(fin * fout);
                let mut dw = ndarray::ArrayViewMut2::from_shape((fout, fin), w_part).expect("layer shape");
                general_mat_mul(1.0, &delta.t(), &input, 0.0, &mut dw);
                for (b, col) in b_part.iter_mut().zip(delta.axis_iter(Axis(1))) {
                    *b = col.sum();
                }
            }
            if k > 0 {
                let mut prev = Array2::zeros((rows, fin));
                general_mat_mul(1.0, &delta, &self.weight(k), 0.0, &mut prev);
                // ReLU'(z) = 1 for z > 0, else 0 (activation > 0 iff z > 0)
                prev.zip_mut_with(&chunk.hidden[k - 1], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        grad
    }

    /// Saves `<prefix>.json` (manifest) and `<prefix>.bin` (weights).
    pub fn save(&self, prefix: &Path, info: &CheckpointInfo) -> Result<()> {
        let bin_path = prefix.with_extension("bin");
        let mut blob = Vec::with_capacity(self.params.len() * 8);
        for v in &self.params {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let mut h = Sha256::new();
        h.update(&blob);
        let manifest = CheckpointManifest {
            format: "dynpact-inr-checkpoint/1".into(),
            seed: self.encoder.seed,
            features: self.encoder.length(),
            sigma: self.encoder.sigma,
            layer_dims: self.layer_dims.clone(),
            param_count: self.params.len(),
            iterations: info.iterations,
            b_matrix_sha256: self.encoder.digest(),
            weights_file: bin_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            weights_sha256: hex_string(&h.finalize()),
            endianness: "little".into(),
            grid: info.grid.clone(),
            frame_times: info.frame_times.clone(),
        };
        fs::write(&bin_path, &blob)?;
        fs::write(prefix.with_extension("json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads a checkpoint given the manifest path (or its prefix).
    pub fn load(path: &Path) -> Result<(Self, CheckpointInfo)> {
        let manifest_path = path.with_extension("json");
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let blob = fs::read(dir.join(&manifest.weights_file))?;
        if blob.len() != manifest.param_count * 8 {
            return Err(Error::Truncated { expected: manifest.param_count * 8, actual: blob.len() });
        }
        let mut h = Sha256::new();
        h.update(&blob);
        let actual = hex_string(&h.finalize());
        if actual != manifest.weights_sha256 {
            return Err(Error::Checksum { expected: manifest.weights_sha256, actual });
        }
        let encoder = FourierEncoder::new(manifest.seed, manifest.features, manifest.sigma)?;
        let digest = encoder.digest();
        if digest != manifest.b_matrix_sha256 {
            return Err(Error::Checksum { expected: manifest.b_matrix_sha256, actual: digest });
        }
        let params = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let model = Self::from_params(encoder, manifest.layer_dims, params)?;
        let info = CheckpointInfo {
            iterations: manifest.iterations,
            grid: manifest.grid,
            frame_times: manifest.frame_times,
        };
        Ok((model, info))
    }
}

/// Context stored next to the weights so a checkpoint can be rendered alone.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointInfo {
    pub iterations: usize,
    pub grid: Option<ImageGrid>,
    /// Physical times of the trained frames.
    pub frame_times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    seed: u64,
    features: usize,
    sigma: f64,
    layer_dims: Vec<usize>,
    param_count: usize,
    iterations: usize,
    b_matrix_sha256: String,
    weights_file: String,
    weights_sha256: String,
    endianness: String,
    #[serde(default)]
    grid: Option<ImageGrid>,
    #[serde(default)]
    frame_times: Option<Vec<f64>>,
}

/// Evaluates the model on a Casorati-ordered batch and reshapes the outputs
/// to an `n x n x t_count` sequence. Frame times are the batch's normalized
/// time coordinates.
pub fn render(model: &InrModel, batch: &CoordinateBatch, grid: &ImageGrid, t_count: usize) -> Result<ImageSequence> {
    let n = grid.n;
    if batch.len() != n * n * t_count || t_count == 0 {
        return Err(Error::DimensionMismatch(format!(
            "batch of {} coordinates for {n}x{n}x{t_count}",
            batch.len()
        )));
    }
    let outside = batch.out_of_range();
    if outside > 0 {
        log::warn!("{outside} query coordinates lie outside [0, 1] (extrapolation)");
    }
    let values = model.predict(batch);
    let times = batch.coords[..t_count].iter().map(|p| p[2]).collect();
    let data = Array2::from_shape_vec((n * n, t_count), values)
        .expect("batch size checked")
        .into_shape_with_order((n, n, t_count))
        .expect("contiguous");
    ImageSequence::new(data, grid.clone(), times)
}
