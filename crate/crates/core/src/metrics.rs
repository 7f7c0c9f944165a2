//! Image-quality metrics on min-max normalized sequences.
//!
//! PSNR uses the per-frame mean squared error against a peak of 1. SSIM
//! uses frame-wide means, variances and covariance (no sliding window).

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageSequence;

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Min-max normalizes `seq` over the whole stack. Returns the normalized
/// sequence and the `(min, max)` bounds used.
pub fn normalize(seq: &ImageSequence) -> Result<(ImageSequence, (f64, f64))> {
    let (lo, hi) = seq.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Degenerate(format!("constant sequence (value {lo}) cannot be normalized")));
    }
    let mut out = seq.clone();
    out.data.mapv_inplace(|v| (v - lo) / range);
    Ok((out, (lo, hi)))
}

/// Normalizes reference and estimate independently.
pub fn normalize_pair(y: &ImageSequence, yhat: &ImageSequence) -> Result<(ImageSequence, ImageSequence)> {
    check_shapes(y, yhat)?;
    Ok((normalize(y)?.0, normalize(yhat)?.0))
}

fn check_shapes(y: &ImageSequence, yhat: &ImageSequence) -> Result<()> {
    if y.data.dim() != yhat.data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "reference {:?} vs estimate {:?}",
            y.data.dim(),
            yhat.data.dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsnrResult {
    /// Per-frame dB; `f64::INFINITY` marks an error-free frame.
    pub per_frame: Vec<f64>,
    /// Mean over finite frames, or `+inf` if every frame was error-free.
    pub mean: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsimResult {
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

fn frames<'a>(seq: &'a ImageSequence) -> Vec<ArrayView2<'a, f64>> {
    seq.data.axis_iter(Axis(2)).collect()
}

pub fn psnr(y: &ImageSequence, yhat: &ImageSequence) -> Result<PsnrResult> {
    check_shapes(y, yhat)?;
    let per_frame: Vec<f64> = frames(y)
        .into_par_iter()
        .zip(frames(yhat).into_par_iter())
        .map(|(a, b)| psnr_frame(a, b))
        .collect();
    let finite: Vec<f64> = per_frame.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = per_frame.len() - finite.len();
    if excluded > 0 {
        log::warn!("{excluded} error-free frame(s) excluded from the mean PSNR");
    }
    let mean = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(PsnrResult { per_frame, mean, excluded })
}

fn psnr_frame(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.len() as f64;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn ssim(y: &ImageSequence, yhat: &ImageSequence) -> Result<SsimResult> {
    check_shapes(y, yhat)?;
    let per_frame: Vec<f64> = frames(y)
        .into_par_iter()
        .zip(frames(yhat).into_par_iter())
        .map(|(a, b)| ssim_frame(a, b))
        .collect();
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(SsimResult { per_frame, mean })
}

fn ssim_frame(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let n = a.len() as f64;
    let mu_a = a.sum() / n;
    let mu_b = b.sum() / n;
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (da, db) = (x - mu_a, y - mu_b);
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
    let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
    num / den
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-frame PSNR in dB; error-free frames are written as `"inf"`.
    #[serde(with = "sentinel")]
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    #[serde(with = "sentinel_scalar")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub psnr_excluded: usize,
    pub reference_bounds: Bounds,
    pub estimate_bounds: Bounds,
}

impl EvalReport {
    pub fn num_frames(&self) -> usize {
        self.psnr.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `frame,psnr_db,ssim` table, one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,psnr_db,ssim\n");
        for (i, (p, s)) in self.psnr.iter().zip(&self.ssim).enumerate() {
            let p = if p.is_finite() { format!("{p:.10}") } else { "inf".to_string() };
            out.push_str(&format!("{i},{p},{s:.12}\n"));
        }
        out
    }
}

/// Normalizes both sequences over their stacks, then scores every frame.
pub fn evaluate(y: &ImageSequence, yhat: &ImageSequence) -> Result<EvalReport> {
    check_shapes(y, yhat)?;
    let (ny, (ylo, yhi)) = normalize(y)?;
    let (nyhat, (hlo, hhi)) = normalize(yhat)?;
    let p = psnr(&ny, &nyhat)?;
    let s = ssim(&ny, &nyhat)?;
    Ok(EvalReport {
        psnr: p.per_frame,
        ssim: s.per_frame,
        mean_psnr: p.mean,
        mean_ssim: s.mean,
        psnr_excluded: p.excluded,
        reference_bounds: Bounds { min: ylo, max: yhi },
        estimate_bounds: Bounds { min: hlo, max: hhi },
    })
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MaybeInf {
    Value(f64),
    Text(String),
}

impl MaybeInf {
    fn from_f64(v: f64) -> Self {
        if v.is_finite() {
            MaybeInf::Value(v)
        } else if v > 0.0 {
            MaybeInf::Text("inf".into())
        } else if v < 0.0 {
            MaybeInf::Text("-inf".into())
        } else {
            MaybeInf::Text("nan".into())
        }
    }

    fn into_f64<E: serde::de::Error>(self) -> std::result::Result<f64, E> {
        match self {
            MaybeInf::Value(v) => Ok(v),
            MaybeInf::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("unexpected value {other:?}"))),
            },
        }
    }
}

mod sentinel {
    use super::MaybeInf;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&x| MaybeInf::from_f64(x)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<MaybeInf>::deserialize(d)?.into_iter().map(MaybeInf::into_f64).collect()
    }
}

mod sentinel_scalar {
    use super::MaybeInf;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        MaybeInf::from_f64(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        MaybeInf::deserialize(d)?.into_f64()
    }
}
