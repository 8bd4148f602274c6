//! Photometric self-supervision loss and image-quality metrics.
//!
//! The training objective is `MSE(I, Î) + λ·Percep(I, Î)` over re-rendered
//! target views. The perceptual term here is a multi-scale image-gradient
//! proxy rather than a learned network: it sums, over three dyadic scales of
//! the average-pooled difference image, the mean Charbonnier magnitude of the
//! horizontal and vertical forward differences. Any other differentiable
//! image distance can be plugged in through [`ImageDistance`].
//!
//! All arithmetic runs in f64 internally regardless of the working precision,
//! so the returned adjoints are consistent with the f64 backward pass of the
//! renderer.

use crate::scalar::{sf, Scalar};
use thiserror::Error;

/// Charbonnier smoothing width for |·| in the perceptual proxy.
const CHARBONNIER_EPS: f64 = 1e-3;

/// Number of dyadic scales in the perceptual proxy.
const PROXY_SCALES: usize = 3;

#[derive(Debug, Error)]
pub enum PhotometricError {
    #[error("shape error: {0}")]
    ShapeError(String),
}

/// An H×W×3 image, row-major, channel-interleaved, values in [0, 1].
#[derive(Debug, Clone)]
pub struct Image<S: Scalar> {
    width: u32,
    height: u32,
    data: Vec<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(width: u32, height: u32, data: Vec<S>) -> Result<Self, PhotometricError> {
        let want = (width as usize) * (height as usize) * 3;
        if data.len() != want {
            return Err(PhotometricError::ShapeError(format!(
                "image buffer holds {} values, {}x{}x3 needs {}",
                data.len(),
                width,
                height,
                want
            )));
        }
        for (i, v) in data.iter().enumerate() {
            let v = v.to_f64();
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(PhotometricError::ShapeError(format!(
                    "value {v} at flat index {i} outside [0, 1]"
                )));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }
}

/// Loss value plus the exact adjoint of `total` w.r.t. the predicted image.
#[derive(Debug, Clone)]
pub struct LossValue<S: Scalar> {
    pub total: S,
    pub mse_term: S,
    pub percep_term: S,
    /// H×W×3 gradient w.r.t. pred, same layout as [`Image::data`].
    pub grad_image: Vec<S>,
}

/// A differentiable image distance: value and its adjoint w.r.t. `pred`.
///
/// The built-in instance is [`GradDiffProxy`]; an external descriptor-based
/// distance can be registered by implementing this trait and passing it to
/// [`photometric_loss_with`].
pub trait ImageDistance<S: Scalar> {
    fn eval(&self, pred: &Image<S>, target: &Image<S>)
        -> Result<(S, Vec<S>), PhotometricError>;
}

/// The default perceptual term, see [`perceptual_proxy`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GradDiffProxy;

impl<S: Scalar> ImageDistance<S> for GradDiffProxy {
    fn eval(
        &self,
        pred: &Image<S>,
        target: &Image<S>,
    ) -> Result<(S, Vec<S>), PhotometricError> {
        perceptual_proxy(pred, target)
    }
}

fn check_same_shape<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<(), PhotometricError> {
    if a.width != b.width || a.height != b.height {
        return Err(PhotometricError::ShapeError(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `MSE + λ·Percep` with the default perceptual proxy.
pub fn photometric_loss<S: Scalar>(
    pred: &Image<S>,
    target: &Image<S>,
    lambda: S,
) -> Result<LossValue<S>, PhotometricError> {
    photometric_loss_with(pred, target, lambda, &GradDiffProxy)
}

/// `MSE + λ·percep` with a caller-supplied perceptual term.
pub fn photometric_loss_with<S: Scalar>(
    pred: &Image<S>,
    target: &Image<S>,
    lambda: S,
    percep: &dyn ImageDistance<S>,
) -> Result<LossValue<S>, PhotometricError> {
    check_same_shape(pred, target)?;
    let n = pred.data.len();
    let inv_n = 1.0 / n as f64;
    let lam = lambda.to_f64();

    let mut mse = 0.0f64;
    let mut grad: Vec<f64> = Vec::with_capacity(n);
    for (p, t) in pred.data.iter().zip(&target.data) {
        let d = p.to_f64() - t.to_f64();
        mse += d * d;
        grad.push(2.0 * d * inv_n);
    }
    mse *= inv_n;

    let (pv, pg) = percep.eval(pred, target)?;
    let pv = pv.to_f64();
    for (g, dg) in grad.iter_mut().zip(&pg) {
        *g += lam * dg.to_f64();
    }

    Ok(LossValue {
        total: sf(mse + lam * pv),
        mse_term: sf(mse),
        percep_term: sf(pv),
        grad_image: grad.into_iter().map(sf).collect(),
    })
}

/// Multi-scale gradient-difference proxy for a perceptual loss.
///
/// For Δ = pred − target and three dyadic scales Δ, pool(Δ), pool²(Δ), each
/// scale contributes the mean Charbonnier magnitude of its horizontal forward
/// differences plus the mean over its vertical ones; the scale values are
/// summed. charb(t) = √(t² + ε²) − ε, so identical images score exactly 0 and
/// constant offsets vanish with the differences.
pub fn perceptual_proxy<S: Scalar>(
    pred: &Image<S>,
    target: &Image<S>,
) -> Result<(S, Vec<S>), PhotometricError> {
    check_same_shape(pred, target)?;
    if pred.width < 8 || pred.height < 8 {
        return Err(PhotometricError::ShapeError(format!(
            "perceptual proxy needs at least 8x8, got {}x{}",
            pred.width, pred.height
        )));
    }
    let w0 = pred.width as usize;
    let h0 = pred.height as usize;
    let delta: Vec<f64> = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| p.to_f64() - t.to_f64())
        .collect();

    // Forward through the pooling pyramid, keeping each level for backward.
    let mut levels: Vec<(usize, usize, Vec<f64>)> = vec![(h0, w0, delta)];
    for _ in 1..PROXY_SCALES {
        let (h, w, prev) = levels.last().unwrap();
        levels.push(avgpool_half(*h, *w, prev));
    }

    let mut value = 0.0f64;
    let mut level_grads: Vec<Vec<f64>> = Vec::with_capacity(PROXY_SCALES);
    for (h, w, img) in &levels {
        let (v, g) = grad_diff_term(*h, *w, img);
        value += v;
        level_grads.push(g);
    }

    // Adjoint: walk the pyramid back down, expanding pooled gradients.
    let mut acc = level_grads.pop().unwrap();
    for lvl in (0..PROXY_SCALES - 1).rev() {
        let (h, w, _) = levels[lvl];
        let (ph, pw, _) = levels[lvl + 1];
        let mut expanded = avgpool_half_adjoint(h, w, ph, pw, &acc);
        for (e, g) in expanded.iter_mut().zip(&level_grads[lvl]) {
            *e += g;
        }
        acc = expanded;
    }

    Ok((sf(value), acc.into_iter().map(sf).collect()))
}

/// Peak signal-to-noise ratio in dB, capped at 99 when MSE < 1e-10.
pub fn psnr<S: Scalar>(pred: &Image<S>, target: &Image<S>) -> Result<S, PhotometricError> {
    check_same_shape(pred, target)?;
    let n = pred.data.len() as f64;
    let mse: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| {
            let d = p.to_f64() - t.to_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    Ok(sf(if mse < 1e-10 { 99.0 } else { -10.0 * mse.log10() }))
}

/// 2×2 average pooling with stride 2; trailing odd row/column dropped.
fn avgpool_half(h: usize, w: usize, src: &[f64]) -> (usize, usize, Vec<f64>) {
    let ph = h / 2;
    let pw = w / 2;
    let mut out = vec![0.0; ph * pw * 3];
    for y in 0..ph {
        for x in 0..pw {
            for c in 0..3 {
                let i00 = ((2 * y) * w + 2 * x) * 3 + c;
                let i01 = ((2 * y) * w + 2 * x + 1) * 3 + c;
                let i10 = ((2 * y + 1) * w + 2 * x) * 3 + c;
                let i11 = ((2 * y + 1) * w + 2 * x + 1) * 3 + c;
                out[(y * pw + x) * 3 + c] = 0.25 * (src[i00] + src[i01] + src[i10] + src[i11]);
            }
        }
    }
    (ph, pw, out)
}

/// Adjoint of [`avgpool_half`]: each pooled gradient spreads as g/4.
fn avgpool_half_adjoint(h: usize, w: usize, ph: usize, pw: usize, grad: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w * 3];
    for y in 0..ph {
        for x in 0..pw {
            for c in 0..3 {
                let g = 0.25 * grad[(y * pw + x) * 3 + c];
                out[((2 * y) * w + 2 * x) * 3 + c] += g;
                out[((2 * y) * w + 2 * x + 1) * 3 + c] += g;
                out[((2 * y + 1) * w + 2 * x) * 3 + c] += g;
                out[((2 * y + 1) * w + 2 * x + 1) * 3 + c] += g;
            }
        }
    }
    out
}

/// Mean Charbonnier magnitude of ∇x plus mean over ∇y, with its adjoint.
fn grad_diff_term(h: usize, w: usize, img: &[f64]) -> (f64, Vec<f64>) {
    let eps2 = CHARBONNIER_EPS * CHARBONNIER_EPS;
    let mut grad = vec![0.0; img.len()];
    let mut sum_x = 0.0;
    let mut sum_y = 0.0;
    let nx = (h * (w - 1) * 3) as f64;
    let ny = ((h - 1) * w * 3) as f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let i = (y * w + x) * 3 + c;
                if x + 1 < w {
                    let j = (y * w + x + 1) * 3 + c;
                    let d = img[j] - img[i];
                    let root = (d * d + eps2).sqrt();
                    sum_x += root - CHARBONNIER_EPS;
                    let dd = d / root / nx;
                    grad[j] += dd;
                    grad[i] -= dd;
                }
                if y + 1 < h {
                    let j = ((y + 1) * w + x) * 3 + c;
                    let d = img[j] - img[i];
                    let root = (d * d + eps2).sqrt();
                    sum_y += root - CHARBONNIER_EPS;
                    let dd = d / root / ny;
                    grad[j] += dd;
                    grad[i] -= dd;
                }
            }
        }
    }
    (sum_x / nx + sum_y / ny, grad)
}
