//! Count sketch and compact bilinear pooling.
//!
//! `count_sketch` projects a vector into `b` buckets with a random hash and
//! random signs. The sketch of an outer product `a ⊗ v` under the combined
//! hash `(f_a[i] + f_v[j]) mod b` equals the circular convolution of the two
//! individual sketches, which [`mcb_fuse`] evaluates with FFTs at every
//! spatial location of an image feature map. [`outer_sketch_direct`] is the
//! quadratic reference evaluation used to check the FFT path.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{fft1, ifft1, streams, ComplexVector, Function, Rng, ScalarMode, Tape, Tensor, Var};
use crate::par;

/// Sketch width used by the full-size MCB models.
pub const DEFAULT_SKETCH_WIDTH: usize = 8000;

/// Frozen hash/sign pair of a count-sketch operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchParams {
    n: usize,
    b: usize,
    hashes: Vec<usize>,
    signs: Vec<f64>,
    seed: u64,
}

impl SketchParams {
    /// Buckets and signs drawn independently and uniformly from the stream
    /// keyed by `seed`.
    pub fn new(n: usize, b: usize, seed: u64) -> Result<Self> {
        if n == 0 || b == 0 {
            return Err(Error::Config(format!("sketch needs n >= 1 and b >= 1, got n={n}, b={b}")));
        }
        let mut rng = Rng::new(seed).split(streams::SKETCH, 0);
        let hashes = (0..n).map(|_| rng.below(b)).collect();
        let signs = (0..n).map(|_| rng.sign()).collect();
        Ok(SketchParams {
            n,
            b,
            hashes,
            signs,
            seed,
        })
    }

    /// Explicit hash and signs, for hand-built cases.
    pub fn from_parts(hashes: Vec<usize>, signs: Vec<f64>, b: usize) -> Result<Self> {
        if hashes.is_empty() || hashes.len() != signs.len() || b == 0 {
            return Err(Error::Config("hash and sign arrays must be non-empty and equal length".into()));
        }
        if let Some(&h) = hashes.iter().find(|&&h| h >= b) {
            return Err(Error::Index {
                what: "sketch bucket",
                index: h,
                len: b,
            });
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::Config("signs must be +1 or -1".into()));
        }
        Ok(SketchParams {
            n: hashes.len(),
            b,
            hashes,
            signs,
            seed: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.b
    }

    pub fn hashes(&self) -> &[usize] {
        &self.hashes
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Same buckets, every sign flipped.
    pub fn negated(&self) -> Self {
        SketchParams {
            signs: self.signs.iter().map(|s| -s).collect(),
            ..self.clone()
        }
    }

    fn sketch_into(&self, a: &[f64], stride: usize, out: &mut [f64]) {
        for (i, (&h, &s)) in self.hashes.iter().zip(&self.signs).enumerate() {
            out[h] += s * a[i * stride];
        }
    }

    /// Transpose of the sketch: `out[i] = s[i] · g[f[i]]`.
    fn unsketch<'a>(&'a self, g: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        self.hashes.iter().zip(&self.signs).map(move |(&h, &s)| s * g[h])
    }
}

pub fn make_sketch_params(n: usize, b: usize, seed: u64) -> Result<SketchParams> {
    SketchParams::new(n, b, seed)
}

/// `cs(a)[j] = Σ_{f[i] = j} s[i]·a[i]`.
pub fn count_sketch(a: &Tensor, p: &SketchParams) -> Result<Tensor> {
    if a.len() != p.n {
        return Err(shape_err(
            "count_sketch",
            format!("input has {} values, sketch expects {}", a.len(), p.n),
        ));
    }
    let mut out = vec![0.0; p.b];
    p.sketch_into(a.data(), 1, &mut out);
    Tensor::new(vec![p.b], out)?.ensure_finite("count_sketch")
}

/// Sketch of `a ⊗ v` evaluated term by term: bucket `(f_a[i] + f_v[j]) mod b`,
/// sign `s_a[i]·s_v[j]`. Quadratic cost; used as the reference for
/// [`mcb_fuse`].
pub fn outer_sketch_direct(a: &Tensor, v: &Tensor, pa: &SketchParams, pv: &SketchParams) -> Result<Tensor> {
    if pa.b != pv.b {
        return Err(shape_err("outer_sketch_direct", format!("widths {} and {}", pa.b, pv.b)));
    }
    if a.len() != pa.n || v.len() != pv.n {
        return Err(shape_err(
            "outer_sketch_direct",
            format!("inputs {}/{} vs sketch dims {}/{}", a.len(), v.len(), pa.n, pv.n),
        ));
    }
    let b = pa.b;
    let mut out = vec![0.0; b];
    for (i, &ai) in a.data().iter().enumerate() {
        for (j, &vj) in v.data().iter().enumerate() {
            let bucket = (pa.hashes[i] + pv.hashes[j]) % b;
            out[bucket] += pa.signs[i] * pv.signs[j] * ai * vj;
        }
    }
    Tensor::new(vec![b], out)?.ensure_finite("outer_sketch_direct")
}

/// Circular convolution of two equal-length real vectors via FFT.
fn circular_convolve(x: &[f64], y_hat: &ComplexVector, tol: f64) -> Result<Vec<f64>> {
    let x_hat = fft1(&ComplexVector::from_real(x))?;
    let z = ifft1(&x_hat.mul(y_hat))?;
    let residue = z.max_abs_im();
    let scale = z.re().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if residue > tol * scale {
        return Err(Error::NonFinite(format!(
            "mcb imaginary residue {residue:e} exceeds {tol:e}"
        )));
    }
    Ok(z.re())
}

/// Circular cross-correlation `out[k] = Σ_t g[t]·y[(t - k) mod b]`, the adjoint
/// of convolution with `y`.
fn circular_correlate(g_hat: &ComplexVector, y: &[f64]) -> Result<Vec<f64>> {
    let y_hat = fft1(&ComplexVector::from_real(y))?;
    Ok(ifft1(&g_hat.mul_conj(&y_hat))?.re())
}

/// Compact bilinear pooling of an image map `[C×H×W]` with a text vector
/// `[L]`, giving `[b×H×W]`.
///
/// At every location `(h, w)` the output column is
/// `IFFT(FFT(cs(I[:, h, w])) ∘ FFT(cs(v)))`; the real part is kept after
/// checking that the imaginary residue is negligible.
pub fn mcb_fuse(image: &Tensor, text: &Tensor, p_img: &SketchParams, p_txt: &SketchParams) -> Result<Tensor> {
    mcb_fuse_with(image, text, p_img, p_txt, ScalarMode::F64)
}

pub fn mcb_fuse_with(
    image: &Tensor,
    text: &Tensor,
    p_img: &SketchParams,
    p_txt: &SketchParams,
    mode: ScalarMode,
) -> Result<Tensor> {
    if image.ndim() != 3 {
        return Err(shape_err("mcb_fuse", format!("image must be C×H×W, got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if p_img.b != p_txt.b {
        return Err(shape_err("mcb_fuse", format!("sketch widths {} and {}", p_img.b, p_txt.b)));
    }
    if c != p_img.n || text.len() != p_txt.n {
        return Err(shape_err(
            "mcb_fuse",
            format!("channels {c}/text {} vs sketch dims {}/{}", text.len(), p_img.n, p_txt.n),
        ));
    }
    let b = p_img.b;
    let spatial = h * w;
    let columns = mcb_columns(image.data(), text.data(), p_img, p_txt, spatial, mode.imag_tolerance())?;
    let mut out = vec![0.0; b * spatial];
    for (s, col) in columns.iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            out[t * spatial + s] = v;
        }
    }
    Tensor::new(vec![b, h, w], out)?.ensure_finite("mcb_fuse")
}

/// One fused column per spatial location of a flattened `[C×S]` map.
fn mcb_columns(
    image: &[f64],
    text: &[f64],
    p_img: &SketchParams,
    p_txt: &SketchParams,
    spatial: usize,
    tol: f64,
) -> Result<Vec<Vec<f64>>> {
    let b = p_img.b;
    let mut y = vec![0.0; b];
    p_txt.sketch_into(text, 1, &mut y);
    let y_hat = fft1(&ComplexVector::from_real(&y))?;
    par::map_range(spatial, |s| {
        let mut x = vec![0.0; b];
        p_img.sketch_into(&image[s..], spatial, &mut x);
        circular_convolve(&x, &y_hat, tol)
    })
    .into_iter()
    .collect()
}

/// Gradients of `Σ g · mcb_fuse(image, text)` with respect to both inputs,
/// for one sample. `image` is `[C×S]` flattened, `grad` is `[b×S]`.
pub fn mcb_backward(
    image: &[f64],
    text: &[f64],
    grad: &[f64],
    p_img: &SketchParams,
    p_txt: &SketchParams,
    spatial: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = p_img.b;
    let mut y = vec![0.0; b];
    p_txt.sketch_into(text, 1, &mut y);

    let per_location: Vec<Result<(Vec<f64>, Vec<f64>)>> = par::map_range(spatial, |s| {
        let g: Vec<f64> = (0..b).map(|t| grad[t * spatial + s]).collect();
        let g_hat = fft1(&ComplexVector::from_real(&g))?;
        let mut x = vec![0.0; b];
        p_img.sketch_into(&image[s..], spatial, &mut x);
        // d/dx of (x ⊛ y) is correlation with y, and symmetrically for y.
        let dx = circular_correlate(&g_hat, &y)?;
        let dy = circular_correlate(&g_hat, &x)?;
        Ok((dx, dy))
    });

    let mut g_image = vec![0.0; p_img.n * spatial];
    let mut dy_total = vec![0.0; b];
    for (s, r) in per_location.into_iter().enumerate() {
        let (dx, dy) = r?;
        for (c, v) in p_img.unsketch(&dx).enumerate() {
            g_image[c * spatial + s] = v;
        }
        for (o, v) in dy_total.iter_mut().zip(&dy) {
            *o += v;
        }
    }
    let g_text = p_txt.unsketch(&dy_total).collect();
    Ok((g_image, g_text))
}

struct McbFunction {
    p_img: Arc<SketchParams>,
    p_txt: Arc<SketchParams>,
    spatial: usize,
}

impl Function for McbFunction {
    fn name(&self) -> &'static str {
        "mcb"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (image, text) = (inputs[0], inputs[1]);
        let rows = image.rows();
        let (ci, ct, co) = (image.cols(), text.cols(), grad.cols());
        let mut gi = vec![0.0; image.len()];
        let mut gt = vec![0.0; text.len()];
        for r in 0..rows {
            let (di, dt) = mcb_backward(
                &image.data()[r * ci..(r + 1) * ci],
                &text.data()[r * ct..(r + 1) * ct],
                &grad.data()[r * co..(r + 1) * co],
                &self.p_img,
                &self.p_txt,
                self.spatial,
            )
            .expect("mcb backward on validated shapes");
            gi[r * ci..(r + 1) * ci].copy_from_slice(&di);
            gt[r * ct..(r + 1) * ct].copy_from_slice(&dt);
        }
        vec![
            Some(Tensor::new(image.shape().to_vec(), gi).unwrap()),
            Some(Tensor::new(text.shape().to_vec(), gt).unwrap()),
        ]
    }
}

/// Batched MCB on a tape. `image` is `[B × C·S]` (channel-major per sample),
/// `text` is `[B × L]`; the result is `[B × b·S]`.
pub fn mcb_on_tape(
    tape: &mut Tape,
    image: Var,
    text: Var,
    p_img: &Arc<SketchParams>,
    p_txt: &Arc<SketchParams>,
    spatial: usize,
) -> Result<Var> {
    let (iv, tv) = (tape.value(image), tape.value(text));
    if iv.ndim() != 2 || tv.ndim() != 2 || iv.rows() != tv.rows() {
        return Err(shape_err("mcb_on_tape", format!("{:?} and {:?}", iv.shape(), tv.shape())));
    }
    if p_img.b != p_txt.b || iv.cols() != p_img.n * spatial || tv.cols() != p_txt.n {
        return Err(shape_err(
            "mcb_on_tape",
            format!(
                "image cols {} (C={} S={spatial}), text cols {} (L={}), widths {}/{}",
                iv.cols(),
                p_img.n,
                tv.cols(),
                p_txt.n,
                p_img.b,
                p_txt.b
            ),
        ));
    }
    let rows = iv.rows();
    let (ci, ct) = (iv.cols(), tv.cols());
    let b = p_img.b;
    let mut out = vec![0.0; rows * b * spatial];
    for r in 0..rows {
        let cols = mcb_columns(
            &iv.data()[r * ci..(r + 1) * ci],
            &tv.data()[r * ct..(r + 1) * ct],
            p_img,
            p_txt,
            spatial,
            ScalarMode::F64.imag_tolerance(),
        )?;
        let dst = &mut out[r * b * spatial..(r + 1) * b * spatial];
        for (s, col) in cols.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                dst[t * spatial + s] = v;
            }
        }
    }
    let value = Tensor::new(vec![rows, b * spatial], out)?;
    Ok(tape.custom(
        &[image, text],
        value,
        Box::new(McbFunction {
            p_img: Arc::clone(p_img),
            p_txt: Arc::clone(p_txt),
            spatial,
        }),
    ))
}

/// Signed square root followed by L2 normalization. Optional post-step for
/// pooled features; not applied by default.
pub fn signed_power_normalize(x: &Tensor) -> Tensor {
    let y = x.map(|v| v.signum() * v.abs().sqrt());
    let norm = y.l2_norm();
    if norm > 0.0 {
        y.scale(1.0 / norm)
    } else {
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_one_forces_bucket_zero() {
        let p = SketchParams::new(3, 1, 99).unwrap();
        assert_eq!(p.hashes(), &[0, 0, 0]);
    }

    #[test]
    fn params_are_reproducible() {
        assert_eq!(SketchParams::new(64, 32, 7).unwrap(), SketchParams::new(64, 32, 7).unwrap());
        assert_ne!(SketchParams::new(64, 32, 7).unwrap(), SketchParams::new(64, 32, 8).unwrap());
    }

    #[test]
    fn invalid_params() {
        assert!(SketchParams::new(0, 4, 1).is_err());
        assert!(SketchParams::new(4, 0, 1).is_err());
        assert!(SketchParams::from_parts(vec![0, 2], vec![1.0, 1.0], 2).is_err());
        assert!(SketchParams::from_parts(vec![0, 1], vec![1.0, 0.5], 2).is_err());
    }

    #[test]
    fn hand_evaluated_sketch() {
        let p = SketchParams::from_parts(vec![0, 1, 0], vec![1.0, -1.0, 1.0], 2).unwrap();
        let out = count_sketch(&Tensor::vector(&[1.0, 2.0, 3.0]), &p).unwrap();
        assert_eq!(out.data(), &[4.0, -2.0]);
        assert_eq!(count_sketch(&Tensor::zeros(vec![3]), &p).unwrap().data(), &[0.0, 0.0]);
        assert!(count_sketch(&Tensor::zeros(vec![2]), &p).is_err());
    }

    #[test]
    fn identity_hashing() {
        let p = SketchParams::from_parts(vec![0, 1, 2, 3], vec![1.0; 4], 4).unwrap();
        let a = Tensor::vector(&[0.5, -1.0, 2.0, 7.0]);
        assert_eq!(count_sketch(&a, &p).unwrap(), a);
    }

    #[test]
    fn direct_outer_sketch_examples() {
        let one = SketchParams::from_parts(vec![0], vec![1.0], 1).unwrap();
        let out = outer_sketch_direct(&Tensor::vector(&[2.0]), &Tensor::vector(&[3.0]), &one, &one).unwrap();
        assert_eq!(out.data(), &[6.0]);

        let pa = SketchParams::from_parts(vec![0, 1], vec![1.0, 1.0], 2).unwrap();
        let pv = SketchParams::from_parts(vec![0], vec![1.0], 2).unwrap();
        let out = outer_sketch_direct(&Tensor::vector(&[1.0, 2.0]), &Tensor::vector(&[3.0]), &pa, &pv).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0]);

        let out = outer_sketch_direct(&Tensor::zeros(vec![2]), &Tensor::vector(&[3.0]), &pa, &pv).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);

        assert!(outer_sketch_direct(&Tensor::vector(&[1.0]), &Tensor::vector(&[3.0]), &one, &pv).is_err());
    }

    #[test]
    fn mcb_scalar_case() {
        let one = SketchParams::from_parts(vec![0], vec![1.0], 1).unwrap();
        let img = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let out = mcb_fuse(&img, &Tensor::vector(&[3.0]), &one, &one).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert!((out.item() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn mcb_zero_text() {
        let pi = SketchParams::new(4, 5, 1).unwrap();
        let pt = SketchParams::new(3, 5, 2).unwrap();
        let img = Tensor::new(vec![4, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let out = mcb_fuse(&img, &Tensor::zeros(vec![3]), &pi, &pt).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mcb_width_mismatch() {
        let pi = SketchParams::new(1, 4, 1).unwrap();
        let pt = SketchParams::new(1, 5, 1).unwrap();
        let img = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert!(mcb_fuse(&img, &Tensor::vector(&[1.0]), &pi, &pt).is_err());
    }

    #[test]
    fn mcb_scalar_backward() {
        let one = SketchParams::from_parts(vec![0], vec![1.0], 1).unwrap();
        let (gi, gt) = mcb_backward(&[2.0], &[3.0], &[1.0], &one, &one, 1).unwrap();
        assert!((gi[0] - 3.0).abs() < 1e-12);
        assert!((gt[0] - 2.0).abs() < 1e-12);
        let (gi, gt) = mcb_backward(&[2.0], &[3.0], &[0.0], &one, &one, 1).unwrap();
        assert_eq!((gi[0], gt[0]), (0.0, 0.0));
    }

    #[test]
    fn power_normalize_has_unit_norm() {
        let y = signed_power_normalize(&Tensor::vector(&[4.0, -9.0, 0.0]));
        assert!((y.l2_norm() - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 0.0);
        assert_eq!(signed_power_normalize(&Tensor::zeros(vec![3])).data(), &[0.0; 3]);
    }
}
