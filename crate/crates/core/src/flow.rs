//! Dense optical flow by polynomial expansion (Farnebäck), plus the 3-channel
//! flow image fed to the flow detector variant.
//!
//! Each frame is approximated around every pixel by a quadratic
//! `f(x) ≈ xᵀAx + bᵀx + c`. Under a translation `d` the linear coefficients
//! satisfy `b₂ = b₁ - 2Ad`, so `d` follows from a small linear system that is
//! averaged over a window and refined coarse-to-fine on an image pyramid.
//!
//! Flow vectors follow the usual convention: `prev(x) ≈ next(x + d(x))`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Planar;

/// Pyramid levels smaller than this (in either dimension) are skipped.
const MIN_LEVEL_SIZE: usize = 16;
/// Images are expanded on a 0–255 intensity scale; the regularizer below is
/// calibrated to it.
const INTENSITY_SCALE: f64 = 255.0;
const SOLVE_REGULARIZER: f64 = 1e-3;
/// Relative confidence of samples taken outside the frame.
const OUTSIDE_WEIGHT: f64 = 0.05;

pub const FLO_MAGIC: &[u8; 4] = b"FLO1";

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame sizes differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("image {width}x{height} is smaller than the {n}-pixel expansion window")]
    ImageTooSmall { width: usize, height: usize, n: usize },
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error("expected a 3-channel frame, got {0} channels")]
    NotRgb(usize),
    #[error("malformed flow file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    pub pyramid_scale: f64,
    pub levels: usize,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_scale: 0.5,
            levels: 3,
            window_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: String| Err(FlowError::InvalidParams(m));
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return bad(format!("pyramid scale {} not in (0, 1)", self.pyramid_scale));
        }
        if self.levels == 0 || self.iterations == 0 {
            return bad("levels and iterations must be positive".into());
        }
        if self.window_size % 2 == 0 {
            return bad(format!("window size {} must be odd", self.window_size));
        }
        if self.poly_n < 5 || self.poly_n % 2 == 0 {
            return bad(format!("poly_n {} must be odd and at least 5", self.poly_n));
        }
        if !(self.poly_sigma > 0.0 && self.poly_sigma.is_finite()) {
            return bad(format!("poly_sigma {} must be positive", self.poly_sigma));
        }
        Ok(())
    }
}

/// Single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_rgb(frame: &Planar) -> Result<Self, FlowError> {
        if frame.channels() != 3 {
            return Err(FlowError::NotRgb(frame.channels()));
        }
        Ok(Self::new(frame.width(), frame.height(), frame.luma()))
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with replicated borders.
    fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.width, self.height, x, y)
    }
}

fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Local quadratic model `xᵀAx + bᵀx + c` of one pixel neighborhood, with
/// `x` horizontal and `y` vertical offsets in pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuadCoeffs {
    pub c: f64,
    pub bx: f64,
    pub by: f64,
    pub axx: f64,
    pub ayy: f64,
    /// Off-diagonal entry of the symmetric `A`.
    pub axy: f64,
}

impl QuadCoeffs {
    fn from_basis(r: &[f64; 6]) -> Self {
        Self {
            c: r[0],
            bx: r[1],
            by: r[2],
            axx: r[3],
            ayy: r[4],
            axy: 0.5 * r[5],
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub width: usize,
    pub height: usize,
    pub coeffs: Vec<QuadCoeffs>,
}

impl PolyExpansion {
    pub fn at(&self, x: usize, y: usize) -> QuadCoeffs {
        self.coeffs[y * self.width + x]
    }

    fn sample(&self, x: f64, y: f64) -> QuadCoeffs {
        let (w, h) = (self.width, self.height);
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let x0 = (x.floor() as usize).min(w - 1);
        let y0 = (y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let (a, b, c, d) = (self.at(x0, y0), self.at(x1, y0), self.at(x0, y1), self.at(x1, y1));
        let mix = |f: fn(&QuadCoeffs) -> f64| w00 * f(&a) + w10 * f(&b) + w01 * f(&c) + w11 * f(&d);
        QuadCoeffs {
            c: mix(|q| q.c),
            bx: mix(|q| q.bx),
            by: mix(|q| q.by),
            axx: mix(|q| q.axx),
            ayy: mix(|q| q.ayy),
            axy: mix(|q| q.axy),
        }
    }
}

#[inline]
fn basis(dx: f64, dy: f64) -> [f64; 6] {
    [1.0, dx, dy, dx * dx, dy * dy, dx * dy]
}

/// Solves the symmetric 6×6 system in place by Gaussian elimination with
/// partial pivoting. Returns `None` when singular.
fn solve6(mut m: [[f64; 6]; 6], mut rhs: [f64; 6]) -> Option<[f64; 6]> {
    for col in 0..6 {
        let pivot = (col..6).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..6 {
            let f = m[row][col] / m[col][col];
            for k in col..6 {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = [0.0; 6];
    for row in (0..6).rev() {
        let mut s = rhs[row];
        for k in row + 1..6 {
            s -= m[row][k] * x[k];
        }
        x[row] = s / m[row][row];
    }
    Some(x)
}

/// Weighted least-squares quadratic fit around every pixel over an `n × n`
/// Gaussian-weighted neighborhood. Near the border only in-image samples are
/// used.
pub fn poly_expansion(image: &GrayImage, n: usize, sigma: f64) -> Result<PolyExpansion, FlowError> {
    if n < 3 || n % 2 == 0 {
        return Err(FlowError::InvalidParams(format!("expansion size {n} must be odd and >= 3")));
    }
    let (w, h) = (image.width, image.height);
    if w < n || h < n {
        return Err(FlowError::ImageTooSmall { width: w, height: h, n });
    }
    let r = (n / 2) as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let weight = |dx: isize, dy: isize| g[(dx + r) as usize] * g[(dy + r) as usize];

    // Interior pixels share one normal matrix; fold its inverse into six
    // correlation kernels.
    let mut normal = [[0.0; 6]; 6];
    for dy in -r..=r {
        for dx in -r..=r {
            let phi = basis(dx as f64, dy as f64);
            let wt = weight(dx, dy);
            for i in 0..6 {
                for j in 0..6 {
                    normal[i][j] += wt * phi[i] * phi[j];
                }
            }
        }
    }
    let side = n * n;
    let mut kernels = vec![[0.0; 6]; side];
    for (idx, kernel) in kernels.iter_mut().enumerate() {
        let dx = (idx % n) as isize - r;
        let dy = (idx / n) as isize - r;
        let mut e = [0.0; 6];
        let phi = basis(dx as f64, dy as f64);
        let wt = weight(dx, dy);
        for i in 0..6 {
            e[i] = wt * phi[i];
        }
        // column of normal⁻¹ · (w φ)
        *kernel = solve6(normal, e).expect("quadratic normal matrix is non-singular");
    }

    let mut coeffs = vec![QuadCoeffs::default(); w * h];
    let ru = r as usize;
    for y in 0..h {
        let interior_y = y >= ru && y + ru < h;
        for x in 0..w {
            let r6 = if interior_y && x >= ru && x + ru < w {
                let mut acc = [0.0; 6];
                for dy in 0..n {
                    let row = &image.data[(y + dy - ru) * w + x - ru..][..n];
                    for (dx, &v) in row.iter().enumerate() {
                        let k = &kernels[dy * n + dx];
                        for i in 0..6 {
                            acc[i] += k[i] * v;
                        }
                    }
                }
                acc
            } else {
                let mut m = [[0.0; 6]; 6];
                let mut rhs = [0.0; 6];
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let phi = basis(dx as f64, dy as f64);
                        let wt = weight(dx, dy);
                        let v = image.at(xx as usize, yy as usize);
                        for i in 0..6 {
                            rhs[i] += wt * phi[i] * v;
                            for j in 0..6 {
                                m[i][j] += wt * phi[i] * phi[j];
                            }
                        }
                    }
                }
                solve6(m, rhs).unwrap_or([image.at(x, y), 0.0, 0.0, 0.0, 0.0, 0.0])
            };
            coeffs[y * w + x] = QuadCoeffs::from_basis(&r6);
        }
    }
    Ok(PolyExpansion { width: w, height: h, coeffs })
}

/// Per-pixel displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u * u + v * v).sqrt())
            .fold(0.0, f32::max)
    }

    /// Median `(u, v)` over pixels at least `margin` away from every border.
    pub fn interior_median(&self, margin: usize) -> (f32, f32) {
        let mut us = Vec::new();
        let mut vs = Vec::new();
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                us.push(self.u[y * self.width + x]);
                vs.push(self.v[y * self.width + x]);
            }
        }
        (median(&mut us), median(&mut vs))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), FlowError> {
        w.write_all(FLO_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.u.len() * 8);
        for (u, v) in self.u.iter().zip(&self.v) {
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, FlowError> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)
            .map_err(|e| FlowError::Format(format!("short header: {e}")))?;
        if &header[..4] != FLO_MAGIC {
            return Err(FlowError::Format("bad magic".into()));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let n = width
            .checked_mul(height)
            .ok_or_else(|| FlowError::Format("size overflow".into()))?;
        let mut body = vec![0u8; n * 8];
        r.read_exact(&mut body)
            .map_err(|e| FlowError::Format(format!("truncated body: {e}")))?;
        let mut u = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for px in body.chunks_exact(8) {
            u.push(f32::from_le_bytes(px[..4].try_into().unwrap()));
            v.push(f32::from_le_bytes(px[4..].try_into().unwrap()));
        }
        Ok(Self { width, height, u, v })
    }
}

fn median(v: &mut [f32]) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f32::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Anything that turns a frame pair into a dense flow field.
pub trait FlowEstimator {
    fn estimate(&self, prev: &Planar, next: &Planar) -> Result<FlowField, FlowError>;
}

impl FlowEstimator for FlowParams {
    fn estimate(&self, prev: &Planar, next: &Planar) -> Result<FlowField, FlowError> {
        farneback_flow(prev, next, self)
    }
}

fn check_pair(prev: &Planar, next: &Planar) -> Result<(), FlowError> {
    let a = (prev.width(), prev.height());
    let b = (next.width(), next.height());
    if a != b {
        return Err(FlowError::DimensionMismatch(a, b));
    }
    Ok(())
}

/// Farnebäck dense flow between two RGB frames.
pub fn farneback_flow(prev: &Planar, next: &Planar, params: &FlowParams) -> Result<FlowField, FlowError> {
    params.validate()?;
    check_pair(prev, next)?;
    let scale = |g: GrayImage| GrayImage {
        data: g.data.into_iter().map(|v| v * INTENSITY_SCALE).collect(),
        ..g
    };
    let g0 = scale(GrayImage::from_rgb(prev)?);
    let g1 = scale(GrayImage::from_rgb(next)?);
    farneback_gray(&g0, &g1, params)
}

/// [`farneback_flow`] on grayscale images.
pub fn farneback_gray(prev: &GrayImage, next: &GrayImage, params: &FlowParams) -> Result<FlowField, FlowError> {
    params.validate()?;
    if (prev.width, prev.height) != (next.width, next.height) {
        return Err(FlowError::DimensionMismatch(
            (prev.width, prev.height),
            (next.width, next.height),
        ));
    }
    if prev.width < params.poly_n || prev.height < params.poly_n {
        return Err(FlowError::ImageTooSmall {
            width: prev.width,
            height: prev.height,
            n: params.poly_n,
        });
    }

    let mut sizes = vec![(prev.width, prev.height)];
    let mut s = 1.0;
    for _ in 1..params.levels {
        s *= params.pyramid_scale;
        let w = (prev.width as f64 * s).round() as usize;
        let h = (prev.height as f64 * s).round() as usize;
        if w < MIN_LEVEL_SIZE.max(params.poly_n) || h < MIN_LEVEL_SIZE.max(params.poly_n) {
            break;
        }
        sizes.push((w, h));
    }

    let mut flow_u: Vec<f64> = Vec::new();
    let mut flow_v: Vec<f64> = Vec::new();
    let mut prev_size = (0usize, 0usize);
    for (level, &(w, h)) in sizes.iter().enumerate().rev() {
        let (i0, i1) = if level == 0 {
            (prev.clone(), next.clone())
        } else {
            let level_scale = w as f64 / prev.width as f64;
            let sigma = (1.0 / level_scale - 1.0) * 0.5;
            (
                resize(&gaussian_blur(prev, sigma), w, h),
                resize(&gaussian_blur(next, sigma), w, h),
            )
        };
        if flow_u.is_empty() {
            flow_u = vec![0.0; w * h];
            flow_v = vec![0.0; w * h];
        } else {
            let sx = w as f64 / prev_size.0 as f64;
            let sy = h as f64 / prev_size.1 as f64;
            let up = |f: &[f64], k: f64| {
                resize(&GrayImage::new(prev_size.0, prev_size.1, f.to_vec()), w, h)
                    .data
                    .into_iter()
                    .map(|v| v * k)
                    .collect::<Vec<_>>()
            };
            flow_u = up(&flow_u, sx);
            flow_v = up(&flow_v, sy);
        }
        prev_size = (w, h);

        let r0 = poly_expansion(&i0, params.poly_n, params.poly_sigma)?;
        let r1 = poly_expansion(&i1, params.poly_n, params.poly_sigma)?;
        for _ in 0..params.iterations {
            let mut m = displacement_system(&r0, &r1, &flow_u, &flow_v);
            for channel in m.iter_mut() {
                box_blur(channel, w, h, params.window_size);
            }
            for i in 0..w * h {
                let (g11, g12, g22, h1, h2) = (m[0][i], m[1][i], m[2][i], m[3][i], m[4][i]);
                let det = g11 * g22 - g12 * g12 + SOLVE_REGULARIZER;
                flow_u[i] = (g22 * h1 - g12 * h2) / det;
                flow_v[i] = (g11 * h2 - g12 * h1) / det;
            }
        }
    }

    Ok(FlowField {
        width: prev.width,
        height: prev.height,
        u: flow_u.iter().map(|&v| v as f32).collect(),
        v: flow_v.iter().map(|&v| v as f32).collect(),
    })
}

/// Per-pixel normal equations `G d = h` (entries g11, g12, g22, h1, h2).
fn displacement_system(r0: &PolyExpansion, r1: &PolyExpansion, fu: &[f64], fv: &[f64]) -> [Vec<f64>; 5] {
    let (w, h) = (r0.width, r0.height);
    let mut out: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; w * h]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (fu[i], fv[i]);
            let (sx, sy) = (x as f64 + dx, y as f64 + dy);
            let inside = sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64;
            let wt = if inside { 1.0 } else { OUTSIDE_WEIGHT };
            let p = r0.coeffs[i];
            let q = r1.sample(sx, sy);
            let a11 = 0.5 * (p.axx + q.axx);
            let a12 = 0.5 * (p.axy + q.axy);
            let a22 = 0.5 * (p.ayy + q.ayy);
            let b1 = -0.5 * (q.bx - p.bx) + a11 * dx + a12 * dy;
            let b2 = -0.5 * (q.by - p.by) + a12 * dx + a22 * dy;
            out[0][i] = wt * (a11 * a11 + a12 * a12);
            out[1][i] = wt * (a11 * a12 + a12 * a22);
            out[2][i] = wt * (a12 * a12 + a22 * a22);
            out[3][i] = wt * (a11 * b1 + a12 * b2);
            out[4][i] = wt * (a12 * b1 + a22 * b2);
        }
    }
    out
}

/// Mean over a `size × size` window truncated at the borders.
fn box_blur(data: &mut [f64], w: usize, h: usize, size: usize) {
    let r = size / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let mut prefix = vec![0.0; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x];
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            tmp[y * w + x] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
        }
    }
    let mut col = vec![0.0; h + 1];
    for x in 0..w {
        for y in 0..h {
            col[y + 1] = col[y] + tmp[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            data[y * w + x] = (col[hi] - col[lo]) / (hi - lo) as f64;
        }
    }
}

fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (sigma * 2.5).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / norm).collect();
    let (w, h) = (img.width as isize, img.height as isize);
    let clampi = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * img.data[y as usize * img.width + clampi(x + j as isize - r, w)];
            }
            tmp[y as usize * img.width + x as usize] = s;
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * tmp[clampi(y + j as isize - r, h) * img.width + x as usize];
            }
            out[y as usize * img.width + x as usize] = s;
        }
    }
    GrayImage::new(img.width, img.height, out)
}

/// Bilinear resize with pixel-center alignment.
fn resize(img: &GrayImage, w: usize, h: usize) -> GrayImage {
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    GrayImage::from_fn(w, h, |x, y| {
        img.sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
    })
}

/// Exhaustive integer block matching; a slow cross-check for small motions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMatching {
    pub search_radius: usize,
    pub half_window: usize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self {
            search_radius: 4,
            half_window: 3,
        }
    }
}

impl FlowEstimator for BlockMatching {
    fn estimate(&self, prev: &Planar, next: &Planar) -> Result<FlowField, FlowError> {
        check_pair(prev, next)?;
        let a = GrayImage::from_rgb(prev)?;
        let b = GrayImage::from_rgb(next)?;
        let (w, h) = (a.width as isize, a.height as isize);
        let at = |img: &GrayImage, x: isize, y: isize| img.at(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
        let r = self.search_radius as isize;
        let hw = self.half_window as isize;
        let mut field = FlowField::zeros(a.width, a.height);
        for y in 0..h {
            for x in 0..w {
                let mut best = (f64::INFINITY, 0isize, 0isize);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let mut ssd = 0.0;
                        for oy in -hw..=hw {
                            for ox in -hw..=hw {
                                let d = at(&a, x + ox, y + oy) - at(&b, x + ox + dx, y + oy + dy);
                                ssd += d * d;
                            }
                        }
                        let closer = dx.abs() + dy.abs() < best.1.abs() + best.2.abs();
                        if ssd < best.0 - 1e-12 || ((ssd - best.0).abs() <= 1e-12 && closer) {
                            best = (ssd, dx, dy);
                        }
                    }
                }
                let i = (y * w + x) as usize;
                field.u[i] = best.1 as f32;
                field.v[i] = best.2 as f32;
            }
        }
        Ok(field)
    }
}

/// Displacements are clamped to this many pixels before encoding.
pub const DEFAULT_FLOW_CLAMP: f32 = 16.0;
/// Channel value of zero motion.
pub const ZERO_MOTION_CODE: f32 = 0.5;

/// Maps a displacement (or norm) in pixels to `[0, 1]`, zero at mid-range.
#[inline]
pub fn encode_motion(d: f32, clamp: f32) -> f32 {
    ZERO_MOTION_CODE + 0.5 * d.clamp(-clamp, clamp) / clamp
}

/// 3-channel flow image: horizontal, vertical and norm channels.
pub fn flow_image(field: &FlowField, clamp: f32) -> Planar {
    let n = field.width * field.height;
    let mut data = Vec::with_capacity(3 * n);
    data.extend(field.u.iter().map(|&u| encode_motion(u, clamp)));
    data.extend(field.v.iter().map(|&v| encode_motion(v, clamp)));
    data.extend(
        field
            .u
            .iter()
            .zip(&field.v)
            .map(|(&u, &v)| encode_motion((u * u + v * v).sqrt(), clamp)),
    );
    Planar::from_vec(field.width, field.height, 3, data).expect("flow image size")
}

/// Smooth random texture used by the flow tests and the synthetic scenes:
/// a sum of random sinusoids on `[0, 1]`, sampled on a canvas offset by
/// `(ox, oy)`.
pub fn sinusoid_texture(seed: u64, width: usize, height: usize, ox: f64, oy: f64) -> Planar {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            let period = rng.random_range(5.0..20.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / period;
            (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0))
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.3).sum();
    let tint: [f64; 3] = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.6..1.0)];
    let mut img = Planar::zeros(width, height, 3);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 - ox, y as f64 - oy);
            let s: f64 = waves.iter().map(|&(kx, ky, ph, a)| a * (kx * px + ky * py + ph).sin()).sum();
            let v = 0.5 + 0.5 * s / total;
            for (c, t) in tint.iter().enumerate() {
                img.set(c, y, x, (v * t) as f32);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct weighted least squares on one patch, solved through the normal
    /// equations built from scratch.
    fn patch_fit(f: impl Fn(f64, f64) -> f64, n: usize, sigma: f64) -> [f64; 6] {
        let r = (n / 2) as isize;
        let mut m = [[0.0; 6]; 6];
        let mut rhs = [0.0; 6];
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (dx as f64, dy as f64);
                let w = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                let phi = [1.0, x, y, x * x, y * y, x * y];
                for i in 0..6 {
                    rhs[i] += w * phi[i] * f(x, y);
                    for j in 0..6 {
                        m[i][j] += w * phi[i] * phi[j];
                    }
                }
            }
        }
        solve6(m, rhs).unwrap()
    }

    #[test]
    fn expansion_of_constant_image() {
        let img = GrayImage::from_fn(16, 16, |_, _| 0.3);
        let e = poly_expansion(&img, 5, 1.1).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let q = e.at(x, y);
                assert!((q.c - 0.3).abs() < 1e-9);
                assert!(q.bx.abs() < 1e-9 && q.by.abs() < 1e-9);
                assert!(q.axx.abs() < 1e-9 && q.ayy.abs() < 1e-9 && q.axy.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn expansion_of_ramp_matches_patch_oracle() {
        let img = GrayImage::from_fn(16, 16, |x, _| x as f64);
        let e = poly_expansion(&img, 5, 1.1).unwrap();
        let oracle = patch_fit(|x, _| x, 5, 1.1);
        assert!((oracle[1] - 1.0).abs() < 1e-9);
        for (x, y) in [(5, 5), (8, 10), (2, 13)] {
            let q = e.at(x, y);
            assert!((q.bx - 1.0).abs() < 1e-9, "{q:?}");
            assert!(q.by.abs() < 1e-9);
            assert!(q.axx.abs() < 1e-9 && q.ayy.abs() < 1e-9 && q.axy.abs() < 1e-9);
            assert!((q.c - x as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn expansion_of_parabola_matches_patch_oracle() {
        let img = GrayImage::from_fn(16, 16, |x, _| (x as f64).powi(2));
        let e = poly_expansion(&img, 5, 1.1).unwrap();
        let oracle = patch_fit(|x, _| x * x, 5, 1.1);
        for x in 2..14 {
            let q = e.at(x, 8);
            assert!((q.axx - oracle[3]).abs() < 0.05);
            assert!((q.axx - 1.0).abs() < 0.05);
            // local gradient of x² at x
            assert!((q.bx - 2.0 * x as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn expansion_rejects_tiny_images() {
        let img = GrayImage::from_fn(4, 8, |_, _| 0.0);
        assert!(matches!(poly_expansion(&img, 5, 1.1), Err(FlowError::ImageTooSmall { .. })));
    }

    #[test]
    fn zero_motion_gives_zero_flow() {
        let a = sinusoid_texture(1, 48, 40, 0.0, 0.0);
        let f = farneback_flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(f.max_magnitude() < 0.1, "{}", f.max_magnitude());
    }

    #[test]
    fn recovers_horizontal_and_vertical_translation() {
        let a = sinusoid_texture(7, 64, 64, 0.0, 0.0);
        let right = sinusoid_texture(7, 64, 64, 2.0, 0.0);
        let (u, v) = farneback_flow(&a, &right, &FlowParams::default()).unwrap().interior_median(8);
        assert!((1.5..=2.5).contains(&u) && (-0.5..=0.5).contains(&v), "({u}, {v})");
        let down = sinusoid_texture(7, 64, 64, 0.0, 3.0);
        let (u, v) = farneback_flow(&a, &down, &FlowParams::default()).unwrap().interior_median(8);
        assert!((-0.5..=0.5).contains(&u) && (2.5..=3.5).contains(&v), "({u}, {v})");
    }

    #[test]
    fn farneback_agrees_with_block_matching() {
        let a = sinusoid_texture(3, 40, 40, 0.0, 0.0);
        let b = sinusoid_texture(3, 40, 40, -1.0, 2.0);
        let fb = farneback_flow(&a, &b, &FlowParams::default()).unwrap().interior_median(8);
        let bm = BlockMatching::default().estimate(&a, &b).unwrap().interior_median(8);
        assert_eq!(bm, (-1.0, 2.0));
        assert!((fb.0 - bm.0).abs() < 0.5 && (fb.1 - bm.1).abs() < 0.5, "{fb:?} vs {bm:?}");
    }

    #[test]
    fn mirroring_negates_horizontal_flow() {
        let a = sinusoid_texture(9, 64, 48, 0.0, 0.0);
        let b = sinusoid_texture(9, 64, 48, 2.0, 1.0);
        let p = FlowParams::default();
        let f = farneback_flow(&a, &b, &p).unwrap();
        let m = farneback_flow(&a.mirrored(), &b.mirrored(), &p).unwrap();
        let (w, h) = (f.width, f.height);
        let mut du = Vec::new();
        let mut dv = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let j = y * w + (w - 1 - x);
                du.push((f.u[i] + m.u[j]).abs());
                dv.push((f.v[i] - m.v[j]).abs());
            }
        }
        assert!(median(&mut du) < 0.2);
        assert!(median(&mut dv) < 0.2);
    }

    #[test]
    fn rejects_mismatched_frames() {
        let a = Planar::zeros(32, 32, 3);
        let b = Planar::zeros(32, 30, 3);
        assert!(matches!(
            farneback_flow(&a, &b, &FlowParams::default()),
            Err(FlowError::DimensionMismatch(..))
        ));
        let bad = FlowParams { poly_n: 4, ..FlowParams::default() };
        assert!(farneback_flow(&a, &a, &bad).is_err());
    }

    #[test]
    fn flow_image_codes() {
        let zero = flow_image(&FlowField::zeros(5, 4), DEFAULT_FLOW_CLAMP);
        assert_eq!(zero.shape(), (5, 4, 3));
        assert!(zero.data().iter().all(|&v| v == ZERO_MOTION_CODE));
        let f = flow_image(&FlowField::constant(3, 3, 3.0, 4.0), DEFAULT_FLOW_CLAMP);
        assert_eq!(f.get(2, 1, 1), encode_motion(5.0, DEFAULT_FLOW_CLAMP));
        assert!(encode_motion(100.0, 16.0) == 1.0 && encode_motion(-100.0, 16.0) == 0.0);
        let mut prev = encode_motion(-20.0, 16.0);
        for i in -19..20 {
            let c = encode_motion(i as f32, 16.0);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn flo_roundtrip_and_truncation() {
        let mut f = FlowField::zeros(3, 2);
        f.u[4] = 1.25;
        f.v[1] = -7.5;
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FLO1");
        assert_eq!(buf.len(), 12 + 6 * 8);
        assert_eq!(FlowField::read_from(&buf[..]).unwrap(), f);
        assert!(matches!(FlowField::read_from(&buf[..30]), Err(FlowError::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(FlowField::read_from(&bad[..]).is_err());
    }
}
