//! Planar (channel-major) float images.

use serde::{Deserialize, Serialize};

/// A `channels × height × width` image stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planar {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Planar {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Returns `None` when `data` does not have `width * height * channels` values.
    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == width * height * channels).then_some(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    /// `(width, height, channels)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Channel-wise concatenation; `None` on a size mismatch.
    pub fn concat(parts: &[&Planar]) -> Option<Planar> {
        let first = parts.first()?;
        let (w, h) = (first.width, first.height);
        if parts.iter().any(|p| p.width != w || p.height != h) {
            return None;
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(w * h * channels);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Some(Planar {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    /// Copy of channels `start..end`.
    pub fn channel_range(&self, start: usize, end: usize) -> Planar {
        let n = self.width * self.height;
        Planar {
            width: self.width,
            height: self.height,
            channels: end - start,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    pub fn channel_means(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| {
                let p = self.plane(c);
                p.iter().map(|&v| v as f64).sum::<f64>() / p.len().max(1) as f64
            })
            .collect()
    }

    /// Luma (0.299, 0.587, 0.114) of a 3-channel image, row-major.
    pub fn luma(&self) -> Vec<f64> {
        assert_eq!(self.channels, 3, "luma needs an RGB image");
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((&r, &g), &b)| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
            .collect()
    }

    /// Horizontal mirror.
    pub fn mirrored(&self) -> Planar {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}
