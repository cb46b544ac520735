//! Dense row-major 2-D grids used for slices, masks and segmentation maps.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Binary lesion mask with values in `{0, 1}`.
pub type Mask = Image<u8>;

impl<T: Copy> Image<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    /// Returns `None` when `data.len() != height * width`.
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == height * width).then_some(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Image<U> {
        Image { height: self.height, width: self.width, data: self.data.iter().copied().map(f).collect() }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }

    /// Rotates counter-clockwise by `quarter_turns * 90` degrees.
    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        let (h, w) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Self::from_fn(w, h, |r, c| self.get(c, w - 1 - r)),
            2 => Self::from_fn(h, w, |r, c| self.get(h - 1 - r, w - 1 - c)),
            _ => Self::from_fn(w, h, |r, c| self.get(h - 1 - c, r)),
        }
    }
}

impl Mask {
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Fraction of foreground pixels in each `factor x factor` cell.
    pub fn downsample_fraction<T: crate::Scalar>(&self, factor: usize) -> Image<T> {
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = T::lit((factor * factor) as f64);
        Image::from_fn(h, w, |r, c| {
            let mut n = 0usize;
            for dr in 0..factor {
                for dc in 0..factor {
                    n += self.get(r * factor + dr, c * factor + dc) as usize;
                }
            }
            T::lit(n as f64) / norm
        })
    }
}

impl Image<f32> {
    /// Snaps every value to the nearest of 256 evenly spaced levels in `[0, 1]`.
    pub fn quantize_u8(&self) -> Self {
        self.map(|v| u8_level(v) as f32 / 255.0)
    }

    pub fn to_u8_levels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| u8_level(v)).collect()
    }

    pub fn all_in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn cast<T: crate::Scalar>(&self) -> Image<T> {
        self.map(|v| T::lit(v as f64))
    }
}

pub(crate) fn u8_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
