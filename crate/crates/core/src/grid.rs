//! Dense row-major 2D containers shared by depth maps, masks and uncertainty maps.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

pub type DepthMap = Grid<f64>;
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

pub(crate) fn check_same_shape<A, B>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

impl Grid<f64> {
    /// 2x2 block average of the pixels where `mask` is set. A coarse pixel is
    /// valid when at least one of its four children is valid.
    pub fn downsample_masked(&self, mask: &Mask) -> Result<(Grid<f64>, Mask)> {
        check_same_shape(self, mask, "downsample")?;
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::BadDimensions {
                width: self.width,
                height: self.height,
            });
        }
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Grid::filled(w, h, 0.0);
        let mut out_mask = Grid::filled(w, h, false);
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut n = 0usize;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if *mask.get(sx, sy) {
                        sum += *self.get(sx, sy);
                        n += 1;
                    }
                }
                if n > 0 {
                    *out.get_mut(x, y) = sum / n as f64;
                    *out_mask.get_mut(x, y) = true;
                }
            }
        }
        Ok((out, out_mask))
    }

    /// Bilinear x2 upsampling with pixel centers at half-integer coordinates
    /// and edge clamping.
    pub fn upsample2_bilinear(&self) -> Grid<f64> {
        let (w, h) = (self.width * 2, self.height * 2);
        Grid::from_fn(w, h, |x, y| {
            let taps = upsample_taps(x, self.width, y, self.height);
            taps.iter()
                .map(|&(sx, sy, wgt)| wgt * *self.get(sx, sy))
                .sum()
        })
    }

    /// Adjoint of [`Grid::upsample2_bilinear`]: scatters fine-resolution
    /// gradients back onto the coarse grid.
    pub fn upsample2_bilinear_adjoint(fine: &Grid<f64>) -> Grid<f64> {
        let (w, h) = (fine.width / 2, fine.height / 2);
        let mut coarse = Grid::filled(w, h, 0.0);
        for y in 0..fine.height {
            for x in 0..fine.width {
                let g = *fine.get(x, y);
                for (sx, sy, wgt) in upsample_taps(x, w, y, h) {
                    *coarse.get_mut(sx, sy) += wgt * g;
                }
            }
        }
        coarse
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl<T: Copy> Grid<T> {
    pub fn upsample2_nearest(&self) -> Grid<T> {
        Grid::from_fn(self.width * 2, self.height * 2, |x, y| {
            *self.get(x / 2, y / 2)
        })
    }
}

/// Four bilinear taps (coarse x, coarse y, weight) for fine pixel (x, y).
fn upsample_taps(x: usize, cw: usize, y: usize, ch: usize) -> [(usize, usize, f64); 4] {
    let axis = |i: usize, n: usize| -> (usize, usize, f64) {
        // fine center i + 0.5 sits at coarse index coordinate (i + 0.5) / 2 - 0.5
        let c = ((i as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let (x0, x1, fx) = axis(x, cw);
    let (y0, y1, fy) = axis(y, ch);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ]
}
