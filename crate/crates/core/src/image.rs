//! Row-major image buffers.

use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "buffer does not match image size");
        Self { width, height, data }
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
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
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
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
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

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

impl<T: Send + Sync> Image<T> {
    /// Builds an image by evaluating `f(x, y)` in parallel over rows.
    pub fn from_fn_par<F>(width: usize, height: usize, f: F) -> Self
    where
        F: Fn(usize, usize) -> T + Sync + Send,
    {
        let mut data = Vec::with_capacity(width * height);
        (0..width * height)
            .into_par_iter()
            .map(|i| f(i % width, i / width))
            .collect_into_vec(&mut data);
        Self { width, height, data }
    }

    pub fn map_par<U: Send + Sync, F>(&self, f: F) -> Image<U>
    where
        F: Fn(&T) -> U + Sync + Send,
    {
        let data = self.data.par_iter().map(f).collect();
        Image { width: self.width, height: self.height, data }
    }
}

impl Image<f64> {
    /// Bilinear sample at continuous pixel coordinates; `None` outside the
    /// interpolation domain.
    pub fn bilinear(&self, u: f64, v: f64) -> Option<f64> {
        if !(u >= 0.0 && v >= 0.0) {
            return None;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        if x0 + 1 >= self.width || y0 + 1 >= self.height {
            return None;
        }
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let a = *self.get(x0, y0);
        let b = *self.get(x0 + 1, y0);
        let c = *self.get(x0, y0 + 1);
        let d = *self.get(x0 + 1, y0 + 1);
        Some((a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy)
    }
}
