//! Single-channel 3D grids used for masks, intensities and rendered outputs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

pub type Mask = Volume<u8>;

impl<T: Copy + Default> Volume<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if n != data.len() {
            return Err(Error::shape(
                "Volume::new",
                format!("{dims:?} holds {n} voxels, got {}", data.len()),
            ));
        }
        Ok(Volume { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Volume {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, T::default())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        (p[0] * self.dims[1] + p[1]) * self.dims[2] + p[2]
    }

    #[inline]
    pub fn coord(&self, i: usize) -> [usize; 3] {
        let d = self.dims;
        [i / (d[1] * d[2]), (i / d[2]) % d[1], i % d[2]]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        p[0] < self.dims[0] && p[1] < self.dims[1] && p[2] < self.dims[2]
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> T {
        self.data[self.index(p)]
    }

    #[inline]
    pub fn set(&mut self, p: [usize; 3], v: T) {
        let i = self.index(p);
        self.data[i] = v;
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirrors the volume along `axis`.
    pub fn flip(&self, axis: usize) -> Self {
        let mut out = self.clone();
        let d = self.dims;
        for i in 0..self.len() {
            let mut p = self.coord(i);
            p[axis] = d[axis] - 1 - p[axis];
            out.data[self.index(p)] = self.data[i];
        }
        out
    }

    /// Nearest-neighbour upsampling by 2 along every axis.
    pub fn upsample2(&self) -> Self {
        let [h, w, d] = self.dims;
        let dims = [2 * h, 2 * w, 2 * d];
        let mut out = Volume::zeros(dims);
        for i in 0..out.len() {
            let p = out.coord(i);
            out.data[i] = self.get([p[0] / 2, p[1] / 2, p[2] / 2]);
        }
        out
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// 2x2x2 max-pooling; every extent must be even.
    pub fn max_pool2(&self) -> Result<Self> {
        let [h, w, d] = self.dims;
        if h % 2 != 0 || w % 2 != 0 || d % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("odd extent in {:?}", self.dims)));
        }
        let dims = [h / 2, w / 2, d / 2];
        let mut out = Volume::zeros(dims);
        for i in 0..self.len() {
            if self.data[i] != 0 {
                let p = self.coord(i);
                out.set([p[0] / 2, p[1] / 2, p[2] / 2], 1);
            }
        }
        Ok(out)
    }

    /// Foreground coordinates in row-major order.
    pub fn foreground(&self) -> Vec<[usize; 3]> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| self.coord(i))
            .collect()
    }
}

/// Thresholds a probability grid: `p >= tau` becomes foreground.
pub fn binarize(probs: &[f32], dims: [usize; 3], tau: f32) -> Result<Mask> {
    Volume::new(dims, probs.iter().map(|&p| u8::from(p >= tau)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coord_index_roundtrip() {
        let v: Volume<u8> = Volume::zeros([3, 4, 5]);
        for i in 0..v.len() {
            assert_eq!(v.index(v.coord(i)), i);
        }
    }

    #[test]
    fn flip_is_involution() {
        let v = Volume::new([2, 3, 4], (0..24u8).collect()).unwrap();
        for a in 0..3 {
            assert_ne!(v.flip(a), v);
            assert_eq!(v.flip(a).flip(a), v);
        }
    }

    #[test]
    fn pool_then_upsample_covers_input() {
        let mut m = Mask::zeros([4, 4, 4]);
        m.set([1, 2, 3], 1);
        let up = m.max_pool2().unwrap().upsample2();
        assert_eq!(up.count(), 8);
        assert_eq!(up.get([1, 2, 3]), 1);
        assert!(Mask::zeros([3, 4, 4]).max_pool2().is_err());
    }
}
