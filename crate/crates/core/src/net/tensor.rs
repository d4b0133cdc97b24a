use crate::real::Real;

/// Dense `[batch, channels, nx, ny, nz]` activation tensor, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub batch: usize,
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(batch: usize, channels: usize, dims: [usize; 3]) -> Self {
        Tensor {
            batch,
            channels,
            dims,
            data: vec![T::zero(); batch * channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, dims: [usize; 3], data: Vec<T>) -> Self {
        assert_eq!(data.len(), batch * channels * dims[0] * dims[1] * dims[2]);
        Tensor {
            batch,
            channels,
            dims,
            data,
        }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch && self.channels == other.channels && self.dims == other.dims
    }

    #[inline]
    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let n = self.voxels();
        let off = (b * self.channels + c) * n;
        &self.data[off..off + n]
    }

    #[inline]
    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.voxels();
        let off = (b * self.channels + c) * n;
        &mut self.data[off..off + n]
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Self) -> Self {
        assert!(self.same_shape(other), "tensor shapes differ");
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "tensor shapes differ");
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Selects one batch element.
    pub fn slice_batch(&self, b: usize) -> Self {
        let n = self.channels * self.voxels();
        Tensor {
            batch: 1,
            channels: self.channels,
            dims: self.dims,
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    /// Concatenates batch elements with identical shapes.
    pub fn stack(parts: &[Tensor<T>]) -> Self {
        let first = &parts[0];
        let mut data = Vec::with_capacity(parts.len() * first.data.len());
        for p in parts {
            assert_eq!((p.channels, p.dims), (first.channels, first.dims));
            data.extend_from_slice(&p.data);
        }
        Tensor {
            batch: parts.iter().map(|p| p.batch).sum(),
            channels: first.channels,
            dims: first.dims,
            data,
        }
    }
}
