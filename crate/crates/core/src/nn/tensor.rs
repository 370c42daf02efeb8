use crate::preprocess::ImageTensor;

/// Dense NCHW activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { n, c, h, w, data }
    }

    /// Stacks equally sized images into a batch.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a ImageTensor>) -> Self {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for img in images {
            let d = (img.channels(), img.height(), img.width());
            match dims {
                None => dims = Some(d),
                Some(prev) => assert_eq!(prev, d, "batch images must share a shape"),
            }
            data.extend_from_slice(img.data());
            n += 1;
        }
        let (c, h, w) = dims.expect("empty batch");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.n, self.h, self.w), (other.n, other.h, other.w), "concat shape mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for i in 0..self.n {
            data.extend_from_slice(self.sample(i));
            data.extend_from_slice(other.sample(i));
        }
        Tensor { n: self.n, c: self.c + other.c, h: self.h, w: self.w, data }
    }

    /// Channels `[from, to)` as a new tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Tensor {
        let plane = self.plane();
        let mut data = Vec::with_capacity(self.n * (to - from) * plane);
        for i in 0..self.n {
            data.extend_from_slice(&self.sample(i)[from * plane..to * plane]);
        }
        Tensor { n: self.n, c: to - from, h: self.h, w: self.w, data }
    }

    /// Adds `src` into channels `[at, at + src.c)`.
    pub fn add_into_channels(&mut self, at: usize, src: &Tensor) {
        assert_eq!((self.n, self.h, self.w), (src.n, src.h, src.w), "channel add shape mismatch");
        let plane = self.plane();
        for i in 0..self.n {
            let dst = &mut self.sample_mut(i)[at * plane..(at + src.c) * plane];
            for (d, s) in dst.iter_mut().zip(src.sample(i)) {
                *d += s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Row-major 2-D matrix (batch × width).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hconcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hconcat row mismatch");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix { rows: self.rows, cols: self.cols + other.cols, data }
    }

    /// Vertical concatenation.
    pub fn vconcat(&self, other: &Matrix) -> Matrix {
        if self.rows == 0 {
            return other.clone();
        }
        assert_eq!(self.cols, other.cols, "vconcat column mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix { rows: self.rows + other.rows, cols: self.cols, data }
    }
}
