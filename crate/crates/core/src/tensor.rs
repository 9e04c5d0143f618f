//! Dense NCHW tensors of `f64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fit shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements in one `H x W` plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks same-shaped batches along N.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        let [n, ca, h, w] = a.shape;
        let cb = b.shape[1];
        assert_eq!(
            (b.shape[0], b.shape[2], b.shape[3]),
            (n, h, w),
            "skip join of unequal resolutions"
        );
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            data.extend_from_slice(a.item(i));
            data.extend_from_slice(b.item(i));
        }
        Tensor {
            shape: [n, ca + cb, h, w],
            data,
        }
    }

    /// Inverse of [`Tensor::concat_channels`] for gradients.
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let [n, c, h, w] = self.shape;
        let plane = h * w;
        let mut a = Tensor::zeros([n, first, h, w]);
        let mut b = Tensor::zeros([n, c - first, h, w]);
        for i in 0..n {
            let item = self.item(i);
            a.item_mut(i).copy_from_slice(&item[..first * plane]);
            b.item_mut(i).copy_from_slice(&item[first * plane..]);
        }
        (a, b)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Tensor {
        let [n, c, h, w] = self.shape;
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for (src, dst) in self.data.chunks(h * w).zip(out.data.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        out
    }

    /// Gradient of [`Tensor::upsample2`]: sums each 2x2 block.
    pub fn upsample2_backward(&self) -> Tensor {
        let [n, c, h2, w2] = self.shape;
        let (h, w) = (h2 / 2, w2 / 2);
        let mut out = Tensor::zeros([n, c, h, w]);
        for (src, dst) in self.data.chunks(h2 * w2).zip(out.data.chunks_mut(h * w)) {
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                }
            }
        }
        out
    }

    /// Zero-pads the bottom and right edges to the given size.
    pub fn pad_to(&self, height: usize, width: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        if (h, w) == (height, width) {
            return self.clone();
        }
        let mut out = Tensor::zeros([n, c, height, width]);
        for (src, dst) in self
            .data
            .chunks(h * w)
            .zip(out.data.chunks_mut(height * width))
        {
            for y in 0..h {
                dst[y * width..y * width + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        out
    }

    /// Keeps the top-left `height x width` window.
    pub fn crop_to(&self, height: usize, width: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        if (h, w) == (height, width) {
            return self.clone();
        }
        let mut out = Tensor::zeros([n, c, height, width]);
        for (src, dst) in self
            .data
            .chunks(h * w)
            .zip(out.data.chunks_mut(height * width))
        {
            for y in 0..height {
                dst[y * width..(y + 1) * width].copy_from_slice(&src[y * w..y * w + width]);
            }
        }
        out
    }
}
