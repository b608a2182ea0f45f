use crate::error::{Error, Result};

/// Dense `f32` tensor laid out as `[batch, channel, x, y, z]`, z fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
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

    fn item_len(&self) -> usize {
        self.shape[1] * self.voxels()
    }

    pub fn item(&self, b: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[f32] {
        let v = self.voxels();
        let start = (b * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f32] {
        let v = self.voxels();
        let start = (b * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    /// Copy of batch items selected by index.
    pub fn select(&self, items: &[usize]) -> Tensor {
        let mut shape = self.shape;
        shape[0] = items.len();
        let mut data = Vec::with_capacity(shape.iter().product());
        for &b in items {
            data.extend_from_slice(self.item(b));
        }
        Tensor { shape, data }
    }

    /// Stack single-item tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    expected: first.shape.to_vec(),
                    actual: t.shape.to_vec(),
                });
            }
            shape[0] += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape, data })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("cannot concat zero tensors"))?;
        for p in parts {
            if p.shape[0] != first.shape[0] || p.shape[2..] != first.shape[2..] {
                return Err(Error::ShapeMismatch {
                    expected: first.shape.to_vec(),
                    actual: p.shape.to_vec(),
                });
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut shape = first.shape;
        shape[1] = c;
        let mut data = Vec::with_capacity(shape.iter().product());
        for b in 0..first.shape[0] {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Split along channels into tensors of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Vec<Tensor> {
        debug_assert_eq!(widths.iter().sum::<usize>(), self.shape[1]);
        let v = self.voxels();
        let mut out: Vec<Tensor> = widths
            .iter()
            .map(|&w| Tensor::zeros([self.shape[0], w, self.shape[2], self.shape[3], self.shape[4]]))
            .collect();
        for b in 0..self.shape[0] {
            let src = self.item(b);
            let mut offset = 0;
            for (t, &w) in out.iter_mut().zip(widths) {
                t.item_mut(b).copy_from_slice(&src[offset * v..(offset + w) * v]);
                offset += w;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(self.shape)
    }

    pub fn with_spatial(&self, n: usize, c: usize) -> Tensor {
        Tensor::zeros([n, c, self.shape[2], self.shape[3], self.shape[4]])
    }

    /// Channel sum clamped to `[0, 1]`: the single heatmap view fed downstream.
    pub fn sum_channels_clamped(&self) -> Tensor {
        let mut out = self.with_spatial(self.shape[0], 1);
        let v = self.voxels();
        for b in 0..self.shape[0] {
            let dst = out.item_mut(b);
            for c in 0..self.shape[1] {
                let src = &self.data[(b * self.shape[1] + c) * v..(b * self.shape[1] + c + 1) * v];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d = d.clamp(0.0, 1.0);
            }
        }
        out
    }

    /// Gradient of [`Tensor::sum_channels_clamped`] with respect to its input,
    /// given the unclamped input `self` and the upstream gradient `dy`.
    pub fn sum_channels_clamped_backward(&self, dy: &Tensor) -> Tensor {
        let mut dx = self.zeros_like();
        let v = self.voxels();
        let c = self.shape[1];
        for b in 0..self.shape[0] {
            let mut raw = vec![0.0f32; v];
            for ch in 0..c {
                for (r, s) in raw.iter_mut().zip(self.channel(b, ch)) {
                    *r += s;
                }
            }
            let g = dy.channel(b, 0);
            for ch in 0..c {
                let d = dx.channel_mut(b, ch);
                for i in 0..v {
                    if raw[i] > 0.0 && raw[i] < 1.0 {
                        d[i] = g[i];
                    }
                }
            }
        }
        dx
    }
}
