use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::param::{Grads, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::source_coordinate;

/// 3D convolution with cubic kernel, stride and dilation. Padding keeps the
/// spatial size for stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    weight: usize,
    bias: usize,
}

struct Geometry {
    cin: usize,
    k: usize,
    stride: usize,
    dil: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn vin(&self) -> usize {
        self.input.iter().product()
    }

    fn vout(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Input coordinate along one axis for output position `o` and tap `t`.
    #[inline]
    fn coord(&self, o: usize, t: usize, n: usize) -> Option<usize> {
        let c = (o * self.stride + t * self.dil) as isize - self.pad as isize;
        (c >= 0 && (c as usize) < n).then_some(c as usize)
    }

    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let [nx, ny, nz] = self.input;
        let [ox, oy, oz] = self.output;
        let vout = self.vout();
        let k = self.k;
        for ic in 0..self.cin {
            let src = &x[ic * nx * ny * nz..(ic + 1) * nx * ny * nz];
            for kx in 0..k {
                for ky in 0..k {
                    for kz in 0..k {
                        let row = ((ic * k + kx) * k + ky) * k + kz;
                        let dst = &mut col[row * vout..(row + 1) * vout];
                        for i in 0..ox {
                            let Some(xi) = self.coord(i, kx, nx) else {
                                dst[i * oy * oz..(i + 1) * oy * oz].fill(0.0);
                                continue;
                            };
                            for j in 0..oy {
                                let out = &mut dst[(i * oy + j) * oz..(i * oy + j + 1) * oz];
                                let Some(yj) = self.coord(j, ky, ny) else {
                                    out.fill(0.0);
                                    continue;
                                };
                                let line = &src[(xi * ny + yj) * nz..(xi * ny + yj + 1) * nz];
                                if self.stride == 1 {
                                    let shift = (kz * self.dil) as isize - self.pad as isize;
                                    let lo = (-shift).max(0) as usize;
                                    let hi = ((nz as isize - shift).min(oz as isize)).max(lo as isize) as usize;
                                    out[..lo].fill(0.0);
                                    out[hi..].fill(0.0);
                                    if hi > lo {
                                        let s0 = (lo as isize + shift) as usize;
                                        out[lo..hi].copy_from_slice(&line[s0..s0 + hi - lo]);
                                    }
                                } else {
                                    for (l, o) in out.iter_mut().enumerate() {
                                        *o = self.coord(l, kz, nz).map_or(0.0, |z| line[z]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let [nx, ny, nz] = self.input;
        let [ox, oy, oz] = self.output;
        let vout = self.vout();
        let k = self.k;
        for ic in 0..self.cin {
            let dst = &mut dx[ic * nx * ny * nz..(ic + 1) * nx * ny * nz];
            for kx in 0..k {
                for ky in 0..k {
                    for kz in 0..k {
                        let row = ((ic * k + kx) * k + ky) * k + kz;
                        let src = &col[row * vout..(row + 1) * vout];
                        for i in 0..ox {
                            let Some(xi) = self.coord(i, kx, nx) else { continue };
                            for j in 0..oy {
                                let Some(yj) = self.coord(j, ky, ny) else { continue };
                                let line = &mut dst[(xi * ny + yj) * nz..(xi * ny + yj + 1) * nz];
                                let g = &src[(i * oy + j) * oz..(i * oy + j + 1) * oz];
                                for (l, gv) in g.iter().enumerate() {
                                    if let Some(z) = self.coord(l, kz, nz) {
                                        line[z] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let weight = params.add_he(format!("{name}.weight"), vec![cout, cin, kernel, kernel, kernel], fan_in, rng);
        let bias = params.add_const(format!("{name}.bias"), vec![cout], 0.0);
        Self {
            cin,
            cout,
            kernel,
            stride,
            dilation,
            pad: dilation * (kernel - 1) / 2,
            weight,
            bias,
        }
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn out_spatial(&self, s: [usize; 3]) -> [usize; 3] {
        s.map(|n| {
            let span = self.dilation * (self.kernel - 1) + 1;
            (n + 2 * self.pad).saturating_sub(span) / self.stride + 1
        })
    }

    fn geometry(&self, input: [usize; 3]) -> Geometry {
        Geometry {
            cin: self.cin,
            k: self.kernel,
            stride: self.stride,
            dil: self.dilation,
            pad: self.pad,
            input,
            output: self.out_spatial(input),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        if x.channels() != self.cin {
            return Err(Error::ShapeMismatch {
                expected: vec![x.batch(), self.cin],
                actual: x.shape().to_vec(),
            });
        }
        let g = self.geometry(x.spatial());
        let (vin, vout, rows) = (g.vin(), g.vout(), g.rows());
        let mut y = Tensor::zeros([x.batch(), self.cout, g.output[0], g.output[1], g.output[2]]);
        let w = ArrayView2::from_shape((self.cout, rows), ps.get(self.weight)).expect("weight layout");
        let bias = ps.get(self.bias);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; rows * vout] };
        for b in 0..x.batch() {
            let out = y.item_mut(b);
            for (oc, chunk) in out.chunks_mut(vout).enumerate() {
                chunk.fill(bias[oc]);
            }
            let cols = if self.is_pointwise() {
                ArrayView2::from_shape((rows, vin), x.item(b)).expect("input layout")
            } else {
                g.im2col(x.item(b), &mut col);
                ArrayView2::from_shape((rows, vout), &col[..]).expect("col layout")
            };
            let mut out = ArrayViewMut2::from_shape((self.cout, vout), out).expect("output layout");
            general_mat_mul(1.0, &w, &cols, 1.0, &mut out);
        }
        Ok(y)
    }

    /// Backpropagate `dy`. Parameter gradients accumulate into `grads` when
    /// given; the input gradient is returned when `need_dx` is set.
    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Tensor,
        dy: &Tensor,
        mut grads: Option<&mut Grads>,
        need_dx: bool,
    ) -> Option<Tensor> {
        let g = self.geometry(x.spatial());
        let (vin, vout, rows) = (g.vin(), g.vout(), g.rows());
        let w = ArrayView2::from_shape((self.cout, rows), ps.get(self.weight)).expect("weight layout");
        let mut dx = need_dx.then(|| x.zeros_like());
        let mut col = vec![0.0; rows * vout];
        for b in 0..x.batch() {
            let dyb = ArrayView2::from_shape((self.cout, vout), dy.item(b)).expect("dy layout");
            if let Some(grads) = grads.as_deref_mut() {
                {
                    let db = grads.get_mut(self.bias);
                    for (oc, chunk) in dy.item(b).chunks(vout).enumerate() {
                        db[oc] += chunk.iter().sum::<f32>();
                    }
                }
                let cols = if self.is_pointwise() {
                    ArrayView2::from_shape((rows, vin), x.item(b)).expect("input layout")
                } else {
                    g.im2col(x.item(b), &mut col);
                    ArrayView2::from_shape((rows, vout), &col[..]).expect("col layout")
                };
                let mut dw = ArrayViewMut2::from_shape((self.cout, rows), grads.get_mut(self.weight)).expect("dw layout");
                general_mat_mul(1.0, &dyb, &cols.t(), 1.0, &mut dw);
            }
            if let Some(dx) = dx.as_mut() {
                if self.is_pointwise() {
                    let mut d = ArrayViewMut2::from_shape((rows, vin), dx.item_mut(b)).expect("dx layout");
                    general_mat_mul(1.0, &w.t(), &dyb, 1.0, &mut d);
                } else {
                    {
                        let mut dcol = ArrayViewMut2::from_shape((rows, vout), &mut col[..]).expect("col layout");
                        general_mat_mul(1.0, &w.t(), &dyb, 0.0, &mut dcol);
                    }
                    g.col2im(&col, dx.item_mut(b));
                }
            }
        }
        dx
    }
}

/// 2×2×2 max pooling (floor on odd sizes).
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [nx, ny, nz] = x.spatial();
    let [ox, oy, oz] = [nx / 2, ny / 2, nz / 2];
    let mut y = Tensor::zeros([x.batch(), x.channels(), ox, oy, oz]);
    let mut arg = vec![0u32; y.data().len()];
    let vin = nx * ny * nz;
    let vout = ox * oy * oz;
    for bc in 0..x.batch() * x.channels() {
        let src = &x.data()[bc * vin..(bc + 1) * vin];
        for i in 0..ox {
            for j in 0..oy {
                for l in 0..oz {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dl in 0..2 {
                                let idx = ((2 * i + di) * ny + 2 * j + dj) * nz + 2 * l + dl;
                                if src[idx] > best {
                                    best = src[idx];
                                    at = idx;
                                }
                            }
                        }
                    }
                    let o = bc * vout + (i * oy + j) * oz + l;
                    y.data_mut()[o] = best;
                    arg[o] = at as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(x_shape: [usize; 5], arg: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let vin: usize = x_shape[2..].iter().product();
    let vout = dy.voxels();
    for bc in 0..x_shape[0] * x_shape[1] {
        for o in 0..vout {
            let idx = bc * vout + o;
            dx.data_mut()[bc * vin + arg[idx] as usize] += dy.data()[idx];
        }
    }
    dx
}

fn taps(n_src: usize, n_dst: usize) -> Vec<(usize, usize, f32)> {
    (0..n_dst)
        .map(|d| {
            let c = source_coordinate(d, n_src, n_dst);
            let lo = c.floor() as usize;
            ((lo), (lo + 1).min(n_src - 1), (c - lo as f64) as f32)
        })
        .collect()
}

/// Trilinear resize of the spatial axes to `out`.
pub fn upsample_linear(x: &Tensor, out: [usize; 3]) -> Tensor {
    let [nx, ny, nz] = x.spatial();
    if [nx, ny, nz] == out {
        return x.clone();
    }
    let (tx, ty, tz) = (taps(nx, out[0]), taps(ny, out[1]), taps(nz, out[2]));
    let mut y = Tensor::zeros([x.batch(), x.channels(), out[0], out[1], out[2]]);
    let vin = nx * ny * nz;
    let vout: usize = out.iter().product();
    for bc in 0..x.batch() * x.channels() {
        let src = &x.data()[bc * vin..(bc + 1) * vin];
        let dst = &mut y.data_mut()[bc * vout..(bc + 1) * vout];
        for (i, &(x0, x1, wx)) in tx.iter().enumerate() {
            for (j, &(y0, y1, wy)) in ty.iter().enumerate() {
                let row = &mut dst[(i * out[1] + j) * out[2]..(i * out[1] + j + 1) * out[2]];
                for (l, &(z0, z1, wz)) in tz.iter().enumerate() {
                    let at = |a: usize, b: usize, c: usize| src[(a * ny + b) * nz + c];
                    let c00 = at(x0, y0, z0) * (1.0 - wz) + at(x0, y0, z1) * wz;
                    let c01 = at(x0, y1, z0) * (1.0 - wz) + at(x0, y1, z1) * wz;
                    let c10 = at(x1, y0, z0) * (1.0 - wz) + at(x1, y0, z1) * wz;
                    let c11 = at(x1, y1, z0) * (1.0 - wz) + at(x1, y1, z1) * wz;
                    let c0 = c00 * (1.0 - wy) + c01 * wy;
                    let c1 = c10 * (1.0 - wy) + c11 * wy;
                    row[l] = c0 * (1.0 - wx) + c1 * wx;
                }
            }
        }
    }
    y
}

pub fn upsample_linear_backward(x_shape: [usize; 5], dy: &Tensor) -> Tensor {
    let [nx, ny, nz] = [x_shape[2], x_shape[3], x_shape[4]];
    let out = dy.spatial();
    if [nx, ny, nz] == out {
        return dy.clone();
    }
    let (tx, ty, tz) = (taps(nx, out[0]), taps(ny, out[1]), taps(nz, out[2]));
    let mut dx = Tensor::zeros(x_shape);
    let vin = nx * ny * nz;
    let vout: usize = out.iter().product();
    for bc in 0..x_shape[0] * x_shape[1] {
        let src = &dy.data()[bc * vout..(bc + 1) * vout];
        let dst = &mut dx.data_mut()[bc * vin..(bc + 1) * vin];
        for (i, &(x0, x1, wx)) in tx.iter().enumerate() {
            for (j, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (l, &(z0, z1, wz)) in tz.iter().enumerate() {
                    let g = src[(i * out[1] + j) * out[2] + l];
                    for (a, fa) in [(x0, 1.0 - wx), (x1, wx)] {
                        for (b, fb) in [(y0, 1.0 - wy), (y1, wy)] {
                            for (c, fc) in [(z0, 1.0 - wz), (z1, wz)] {
                                dst[(a * ny + b) * nz + c] += g * fa * fb * fc;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Uses the forward output, which is positive exactly where the input was.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub const LEAKY_SLOPE: f32 = 0.2;

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &p) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= p * (1.0 - p);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 5], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-fold loop used as the reference for the im2col/GEMM path.
    fn naive_conv(conv: &Conv3d, ps: &ParamSet, x: &Tensor) -> Tensor {
        let out = conv.out_spatial(x.spatial());
        let [nx, ny, nz] = x.spatial();
        let w = ps.get(conv.weight);
        let b = ps.get(conv.bias);
        let k = conv.kernel;
        let mut y = Tensor::zeros([x.batch(), conv.cout, out[0], out[1], out[2]]);
        for n in 0..x.batch() {
            for oc in 0..conv.cout {
                for i in 0..out[0] {
                    for j in 0..out[1] {
                        for l in 0..out[2] {
                            let mut acc = b[oc] as f64;
                            for ic in 0..conv.cin {
                                for a in 0..k {
                                    for bb in 0..k {
                                        for c in 0..k {
                                            let xi = (i * conv.stride + a * conv.dilation) as isize - conv.pad as isize;
                                            let yi = (j * conv.stride + bb * conv.dilation) as isize - conv.pad as isize;
                                            let zi = (l * conv.stride + c * conv.dilation) as isize - conv.pad as isize;
                                            if xi < 0 || yi < 0 || zi < 0 || xi >= nx as isize || yi >= ny as isize || zi >= nz as isize {
                                                continue;
                                            }
                                            let xv = x.channel(n, ic)[((xi as usize) * ny + yi as usize) * nz + zi as usize];
                                            let wv = w[(((oc * conv.cin + ic) * k + a) * k + bb) * k + c];
                                            acc += (xv * wv) as f64;
                                        }
                                    }
                                }
                            }
                            y.channel_mut(n, oc)[(i * out[1] + j) * out[2] + l] = acc as f32;
                        }
                    }
                }
            }
        }
        y
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, d) in [(3, 1, 1), (3, 2, 1), (3, 1, 2), (1, 1, 1), (3, 2, 2)] {
            let mut ps = ParamSet::default();
            let conv = Conv3d::new(&mut ps, "c", 2, 3, k, s, d, &mut rng);
            ps.params[conv.bias].value = vec![0.1, -0.2, 0.3];
            let x = random_tensor([2, 2, 6, 5, 7], &mut rng);
            let y = conv.forward(&ps, &x).unwrap();
            let r = naive_conv(&conv, &ps, &x);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-4, "k{k} s{s} d{d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> is linear in x and w, so its gradients must match the
        // adjoint computed by backward.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (k, s, d) in [(3, 1, 1), (3, 2, 1), (3, 1, 2), (1, 1, 1)] {
            let mut ps = ParamSet::default();
            let conv = Conv3d::new(&mut ps, "c", 2, 2, k, s, d, &mut rng);
            let x = random_tensor([1, 2, 5, 4, 6], &mut rng);
            let y = conv.forward(&ps, &x).unwrap();
            let dy = random_tensor(y.shape(), &mut rng);
            let mut grads = ps.zero_grads();
            let dx = conv.backward(&ps, &x, &dy, Some(&mut grads), true).unwrap();
            // input adjoint via a directional probe
            let v = random_tensor(x.shape(), &mut rng);
            let mut xp = x.clone();
            for (a, b) in xp.data_mut().iter_mut().zip(v.data()) {
                *a += 1e-2 * b;
            }
            let lhs = (dot(&conv.forward(&ps, &xp).unwrap(), &dy) - dot(&y, &dy)) / 1e-2;
            let rhs = dot(&dx, &v);
            assert!((lhs - rhs).abs() < 1e-3 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
            // weight gradient entry by entry on a few positions
            for idx in [0usize, 5, 17] {
                let idx = idx % ps.get(conv.weight).len();
                let mut pp = ps.clone();
                pp.params[conv.weight].value[idx] += 1e-2;
                let fd = (dot(&conv.forward(&pp, &x).unwrap(), &dy) - dot(&y, &dy)) / 1e-2;
                let an = grads.0[conv.weight][idx] as f64;
                assert!((fd - an).abs() < 1e-2 * (1.0 + an.abs()), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor([1, 2, 4, 6, 4], &mut rng);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.spatial(), [2, 3, 2]);
        let dy = random_tensor(y.shape(), &mut rng);
        let dx = max_pool2_backward(x.shape(), &arg, &dy);
        assert!((dot(&y, &dy) - dot(&x, &dx)).abs() < 1e-4);

        let u = upsample_linear(&y, [4, 6, 4]);
        let du = random_tensor(u.shape(), &mut rng);
        let dyu = upsample_linear_backward(y.shape(), &du);
        assert!((dot(&u, &du) - dot(&y, &dyu)).abs() < 1e-3);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let x = Tensor::from_vec([1, 1, 2, 2, 2], vec![3.0; 8]).unwrap();
        let u = upsample_linear(&x, [8, 8, 8]);
        assert!(u.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }
}
