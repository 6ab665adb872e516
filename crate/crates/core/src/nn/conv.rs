//! Three-axis convolution used by both encoders.
//!
//! Tensors are laid out `(batch, channels, depth, height, width)` and kernels
//! `(out_channels, in_channels, k_depth, k_height, k_width)`. The audio
//! encoder runs with `depth == 1` (frequency on the height axis, time on the
//! width axis); the visual encoder uses `depth` for time.
//!
//! Two CPU paths are provided. The direct path loops over kernel taps and
//! adds whole output rows at a time; it is the fast choice for narrow layers
//! at high resolution, where an unrolled column matrix would be mostly
//! memory traffic. The column path unrolls the input (im2col) and hands the
//! contraction to candle's matmul; it wins once channels are wide.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

/// Kernel size, stride and zero padding for each of the three axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extent for an input extent, or `None` if the kernel does not fit.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] || self.stride[axis] == 0 {
                return None;
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Some(out)
    }
}

/// Which CPU kernel computes the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvAlgorithm {
    Auto,
    Direct,
    Columns,
}

/// Convolves `x` with `weight`, picking the CPU path from the layer width.
pub fn conv3d(x: &Tensor, weight: &Tensor, geometry: ConvGeometry) -> candle_core::Result<Tensor> {
    conv3d_with(x, weight, geometry, ConvAlgorithm::Auto)
}

pub fn conv3d_with(
    x: &Tensor,
    weight: &Tensor,
    geometry: ConvGeometry,
    algorithm: ConvAlgorithm,
) -> candle_core::Result<Tensor> {
    let (_, ci, d, h, w) = x.dims5()?;
    let (co, wci, kd, kh, kw) = weight.dims5()?;
    if wci != ci {
        bail!("conv3d: input has {ci} channels, kernel expects {wci}");
    }
    if [kd, kh, kw] != geometry.kernel {
        bail!(
            "conv3d: kernel tensor {:?} disagrees with geometry {:?}",
            [kd, kh, kw],
            geometry.kernel
        );
    }
    if geometry.output_dims([d, h, w]).is_none() {
        bail!("conv3d: kernel {:?} does not fit input {:?}", geometry.kernel, [d, h, w]);
    }
    let algorithm = match algorithm {
        ConvAlgorithm::Auto => {
            if geometry.stride == [1, 1, 1] && ci * geometry.kernel_volume() < 256 {
                ConvAlgorithm::Direct
            } else {
                ConvAlgorithm::Columns
            }
        }
        other => other,
    };
    let x = x.contiguous()?;
    let weight = weight.contiguous()?;
    match algorithm {
        ConvAlgorithm::Columns => {
            let n = x.dim(0)?;
            let out = geometry.output_dims([d, h, w]).unwrap_or_default();
            let cols = if x.track_op() {
                x.apply_op1(Im2Col { geometry })?
            } else {
                x.apply_op1_no_bwd(&Im2Col { geometry })?
            };
            let w2 = weight.reshape((co, ci * geometry.kernel_volume()))?;
            w2.broadcast_matmul(&cols)?
                .reshape((n, co, out[0], out[1], out[2]))
        }
        _ => x.apply_op2(&weight, DirectConv { geometry }),
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    ci: usize,
    co: usize,
    input: [usize; 3],
    out: [usize; 3],
}

impl Dims {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }
}

/// Output index range `[lo, hi)` along one axis whose input index
/// `o * stride + k - pad` lands inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    if in_len + pad <= k {
        return None;
    }
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo < hi).then_some((lo, hi))
}

/// Per-axis tables of valid output ranges, one entry per kernel tap.
struct TapRanges {
    axes: [Vec<Option<(usize, usize)>>; 3],
}

impl TapRanges {
    fn new(d: &Dims, g: &ConvGeometry) -> Self {
        let axis = |a: usize| -> Vec<Option<(usize, usize)>> {
            (0..g.kernel[a])
                .map(|k| valid_range(d.out[a], d.input[a], k, g.stride[a], g.padding[a]))
                .collect()
        };
        Self {
            axes: [axis(0), axis(1), axis(2)],
        }
    }
}

#[inline]
fn input_index(o: usize, k: usize, stride: usize, pad: usize) -> usize {
    o * stride + k - pad
}

/// Visits every (input row, output row, tap) triple of one channel pair. The
/// callback receives the input row offset, output row offset, the flattened
/// tap index and the valid output column range for the width tap.
fn for_each_row_pair(d: &Dims, g: &ConvGeometry, taps: &TapRanges, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, _] = g.stride;
    let [pd, ph, _] = g.padding;
    let [_, ih, iw] = d.input;
    let [_, oh, ow] = d.out;
    for a in 0..kd {
        let Some((d0, d1)) = taps.axes[0][a] else { continue };
        for zd in d0..d1 {
            let xd = input_index(zd, a, sd, pd);
            for b in 0..kh {
                let Some((h0, h1)) = taps.axes[1][b] else { continue };
                for zh in h0..h1 {
                    let xh = input_index(zh, b, sh, ph);
                    let x_row = (xd * ih + xh) * iw;
                    let o_row = (zd * oh + zh) * ow;
                    for c in 0..kw {
                        let Some((w0, w1)) = taps.axes[2][c] else { continue };
                        f(x_row, o_row, (a * kh + b) * kw + c, c, w0, w1);
                    }
                }
            }
        }
    }
}

fn dot<T: WithDType>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let mut total = tail;
    for v in acc {
        total += v;
    }
    total
}

fn direct_forward<T: WithDType>(x: &[T], w: &[T], d: &Dims, g: &ConvGeometry) -> Vec<T> {
    let taps = TapRanges::new(d, g);
    let kvol = g.kernel_volume();
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let (sw, pw) = (g.stride[2], g.padding[2]);
    let mut out = vec![T::zero(); d.n * d.co * out_plane];
    for n in 0..d.n {
        for co in 0..d.co {
            let out_c = &mut out[(n * d.co + co) * out_plane..][..out_plane];
            for ci in 0..d.ci {
                let x_c = &x[(n * d.ci + ci) * in_plane..][..in_plane];
                let w_c = &w[(co * d.ci + ci) * kvol..][..kvol];
                for_each_row_pair(d, g, &taps, |x_row, o_row, tap, c, w0, w1| {
                    let wv = w_c[tap];
                    let start = x_row + input_index(w0, c, sw, pw);
                    let dst = &mut out_c[o_row + w0..o_row + w1];
                    if sw == 1 {
                        for (o, &xv) in dst.iter_mut().zip(&x_c[start..start + (w1 - w0)]) {
                            *o += wv * xv;
                        }
                    } else {
                        for (j, o) in dst.iter_mut().enumerate() {
                            *o += wv * x_c[start + j * sw];
                        }
                    }
                });
            }
        }
    }
    out
}

fn direct_grad_input<T: WithDType>(gout: &[T], w: &[T], d: &Dims, g: &ConvGeometry) -> Vec<T> {
    let taps = TapRanges::new(d, g);
    let kvol = g.kernel_volume();
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let (sw, pw) = (g.stride[2], g.padding[2]);
    let mut gin = vec![T::zero(); d.n * d.ci * in_plane];
    for n in 0..d.n {
        for ci in 0..d.ci {
            let gin_c = &mut gin[(n * d.ci + ci) * in_plane..][..in_plane];
            for co in 0..d.co {
                let go_c = &gout[(n * d.co + co) * out_plane..][..out_plane];
                let w_c = &w[(co * d.ci + ci) * kvol..][..kvol];
                for_each_row_pair(d, g, &taps, |x_row, o_row, tap, c, w0, w1| {
                    let wv = w_c[tap];
                    let start = x_row + input_index(w0, c, sw, pw);
                    let src = &go_c[o_row + w0..o_row + w1];
                    if sw == 1 {
                        for (gi, &gv) in gin_c[start..start + (w1 - w0)].iter_mut().zip(src) {
                            *gi += wv * gv;
                        }
                    } else {
                        for (j, &gv) in src.iter().enumerate() {
                            gin_c[start + j * sw] += wv * gv;
                        }
                    }
                });
            }
        }
    }
    gin
}

fn direct_grad_weight<T: WithDType>(x: &[T], gout: &[T], d: &Dims, g: &ConvGeometry) -> Vec<T> {
    let taps = TapRanges::new(d, g);
    let kvol = g.kernel_volume();
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let (sw, pw) = (g.stride[2], g.padding[2]);
    let mut gw = vec![T::zero(); d.co * d.ci * kvol];
    let mut strided = Vec::new();
    for co in 0..d.co {
        for ci in 0..d.ci {
            let gw_c = &mut gw[(co * d.ci + ci) * kvol..][..kvol];
            for n in 0..d.n {
                let x_c = &x[(n * d.ci + ci) * in_plane..][..in_plane];
                let go_c = &gout[(n * d.co + co) * out_plane..][..out_plane];
                for_each_row_pair(d, g, &taps, |x_row, o_row, tap, c, w0, w1| {
                    let start = x_row + input_index(w0, c, sw, pw);
                    let go = &go_c[o_row + w0..o_row + w1];
                    gw_c[tap] += if sw == 1 {
                        dot(go, &x_c[start..start + (w1 - w0)])
                    } else {
                        strided.clear();
                        strided.extend((0..w1 - w0).map(|j| x_c[start + j * sw]));
                        dot(go, &strided)
                    };
                });
            }
        }
    }
    gw
}

/// Writes the unrolled column matrix `(n, ci * kvol, out_plane)`.
fn im2col<T: WithDType>(x: &[T], d: &Dims, g: &ConvGeometry) -> Vec<T> {
    let taps = TapRanges::new(d, g);
    let kvol = g.kernel_volume();
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let (sw, pw) = (g.stride[2], g.padding[2]);
    let k = d.ci * kvol;
    let mut cols = vec![T::zero(); d.n * k * out_plane];
    for n in 0..d.n {
        for ci in 0..d.ci {
            let x_c = &x[(n * d.ci + ci) * in_plane..][..in_plane];
            let base = (n * k + ci * kvol) * out_plane;
            for_each_row_pair(d, g, &taps, |x_row, o_row, tap, c, w0, w1| {
                let dst = &mut cols[base + tap * out_plane + o_row..][w0..w1];
                let start = x_row + input_index(w0, c, sw, pw);
                if sw == 1 {
                    dst.copy_from_slice(&x_c[start..start + (w1 - w0)]);
                } else {
                    for (j, v) in dst.iter_mut().enumerate() {
                        *v = x_c[start + j * sw];
                    }
                }
            });
        }
    }
    cols
}

fn col2im<T: WithDType>(cols: &[T], d: &Dims, g: &ConvGeometry) -> Vec<T> {
    let taps = TapRanges::new(d, g);
    let kvol = g.kernel_volume();
    let (in_plane, out_plane) = (d.in_plane(), d.out_plane());
    let (sw, pw) = (g.stride[2], g.padding[2]);
    let k = d.ci * kvol;
    let mut x = vec![T::zero(); d.n * d.ci * in_plane];
    for n in 0..d.n {
        for ci in 0..d.ci {
            let x_c = &mut x[(n * d.ci + ci) * in_plane..][..in_plane];
            let base = (n * k + ci * kvol) * out_plane;
            for_each_row_pair(d, g, &taps, |x_row, o_row, tap, c, w0, w1| {
                let src = &cols[base + tap * out_plane + o_row..][w0..w1];
                let start = x_row + input_index(w0, c, sw, pw);
                for (j, &v) in src.iter().enumerate() {
                    x_c[start + j * sw] += v;
                }
            });
        }
    }
    x
}

pub(super) fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout, op: &'static str) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("{op}: input must be contiguous"),
    }
}

fn dims_of(x: &Layout, co: usize, g: &ConvGeometry) -> candle_core::Result<Dims> {
    let (n, ci, d, h, w) = x.shape().dims5()?;
    let Some(out) = g.output_dims([d, h, w]) else {
        bail!("conv3d: kernel does not fit input")
    };
    Ok(Dims {
        n,
        ci,
        co,
        input: [d, h, w],
        out,
    })
}

struct DirectConv {
    geometry: ConvGeometry,
}

impl CustomOp2 for DirectConv {
    fn name(&self) -> &'static str {
        "conv3d-direct"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let co = l2.shape().dims5()?.0;
        let d = dims_of(l1, co, &self.geometry)?;
        let shape = Shape::from((d.n, d.co, d.out[0], d.out[1], d.out[2]));
        dispatch_float!(s1, "conv3d-direct", |T| {
            let x = contiguous::<T>(s1, l1, "conv3d-direct")?;
            let w = contiguous::<T>(s2, l2, "conv3d-direct")?;
            Ok((T::to_cpu_storage_owned(direct_forward(x, w, &d, &self.geometry)), shape))
        })
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let grad_x = if x.track_op() {
            Some(grad.apply_op2_no_bwd(
                w,
                &DirectGradInput {
                    geometry: self.geometry,
                    input: x.dims5()?,
                },
            )?)
        } else {
            None
        };
        let grad_w = x.apply_op2_no_bwd(
            &grad,
            &DirectGradWeight {
                geometry: self.geometry,
                weight: w.dims5()?,
            },
        )?;
        Ok((grad_x, Some(grad_w)))
    }
}

struct DirectGradInput {
    geometry: ConvGeometry,
    input: (usize, usize, usize, usize, usize),
}

impl CustomOp2 for DirectGradInput {
    fn name(&self) -> &'static str {
        "conv3d-direct-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, ci, id, ih, iw) = self.input;
        let (_, co, od, oh, ow) = l1.shape().dims5()?;
        let d = Dims {
            n,
            ci,
            co,
            input: [id, ih, iw],
            out: [od, oh, ow],
        };
        let shape = Shape::from(self.input);
        dispatch_float!(s1, "conv3d-direct-grad-input", |T| {
            let gout = contiguous::<T>(s1, l1, "conv3d-direct-grad-input")?;
            let w = contiguous::<T>(s2, l2, "conv3d-direct-grad-input")?;
            Ok((T::to_cpu_storage_owned(direct_grad_input(gout, w, &d, &self.geometry)), shape))
        })
    }
}

struct DirectGradWeight {
    geometry: ConvGeometry,
    weight: (usize, usize, usize, usize, usize),
}

impl CustomOp2 for DirectGradWeight {
    fn name(&self) -> &'static str {
        "conv3d-direct-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims_of(l1, self.weight.0, &self.geometry)?;
        let shape = Shape::from(self.weight);
        dispatch_float!(s1, "conv3d-direct-grad-weight", |T| {
            let x = contiguous::<T>(s1, l1, "conv3d-direct-grad-weight")?;
            let gout = contiguous::<T>(s2, l2, "conv3d-direct-grad-weight")?;
            Ok((T::to_cpu_storage_owned(direct_grad_weight(x, gout, &d, &self.geometry)), shape))
        })
    }
}

struct Im2Col {
    geometry: ConvGeometry,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "conv3d-im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims_of(l, 0, &self.geometry)?;
        let shape = Shape::from((d.n, d.ci * self.geometry.kernel_volume(), d.out_plane()));
        dispatch_float!(s, "conv3d-im2col", |T| {
            let x = contiguous::<T>(s, l, "conv3d-im2col")?;
            Ok((T::to_cpu_storage_owned(im2col(x, &d, &self.geometry)), shape))
        })
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(grad.apply_op1_no_bwd(&Col2Im {
            geometry: self.geometry,
            input: x.dims5()?,
        })?))
    }
}

struct Col2Im {
    geometry: ConvGeometry,
    input: (usize, usize, usize, usize, usize),
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "conv3d-col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, ci, id, ih, iw) = self.input;
        let out = self
            .geometry
            .output_dims([id, ih, iw])
            .ok_or_else(|| candle_core::Error::Msg("conv3d-col2im: kernel does not fit".into()))?;
        let d = Dims {
            n,
            ci,
            co: 0,
            input: [id, ih, iw],
            out,
        };
        dispatch_float!(s, "conv3d-col2im", |T| {
            let cols = contiguous::<T>(s, l, "conv3d-col2im")?;
            Ok((T::to_cpu_storage_owned(col2im(cols, &d, &self.geometry)), Shape::from(self.input)))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook seven-loop convolution used as the reference.
    fn naive(x: &[f64], w: &[f64], xs: [usize; 5], ws: [usize; 5], g: &ConvGeometry) -> (Vec<f64>, [usize; 5]) {
        let [n, ci, id, ih, iw] = xs;
        let [co, _, kd, kh, kw] = ws;
        let [od, oh, ow] = g.output_dims([id, ih, iw]).unwrap();
        let mut out = vec![0.0; n * co * od * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..ci {
                                for a in 0..kd {
                                    for e in 0..kh {
                                        for f in 0..kw {
                                            let pd = (zd * g.stride[0] + a) as isize - g.padding[0] as isize;
                                            let ph = (zh * g.stride[1] + e) as isize - g.padding[1] as isize;
                                            let pw = (zw * g.stride[2] + f) as isize - g.padding[2] as isize;
                                            if pd < 0 || ph < 0 || pw < 0 || pd >= id as isize || ph >= ih as isize || pw >= iw as isize {
                                                continue;
                                            }
                                            let xi = (((b * ci + c) * id + pd as usize) * ih + ph as usize) * iw + pw as usize;
                                            let wi = (((o * ci + c) * kd + a) * kh + e) * kw + f;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((b * co + o) * od + zd) * oh + zh) * ow + zw] = acc;
                        }
                    }
                }
            }
        }
        (out, [n, co, od, oh, ow])
    }

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn geometries() -> Vec<([usize; 5], [usize; 5], ConvGeometry)> {
        vec![
            ([2, 3, 4, 7, 9], [4, 3, 3, 3, 3], ConvGeometry::new([3, 3, 3], [1, 2, 2], [1, 1, 1])),
            ([1, 2, 1, 10, 6], [3, 2, 1, 3, 3], ConvGeometry::new([1, 3, 3], [1, 2, 1], [0, 1, 1])),
            ([2, 2, 3, 3, 6], [2, 2, 1, 3, 6], ConvGeometry::new([1, 3, 6], [1, 1, 1], [0, 0, 0])),
            ([1, 1, 2, 5, 5], [2, 1, 1, 3, 1], ConvGeometry::new([1, 3, 1], [1, 1, 1], [0, 0, 0])),
        ]
    }

    #[test]
    fn both_paths_match_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dev = Device::Cpu;
        for (xs, ws, g) in geometries() {
            let x = random(&mut rng, xs.iter().product());
            let w = random(&mut rng, ws.iter().product());
            let (expect, oshape) = naive(&x, &w, xs, ws, &g);
            let xt = Tensor::from_vec(x.clone(), xs.to_vec(), &dev).unwrap();
            let wt = Tensor::from_vec(w.clone(), ws.to_vec(), &dev).unwrap();
            for algo in [ConvAlgorithm::Direct, ConvAlgorithm::Columns] {
                let y = conv3d_with(&xt, &wt, g, algo).unwrap();
                assert_eq!(y.dims(), &oshape[..]);
                let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for (a, b) in got.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12, "{algo:?} {g:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dev = Device::Cpu;
        for (xs, ws, g) in geometries() {
            let x = random(&mut rng, xs.iter().product());
            let w = random(&mut rng, ws.iter().product());
            let probe_shape = {
                let (_, s) = naive(&x, &w, xs, ws, &g);
                s
            };
            let probe = random(&mut rng, probe_shape.iter().product());
            let loss_of = |x: &[f64], w: &[f64]| -> f64 {
                let (y, _) = naive(x, w, xs, ws, &g);
                y.iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            for algo in [ConvAlgorithm::Direct, ConvAlgorithm::Columns] {
                let xv = Var::from_vec(x.clone(), xs.to_vec(), &dev).unwrap();
                let wv = Var::from_vec(w.clone(), ws.to_vec(), &dev).unwrap();
                let p = Tensor::from_vec(probe.clone(), probe_shape.to_vec(), &dev).unwrap();
                let y = conv3d_with(&xv, &wv, g, algo).unwrap();
                let grads = (y * p).unwrap().sum_all().unwrap().backward().unwrap();
                let gx = grads.get(&xv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let gw = grads.get(&wv).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let h = 1e-6;
                for i in 0..x.len() {
                    let (mut a, mut b) = (x.clone(), x.clone());
                    a[i] += h;
                    b[i] -= h;
                    let fd = (loss_of(&a, &w) - loss_of(&b, &w)) / (2.0 * h);
                    assert!((fd - gx[i]).abs() < 1e-6, "{algo:?} dx[{i}]: {fd} vs {}", gx[i]);
                }
                for i in 0..w.len() {
                    let (mut a, mut b) = (w.clone(), w.clone());
                    a[i] += h;
                    b[i] -= h;
                    let fd = (loss_of(&x, &a) - loss_of(&x, &b)) / (2.0 * h);
                    assert!((fd - gw[i]).abs() < 1e-6, "{algo:?} dw[{i}]: {fd} vs {}", gw[i]);
                }
            }
        }
    }

    #[test]
    fn f32_is_supported_and_matches_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (xs, ws, g) = geometries().remove(0);
        let x = random(&mut rng, xs.iter().product());
        let w = random(&mut rng, ws.iter().product());
        let dev = Device::Cpu;
        let x64 = Tensor::from_vec(x, xs.to_vec(), &dev).unwrap();
        let w64 = Tensor::from_vec(w, ws.to_vec(), &dev).unwrap();
        let y64 = conv3d(&x64, &w64, g).unwrap();
        let y32 = conv3d(&x64.to_dtype(DType::F32).unwrap(), &w64.to_dtype(DType::F32).unwrap(), g).unwrap();
        let diff = (y64 - y32.to_dtype(DType::F64).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-5);
    }

    #[test]
    fn valid_range_covers_exactly_the_in_bounds_outputs() {
        for in_len in 1..9 {
            for k in 0..4 {
                for stride in 1..3 {
                    for pad in 0..2 {
                        let padded = in_len + 2 * pad;
                        if padded < 3 {
                            continue;
                        }
                        let out_len = (padded - 3) / stride + 1;
                        let expect: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && i < in_len as isize
                            })
                            .collect();
                        let got: Vec<usize> = match valid_range(out_len, in_len, k, stride, pad) {
                            Some((lo, hi)) => (lo..hi).collect(),
                            None => vec![],
                        };
                        assert_eq!(got, expect, "in {in_len} k {k} s {stride} p {pad}");
                    }
                }
            }
        }
    }
}
