//! Per-channel batch normalization over `(n, c, d, h, w)` activations, as a
//! single fused op with a closed-form backward pass.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, Var, WithDType};

use super::conv::contiguous;
use super::params::{Init, ParamBuilder};
use super::Mode;
use crate::error::Result;

#[derive(Clone)]
pub struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", &[channels], Init::Const(1.0))?,
            beta: pb.param("beta", &[channels], Init::Const(0.0))?,
            running_mean: pb.buffer("running_mean", &[channels], 0.0)?,
            running_var: pb.buffer("running_var", &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training mode normalizes with the biased batch variance and folds the
    /// unbiased variance into the running estimate; inference mode uses the
    /// running estimates.
    pub fn forward(&self, x: &Tensor, mode: &Mode) -> Result<Tensor> {
        let (n, c, d, h, w) = x.dims5()?;
        let x = x.contiguous()?;
        let (mean, var) = if mode.is_train() {
            let stats = x.apply_op1_no_bwd(&ChannelStats)?.to_vec1::<f64>()?;
            let (mean, var) = stats.split_at(c);
            let count = (n * d * h * w) as f64;
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let rv = self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let new_mean: Vec<f64> = rm.iter().zip(mean).map(|(r, b)| r * (1.0 - m) + b * m).collect();
            let new_var: Vec<f64> = rv.iter().zip(var).map(|(r, b)| r * (1.0 - m) + b * correction * m).collect();
            let dtype = self.running_mean.dtype();
            self.running_mean.set(&Tensor::new(new_mean, x.device())?.to_dtype(dtype)?)?;
            self.running_var.set(&Tensor::new(new_var, x.device())?.to_dtype(dtype)?)?;
            (mean.to_vec(), var.to_vec())
        } else {
            (
                self.running_mean.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?,
                self.running_var.as_tensor().to_dtype(DType::F64)?.to_vec1::<f64>()?,
            )
        };
        let op = Normalize {
            inv_std: var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect(),
            mean,
            batch_stats: mode.is_train(),
        };
        Ok(x.apply_op3(&mode.p(&self.gamma), &mode.p(&self.beta), op)?)
    }
}

/// Per-channel mean followed by per-channel biased variance, as one `(2c,)` f64 vector.
struct ChannelStats;

fn channel_stats<T: WithDType>(x: &[T], n: usize, c: usize, s: usize) -> Vec<f64> {
    let count = (n * s) as f64;
    let mut out = vec![0f64; 2 * c];
    for ch in 0..c {
        let rows = (0..n).map(|b| &x[(b * c + ch) * s..(b * c + ch + 1) * s]);
        let mean = rows.clone().flatten().map(|v| v.to_f64()).sum::<f64>() / count;
        let var = rows.flatten().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / count;
        out[ch] = mean;
        out[c + ch] = var;
    }
    out
}

fn split_dims(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let dims = l.shape().dims();
    if dims.len() < 2 {
        bail!("batch-norm: expected (n, c, ...) input, got {dims:?}");
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

impl CustomOp1 for ChannelStats {
    fn name(&self) -> &'static str {
        "batch-norm-stats"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, sp) = split_dims(l)?;
        dispatch_float!(s, "batch-norm-stats", |T| {
            let x = contiguous::<T>(s, l, "batch-norm-stats")?;
            Ok((CpuStorage::F64(channel_stats(x, n, c, sp)), Shape::from(2 * c)))
        })
    }
}

/// `y = (x - mean) * inv_std * gamma + beta` with fixed per-channel statistics.
/// When `batch_stats` is set, the statistics are treated as functions of `x`
/// in the backward pass.
struct Normalize {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl Normalize {
    fn forward<T: WithDType>(&self, x: &[T], gamma: &[T], beta: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
        let mut y = Vec::with_capacity(x.len());
        for b in 0..n {
            for ch in 0..c {
                let a = gamma[ch].to_f64() * self.inv_std[ch];
                let shift = beta[ch].to_f64() - self.mean[ch] * a;
                let row = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
                y.extend(row.iter().map(|v| T::from_f64(v.to_f64() * a + shift)));
            }
        }
        y
    }

    /// Packs `dx`, `dgamma` and `dbeta` into one vector.
    fn backward<T: WithDType>(&self, x: &[T], gamma: &[T], g: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
        let numel = x.len();
        let mut out = vec![T::zero(); numel + 2 * c];
        let m = (n * s) as f64;
        for ch in 0..c {
            let (mu, inv) = (self.mean[ch], self.inv_std[ch]);
            let (mut dbeta, mut dgamma) = (0f64, 0f64);
            for b in 0..n {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let gi = g[i].to_f64();
                    dbeta += gi;
                    dgamma += gi * (x[i].to_f64() - mu) * inv;
                }
            }
            let scale = gamma[ch].to_f64() * inv;
            for b in 0..n {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let gi = g[i].to_f64();
                    let dx = if self.batch_stats {
                        let xhat = (x[i].to_f64() - mu) * inv;
                        scale * (gi - (dbeta + xhat * dgamma) / m)
                    } else {
                        scale * gi
                    };
                    out[i] = T::from_f64(dx);
                }
            }
            out[numel + ch] = T::from_f64(dgamma);
            out[numel + c + ch] = T::from_f64(dbeta);
        }
        out
    }
}

impl CustomOp3 for Normalize {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, sp) = split_dims(l1)?;
        dispatch_float!(s1, "batch-norm", |T| {
            let x = contiguous::<T>(s1, l1, "batch-norm")?;
            let gamma = contiguous::<T>(s2, l2, "batch-norm")?;
            let beta = contiguous::<T>(s3, l3, "batch-norm")?;
            if gamma.len() != c || beta.len() != c {
                bail!("batch-norm: {c} channels but {} scales and {} shifts", gamma.len(), beta.len());
            }
            Ok((T::to_cpu_storage_owned(self.forward(x, gamma, beta, n, c, sp)), l1.shape().clone()))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let c = gamma.dim(0)?;
        let numel = x.elem_count();
        let packed = x.apply_op3_no_bwd(
            &gamma.contiguous()?,
            &grad.contiguous()?,
            &NormalizeGrad {
                mean: self.mean.clone(),
                inv_std: self.inv_std.clone(),
                batch_stats: self.batch_stats,
            },
        )?;
        let dx = x
            .track_op()
            .then(|| packed.narrow(0, 0, numel)?.reshape(x.shape()))
            .transpose()?;
        Ok((dx, Some(packed.narrow(0, numel, c)?), Some(packed.narrow(0, numel + c, c)?)))
    }
}

struct NormalizeGrad {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl CustomOp3 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "batch-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, sp) = split_dims(l1)?;
        let fwd = Normalize {
            mean: self.mean.clone(),
            inv_std: self.inv_std.clone(),
            batch_stats: self.batch_stats,
        };
        dispatch_float!(s1, "batch-norm-grad", |T| {
            let x = contiguous::<T>(s1, l1, "batch-norm-grad")?;
            let gamma = contiguous::<T>(s2, l2, "batch-norm-grad")?;
            let g = contiguous::<T>(s3, l3, "batch-norm-grad")?;
            let out = fwd.backward(x, gamma, g, n, c, sp);
            let len = out.len();
            Ok((T::to_cpu_storage_owned(out), Shape::from(len)))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_updates_running_stats_and_eval_uses_them() {
        let pb = ParamBuilder::new(0, DType::F64);
        let bn = BatchNorm::new(&pb, 1).unwrap();
        let x = Tensor::new(&[2.0f64, 4.0, 6.0, 8.0], &Device::Cpu).unwrap().reshape((4, 1, 1, 1, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = bn.forward(&x, &Mode::Train { rng: &mut rng }).unwrap();
        let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((y.iter().sum::<f64>()).abs() < 1e-12);
        // biased variance of {2,4,6,8} is 5
        assert!((y[0] + 3.0 / (5.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap()[0];
        let rv = bn.running_var.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((rm - 0.5).abs() < 1e-12);
        // unbiased variance of {2,4,6,8} is 20/3
        assert!((rv - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
        let e = bn.forward(&x, &Mode::Eval).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect0 = (2.0 - rm) / (rv + 1e-5).sqrt();
        assert!((e[0] - expect0).abs() < 1e-12);
    }

    /// Same computation from elementary tensor ops, differentiated by autograd.
    fn reference(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let c = gamma.dim(0).unwrap();
        let (n, _, d, h, w) = x.dims5().unwrap();
        let flat = x.reshape((n, c, d * h * w)).unwrap();
        let mean = flat.mean_keepdim(2).unwrap().mean_keepdim(0).unwrap();
        let centered = flat.broadcast_sub(&mean).unwrap();
        let var = centered.sqr().unwrap().mean_keepdim(2).unwrap().mean_keepdim(0).unwrap();
        centered
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, c, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1)).unwrap())
            .unwrap()
            .reshape((n, c, d, h, w))
            .unwrap()
    }

    #[test]
    fn fused_gradients_match_autograd_reference() {
        let dev = Device::Cpu;
        let pb = ParamBuilder::new(3, DType::F64);
        let bn = BatchNorm::new(&pb, 3).unwrap();
        let gamma = Var::new(&[0.5f64, 1.5, -2.0], &dev).unwrap();
        let beta = Var::new(&[0.1f64, 0.0, -0.3], &dev).unwrap();
        let bn = BatchNorm {
            gamma: gamma.as_tensor().clone(),
            beta: beta.as_tensor().clone(),
            ..bn
        };
        let x = Var::from_tensor(&Tensor::randn(0f64, 2.0, (2, 3, 2, 3, 4), &dev).unwrap()).unwrap();
        let probe = Tensor::randn(0f64, 1.0, (2, 3, 2, 3, 4), &dev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fused = bn.forward(x.as_tensor(), &Mode::Train { rng: &mut rng }).unwrap();
        let refd = reference(x.as_tensor(), gamma.as_tensor(), beta.as_tensor());
        let diff = (&fused - &refd).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let g1 = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (refd * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for t in [x.as_tensor(), gamma.as_tensor(), beta.as_tensor()] {
            let a = g1.get(t).unwrap();
            let b = g2.get(t).unwrap();
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-10, "gradient differs by {diff}");
        }
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let x64 = Tensor::randn(0f64, 1.0, (3, 2, 1, 4, 5), &Device::Cpu).unwrap();
        let run = |dtype| {
            let bn = BatchNorm::new(&ParamBuilder::new(0, dtype), 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            bn.forward(&x64.to_dtype(dtype).unwrap(), &Mode::Train { rng: &mut rng })
                .unwrap()
                .to_dtype(DType::F64)
                .unwrap()
        };
        let diff = (run(DType::F32) - run(DType::F64)).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-5);
    }
}
