//! Convolution and normalization building blocks.

use candle_core::{Tensor, Var, D};

use super::im2col::{col2im, im2col, Window};
use super::params::{Init, InitKind};
use crate::error::{Error, Result};

/// How normalization layers treat batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left untouched. Used when a network is
    /// evaluated inside another network's update.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    Normal(f64),
    Kaiming,
    Orthogonal(f64),
}

impl WeightInit {
    fn kind(self, fan_in: usize) -> InitKind {
        match self {
            WeightInit::Normal(std) => InitKind::Normal { std },
            WeightInit::Kaiming => InitKind::Kaiming { fan_in },
            WeightInit::Orthogonal(gain) => InitKind::Orthogonal { gain },
        }
    }
}

fn add_bias(x: Tensor, bias: &Option<Var>) -> Result<Tensor> {
    match bias {
        Some(b) => {
            let c = b.dims()[0];
            Ok(x.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
        }
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        winit: WeightInit,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        let weight = sub.param("weight", &[cout, cin, k, k], winit.kind(cin * k * k))?;
        let bias = Some(sub.param("bias", &[cout], InitKind::Zeros)?);
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        add_bias(y, &self.bias)
    }

    /// Same computation with the parameters cut out of the autograd graph.
    pub fn forward_detached(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight.as_detached_tensor(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => {
                let c = b.dims()[0];
                Ok(y.broadcast_add(&b.as_detached_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Transposed convolution; weight layout `(cin, cout, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        winit: WeightInit,
    ) -> Result<Self> {
        let mut sub = init.sub(name);
        let weight = sub.param("weight", &[cin, cout, k, k], winit.kind(cin * k * k))?;
        let bias = Some(sub.param("bias", &[cout], InitKind::Zeros)?);
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(
            x,
            self.weight.as_tensor(),
            self.stride,
            self.padding,
            self.output_padding,
        )?;
        add_bias(y, &self.bias)
    }
}

/// Per-sample, per-channel normalization without affine parameters.
/// Cross-correlation as a matrix product over gathered windows.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, k, k2) = w.dims4()?;
    if wcin != cin || k != k2 {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            w.dims(),
            x.dims()
        )));
    }
    if h + 2 * padding < k || wd + 2 * padding < k {
        return Err(Error::Shape(format!("input {h}x{wd} smaller than kernel {k}")));
    }
    let win = Window { k, stride, padding, h, w: wd };
    let (ho, wo) = win.out_size();
    let col = if k == 1 && stride == 1 && padding == 0 {
        x.reshape((n, cin, h * wd))?
    } else {
        im2col(x, win)?
    };
    let wm = w.reshape((cout, cin * k * k))?;
    Ok(wm.broadcast_matmul(&col)?.reshape((n, cout, ho, wo))?)
}

/// Transposed convolution with weight layout `(cin, cout, k, k)`: the adjoint of
/// `conv2d` with the same window, applied to `W^T x`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout, k, _) = w.dims4()?;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "transposed conv weight {:?} does not fit input {:?}",
            w.dims(),
            x.dims()
        )));
    }
    if output_padding >= stride.max(1) || (h - 1) * stride + k + output_padding <= 2 * padding {
        return Err(Error::Shape("transposed conv padding out of range".into()));
    }
    let size = |i: usize| (i - 1) * stride + k + output_padding - 2 * padding;
    let win = Window { k, stride, padding, h: size(h), w: size(wd) };
    debug_assert_eq!(win.out_size(), (h, wd));
    let wm = w.reshape((cin, cout * k * k))?.t()?;
    let cols = wm.broadcast_matmul(&x.reshape((n, cin, h * wd))?)?;
    Ok(col2im(&cols, win)?)
}

pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let y = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(y.reshape((n, c, h, w))?)
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let mut sub = init.sub(name);
        Ok(BatchNorm2d {
            gamma: sub.param("weight", &[channels], InitKind::Ones)?,
            beta: sub.param("bias", &[channels], InitKind::Zeros)?,
            running_mean: sub.buffer("running_mean", &[channels], InitKind::Zeros)?,
            running_var: sub.buffer("running_var", &[channels], InitKind::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if mode.is_train() {
            // (N, C, H, W) -> (C, N*H*W)
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            if mode == Mode::Train {
                let m = self.momentum;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 {
                    count / (count - 1.0)
                } else {
                    1.0
                };
                let rm = self.running_mean.as_detached_tensor();
                let rv = self.running_var.as_detached_tensor();
                let new_m = ((rm * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let new_v = ((rv * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbiased))?)?;
                self.running_mean.set(&new_m)?;
                self.running_var.set(&new_v)?;
            }
            (mean.reshape(shape)?, var.reshape(shape)?)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape(shape)?,
                self.running_var.as_detached_tensor().reshape(shape)?,
            )
        };
        let y = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Softmax over the channel axis.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// 2x2 max pooling with stride 2, built from a reshape and two max reductions.
/// candle's own pooling op scales the backward pass incorrectly.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even sides, got {h}x{w}"
        )));
    }
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.max(5)?.max(3)?)
}

#[cfg(test)]
mod tests {
    #[test]
    fn matmul_convolutions_match_reference_kernels() {
        let dev = candle_core::Device::Cpu;
        let ramp = |shape: &[usize], k: f64| {
            let n: usize = shape.iter().product();
            Tensor::arange(0f64, n as f64, &dev)
                .unwrap()
                .affine(k, 0.0)
                .unwrap()
                .sin()
                .unwrap()
                .reshape(shape)
                .unwrap()
        };
        let x = ramp(&[2, 3, 9, 8], 0.37);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (4, 2, 1), (1, 1, 0), (7, 1, 3), (4, 1, 0)] {
            let w = ramp(&[5, 3, k, k], 0.11);
            let a = conv2d(&x, &w, s, p).unwrap();
            let b = x.conv2d(&w, p, s, 1, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "k{k} s{s} p{p}: {d}");
        }
        for (k, s, p, op) in [(3, 2, 1, 1), (2, 2, 0, 0), (3, 1, 1, 0), (4, 2, 1, 0)] {
            let w = ramp(&[3, 4, k, k], 0.23);
            let a = conv_transpose2d(&x, &w, s, p, op).unwrap();
            let b = x.conv_transpose2d(&w, p, op, s, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-10, "k{k} s{s} p{p} op{op}: {d}");
        }
    }

    use super::*;
    use crate::netgraph::params::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Central-difference check of d(sum(f() * probe))/dv at a spread of coordinates.
    fn check_var_grad(v: &Var, f: &dyn Fn() -> Tensor) {
        let probe = input(f().dims(), 2);
        let loss = || {
            f().mul(&probe)
                .unwrap()
                .sum_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let g = f()
            .mul(&probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let grad = g
            .get(v.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let shape = v.dims().to_vec();
        let base = v
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let set = |p: Vec<f64>| {
            v.set(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu).unwrap())
                .unwrap()
        };
        let h = 1e-6;
        for i in (0..base.len()).step_by((base.len() / 17).max(1)) {
            let mut p = base.clone();
            p[i] += h;
            set(p.clone());
            let lp = loss();
            p[i] -= 2.0 * h;
            set(p);
            let lm = loss();
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(err < 1e-6, "coord {i}: fd {fd} vs analytic {}", grad[i]);
        }
        set(base);
    }

    fn check_input_grad(f: &dyn Fn(&Tensor) -> Tensor, shape: &[usize]) {
        let x = Var::from_tensor(&input(shape, 1)).unwrap();
        check_var_grad(&x, &|| f(x.as_tensor()));
    }

    fn build<T>(f: impl FnOnce(&mut Init) -> T) -> T {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = Init::new(&mut store, &mut rng);
        f(&mut init)
    }

    #[test]
    fn transposed_conv_doubling_gradient() {
        let layer = build(|i| {
            ConvTranspose2d::new(i, "up", 3, 2, 3, 2, 1, 1, WeightInit::Normal(0.3)).unwrap()
        });
        assert_eq!(
            layer.forward(&input(&[1, 3, 5, 6], 0)).unwrap().dims(),
            &[1, 2, 10, 12]
        );
        check_input_grad(&|x| layer.forward(x).unwrap(), &[2, 3, 5, 6]);
        let x = input(&[2, 3, 5, 6], 3);
        check_var_grad(&layer.weight, &|| layer.forward(&x).unwrap());
    }

    #[test]
    fn transposed_conv_k2_gradient() {
        let layer = build(|i| {
            ConvTranspose2d::new(i, "up", 3, 2, 2, 2, 0, 0, WeightInit::Normal(0.3)).unwrap()
        });
        check_input_grad(&|x| layer.forward(x).unwrap(), &[1, 3, 4, 4]);
        let x = input(&[1, 3, 4, 4], 3);
        check_var_grad(&layer.weight, &|| layer.forward(&x).unwrap());
    }

    #[test]
    fn conv_norm_and_pool_gradients() {
        let conv = build(|i| Conv2d::new(i, "c", 2, 3, 3, 1, 1, WeightInit::Kaiming).unwrap());
        check_input_grad(&|x| conv.forward(x).unwrap(), &[2, 2, 8, 8]);
        let x = input(&[2, 2, 8, 8], 3);
        check_var_grad(&conv.weight, &|| conv.forward(&x).unwrap());
        let strided = build(|i| Conv2d::new(i, "c", 2, 3, 3, 2, 1, WeightInit::Kaiming).unwrap());
        check_input_grad(&|x| strided.forward(x).unwrap(), &[2, 2, 8, 8]);
        check_var_grad(&strided.weight, &|| strided.forward(&x).unwrap());
        check_input_grad(&|x| instance_norm(x, 1e-5).unwrap(), &[2, 3, 4, 4]);
        check_input_grad(&|x| softmax_channels(x).unwrap(), &[1, 2, 3, 3]);
        check_input_grad(&|x| leaky_relu(x, 0.2).unwrap(), &[1, 2, 3, 3]);
        check_input_grad(&|x| max_pool2(x).unwrap(), &[1, 2, 4, 6]);
        let x = input(&[1, 2, 4, 6], 4);
        let reference = x.max_pool2d(2).unwrap();
        let ours = max_pool2(&x).unwrap();
        assert_eq!(
            ours.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            reference.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let bn = build(|i| BatchNorm2d::new(i, "bn", 3).unwrap());
        check_input_grad(
            &|x| bn.forward(x, Mode::TrainFrozenStats).unwrap(),
            &[2, 3, 4, 4],
        );
    }

    #[test]
    fn batch_norm_stat_updates_follow_mode() {
        let bn = build(|i| BatchNorm2d::new(i, "bn", 2).unwrap());
        let x = input(&[4, 2, 3, 3], 5).affine(3.0, 1.0).unwrap();
        let before = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        bn.forward(&x, Mode::TrainFrozenStats).unwrap();
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(
            bn.running_mean.as_tensor().to_vec1::<f64>().unwrap(),
            before
        );
        bn.forward(&x, Mode::Train).unwrap();
        let after = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        let batch_mean = x
            .transpose(0, 1)
            .unwrap()
            .flatten_from(1)
            .unwrap()
            .mean(1)
            .unwrap();
        let bm = batch_mean.to_vec1::<f64>().unwrap();
        for c in 0..2 {
            assert!((after[c] - 0.1 * bm[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_batch_norm_output_is_standardized() {
        let bn = build(|i| BatchNorm2d::new(i, "bn", 2).unwrap());
        let x = input(&[3, 2, 4, 4], 6).affine(5.0, -2.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let flat = y.transpose(0, 1).unwrap().flatten_from(1).unwrap();
        for m in flat.mean(1).unwrap().to_vec1::<f64>().unwrap() {
            assert!(m.abs() < 1e-12);
        }
    }
}
