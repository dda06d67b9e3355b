//! Window gathering (`im2col`) and its adjoint scatter-add (`col2im`) as autograd ops.
//!
//! For a `k x k` window with `stride` and zero `padding` over an `h x w` input, the
//! column tensor is `(n, c * k * k, ho * wo)` with rows ordered `(c, ky, kx)`.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// Spatial size of the image side.
    pub h: usize,
    pub w: usize,
}

impl Window {
    pub fn out_size(&self) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.k) / self.stride + 1;
        (f(self.h), f(self.w))
    }

    /// Calls `f(col_row, col_start, img_start, len)` for every run of in-bounds taps;
    /// within a run, column positions advance by 1 and image offsets by `stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (ho, wo) = self.out_size();
        let (s, p) = (self.stride as isize, self.padding as isize);
        // first and one-past-last output index whose tap lands inside [0, n)
        let range = |k: isize, n: usize, out: usize| -> (usize, usize) {
            let lo = ((p - k).max(0) + s - 1) / s;
            let hi = ((n as isize - 1 + p - k).div_euclid(s) + 1).clamp(0, out as isize);
            (lo.min(hi) as usize, hi as usize)
        };
        for ky in 0..self.k as isize {
            let (y0, y1) = range(ky, self.h, ho);
            for kx in 0..self.k as isize {
                let (x0, x1) = range(kx, self.w, wo);
                if x1 <= x0 {
                    continue;
                }
                let row = ky as usize * self.k + kx as usize;
                for oy in y0..y1 {
                    let iy = (oy as isize * s - p + ky) as usize;
                    let ix = (x0 as isize * s - p + kx) as usize;
                    f(row, oy * wo + x0, iy * self.w + ix, x1 - x0);
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col/col2im need contiguous inputs"),
    }
}

fn gather<T: Copy + Default>(src: &[T], n: usize, c: usize, win: &Window) -> Vec<T> {
    let (ho, wo) = win.out_size();
    let (kk, l, hw) = (win.k * win.k, ho * wo, win.h * win.w);
    let mut out = vec![T::default(); n * c * kk * l];
    for b in 0..n {
        for ch in 0..c {
            let img = &src[(b * c + ch) * hw..][..hw];
            let col = &mut out[(b * c + ch) * kk * l..][..kk * l];
            let st = win.stride;
            win.for_each_run(|row, pos, off, len| {
                let dst = &mut col[row * l + pos..][..len];
                if st == 1 {
                    dst.copy_from_slice(&img[off..off + len]);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d = img[off + j * st];
                    }
                }
            });
        }
    }
    out
}

fn scatter<T: Copy + Default + std::ops::AddAssign>(src: &[T], n: usize, c: usize, win: &Window) -> Vec<T> {
    let (ho, wo) = win.out_size();
    let (kk, l, hw) = (win.k * win.k, ho * wo, win.h * win.w);
    let mut out = vec![T::default(); n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let col = &src[(b * c + ch) * kk * l..][..kk * l];
            let img = &mut out[(b * c + ch) * hw..][..hw];
            let st = win.stride;
            win.for_each_run(|row, pos, off, len| {
                let src = &col[row * l + pos..][..len];
                for (j, v) in src.iter().enumerate() {
                    img[off + j * st] += *v;
                }
            });
        }
    }
    out
}

struct Im2Col(Window);
struct Col2Im(Window);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let win = self.0;
        if (h, w) != (win.h, win.w) {
            candle_core::bail!("im2col built for {}x{}, got {h}x{w}", win.h, win.w);
        }
        let (ho, wo) = win.out_size();
        let shape = Shape::from((n, c * win.k * win.k, ho * wo));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(gather(contiguous(d, layout)?, n, c, &win)),
            CpuStorage::F64(d) => CpuStorage::F64(gather(contiguous(d, layout)?, n, c, &win)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, rows, l) = layout.shape().dims3()?;
        let win = self.0;
        let kk = win.k * win.k;
        let (ho, wo) = win.out_size();
        if rows % kk != 0 || l != ho * wo {
            candle_core::bail!("col2im: columns {:?} do not fit window {win:?}", layout.shape());
        }
        let c = rows / kk;
        let shape = Shape::from((n, c, win.h, win.w));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(scatter(contiguous(d, layout)?, n, c, &win)),
            CpuStorage::F64(d) => CpuStorage::F64(scatter(contiguous(d, layout)?, n, c, &win)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

pub fn im2col(x: &Tensor, win: Window) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col(win))
}

pub fn col2im(cols: &Tensor, win: Window) -> candle_core::Result<Tensor> {
    cols.contiguous()?.apply_op1(Col2Im(win))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dev = Device::Cpu;
        let win = Window { k: 3, stride: 2, padding: 1, h: 7, w: 6 };
        let (ho, wo) = win.out_size();
        let x = Tensor::arange(0f64, 2.0 * 3.0 * 42.0, &dev).unwrap().sin().unwrap().reshape((2, 3, 7, 6)).unwrap();
        let y = Tensor::arange(0f64, (2 * 27 * ho * wo) as f64, &dev)
            .unwrap()
            .cos()
            .unwrap()
            .reshape((2, 27, ho * wo))
            .unwrap();
        let a = (im2col(&x, win).unwrap() * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let b = (col2im(&y, win).unwrap() * &x).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn gradient_flows_through_both_ops() {
        let dev = Device::Cpu;
        let win = Window { k: 2, stride: 1, padding: 0, h: 3, w: 3 };
        let x = Var::from_tensor(&Tensor::ones((1, 1, 3, 3), candle_core::DType::F64, &dev).unwrap()).unwrap();
        let g = im2col(x.as_tensor(), win).unwrap().sum_all().unwrap().backward().unwrap();
        // each pixel's gradient counts the windows covering it
        let got = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(got, vec![1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]);
    }
}
