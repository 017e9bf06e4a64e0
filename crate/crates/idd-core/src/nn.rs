//! Minimal f64 convolutional layers with hand-written backward passes.
//!
//! Activations are stored pixel-major as `[H*W, C]` matrices (`FeatureMap`),
//! which keeps every convolution a single tall GEMM after an im2col whose
//! taps copy contiguous channel runs. All reductions are sequential, so
//! results are bit-reproducible regardless of thread count.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// A CxHxW activation tensor stored as a `[H*W, C]` matrix.
///
/// Row `y*w + x` holds the channel vector of pixel `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array2<f64>,
    pub h: usize,
    pub w: usize,
}

impl FeatureMap {
    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        FeatureMap {
            data: Array2::zeros((h * w, channels)),
            h,
            w,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[[y * self.w + x, c]]
    }

    pub fn from_fn(
        channels: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut m = FeatureMap::zeros(channels, h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..channels {
                    m.data[[y * w + x, c]] = f(c, y, x);
                }
            }
        }
        m
    }

    /// Builds from a conventional `[C, H, W]` tensor.
    pub fn from_chw(a: &Array3<f64>) -> Self {
        let (c, h, w) = a.dim();
        FeatureMap::from_fn(c, h, w, |ci, y, x| a[[ci, y, x]])
    }

    /// Converts back to a `[C, H, W]` tensor.
    pub fn to_chw(&self) -> Array3<f64> {
        let c = self.channels();
        let mut out = Array3::zeros((c, self.h, self.w));
        for y in 0..self.h {
            for x in 0..self.w {
                for ci in 0..c {
                    out[[ci, y, x]] = self.data[[y * self.w + x, ci]];
                }
            }
        }
        out
    }
}

/// Square convolution. Weights are stored `[K, C_out]` with tap-major,
/// channel-minor rows: `k = (dy*kside + dx)*C_in + c`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
    pub kside: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Saved im2col matrix for the backward pass.
pub struct ConvCache {
    cols: Array2<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    /// He-uniform initialization from the given RNG stream.
    pub fn new(
        cin: usize,
        cout: usize,
        kside: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let k = cin * kside * kside;
        let bound = (6.0 / k as f64).sqrt();
        let mut weight = Array2::zeros((k, cout));
        for v in weight.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        Conv2d {
            weight,
            bias: Array1::zeros(cout),
            cin,
            cout,
            kside,
            stride,
            pad,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.pad - self.kside) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kside) / self.stride + 1;
        (ho, wo)
    }

    pub fn param_len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f64> {
        let (h, w) = (x.h, x.w);
        let (ho, wo) = self.out_dims(h, w);
        let k = self.cin * self.kside * self.kside;
        let mut cols = Array2::<f64>::zeros((ho * wo, k));
        let src = x.data.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("standard layout");
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * k;
                for dy in 0..self.kside {
                    let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                    for dx in 0..self.kside {
                        let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                        let tap = row + (dy * self.kside + dx) * self.cin;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            let s = (iy as usize * w + ix as usize) * self.cin;
                            dst[tap..tap + self.cin].copy_from_slice(&src[s..s + self.cin]);
                        }
                        // out-of-bounds taps stay zero
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, in_h: usize, in_w: usize) -> FeatureMap {
        let (ho, wo) = self.out_dims(in_h, in_w);
        let k = self.cin * self.kside * self.kside;
        let mut dx = FeatureMap::zeros(self.cin, in_h, in_w);
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().expect("standard layout");
        let dst = dx.data.as_slice_mut().expect("standard layout");
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oy * wo + ox) * k;
                for dy in 0..self.kside {
                    let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                    for ddx in 0..self.kside {
                        let ix = (ox * self.stride + ddx) as isize - self.pad as isize;
                        if iy >= 0 && iy < in_h as isize && ix >= 0 && ix < in_w as isize {
                            let tap = row + (dy * self.kside + ddx) * self.cin;
                            let s = (iy as usize * in_w + ix as usize) * self.cin;
                            for c in 0..self.cin {
                                dst[s + c] += src[tap + c];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvCache)> {
        if x.channels() != self.cin {
            return Err(Error::ShapeMismatch {
                context: "conv input channels",
                left: vec![x.channels()],
                right: vec![self.cin],
            });
        }
        let (ho, wo) = self.out_dims(x.h, x.w);
        let cols = self.im2col(x);
        let mut out = cols.dot(&self.weight);
        out += &self.bias;
        Ok((
            FeatureMap {
                data: out,
                h: ho,
                w: wo,
            },
            ConvCache {
                cols,
                in_h: x.h,
                in_w: x.w,
            },
        ))
    }

    /// Backward pass. `dy` is `[ho*wo, cout]`; gradients accumulate into
    /// `grad` laid out as `[weight row-major | bias]`. Returns the input
    /// gradient.
    pub fn backward(&self, cache: &ConvCache, dy: &Array2<f64>, grad: &mut [f64]) -> FeatureMap {
        let k = self.weight.nrows();
        debug_assert_eq!(grad.len(), self.param_len());
        let dw = cache.cols.t().dot(dy); // [K, cout]
        let dw = dw.as_standard_layout();
        let (gw, gb) = grad.split_at_mut(k * self.cout);
        for (g, &v) in gw.iter_mut().zip(dw.as_slice().expect("contiguous")) {
            *g += v;
        }
        let db = dy.sum_axis(Axis(0));
        for (g, &v) in gb.iter_mut().zip(db.iter()) {
            *g += v;
        }
        let dcols = dy.dot(&self.weight.t());
        self.col2im(&dcols, cache.in_h, cache.in_w)
    }

    /// Appends parameters in checkpoint order (weight row-major, then bias).
    pub fn write_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.as_slice().expect("contiguous"));
        out.extend_from_slice(self.bias.as_slice().expect("contiguous"));
    }

    /// Loads parameters from the slice; returns the number consumed.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let wlen = self.weight.len();
        let blen = self.bias.len();
        self.weight
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&src[..wlen]);
        self.bias
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&src[wlen..wlen + blen]);
        wlen + blen
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        data: x.data.mapv(|v| v.max(0.0)),
        h: x.h,
        w: x.w,
    }
}

/// Gradient of ReLU given the *output* of the forward pass.
pub fn relu_backward(dy: &Array2<f64>, out: &FeatureMap) -> Array2<f64> {
    let mut dx = dy.clone();
    for (d, &o) in dx.iter_mut().zip(out.data.iter()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Per-axis linear interpolation table: destination index -> two source
/// indices and the fractional weight of the second.
fn interp_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|d| {
            let s = (d as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
            let s = s.max(0.0).min(src as f64 - 1.0);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize (half-pixel centers, edges clamped).
pub fn bilinear_resize(x: &FeatureMap, oh: usize, ow: usize) -> FeatureMap {
    let c = x.channels();
    let ty = interp_table(x.h, oh);
    let tx = interp_table(x.w, ow);
    let mut out = FeatureMap::zeros(c, oh, ow);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            let r00 = x.data.row(y0 * x.w + x0);
            let r01 = x.data.row(y0 * x.w + x1);
            let r10 = x.data.row(y1 * x.w + x0);
            let r11 = x.data.row(y1 * x.w + x1);
            let mut o = out.data.row_mut(oy * ow + ox);
            for ci in 0..c {
                o[ci] = w00 * r00[ci] + w01 * r01[ci] + w10 * r10[ci] + w11 * r11[ci];
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients back to the
/// source grid with the same weights.
pub fn bilinear_resize_backward(
    dy: &Array2<f64>,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
) -> FeatureMap {
    let c = dy.ncols();
    let ty = interp_table(ih, oh);
    let tx = interp_table(iw, ow);
    let mut dx = FeatureMap::zeros(c, ih, iw);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = dy.row(oy * ow + ox);
            let weights = [
                (y0 * iw + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * iw + x1, (1.0 - fy) * fx),
                (y1 * iw + x0, fy * (1.0 - fx)),
                (y1 * iw + x1, fy * fx),
            ];
            for (row, wgt) in weights {
                if wgt == 0.0 {
                    continue;
                }
                let mut d = dx.data.row_mut(row);
                for ci in 0..c {
                    d[ci] += wgt * g[ci];
                }
            }
        }
    }
    dx
}

fn pool_bins(src: usize, dst: usize) -> Vec<(usize, usize)> {
    (0..dst)
        .map(|i| (i * src / dst, ((i + 1) * src + dst - 1) / dst))
        .collect()
}

/// Mean-pools to an `oh x ow` grid with near-equal bins.
pub fn adaptive_avg_pool(x: &FeatureMap, oh: usize, ow: usize) -> Result<FeatureMap> {
    if oh > x.h || ow > x.w {
        return Err(Error::ShapeMismatch {
            context: "adaptive pool output larger than input",
            left: vec![oh, ow],
            right: vec![x.h, x.w],
        });
    }
    let c = x.channels();
    let by = pool_bins(x.h, oh);
    let bx = pool_bins(x.w, ow);
    let mut out = FeatureMap::zeros(c, oh, ow);
    for (oy, &(y0, y1)) in by.iter().enumerate() {
        for (ox, &(x0, x1)) in bx.iter().enumerate() {
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let mut acc = vec![0.0f64; c];
            for y in y0..y1 {
                for x_ in x0..x1 {
                    let r = x.data.row(y * x.w + x_);
                    for ci in 0..c {
                        acc[ci] += r[ci];
                    }
                }
            }
            let mut o = out.data.row_mut(oy * ow + ox);
            for ci in 0..c {
                o[ci] = acc[ci] * inv;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`adaptive_avg_pool`].
pub fn adaptive_avg_pool_backward(
    dy: &Array2<f64>,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
) -> FeatureMap {
    let c = dy.ncols();
    let by = pool_bins(ih, oh);
    let bx = pool_bins(iw, ow);
    let mut dx = FeatureMap::zeros(c, ih, iw);
    for (oy, &(y0, y1)) in by.iter().enumerate() {
        for (ox, &(x0, x1)) in bx.iter().enumerate() {
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            let g = dy.row(oy * ow + ox);
            for y in y0..y1 {
                for x_ in x0..x1 {
                    let mut d = dx.data.row_mut(y * iw + x_);
                    for ci in 0..c {
                        d[ci] += g[ci] * inv;
                    }
                }
            }
        }
    }
    dx
}

/// Concatenates along the channel axis; inputs must share spatial dims.
pub fn concat_channels(parts: &[&FeatureMap]) -> FeatureMap {
    let (h, w) = parts[0].spatial();
    debug_assert!(parts.iter().all(|p| p.spatial() == (h, w)));
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = FeatureMap::zeros(total, h, w);
    let mut at = 0;
    for p in parts {
        let c = p.channels();
        out.data
            .slice_mut(ndarray::s![.., at..at + c])
            .assign(&p.data);
        at += c;
    }
    out
}
