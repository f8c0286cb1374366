//! Dense channel-major maps and the handful of spatial operators the probes
//! need: bilinear / nearest resampling (with their adjoints) and 3×3
//! convolutions.

use serde::{Deserialize, Serialize};

/// A `(channels, height, width)` tensor stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "Map3 buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Column of values across channels at one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }

    pub fn add_assign(&mut self, other: &Map3) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Map3) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Applies an `(rows × channels)` row-major matrix at every pixel
    /// (a 1×1 convolution without bias).
    pub fn project(&self, matrix: &[f64], rows: usize) -> Map3 {
        assert_eq!(matrix.len(), rows * self.channels, "projection matrix size");
        let n = self.plane_len();
        let mut out = Map3::zeros(rows, self.height, self.width);
        for r in 0..rows {
            let dst = &mut out.data[r * n..(r + 1) * n];
            for c in 0..self.channels {
                let w = matrix[r * self.channels + c];
                if w == 0.0 {
                    continue;
                }
                let src = &self.data[c * n..(c + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`Map3::project`] with respect to its input.
    pub fn project_transpose(&self, matrix: &[f64], cols: usize) -> Map3 {
        let rows = self.channels;
        assert_eq!(matrix.len(), rows * cols, "projection matrix size");
        let n = self.plane_len();
        let mut out = Map3::zeros(cols, self.height, self.width);
        for r in 0..rows {
            let src = &self.data[r * n..(r + 1) * n];
            for c in 0..cols {
                let w = matrix[r * cols + c];
                if w == 0.0 {
                    continue;
                }
                let dst = &mut out.data[c * n..(c + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// `Σ_pixels grad ⊗ input`, i.e. the gradient of [`Map3::project`]
    /// with respect to its matrix, as a `(grad.channels × self.channels)`
    /// row-major buffer accumulated into `acc`.
    pub fn accumulate_outer(&self, grad: &Map3, acc: &mut [f64]) {
        assert_eq!(self.plane_len(), grad.plane_len());
        assert_eq!(acc.len(), grad.channels * self.channels);
        for r in 0..grad.channels {
            let g = grad.plane(r);
            for c in 0..self.channels {
                let x = self.plane(c);
                acc[r * self.channels + c] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }

    pub fn concat(maps: &[Map3]) -> Map3 {
        let (h, w) = (maps[0].height, maps[0].width);
        let channels = maps.iter().map(|m| m.channels).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for m in maps {
            assert_eq!((m.height, m.width), (h, w), "concat spatial size");
            data.extend_from_slice(&m.data);
        }
        Map3::from_vec(channels, h, w, data)
    }
}

/// One tap pair of a separable linear interpolation along an axis.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

/// Half-pixel-centred linear interpolation weights from `src` to `dst` samples.
fn linear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let frac = s - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear resampling to `(height, width)`; an exact copy when sizes match.
pub fn upsample_bilinear(input: &Map3, height: usize, width: usize) -> Map3 {
    if (input.height, input.width) == (height, width) {
        return input.clone();
    }
    let ty = linear_taps(input.height, height);
    let tx = linear_taps(input.width, width);
    let mut out = Map3::zeros(input.channels, height, width);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for (y, a) in ty.iter().enumerate() {
            let row_lo = &src[a.lo * input.width..(a.lo + 1) * input.width];
            let row_hi = &src[a.hi * input.width..(a.hi + 1) * input.width];
            for (x, b) in tx.iter().enumerate() {
                let top = b.w_lo * row_lo[b.lo] + b.w_hi * row_lo[b.hi];
                let bot = b.w_lo * row_hi[b.lo] + b.w_hi * row_hi[b.hi];
                dst[y * width + x] = a.w_lo * top + a.w_hi * bot;
            }
        }
    }
    out
}

/// The channel vector of `upsample_bilinear(input, height, width)` at a
/// single output pixel, without resampling the whole map.
pub fn bilinear_pixel(input: &Map3, height: usize, width: usize, y: usize, x: usize) -> Vec<f64> {
    if (input.height, input.width) == (height, width) {
        return input.pixel(y, x);
    }
    let a = linear_taps(input.height, height)[y];
    let b = linear_taps(input.width, width)[x];
    (0..input.channels)
        .map(|c| {
            let top = b.w_lo * input.at(c, a.lo, b.lo) + b.w_hi * input.at(c, a.lo, b.hi);
            let bot = b.w_lo * input.at(c, a.hi, b.lo) + b.w_hi * input.at(c, a.hi, b.hi);
            a.w_lo * top + a.w_hi * bot
        })
        .collect()
}

/// Adjoint of [`upsample_bilinear`]: scatters a full-resolution gradient back
/// onto the `(height, width)` source grid.
pub fn upsample_bilinear_adjoint(grad: &Map3, height: usize, width: usize) -> Map3 {
    if (grad.height, grad.width) == (height, width) {
        return grad.clone();
    }
    let ty = linear_taps(height, grad.height);
    let tx = linear_taps(width, grad.width);
    let mut out = Map3::zeros(grad.channels, height, width);
    for c in 0..grad.channels {
        let src = grad.plane(c);
        let dst = out.plane_mut(c);
        for (y, a) in ty.iter().enumerate() {
            for (x, b) in tx.iter().enumerate() {
                let g = src[y * grad.width + x];
                if g == 0.0 {
                    continue;
                }
                dst[a.lo * width + b.lo] += g * a.w_lo * b.w_lo;
                dst[a.lo * width + b.hi] += g * a.w_lo * b.w_hi;
                dst[a.hi * width + b.lo] += g * a.w_hi * b.w_lo;
                dst[a.hi * width + b.hi] += g * a.w_hi * b.w_hi;
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Map3, factor: usize) -> Map3 {
    let (h, w) = (input.height * factor, input.width * factor);
    let mut out = Map3::zeros(input.channels, h, w);
    for c in 0..input.channels {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(c, y, x) = input.at(c, y / factor, x / factor);
            }
        }
    }
    out
}

pub fn upsample_nearest_adjoint(grad: &Map3, factor: usize) -> Map3 {
    let mut out = Map3::zeros(grad.channels, grad.height / factor, grad.width / factor);
    for c in 0..grad.channels {
        for y in 0..grad.height {
            for x in 0..grad.width {
                *out.at_mut(c, y / factor, x / factor) += grad.at(c, y, x);
            }
        }
    }
    out
}

pub fn relu(input: &Map3) -> Map3 {
    let mut out = input.clone();
    out.data.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward(pre: &Map3, grad: &Map3) -> Map3 {
    let data = pre
        .data
        .iter()
        .zip(&grad.data)
        .map(|(p, g)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    Map3::from_vec(grad.channels, grad.height, grad.width, data)
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * 3 + ky) * 3 + kx
    }

    pub fn forward(&self, input: &Map3) -> Map3 {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let (h, w) = (input.height, input.width);
        let mut out = Map3::zeros(self.out_channels, h, w);
        for o in 0..self.out_channels {
            let bias = self.bias[o];
            let dst = out.plane_mut(o);
            dst.iter_mut().for_each(|v| *v = bias);
            for i in 0..self.in_channels {
                let src = input.plane(i);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = self.weight[self.widx(o, i, ky, kx)];
                        if k == 0.0 {
                            continue;
                        }
                        accumulate_shifted(dst, src, h, w, ky as isize - 1, kx as isize - 1, k);
                    }
                }
            }
        }
        out
    }

    /// Returns `(grad_input, grad_params)` for upstream `grad` at the output.
    pub fn backward(&self, input: &Map3, grad: &Map3) -> (Map3, ConvGrad) {
        let (h, w) = (input.height, input.width);
        let mut gin = Map3::zeros(self.in_channels, h, w);
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.out_channels];
        for o in 0..self.out_channels {
            let g = grad.plane(o);
            gb[o] = g.iter().sum();
            for i in 0..self.in_channels {
                let src = input.plane(i);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                        gw[self.widx(o, i, ky, kx)] += shifted_dot(g, src, h, w, dy, dx);
                        let k = self.weight[self.widx(o, i, ky, kx)];
                        if k != 0.0 {
                            accumulate_shifted(gin.plane_mut(i), g, h, w, -dy, -dx, k);
                        }
                    }
                }
            }
        }
        (gin, ConvGrad { weight: gw, bias: gb })
    }
}

/// `dst[y][x] += k * src[y+dy][x+dx]` over valid positions.
fn accumulate_shifted(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, k: f64) {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let drow = &mut dst[y * w..(y + 1) * w];
        let srow = &src[sy * w..(sy + 1) * w];
        for x in x0..x1 {
            drow[x] += k * srow[(x as isize + dx) as usize];
        }
    }
}

/// `Σ g[y][x] * src[y+dy][x+dx]` over valid positions.
fn shifted_dot(g: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        for x in x0..x1 {
            acc += g[y * w + x] * src[sy * w + (x as isize + dx) as usize];
        }
    }
    acc
}

fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift.max(0)).max(0) as usize;
    (lo.min(n), hi.min(n))
}
