//! Image containers and the handful of numeric kernels the model needs.
//!
//! Pixel data is stored as `f32`, row-major `[row][col][channel]`. Reductions
//! accumulate in `f64`.

use crate::error::{Error, Result};

/// An `height × width × channels` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// Interleaved 8-bit samples scaled to `[0, 1]` as `byte / 255`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(height, width, channels, data)
    }

    /// Quantizes back to 8 bits with rounding; values are clamped to `[0, 1]` first.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    /// Copies the `height × width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        self.padded_crop(top, left, height, width, 0)
    }

    /// Copies a window and surrounds it with `padding` zero pixels on every side.
    pub fn padded_crop(
        &self,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
        padding: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::Dimension(format!(
                "crop {height}x{width} at ({top}, {left}) does not fit in {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let out_h = height + 2 * padding;
        let out_w = width + 2 * padding;
        let mut data = vec![0.0f32; out_h * out_w * c];
        let row_len = width * c;
        for r in 0..height {
            let src = self.index(top + r, left, 0);
            let dst = ((r + padding) * out_w + padding) * c;
            data[dst..dst + row_len].copy_from_slice(&self.data[src..src + row_len]);
        }
        Self::new(out_h, out_w, c, data)
    }

    /// Replicates a single-channel image into `channels` identical channels.
    pub fn replicate_channels(&self, channels: usize) -> Result<Self> {
        if self.channels != 1 {
            return Err(Error::Shape(format!(
                "channel replication needs a 1-channel image, got {}",
                self.channels
            )));
        }
        let data = self
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, channels))
            .collect();
        Self::new(self.height, self.width, channels, data)
    }
}

/// Convolution responses laid out `[row][col][kernel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseGrid {
    rows: usize,
    cols: usize,
    kernels: usize,
    data: Vec<f32>,
}

impl ResponseGrid {
    pub fn new(rows: usize, cols: usize, kernels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * kernels {
            return Err(Error::Shape(format!(
                "expected {} responses for {rows}x{cols}x{kernels}, got {}",
                rows * cols * kernels,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            kernels,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn kernels(&self) -> usize {
        self.kernels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, kernel: usize) -> f32 {
        self.data[(row * self.cols + col) * self.kernels + kernel]
    }
}

/// Shape of a kernel bank stored flat as `[count][channels][height][width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelShape {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl KernelShape {
    pub fn len(&self) -> usize {
        self.count * self.per_kernel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights in a single kernel, across all input channels.
    pub fn per_kernel(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    pub fn index(&self, kernel: usize, channel: usize, row: usize, col: usize) -> usize {
        ((kernel * self.channels + channel) * self.height + row) * self.width + col
    }
}

/// Output side length of a strided convolution: `floor((len + 2p - k) / s) + 1`.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Kernels reordered to `[count][row][col][channel]` so that each kernel row
/// lines up with a contiguous run of an interleaved image row.
pub(crate) struct PackedKernels {
    shape: KernelShape,
    weights: Vec<f32>,
}

impl PackedKernels {
    pub(crate) fn new(kernels: &[f32], shape: KernelShape) -> Self {
        let mut weights = vec![0.0f32; shape.len()];
        let mut dst = 0;
        for n in 0..shape.count {
            for i in 0..shape.height {
                for j in 0..shape.width {
                    for k in 0..shape.channels {
                        weights[dst] = kernels[shape.index(n, k, i, j)];
                        dst += 1;
                    }
                }
            }
        }
        Self { shape, weights }
    }
}

fn check_conv_args(
    input: &ImageTensor,
    kernels: &[f32],
    shape: KernelShape,
    bias: &[f32],
    stride: usize,
) -> Result<()> {
    if stride == 0 {
        return Err(Error::Argument("stride must be at least 1".into()));
    }
    if shape.count == 0 || shape.height == 0 || shape.width == 0 {
        return Err(Error::Dimension(format!("empty kernel bank {shape:?}")));
    }
    if kernels.len() != shape.len() {
        return Err(Error::Shape(format!(
            "kernel bank holds {} weights, shape {shape:?} needs {}",
            kernels.len(),
            shape.len()
        )));
    }
    if bias.len() != shape.count {
        return Err(Error::Shape(format!(
            "bias has {} entries for {} kernels",
            bias.len(),
            shape.count
        )));
    }
    if input.channels() != shape.channels {
        return Err(Error::Shape(format!(
            "input has {} channels, kernels expect {}",
            input.channels(),
            shape.channels
        )));
    }
    Ok(())
}

/// Strided cross-correlation of `input` with a kernel bank over a zero-padded
/// input:
///
/// `out[r][c][n] = Σ_k Σ_{i,j} kernels[n][k][i][j] · padded[r·s + i][c·s + j][k] + bias[n]`
pub fn conv2d_strided(
    input: &ImageTensor,
    kernels: &[f32],
    shape: KernelShape,
    bias: &[f32],
    stride: usize,
    padding: usize,
) -> Result<ResponseGrid> {
    check_conv_args(input, kernels, shape, bias, stride)?;
    let (Some(_), Some(_)) = (
        conv_output_len(input.height(), shape.height, stride, padding),
        conv_output_len(input.width(), shape.width, stride, padding),
    ) else {
        return Err(Error::Dimension(format!(
            "{}x{} kernel does not fit {}x{} input with padding {padding}",
            shape.height,
            shape.width,
            input.height(),
            input.width()
        )));
    };
    let padded = if padding == 0 {
        std::borrow::Cow::Borrowed(input)
    } else {
        std::borrow::Cow::Owned(input.padded_crop(
            0,
            0,
            input.height(),
            input.width(),
            padding,
        )?)
    };
    Ok(conv2d_valid(
        &padded,
        &PackedKernels::new(kernels, shape),
        bias,
        stride,
    ))
}

/// Valid (unpadded) strided correlation; callers have checked the shapes.
pub(crate) fn conv2d_valid(
    input: &ImageTensor,
    kernels: &PackedKernels,
    bias: &[f32],
    stride: usize,
) -> ResponseGrid {
    let shape = kernels.shape;
    let rows = (input.height() - shape.height) / stride + 1;
    let cols = (input.width() - shape.width) / stride + 1;
    let c = input.channels();
    let run = shape.width * c;
    let row_stride = input.width() * c;
    let src = input.data();
    let mut out = Vec::with_capacity(rows * cols * shape.count);

    for r in 0..rows {
        for col in 0..cols {
            let origin = (r * stride * input.width() + col * stride) * c;
            for n in 0..shape.count {
                let kernel = &kernels.weights[n * shape.per_kernel()..(n + 1) * shape.per_kernel()];
                let mut acc = 0.0f64;
                for i in 0..shape.height {
                    let window = &src[origin + i * row_stride..origin + i * row_stride + run];
                    let taps = &kernel[i * run..(i + 1) * run];
                    acc += window
                        .iter()
                        .zip(taps)
                        .map(|(&x, &w)| f64::from(x) * f64::from(w))
                        .sum::<f64>();
                }
                out.push((acc + f64::from(bias[n])) as f32);
            }
        }
    }
    ResponseGrid {
        rows,
        cols,
        kernels: shape.count,
        data: out,
    }
}

/// Per-kernel extrema of a response grid.
///
/// Arg indices are flat row-major positions `row * cols + col` and always refer
/// to the first occurrence of the extreme value.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelExtrema {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
    pub argmin: Vec<usize>,
    pub argmax: Vec<usize>,
}

pub fn channel_min_max(grid: &ResponseGrid) -> Result<ChannelExtrema> {
    let n = grid.kernels();
    let positions = grid.rows() * grid.cols();
    if n == 0 || positions == 0 {
        return Err(Error::Dimension(format!(
            "empty response grid {}x{}x{n}",
            grid.rows(),
            grid.cols()
        )));
    }
    let mut ext = ChannelExtrema {
        min: grid.data()[..n].to_vec(),
        max: grid.data()[..n].to_vec(),
        argmin: vec![0; n],
        argmax: vec![0; n],
    };
    for (pos, cell) in grid.data().chunks_exact(n).enumerate().skip(1) {
        for (k, &v) in cell.iter().enumerate() {
            if v < ext.min[k] {
                ext.min[k] = v;
                ext.argmin[k] = pos;
            }
            if v > ext.max[k] {
                ext.max[k] = v;
                ext.argmax[k] = pos;
            }
        }
    }
    Ok(ext)
}

pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// ITU-R BT.601 luma, clamped to `[0, 1]` so white stays white after rounding.
pub fn to_grayscale(input: &ImageTensor) -> Result<ImageTensor> {
    if input.channels() != 3 {
        return Err(Error::Shape(format!(
            "grayscale conversion needs 3 channels, got {}",
            input.channels()
        )));
    }
    let data = input
        .data()
        .chunks_exact(3)
        .map(|px| {
            (LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2])
                .clamp(0.0, 1.0)
        })
        .collect();
    ImageTensor::new(input.height(), input.width(), 1, data)
}

/// Bilinear resampling with corner-aligned sample grids: output pixel `i` reads
/// source coordinate `i · (in − 1) / (out − 1)`.
pub fn bilinear_resize(input: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!(
            "target size must be positive, got {out_h}x{out_w}"
        )));
    }
    if out_h == input.height() && out_w == input.width() {
        return Ok(input.clone());
    }
    let ys = axis_samples(input.height(), out_h);
    let xs = axis_samples(input.width(), out_w);
    let c = input.channels();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for k in 0..c {
                let top = lerp(input.get(y0, x0, k), input.get(y0, x1, k), tx);
                let bottom = lerp(input.get(y1, x0, k), input.get(y1, x1, k), tx);
                data.push((top + (bottom - top) * ty) as f32);
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, data)
}

fn axis_samples(len_in: usize, len_out: usize) -> Vec<(usize, usize, f64)> {
    (0..len_out)
        .map(|i| {
            let pos = if len_out == 1 {
                0.0
            } else {
                i as f64 * (len_in - 1) as f64 / (len_out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(len_in - 1);
            let hi = (lo + 1).min(len_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f64) -> f64 {
    f64::from(a) + (f64::from(b) - f64::from(a)) * t
}
