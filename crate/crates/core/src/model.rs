//! The N-kernel model: one strided convolution over an RGB patch, then a
//! weighted sum of each kernel's spatial minimum and maximum response.
//!
//! ```text
//! x = conv(patch, Φ, b; stride 5, padding 1)         // (H−h+7)/5 × (W−w+7)/5 × N
//! y = Σ_n w_min[n]·min(x_n) + w_max[n]·max(x_n) + w_0
//! ```
//!
//! Higher scores mean blurrier patches.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{
    channel_min_max, conv2d_valid, ChannelExtrema, ImageTensor, KernelShape, PackedKernels,
    ResponseGrid,
};
use crate::{CONV_PADDING, CONV_STRIDE, CROP_SIZE, KERNEL_SIZE};

/// Loss a weight file was trained with. Stored in the file header.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Negative Pearson correlation; scores are relative.
    #[default]
    Plcc,
    /// Mean squared error against z-levels; scores are on the label scale.
    Mse,
}

impl LossKind {
    pub fn tag(self) -> u8 {
        match self {
            LossKind::Plcc => 0,
            LossKind::Mse => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LossKind::Plcc),
            1 => Some(LossKind::Mse),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Plcc => "plcc",
            LossKind::Mse => "mse",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plcc" => Ok(LossKind::Plcc),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Argument(format!(
                "unknown loss {other:?}, expected plcc or mse"
            ))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Predicted focus score. Larger means more blurry.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SharpnessScore {
    pub value: f64,
}

/// All trainable parameters of an N-kernel model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub kernel_shape: KernelShape,
    /// `[N][channels][h][w]`, row-major.
    pub kernels: Vec<f32>,
    pub conv_bias: Vec<f32>,
    /// Weight on each kernel's minimum response.
    pub pool_min_w: Vec<f32>,
    /// Weight on each kernel's maximum response.
    pub pool_max_w: Vec<f32>,
    pub pool_bias: f32,
    pub trained_with: LossKind,
}

/// Forward-pass intermediates needed by the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct ForwardTrace {
    pub score: f64,
    pub extrema: ChannelExtrema,
    pub cols: usize,
}

impl ModelParams {
    /// All-zero parameters for `n_kernels` 7×7 RGB kernels.
    pub fn zeros(n_kernels: usize) -> Result<Self> {
        Self::zeros_with_shape(KernelShape {
            count: n_kernels,
            channels: 3,
            height: KERNEL_SIZE,
            width: KERNEL_SIZE,
        })
    }

    pub fn zeros_with_shape(shape: KernelShape) -> Result<Self> {
        if shape.count == 0 || shape.channels == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::Argument(format!("invalid kernel shape {shape:?}")));
        }
        if shape.count > usize::from(u16::MAX)
            || shape.height > 255
            || shape.width > 255
            || shape.channels > 255
        {
            return Err(Error::Argument(format!(
                "kernel shape {shape:?} exceeds the weight file limits"
            )));
        }
        Ok(Self {
            kernel_shape: shape,
            kernels: vec![0.0; shape.len()],
            conv_bias: vec![0.0; shape.count],
            pool_min_w: vec![0.0; shape.count],
            pool_max_w: vec![0.0; shape.count],
            pool_bias: 0.0,
            trained_with: LossKind::Plcc,
        })
    }

    /// Training initialization: kernels uniform in `±1/√fan_in`, zero conv
    /// bias, unit pooling weights and zero pooling bias.
    pub fn initialized<R: Rng + ?Sized>(n_kernels: usize, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(n_kernels)?;
        let bound = 1.0 / (params.kernel_shape.per_kernel() as f64).sqrt();
        for w in &mut params.kernels {
            *w = rng.gen_range(-bound..bound) as f32;
        }
        params.pool_min_w.fill(1.0);
        params.pool_max_w.fill(1.0);
        Ok(params)
    }

    pub fn n_kernels(&self) -> usize {
        self.kernel_shape.count
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.kernel_shape.count;
        if self.kernels.len() != self.kernel_shape.len()
            || self.conv_bias.len() != n
            || self.pool_min_w.len() != n
            || self.pool_max_w.len() != n
        {
            return Err(Error::Shape(format!(
                "parameter vectors do not match {n} kernels of shape {:?}",
                self.kernel_shape
            )));
        }
        if !self.iter_values().all(f32::is_finite) {
            return Err(Error::Argument("model parameters must be finite".into()));
        }
        Ok(())
    }

    /// Trainable parameter count: `N·C·h·w + N + 2N + 1`.
    pub fn param_count(&self) -> usize {
        let n = self.kernel_shape.count;
        self.kernel_shape.len() + n + 2 * n + 1
    }

    /// Every parameter in serialization order.
    pub fn iter_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.kernels
            .iter()
            .chain(&self.conv_bias)
            .chain(&self.pool_min_w)
            .chain(&self.pool_max_w)
            .chain(std::iter::once(&self.pool_bias))
            .copied()
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut f32> + '_ {
        self.kernels
            .iter_mut()
            .chain(&mut self.conv_bias)
            .chain(&mut self.pool_min_w)
            .chain(&mut self.pool_max_w)
            .chain(std::iter::once(&mut self.pool_bias))
    }

    /// Scores a 235×235×3 patch.
    pub fn forward(&self, patch: &ImageTensor) -> Result<SharpnessScore> {
        if (patch.height(), patch.width(), patch.channels())
            != (CROP_SIZE, CROP_SIZE, self.kernel_shape.channels)
        {
            return Err(Error::Shape(format!(
                "model input must be {CROP_SIZE}x{CROP_SIZE}x{}, got {}x{}x{}",
                self.kernel_shape.channels,
                patch.height(),
                patch.width(),
                patch.channels()
            )));
        }
        self.score_patch(patch)
    }

    /// Scores a patch of any size the kernels fit into.
    pub fn score_patch(&self, patch: &ImageTensor) -> Result<SharpnessScore> {
        self.score_region(patch, 0, 0, patch.height(), patch.width())
    }

    /// Scores the `height × width` window of `image` anchored at `(top, left)`
    /// without materializing an unpadded copy.
    pub fn score_region(
        &self,
        image: &ImageTensor,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<SharpnessScore> {
        let padded = self.padded_input(image, top, left, height, width)?;
        let trace = self.trace_padded(&padded, &PackedKernels::new(&self.kernels, self.kernel_shape))?;
        Ok(SharpnessScore { value: trace.score })
    }

    /// Convolution responses for a patch, before pooling.
    pub fn responses(&self, patch: &ImageTensor) -> Result<ResponseGrid> {
        let padded = self.padded_input(patch, 0, 0, patch.height(), patch.width())?;
        Ok(conv2d_valid(
            &padded,
            &PackedKernels::new(&self.kernels, self.kernel_shape),
            &self.conv_bias,
            CONV_STRIDE,
        ))
    }

    pub(crate) fn padded_input(
        &self,
        image: &ImageTensor,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<ImageTensor> {
        if image.channels() != self.kernel_shape.channels {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                image.channels(),
                self.kernel_shape.channels
            )));
        }
        if height + 2 * CONV_PADDING < self.kernel_shape.height
            || width + 2 * CONV_PADDING < self.kernel_shape.width
        {
            return Err(Error::Dimension(format!(
                "{height}x{width} input is smaller than the {}x{} kernel",
                self.kernel_shape.height, self.kernel_shape.width
            )));
        }
        image.padded_crop(top, left, height, width, CONV_PADDING)
    }

    pub(crate) fn trace_padded(
        &self,
        padded: &ImageTensor,
        packed: &PackedKernels,
    ) -> Result<ForwardTrace> {
        let grid = conv2d_valid(padded, packed, &self.conv_bias, CONV_STRIDE);
        let extrema = channel_min_max(&grid)?;
        let score = self.pool(&extrema);
        Ok(ForwardTrace {
            score,
            extrema,
            cols: grid.cols(),
        })
    }

    pub(crate) fn packed_kernels(&self) -> PackedKernels {
        PackedKernels::new(&self.kernels, self.kernel_shape)
    }

    fn pool(&self, extrema: &ChannelExtrema) -> f64 {
        let mut y = f64::from(self.pool_bias);
        for n in 0..self.kernel_shape.count {
            y += f64::from(self.pool_min_w[n]) * f64::from(extrema.min[n])
                + f64::from(self.pool_max_w[n]) * f64::from(extrema.max[n]);
        }
        y
    }

    /// Little-endian weight file:
    ///
    /// | bytes | field                                    |
    /// |-------|------------------------------------------|
    /// | 4     | magic `FLNN`                             |
    /// | 2     | format version (1)                       |
    /// | 2     | kernel count N                           |
    /// | 1+1+1 | kernel height, width, input channels     |
    /// | 1     | loss tag (0 = PLCC, 1 = MSE)             |
    /// | 4·P   | `f32` kernels, conv bias, min weights, max weights, pooling bias |
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let s = self.kernel_shape;
        let mut out = Vec::with_capacity(WEIGHT_HEADER_LEN + 4 * self.param_count());
        out.extend_from_slice(&WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(s.count as u16).to_le_bytes());
        out.extend_from_slice(&[
            s.height as u8,
            s.width as u8,
            s.channels as u8,
            self.trained_with.tag(),
        ]);
        for v in self.iter_values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < WEIGHT_HEADER_LEN {
            return Err(Error::Format(format!(
                "truncated header: {} of {WEIGHT_HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        if bytes[..4] != WEIGHT_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {WEIGHT_VERSION}"
            )));
        }
        let shape = KernelShape {
            count: usize::from(u16::from_le_bytes([bytes[6], bytes[7]])),
            height: usize::from(bytes[8]),
            width: usize::from(bytes[9]),
            channels: usize::from(bytes[10]),
        };
        let trained_with = LossKind::from_tag(bytes[11])
            .ok_or_else(|| Error::Format(format!("unknown loss tag {}", bytes[11])))?;
        let mut params =
            Self::zeros_with_shape(shape).map_err(|e| Error::Format(e.to_string()))?;
        params.trained_with = trained_with;

        let body = &bytes[WEIGHT_HEADER_LEN..];
        let expected = 4 * params.param_count();
        if body.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} parameter bytes, found {}",
                body.len()
            )));
        }
        for (slot, chunk) in params.values_mut().zip(body.chunks_exact(4)) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(Error::Format("non-finite parameter value".into()));
            }
            *slot = v;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Zero-padded 2D DFT of one kernel, per input channel, DC-centred.
    pub fn kernel_spectrum(&self, kernel_index: usize, fft_size: usize) -> Result<KernelSpectrum> {
        let s = self.kernel_shape;
        if kernel_index >= s.count {
            return Err(Error::Argument(format!(
                "kernel index {kernel_index} out of range for {} kernels",
                s.count
            )));
        }
        if fft_size < s.height.max(s.width) {
            return Err(Error::Argument(format!(
                "fft size {fft_size} is smaller than the {}x{} kernel",
                s.height, s.width
            )));
        }
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(fft_size);
        let n = fft_size;
        let half = n / 2;
        let mut channels = Vec::with_capacity(s.channels);
        for k in 0..s.channels {
            let mut buf = vec![Complex::new(0.0, 0.0); n * n];
            for i in 0..s.height {
                for j in 0..s.width {
                    buf[i * n + j].re = f64::from(self.kernels[s.index(kernel_index, k, i, j)]);
                }
            }
            for row in buf.chunks_exact_mut(n) {
                fft.process(row);
            }
            let mut column = vec![Complex::new(0.0, 0.0); n];
            for c in 0..n {
                for r in 0..n {
                    column[r] = buf[r * n + c];
                }
                fft.process(&mut column);
                for r in 0..n {
                    buf[r * n + c] = column[r];
                }
            }
            // shifted[i] = raw[(i + n - half) % n] puts DC at (half, half).
            let mut magnitude = vec![0.0; n * n];
            let mut phase = vec![0.0; n * n];
            for r in 0..n {
                for c in 0..n {
                    let v = buf[((r + n - half) % n) * n + (c + n - half) % n];
                    magnitude[r * n + c] = v.norm();
                    phase[r * n + c] = v.arg();
                }
            }
            unwrap_phase_from_center(&mut phase, n);
            channels.push(ChannelSpectrum { magnitude, phase });
        }
        Ok(KernelSpectrum {
            fft_size,
            dc_index: half,
            channels,
        })
    }
}

pub const WEIGHT_MAGIC: [u8; 4] = *b"FLNN";
pub const WEIGHT_VERSION: u16 = 1;
pub const WEIGHT_HEADER_LEN: usize = 12;

/// Parameter counts listed in the original model-size table for 1, 2 and 10
/// kernels. They do not follow from the parameter inventory (151/301/1501) and
/// are printed next to computed counts for reference only.
pub const PUBLISHED_PARAM_COUNTS: [(usize, &str); 3] = [(1, "148"), (2, "299"), (10, "1.5K")];

pub fn published_param_count(n_kernels: usize) -> Option<&'static str> {
    PUBLISHED_PARAM_COUNTS
        .iter()
        .find(|(n, _)| *n == n_kernels)
        .map(|(_, s)| *s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSpectrum {
    /// `fft_size × fft_size`, row-major, DC at `(dc_index, dc_index)`.
    pub magnitude: Vec<f64>,
    /// Unwrapped phase in radians, same layout as `magnitude`.
    pub phase: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpectrum {
    pub fft_size: usize,
    pub dc_index: usize,
    pub channels: Vec<ChannelSpectrum>,
}

impl KernelSpectrum {
    /// Writes `<prefix>_c<k>_magnitude.csv` and `<prefix>_c<k>_phase.csv` for
    /// every channel into `dir`.
    pub fn write_csv(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (k, ch) in self.channels.iter().enumerate() {
            for (quantity, grid) in [("magnitude", &ch.magnitude), ("phase", &ch.phase)] {
                let path = dir.as_ref().join(format!("{prefix}_c{k}_{quantity}.csv"));
                let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
                writeln!(
                    out,
                    "# channel={k} quantity={quantity} fft_size={} dc_row={} dc_col={}",
                    self.fft_size, self.dc_index, self.dc_index
                )?;
                for row in grid.chunks_exact(self.fft_size) {
                    let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
                    writeln!(out, "{}", line.join(","))?;
                }
                out.flush()?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

/// Unwraps along the centre row outward from DC, then along every column
/// outward from the centre row.
fn unwrap_phase_from_center(phase: &mut [f64], n: usize) {
    let c = n / 2;
    for j in (c + 1)..n {
        phase[c * n + j] = unwrap_step(phase[c * n + j - 1], phase[c * n + j]);
    }
    for j in (0..c).rev() {
        phase[c * n + j] = unwrap_step(phase[c * n + j + 1], phase[c * n + j]);
    }
    for col in 0..n {
        for r in (c + 1)..n {
            phase[r * n + col] = unwrap_step(phase[(r - 1) * n + col], phase[r * n + col]);
        }
        for r in (0..c).rev() {
            phase[r * n + col] = unwrap_step(phase[(r + 1) * n + col], phase[r * n + col]);
        }
    }
}

fn unwrap_step(prev: f64, current: f64) -> f64 {
    use std::f64::consts::TAU;
    current - TAU * ((current - prev) / TAU).round()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{channel_min_max, conv2d_strided};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(n: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::initialized(n, &mut rng).unwrap();
        for v in p.values_mut() {
            *v += rng.gen_range(-0.5f32..0.5);
        }
        p
    }

    fn random_patch(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn zero_patch_scores_pool_bias() {
        let mut p = random_params(2, 1);
        p.conv_bias.fill(0.0);
        let patch = ImageTensor::zeros(CROP_SIZE, CROP_SIZE, 3).unwrap();
        assert_eq!(p.forward(&patch).unwrap().value, f64::from(p.pool_bias));
    }

    #[test]
    fn zero_pool_weights_score_pool_bias() {
        let mut p = random_params(3, 2);
        p.pool_min_w.fill(0.0);
        p.pool_max_w.fill(0.0);
        let patch = random_patch(3, CROP_SIZE, CROP_SIZE);
        assert_eq!(p.forward(&patch).unwrap().value, f64::from(p.pool_bias));
    }

    #[test]
    fn forward_matches_composed_reference() {
        let p = random_params(2, 11);
        let patch = random_patch(12, CROP_SIZE, CROP_SIZE);
        let grid = conv2d_strided(&patch, &p.kernels, p.kernel_shape, &p.conv_bias, 5, 1).unwrap();
        assert_eq!((grid.rows(), grid.cols()), (47, 47));
        let ext = channel_min_max(&grid).unwrap();
        let mut expected = f64::from(p.pool_bias);
        for n in 0..2 {
            expected += f64::from(p.pool_min_w[n]) * f64::from(ext.min[n])
                + f64::from(p.pool_max_w[n]) * f64::from(ext.max[n]);
        }
        let got = p.forward(&patch).unwrap().value;
        assert!((got - expected).abs() <= 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn forward_rejects_wrong_size() {
        let p = random_params(1, 0);
        let patch = ImageTensor::zeros(234, 235, 3).unwrap();
        assert!(matches!(p.forward(&patch), Err(Error::Shape(_))));
        let gray = ImageTensor::zeros(235, 235, 1).unwrap();
        assert!(matches!(p.forward(&gray), Err(Error::Shape(_))));
    }

    #[test]
    fn affine_in_pool_bias_and_linear_in_pool_weights() {
        let p = random_params(2, 21);
        let patch = random_patch(22, CROP_SIZE, CROP_SIZE);
        let y = p.forward(&patch).unwrap().value;

        let mut shifted = p.clone();
        shifted.pool_bias += 0.5;
        let ys = shifted.forward(&patch).unwrap().value;
        assert!((ys - y - 0.5).abs() < 1e-6);

        let mut scaled = p.clone();
        let alpha = 2.0f32;
        for w in scaled
            .pool_min_w
            .iter_mut()
            .chain(scaled.pool_max_w.iter_mut())
        {
            *w *= alpha;
        }
        scaled.pool_bias *= alpha;
        let ya = scaled.forward(&patch).unwrap().value;
        assert!((ya - 2.0 * y).abs() < 1e-9 * y.abs().max(1.0));
    }

    #[test]
    fn interior_responses_are_shift_equivariant_by_stride() {
        let p = random_params(2, 31);
        let big = random_patch(32, 260, 260);
        let a = big.crop(0, 0, CROP_SIZE, CROP_SIZE).unwrap();
        let b = big.crop(5, 5, CROP_SIZE, CROP_SIZE).unwrap();
        let ga = p.responses(&a).unwrap();
        let gb = p.responses(&b).unwrap();
        // Rows/cols touching the zero padding differ; the interior must agree.
        for r in 1..45 {
            for c in 1..45 {
                for n in 0..2 {
                    assert_eq!(ga.get(r + 1, c + 1, n), gb.get(r, c, n));
                }
            }
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelParams::zeros(1).unwrap().param_count(), 151);
        assert_eq!(ModelParams::zeros(2).unwrap().param_count(), 301);
        assert_eq!(ModelParams::zeros(10).unwrap().param_count(), 1501);
        assert_eq!(published_param_count(1), Some("148"));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = random_params(4, 41);
        p.trained_with = LossKind::Mse;
        let bytes = p.to_bytes().unwrap();
        assert_eq!(bytes.len(), WEIGHT_HEADER_LEN + 4 * p.param_count());
        let q = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(q, p);
        assert!(p.iter_values().zip(q.iter_values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let patch = random_patch(42, CROP_SIZE, CROP_SIZE);
        assert_eq!(
            p.forward(&patch).unwrap().value.to_bits(),
            q.forward(&patch).unwrap().value.to_bits()
        );
    }

    #[test]
    fn golden_minimal_file() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FLNN");
        bytes.extend_from_slice(&[1, 0, 1, 0, 7, 7, 3, 1]);
        for i in 0..147 {
            bytes.extend_from_slice(&(i as f32 * 0.25).to_le_bytes());
        }
        for v in [-0.5f32, 2.0, 3.0, 0.125] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let p = ModelParams::from_bytes(&bytes).unwrap();
        assert_eq!(p.n_kernels(), 1);
        assert_eq!(p.trained_with, LossKind::Mse);
        assert_eq!(p.kernels[146], 36.5);
        assert_eq!(p.kernels[p.kernel_shape.index(0, 1, 2, 3)], (49 + 14 + 3) as f32 * 0.25);
        assert_eq!(p.conv_bias, vec![-0.5]);
        assert_eq!(p.pool_min_w, vec![2.0]);
        assert_eq!(p.pool_max_w, vec![3.0]);
        assert_eq!(p.pool_bias, 0.125);
        assert_eq!(p.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let good = random_params(1, 5).to_bytes().unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&bad_magic), Err(Error::Format(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(ModelParams::from_bytes(&bad_version), Err(Error::Format(_))));

        assert!(matches!(
            ModelParams::from_bytes(&good[..good.len() - 3]),
            Err(Error::Format(_))
        ));
        assert!(matches!(ModelParams::from_bytes(&good[..6]), Err(Error::Format(_))));

        let mut nan = good.clone();
        nan[WEIGHT_HEADER_LEN..WEIGHT_HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(ModelParams::from_bytes(&nan), Err(Error::Format(_))));

        let mut bad_tag = good;
        bad_tag[11] = 9;
        assert!(matches!(ModelParams::from_bytes(&bad_tag), Err(Error::Format(_))));
    }

    #[test]
    fn spectrum_of_zero_and_delta_kernels() {
        let mut p = ModelParams::zeros(2).unwrap();
        let zero = p.kernel_spectrum(0, 16).unwrap();
        assert!(zero.channels.iter().all(|c| c.magnitude.iter().all(|&m| m == 0.0)));

        let idx = p.kernel_shape.index(1, 2, 3, 3);
        p.kernels[idx] = 1.0;
        let delta = p.kernel_spectrum(1, 16).unwrap();
        assert!(delta.channels[2]
            .magnitude
            .iter()
            .all(|&m| (m - 1.0).abs() < 1e-12));
        assert!(p.kernel_spectrum(2, 16).is_err());
        assert!(p.kernel_spectrum(0, 6).is_err());
    }

    #[test]
    fn spectrum_matches_naive_dft() {
        let p = random_params(1, 51);
        let n = 12;
        let spec = p.kernel_spectrum(0, n).unwrap();
        let half = n / 2;
        for k in 0..3 {
            for r in 0..n {
                for c in 0..n {
                    // Frequencies of shifted bin (r, c).
                    let u = (r + n - half) % n;
                    let v = (c + n - half) % n;
                    let (mut re, mut im) = (0.0f64, 0.0f64);
                    for x in 0..n {
                        for y in 0..n {
                            let val = if x < 7 && y < 7 {
                                f64::from(p.kernels[p.kernel_shape.index(0, k, x, y)])
                            } else {
                                0.0
                            };
                            let angle = -std::f64::consts::TAU
                                * ((u * x) as f64 / n as f64 + (v * y) as f64 / n as f64);
                            re += val * angle.cos();
                            im += val * angle.sin();
                        }
                    }
                    let mag = (re * re + im * im).sqrt();
                    assert!((spec.channels[k].magnitude[r * n + c] - mag).abs() < 1e-9);
                    // Unwrapped phase differs from the principal value by 2πm.
                    let diff = spec.channels[k].phase[r * n + c] - im.atan2(re);
                    let m = (diff / std::f64::consts::TAU).round();
                    assert!((diff - m * std::f64::consts::TAU).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn unwrapped_phase_is_continuous_along_axes() {
        let p = random_params(1, 61);
        let spec = p.kernel_spectrum(0, 64).unwrap();
        let n = 64;
        let c = spec.dc_index;
        for ch in &spec.channels {
            for j in 1..n {
                let d = ch.phase[c * n + j] - ch.phase[c * n + j - 1];
                assert!(d.abs() <= std::f64::consts::PI + 1e-12);
            }
            for col in 0..n {
                for r in 1..n {
                    let d = ch.phase[r * n + col] - ch.phase[(r - 1) * n + col];
                    assert!(d.abs() <= std::f64::consts::PI + 1e-12);
                }
            }
        }
    }
}
