//! Dense score lattices over whole scans and their colour overlays.

use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{save_tile, score_crops};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{to_grayscale, ImageTensor};
use crate::{CROP_SIZE, DENSE_STRIDE};

/// Default overlay opacity.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Default score range for absolute maps of MSE-trained models.
pub const DEFAULT_ABSOLUTE_RANGE: (f64, f64) = (0.0, 12.0);

/// Crop scores on the dense sampling lattice of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    /// Row-major, `rows × cols`.
    pub scores: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Top pixel of each crop row.
    pub row_offsets: Vec<usize>,
    /// Left pixel of each crop column.
    pub col_offsets: Vec<usize>,
    pub crop_size: usize,
    pub stride: usize,
    pub scan_height: usize,
    pub scan_width: usize,
}

impl HeatmapGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols + col]
    }

    /// Same lattice with different values.
    pub fn with_scores(&self, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != self.scores.len() {
            return Err(Error::Shape(format!(
                "{} values for a {}x{} grid",
                scores.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(Self {
            scores,
            ..self.clone()
        })
    }

    /// Writes `row,col,top,left,score[,normalized]`.
    pub fn write_csv(
        &self,
        path: impl AsRef<Path>,
        normalized: Option<&HeatmapGrid>,
        comment: &str,
    ) -> Result<()> {
        if let Some(n) = normalized {
            if n.scores.len() != self.scores.len() {
                return Err(Error::Shape("normalized grid does not match".into()));
            }
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# {comment}")?;
        write!(out, "row,col,top,left,score")?;
        if normalized.is_some() {
            write!(out, ",normalized")?;
        }
        writeln!(out)?;
        for r in 0..self.rows {
            for c in 0..self.cols {
                write!(
                    out,
                    "{r},{c},{},{},{}",
                    self.row_offsets[r],
                    self.col_offsets[c],
                    self.get(r, c)
                )?;
                if let Some(n) = normalized {
                    write!(out, ",{}", n.get(r, c))?;
                }
                writeln!(out)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Scores every dense crop of `scan`.
pub fn score_scan(
    params: &ModelParams,
    scan: &ImageTensor,
    pool: Option<&rayon::ThreadPool>,
) -> Result<HeatmapGrid> {
    let crops = score_crops(params, scan, pool)?;
    Ok(HeatmapGrid {
        rows: crops.row_offsets.len(),
        cols: crops.col_offsets.len(),
        scores: crops.scores,
        row_offsets: crops.row_offsets,
        col_offsets: crops.col_offsets,
        crop_size: CROP_SIZE,
        stride: DENSE_STRIDE,
        scan_height: scan.height(),
        scan_width: scan.width(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode {
    /// Min-max over this scan; a constant grid maps to 0.5.
    PerScan,
    /// Fixed score range, clamped.
    Absolute { lo: f64, hi: f64 },
}

impl FromStr for NormMode {
    type Err = Error;

    /// `per-scan`, `absolute` (default range) or `absolute:LO:HI`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "per-scan" | "per_scan" | "perscan" => Ok(Self::PerScan),
            "absolute" => Ok(Self::Absolute {
                lo: DEFAULT_ABSOLUTE_RANGE.0,
                hi: DEFAULT_ABSOLUTE_RANGE.1,
            }),
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                if let ["absolute", lo, hi] = parts.as_slice() {
                    let parse = |v: &str| {
                        v.parse::<f64>()
                            .map_err(|_| Error::Argument(format!("bad range bound {v:?}")))
                    };
                    return Ok(Self::Absolute {
                        lo: parse(lo)?,
                        hi: parse(hi)?,
                    });
                }
                Err(Error::Argument(format!("unknown normalization mode {s:?}")))
            }
        }
    }
}

/// Maps grid scores into `[0, 1]`.
pub fn normalize_grid(grid: &HeatmapGrid, mode: NormMode) -> Result<HeatmapGrid> {
    if grid.scores.is_empty() {
        return Err(Error::Argument("empty heatmap grid".into()));
    }
    if let Some(bad) = grid.scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("grid contains {bad}")));
    }
    let scores = match mode {
        NormMode::PerScan => {
            let lo = grid.scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = grid.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                grid.scores.iter().map(|v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.5; grid.scores.len()]
            }
        }
        NormMode::Absolute { lo, hi } => {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Argument(format!(
                    "absolute range needs lo < hi, got ({lo}, {hi})"
                )));
            }
            grid.scores
                .iter()
                .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
                .collect()
        }
    };
    grid.with_scores(scores)
}

/// Maps a value in `[0, 1]` to RGB.
pub type Colormap = fn(f64) -> [f64; 3];

const JET_STOPS: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 1.0]),
    (0.25, [0.0, 1.0, 1.0]),
    (0.5, [0.0, 1.0, 0.0]),
    (0.75, [1.0, 1.0, 0.0]),
    (1.0, [1.0, 0.0, 0.0]),
];

/// Blue → cyan → green → yellow → red, linear between stops. Inputs are
/// clamped to `[0, 1]`.
pub fn jet(value: f64) -> [f64; 3] {
    let v = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
    for pair in JET_STOPS.windows(2) {
        let ((x0, c0), (x1, c1)) = (pair[0], pair[1]);
        if v <= x1 {
            let t = (v - x0) / (x1 - x0);
            return [0, 1, 2].map(|k| c0[k] + t * (c1[k] - c0[k]));
        }
    }
    JET_STOPS[4].1
}

/// Per-pixel interpolation weights along one axis: `(lower index, upper index, t)`.
///
/// Samples sit at `offset + crop/2`; pixels outside the outermost samples take
/// the edge value.
fn axis_weights(len: usize, offsets: &[usize], crop: usize) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = offsets.iter().map(|&o| (o + crop / 2) as f64).collect();
    let last = centers.len() - 1;
    let mut k = 0;
    (0..len)
        .map(|x| {
            let x = x as f64;
            if x <= centers[0] {
                return (0, 0, 0.0);
            }
            if x >= centers[last] {
                return (last, last, 0.0);
            }
            while centers[k + 1] <= x {
                k += 1;
            }
            (k, k + 1, (x - centers[k]) / (centers[k + 1] - centers[k]))
        })
        .collect()
}

/// Upsamples a grid to its scan size with crop-centre bilinear interpolation.
pub fn upsample(grid: &HeatmapGrid) -> Vec<f64> {
    let ys = axis_weights(grid.scan_height, &grid.row_offsets, grid.crop_size);
    let xs = axis_weights(grid.scan_width, &grid.col_offsets, grid.crop_size);
    let mut out = Vec::with_capacity(ys.len() * xs.len());
    for &(r0, r1, ty) in &ys {
        for &(c0, c1, tx) in &xs {
            let top = (1.0 - tx) * grid.get(r0, c0) + tx * grid.get(r0, c1);
            let bottom = (1.0 - tx) * grid.get(r1, c0) + tx * grid.get(r1, c1);
            out.push((1.0 - ty) * top + ty * bottom);
        }
    }
    out
}

/// Colours a normalized grid and blends it over the grayscale scan:
/// `alpha · colour + (1 − alpha) · gray`.
pub fn render_overlay(
    normalized: &HeatmapGrid,
    scan: &ImageTensor,
    colormap: Colormap,
    alpha: f64,
) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if scan.height() != normalized.scan_height || scan.width() != normalized.scan_width {
        return Err(Error::Dimension(format!(
            "grid was computed on a {}x{} scan, got {}x{}",
            normalized.scan_height,
            normalized.scan_width,
            scan.height(),
            scan.width()
        )));
    }
    if normalized.rows != normalized.row_offsets.len()
        || normalized.cols != normalized.col_offsets.len()
        || normalized.scores.len() != normalized.rows * normalized.cols
        || normalized.scores.is_empty()
    {
        return Err(Error::Shape("inconsistent heatmap grid".into()));
    }
    if let Some(v) = normalized.scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Argument(format!(
            "grid must be normalized to [0, 1], found {v}"
        )));
    }
    let gray = to_grayscale(scan)?;
    let values = upsample(normalized);
    let mut data = Vec::with_capacity(values.len() * 3);
    for (v, &g) in values.iter().zip(gray.data()) {
        let color = colormap(*v);
        let g = f64::from(g);
        for c in color {
            data.push((alpha * c + (1.0 - alpha) * g) as f32);
        }
    }
    ImageTensor::new(scan.height(), scan.width(), 3, data)
}

/// Writes an overlay as an 8-bit RGB PNG.
pub fn write_png(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return Err(Error::Argument(format!(
            "heatmaps are written as PNG, got {}",
            path.display()
        )));
    }
    save_tile(image, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize, scores: Vec<f64>) -> HeatmapGrid {
        HeatmapGrid {
            scores,
            rows,
            cols,
            row_offsets: (0..rows).map(|r| r * DENSE_STRIDE).collect(),
            col_offsets: (0..cols).map(|c| c * DENSE_STRIDE).collect(),
            crop_size: CROP_SIZE,
            stride: DENSE_STRIDE,
            scan_height: (rows - 1) * DENSE_STRIDE + CROP_SIZE,
            scan_width: (cols - 1) * DENSE_STRIDE + CROP_SIZE,
        }
    }

    #[test]
    fn scan_lattice_sizes() {
        let params = ModelParams::zeros(1).unwrap();
        for (side, n) in [(235, 1), (491, 3), (1024, 8)] {
            let scan = ImageTensor::filled(side, side, 3, 0.3).unwrap();
            let g = score_scan(&params, &scan, None).unwrap();
            assert_eq!((g.rows, g.cols), (n, n), "side {side}");
        }
        let small = ImageTensor::filled(200, 300, 3, 0.3).unwrap();
        assert!(score_scan(&params, &small, None).is_err());
    }

    #[test]
    fn constant_scan_gives_constant_grid() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let params = ModelParams::initialized(2, &mut rng).unwrap();
        let scan = ImageTensor::filled(491, 400, 3, 0.6).unwrap();
        let g = score_scan(&params, &scan, None).unwrap();
        assert!(g.scores.iter().all(|&v| v == g.scores[0]));
    }

    #[test]
    fn normalization_examples() {
        let g = grid(1, 3, vec![2.0, 4.0, 6.0]);
        assert_eq!(normalize_grid(&g, NormMode::PerScan).unwrap().scores, vec![0.0, 0.5, 1.0]);
        let flat = grid(1, 3, vec![7.0; 3]);
        assert_eq!(normalize_grid(&flat, NormMode::PerScan).unwrap().scores, vec![0.5; 3]);
        let g = grid(2, 2, vec![0.0, 6.0, 12.0, 15.0]);
        let abs = NormMode::Absolute { lo: 0.0, hi: 12.0 };
        assert_eq!(normalize_grid(&g, abs).unwrap().scores, vec![0.0, 0.5, 1.0, 1.0]);
        for (lo, hi) in [(1.0, 1.0), (2.0, 1.0)] {
            assert!(normalize_grid(&g, NormMode::Absolute { lo, hi }).is_err());
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("per-scan".parse::<NormMode>().unwrap(), NormMode::PerScan);
        assert_eq!(
            "absolute".parse::<NormMode>().unwrap(),
            NormMode::Absolute { lo: 0.0, hi: 12.0 }
        );
        assert_eq!(
            "absolute:-1:3.5".parse::<NormMode>().unwrap(),
            NormMode::Absolute { lo: -1.0, hi: 3.5 }
        );
        assert!("log".parse::<NormMode>().is_err());
    }

    #[test]
    fn jet_control_points() {
        for (x, c) in JET_STOPS {
            assert_eq!(jet(x), c);
        }
        assert_eq!(jet(0.125), [0.0, 0.5, 1.0]);
        assert_eq!(jet(0.875), [1.0, 0.5, 0.0]);
        assert_eq!(jet(-3.0), jet(0.0));
        assert_eq!(jet(7.0), jet(1.0));
    }

    #[test]
    fn upsample_places_values_at_crop_centres() {
        let g = grid(1, 2, vec![0.0, 1.0]);
        let up = upsample(&g);
        assert_eq!(up.len(), 235 * 363);
        // Centres at 117 and 245.
        assert_eq!(up[0], 0.0);
        assert_eq!(up[117], 0.0);
        assert_eq!(up[245], 1.0);
        assert_eq!(up[362], 1.0);
        assert!((up[181] - 0.5).abs() < 1e-15);
        assert!((up[363 * 100 + 149] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn overlay_alpha_extremes() {
        let g = grid(2, 2, vec![1.0; 4]);
        let scan = ImageTensor::new(
            g.scan_height,
            g.scan_width,
            3,
            (0..g.scan_height * g.scan_width * 3).map(|i| (i % 251) as f32 / 250.0).collect(),
        )
        .unwrap();
        let gray = to_grayscale(&scan).unwrap().replicate_channels(3).unwrap();
        assert_eq!(render_overlay(&g, &scan, jet, 0.0).unwrap(), gray);
        let full = render_overlay(&g, &scan, jet, 1.0).unwrap();
        assert!(full.data().chunks_exact(3).all(|px| px == [1.0, 0.0, 0.0]));
        let mid = grid(2, 2, vec![0.5; 4]);
        let green = render_overlay(&mid, &scan, jet, 1.0).unwrap();
        assert!(green.data().chunks_exact(3).all(|px| px == [0.0, 1.0, 0.0]));
    }

    #[test]
    fn overlay_rejects_bad_inputs() {
        let g = grid(1, 1, vec![0.5]);
        let scan = ImageTensor::filled(235, 235, 3, 0.5).unwrap();
        assert!(render_overlay(&g, &scan, jet, 1.5).is_err());
        assert!(render_overlay(&g, &scan, jet, -0.1).is_err());
        let raw = grid(1, 1, vec![3.0]);
        assert!(render_overlay(&raw, &scan, jet, 0.5).is_err());
        let other = ImageTensor::filled(240, 235, 3, 0.5).unwrap();
        assert!(render_overlay(&g, &other, jet, 0.5).is_err());
    }

    proptest::proptest! {
        #[test]
        fn per_scan_hits_both_ends(values in proptest::collection::vec(-50.0f64..50.0, 2..12)) {
            let g = grid(1, values.len(), values.clone());
            let n = normalize_grid(&g, NormMode::PerScan).unwrap();
            let distinct = values.iter().any(|&v| v != values[0]);
            proptest::prop_assume!(distinct);
            proptest::prop_assert!(n.scores.contains(&0.0));
            proptest::prop_assert!(n.scores.contains(&1.0));
        }

        #[test]
        fn overlay_stays_in_unit_range(
            values in proptest::collection::vec(0.0f64..=1.0, 4),
            alpha in 0.0f64..=1.0,
            shade in 0.0f32..=1.0,
        ) {
            let g = grid(2, 2, values);
            let scan = ImageTensor::filled(g.scan_height, g.scan_width, 3, shade).unwrap();
            let out = render_overlay(&g, &scan, jet, alpha).unwrap();
            proptest::prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
