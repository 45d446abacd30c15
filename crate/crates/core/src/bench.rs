//! Wall-clock timing of the dense scoring pipeline and scanner throughput
//! arithmetic.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use crate::data::{score_crops_with, Rgb8Tile};
use crate::error::{Error, Result};
use crate::model::{published_param_count, ModelParams};
use crate::CROP_SIZE;

/// Published per-patch time of the 1-kernel model and the CPU it was measured on.
pub const REFERENCE_SECONDS_PER_PATCH: f64 = 0.017;
pub const REFERENCE_HOST: &str = "Intel i9-7920X";
/// Patches per whole-slide image and slides per scanner day used for the
/// throughput estimate.
pub const DEFAULT_PATCHES_PER_WSI: f64 = 2500.0;
pub const DEFAULT_WSI_COUNT: f64 = 300.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub model_tag: String,
    pub patch_height: usize,
    pub patch_width: usize,
    pub runs: usize,
    pub mean_seconds: f64,
    /// Sample standard deviation (zero for a single run).
    pub std_seconds: f64,
    pub samples: Vec<f64>,
    pub host: String,
    pub threads: usize,
    /// Crops scored per run.
    pub positions: usize,
    /// Forward passes counted during the timed runs.
    pub forward_calls: usize,
    /// Score of the last run, to keep the work observable.
    pub last_score: f64,
}

impl TimingReport {
    pub fn min_seconds(&self) -> f64 {
        self.samples.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_seconds(&self) -> f64 {
        self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `run,seconds` rows after a comment line and a summary comment.
    pub fn write_csv(&self, path: impl AsRef<Path>, comment: &str) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# {comment}")?;
        writeln!(
            out,
            "# model={} patch={}x{} threads={} host={} mean={:.9} std={:.9} forward_calls={}",
            self.model_tag,
            self.patch_height,
            self.patch_width,
            self.threads,
            self.host,
            self.mean_seconds,
            self.std_seconds,
            self.forward_calls
        )?;
        writeln!(out, "run,seconds")?;
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(out, "{},{s:.9}", i + 1)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Human-readable summary with the published reference for comparison.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("model", self.model_tag.clone()),
            ("patch", format!("{}x{}x3", self.patch_height, self.patch_width)),
            ("crops per patch", self.positions.to_string()),
            ("runs", self.runs.to_string()),
            ("threads", self.threads.to_string()),
            ("host", self.host.clone()),
            ("mean (s)", format!("{:.6}", self.mean_seconds)),
            ("std (s)", format!("{:.6}", self.std_seconds)),
            ("min (s)", format!("{:.6}", self.min_seconds())),
            ("max (s)", format!("{:.6}", self.max_seconds())),
            ("forward calls", self.forward_calls.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<16} {v}");
        }
        let _ = writeln!(
            s,
            "reference        {REFERENCE_SECONDS_PER_PATCH} s/patch (1 kernel, {REFERENCE_HOST})"
        );
        if self.threads > 1 {
            let _ = writeln!(s, "note             multi-threaded timings are not comparable with the reference");
        }
        s
    }
}

/// Times dense scoring of one pre-decoded 8-bit patch.
///
/// Each run covers byte-to-float conversion, crop extraction, every forward
/// pass and the averaging. One untimed warm-up run precedes the `runs` timed
/// ones. `threads > 1` scores crops on a dedicated pool of that size.
pub fn time_patch_scoring(
    params: &ModelParams,
    patch: &Rgb8Tile,
    runs: usize,
    threads: usize,
    host: &str,
) -> Result<TimingReport> {
    if runs == 0 {
        return Err(Error::Argument("need at least one timed run".into()));
    }
    if threads == 0 {
        return Err(Error::Argument("thread count must be positive".into()));
    }
    params.validate()?;
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Argument(format!("cannot start thread pool: {e}")))?,
        )
    } else {
        None
    };
    let calls = AtomicUsize::new(0);
    let run_once = || -> Result<(f64, usize)> {
        let tile = patch.to_tensor()?;
        let crops = score_crops_with(&tile, pool.as_ref(), |img, top, left| {
            calls.fetch_add(1, Ordering::Relaxed);
            Ok(params.score_region(img, top, left, CROP_SIZE, CROP_SIZE)?.value)
        })?;
        Ok((crops.mean(), crops.len()))
    };

    run_once()?;
    calls.store(0, Ordering::Relaxed);

    let mut samples = Vec::with_capacity(runs);
    let (mut last_score, mut positions) = (f64::NAN, 0);
    for _ in 0..runs {
        let start = Instant::now();
        let (score, n) = run_once()?;
        samples.push(start.elapsed().as_secs_f64());
        last_score = std::hint::black_box(score);
        positions = n;
    }
    let (mean, std) = mean_std(&samples);
    Ok(TimingReport {
        model_tag: format!("{}-kernel", params.n_kernels()),
        patch_height: patch.height,
        patch_width: patch.width,
        runs,
        mean_seconds: mean,
        std_seconds: std,
        samples,
        host: host.to_string(),
        threads,
        positions,
        forward_calls: calls.load(Ordering::Relaxed),
        last_score,
    })
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Hours a scanner needs to score `n_wsi` slides of `patches_per_wsi` patches.
pub fn estimate_scanner_throughput(
    patches_per_wsi: f64,
    n_wsi: f64,
    sec_per_patch: f64,
) -> Result<f64> {
    for (name, v) in [
        ("patches per WSI", patches_per_wsi),
        ("WSI count", n_wsi),
        ("seconds per patch", sec_per_patch),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Argument(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(patches_per_wsi * n_wsi * sec_per_patch / 3600.0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSize {
    pub param_count: usize,
    pub file_bytes: usize,
    /// Count printed in the original publication, where one exists.
    pub published: Option<&'static str>,
}

impl std::fmt::Display for ModelSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} parameters, {} bytes on disk", self.param_count, self.file_bytes)?;
        if let Some(p) = self.published {
            write!(f, " (published: {p})")?;
        }
        Ok(())
    }
}

pub fn model_size_report(params: &ModelParams) -> Result<ModelSize> {
    Ok(ModelSize {
        param_count: params.param_count(),
        file_bytes: params.to_bytes()?.len(),
        published: published_param_count(params.n_kernels()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WEIGHT_HEADER_LEN;

    fn tile(side: usize) -> Rgb8Tile {
        Rgb8Tile {
            height: side,
            width: side,
            bytes: (0..side * side * 3).map(|i| (i * 7 % 256) as u8).collect(),
        }
    }

    #[test]
    fn throughput_examples() {
        let h = estimate_scanner_throughput(2500.0, 300.0, 0.017).unwrap();
        assert!((h - 3.54).abs() < 0.005, "{h}");
        let h = estimate_scanner_throughput(2500.0, 300.0, 0.355).unwrap();
        assert!((h - 73.96).abs() < 0.005, "{h}");
        assert_eq!(estimate_scanner_throughput(1.0, 1.0, 3600.0).unwrap(), 1.0);
        for bad in [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, f64::NAN)] {
            assert!(estimate_scanner_throughput(bad.0, bad.1, bad.2).is_err());
        }
    }

    #[test]
    fn throughput_is_linear() {
        let base = estimate_scanner_throughput(10.0, 20.0, 0.5).unwrap();
        for (k, args) in [
            (3.0, (30.0, 20.0, 0.5)),
            (3.0, (10.0, 60.0, 0.5)),
            (3.0, (10.0, 20.0, 1.5)),
        ] {
            let v = estimate_scanner_throughput(args.0, args.1, args.2).unwrap();
            assert!((v - k * base).abs() < 1e-12);
        }
    }

    #[test]
    fn single_run_report() {
        let params = ModelParams::zeros(1).unwrap();
        let r = time_patch_scoring(&params, &tile(300), 1, 1, "test").unwrap();
        assert_eq!(r.samples.len(), 1);
        assert_eq!(r.mean_seconds, r.samples[0]);
        assert_eq!(r.std_seconds, 0.0);
        assert_eq!(r.positions, 4);
        assert_eq!(r.forward_calls, 4);
        assert!(time_patch_scoring(&params, &tile(300), 0, 1, "test").is_err());
    }

    #[test]
    fn forward_calls_count_every_timed_crop() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let params = ModelParams::initialized(1, &mut rng).unwrap();
        for threads in [1, 3] {
            let r = time_patch_scoring(&params, &tile(491), 5, threads, "test").unwrap();
            assert_eq!(r.positions, 9);
            assert_eq!(r.forward_calls, 5 * 9);
            assert!(r.min_seconds() <= r.mean_seconds && r.mean_seconds <= r.max_seconds());
            assert_eq!(r.threads, threads);
        }
    }

    #[test]
    fn size_report_matches_format() {
        for (n, count, published) in [(1, 151, "148"), (2, 301, "299"), (10, 1501, "1.5K")] {
            let r = model_size_report(&ModelParams::zeros(n).unwrap()).unwrap();
            assert_eq!(r.param_count, count);
            assert_eq!(r.file_bytes, WEIGHT_HEADER_LEN + 4 * count);
            assert_eq!(r.published, Some(published));
        }
    }

    #[test]
    fn table_mentions_reference() {
        let params = ModelParams::zeros(1).unwrap();
        let r = time_patch_scoring(&params, &tile(235), 2, 1, "box").unwrap();
        let t = r.table();
        assert!(t.contains("0.017"));
        assert!(t.contains("box"));
    }
}
