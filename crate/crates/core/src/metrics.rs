//! Image metrics, input-view bias, utilization statistics and timing.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::geometry::CameraPose;
use crate::image::Image;
use crate::objective::PerceptualProxy;

pub const HISTOGRAM_BINS: usize = 32;
pub const DEFAULT_TAU: f64 = 1.0 / 255.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!(
            "{}×{} vs {}×{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| f64::from(x - y).powi(2)).sum();
    Ok(s / a.data.len() as f64)
}

/// `10·log10(1 / MSE)`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window(k: usize) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..k)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid window positions and channels. The window shrinks
/// to the image size for images smaller than 11 pixels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    let k = SSIM_WINDOW.min(w).min(h);
    let win = gaussian_window(k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for ch in 0..3 {
        let get = |img: &Image, x: usize, y: usize| f64::from(img.data[(y * w + x) * 3 + ch]);
        // separable filtering: rows first, then columns
        let mut rows = vec![[0.0f64; 5]; h * ow];
        for y in 0..h {
            for x in 0..ow {
                let mut acc = [0.0; 5];
                for (i, wi) in win.iter().enumerate() {
                    let (p, q) = (get(a, x + i, y), get(b, x + i, y));
                    acc[0] += wi * p;
                    acc[1] += wi * q;
                    acc[2] += wi * p * p;
                    acc[3] += wi * q * q;
                    acc[4] += wi * p * q;
                }
                rows[y * ow + x] = acc;
            }
        }
        for y in 0..oh {
            for x in 0..ow {
                let mut m = [0.0; 5];
                for (i, wi) in win.iter().enumerate() {
                    let r = &rows[(y + i) * ow + x];
                    for j in 0..5 {
                        m[j] += wi * r[j];
                    }
                }
                let (mu_a, mu_b) = (m[0], m[1]);
                let va = m[2] - mu_a * mu_a;
                let vb = m[3] - mu_b * mu_b;
                let cov = m[4] - mu_a * mu_b;
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (3 * oh * ow) as f64)
}

/// Conditioning-view mean, novel-view mean and their difference.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub cond: f64,
    pub novel: f64,
    pub delta: f64,
    /// Views whose value was `+∞` and left out of the mean.
    pub excluded: usize,
}

impl Gap {
    fn new(cond: (f64, usize), novel: (f64, usize)) -> Self {
        let delta = if cond.0 == novel.0 { 0.0 } else { cond.0 - novel.0 };
        Gap {
            cond: cond.0,
            novel: novel.0,
            delta,
            excluded: cond.1 + novel.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub psnr: Gap,
    pub ssim: Gap,
    pub perceptual: Gap,
    pub cond_views: Vec<usize>,
    pub novel_views: Vec<usize>,
}

/// Mean of finite values plus the count of infinite ones; `+∞` if every
/// value is infinite.
fn finite_mean(values: &[f64]) -> (f64, usize) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = values.len() - finite.len();
    if finite.is_empty() {
        (f64::INFINITY, excluded)
    } else {
        (finite.iter().sum::<f64>() / finite.len() as f64, excluded)
    }
}

/// Per-view metrics averaged separately over conditioning and novel views.
pub fn input_view_bias(
    renders: &[Image],
    targets: &[Image],
    cond_indices: &[usize],
    proxy: &PerceptualProxy,
) -> Result<BiasReport> {
    if renders.len() != targets.len() {
        return Err(Error::Shape(format!("{} renders vs {} targets", renders.len(), targets.len())));
    }
    if cond_indices.is_empty() {
        return Err(Error::EmptyPartition("conditioning"));
    }
    if cond_indices.iter().any(|&i| i >= renders.len()) {
        return Err(Error::Shape("conditioning index out of range".into()));
    }
    let cond: Vec<usize> = (0..renders.len()).filter(|i| cond_indices.contains(i)).collect();
    let novel: Vec<usize> = (0..renders.len()).filter(|i| !cond_indices.contains(i)).collect();
    if novel.is_empty() {
        return Err(Error::EmptyPartition("novel"));
    }
    let mut per_view = Vec::with_capacity(renders.len());
    for (r, t) in renders.iter().zip(targets) {
        per_view.push([psnr(r, t)?, ssim(r, t)?, proxy.distance(r, t)?]);
    }
    let part = |idx: &[usize], m: usize| finite_mean(&idx.iter().map(|&i| per_view[i][m]).collect::<Vec<_>>());
    Ok(BiasReport {
        psnr: Gap::new(part(&cond, 0), part(&novel, 0)),
        ssim: Gap::new(part(&cond, 1), part(&novel, 1)),
        perceptual: Gap::new(part(&cond, 2), part(&novel, 2)),
        cond_views: cond,
        novel_views: novel,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    /// Opacity counts over `[0, 1]` in equal bins; opacity 1 lands in the
    /// last bin.
    pub histogram: Vec<u64>,
    pub tau: f64,
    pub low_opacity_fraction: f64,
    /// Mean decoded center per query.
    pub query_centers: Vec<[f64; 3]>,
    /// Those centers projected into `pose`, when given.
    pub query_projections: Option<Vec<[f64; 2]>>,
    /// Mean distance of a query's Gaussians to their centroid.
    pub locality_radius: Vec<f64>,
    pub mean_locality_radius: f64,
}

pub fn opacity_bin(alpha: f64) -> usize {
    ((alpha.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

pub fn utilization(gs: &GaussianSet, tau: f64, pose: Option<&CameraPose>) -> UtilizationReport {
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let mut low = 0usize;
    for g in &gs.gaussians {
        let a = f64::from(g.opacity);
        histogram[opacity_bin(a)] += 1;
        if a < tau {
            low += 1;
        }
    }
    let low_opacity_fraction = if gs.is_empty() { 0.0 } else { low as f64 / gs.len() as f64 };
    let mut query_centers = Vec::new();
    let mut locality_radius = Vec::new();
    if let Some(prov) = &gs.provenance {
        let nq = prov.iter().map(|&q| q as usize + 1).max().unwrap_or(0);
        let mut sums = vec![[0.0f64; 3]; nq];
        let mut counts = vec![0usize; nq];
        for (g, &q) in gs.gaussians.iter().zip(prov) {
            for a in 0..3 {
                sums[q as usize][a] += f64::from(g.mu[a]);
            }
            counts[q as usize] += 1;
        }
        query_centers = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { [0.0; 3] } else { s.map(|v| v / c as f64) })
            .collect();
        let mut rad = vec![0.0f64; nq];
        for (g, &q) in gs.gaussians.iter().zip(prov) {
            let c = query_centers[q as usize];
            rad[q as usize] += (0..3).map(|a| (f64::from(g.mu[a]) - c[a]).powi(2)).sum::<f64>().sqrt();
        }
        locality_radius = rad
            .iter()
            .zip(&counts)
            .map(|(r, &c)| if c == 0 { 0.0 } else { r / c as f64 })
            .collect();
    }
    let mean_locality_radius = if locality_radius.is_empty() {
        0.0
    } else {
        locality_radius.iter().sum::<f64>() / locality_radius.len() as f64
    };
    let query_projections = pose.map(|p| {
        query_centers
            .iter()
            .map(|c| {
                let pr = p.project(*c);
                [pr.u, pr.v]
            })
            .collect()
    });
    UtilizationReport {
        histogram,
        tau,
        low_opacity_fraction,
        query_centers,
        query_projections,
        locality_radius,
        mean_locality_radius,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub runs_s: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn timing_report(runs: Vec<f64>) -> TimingReport {
    TimingReport {
        median_s: median(&runs),
        min_s: runs.iter().copied().fold(f64::INFINITY, f64::min),
        max_s: runs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        runs_s: runs,
    }
}

/// Median wall-clock of `f` over `n_runs` calls after one untimed warm-up.
pub fn time_reconstruction<T>(n_runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<TimingReport> {
    f()?;
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs.max(1) {
        let t0 = Instant::now();
        f()?;
        runs.push(t0.elapsed().as_secs_f64());
    }
    Ok(timing_report(runs))
}

/// Minimal raster plots written as PNG.
pub mod plot {
    use super::*;

    const BG: [f32; 3] = [1.0, 1.0, 1.0];
    const FG: [f32; 3] = [0.15, 0.3, 0.7];
    const AXIS: [f32; 3] = [0.0, 0.0, 0.0];

    struct Canvas {
        img: Image,
    }

    impl Canvas {
        fn new(w: usize, h: usize) -> Self {
            let mut img = Image::filled(w, h, 0.0);
            img.data.chunks_mut(3).for_each(|p| p.copy_from_slice(&BG));
            Canvas { img }
        }

        fn set(&mut self, x: i64, y: i64, c: [f32; 3]) {
            let (w, h) = (self.img.width as i64, self.img.height as i64);
            if (0..w).contains(&x) && (0..h).contains(&y) {
                let i = ((y * w + x) * 3) as usize;
                self.img.data[i..i + 3].copy_from_slice(&c);
            }
        }

        fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [f32; 3]) {
            for y in y0.min(y1)..=y0.max(y1) {
                for x in x0.min(x1)..=x0.max(x1) {
                    self.set(x, y, c);
                }
            }
        }

        fn line(&mut self, a: (i64, i64), b: (i64, i64), c: [f32; 3]) {
            let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
            for i in 0..=n {
                let x = a.0 + (b.0 - a.0) * i / n;
                let y = a.1 + (b.1 - a.1) * i / n;
                self.set(x, y, c);
            }
        }

        fn axes(&mut self, margin: i64) {
            let (w, h) = (self.img.width as i64, self.img.height as i64);
            self.line((margin, h - margin), (w - margin, h - margin), AXIS);
            self.line((margin, margin), (margin, h - margin), AXIS);
        }
    }

    /// Bar chart of the opacity histogram, log-scaled counts.
    pub fn histogram(report: &UtilizationReport, path: &Path) -> Result<()> {
        let (w, h, m) = (320usize, 200usize, 10i64);
        let mut c = Canvas::new(w, h);
        c.axes(m);
        let max = report.histogram.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bw = (w as i64 - 2 * m) / report.histogram.len().max(1) as i64;
        for (i, &n) in report.histogram.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let frac = (1.0 + n as f64).ln() / (1.0 + max).ln();
            let top = (h as i64 - m) - (frac * (h as i64 - 2 * m) as f64) as i64;
            let x0 = m + 1 + i as i64 * bw;
            c.rect(x0, top, x0 + bw - 2, h as i64 - m - 1, FG);
        }
        c.img.save_png(path)
    }

    /// Query centers projected into an image of the given size.
    pub fn projections(points: &[[f64; 2]], width: usize, height: usize, path: &Path) -> Result<()> {
        let mut c = Canvas::new(width, height);
        for p in points {
            let (x, y) = (p[0].floor() as i64, p[1].floor() as i64);
            c.rect(x - 1, y - 1, x + 1, y + 1, FG);
        }
        c.img.save_png(path)
    }

    /// Polyline of `ys` over evenly spaced x positions.
    pub fn series(ys: &[f64], path: &Path) -> Result<()> {
        let (w, h, m) = (320usize, 200usize, 10i64);
        let mut c = Canvas::new(w, h);
        c.axes(m);
        let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return c.img.save_png(path);
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-9);
        let pts: Vec<(i64, i64)> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let fx = if ys.len() > 1 { i as f64 / (ys.len() - 1) as f64 } else { 0.5 };
                let fy = if y.is_finite() { (y - lo) / span } else { 1.0 };
                let x = m + (fx * (w as i64 - 4 * m) as f64) as i64 + m;
                let y = (h as i64 - 2 * m) - (fy * (h as i64 - 4 * m) as f64) as i64;
                (x, y)
            })
            .collect();
        for win in pts.windows(2) {
            c.line(win[0], win[1], FG);
        }
        for &(x, y) in &pts {
            c.rect(x - 2, y - 2, x + 2, y + 2, FG);
        }
        c.img.save_png(path)
    }
}
