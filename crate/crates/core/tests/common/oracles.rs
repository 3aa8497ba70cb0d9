//! Deliberately naive reimplementations used as test oracles.

use sparsegen::gaussians::GaussianSet;
use sparsegen::image::Image;

pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mut s = 0.0;
    for i in 0..a.data.len() {
        let d = f64::from(a.data[i]) - f64::from(b.data[i]);
        s += d * d;
    }
    let mse = s / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Direct 2-D windowed SSIM, no separability.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    let k = 11.min(a.width).min(a.height);
    let c = (k as f64 - 1.0) / 2.0;
    let mut w2 = vec![vec![0.0; k]; k];
    let mut norm = 0.0;
    for (i, row) in w2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let px = |img: &Image, x: usize, y: usize, ch: usize| f64::from(img.data[(y * img.width + x) * 3 + ch]);
    let mut total = 0.0;
    let mut n = 0usize;
    for ch in 0..3 {
        for y0 in 0..=a.height - k {
            for x0 in 0..=a.width - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let w = w2[i][j] / norm;
                        let (p, q) = (px(a, x0 + j, y0 + i, ch), px(b, x0 + j, y0 + i, ch));
                        ma += w * p;
                        mb += w * q;
                        saa += w * p * p;
                        sbb += w * q * q;
                        sab += w * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    total / n as f64
}

/// Histogram, low-opacity fraction and per-query (center, radius) by
/// grouping indices explicitly.
pub fn utilization(gs: &GaussianSet, tau: f64, bins: usize) -> (Vec<u64>, f64, Vec<([f64; 3], f64)>) {
    let mut hist = vec![0u64; bins];
    let mut low = 0;
    for g in &gs.gaussians {
        let a = f64::from(g.opacity);
        let mut bin = 0;
        while bin + 1 < bins && a >= (bin + 1) as f64 / bins as f64 {
            bin += 1;
        }
        hist[bin] += 1;
        if a < tau {
            low += 1;
        }
    }
    let mut per_query = Vec::new();
    if let Some(prov) = &gs.provenance {
        let nq = prov.iter().max().map_or(0, |m| *m as usize + 1);
        for q in 0..nq {
            let members: Vec<[f64; 3]> = gs
                .gaussians
                .iter()
                .zip(prov)
                .filter(|(_, p)| **p as usize == q)
                .map(|(g, _)| g.mu.map(f64::from))
                .collect();
            if members.is_empty() {
                per_query.push(([0.0; 3], 0.0));
                continue;
            }
            let n = members.len() as f64;
            let center = [0, 1, 2].map(|a| members.iter().map(|m| m[a]).sum::<f64>() / n);
            let radius = members
                .iter()
                .map(|m| ((m[0] - center[0]).powi(2) + (m[1] - center[1]).powi(2) + (m[2] - center[2]).powi(2)).sqrt())
                .sum::<f64>()
                / n;
            per_query.push((center, radius));
        }
    }
    let frac = if gs.is_empty() { 0.0 } else { low as f64 / gs.len() as f64 };
    (hist, frac, per_query)
}
