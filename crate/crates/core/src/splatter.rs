//! Differentiable 3D Gaussian splatting.
//!
//! Each Gaussian is projected to a screen-space ellipse (EWA: `J·W·Σ·Wᵀ·Jᵀ`
//! plus a `0.3·I` low-pass), sorted by camera depth and alpha-composited
//! front to back over a black background:
//!
//! ```text
//! w_i(p) = α_i · exp(−½ (p − x_i)ᵀ Σ_i⁻¹ (p − x_i))
//! C(p)   = Σ_i T_i(p) · w_i(p) · c_i,   T_i(p) = Π_{j<i} (1 − w_j(p))
//! ```
//!
//! Every pixel is evaluated exactly against the splats whose 3σ box covers
//! it. Contributions with `w < 1/255` or outside the 3σ ellipse are skipped.
//! Gradients are derived analytically and computed in `f64`.

use autodiff::{CustomOp, Graph, Var};

use crate::gaussians::{GaussianSet, FLOATS_PER_GAUSSIAN};
use crate::geometry::{CameraPose, Mat3};

/// Renderer constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    /// Contributions below this weight are skipped.
    pub min_weight: f64,
    /// Footprint cutoff in standard deviations.
    pub sigma_cutoff: f64,
    /// Added to the screen covariance diagonal, in pixels².
    pub blur: f64,
    /// Splats whose screen covariance has a larger condition number are skipped.
    pub max_condition: f64,
    /// Gaussians with camera depth at or below this are culled.
    pub min_depth: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            min_weight: 1.0 / 255.0,
            sigma_cutoff: 3.0,
            blur: 0.3,
            max_condition: 1e8,
            min_depth: 0.01,
        }
    }
}

/// A projected Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian.
    pub index: usize,
    pub mean: [f64; 2],
    /// Screen covariance including the low-pass term.
    pub cov: [[f64; 2]; 2],
    /// Inverse covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub z_cam: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)`.
    pub bbox: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projected {
    Visible(Splat2D),
    Behind,
    Offscreen,
    Degenerate,
}

/// Why primitives did not reach the compositor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderDiagnostics {
    pub rendered: usize,
    pub behind: usize,
    pub offscreen: usize,
    pub degenerate: usize,
}

/// Plain `f32` image with coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `H × W × 3`.
    pub rgb: Vec<f32>,
    /// Row-major `H × W`, equal to `1 − T_final`.
    pub accum_alpha: Vec<f32>,
}

impl RenderedImage {
    pub fn black(width: usize, height: usize) -> Self {
        RenderedImage {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            accum_alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Forward state retained for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    pub diagnostics: RenderDiagnostics,
    /// Splats in compositing (ascending depth) order.
    pub splats: Vec<Splat2D>,
    /// CSR lists of splat positions per pixel, already depth ordered.
    offsets: Vec<u32>,
    entries: Vec<u32>,
    /// Hash of the depth order and of which (splat, pixel) pairs passed the
    /// footprint thresholds.
    pub structure_hash: u64,
}

impl RenderOutput {
    pub fn to_image(&self) -> RenderedImage {
        RenderedImage {
            width: self.width,
            height: self.height,
            rgb: self.rgb.iter().map(|v| *v as f32).collect(),
            accum_alpha: self.alpha.iter().map(|v| *v as f32).collect(),
        }
    }
}

fn quat_rotation(q: [f64; 4]) -> Option<(Mat3, [f64; 4], f64)> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    let [w, x, y, z] = q.map(|v| v / n);
    let r = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ];
    Some((r, [w, x, y, z], n))
}

/// Intermediate quantities shared by projection and its gradient.
struct ProjectionTerms {
    pc: [f64; 3],
    jac: [[f64; 3]; 2],
    sigma_cam: Mat3,
    m3: Mat3,
    rot: Mat3,
    qhat: [f64; 4],
    qnorm: f64,
}

fn projection_terms(p: &[f64], pose: &CameraPose) -> Option<ProjectionTerms> {
    let pc = pose.world_to_camera([p[0], p[1], p[2]]);
    let (rot, qhat, qnorm) = quat_rotation([p[6], p[7], p[8], p[9]])?;
    let s = [p[3], p[4], p[5]];
    let mut m3 = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            m3[i][k] = rot[i][k] * s[k];
        }
    }
    // Σ_cam = (W·M)(W·M)ᵀ
    let w = pose.rotation();
    let mut wm = [[0.0; 3]; 3];
    for i in 0..3 {
        for k in 0..3 {
            wm[i][k] = (0..3).map(|j| w[i][j] * m3[j][k]).sum();
        }
    }
    let mut sigma_cam = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma_cam[i][j] = (0..3).map(|k| wm[i][k] * wm[j][k]).sum();
        }
    }
    let (x, y, z) = (pc[0], pc[1], pc[2]);
    let jac = [
        [pose.fx / z, 0.0, -pose.fx * x / (z * z)],
        [0.0, pose.fy / z, -pose.fy * y / (z * z)],
    ];
    Some(ProjectionTerms {
        pc,
        jac,
        sigma_cam,
        m3,
        rot,
        qhat,
        qnorm,
    })
}

fn screen_cov(t: &ProjectionTerms, blur: f64) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += t.jac[a][i] * t.sigma_cam[i][j] * t.jac[b][j];
                }
            }
            c[a][b] = s;
        }
    }
    c[0][0] += blur;
    c[1][1] += blur;
    c
}

/// Project one Gaussian given as 14 parameters in file order.
pub fn project_params(
    index: usize,
    p: &[f64],
    pose: &CameraPose,
    width: usize,
    height: usize,
    settings: &RenderSettings,
) -> Projected {
    let pc = pose.world_to_camera([p[0], p[1], p[2]]);
    if !(pc[2] > settings.min_depth) {
        return Projected::Behind;
    }
    let Some(terms) = projection_terms(p, pose) else {
        return Projected::Degenerate;
    };
    let cov = screen_cov(&terms, settings.blur);
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let mid = 0.5 * (cov[0][0] + cov[1][1]);
    let disc = (mid * mid - det).max(0.0).sqrt();
    let (lmax, lmin) = (mid + disc, mid - disc);
    if !(det > 0.0) || !(lmin > 0.0) || lmax / lmin > settings.max_condition || !lmax.is_finite() {
        return Projected::Degenerate;
    }
    let mean = [
        pose.fx * pc[0] / pc[2] + pose.cx,
        pose.fy * pc[1] / pc[2] + pose.cy,
    ];
    let radius = settings.sigma_cutoff * lmax.sqrt();
    // pixel j has center j + 0.5
    let x0 = (mean[0] - radius - 0.5).ceil().max(0.0);
    let x1 = (mean[0] + radius - 0.5).floor().min(width as f64 - 1.0);
    let y0 = (mean[1] - radius - 0.5).ceil().max(0.0);
    let y1 = (mean[1] + radius - 0.5).floor().min(height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return Projected::Offscreen;
    }
    Projected::Visible(Splat2D {
        index,
        mean,
        cov,
        conic: [cov[1][1] / det, -cov[0][1] / det, cov[0][0] / det],
        z_cam: pc[2],
        color: [p[10], p[11], p[12]],
        alpha: p[13],
        bbox: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
    })
}

/// Project a stored Gaussian.
pub fn project_gaussian(
    g: &crate::gaussians::Gaussian3D,
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> Projected {
    let p = g.to_array().map(f64::from);
    project_params(0, &p, pose, width, height, &RenderSettings::default())
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5)
}

/// Per-pixel contribution, or `None` when thresholds reject it.
#[inline]
fn weight(s: &Splat2D, px: f64, py: f64, settings: &RenderSettings) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let maha = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if maha > settings.sigma_cutoff * settings.sigma_cutoff {
        return None;
    }
    let g = (-0.5 * maha).exp();
    let w = s.alpha * g;
    if w < settings.min_weight {
        return None;
    }
    Some((w, g, dx, dy))
}

/// Render `params` (`N × 14`, file field order) from `pose`.
pub fn render_params(
    params: &[f64],
    pose: &CameraPose,
    height: usize,
    width: usize,
    settings: &RenderSettings,
) -> RenderOutput {
    assert_eq!(params.len() % FLOATS_PER_GAUSSIAN, 0, "params must be N × 14");
    let mut diagnostics = RenderDiagnostics::default();
    let mut splats = Vec::new();
    for (i, p) in params.chunks(FLOATS_PER_GAUSSIAN).enumerate() {
        match project_params(i, p, pose, width, height, settings) {
            Projected::Visible(s) => splats.push(s),
            Projected::Behind => diagnostics.behind += 1,
            Projected::Offscreen => diagnostics.offscreen += 1,
            Projected::Degenerate => diagnostics.degenerate += 1,
        }
    }
    splats.sort_by(|a, b| a.z_cam.total_cmp(&b.z_cam).then(a.index.cmp(&b.index)));
    diagnostics.rendered = splats.len();

    let npix = width * height;
    let mut counts = vec![0u32; npix + 1];
    for s in &splats {
        for y in s.bbox[1]..=s.bbox[3] {
            for x in s.bbox[0]..=s.bbox[2] {
                counts[y * width + x + 1] += 1;
            }
        }
    }
    for i in 0..npix {
        counts[i + 1] += counts[i];
    }
    let offsets = counts;
    let mut fill = offsets.clone();
    let mut entries = vec![0u32; offsets[npix] as usize];
    for (si, s) in splats.iter().enumerate() {
        for y in s.bbox[1]..=s.bbox[3] {
            for x in s.bbox[0]..=s.bbox[2] {
                let slot = &mut fill[y * width + x];
                entries[*slot as usize] = si as u32;
                *slot += 1;
            }
        }
    }

    let mut rgb = vec![0.0; npix * 3];
    let mut alpha = vec![0.0; npix];
    let mut hash = splats
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, s| mix(h, s.index as u64));
    for pix in 0..npix {
        let (px, py) = ((pix % width) as f64 + 0.5, (pix / width) as f64 + 0.5);
        let mut t = 1.0;
        let mut c = [0.0; 3];
        for &si in &entries[offsets[pix] as usize..offsets[pix + 1] as usize] {
            let s = &splats[si as usize];
            let Some((w, ..)) = weight(s, px, py, settings) else {
                continue;
            };
            hash = mix(hash, ((pix as u64) << 32) | si as u64);
            for k in 0..3 {
                c[k] += t * w * s.color[k];
            }
            t *= 1.0 - w;
        }
        rgb[pix * 3..pix * 3 + 3].copy_from_slice(&c);
        alpha[pix] = 1.0 - t;
    }
    RenderOutput {
        width,
        height,
        rgb,
        alpha,
        diagnostics,
        splats,
        offsets,
        entries,
        structure_hash: hash,
    }
}

/// Render a stored set with default settings.
pub fn render(gs: &GaussianSet, pose: &CameraPose, height: usize, width: usize) -> RenderedImage {
    render_with_diagnostics(gs, pose, height, width).0
}

pub fn render_with_diagnostics(
    gs: &GaussianSet,
    pose: &CameraPose,
    height: usize,
    width: usize,
) -> (RenderedImage, RenderDiagnostics) {
    let params: Vec<f64> = gs.to_flat().into_iter().map(f64::from).collect();
    let out = render_params(&params, pose, height, width, &RenderSettings::default());
    (out.to_image(), out.diagnostics)
}

/// Gradient of a scalar loss w.r.t. all `N × 14` parameters, given the
/// loss gradient w.r.t. the rendered colors (`H × W × 3`) and coverage
/// (`H × W`).
pub fn render_backward(
    params: &[f64],
    pose: &CameraPose,
    out: &RenderOutput,
    grad_rgb: &[f64],
    grad_alpha: &[f64],
    settings: &RenderSettings,
) -> Vec<f64> {
    let npix = out.width * out.height;
    assert_eq!(grad_rgb.len(), npix * 3);
    assert_eq!(grad_alpha.len(), npix);
    let ns = out.splats.len();
    let mut d_mean = vec![[0.0f64; 2]; ns];
    let mut d_conic = vec![[0.0f64; 3]; ns];
    let mut d_color = vec![[0.0f64; 3]; ns];
    let mut d_alpha = vec![0.0f64; ns];

    // (splat, w, g, dx, dy, T_before)
    let mut list: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::new();
    for pix in 0..npix {
        let gc = [grad_rgb[pix * 3], grad_rgb[pix * 3 + 1], grad_rgb[pix * 3 + 2]];
        let ga = grad_alpha[pix];
        if gc == [0.0; 3] && ga == 0.0 {
            continue;
        }
        let (px, py) = ((pix % out.width) as f64 + 0.5, (pix / out.width) as f64 + 0.5);
        list.clear();
        let mut t = 1.0;
        for &si in &out.entries[out.offsets[pix] as usize..out.offsets[pix + 1] as usize] {
            let s = &out.splats[si as usize];
            if let Some((w, g, dx, dy)) = weight(s, px, py, settings) {
                list.push((si as usize, w, g, dx, dy, t));
                t *= 1.0 - w;
            }
        }
        // composite of everything behind the current splat, starting from T = 1
        let mut c_after = [0.0; 3];
        let mut a_after = 0.0;
        for &(si, w, g, dx, dy, t_i) in list.iter().rev() {
            let s = &out.splats[si];
            let mut dl_dw = ga * t_i * (1.0 - a_after);
            for k in 0..3 {
                dl_dw += gc[k] * t_i * (s.color[k] - c_after[k]);
                d_color[si][k] += gc[k] * t_i * w;
            }
            d_alpha[si] += dl_dw * g;
            let dl_dpow = dl_dw * w;
            let [a, b, c] = s.conic;
            d_mean[si][0] += dl_dpow * (a * dx + b * dy);
            d_mean[si][1] += dl_dpow * (b * dx + c * dy);
            d_conic[si][0] += dl_dpow * (-0.5 * dx * dx);
            d_conic[si][1] += dl_dpow * (-dx * dy);
            d_conic[si][2] += dl_dpow * (-0.5 * dy * dy);
            for k in 0..3 {
                c_after[k] = w * s.color[k] + (1.0 - w) * c_after[k];
            }
            a_after = w + (1.0 - w) * a_after;
        }
    }

    let mut grad = vec![0.0; params.len()];
    let wrot = pose.rotation();
    for (si, s) in out.splats.iter().enumerate() {
        let p = &params[s.index * FLOATS_PER_GAUSSIAN..(s.index + 1) * FLOATS_PER_GAUSSIAN];
        let gout = &mut grad[s.index * FLOATS_PER_GAUSSIAN..(s.index + 1) * FLOATS_PER_GAUSSIAN];
        gout[10] += d_color[si][0];
        gout[11] += d_color[si][1];
        gout[12] += d_color[si][2];
        gout[13] += d_alpha[si];

        let terms = projection_terms(p, pose).expect("visible splats have valid rotations");
        let (x, y, z) = (terms.pc[0], terms.pc[1], terms.pc[2]);
        let mut d_pc = [0.0; 3];
        // screen mean
        d_pc[0] += d_mean[si][0] * pose.fx / z;
        d_pc[1] += d_mean[si][1] * pose.fy / z;
        d_pc[2] += -d_mean[si][0] * pose.fx * x / (z * z) - d_mean[si][1] * pose.fy * y / (z * z);

        // conic = Σ2⁻¹  ⇒  dΣ2 = −Q·G·Q with G the symmetric conic gradient
        let q = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
        let gq = [
            [d_conic[si][0], 0.5 * d_conic[si][1]],
            [0.5 * d_conic[si][1], d_conic[si][2]],
        ];
        let mut d_cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        acc += q[i][k] * gq[k][l] * q[l][j];
                    }
                }
                d_cov[i][j] = -acc;
            }
        }
        // Σ2 = J·Σc·Jᵀ
        let jac = terms.jac;
        let mut d_sigma_cam = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += jac[a][i] * d_cov[a][b] * jac[b][j];
                    }
                }
                d_sigma_cam[i][j] = acc;
            }
        }
        let mut d_jac = [[0.0; 3]; 2];
        for a in 0..2 {
            for i in 0..3 {
                let mut acc = 0.0;
                for b in 0..2 {
                    for j in 0..3 {
                        acc += d_cov[a][b] * jac[b][j] * terms.sigma_cam[j][i];
                    }
                }
                d_jac[a][i] = 2.0 * acc;
            }
        }
        let (fx, fy) = (pose.fx, pose.fy);
        d_pc[0] += d_jac[0][2] * (-fx / (z * z));
        d_pc[1] += d_jac[1][2] * (-fy / (z * z));
        d_pc[2] += d_jac[0][0] * (-fx / (z * z))
            + d_jac[0][2] * (2.0 * fx * x / (z * z * z))
            + d_jac[1][1] * (-fy / (z * z))
            + d_jac[1][2] * (2.0 * fy * y / (z * z * z));

        // pc = W·μ + t
        for k in 0..3 {
            gout[k] += (0..3).map(|i| wrot[i][k] * d_pc[i]).sum::<f64>();
        }

        // Σc = W·Σ3·Wᵀ, Σ3 = M·Mᵀ with M = R·diag(s)
        let mut d_sigma3 = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        acc += wrot[a][i] * d_sigma_cam[a][b] * wrot[b][j];
                    }
                }
                d_sigma3[i][j] = acc;
            }
        }
        let mut d_m = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                d_m[i][k] = (0..3)
                    .map(|j| (d_sigma3[i][j] + d_sigma3[j][i]) * terms.m3[j][k])
                    .sum();
            }
        }
        let scale = [p[3], p[4], p[5]];
        let mut d_r = [[0.0; 3]; 3];
        for k in 0..3 {
            gout[3 + k] += (0..3).map(|i| d_m[i][k] * terms.rot[i][k]).sum::<f64>();
            for i in 0..3 {
                d_r[i][k] = d_m[i][k] * scale[k];
            }
        }
        let [w, qx, qy, qz] = terms.qhat;
        let dq = [
            2.0 * (-qz * d_r[0][1] + qy * d_r[0][2] + qz * d_r[1][0] - qx * d_r[1][2]
                - qy * d_r[2][0]
                + qx * d_r[2][1]),
            2.0 * (qy * d_r[0][1] + qz * d_r[0][2] + qy * d_r[1][0] - 2.0 * qx * d_r[1][1]
                - w * d_r[1][2]
                + qz * d_r[2][0]
                + w * d_r[2][1]
                - 2.0 * qx * d_r[2][2]),
            2.0 * (-2.0 * qy * d_r[0][0] + qx * d_r[0][1] + w * d_r[0][2] + qx * d_r[1][0]
                + qz * d_r[1][2]
                - w * d_r[2][0]
                + qz * d_r[2][1]
                - 2.0 * qy * d_r[2][2]),
            2.0 * (-2.0 * qz * d_r[0][0] - w * d_r[0][1] + qx * d_r[0][2] + w * d_r[1][0]
                - 2.0 * qz * d_r[1][1]
                + qy * d_r[1][2]
                + qx * d_r[2][0]
                + qy * d_r[2][1]),
        ];
        // through q̂ = q / ‖q‖
        let proj = dq[0] * w + dq[1] * qx + dq[2] * qy + dq[3] * qz;
        let qh = terms.qhat;
        for k in 0..4 {
            gout[6 + k] += (dq[k] - qh[k] * proj) / terms.qnorm;
        }
    }
    grad
}

/// Backward half of [`render_node`]; keeps the forward state.
struct RenderOp {
    pose: CameraPose,
    settings: RenderSettings,
    out: RenderOutput,
}

impl CustomOp for RenderOp {
    fn name(&self) -> &str {
        "render"
    }

    fn backward(&self, inputs: &[&[f32]], _output: &[f32], grad: &[f32]) -> Vec<Option<Vec<f32>>> {
        let params: Vec<f64> = inputs[0].iter().map(|v| f64::from(*v)).collect();
        let npix = self.out.width * self.out.height;
        let mut grad_rgb = Vec::with_capacity(npix * 3);
        let mut grad_alpha = Vec::with_capacity(npix);
        for px in grad.chunks(4) {
            grad_rgb.extend(px[..3].iter().map(|v| f64::from(*v)));
            grad_alpha.push(f64::from(px[3]));
        }
        let d = render_backward(&params, &self.pose, &self.out, &grad_rgb, &grad_alpha, &self.settings);
        vec![Some(d.into_iter().map(|v| v as f32).collect())]
    }
}

/// Render a `[N, 14]` parameter node into a `[H·W, 4]` node holding color
/// and coverage per pixel, differentiable w.r.t. the parameters.
pub fn render_node<'p>(g: &mut Graph<'p>, params: Var, pose: &CameraPose, height: usize, width: usize) -> Var {
    assert_eq!(g.shape(params)[1], FLOATS_PER_GAUSSIAN, "params must be N × 14");
    let settings = RenderSettings::default();
    let p: Vec<f64> = g.value(params).iter().map(|v| f64::from(*v)).collect();
    let out = render_params(&p, pose, height, width, &settings);
    let mut value = Vec::with_capacity(height * width * 4);
    for (c, a) in out.rgb.chunks(3).zip(&out.alpha) {
        value.extend(c.iter().map(|v| *v as f32));
        value.push(*a as f32);
    }
    let op = RenderOp {
        pose: pose.clone(),
        settings,
        out,
    };
    g.custom(&[params], value, &[height * width, 4], Box::new(op))
}
