//! SSIM, FID and KID on a fixed random-weight feature embedder.
//!
//! The embedder is not a pretrained network. FID and KID values computed
//! here are only comparable with other values from this same embedder; they
//! say nothing about numbers reported for Inception features.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::seeds;

pub const EMBEDDER_SEED: u64 = 20250207;
pub const FEATURE_DIM: usize = 64;
/// Reporting factor applied to KID.
pub const KID_SCALE: f64 = 1e3;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5, dynamic range 1), averaged over channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    let (h, w) = (x.height(), x.width());
    if y.height() != h || y.width() != w {
        return Err(Error::Shape(format!("ssim inputs are {h}x{w} and {}x{}", y.height(), y.width())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = x.as_slice().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let b: Vec<f64> = y.as_slice().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mu_a = filter_valid(&a, h, w, &k);
        let mu_b = filter_valid(&b, h, w, &k);
        let e_aa = filter_valid(&prod(&a, &a), h, w, &k);
        let e_bb = filter_valid(&prod(&b, &b), h, w, &k);
        let e_ab = filter_valid(&prod(&a, &b), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

struct Conv {
    cin: usize,
    cout: usize,
    /// `[cout][cin][3][3]`
    weight: Vec<f32>,
}

/// Three stride-2 3×3 convolutions (3→16→32→64, ReLU) and global average pooling.
pub struct FeatureEmbedder {
    convs: Vec<Conv>,
}

impl Default for FeatureEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureEmbedder {
    pub fn new() -> Self {
        let mut rng = seeds::rng(EMBEDDER_SEED);
        let convs = [(3, 16), (16, 32), (32, FEATURE_DIM)]
            .into_iter()
            .map(|(cin, cout)| {
                let std = (2.0 / (9 * cin) as f64).sqrt();
                let n = Normal::new(0.0, std).expect("valid normal");
                let weight = (0..cout * cin * 9).map(|_| n.sample(&mut rng) as f32).collect();
                Conv { cin, cout, weight }
            })
            .collect();
        Self { convs }
    }

    pub fn embed(&self, image: &Image) -> Vec<f32> {
        let (mut h, mut w) = (image.height(), image.width());
        // Channel-major planes, centred on zero.
        let mut x: Vec<f32> = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            x.extend(image.as_slice().iter().skip(c).step_by(3).map(|&v| 2.0 * v - 1.0));
        }
        for conv in &self.convs {
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let mut out = vec![0f32; conv.cout * oh * ow];
            for o in 0..conv.cout {
                let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                for i in 0..conv.cin {
                    let src = &x[i * h * w..(i + 1) * h * w];
                    let k = &conv.weight[(o * conv.cin + i) * 9..(o * conv.cin + i + 1) * 9];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0f32;
                            for ky in 0..3 {
                                let yy = (2 * oy + ky) as isize - 1;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let xx = (2 * ox + kx) as isize - 1;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    s += k[ky * 3 + kx] * src[yy as usize * w + xx as usize];
                                }
                            }
                            plane[oy * ow + ox] += s;
                        }
                    }
                }
                for v in plane.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            x = out;
            h = oh;
            w = ow;
        }
        let area = (h * w) as f32;
        (0..FEATURE_DIM).map(|c| x[c * h * w..(c + 1) * h * w].iter().sum::<f32>() / area).collect()
    }

    pub fn embed_all(&self, images: &[Image]) -> Vec<Vec<f64>> {
        images.iter().map(|im| self.embed(im).into_iter().map(f64::from).collect()).collect()
    }
}

fn feature_matrix(features: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let d = features.first().map_or(0, Vec::len);
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape(format!("{what}: feature vectors must be non-empty and of equal length")));
    }
    Ok(DMatrix::from_fn(features.len(), d, |r, c| features[r][c]))
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n - 1.0);
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid(format!("fid needs at least 2 samples per set, got {} and {}", a.len(), b.len())));
    }
    let (ma, mb) = (feature_matrix(a, "fid")?, feature_matrix(b, "fid")?);
    if ma.ncols() != mb.ncols() {
        return Err(Error::Shape("fid feature sets have different dimensions".into()));
    }
    let (mu_a, cov_a) = mean_and_cov(&ma);
    let (mu_b, cov_b) = mean_and_cov(&mb);
    let root_a = sym_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

/// Cubic polynomial kernel `(xᵀy / d + 1)³`.
pub fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

fn mmd2_unbiased(x: &[&Vec<f64>], y: &[&Vec<f64>]) -> f64 {
    let m = x.len() as f64;
    let within = |s: &[&Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    acc += poly_kernel(s[i], s[j]);
                }
            }
        }
        acc / (m * (m - 1.0))
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += poly_kernel(a, b);
        }
    }
    within(x) + within(y) - 2.0 * cross / (m * m)
}

/// Kernel inception distance: mean unbiased MMD² over `subsets` random
/// subsets of `subset_size` drawn from each set. Unscaled; multiply by
/// [`KID_SCALE`] for reporting.
pub fn kid(a: &[Vec<f64>], b: &[Vec<f64>], subset_size: usize, subsets: usize, seed: u64) -> Result<f64> {
    if subset_size < 2 || subsets == 0 {
        return Err(Error::Invalid("kid needs subset_size >= 2 and at least one subset".into()));
    }
    if a.len() < subset_size || b.len() < subset_size {
        return Err(Error::Invalid(format!(
            "kid subset size {subset_size} exceeds set sizes {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dim = feature_matrix(a, "kid")?.ncols();
    if feature_matrix(b, "kid")?.ncols() != dim {
        return Err(Error::Shape("kid feature sets have different dimensions".into()));
    }
    let mut rng = seeds::rng(seed);
    let mut total = 0.0;
    for _ in 0..subsets {
        let xa: Vec<&Vec<f64>> = sample(&mut rng, a.len(), subset_size).iter().map(|i| &a[i]).collect();
        let xb: Vec<&Vec<f64>> = sample(&mut rng, b.len(), subset_size).iter().map(|i| &b[i]).collect();
        total += mmd2_unbiased(&xa, &xb);
    }
    Ok(total / subsets as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ssim,
    Fid,
    Kid,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ssim" => Ok(Metric::Ssim),
            "fid" => Ok(Metric::Fid),
            "kid" => Ok(Metric::Kid),
            other => Err(Error::Invalid(format!("unknown metric {other:?} (expected ssim, fid or kid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub metrics: Vec<Metric>,
    pub paired: bool,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { metrics: vec![Metric::Ssim, Metric::Fid, Metric::Kid], paired: true, kid_subset_size: 50, kid_subsets: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub paired: bool,
    pub pred_count: usize,
    pub gt_count: usize,
    pub pairs: usize,
    pub missing: Vec<String>,
    pub ssim_mean: Option<f64>,
    pub fid: Option<f64>,
    /// KID × 1e3.
    pub kid: Option<f64>,
    pub kid_subset_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairRow>,
    pub summary: Summary,
}

impl EvalReport {
    /// `report.jsonl` (one row per pair), `summary.json` and `summary.txt`.
    pub fn write(&self, out_dir: &Path, provenance: Option<&serde_json::Value>) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut lines = String::new();
        for r in &self.rows {
            lines.push_str(&serde_json::to_string(r).expect("row serialises"));
            lines.push('\n');
        }
        let report = out_dir.join("report.jsonl");
        fs::write(&report, lines).map_err(|e| Error::io(&report, e))?;
        let mut summary = serde_json::to_value(&self.summary).expect("summary serialises");
        if let Some(p) = provenance {
            summary["provenance"] = p.clone();
        }
        let path = out_dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&summary).expect("json")).map_err(|e| Error::io(&path, e))?;
        let path = out_dir.join("summary.txt");
        fs::write(&path, self.summary.to_string()).map_err(|e| Error::io(&path, e))
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        writeln!(f, "mode        {}", if self.paired { "paired" } else { "unpaired" })?;
        writeln!(f, "images      pred {} / gt {}", self.pred_count, self.gt_count)?;
        writeln!(f, "pairs       {}", self.pairs)?;
        writeln!(f, "missing     {}", self.missing.len())?;
        writeln!(f, "SSIM        {}", show(self.ssim_mean))?;
        writeln!(f, "FID         {}", show(self.fid))?;
        writeln!(f, "KID x1e3    {}", show(self.kid))
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pnm")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Compares the images of two directories. In paired mode files are matched
/// by stem; unmatched files are listed in `summary.missing` and excluded.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let pred = list_images(pred_dir)?;
    let gt = list_images(gt_dir)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Invalid(format!(
            "no images found ({} in {}, {} in {})",
            pred.len(),
            pred_dir.display(),
            gt.len(),
            gt_dir.display()
        )));
    }
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    let (pred_imgs, gt_imgs): (Vec<Image>, Vec<Image>);
    let want = |m| opts.metrics.contains(&m);
    if opts.paired {
        missing.extend(pred.keys().filter(|k| !gt.contains_key(*k)).cloned());
        missing.extend(gt.keys().filter(|k| !pred.contains_key(*k)).cloned());
        let mut pi = Vec::new();
        let mut gi = Vec::new();
        for (name, p) in &pred {
            let Some(g) = gt.get(name) else { continue };
            let (a, b) = (Image::load(p)?, Image::load(g)?);
            let s = if want(Metric::Ssim) { Some(ssim(&a, &b)?) } else { None };
            rows.push(PairRow { name: name.clone(), ssim: s });
            pi.push(a);
            gi.push(b);
        }
        if rows.is_empty() {
            return Err(Error::Invalid("no file names match between the two directories".into()));
        }
        (pred_imgs, gt_imgs) = (pi, gi);
    } else {
        pred_imgs = pred.values().map(|p| Image::load(p)).collect::<Result<_>>()?;
        gt_imgs = gt.values().map(|p| Image::load(p)).collect::<Result<_>>()?;
    }

    let ssim_mean = (opts.paired && want(Metric::Ssim))
        .then(|| rows.iter().filter_map(|r| r.ssim).sum::<f64>() / rows.len() as f64);
    let (mut fid_v, mut kid_v, mut subset) = (None, None, None);
    if want(Metric::Fid) || want(Metric::Kid) {
        let embedder = FeatureEmbedder::new();
        let fa = embedder.embed_all(&pred_imgs);
        let fb = embedder.embed_all(&gt_imgs);
        if want(Metric::Fid) {
            fid_v = Some(fid(&fa, &fb)?);
        }
        if want(Metric::Kid) {
            let m = opts.kid_subset_size.min(fa.len()).min(fb.len());
            kid_v = Some(kid(&fa, &fb, m, opts.kid_subsets, opts.seed)? * KID_SCALE);
            subset = Some(m);
        }
    }
    let summary = Summary {
        paired: opts.paired,
        pred_count: pred.len(),
        gt_count: gt.len(),
        pairs: if opts.paired { rows.len() } else { 0 },
        missing,
        ssim_mean,
        fid: fid_v,
        kid: kid_v,
        kid_subset_size: subset,
    };
    if !opts.paired {
        rows = pred.keys().map(|name| PairRow { name: name.clone(), ssim: None }).collect();
    }
    Ok(EvalReport { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize, invert: bool) -> Image {
        let mut im = Image::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let on = ((y / 2 + x / 2) % 2 == 0) != invert;
                let v = if on { 1.0 } else { 0.0 };
                im.set_pixel(y, x, [v, v, v]);
            }
        }
        im
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = checker(32, 24, false);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let c4 = Image::filled(32, 32, [0.4; 3]);
        let c6 = Image::filled(32, 32, [0.6; 3]);
        let want = (2.0 * 0.4 * 0.6 + 1e-4) / (0.16 + 0.36 + 1e-4);
        assert!((ssim(&c4, &c6).unwrap() - want).abs() < 1e-5);
    }

    #[test]
    fn ssim_of_inversion_is_low_and_symmetric() {
        let a = checker(32, 24, false);
        let b = checker(32, 24, true);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.2, "{s}");
        let r = ramp(32, 24);
        assert!((ssim(&a, &r).unwrap() - ssim(&r, &a).unwrap()).abs() < 1e-9);
    }

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| (i % 97) as f32 / 96.0).collect();
        Image::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn ssim_rejects_mismatch_and_tiny() {
        assert!(ssim(&ramp(32, 24), &ramp(32, 20)).is_err());
        assert!(ssim(&ramp(8, 8), &ramp(8, 8)).is_err());
    }

    #[test]
    fn embedder_is_deterministic() {
        let im = ramp(64, 48);
        let a = FeatureEmbedder::new().embed(&im);
        let b = FeatureEmbedder::new().embed(&im);
        assert_eq!(a.len(), FEATURE_DIM);
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn kernel_value_on_unit_vector() {
        let mut x = vec![0.0; 64];
        x[3] = 1.0;
        assert!((poly_kernel(&x, &x) - (1.0f64 / 64.0 + 1.0).powi(3)).abs() < 1e-12);
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let a: Vec<Vec<f64>> = (0..40).map(|i| (0..5).map(|j| ((i * 7 + j * 3) % 11) as f64 / 3.0).collect()).collect();
        let b: Vec<Vec<f64>> = (0..30).map(|i| (0..5).map(|j| ((i * 5 + j) % 13) as f64 / 4.0).collect()).collect();
        assert!(fid(&a, &a).unwrap() <= 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-6);
        assert!(fid(&a[..1], &b).is_err());
    }

    #[test]
    fn kid_checks_sizes_and_is_seeded() {
        let a: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 7) as f64, (i % 5) as f64]).collect();
        assert!(kid(&a, &a[..10], 50, 10, 0).is_err());
        assert_eq!(kid(&a, &a, 20, 5, 3).unwrap(), kid(&a, &a, 20, 5, 3).unwrap());
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("SSIM".parse::<Metric>().unwrap(), Metric::Ssim);
        assert!("lpips".parse::<Metric>().is_err());
    }
}
