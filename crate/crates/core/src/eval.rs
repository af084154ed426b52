//! Rate and quality metrics, RD curves and Bjøntegaard deltas.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value reported when a quality metric is unbounded (identical images).
pub const DB_CAP: f64 = 99.0;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Smallest extent that survives four 2× reductions with an 11-tap window.
pub const MS_SSIM_MIN_EXTENT: usize = 176;

/// Minimum number of points a curve needs for a cubic fit.
pub const BD_MIN_POINTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Both images agree sample for sample; `db` holds [`DB_CAP`].
    pub exact: bool,
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("image extents differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

/// Mean squared error over all RGB samples on the 0–255 scale.
pub fn mse_rgb(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64) * 255.0;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> Psnr {
    if mse <= 0.0 {
        Psnr { db: DB_CAP, exact: true }
    } else {
        Psnr { db: 10.0 * (255.0f64 * 255.0 / mse).log10(), exact: false }
    }
}

/// PSNR over R, G and B jointly for images on `[0, 1]`.
pub fn psnr_rgb(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Psnr> {
    Ok(psnr_from_mse(mse_rgb(a, b)?))
}

pub fn ms_ssim_to_db(ms_ssim: f64) -> f64 {
    if ms_ssim >= 1.0 {
        DB_CAP
    } else {
        (-10.0 * (1.0 - ms_ssim).log10()).min(DB_CAP)
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn blur(&self, g: &[f64; SSIM_WINDOW]) -> Plane {
        let (oh, ow) = (self.h - SSIM_WINDOW + 1, self.w - SSIM_WINDOW + 1);
        let mut tmp = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = g.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
            }
        }
        let mut v = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                v[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v }
    }

    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    fn halve(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v[y * w + x] = 0.25 * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]);
            }
        }
        Plane { h, w, v }
    }
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn ssim_terms(a: &Plane, b: &Plane, g: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let c1 = (SSIM_K1 * 255.0).powi(2);
    let c2 = (SSIM_K2 * 255.0).powi(2);
    let mu_a = a.blur(g);
    let mu_b = b.blur(g);
    let aa = a.zip(a, |x, y| x * y).blur(g);
    let bb = b.zip(b, |x, y| x * y).blur(g);
    let ab = a.zip(b, |x, y| x * y).blur(g);
    let n = mu_a.v.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        cs += c;
        ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    }
    (ssim / n as f64, cs / n as f64)
}

fn plane_255(t: &Tensor<f32>, c: usize) -> Plane {
    Plane { h: t.height(), w: t.width(), v: t.plane(0, c).iter().map(|&v| v as f64 * 255.0).collect() }
}

/// Five-scale MS-SSIM of `(1, C, H, W)` images on `[0, 1]`, averaged over
/// channels.
pub fn ms_ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let [n, ch, h, w] = a.shape();
    if n != 1 {
        return Err(Error::Shape(format!("expected a single image, got batch {n}")));
    }
    if h < MS_SSIM_MIN_EXTENT || w < MS_SSIM_MIN_EXTENT {
        return Err(Error::Shape(format!(
            "MS-SSIM needs images of at least {MS_SSIM_MIN_EXTENT}x{MS_SSIM_MIN_EXTENT}, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..ch {
        let (mut pa, mut pb) = (plane_255(a, c), plane_255(b, c));
        let mut value = 1.0;
        for (s, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_terms(&pa, &pb, &g);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() { ssim } else { cs };
            value *= term.max(0.0).powf(wt);
            if s + 1 < MS_SSIM_WEIGHTS.len() {
                pa = pa.halve();
                pb = pb.halve();
            }
        }
        total += value;
    }
    Ok(total / ch as f64)
}

/// MS-SSIM and its decibel form.
pub fn ms_ssim_db(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(f64, f64)> {
    let m = ms_ssim(a, b)?;
    Ok((m, ms_ssim_to_db(m)))
}

/// Bits per pixel over the true (unpadded) extents.
pub fn bpp(payload_bytes: usize, width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!("bpp needs positive extents, got {width}x{height}")));
    }
    Ok(8.0 * payload_bytes as f64 / (width * height) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub label: String,
    pub lambda2: f64,
    pub bpp: f64,
    pub psnr_rgb_db: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quality {
    PsnrRgb,
    MsSsimDb,
}

impl RdPoint {
    pub fn quality(&self, q: Quality) -> f64 {
        match q {
            Quality::PsnrRgb => self.psnr_rgb_db,
            Quality::MsSsimDb => self.ms_ssim_db,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by bpp and relabels every point with `label`.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Self {
        let label = label.into();
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for p in &mut points {
            p.label = label.clone();
        }
        RdCurve { label, points }
    }

    pub fn validate_for_bd(&self) -> Result<()> {
        if self.points.len() < BD_MIN_POINTS {
            return Err(Error::InvalidArgument(format!(
                "curve {:?} has {} points, BD-rate needs at least {BD_MIN_POINTS}",
                self.label,
                self.points.len()
            )));
        }
        for p in &self.points {
            if !(p.bpp > 0.0 && p.bpp.is_finite()) {
                return Err(Error::InvalidArgument(format!("curve {:?} has a non-positive rate", self.label)));
            }
        }
        if self.points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(Error::InvalidArgument(format!("curve {:?} rates are not strictly increasing", self.label)));
        }
        Ok(())
    }
}

/// Least-squares polynomial coefficients, constant term first.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.len() <= degree {
        return Err(Error::InvalidArgument(format!("{} samples cannot fix a degree-{degree} fit", x.len())));
    }
    let a = DMatrix::from_fn(x.len(), degree + 1, |r, c| x[r].powi(c as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    if !(s_min > s_max * 1e-12) {
        return Err(Error::InvalidArgument("quality values are degenerate for a cubic fit".into()));
    }
    let sol = svd.solve(&b, 0.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c.iter().enumerate().map(|(k, &ck)| ck * x.powi(k as i32 + 1) / (k as f64 + 1.0)).sum::<f64>();
    prim(hi) - prim(lo)
}

/// Average rate difference of `test` against `anchor` at equal quality, in
/// percent. Negative values are savings.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve, quality: Quality) -> Result<f64> {
    anchor.validate_for_bd()?;
    test.validate_for_bd()?;
    let qualities = |c: &RdCurve| -> Result<Vec<f64>> {
        let q: Vec<f64> = c.points.iter().map(|p| p.quality(quality)).collect();
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("curve {:?} has non-finite quality", c.label)));
        }
        Ok(q)
    };
    let (qa, qt) = (qualities(anchor)?, qualities(test)?);
    let all: Vec<f64> = qa.iter().chain(&qt).copied().collect();
    let center = all.iter().sum::<f64>() / all.len() as f64;
    let spread = all.iter().map(|q| (q - center).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let fit = |c: &RdCurve, q: &[f64]| -> Result<(Vec<f64>, f64, f64)> {
        let u: Vec<f64> = q.iter().map(|v| (v - center) / spread).collect();
        let r: Vec<f64> = c.points.iter().map(|p| p.bpp.log10()).collect();
        let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((polyfit(&u, &r, 3)?, lo, hi))
    };
    let (pa, alo, ahi) = fit(anchor, &qa)?;
    let (pt, tlo, thi) = fit(test, &qt)?;
    let lo = alo.max(tlo);
    let hi = ahi.min(thi);
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "curves {:?} and {:?} have no overlapping quality range",
            anchor.label, test.label
        )));
    }
    let avg = (poly_integral(&pt, lo, hi) - poly_integral(&pa, lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Writes curves as CSV rows `(label, λ2, bpp, psnr_rgb_db, ms_ssim, ms_ssim_db)`.
pub fn rd_csv_string(curves: &[RdCurve]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("no curves to write".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "lambda2", "bpp", "psnr_rgb_db", "ms_ssim", "ms_ssim_db"]).map_err(csv_err)?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                p.label.clone(),
                p.lambda2.to_string(),
                p.bpp.to_string(),
                p.psnr_rgb_db.to_string(),
                p.ms_ssim.to_string(),
                p.ms_ssim_db.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn emit_rd_csv(curves: &[RdCurve], path: &Path) -> Result<()> {
    crate::image_io::write_atomic(path, rd_csv_string(curves)?.as_bytes())
}

/// Groups rows by label in order of first appearance.
pub fn parse_rd_csv(text: &str) -> Result<Vec<RdCurve>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut curves: Vec<RdCurve> = Vec::new();
    for row in r.deserialize::<RdPoint>() {
        let p = row.map_err(csv_err)?;
        match curves.iter_mut().find(|c| c.label == p.label) {
            Some(c) => c.points.push(p),
            None => curves.push(RdCurve { label: p.label.clone(), points: vec![p] }),
        }
    }
    if curves.is_empty() {
        return Err(Error::Format("RD file holds no points".into()));
    }
    for c in &mut curves {
        c.points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    }
    Ok(curves)
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdCurve>> {
    parse_rd_csv(&std::fs::read_to_string(path)?)
}

/// Aligned text table of BD rates against `anchor`, one row per curve.
pub fn bd_report(anchor: &RdCurve, tests: &[RdCurve]) -> Result<String> {
    let mut rows = vec![(anchor.label.clone(), 0.0, 0.0)];
    for t in tests {
        rows.push((t.label.clone(), bd_rate(anchor, t, Quality::PsnrRgb)?, bd_rate(anchor, t, Quality::MsSsimDb)?));
    }
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>10}  {:>10}", "model", "PSNR-RGB", "MS-SSIM").unwrap();
    for (label, p, m) in rows {
        writeln!(out, "{label:<width$}  {:>9.2}%  {:>9.2}%", p + 0.0, m + 0.0).unwrap();
    }
    Ok(out)
}

/// Codes one image and measures the receiver's reconstruction.
pub fn evaluate_image(
    codec: &crate::codec::Codec,
    image: &Tensor<f32>,
    mode: &crate::codec::MaskMode,
    lambda_index: u8,
    label: &str,
) -> Result<(RdPoint, crate::codec::EncodeResult)> {
    let enc = codec.encode_with(image, mode, lambda_index)?;
    let psnr = psnr_rgb(image, &enc.reconstruction)?;
    let (m, db) = ms_ssim_db(image, &enc.reconstruction)?;
    let point = RdPoint {
        label: label.to_string(),
        lambda2: crate::codec::lambda_for_index(lambda_index)?,
        bpp: enc.bpp,
        psnr_rgb_db: psnr.db,
        ms_ssim: m,
        ms_ssim_db: db,
    };
    Ok((point, enc))
}

/// Arithmetic mean of every per-image quantity.
pub fn average_points(label: &str, points: &[RdPoint]) -> Result<RdPoint> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no points to average".into()));
    }
    let n = points.len() as f64;
    let mean = |f: fn(&RdPoint) -> f64| points.iter().map(f).sum::<f64>() / n;
    Ok(RdPoint {
        label: label.to_string(),
        lambda2: points[0].lambda2,
        bpp: mean(|p| p.bpp),
        psnr_rgb_db: mean(|p| p.psnr_rgb_db),
        ms_ssim: mean(|p| p.ms_ssim),
        ms_ssim_db: mean(|p| p.ms_ssim_db),
    })
}
