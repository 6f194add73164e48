//! Ground-truth density map generation from point annotations.
//!
//! Four strategies: a fixed kernel, a geometry-adaptive kernel (per-point
//! sigma from k-NN distances), a non-uniform variant (adaptive sigmas
//! smoothed over each point's neighborhood), and the perspective-aware
//! parametric method that assigns one kernel size per image row via a linear
//! map from inverse effective density.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotatedImage, PointAnnotation};
use crate::error::{Error, Result};

/// 2-D grid of non-negative person densities. Total mass equals the source
/// annotation count: every splat renormalizes over its in-bounds truncated
/// support, so border points still contribute exactly one person.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> DensityMap {
        DensityMap {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Total mass, Kahan-compensated.
    pub fn mass(&self) -> f64 {
        kahan_sum(self.values.iter().copied())
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0_f64, f64::max)
    }

    /// Accumulate a truncated isotropic Gaussian of standard deviation
    /// `sigma` centered at the point. Truncation radius is ceil(3 sigma)
    /// cells; the added mass is renormalized to exactly 1 over the in-bounds
    /// support.
    pub fn splat_gaussian(&mut self, center: &PointAnnotation, sigma: f64) -> Result<()> {
        if sigma <= 0.0 {
            return Err(Error::NonPositiveSigma(sigma));
        }
        let radius = (3.0 * sigma).ceil();
        let i_lo = ((center.y - radius).ceil().max(0.0)) as usize;
        let i_hi = ((center.y + radius).floor().min(self.height as f64 - 1.0)) as usize;
        let j_lo = ((center.x - radius).ceil().max(0.0)) as usize;
        let j_hi = ((center.x + radius).floor().min(self.width as f64 - 1.0)) as usize;
        let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);

        let h = i_hi + 1 - i_lo;
        let w = j_hi + 1 - j_lo;
        let mut weights = vec![0.0; h * w];
        let mut total = 0.0;
        for i in i_lo..=i_hi {
            let dy = i as f64 - center.y;
            for j in j_lo..=j_hi {
                let dx = j as f64 - center.x;
                let wgt = (-(dx * dx + dy * dy) * inv_two_sigma_sq).exp();
                weights[(i - i_lo) * w + (j - j_lo)] = wgt;
                total += wgt;
            }
        }
        // Center is in bounds, so at least the nearest cell carries weight.
        let inv_total = 1.0 / total;
        for i in 0..h {
            for j in 0..w {
                self.values[(i + i_lo) * self.width + (j + j_lo)] += weights[i * w + j] * inv_total;
            }
        }
        Ok(())
    }
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// One splat per point with a single kernel size.
pub fn gen_fixed(ann: &AnnotatedImage, sigma: f64) -> Result<DensityMap> {
    let mut map = DensityMap::zeros(ann.height, ann.width);
    for p in &ann.points {
        map.splat_gaussian(p, sigma)?;
    }
    Ok(map)
}

/// Mean Euclidean distance from each point to its k nearest other points,
/// exact brute force. Points with fewer than k others use all others.
pub fn knn_mean_dist(points: &[PointAnnotation], k: usize) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    assert!(k >= 1, "k must be >= 1");
    let mut out = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len() - 1);
    for (i, p) in points.iter().enumerate() {
        dists.clear();
        for (j, q) in points.iter().enumerate() {
            if i != j {
                dists.push(((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt());
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let take = k.min(dists.len());
        out.push(dists[..take].iter().sum::<f64>() / take as f64);
    }
    Ok(out)
}

/// Clamps and fallbacks for the geometry-adaptive and non-uniform kernels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelClamp {
    pub fallback_sigma: f64,
    pub sigma_floor: f64,
    pub sigma_ceiling: f64,
}

impl Default for KernelClamp {
    fn default() -> Self {
        KernelClamp {
            fallback_sigma: 15.0,
            sigma_floor: 1.0,
            sigma_ceiling: 50.0,
        }
    }
}

fn adaptive_sigmas(
    points: &[PointAnnotation],
    beta_geo: f64,
    k: usize,
    clamp: &KernelClamp,
) -> Result<Vec<f64>> {
    let dists = knn_mean_dist(points, k)?;
    Ok(dists
        .iter()
        .map(|d| (beta_geo * d).clamp(clamp.sigma_floor, clamp.sigma_ceiling))
        .collect())
}

/// Geometry-adaptive kernel: per-point sigma = beta_geo * mean k-NN distance,
/// clamped. Fewer than two points falls back to the fixed kernel.
pub fn gen_adaptive(ann: &AnnotatedImage, beta_geo: f64, k: usize) -> Result<DensityMap> {
    gen_adaptive_with(ann, beta_geo, k, &KernelClamp::default())
}

pub fn gen_adaptive_with(
    ann: &AnnotatedImage,
    beta_geo: f64,
    k: usize,
    clamp: &KernelClamp,
) -> Result<DensityMap> {
    assert!(beta_geo > 0.0, "beta_geo must be positive");
    if ann.points.len() < 2 {
        return gen_fixed(ann, clamp.fallback_sigma);
    }
    let sigmas = adaptive_sigmas(&ann.points, beta_geo, k, clamp)?;
    let mut map = DensityMap::zeros(ann.height, ann.width);
    for (p, &s) in ann.points.iter().zip(&sigmas) {
        map.splat_gaussian(p, s)?;
    }
    Ok(map)
}

/// Non-uniform kernel estimation: adaptive sigmas smoothed by averaging each
/// point's sigma with those of its m nearest neighbors.
pub fn gen_nonuniform(ann: &AnnotatedImage, beta_geo: f64, k: usize, m: usize) -> Result<DensityMap> {
    gen_nonuniform_with(ann, beta_geo, k, m, &KernelClamp::default())
}

pub fn gen_nonuniform_with(
    ann: &AnnotatedImage,
    beta_geo: f64,
    k: usize,
    m: usize,
    clamp: &KernelClamp,
) -> Result<DensityMap> {
    assert!(m >= 1, "m must be >= 1");
    if ann.points.len() < 2 {
        return gen_fixed(ann, clamp.fallback_sigma);
    }
    let raw = adaptive_sigmas(&ann.points, beta_geo, k, clamp)?;
    let smoothed = smooth_sigmas(&ann.points, &raw, m);
    let mut map = DensityMap::zeros(ann.height, ann.width);
    for (p, &s) in ann.points.iter().zip(&smoothed) {
        map.splat_gaussian(p, s)?;
    }
    Ok(map)
}

/// Mean sigma over each point and its m nearest neighbors.
pub fn smooth_sigmas(points: &[PointAnnotation], sigmas: &[f64], m: usize) -> Vec<f64> {
    let n = points.len();
    let mut out = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| {
            let da = (points[i].x - points[a].x).powi(2) + (points[i].y - points[a].y).powi(2);
            let db = (points[i].x - points[b].x).powi(2) + (points[i].y - points[b].y).powi(2);
            da.partial_cmp(&db).unwrap()
        });
        let take = m.min(order.len());
        let sum: f64 = sigmas[i] + order[..take].iter().map(|&j| sigmas[j]).sum::<f64>();
        out.push(sum / (take + 1) as f64);
    }
    out
}

/// Rough smooth prior map: the fixed kernel with a large sigma.
pub fn prior_map(ann: &AnnotatedImage, sigma_prior: f64) -> Result<DensityMap> {
    gen_fixed(ann, sigma_prior)
}

/// Per-row effective density of a prior map: the mean over cells whose value
/// exceeds the threshold eps, absent on rows with no qualifying cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDensityStats {
    pub d: Vec<Option<f64>>,
    pub m: Vec<usize>,
    pub eps: f64,
}

pub fn effective_density(prior: &DensityMap, eps: f64) -> RowDensityStats {
    assert!(eps >= 0.0, "eps must be non-negative");
    let mut d = Vec::with_capacity(prior.height);
    let mut m = Vec::with_capacity(prior.height);
    for i in 0..prior.height {
        let row = &prior.values[i * prior.width..(i + 1) * prior.width];
        let mut count = 0usize;
        let mut sum = 0.0;
        for &v in row {
            if v > eps {
                count += 1;
                sum += v;
            }
        }
        m.push(count);
        d.push((count > 0).then(|| sum / count as f64));
    }
    RowDensityStats { d, m, eps }
}

/// Extrema of effective density over a whole training set, plus the
/// parameters they were measured with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetDensityStats {
    pub eps: f64,
    pub sigma_prior: f64,
    pub d_min: f64,
    pub d_max: f64,
}

pub fn dataset_density_stats(
    images: &[AnnotatedImage],
    eps: f64,
    sigma_prior: f64,
) -> Result<DatasetDensityStats> {
    if sigma_prior <= 0.0 {
        return Err(Error::NonPositiveSigma(sigma_prior));
    }
    let mut d_min = f64::INFINITY;
    let mut d_max = f64::NEG_INFINITY;
    for ann in images {
        let prior = prior_map(ann, sigma_prior)?;
        let stats = effective_density(&prior, eps);
        for d in stats.d.iter().flatten() {
            d_min = d_min.min(*d);
            d_max = d_max.max(*d);
        }
    }
    if !d_min.is_finite() {
        return Err(Error::NoEffectiveRows);
    }
    Ok(DatasetDensityStats {
        eps,
        sigma_prior,
        d_min,
        d_max,
    })
}

pub fn save_stats(stats: &DatasetDensityStats, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(stats).expect("stats serialization");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_stats(path: &Path) -> Result<DatasetDensityStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Per-row Gaussian kernel sizes from the linear map on inverse effective
/// density: sigma(i) = alpha / D(i) + beta, clamped to [sigma_min, sigma_max].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSigmaProfile {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: Vec<f64>,
}

/// Build the row profile. Rows without effective density get sigmas linearly
/// interpolated between the nearest defined rows, constant at the edges; if
/// no row is defined every row gets sigma_max.
pub fn row_sigma_profile(
    stats: &RowDensityStats,
    dstats: &DatasetDensityStats,
    sigma_min: f64,
    sigma_max: f64,
) -> Result<RowSigmaProfile> {
    if sigma_min <= 0.0 {
        return Err(Error::NonPositiveSigma(sigma_min));
    }
    if sigma_min > sigma_max {
        return Err(Error::Config(format!(
            "sigma_min {sigma_min} exceeds sigma_max {sigma_max}"
        )));
    }
    if dstats.d_min >= dstats.d_max {
        return Err(Error::DegenerateStats(dstats.d_min));
    }
    let u_min = 1.0 / dstats.d_min; // largest inverse density
    let u_max = 1.0 / dstats.d_max; // smallest inverse density
    let alpha = (sigma_max - sigma_min) / (u_min - u_max);
    let beta = (u_min * sigma_min - u_max * sigma_max) / (u_min - u_max);

    let rows = stats.d.len();
    let mut sigma = vec![f64::NAN; rows];
    for (i, d) in stats.d.iter().enumerate() {
        if let Some(d) = d {
            sigma[i] = if sigma_min == sigma_max || *d <= 0.0 {
                sigma_max
            } else {
                (alpha / d + beta).clamp(sigma_min, sigma_max)
            };
        }
    }
    fill_gaps(&mut sigma, sigma_max);
    Ok(RowSigmaProfile {
        sigma_min,
        sigma_max,
        alpha,
        beta,
        sigma,
    })
}

fn fill_gaps(sigma: &mut [f64], default: f64) {
    let defined: Vec<usize> = (0..sigma.len()).filter(|&i| !sigma[i].is_nan()).collect();
    if defined.is_empty() {
        sigma.fill(default);
        return;
    }
    for i in 0..sigma.len() {
        if !sigma[i].is_nan() {
            continue;
        }
        let next = defined.partition_point(|&j| j < i);
        sigma[i] = if next == 0 {
            sigma[defined[0]]
        } else if next == defined.len() {
            sigma[defined[defined.len() - 1]]
        } else {
            let (lo, hi) = (defined[next - 1], defined[next]);
            let t = (i - lo) as f64 / (hi - lo) as f64;
            sigma[lo] + t * (sigma[hi] - sigma[lo])
        };
    }
}

pub fn save_profile(profile: &RowSigmaProfile, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(profile).expect("profile serialization");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Perspective-aware generation: each point splatted with the kernel size of
/// its (rounded) row.
pub fn gen_perspective(ann: &AnnotatedImage, profile: &RowSigmaProfile) -> Result<DensityMap> {
    if profile.sigma.len() != ann.height {
        return Err(Error::ProfileMismatch {
            profile_rows: profile.sigma.len(),
            image_rows: ann.height,
        });
    }
    let mut map = DensityMap::zeros(ann.height, ann.width);
    for p in &ann.points {
        let row = (p.y.round() as usize).min(ann.height - 1);
        map.splat_gaussian(p, profile.sigma[row])?;
    }
    Ok(map)
}

/// Block-sum downsampling by `factor`; preserves total mass. Summation order
/// inside each block is row-major.
pub fn sum_pool(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    assert!(factor >= 1, "factor must be >= 1");
    if map.height % factor != 0 || map.width % factor != 0 {
        return Err(Error::IndivisibleDimensions {
            height: map.height,
            width: map.width,
            factor,
        });
    }
    let oh = map.height / factor;
    let ow = map.width / factor;
    let mut out = DensityMap::zeros(oh, ow);
    for oi in 0..oh {
        for oj in 0..ow {
            let mut sum = 0.0;
            for di in 0..factor {
                let base = (oi * factor + di) * map.width + oj * factor;
                for dj in 0..factor {
                    sum += map.values[base + dj];
                }
            }
            out.values[oi * ow + oj] = sum;
        }
    }
    Ok(out)
}

const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const DMAP_VERSION: u32 = 1;

/// Densities are generated in double precision and serialized as float32.
pub fn save_dmap(map: &DensityMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + map.values.len() * 4);
    buf.extend_from_slice(DMAP_MAGIC);
    buf.extend_from_slice(&DMAP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    for &v in &map.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_dmap(path: &Path) -> Result<DensityMap> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != DMAP_MAGIC {
        return Err(Error::FormatMismatch(format!(
            "{}: expected DMAP magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != DMAP_VERSION {
        return Err(Error::FormatMismatch(format!(
            "{}: unsupported DMAP version {version}",
            path.display()
        )));
    }
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    if data.len() != height * width * 4 {
        return Err(Error::FormatMismatch(format!(
            "{}: expected {} density bytes, found {}",
            path.display(),
            height * width * 4,
            data.len()
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(DensityMap {
        height,
        width,
        values,
    })
}
