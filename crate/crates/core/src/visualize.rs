//! K-Means views of prior feature maps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use crate::error::{Result, SpnError};
use crate::prior::PriorPyramid;

pub const MAX_ITERS: usize = 300;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Number of clusters that received at least one point.
    pub effective_clusters: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Stops after [`MAX_ITERS`] rounds or
/// when no centroid moves by more than [`TOLERANCE`].
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    if k < 2 {
        return Err(SpnError::Invalid("K-Means needs at least two clusters".into()));
    }
    if points.len() < k {
        return Err(SpnError::Invalid(format!("{} points cannot form {k} clusters", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // Every point coincides with a centroid: degenerate input.
            0
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    let dim = points[0].len();
    let mut labels = vec![0; points.len()];
    let mut iterations = 0;
    for it in 1..=MAX_ITERS {
        iterations = it;
        for (i, p) in points.iter().enumerate() {
            labels[i] = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            let c: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            shift = shift.max(dist2(&c, &centroids[j]).sqrt());
            centroids[j] = c;
        }
        if shift <= TOLERANCE {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        labels[i] = nearest(p, &centroids).0;
    }
    let mut used = vec![false; k];
    labels.iter().for_each(|&l| used[l] = true);
    let effective_clusters = used.iter().filter(|&&u| u).count();
    if effective_clusters < k {
        log::warn!("degenerate clustering: {effective_clusters} of {k} clusters populated");
    }
    Ok(KMeans { labels, centroids, iterations, effective_clusters })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub effective_clusters: usize,
}

/// Per-pixel feature vectors of the first batch element of `[B, C, H, W]`.
pub fn pixel_vectors(feature: &Tensor) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let s = feature.size();
    if s.len() != 4 {
        return Err(SpnError::Shape(format!("expected [B, C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[1] as usize, s[2] as usize, s[3] as usize);
    let flat: Vec<f64> = Vec::try_from(&feature.get(0).detach().to_kind(Kind::Double).contiguous().view([-1]))?;
    let plane = h * w;
    let points = (0..plane).map(|i| (0..c).map(|ch| flat[ch * plane + i]).collect()).collect();
    Ok((h, w, points))
}

pub fn cluster_feature_map(feature: &Tensor, k: usize, seed: u64) -> Result<LabelRaster> {
    let (height, width, points) = pixel_vectors(feature)?;
    let km = kmeans(&points, k, seed)?;
    Ok(LabelRaster { height, width, labels: km.labels, effective_clusters: km.effective_clusters })
}

/// One label raster per pyramid level, finest first.
pub fn visualize_prior(pyramid: &PriorPyramid, k: usize, seed: u64) -> Result<Vec<LabelRaster>> {
    pyramid.levels.iter().map(|f| cluster_feature_map(f, k, seed)).collect()
}

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

pub fn raster_to_rgb(raster: &LabelRaster) -> image::RgbImage {
    image::RgbImage::from_fn(raster.width as u32, raster.height as u32, |x, y| {
        image::Rgb(PALETTE[raster.labels[y as usize * raster.width + x as usize] % PALETTE.len()])
    })
}

pub fn save_raster(path: &Path, raster: &LabelRaster) -> Result<()> {
    raster_to_rgb(raster)
        .save(path)
        .map_err(|e| SpnError::Decode { path: path.to_path_buf(), reason: e.to_string() })
}
