//! Point-cloud metrics: Chamfer distance, EMD, F-score, cross-view
//! consistency and a toy-feature Fréchet distance.
//!
//! Conventions: Chamfer uses squared Euclidean distances averaged over each
//! cloud; EMD is the mean Euclidean cost of the optimal perfect matching.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::MetricsConfig;
use crate::data::PointCloudShape;
use crate::error::{Error, Result};

/// Default F-score threshold: 2% of the diagonal of the `[-1, 1]³` cube.
pub const DEFAULT_TAU: f64 = 0.02 * 2.0 * 1.732_050_807_568_877_2;

/// Diagonal loading added to feature covariances.
pub const COVARIANCE_LOADING: f64 = 1e-6;

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nonempty(a: &PointCloudShape, b: &PointCloudShape) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Metric("point clouds must be non-empty".into()));
    }
    Ok(())
}

/// Squared distance from every point of `from` to its nearest point in `to`.
fn nearest_sq(from: &PointCloudShape, to: &PointCloudShape) -> Vec<f64> {
    from.points
        .iter()
        .map(|p| to.points.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn chamfer(a: &PointCloudShape, b: &PointCloudShape) -> Result<f64> {
    nonempty(a, b)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(nearest_sq(a, b)) + mean(nearest_sq(b, a)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmdOptions {
    pub exact_max: usize,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for EmdOptions {
    fn default() -> Self {
        Self { exact_max: 512, epsilon: 0.01, iterations: 500 }
    }
}

impl From<&MetricsConfig> for EmdOptions {
    fn from(cfg: &MetricsConfig) -> Self {
        Self { exact_max: cfg.emd_exact_max, epsilon: cfg.sinkhorn_epsilon, iterations: cfg.sinkhorn_iterations }
    }
}

fn cost_matrix(a: &PointCloudShape, b: &PointCloudShape) -> Vec<Vec<f64>> {
    a.points.iter().map(|p| b.points.iter().map(|q| sq_dist(p, q).sqrt()).collect()).collect()
}

pub fn emd(a: &PointCloudShape, b: &PointCloudShape) -> Result<f64> {
    emd_with(a, b, &EmdOptions::default())
}

/// Exact for clouds up to `opts.exact_max` points, entropic otherwise.
pub fn emd_with(a: &PointCloudShape, b: &PointCloudShape, opts: &EmdOptions) -> Result<f64> {
    nonempty(a, b)?;
    if a.len() != b.len() {
        return Err(Error::Metric(format!("EMD needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    if a.len() <= opts.exact_max {
        Ok(emd_exact(a, b))
    } else {
        Ok(emd_sinkhorn(a, b, opts.epsilon, opts.iterations))
    }
}

/// Optimal matching by the Hungarian algorithm.
pub fn emd_exact(a: &PointCloudShape, b: &PointCloudShape) -> f64 {
    let cost = cost_matrix(a, b);
    let assignment = hungarian(&cost);
    assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>() / a.len() as f64
}

/// Minimum-cost perfect matching of a square cost matrix; returns the column
/// assigned to every row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // Row (1-based) matched to each column; column 0 is the virtual root.
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let slack = cost[r - 1][col - 1] - u[r] - v[col];
                if slack < min_slack[col] {
                    min_slack[col] = slack;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        while col0 != 0 {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Transport cost of the entropic optimal plan between uniform marginals,
/// computed with log-domain Sinkhorn iterations.
pub fn emd_sinkhorn(a: &PointCloudShape, b: &PointCloudShape, epsilon: f64, iterations: usize) -> f64 {
    let cost = cost_matrix(a, b);
    let (n, m) = (a.len(), b.len());
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    for _ in 0..iterations {
        for i in 0..n {
            f[i] = epsilon * log_a - epsilon * log_sum_exp((0..m).map(|j| (g[j] - cost[i][j]) / epsilon));
        }
        for j in 0..m {
            g[j] = epsilon * log_b - epsilon * log_sum_exp((0..n).map(|i| (f[i] - cost[i][j]) / epsilon));
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += ((f[i] + g[j] - cost[i][j]) / epsilon).exp() * cost[i][j];
        }
    }
    total
}

/// Harmonic mean of precision (share of `a` within `tau` of `b`) and recall
/// (share of `b` within `tau` of `a`).
pub fn f_score(a: &PointCloudShape, b: &PointCloudShape, tau: f64) -> Result<f64> {
    nonempty(a, b)?;
    if !(tau > 0.0) {
        return Err(Error::Metric(format!("F-score threshold must be positive, got {tau}")));
    }
    let t2 = tau * tau;
    let share = |d: Vec<f64>| d.iter().filter(|&&v| v <= t2).count() as f64 / d.len() as f64;
    let precision = share(nearest_sq(a, b));
    let recall = share(nearest_sq(b, a));
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Mean pairwise agreement between shapes generated from different views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossView {
    pub pairs: usize,
    pub chamfer: f64,
    pub emd: f64,
    pub f_score: f64,
    /// Symmetric pairwise Chamfer matrix.
    pub chamfer_matrix: Vec<Vec<f64>>,
}

pub fn cross_view_consistency(shapes: &[PointCloudShape], tau: f64, emd_opts: &EmdOptions) -> Result<CrossView> {
    if shapes.len() < 2 {
        return Err(Error::Metric(format!("cross-view consistency needs at least 2 shapes, got {}", shapes.len())));
    }
    let k = shapes.len();
    let mut matrix = vec![vec![0.0; k]; k];
    let (mut cd, mut em, mut fs, mut pairs) = (0.0, 0.0, 0.0, 0);
    for i in 0..k {
        for j in i + 1..k {
            let c = chamfer(&shapes[i], &shapes[j])?;
            matrix[i][j] = c;
            matrix[j][i] = c;
            cd += c;
            em += emd_with(&shapes[i], &shapes[j], emd_opts)?;
            fs += f_score(&shapes[i], &shapes[j], tau)?;
            pairs += 1;
        }
    }
    let p = pairs as f64;
    Ok(CrossView { pairs, chamfer: cd / p, emd: em / p, f_score: fs / p, chamfer_matrix: matrix })
}

/// Fixed random feature map for the toy FID: `relu(p·W + b)` per point,
/// pooled by mean and max over the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub weights: Vec<[f64; 3]>,
    pub bias: Vec<f64>,
}

impl FeatureMap {
    pub fn new(features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let weights = (0..features).map(|_| [normal() * 2.0, normal() * 2.0, normal() * 2.0]).collect();
        let bias = (0..features).map(|_| normal() * 0.5).collect();
        Self { weights, bias }
    }

    /// Hex SHA-256 of the little-endian weight and bias bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.weights {
            for v in w {
                h.update(v.to_le_bytes());
            }
        }
        for v in &self.bias {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn dim(&self) -> usize {
        2 * self.weights.len()
    }

    pub fn features(&self, cloud: &PointCloudShape) -> Vec<f64> {
        let k = self.weights.len();
        let mut mean = vec![0.0; k];
        let mut max = vec![0.0f64; k];
        for p in &cloud.points {
            for (f, (w, b)) in self.weights.iter().zip(&self.bias).enumerate() {
                let act = (p[0] * w[0] + p[1] * w[1] + p[2] * w[2] + b).max(0.0);
                mean[f] += act;
                max[f] = max[f].max(act);
            }
        }
        let n = cloud.len().max(1) as f64;
        mean.iter_mut().for_each(|v| *v /= n);
        mean.extend(max);
        mean
    }
}

fn gaussian_fit(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mu = DVector::zeros(d);
    for s in samples {
        mu += DVector::from_column_slice(s);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += COVARIANCE_LOADING;
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric("Fréchet distance needs at least 2 samples per set".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|s| s.len() != d) {
        return Err(Error::Metric("feature vectors differ in length".into()));
    }
    let (mu_a, cov_a) = gaussian_fit(a);
    let (mu_b, cov_b) = gaussian_fit(b);
    let root_a = sqrt_psd(&cov_a);
    let mut middle = &root_a * &cov_b * &root_a;
    middle = (&middle + middle.transpose()) * 0.5;
    let cross = SymmetricEigen::new(middle).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>();
    let value = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

pub fn toy_fid(generated: &[PointCloudShape], reference: &[PointCloudShape], map: &FeatureMap) -> Result<f64> {
    let fa: Vec<_> = generated.iter().map(|c| map.features(c)).collect();
    let fb: Vec<_> = reference.iter().map(|c| map.features(c)).collect();
    frechet_distance(&fa, &fb)
}

/// Metrics of one generated cloud against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub reference: String,
    pub chamfer: f64,
    pub emd: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub chamfer: f64,
    pub emd: f64,
    pub f_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossViewEntry {
    pub shape: String,
    pub views: usize,
    #[serde(flatten)]
    pub metrics: CrossView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidEntry {
    pub value: f64,
    pub features: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub f_score_tau: f64,
    pub chamfer_convention: String,
    pub samples: Vec<SampleMetrics>,
    pub mean: MetricMeans,
    /// Present only when some shape was generated from at least two views.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_view: Option<Vec<CrossViewEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cross_view_mean: Option<MetricMeans>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy_fid: Option<FidEntry>,
}

pub const CHAMFER_CONVENTION: &str = "squared L2, mean over each cloud, summed over both directions";

impl MetricReport {
    pub fn new(tau: f64, samples: Vec<SampleMetrics>, cross_view: Vec<CrossViewEntry>, toy_fid: Option<FidEntry>) -> Self {
        let means = |it: &mut dyn Iterator<Item = (f64, f64, f64)>| {
            let (mut c, mut e, mut f, mut k) = (0.0, 0.0, 0.0, 0usize);
            for (a, b, d) in it {
                c += a;
                e += b;
                f += d;
                k += 1;
            }
            let k = k.max(1) as f64;
            MetricMeans { chamfer: c / k, emd: e / k, f_score: f / k }
        };
        let mean = means(&mut samples.iter().map(|s| (s.chamfer, s.emd, s.f_score)));
        let (cross_view, cross_view_mean) = if cross_view.is_empty() {
            (None, None)
        } else {
            let m = means(&mut cross_view.iter().map(|c| (c.metrics.chamfer, c.metrics.emd, c.metrics.f_score)));
            (Some(cross_view), Some(m))
        };
        Self { f_score_tau: tau, chamfer_convention: CHAMFER_CONVENTION.into(), samples, mean, cross_view, cross_view_mean, toy_fid }
    }

    /// Plain-text table: one row per sample, then the mean row with the
    /// cross-view columns alongside.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# F-score tau = {:.6}; Chamfer: {}", self.f_score_tau, self.chamfer_convention);
        let _ = writeln!(out, "{:<32} {:>10} {:>10} {:>8} {:>10} {:>10} {:>8}", "sample", "CD", "EMD", "F", "CV-CD", "CV-EMD", "CV-F");
        for s in &self.samples {
            let _ = writeln!(out, "{:<32} {:>10.6} {:>10.6} {:>8.4} {:>10} {:>10} {:>8}", s.id, s.chamfer, s.emd, s.f_score, "-", "-", "-");
        }
        let cv = |f: fn(&MetricMeans) -> f64, prec: usize| {
            self.cross_view_mean.as_ref().map_or("-".to_string(), |m| format!("{:.*}", prec, f(m)))
        };
        let _ = writeln!(
            out,
            "{:<32} {:>10.6} {:>10.6} {:>8.4} {:>10} {:>10} {:>8}",
            "mean",
            self.mean.chamfer,
            self.mean.emd,
            self.mean.f_score,
            cv(|m| m.chamfer, 6),
            cv(|m| m.emd, 6),
            cv(|m| m.f_score, 4)
        );
        if let Some(fid) = &self.toy_fid {
            let _ = writeln!(out, "toy-FID {:.6} ({} features, map {})", fid.value, fid.features, &fid.checksum[..16]);
        }
        out
    }
}
