//! Maximum mean discrepancy between two feature samples.
//!
//! Values are squared-MMD estimates with the usual quadratic-time
//! estimators: the biased V-statistic (always nonnegative) and the unbiased
//! U-statistic that drops the within-sample diagonal.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::models::ParamModule;
use crate::train::extract_features;
use crate::{Error, Real, Result, Tensor};

/// Lower bound for a median-heuristic bandwidth.
pub const MIN_BANDWIDTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// `exp(-|x - y|^2 / (2 sigma^2))`
    Rbf,
    /// `x · y`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Self {
        Self {
            kind: KernelKind::Rbf,
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Biased,
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    pub value: f64,
    pub estimator: Estimator,
    pub n_x: usize,
    pub n_y: usize,
    /// RBF bandwidth actually used (0 for the linear kernel).
    pub bandwidth_used: f64,
}

fn as_matrix<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.batch(), t.row_len())
}

fn check_pair<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d) = as_matrix(x);
    let (m, dy) = as_matrix(y);
    if d != dy {
        return Err(Error::DimensionMismatch {
            left: "X features".into(),
            left_dim: d,
            right: "Y features".into(),
            right_dim: dy,
        });
    }
    if n == 0 || m == 0 {
        return Err(Error::Empty("mmd sample"));
    }
    Ok((n, m, d))
}

/// Pairwise squared distances `|a_i - b_j|^2` through the norm expansion.
fn sq_dists(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize) -> Vec<f64> {
    let norms = |v: &[f64], n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| v[i * d..(i + 1) * d].iter().map(|x| x * x).sum())
            .collect()
    };
    let (ra, rb) = (norms(a, na), norms(b, nb));
    let mut dots = vec![0.0; na * nb];
    crate::tensor::gemm_nt(a, b, &mut dots, na, d, nb);
    let mut out = dots;
    for i in 0..na {
        for j in 0..nb {
            let v = ra[i] + rb[j] - 2.0 * out[i * nb + j];
            out[i * nb + j] = v.max(0.0);
        }
    }
    out
}

fn dots(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; na * nb];
    crate::tensor::gemm_nt(a, b, &mut out, na, d, nb);
    out
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

/// Median of the pairwise Euclidean distances over the pooled sample, floored
/// at [`MIN_BANDWIDTH`]. An even number of pairs averages the middle two.
pub fn median_heuristic_bandwidth<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (n, m, d) = check_pair(x, y).map_err(|e| match e {
        Error::Empty(_) => Error::Empty("median heuristic input"),
        e => e,
    })?;
    let total = n + m;
    if total < 2 {
        return Err(Error::TooFewSamples(
            "median heuristic needs at least two points".into(),
        ));
    }
    let mut pooled = to_f64(x);
    pooled.extend(to_f64(y));
    let sq = sq_dists(&pooled, total, &pooled, total, d);
    let mut dist: Vec<f64> = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in i + 1..total {
            dist.push(libm::sqrt(sq[i * total + j]));
        }
    }
    dist.sort_by(f64::total_cmp);
    let k = dist.len();
    let med = if k % 2 == 1 {
        dist[k / 2]
    } else {
        0.5 * (dist[k / 2 - 1] + dist[k / 2])
    };
    Ok(med.max(MIN_BANDWIDTH))
}

fn resolve_bandwidth<T: Real>(x: &Tensor<T>, y: &Tensor<T>, kernel: &KernelSpec) -> Result<f64> {
    match (kernel.kind, kernel.bandwidth) {
        (KernelKind::Linear, _) => Ok(0.0),
        (KernelKind::Rbf, Bandwidth::Fixed(s)) => {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidConfig(alloc::format!(
                    "rbf bandwidth must be positive, got {s}"
                )));
            }
            Ok(s)
        }
        (KernelKind::Rbf, Bandwidth::MedianHeuristic) => median_heuristic_bandwidth(x, y),
    }
}

fn gram(
    kind: KernelKind,
    sigma: f64,
    a: &[f64],
    na: usize,
    b: &[f64],
    nb: usize,
    d: usize,
) -> Vec<f64> {
    match kind {
        KernelKind::Linear => dots(a, na, b, nb, d),
        KernelKind::Rbf => {
            let c = -0.5 / (sigma * sigma);
            sq_dists(a, na, b, nb, d)
                .into_iter()
                .map(|s| libm::exp(c * s))
                .collect()
        }
    }
}

fn check_estimator(n: usize, m: usize, estimator: Estimator) -> Result<()> {
    if estimator == Estimator::Unbiased && (n < 2 || m < 2) {
        return Err(Error::TooFewSamples(alloc::format!(
            "unbiased estimator needs n, m >= 2, got n={n}, m={m}"
        )));
    }
    Ok(())
}

/// Squared-MMD estimate between samples `x: [n, ..]` and `y: [m, ..]`; rows
/// are flattened to feature vectors.
pub fn mmd<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kernel: &KernelSpec,
    estimator: Estimator,
) -> Result<MmdEstimate> {
    let (n, m, d) = check_pair(x, y)?;
    check_estimator(n, m, estimator)?;
    let sigma = resolve_bandwidth(x, y, kernel)?;
    let (xs, ys) = (to_f64(x), to_f64(y));
    let kxx = gram(kernel.kind, sigma, &xs, n, &xs, n, d);
    let kyy = gram(kernel.kind, sigma, &ys, m, &ys, m, d);
    let kxy = gram(kernel.kind, sigma, &xs, n, &ys, m, d);
    let within = |k: &[f64], n: usize| -> f64 {
        match estimator {
            Estimator::Biased => k.iter().sum::<f64>() / (n * n) as f64,
            Estimator::Unbiased => {
                let diag: f64 = (0..n).map(|i| k[i * n + i]).sum();
                (k.iter().sum::<f64>() - diag) / (n * (n - 1)) as f64
            }
        }
    };
    let cross = kxy.iter().sum::<f64>() / (n * m) as f64;
    let mut value = within(&kxx, n) + within(&kyy, m) - 2.0 * cross;
    if estimator == Estimator::Biased {
        value = value.max(0.0);
    }
    Ok(MmdEstimate {
        value,
        estimator,
        n_x: n,
        n_y: m,
        bandwidth_used: sigma,
    })
}

/// Squared MMD with a fixed kernel, together with its gradients with respect
/// to every entry of `x` and of `y`. Used as a training loss, so the kernel
/// must be fully resolved (no median heuristic).
pub fn mmd_with_grad<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    kind: KernelKind,
    sigma: f64,
    estimator: Estimator,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let (n, m, d) = check_pair(x, y)?;
    check_estimator(n, m, estimator)?;
    if kind == KernelKind::Rbf && (!(sigma > 0.0) || !sigma.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!(
            "rbf bandwidth must be positive, got {sigma}"
        )));
    }
    let (xs, ys) = (to_f64(x), to_f64(y));
    let kxx = gram(kind, sigma, &xs, n, &xs, n, d);
    let kyy = gram(kind, sigma, &ys, m, &ys, m, d);
    let kxy = gram(kind, sigma, &xs, n, &ys, m, d);
    let (wxx, wyy) = match estimator {
        Estimator::Biased => (1.0 / (n * n) as f64, 1.0 / (m * m) as f64),
        Estimator::Unbiased => (1.0 / (n * (n - 1)) as f64, 1.0 / (m * (m - 1)) as f64),
    };
    let wxy = 1.0 / (n * m) as f64;
    let include_diag = estimator == Estimator::Biased;
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j || include_diag {
                value += wxx * kxx[i * n + j];
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            if i != j || include_diag {
                value += wyy * kyy[i * m + j];
            }
        }
    }
    value -= 2.0 * wxy * kxy.iter().sum::<f64>();

    // d k(a, b) / d a: rbf gives -k (a - b) / sigma^2, linear gives b.
    let inv_s2 = if kind == KernelKind::Rbf {
        1.0 / (sigma * sigma)
    } else {
        0.0
    };
    let grad_side = |a: &[f64],
                     na: usize,
                     kaa: &[f64],
                     waa: f64,
                     b: &[f64],
                     nb: usize,
                     kab: &[f64]|
     -> Vec<f64> {
        let mut g = vec![0.0; na * d];
        for i in 0..na {
            let ai = &a[i * d..(i + 1) * d];
            let gi = &mut g[i * d..(i + 1) * d];
            for j in 0..na {
                if i == j && !include_diag {
                    continue;
                }
                let aj = &a[j * d..(j + 1) * d];
                let coef = 2.0 * waa;
                for t in 0..d {
                    gi[t] += coef
                        * match kind {
                            KernelKind::Rbf => -kaa[i * na + j] * (ai[t] - aj[t]) * inv_s2,
                            KernelKind::Linear => aj[t],
                        };
                }
            }
            for j in 0..nb {
                let bj = &b[j * d..(j + 1) * d];
                let coef = -2.0 * wxy;
                for t in 0..d {
                    gi[t] += coef
                        * match kind {
                            KernelKind::Rbf => -kab[i * nb + j] * (ai[t] - bj[t]) * inv_s2,
                            KernelKind::Linear => bj[t],
                        };
                }
            }
        }
        g
    };
    let gx = grad_side(&xs, n, &kxx, wxx, &ys, m, &kxy);
    let kyx: Vec<f64> = (0..m)
        .flat_map(|j| (0..n).map(move |i| (i, j)))
        .map(|(i, j)| kxy[i * m + j])
        .collect();
    let gy = grad_side(&ys, m, &kyy, wyy, &xs, n, &kyx);
    let gx = Tensor::from_vec(x.shape(), gx.into_iter().map(T::of).collect())?;
    let gy = Tensor::from_vec(y.shape(), gy.into_iter().map(T::of).collect())?;
    Ok((value, gx, gy))
}

/// Averages `[n, c, h, w]` features over positions; other shapes pass through.
fn pooled<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = match t.shape() {
        [n, c, h, w] => [*n, *c, *h, *w],
        _ => return Ok(t.clone()),
    };
    let hw = h * w;
    let scale = T::of(1.0 / hw as f64);
    let data = t.data();
    let out = (0..n * c)
        .map(|k| data[k * hw..(k + 1) * hw].iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::from_vec(&[n, c], out)
}

/// Domain gap between two datasets before and after a projector.
///
/// `before` is measured on the extractor's last-layer feature vectors: map
/// outputs `[c, h, w]` are globally average pooled to `c` values per sample,
/// vector outputs are used as they are. `after` (when a projector is given)
/// is measured on the projector outputs for the raw extractor outputs, pooled
/// the same way if the projector emits maps. An identity projector therefore
/// reproduces `before` exactly.
pub fn measure_gap<T: Real>(
    extractor: &ParamModule<T>,
    projector: Option<&ParamModule<T>>,
    broad: &LabeledDataset,
    target: &LabeledDataset,
    kernel: &KernelSpec,
    estimator: Estimator,
) -> Result<(MmdEstimate, Option<MmdEstimate>)> {
    if !extractor.is_frozen() {
        return Err(Error::NotFrozen(extractor.name().into()));
    }
    if broad.is_empty() || target.is_empty() {
        return Err(Error::Empty("domain gap dataset"));
    }
    let fb = extract_features(extractor, broad)?;
    let ft = extract_features(extractor, target)?;
    let before = mmd(&pooled(&fb)?, &pooled(&ft)?, kernel, estimator)?;
    let after = match projector {
        Some(p) => {
            let pb = pooled(&crate::train::map_in_chunks(p, &fb)?)?;
            let pt = pooled(&crate::train::map_in_chunks(p, &ft)?)?;
            Some(mmd(&pb, &pt, kernel, estimator)?)
        }
        None => None,
    };
    Ok((before, after))
}
