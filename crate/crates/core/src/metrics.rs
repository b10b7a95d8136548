//! Unmixing quality metrics and endmember alignment.
//!
//! Angles are in degrees. Estimates are aligned to the ground truth by the
//! assignment minimizing total spectral angle before any score is taken.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::lmm::{AbundanceMap, EndmemberMatrix, HsiCube};
use crate::math;

/// Minimum-cost perfect matching on an `n × n` row-major cost matrix.
///
/// Returns `assignment` with `assignment[row] = col`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    if n == 0 {
        return Vec::new();
    }
    // potentials formulation, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(r - 1) * n + (j - 1)] - u[r] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Spectral angle between two spectra.
pub fn sad(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(dim_err!("spectra of length {} and {}", est.len(), truth.len()));
    }
    math::angle_degrees(est, truth).ok_or_else(|| Error::Undefined("spectral angle of a zero spectrum".into()))
}

/// `perm` such that `est.permuted(&perm)` lines up row by row with `truth`.
pub fn align_permutation(est: &EndmemberMatrix, truth: &EndmemberMatrix) -> Result<Vec<usize>> {
    check_endmembers(est, truth)?;
    let p = truth.p();
    let mut cost = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            // unmeasurable pairs are never preferred
            cost[i * p + j] = sad(est.row(j), truth.row(i)).unwrap_or(180.0);
        }
    }
    Ok(hungarian(&cost, p))
}

fn check_endmembers(est: &EndmemberMatrix, truth: &EndmemberMatrix) -> Result<()> {
    if est.p() != truth.p() || est.channels() != truth.channels() {
        return Err(dim_err!(
            "estimate is {}×{}, truth is {}×{}",
            est.p(),
            est.channels(),
            truth.p(),
            truth.channels()
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SadReport {
    pub mean: f64,
    pub per_endmember: Vec<f64>,
    /// Row `i` of the truth was matched with row `permutation[i]` of the estimate.
    pub permutation: Vec<usize>,
}

/// Row-by-row SAD of already aligned matrices.
pub fn sad_mean(est: &EndmemberMatrix, truth: &EndmemberMatrix) -> Result<SadReport> {
    check_endmembers(est, truth)?;
    let per_endmember = est.rows().zip(truth.rows()).map(|(a, b)| sad(a, b)).collect::<Result<Vec<f64>>>()?;
    let mean = per_endmember.iter().sum::<f64>() / per_endmember.len() as f64;
    Ok(SadReport { mean, per_endmember, permutation: (0..truth.p()).collect() })
}

/// SAD after optimal alignment.
pub fn sad_aligned(est: &EndmemberMatrix, truth: &EndmemberMatrix) -> Result<SadReport> {
    let perm = align_permutation(est, truth)?;
    let mut report = sad_mean(&est.permuted(&perm)?, truth)?;
    report.permutation = perm;
    Ok(report)
}

fn check_maps(est: &AbundanceMap, truth: &AbundanceMap) -> Result<()> {
    if est.height() != truth.height() || est.width() != truth.width() || est.p() != truth.p() {
        return Err(dim_err!(
            "abundance maps {}×{}×{} and {}×{}×{}",
            est.height(),
            est.width(),
            est.p(),
            truth.height(),
            truth.width(),
            truth.p()
        ));
    }
    Ok(())
}

/// `√(Σᵢ ‖aᵢ − âᵢ‖² / N)` over pixels.
pub fn rmse(est: &AbundanceMap, truth: &AbundanceMap) -> Result<f64> {
    check_maps(est, truth)?;
    let sse: f64 = est.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(math::sqrt(sse / truth.pixels() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AadReport {
    pub mean: f64,
    /// Pixels skipped because either abundance vector was zero.
    pub excluded: usize,
}

/// Mean per-pixel angle between true and estimated abundance vectors.
pub fn aad(est: &AbundanceMap, truth: &AbundanceMap) -> Result<AadReport> {
    check_maps(est, truth)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..truth.pixels() {
        if let Some(angle) = math::angle_degrees(est.pixel(i), truth.pixel(i)) {
            total += angle;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Undefined("no pixel has a measurable abundance angle".into()));
    }
    Ok(AadReport { mean: total / counted as f64, excluded: truth.pixels() - counted })
}

/// `10·log₁₀(‖clean‖² / ‖noisy − clean‖²)`; `+∞` when the cubes are identical.
pub fn snr_realized(clean: &HsiCube, noisy: &HsiCube) -> Result<f64> {
    if clean.height() != noisy.height() || clean.width() != noisy.width() || clean.channels() != noisy.channels() {
        return Err(dim_err!("cubes of different shape"));
    }
    let noise: f64 = clean.data().iter().zip(noisy.data()).map(|(a, b)| (b - a) * (b - a)).sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(clean.energy() / noise))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub rmse: f64,
    pub aad: f64,
    pub aad_excluded_pixels: usize,
    pub sad_mean: f64,
    pub sad_per_endmember: Vec<f64>,
    pub permutation: Vec<usize>,
    pub snr_realized: Option<f64>,
}

/// Aligns the estimate to the truth by SAD and scores all metrics.
///
/// `cubes` is `(clean, noisy)` when the realized SNR should be reported.
pub fn evaluate(
    est_endmembers: &EndmemberMatrix,
    est_abundance: &AbundanceMap,
    truth_endmembers: &EndmemberMatrix,
    truth_abundance: &AbundanceMap,
    cubes: Option<(&HsiCube, &HsiCube)>,
) -> Result<MetricsReport> {
    if est_abundance.p() != est_endmembers.p() {
        return Err(dim_err!("estimate has {} endmembers but {} abundance bands", est_endmembers.p(), est_abundance.p()));
    }
    let sad = sad_aligned(est_endmembers, truth_endmembers)?;
    let aligned = est_abundance.permuted(&sad.permutation)?;
    let rmse = rmse(&aligned, truth_abundance)?;
    let aad = aad(&aligned, truth_abundance)?;
    let snr_realized = match cubes {
        Some((clean, noisy)) => Some(snr_realized(clean, noisy)?),
        None => None,
    };
    if !rmse.is_finite() {
        return Err(Error::Evaluation(format!("rmse is {rmse}")));
    }
    Ok(MetricsReport {
        rmse,
        aad: aad.mean,
        aad_excluded_pixels: aad.excluded,
        sad_mean: sad.mean,
        sad_per_endmember: sad.per_endmember,
        permutation: sad.permutation,
        snr_realized,
    })
}
