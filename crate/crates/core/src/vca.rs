//! Vertex component analysis.
//!
//! Projects the data onto a `p`-dimensional signal subspace (projective or
//! affine depending on an SNR estimate), then repeatedly picks the pixel with
//! the largest projection onto a random direction orthogonal to the vertices
//! found so far. Returned rows are the raw spectra of the selected pixels.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::lmm::{EndmemberMatrix, HsiCube};
use crate::math;

/// Eigenvalues below this fraction of the largest count as numerically zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct VcaResult {
    pub endmembers: EndmemberMatrix,
    /// Pixel index of every selected vertex, in selection order.
    pub indices: Vec<usize>,
    /// Estimated SNR in dB that selected the projection variant.
    pub snr_estimate: f64,
    pub projective: bool,
}

pub fn vca_extract(cube: &HsiCube, p: usize, seed: u64) -> Result<EndmemberMatrix> {
    vca(cube, p, seed).map(|r| r.endmembers)
}

fn top_vectors(eig: &linalg::SymmetricEigen, d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|j| eig.vector(j)).collect()
}

fn project(data: &[f64], n: usize, l: usize, basis: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let px = &data[i * l..(i + 1) * l];
            basis.iter().map(|b| math::dot(px, b)).collect()
        })
        .collect()
}

pub fn vca(cube: &HsiCube, p: usize, seed: u64) -> Result<VcaResult> {
    let n = cube.pixels();
    let l = cube.channels();
    if p == 0 || p > l.min(n) {
        return Err(Error::Config(alloc::format!("p = {p} must lie in 1..={}", l.min(n))));
    }
    let y = cube.data();

    let mut corr = linalg::gram(y, n, l);
    for v in corr.iter_mut() {
        *v /= n as f64;
    }
    let corr_eig = linalg::symmetric_eigen(&corr, l);
    let top = corr_eig.values[0].max(0.0);
    let rank = corr_eig.values.iter().filter(|&&v| v > top * RANK_TOLERANCE).count();
    if rank < p {
        return Err(Error::Degenerate { rank, required: p });
    }

    if p == 1 {
        let u = corr_eig.vector(0);
        let idx = argmax_abs((0..n).map(|i| math::dot(cube.pixel(i), &u)));
        return Ok(VcaResult {
            endmembers: EndmemberMatrix::new(1, l, cube.pixel(idx).to_vec())?,
            indices: vec![idx],
            snr_estimate: f64::INFINITY,
            projective: true,
        });
    }

    let mut mean = vec![0.0; l];
    for px in y.chunks(l) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<f64> = y.chunks(l).flat_map(|px| px.iter().zip(&mean).map(|(a, b)| a - b)).collect();
    let mut cov = linalg::gram(&centered, n, l);
    for v in cov.iter_mut() {
        *v /= n as f64;
    }
    let cov_eig = linalg::symmetric_eigen(&cov, l);
    let affine_basis = top_vectors(&cov_eig, p);
    let x_p = project(&centered, n, l, &affine_basis);

    let power_y: f64 = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let power_x: f64 =
        x_p.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n as f64 + math::dot(&mean, &mean);
    let signal = power_x - (p as f64 / l as f64) * power_y;
    let noise = power_y - power_x;
    let snr_estimate = if noise <= 0.0 {
        f64::INFINITY
    } else if signal <= 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * math::log10(signal / noise)
    };
    let threshold = 15.0 + 10.0 * math::log10(p as f64);
    let projective = snr_estimate >= threshold;

    let points: Vec<Vec<f64>> = if projective {
        let basis = top_vectors(&corr_eig, p);
        let x = project(y, n, l, &basis);
        let mut u = vec![0.0; p];
        for r in &x {
            for (a, b) in u.iter_mut().zip(r) {
                *a += b;
            }
        }
        for a in u.iter_mut() {
            *a /= n as f64;
        }
        x.into_iter()
            .map(|r| {
                let s = math::dot(&r, &u);
                if s == 0.0 {
                    r
                } else {
                    r.iter().map(|v| v / s).collect()
                }
            })
            .collect()
    } else {
        let d = p - 1;
        let c = x_p.iter().map(|r| math::norm(&r[..d])).fold(0.0, f64::max);
        x_p.iter()
            .map(|r| {
                let mut v = r[..d].to_vec();
                v.push(c);
                v
            })
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut indices = Vec::with_capacity(p);
    for _ in 0..p {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        if selected.is_empty() {
            let mut e = vec![0.0; p];
            e[p - 1] = 1.0;
            basis.push(e);
        } else {
            for col in &selected {
                let mut r = col.clone();
                for b in &basis {
                    let c = math::dot(&r, b);
                    for (ri, bi) in r.iter_mut().zip(b) {
                        *ri -= c * bi;
                    }
                }
                let nr = math::norm(&r);
                if nr > 1e-12 * math::norm(col).max(1e-300) {
                    basis.push(r.iter().map(|v| v / nr).collect());
                }
            }
        }

        let mut direction = None;
        for _ in 0..100 {
            let w: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
            let mut f = w.clone();
            for b in &basis {
                let c = math::dot(&w, b);
                for (fi, bi) in f.iter_mut().zip(b) {
                    *fi -= c * bi;
                }
            }
            let nf = math::norm(&f);
            if nf > 1e-12 {
                direction = Some(f.iter().map(|v| v / nf).collect::<Vec<f64>>());
                break;
            }
        }
        let Some(f) = direction else {
            return Err(Error::Degenerate { rank: selected.len(), required: p });
        };
        let idx = argmax_abs(points.iter().map(|pt| math::dot(&f, pt)));
        selected.push(points[idx].clone());
        indices.push(idx);
    }

    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| cube.pixel(i).to_vec()).collect();
    Ok(VcaResult { endmembers: EndmemberMatrix::from_rows(&rows)?, indices, snr_estimate, projective })
}

fn argmax_abs(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        let a = math::abs(v);
        if a > best_val {
            best_val = a;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, DatasetSpec};
    use crate::lmm::{mix, AbundanceMap};
    use crate::metrics;

    fn pure_spec(p: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            height: 24,
            width: 24,
            channels: 40,
            p,
            snr_db: f64::INFINITY,
            dirichlet_alpha: 1.0,
            seed,
            pure_pixel_injection: true,
        }
    }

    #[test]
    fn recovers_pure_pixels_exactly() {
        let d = build_dataset(&pure_spec(3, 2)).unwrap();
        let est = vca_extract(&d.cube, 3, 9).unwrap();
        let report = metrics::sad_aligned(&est, &d.truth_endmembers).unwrap();
        assert!(report.per_endmember.iter().all(|&s| s <= 0.1), "{:?}", report.per_endmember);
    }

    #[test]
    fn distinct_repeated_pixels() {
        let e = EndmemberMatrix::new(3, 4, vec![0.9, 0.1, 0.2, 0.3, 0.1, 0.8, 0.3, 0.1, 0.2, 0.2, 0.1, 0.9]).unwrap();
        let mut a = Vec::new();
        for i in 0..30 {
            let mut row = [0.0; 3];
            row[i % 3] = 1.0;
            a.extend_from_slice(&row);
        }
        let cube = mix(&AbundanceMap::new(5, 6, 3, a).unwrap(), &e, None).unwrap();
        let est = vca_extract(&cube, 3, 1).unwrap();
        let mut found: Vec<Vec<f64>> = est.rows().map(|r| r.to_vec()).collect();
        found.sort_by(|x, y| x[0].total_cmp(&y[0]));
        let mut truth: Vec<Vec<f64>> = e.rows().map(|r| r.to_vec()).collect();
        truth.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(found, truth);
    }

    #[test]
    fn single_vertex_is_largest_principal_projection() {
        let d = build_dataset(&DatasetSpec { snr_db: 30.0, ..pure_spec(3, 5) }).unwrap();
        let r = vca(&d.cube, 1, 0).unwrap();
        let l = d.cube.channels();
        let mut corr = linalg::gram(d.cube.data(), d.cube.pixels(), l);
        corr.iter_mut().for_each(|v| *v /= d.cube.pixels() as f64);
        let u = linalg::symmetric_eigen(&corr, l).vector(0);
        let proj: Vec<f64> = (0..d.cube.pixels()).map(|i| math::dot(d.cube.pixel(i), &u).abs()).collect();
        let best = proj.iter().copied().fold(0.0, f64::max);
        assert_eq!(proj[r.indices[0]], best);
    }

    #[test]
    fn outputs_are_pixels_of_the_cube() {
        let d = build_dataset(&DatasetSpec { snr_db: 25.0, ..pure_spec(4, 8) }).unwrap();
        let r = vca(&d.cube, 4, 3).unwrap();
        for (row, &idx) in r.endmembers.rows().zip(&r.indices) {
            assert_eq!(row, d.cube.pixel(idx));
        }
    }

    #[test]
    fn low_snr_uses_the_affine_branch() {
        let d = build_dataset(&DatasetSpec { snr_db: 5.0, pure_pixel_injection: false, ..pure_spec(4, 8) }).unwrap();
        let r = vca(&d.cube, 4, 3).unwrap();
        assert!(!r.projective, "estimated snr {}", r.snr_estimate);
        assert_eq!(r.indices.len(), 4);
    }

    #[test]
    fn rank_deficient_data_is_reported() {
        let e = EndmemberMatrix::new(2, 4, vec![0.9, 0.1, 0.2, 0.3, 0.1, 0.8, 0.3, 0.1]).unwrap();
        let a = AbundanceMap::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.2, 0.8]).unwrap();
        let cube = mix(&a, &e, None).unwrap();
        match vca_extract(&cube, 3, 0) {
            Err(Error::Degenerate { rank, required }) => assert_eq!((rank, required), (2, 3)),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn quality_does_not_depend_on_seed() {
        let d = build_dataset(&pure_spec(4, 6)).unwrap();
        let sads: Vec<f64> = (0..4)
            .map(|s| metrics::sad_aligned(&vca_extract(&d.cube, 4, s).unwrap(), &d.truth_endmembers).unwrap().mean)
            .collect();
        let lo = sads.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sads.iter().copied().fold(0.0, f64::max);
        assert!(hi - lo <= 0.5, "{sads:?}");
    }
}
