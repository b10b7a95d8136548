use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smile_core::diffcore::Tensor;
use smile_core::lmm::{AbundanceMap, EndmemberMatrix, HsiCube};
use smile_core::metrics::{aad, align_permutation, rmse, sad_aligned};
use smile_core::sr::downsample;
use smile_core::unmix::{loss_l3_nuclear, Normalization};

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

fn permutations(p: usize) -> Vec<Vec<usize>> {
    if p == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(p - 1) {
        for pos in 0..=rest.len() {
            let mut perm = rest.clone();
            perm.insert(pos, p - 1);
            out.push(perm);
        }
    }
    out
}

#[test]
fn nuclear_norm_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        // abundance matrices are always at least as tall as they are wide
        let p = rng.random_range(1..7);
        let (h, w) = (rng.random_range(2..6), rng.random_range(3..6));
        let data = uniform(&mut rng, h * w * p, -1.0, 1.0);
        let a = AbundanceMap::new(h, w, p, data.clone()).unwrap();
        let ours = loss_l3_nuclear(&a, Normalization::RawSum).unwrap();
        let svd = DMatrix::from_row_slice(h * w, p, &data).singular_values().sum();
        assert!((ours - svd).abs() <= 1e-8 * svd, "case {case}: {ours} vs {svd}");
    }
}

#[test]
fn rmse_and_aad_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (h, w, p) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(2..7));
        let x = uniform(&mut rng, h * w * p, 0.01, 1.0);
        let y = uniform(&mut rng, h * w * p, 0.01, 1.0);
        let a = AbundanceMap::new(h, w, p, x.clone()).unwrap();
        let b = AbundanceMap::new(h, w, p, y.clone()).unwrap();

        let mut sse = 0.0;
        let mut angles = 0.0;
        for i in 0..h * w {
            let (u, v) = (&x[i * p..(i + 1) * p], &y[i * p..(i + 1) * p]);
            for j in 0..p {
                sse += (u[j] - v[j]).powi(2);
            }
            angles += angle_deg(u, v);
        }
        let n = (h * w) as f64;
        assert!((rmse(&a, &b).unwrap() - (sse / n).sqrt()).abs() <= 1e-10);
        assert!((aad(&a, &b).unwrap().mean - angles / n).abs() <= 1e-10);
    }
}

#[test]
fn alignment_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in 1..=5 {
        for _ in 0..10 {
            let c = 12;
            let est = EndmemberMatrix::new(p, c, uniform(&mut rng, p * c, 0.0, 1.0)).unwrap();
            let truth = EndmemberMatrix::new(p, c, uniform(&mut rng, p * c, 0.0, 1.0)).unwrap();
            let best = permutations(p)
                .iter()
                .map(|perm| (0..p).map(|i| angle_deg(est.row(perm[i]), truth.row(i))).sum::<f64>() / p as f64)
                .fold(f64::INFINITY, f64::min);
            let report = sad_aligned(&est, &truth).unwrap();
            assert!((report.mean - best).abs() <= 1e-10, "p={p}: {} vs {best}", report.mean);
            assert_eq!(report.permutation, align_permutation(&est, &truth).unwrap());
        }
    }
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

#[test]
fn downsample_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (h, w, c, k, s) in [(8, 8, 3, 5, 2), (6, 9, 2, 3, 3), (12, 4, 2, 5, 4), (5, 5, 4, 3, 1), (10, 10, 2, 7, 2)] {
        let img = uniform(&mut rng, h * w * c, -1.0, 1.0);
        let kern = uniform(&mut rng, k * k, 0.0, 1.0);
        let hr = HsiCube::new(h, w, c, img.clone()).unwrap();
        let out = downsample(&hr, &Tensor::new(vec![k, k], kern.clone()).unwrap(), s);
        if h % s != 0 || w % s != 0 {
            assert!(out.is_err());
            continue;
        }
        let out = out.unwrap();
        let r = (k / 2) as isize;
        for oi in 0..h / s {
            for oj in 0..w / s {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let row = mirror((oi * s) as isize + u as isize - r, h);
                            let col = mirror((oj * s) as isize + v as isize - r, w);
                            acc += kern[u * k + v] * img[(row * w + col) * c + ch];
                        }
                    }
                    let got = out.data()[((oi * (w / s)) + oj) * c + ch];
                    assert!((got - acc).abs() <= 1e-12, "({oi},{oj},{ch}): {got} vs {acc}");
                }
            }
        }
    }
}
