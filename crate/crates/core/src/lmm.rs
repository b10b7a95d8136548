//! Linear mixing model: cube, endmember and abundance containers plus the
//! forward mixing arithmetic `Y = A·E + N`.
//!
//! All containers are pixel-major (band-interleaved-by-pixel): the values of
//! pixel `(i, j)` occupy `data[(i * width + j) * depth..][..depth]`.

use alloc::vec::Vec;

use crate::diffcore::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::math;

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Contract(alloc::format!("{what} contains non-finite values")))
    }
}

/// An `H × W × C` hyperspectral image.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HsiCube {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(dim_err!("cube must have at least one pixel, got {height}×{width}"));
        }
        if channels < 2 {
            return Err(dim_err!("cube needs at least 2 bands, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(dim_err!(
                "{height}×{width}×{channels} cube needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        check_finite(&data, "cube")?;
        Ok(HsiCube { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, alloc::vec![0.0; height * width * channels])
    }

    /// Builds a cube from an `[H·W, C]` or `[H, W, C]` tensor.
    pub fn from_tensor(height: usize, width: usize, t: &Tensor) -> Result<Self> {
        let c = *t.shape().last().unwrap_or(&0);
        Self::new(height, width, c, t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `N = H·W`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Flattened `[N, C]` matrix view.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::new(alloc::vec![self.pixels(), self.channels], self.data.clone()).expect("consistent cube")
    }

    /// Spatial `[H, W, C]` view.
    pub fn to_image(&self) -> Tensor {
        Tensor::new(alloc::vec![self.height, self.width, self.channels], self.data.clone()).expect("consistent cube")
    }

    /// `‖Y‖²_F`.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `p × C` endmember spectra, one per row. Doubles as the shared decoder weight.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EndmemberMatrix {
    p: usize,
    channels: usize,
    data: Vec<f64>,
}

impl EndmemberMatrix {
    pub fn new(p: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if p == 0 || channels == 0 {
            return Err(dim_err!("endmember matrix must be non-empty, got {p}×{channels}"));
        }
        if data.len() != p * channels {
            return Err(dim_err!("{p}×{channels} endmembers need {} values, got {}", p * channels, data.len()));
        }
        check_finite(&data, "endmember matrix")?;
        Ok(EndmemberMatrix { p, channels, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let channels = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != channels) {
            return Err(dim_err!("endmember rows have differing lengths"));
        }
        Self::new(rows.len(), channels, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(dim_err!("endmember tensor must be p×C, got {:?}", s));
        }
        Self::new(s[0], s[1], t.data().to_vec())
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.channels..(j + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.channels)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(alloc::vec![self.p, self.channels], self.data.clone()).expect("consistent endmembers")
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.p {
            return Err(dim_err!("permutation of length {} for {} endmembers", perm.len(), self.p));
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&j| self.row(j).to_vec()).collect();
        Self::from_rows(&rows)
    }
}

/// Per-pixel fractions, `H × W × p`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AbundanceMap {
    height: usize,
    width: usize,
    p: usize,
    data: Vec<f64>,
}

impl AbundanceMap {
    pub fn new(height: usize, width: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || p == 0 {
            return Err(dim_err!("abundance map must be non-empty, got {height}×{width}×{p}"));
        }
        if data.len() != height * width * p {
            return Err(dim_err!("{height}×{width}×{p} map needs {} values, got {}", height * width * p, data.len()));
        }
        check_finite(&data, "abundance map")?;
        Ok(AbundanceMap { height, width, p, data })
    }

    pub fn from_tensor(height: usize, width: usize, t: &Tensor) -> Result<Self> {
        let p = *t.shape().last().unwrap_or(&0);
        Self::new(height, width, p, t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.p..(index + 1) * self.p]
    }

    /// Flattened `[N, p]` matrix view.
    pub fn to_matrix(&self) -> Tensor {
        Tensor::new(alloc::vec![self.pixels(), self.p], self.data.clone()).expect("consistent map")
    }

    /// Values of endmember `j` over the image, row-major `H × W`.
    pub fn band(&self, j: usize) -> Vec<f64> {
        self.data.chunks(self.p).map(|px| px[j]).collect()
    }

    /// Channels reordered so that channel `i` of the result is channel `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.p {
            return Err(dim_err!("permutation of length {} for {} endmembers", perm.len(), self.p));
        }
        let data = self.data.chunks(self.p).flat_map(|px| perm.iter().map(move |&j| px[j])).collect();
        Self::new(self.height, self.width, self.p, data)
    }
}

/// `Y = A·E + N` applied per pixel.
pub fn mix(abundance: &AbundanceMap, endmembers: &EndmemberMatrix, noise: Option<&HsiCube>) -> Result<HsiCube> {
    if abundance.p() != endmembers.p() {
        return Err(dim_err!("abundance has {} endmembers, matrix has {}", abundance.p(), endmembers.p()));
    }
    let (n, p, c) = (abundance.pixels(), abundance.p(), endmembers.channels());
    let mut data = linalg::matmul(abundance.data(), endmembers.data(), n, p, c);
    if let Some(noise) = noise {
        if noise.height() != abundance.height() || noise.width() != abundance.width() || noise.channels() != c {
            return Err(dim_err!(
                "noise {}×{}×{} does not match output {}×{}×{}",
                noise.height(),
                noise.width(),
                noise.channels(),
                abundance.height(),
                abundance.width(),
                c
            ));
        }
        for (d, e) in data.iter_mut().zip(noise.data()) {
            *d += e;
        }
    }
    HsiCube::new(abundance.height(), abundance.width(), c, data)
}

/// Mean squared error `‖Y − A·E‖²_F / (N·C)`.
pub fn reconstruction_error(y: &HsiCube, a: &AbundanceMap, e: &EndmemberMatrix) -> Result<f64> {
    if y.height() != a.height() || y.width() != a.width() || y.channels() != e.channels() {
        return Err(dim_err!(
            "cube {}×{}×{} against abundance {}×{} and {} bands",
            y.height(),
            y.width(),
            y.channels(),
            a.height(),
            a.width(),
            e.channels()
        ));
    }
    let recon = mix(a, e, None)?;
    let sse: f64 = y.data().iter().zip(recon.data()).map(|(u, v)| (u - v) * (u - v)).sum();
    Ok(sse / y.data().len() as f64)
}

/// How far an abundance map is from the nonnegativity and sum-to-one constraints.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConstraintReport {
    pub min_value: f64,
    pub max_sum_deviation: f64,
}

pub fn constraint_report(a: &AbundanceMap) -> ConstraintReport {
    let min_value = a.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max_sum_deviation = a
        .data()
        .chunks(a.p())
        .map(|px| math::abs(px.iter().sum::<f64>() - 1.0))
        .fold(0.0, f64::max);
    ConstraintReport { min_value, max_sum_deviation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn pure_pixel_reproduces_endmember() {
        let e = EndmemberMatrix::new(3, 4, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let a = AbundanceMap::new(1, 2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let y = mix(&a, &e, None).unwrap();
        assert_eq!(y.pixel(0), e.row(2));
        assert_eq!(y.pixel(1), e.row(0));
    }

    #[test]
    fn zero_abundance_gives_zero_cube() {
        let e = EndmemberMatrix::new(2, 3, vec![0.3; 6]).unwrap();
        let a = AbundanceMap::new(2, 2, 2, vec![0.0; 8]).unwrap();
        assert!(mix(&a, &e, None).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn basis_mixing() {
        let e = EndmemberMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = AbundanceMap::new(1, 1, 2, vec![0.3, 0.7]).unwrap();
        assert_eq!(mix(&a, &e, None).unwrap().data(), &[0.3, 0.7]);
    }

    #[test]
    fn mismatched_endmember_count() {
        let e = EndmemberMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        let a = AbundanceMap::new(1, 1, 3, vec![0.3; 3]).unwrap();
        assert!(matches!(mix(&a, &e, None), Err(Error::Dimension(_))));
        let y = HsiCube::zeros(1, 1, 2).unwrap();
        assert!(matches!(reconstruction_error(&y, &a, &e), Err(Error::Dimension(_))));
    }

    #[test]
    fn noise_is_added() {
        let e = EndmemberMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let a = AbundanceMap::new(1, 1, 1, vec![1.0]).unwrap();
        let n = HsiCube::new(1, 1, 2, vec![0.5, -0.5]).unwrap();
        assert_eq!(mix(&a, &e, Some(&n)).unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn reconstruction_error_cases() {
        let e = EndmemberMatrix::new(2, 3, vec![0.1, 0.5, 0.9, 0.7, 0.2, 0.4]).unwrap();
        let a = AbundanceMap::new(2, 1, 2, vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let y = mix(&a, &e, None).unwrap();
        assert_eq!(reconstruction_error(&y, &a, &e).unwrap(), 0.0);
        let shifted = HsiCube::new(2, 1, 3, y.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((reconstruction_error(&shifted, &a, &e).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_error_matches_loop() {
        let e = EndmemberMatrix::new(3, 5, (0..15).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
        let a = AbundanceMap::new(2, 3, 3, (0..18).map(|i| ((i * 5) % 13) as f64 / 13.0).collect()).unwrap();
        let y = HsiCube::new(2, 3, 5, (0..30).map(|i| ((i * 3) % 17) as f64 / 17.0).collect()).unwrap();
        let mut sse = 0.0;
        for px in 0..6 {
            for b in 0..5 {
                let mut m = 0.0;
                for j in 0..3 {
                    m += a.pixel(px)[j] * e.row(j)[b];
                }
                sse += (y.pixel(px)[b] - m).powi(2);
            }
        }
        let got = reconstruction_error(&y, &a, &e).unwrap();
        assert!((got - sse / 30.0).abs() < 1e-14);
    }

    #[test]
    fn constraint_report_flags_negatives() {
        let a = AbundanceMap::new(1, 2, 2, vec![0.5, 0.5, -0.2, 1.2]).unwrap();
        let r = constraint_report(&a);
        assert_eq!(r.min_value, -0.2);
        assert!(r.max_sum_deviation < 1e-15);
        let b = AbundanceMap::new(1, 1, 2, vec![0.5, 0.75]).unwrap();
        assert!((constraint_report(&b).max_sum_deviation - 0.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mix_is_linear(vals in proptest::collection::vec(0.0f64..1.0, 2 * 3 * 2 * 2 + 6), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let a1 = AbundanceMap::new(2, 3, 2, vals[..12].to_vec()).unwrap();
            let a2 = AbundanceMap::new(2, 3, 2, vals[12..24].to_vec()).unwrap();
            let e = EndmemberMatrix::new(2, 3, vals[24..30].to_vec()).unwrap();
            let combo = AbundanceMap::new(2, 3, 2, a1.data().iter().zip(a2.data()).map(|(x, y)| alpha * x + beta * y).collect()).unwrap();
            let lhs = mix(&combo, &e, None).unwrap();
            let y1 = mix(&a1, &e, None).unwrap();
            let y2 = mix(&a2, &e, None).unwrap();
            for ((l, u), v) in lhs.data().iter().zip(y1.data()).zip(y2.data()) {
                prop_assert!((l - (alpha * u + beta * v)).abs() <= 1e-12);
            }
            prop_assert_eq!(reconstruction_error(&y1, &a1, &e).unwrap(), 0.0);
        }
    }
}
