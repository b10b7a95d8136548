//! Synthetic scenes: Dirichlet abundances, smooth endmember spectra and
//! Gaussian noise calibrated to a target SNR.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::lmm::{mix, AbundanceMap, EndmemberMatrix, HsiCube};
use crate::math;

/// Minimum pairwise spectral angle between synthesized endmembers, degrees.
pub const MIN_ENDMEMBER_SEPARATION_DEG: f64 = 10.0;
const MAX_ENDMEMBER_DRAWS: usize = 1000;

const ABUNDANCE_STREAM: u64 = 1;
const ENDMEMBER_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub p: usize,
    /// Target SNR in dB; `f64::INFINITY` disables noise.
    pub snr_db: f64,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    pub pure_pixel_injection: bool,
}

impl DatasetSpec {
    /// 64×64 scene with 224 bands; `p` between 3 and 10 in the reference experiments.
    pub fn dataset1(p: usize, snr_db: f64, seed: u64) -> Self {
        DatasetSpec {
            height: 64,
            width: 64,
            channels: 224,
            p,
            snr_db,
            dirichlet_alpha: 1.0,
            seed,
            pure_pixel_injection: false,
        }
    }

    /// 100×100 scene, four endmembers, 30 dB. Only the dimensions and noise
    /// level follow the reference setup; the abundance construction is the
    /// same Dirichlet recipe as `dataset1`.
    pub fn dataset2(seed: u64) -> Self {
        DatasetSpec { height: 100, width: 100, p: 4, snr_db: 30.0, ..Self::dataset1(4, 30.0, seed) }
    }

    pub fn noiseless(mut self) -> Self {
        self.snr_db = f64::INFINITY;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.p == 0 {
            return Err(Error::Config("height, width, channels and p must be positive".into()));
        }
        if self.channels < 2 {
            return Err(Error::Config("at least two bands are required".into()));
        }
        if self.p > self.channels {
            return Err(Error::Config(alloc::format!("p = {} exceeds {} channels", self.p, self.channels)));
        }
        if self.pure_pixel_injection && self.p > self.height * self.width {
            return Err(Error::Config("more endmembers than pixels for pure-pixel injection".into()));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::Config(alloc::format!("dirichlet_alpha must be positive, got {}", self.dirichlet_alpha)));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config("snr_db must be a number or +inf".into()));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// I.i.d. Dirichlet(α·1ₚ) rows, optionally with one pure pixel per endmember.
pub fn sample_dirichlet_abundance(spec: &DatasetSpec) -> Result<AbundanceMap> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, ABUNDANCE_STREAM);
    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0).map_err(|e| Error::Config(alloc::format!("{e}")))?;
    let n = spec.height * spec.width;
    let p = spec.p;
    let mut data = Vec::with_capacity(n * p);
    let mut row = vec![0.0; p];
    for _ in 0..n {
        loop {
            for v in row.iter_mut() {
                *v = gamma.sample(&mut rng);
            }
            let total: f64 = row.iter().sum();
            if total > 0.0 && total.is_finite() {
                data.extend(row.iter().map(|v| v / total));
                break;
            }
        }
    }
    if spec.pure_pixel_injection {
        // Partial Fisher-Yates to choose p distinct pixels.
        let mut idx: Vec<usize> = (0..n).collect();
        for j in 0..p {
            let pick = rng.random_range(j..n);
            idx.swap(j, pick);
            let px = idx[j];
            for (c, v) in data[px * p..(px + 1) * p].iter_mut().enumerate() {
                *v = if c == j { 1.0 } else { 0.0 };
            }
        }
    }
    AbundanceMap::new(spec.height, spec.width, p, data)
}

fn bump_spectrum(rng: &mut ChaCha8Rng, channels: usize) -> Vec<f64> {
    let c = channels as f64;
    let bumps = rng.random_range(3..=6);
    let mut s = vec![0.0; channels];
    for _ in 0..bumps {
        let center = rng.random_range(0.0..c);
        let width = rng.random_range(0.06 * c..0.18 * c);
        let amp = rng.random_range(0.2..1.0);
        for (b, v) in s.iter_mut().enumerate() {
            let z = (b as f64 - center) / width;
            *v += amp * math::exp(-0.5 * z * z);
        }
    }
    let max = s.iter().copied().fold(0.0, f64::max);
    s.iter().map(|v| v / max).collect()
}

/// Smooth spectra in `[0, 1]` with pairwise angles of at least
/// [`MIN_ENDMEMBER_SEPARATION_DEG`].
pub fn generate_endmembers(spec: &DatasetSpec) -> Result<EndmemberMatrix> {
    generate_separated(spec, MIN_ENDMEMBER_SEPARATION_DEG)
}

fn generate_separated(spec: &DatasetSpec, min_angle: f64) -> Result<EndmemberMatrix> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, ENDMEMBER_STREAM);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.p);
    let mut draws = 0;
    while rows.len() < spec.p {
        if draws == MAX_ENDMEMBER_DRAWS {
            return Err(Error::Generation(alloc::format!(
                "could not separate {} spectra by {}° within {} draws",
                spec.p,
                min_angle,
                MAX_ENDMEMBER_DRAWS
            )));
        }
        draws += 1;
        let candidate = bump_spectrum(&mut rng, spec.channels);
        let separated = rows.iter().all(|r| {
            math::angle_degrees(r, &candidate).is_some_and(|a| a >= min_angle)
        });
        if separated {
            rows.push(candidate);
        }
    }
    EndmemberMatrix::from_rows(&rows)
}

/// Adds zero-mean Gaussian noise with `σ² = mean(Y²) / 10^(snr/10)`.
///
/// `snr_db = +∞` returns the input unchanged.
pub fn add_noise_to_snr(clean: &HsiCube, snr_db: f64, seed: u64) -> Result<HsiCube> {
    if snr_db == f64::INFINITY {
        return Ok(clean.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(alloc::format!("invalid SNR {snr_db}")));
    }
    let energy = clean.energy();
    if energy == 0.0 {
        return Err(Error::Contract("cannot calibrate noise against a zero-energy cube".into()));
    }
    let variance = energy / clean.data().len() as f64 / math::pow(10.0, snr_db / 10.0);
    let sigma = math::sqrt(variance);
    let mut rng = stream_rng(seed, NOISE_STREAM);
    let data = clean
        .data()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    HsiCube::new(clean.height(), clean.width(), clean.channels(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cube: HsiCube,
    /// The noiseless mixture.
    pub clean: HsiCube,
    pub truth_abundance: AbundanceMap,
    pub truth_endmembers: EndmemberMatrix,
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let truth_abundance = sample_dirichlet_abundance(spec)?;
    let truth_endmembers = generate_endmembers(spec)?;
    let clean = mix(&truth_abundance, &truth_endmembers, None)?;
    let cube = add_noise_to_snr(&clean, spec.snr_db, spec.seed)?;
    Ok(Dataset { cube, clean, truth_abundance, truth_endmembers })
}
