//! Super-resolution branch: a convolutional generator maps frozen noise to a
//! high-resolution abundance map, a small MLP maps frozen noise to a blur
//! kernel, and the decoded high-resolution cube is blurred and decimated back
//! to the observed grid.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Activation, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::layers::{self, ConvLayer, Dense, LayerVars};
use crate::lmm::{AbundanceMap, HsiCube};
use crate::unmix::{self, Normalization, SharedDecoderParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SrConfig {
    /// Upsampling factor between the observed and generated grids.
    pub scale: usize,
    /// Side of the blur kernel, odd.
    pub kernel_size: usize,
    /// Channels of the generator's noise input.
    pub noise_channels: usize,
    /// Width of the generator's hidden conv layers.
    pub generator_width: usize,
    /// Length of the kernel generator's noise input.
    pub kernel_noise: usize,
    pub kernel_hidden: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig { scale: 2, kernel_size: 5, noise_channels: 8, generator_width: 32, kernel_noise: 64, kernel_hidden: 64 }
    }
}

impl SrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(alloc::format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.noise_channels == 0 || self.generator_width == 0 || self.kernel_noise == 0 || self.kernel_hidden == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        Ok(())
    }
}

/// Standard-normal inputs drawn once at initialization.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseInputs {
    /// `sH × sW × d`
    pub l_y: Tensor,
    /// `1 × kernel_noise`
    pub l_k: Tensor,
}

impl NoiseInputs {
    pub fn sample<R: Rng>(height: usize, width: usize, cfg: &SrConfig, rng: &mut R) -> Self {
        let shape = [height * cfg.scale, width * cfg.scale, cfg.noise_channels];
        let l_y = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
        let l_k = Tensor::from_fn(&[1, cfg.kernel_noise], |_| rng.sample(StandardNormal));
        NoiseInputs { l_y, l_k }
    }
}

/// Generator weights: three 3×3 conv layers `d → w → w → p` and the kernel
/// MLP `n → h → k²`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SrGeneratorParams {
    pub generator: Vec<ConvLayer>,
    pub kernel_net: Vec<Dense>,
}

impl SrGeneratorParams {
    pub fn init<R: Rng>(p: usize, cfg: &SrConfig, rng: &mut R) -> Self {
        let w = cfg.generator_width;
        let generator = vec![
            ConvLayer::he_uniform(3, cfg.noise_channels, w, rng),
            ConvLayer::he_uniform(3, w, w, rng),
            ConvLayer::he_uniform(3, w, p, rng),
        ];
        let kernel_net = vec![
            Dense::he_uniform(cfg.kernel_noise, cfg.kernel_hidden, rng),
            Dense::he_uniform(cfg.kernel_hidden, cfg.kernel_size * cfg.kernel_size, rng),
        ];
        SrGeneratorParams { generator, kernel_net }
    }

    pub fn p(&self) -> usize {
        self.generator[self.generator.len() - 1].outputs()
    }

    pub fn kernel_size(&self) -> Result<usize> {
        let n = self.kernel_net[self.kernel_net.len() - 1].outputs();
        let k = (1..=n).find(|k| k * k >= n).unwrap_or(1);
        if k * k != n {
            return Err(dim_err!("kernel generator emits {} values, not a square", n));
        }
        Ok(k)
    }

    pub fn parameter_count(&self) -> usize {
        self.generator.iter().map(ConvLayer::parameter_count).sum::<usize>()
            + self.kernel_net.iter().map(Dense::parameter_count).sum::<usize>()
    }
}

/// `sH × sW × d` noise to an `sH × sW × p` abundance image.
pub fn hr_abundance_on_tape(tape: &mut Tape, l_y: Var, generator: &[LayerVars]) -> Result<Var> {
    layers::conv_forward(tape, l_y, generator)
}

/// Noise row to a `k × k` kernel on the probability simplex.
pub fn kernel_on_tape(tape: &mut Tape, l_k: Var, kernel_net: &[LayerVars], k: usize) -> Result<Var> {
    let logits = layers::mlp_forward(tape, l_k, kernel_net, true)?;
    let soft = tape.activation(logits, Activation::SoftmaxOverAll);
    tape.reshape(soft, &[k, k])
}

pub fn downsample_on_tape(tape: &mut Tape, hr: Var, kernel: Var, scale: usize) -> Result<Var> {
    let s = tape.shape(hr);
    if s.len() != 3 || s[0] % scale != 0 || s[1] % scale != 0 {
        return Err(dim_err!("image {:?} is not divisible by scale {}", s, scale));
    }
    tape.conv2d_stride(hr, kernel, scale)
}

/// Blurs and decimates the HR abundance image, decodes it with the shared
/// endmembers and compares with the observed `H × W × C` image.
///
/// The kernel acts on every channel alike and decoding is linear per pixel,
/// so decimating the `p`-channel abundance before decoding gives the same
/// cube as decimating the decoded `C`-channel one, at a fraction of the cost.
pub fn l2_on_tape(
    tape: &mut Tape,
    observed: Var,
    hr_abundance: Var,
    endmembers: Var,
    kernel: Var,
    scale: usize,
    norm: Normalization,
) -> Result<Var> {
    if tape.shape(hr_abundance).len() != 3 {
        return Err(dim_err!("HR abundance must be an image, got {:?}", tape.shape(hr_abundance)));
    }
    let low = downsample_on_tape(tape, hr_abundance, kernel, scale)?;
    let ls = tape.shape(low).to_vec();
    let flat = tape.reshape(low, &[ls[0] * ls[1], ls[2]])?;
    let decoded = unmix::decode_on_tape(tape, flat, endmembers)?;
    let c = tape.shape(decoded)[1];
    let image = tape.reshape(decoded, &[ls[0], ls[1], c])?;
    if tape.shape(image) != tape.shape(observed) {
        return Err(dim_err!("reconstruction {:?} against observation {:?}", tape.shape(image), tape.shape(observed)));
    }
    unmix::squared_error_on_tape(tape, observed, image, norm)
}

fn check_generator(noise: &NoiseInputs, params: &SrGeneratorParams) -> Result<()> {
    let s = noise.l_y.shape();
    let cin = params.generator[0].weight.shape()[2];
    if s.len() != 3 || s[2] != cin {
        return Err(dim_err!("noise {:?} against a generator expecting {} channels", s, cin));
    }
    let nk = params.kernel_net[0].inputs();
    if noise.l_k.shape() != [1, nk] {
        return Err(dim_err!("kernel noise {:?} against a generator expecting {}", noise.l_k.shape(), nk));
    }
    Ok(())
}

pub fn generate_hr_abundance(noise: &NoiseInputs, params: &SrGeneratorParams) -> Result<AbundanceMap> {
    check_generator(noise, params)?;
    let mut tape = Tape::new();
    let l_y = tape.constant(noise.l_y.clone());
    let vars = layers::register_conv(&mut tape, &params.generator, false);
    let a = hr_abundance_on_tape(&mut tape, l_y, &vars)?;
    let s = noise.l_y.shape();
    AbundanceMap::from_tensor(s[0], s[1], tape.value(a))
}

pub fn generate_kernel(noise: &NoiseInputs, params: &SrGeneratorParams) -> Result<Tensor> {
    check_generator(noise, params)?;
    let k = params.kernel_size()?;
    let mut tape = Tape::new();
    let l_k = tape.constant(noise.l_k.clone());
    let vars = layers::register_dense(&mut tape, &params.kernel_net, false);
    let kv = kernel_on_tape(&mut tape, l_k, &vars, k)?;
    Ok(tape.value(kv).clone())
}

pub fn downsample(hr: &HsiCube, kernel: &Tensor, scale: usize) -> Result<HsiCube> {
    let mut tape = Tape::new();
    let x = tape.constant(hr.to_image());
    let k = tape.constant(kernel.clone());
    let out = downsample_on_tape(&mut tape, x, k, scale)?;
    HsiCube::from_tensor(hr.height() / scale, hr.width() / scale, tape.value(out))
}

/// Reconstruction loss of the super-resolution branch.
pub fn loss_l2(
    y: &HsiCube,
    noise: &NoiseInputs,
    params: &SrGeneratorParams,
    decoder: &SharedDecoderParams,
    cfg: &SrConfig,
    norm: Normalization,
) -> Result<f64> {
    check_generator(noise, params)?;
    let mut tape = Tape::new();
    let observed = tape.constant(y.to_image());
    let l_y = tape.constant(noise.l_y.clone());
    let l_k = tape.constant(noise.l_k.clone());
    let gen = layers::register_conv(&mut tape, &params.generator, false);
    let knet = layers::register_dense(&mut tape, &params.kernel_net, false);
    let e = tape.constant(decoder.endmembers.clone());
    let a = hr_abundance_on_tape(&mut tape, l_y, &gen)?;
    let k = kernel_on_tape(&mut tape, l_k, &knet, params.kernel_size()?)?;
    let l = l2_on_tape(&mut tape, observed, a, e, k, cfg.scale, norm)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, reflect_index};
    use crate::lmm::{mix, EndmemberMatrix};
    use crate::math;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SrConfig {
        SrConfig { scale: 2, kernel_size: 3, noise_channels: 2, generator_width: 3, kernel_noise: 4, kernel_hidden: 5 }
    }

    fn reflect(i: isize, n: usize) -> usize {
        // numpy "reflect": -1 → 1, n → n-2
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
    fn reflect_oracle_agrees_with_the_library() {
        for n in 2..6 {
            for i in -4..(n as isize + 4) {
                assert_eq!(reflect(i, n), reflect_index(i, n));
            }
        }
    }

    fn brute_downsample(x: &[f64], h: usize, w: usize, c: usize, k: &[f64], ks: usize, s: usize) -> Vec<f64> {
        let r = (ks / 2) as isize;
        let (oh, ow) = (h / s, w / s);
        let mut out = vec![0.0; oh * ow * c];
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for u in 0..ks {
                        for v in 0..ks {
                            let ri = reflect((i * s) as isize + u as isize - r, h);
                            let rj = reflect((j * s) as isize + v as isize - r, w);
                            acc += k[u * ks + v] * x[(ri * w + rj) * c + ch];
                        }
                    }
                    out[(i * ow + j) * c + ch] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn hr_map_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SrConfig { noise_channels: 2, generator_width: 4, ..SrConfig::default() };
        let noise = NoiseInputs::sample(64, 64, &cfg, &mut rng);
        let params = SrGeneratorParams::init(5, &cfg, &mut rng);
        let a = generate_hr_abundance(&noise, &params).unwrap();
        assert_eq!((a.height(), a.width(), a.p()), (128, 128, 5));
        assert!(a.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_generator_gives_constant_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = small_cfg();
        let noise = NoiseInputs::sample(3, 3, &cfg, &mut rng);
        let mut params = SrGeneratorParams::init(2, &cfg, &mut rng);
        for l in params.generator.iter_mut() {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        params.generator[2].bias = Tensor::new(vec![2], vec![0.3, -2.0]).unwrap();
        let a = generate_hr_abundance(&noise, &params).unwrap();
        for i in 0..a.pixels() {
            assert_eq!(a.pixel(i), &[math::softplus(0.3), math::softplus(-2.0)]);
        }
    }

    #[test]
    fn generator_matches_a_loop_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small_cfg();
        let noise = NoiseInputs::sample(2, 2, &cfg, &mut rng);
        let mut params = SrGeneratorParams::init(2, &cfg, &mut rng);
        for l in params.generator.iter_mut() {
            for b in l.bias.data_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
        }
        let got = generate_hr_abundance(&noise, &params).unwrap();

        let (h, w) = (4, 4);
        let mut x = noise.l_y.data().to_vec();
        for l in &params.generator {
            let s = l.weight.shape();
            let (k, cin, cout) = (s[0], s[2], s[3]);
            let mut next = vec![0.0; h * w * cout];
            for i in 0..h {
                for j in 0..w {
                    for o in 0..cout {
                        let mut z = l.bias.data()[o];
                        for u in 0..k {
                            for v in 0..k {
                                let ri = reflect(i as isize + u as isize - 1, h);
                                let rj = reflect(j as isize + v as isize - 1, w);
                                for ci in 0..cin {
                                    z += l.weight.data()[((u * k + v) * cin + ci) * cout + o] * x[(ri * w + rj) * cin + ci];
                                }
                            }
                        }
                        next[(i * w + j) * cout + o] = (1.0 + z.exp()).ln();
                    }
                }
            }
            x = next;
        }
        for (g, e) in got.data().iter().zip(&x) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn kernel_is_on_the_simplex() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SrConfig::default();
            let noise = NoiseInputs::sample(2, 2, &cfg, &mut rng);
            let params = SrGeneratorParams::init(3, &cfg, &mut rng);
            let k = generate_kernel(&noise, &params).unwrap();
            assert_eq!(k.shape(), &[5, 5]);
            assert!(k.data().iter().all(|&v| v >= 0.0));
            assert!((k.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn huge_logit_gives_a_delta_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_cfg();
        let noise = NoiseInputs::sample(2, 2, &cfg, &mut rng);
        let mut params = SrGeneratorParams::init(2, &cfg, &mut rng);
        let last = &mut params.kernel_net[1];
        last.weight = Tensor::zeros(last.weight.shape());
        last.bias.data_mut()[4] = 1000.0;
        let k = generate_kernel(&noise, &params).unwrap();
        for (i, &v) in k.data().iter().enumerate() {
            assert!((v - if i == 4 { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_net_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = small_cfg();
        let noise = NoiseInputs::sample(2, 2, &cfg, &mut rng);
        let params = SrGeneratorParams::init(2, &cfg, &mut rng);
        let hr = HsiCube::new(4, 4, 3, (0..48).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let target = HsiCube::new(2, 2, 3, (0..12).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();

        let loss = |w: &[f64]| -> Result<f64> {
            let mut p = params.clone();
            p.kernel_net[0].weight = Tensor::new(p.kernel_net[0].weight.shape().to_vec(), w.to_vec())?;
            let k = generate_kernel(&noise, &p)?;
            let down = downsample(&hr, &k, 2)?;
            Ok(down.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        };

        let mut tape = Tape::new();
        let l_k = tape.constant(noise.l_k.clone());
        let vars = layers::register_dense(&mut tape, &params.kernel_net, true);
        let k = kernel_on_tape(&mut tape, l_k, &vars, 3).unwrap();
        let x = tape.constant(hr.to_image());
        let d = downsample_on_tape(&mut tape, x, k, 2).unwrap();
        let t = tape.constant(target.to_image());
        let l = unmix::squared_error_on_tape(&mut tape, t, d, Normalization::RawSum).unwrap();
        let analytic = tape.backward(l).unwrap().of(vars[0].weight).data().to_vec();
        let mut w = params.kernel_net[0].weight.data().to_vec();
        let err = finite_diff_check(loss, &mut w, &analytic, 1e-5).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    fn delta(k: usize) -> Tensor {
        Tensor::from_fn(&[k, k], |i| if i == (k * k) / 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn downsample_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hr = HsiCube::new(8, 8, 3, (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let sub = downsample(&hr, &delta(3), 2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(sub.pixel(i * 4 + j), hr.pixel(2 * i * 8 + 2 * j));
            }
        }

        let flat = HsiCube::new(6, 6, 2, vec![0.7; 72]).unwrap();
        let k = Tensor::from_fn(&[5, 5], |i| (i + 1) as f64 / 325.0);
        let out = downsample(&flat, &k, 2).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let raw: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let kern = Tensor::new(vec![3, 3], raw.iter().map(|v| v / total).collect()).unwrap();
        let got = downsample(&hr, &kern, 2).unwrap();
        let want = brute_downsample(hr.data(), 8, 8, 3, kern.data(), 3, 2);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }

        let odd = HsiCube::new(5, 4, 2, vec![0.1; 40]).unwrap();
        assert!(matches!(downsample(&odd, &delta(3), 2), Err(Error::Dimension(_))));
    }

    struct Instance {
        y: HsiCube,
        noise: NoiseInputs,
        params: SrGeneratorParams,
        decoder: SharedDecoderParams,
        cfg: SrConfig,
    }

    fn instance(seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_cfg();
        let noise = NoiseInputs::sample(3, 3, &cfg, &mut rng);
        let params = SrGeneratorParams::init(2, &cfg, &mut rng);
        let e = EndmemberMatrix::new(2, 4, (0..8).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap();
        let y = HsiCube::new(3, 3, 4, (0..36).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        Instance { y, noise, params, decoder: SharedDecoderParams::from_endmembers(&e), cfg }
    }

    #[test]
    fn l2_is_the_composition_of_its_parts() {
        let t = instance(7);
        let a = generate_hr_abundance(&t.noise, &t.params).unwrap();
        let k = generate_kernel(&t.noise, &t.params).unwrap();
        let hr = mix(&a, &t.decoder.to_endmembers().unwrap(), None).unwrap();
        let low = downsample(&hr, &k, 2).unwrap();
        let want: f64 = t.y.data().iter().zip(low.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 36.0;
        let got = loss_l2(&t.y, &t.noise, &t.params, &t.decoder, &t.cfg, Normalization::Mean).unwrap();
        assert!((got - want).abs() <= 1e-14);

        // zero up to the rounding of the reordered decimation
        assert!(loss_l2(&low, &t.noise, &t.params, &t.decoder, &t.cfg, Normalization::Mean).unwrap() <= 1e-28);
    }

    #[test]
    fn l2_without_resolution_change_is_plain_reconstruction() {
        let t = instance(8);
        let cfg = SrConfig { scale: 1, ..t.cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let noise = NoiseInputs::sample(3, 3, &cfg, &mut rng);
        let a0 = generate_hr_abundance(&noise, &t.params).unwrap();

        let mut tape = Tape::new();
        let obs = tape.constant(t.y.to_image());
        let a_img = tape.constant(a0.to_matrix().reshaped(&[3, 3, 2]).unwrap());
        let e = tape.param(t.decoder.endmembers.clone());
        let k = tape.constant(delta(3));
        let l2 = l2_on_tape(&mut tape, obs, a_img, e, k, 1, Normalization::Mean).unwrap();
        let g2 = tape.backward(l2).unwrap().of(e).clone();

        let mut plain = Tape::new();
        let y = plain.constant(t.y.to_matrix());
        let a = plain.constant(a0.to_matrix());
        let e1 = plain.param(t.decoder.endmembers.clone());
        let recon = unmix::decode_on_tape(&mut plain, a, e1).unwrap();
        let l1 = unmix::squared_error_on_tape(&mut plain, y, recon, Normalization::Mean).unwrap();
        let g1 = plain.backward(l1).unwrap().of(e1).clone();

        assert!((tape.value(l2).item() - plain.value(l1).item()).abs() <= 1e-14);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn l2_reaches_the_shared_decoder() {
        for seed in 10..14 {
            let t = instance(seed);
            let mut tape = Tape::new();
            let obs = tape.constant(t.y.to_image());
            let l_y = tape.constant(t.noise.l_y.clone());
            let l_k = tape.constant(t.noise.l_k.clone());
            let gen = layers::register_conv(&mut tape, &t.params.generator, true);
            let knet = layers::register_dense(&mut tape, &t.params.kernel_net, true);
            let e = tape.param(t.decoder.endmembers.clone());
            let a = hr_abundance_on_tape(&mut tape, l_y, &gen).unwrap();
            let k = kernel_on_tape(&mut tape, l_k, &knet, 3).unwrap();
            let l = l2_on_tape(&mut tape, obs, a, e, k, 2, Normalization::Mean).unwrap();
            let g = tape.backward(l).unwrap();
            assert!(g.of(e).data().iter().any(|&v| v != 0.0));
            assert!(g.of(knet[0].weight).data().iter().any(|&v| v != 0.0));
            assert!(g.of(gen[0].weight).data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(SrConfig::default().validate().is_ok());
        assert!(SrConfig { scale: 0, ..SrConfig::default() }.validate().is_err());
        assert!(SrConfig { kernel_size: 4, ..SrConfig::default() }.validate().is_err());
    }
}
