use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// RNG derived from `(seed, name)`. Independent of the order in which
/// parameters are created, so adding a layer never reshuffles the others.
pub fn rng_for(seed: u64, name: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha12Rng::from_seed(key)
}

/// Kaiming-normal init for a conv weight `[cout, cin, kh, kw]`:
/// std = sqrt(2 / fan_in), suited to ReLU nonlinearities.
pub fn kaiming_conv(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f32> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    gaussian(shape, std, rng)
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        // Box-Muller; draws two uniforms per pair of samples.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push((r * theta.cos() * std) as f32);
        i += 1;
        if i < n {
            data.push((r * theta.sin() * std) as f32);
            i += 1;
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data mismatch")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_is_name_and_seed_dependent() {
        let a: Vec<u64> = {
            let mut r = rng_for(7, "enc.0.w");
            (0..4).map(|_| r.random()).collect()
        };
        let b: Vec<u64> = {
            let mut r = rng_for(7, "enc.0.w");
            (0..4).map(|_| r.random()).collect()
        };
        let c: Vec<u64> = {
            let mut r = rng_for(7, "enc.1.w");
            (0..4).map(|_| r.random()).collect()
        };
        let d: Vec<u64> = {
            let mut r = rng_for(8, "enc.0.w");
            (0..4).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn kaiming_has_roughly_right_scale() {
        let mut rng = rng_for(1, "w");
        let w = kaiming_conv(&[64, 32, 3, 3], &mut rng);
        let n = w.len() as f64;
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (32.0 * 9.0);
        assert!(mean.abs() < 0.01);
        assert!((var / expected - 1.0).abs() < 0.1);
    }
}
