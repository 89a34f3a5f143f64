//! Statistical verification of the simulated channel: noise moments and
//! realized SNR concentrate on their configured values at large block size.

use num_complex::Complex64;
use nullcast::channel::{
    awgn_transmit, measured_snr, power_normalize, snr_to_sigma, SymbolBlock,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BLOCK: usize = 1_000_000;

fn unit_block() -> SymbolBlock {
    // Constant unit-power symbols keep the signal term exact so the test
    // isolates noise statistics.
    SymbolBlock::from_symbols(vec![Complex64::new(1.0, 0.0); BLOCK])
}

#[test]
fn noise_is_unbiased_and_has_configured_variance() {
    let z = unit_block();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let y = awgn_transmit(&z, 1.0, &mut rng).unwrap();
    let diffs: Vec<Complex64> = y
        .symbols()
        .iter()
        .zip(z.symbols())
        .map(|(a, b)| a - b)
        .collect();

    let mean_re: f64 = diffs.iter().map(|d| d.re).sum::<f64>() / BLOCK as f64;
    let mean_im: f64 = diffs.iter().map(|d| d.im).sum::<f64>() / BLOCK as f64;
    assert!(mean_re.abs() < 0.004, "noise mean (re) {mean_re}");
    assert!(mean_im.abs() < 0.004, "noise mean (im) {mean_im}");

    // Per-symbol noise power must be sigma^2 = 1, split evenly over parts.
    let var: f64 = diffs.iter().map(|d| d.norm_sqr()).sum::<f64>() / BLOCK as f64;
    assert!((var - 1.0).abs() < 0.01, "noise variance {var}");
    let var_re: f64 = diffs.iter().map(|d| d.re * d.re).sum::<f64>() / BLOCK as f64;
    let var_im: f64 = diffs.iter().map(|d| d.im * d.im).sum::<f64>() / BLOCK as f64;
    assert!((var_re - 0.5).abs() < 0.01, "real part variance {var_re}");
    assert!((var_im - 0.5).abs() < 0.01, "imag part variance {var_im}");
}

#[test]
fn realized_snr_matches_configured_snr() {
    for (case, snr_db) in [-5.0f64, 0.0, 5.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7 + case as u64);
        let z_tilde: Vec<Complex64> = {
            use rand::Rng;
            (0..BLOCK)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        };
        let z = power_normalize(&z_tilde, 1.0).unwrap();
        assert!((z.avg_power() - 1.0).abs() < 1e-5);
        let y = awgn_transmit(&z, snr_to_sigma(snr_db, 1.0), &mut rng).unwrap();
        let got = measured_snr(&z, &y).unwrap();
        assert!(
            (got - snr_db).abs() < 0.05,
            "configured {snr_db} dB, measured {got} dB"
        );
    }
}
