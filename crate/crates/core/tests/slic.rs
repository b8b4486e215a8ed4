//! Superpixel segmentation on smooth random fields.

use dcn::superpixel::{slic_segment, slic_segment_traced, SlicParams};
use dcn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random field: a sum of a few random Gaussian bumps per channel.
fn natural_scene(size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64, [f64; 3])> = (0..12)
        .map(|_| {
            let amp = [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)];
            (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64), rng.gen_range(4.0..20.0), amp)
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            for ch in 0..3 {
                let v: f64 = bumps
                    .iter()
                    .map(|&(cx, cy, r, amp)| amp[ch] * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * r * r)).exp())
                    .sum();
                data.push(50.0 + v + rng.gen_range(-1.0..1.0));
            }
        }
    }
    Tensor::new(&[size, size, 3], data).unwrap()
}

#[test]
fn slic_center_displacement_settles() {
    let mut good = 0;
    for seed in 0..100 {
        let features = natural_scene(64, seed);
        let (_, trace) = slic_segment_traced(&features, &SlicParams::new(16)).unwrap();
        let d = &trace.displacements;
        if d.windows(2).skip(1).all(|p| p[1] <= p[0]) {
            good += 1;
        }
    }
    assert!(good >= 95, "displacement non-increasing after iteration 2 in {good} of 100 trials");
}

#[test]
fn slic_count_stays_near_the_target() {
    for seed in 0..20 {
        let features = natural_scene(96, 1000 + seed);
        for k in [36, 64, 144] {
            let map = slic_segment(&features, &SlicParams::new(k)).unwrap();
            let dev = (map.count() as f64 - k as f64).abs() / k as f64;
            assert!(dev <= 0.3, "seed {seed}, k {k}: {} superpixels", map.count());
        }
    }
}
