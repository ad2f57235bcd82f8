//! Seeded inputs shared by the kernel benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roifusion::geom::OrientedBox3D;
use roifusion::micronet::Tensor2;

/// `n` points spread over a LiDAR-like forward volume.
pub fn random_cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.gen_range(0.0..70.0), rng.gen_range(-40.0..40.0), rng.gen_range(-3.0..1.0)])
        .collect()
}

/// `rows × cols` features uniform in `[0, 1)`.
pub fn random_features(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen()).collect()).expect("sized buffer")
}

/// Car-sized boxes scattered around the origin so most pairs overlap.
pub fn random_boxes(n: usize, seed: u64) -> Vec<OrientedBox3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            OrientedBox3D::new(
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-0.3..0.3)],
                [1.5, 1.6, 3.9],
                rng.gen_range(-3.1..3.1),
            )
            .expect("finite positive box")
        })
        .collect()
}
