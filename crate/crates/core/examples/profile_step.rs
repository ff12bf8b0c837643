//! Rough wall-clock profile of one desk-scale training step; dev aid only.

use kanet_core::conv3d::{unfold3d, ConvGeometry};
use kanet_core::kan_linear::KanLinear;
use kanet_core::model::{build_kanet, HeadKind, NetworkConfig, SplineSettings};
use kanet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let cfg = NetworkConfig {
        stages: vec![2, 2],
        k0: 4,
        spline: SplineSettings {
            shared_grids: true,
            ..SplineSettings::default()
        },
        patch: (7, 7, 16),
        classes: 5,
        bottleneck_factor: 0,
        compression: 0.5,
        head: HeadKind::Linear,
    };
    let mut model = build_kanet(&cfg, 0).unwrap();
    let x = Tensor::randn(&[32, 1, 7, 7, 16], &mut rng);

    let t = Instant::now();
    let (logits, cache) = model.forward_train(&x).unwrap();
    println!("forward_train: {:?}", t.elapsed());

    let up = Tensor::randn(logits.shape(), &mut rng);
    let t = Instant::now();
    let _ = model.backward(&cache, &up).unwrap();
    println!("backward:      {:?}", t.elapsed());

    let t = Instant::now();
    let _ = model.forward_eval(&x).unwrap();
    println!("forward_eval:  {:?}", t.elapsed());

    // component times at the stage-0 shape
    let xs = Tensor::randn(&[32, 16, 7, 7, 16], &mut rng);
    let g = ConvGeometry::simple(3, 1, 1);
    let t = Instant::now();
    let rows = unfold3d(&xs, &g).unwrap();
    println!("unfold [32,16,7,7,16]: {:?}", t.elapsed());
    let flat = rows.reshape(&[32 * 784, 432]).unwrap();

    let layer = KanLinear::init(432, 4, 5, 3, 1, 0.1).unwrap();
    let t = Instant::now();
    let y = layer.forward(&flat).unwrap();
    println!("kan fwd [25088,432->4]: {:?}", t.elapsed());
    let dy = Tensor::randn(y.shape(), &mut rng);
    let t = Instant::now();
    let _ = layer.backward(&flat, &dy).unwrap();
    println!("kan bwd [25088,432->4]: {:?}", t.elapsed());
}
