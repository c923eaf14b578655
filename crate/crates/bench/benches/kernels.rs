//! Benchmarks for the inner loops that dominate training and evaluation:
//! convolution forward/backward, elastic field generation, Hausdorff
//! distance, and connected-component labeling.

use criterion::{criterion_group, criterion_main, Criterion};
use discseg_core::augment::elastic_field;
use discseg_core::metrics::hausdorff;
use discseg_core::nn::{conv_backward, conv_forward, ConvSpec, Tensor};
use discseg_core::pipeline::{connected_components, Connectivity};
use discseg_core::unet::{build_unet3d, Network};
use discseg_core::volume::{Volume, VolumeKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn rand_tensor(dims: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    // The widest layer of the base-8 segmentation net on a disc patch.
    let spec = ConvSpec {
        in_ch: 8,
        out_ch: 8,
        kernel: [3, 3, 3],
        stride: [1, 1, 1],
        same_pad: true,
    };
    let x = rand_tensor(vec![1, 8, 28, 36, 36], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w: Vec<f64> = (0..spec.weight_len()).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let b = vec![0.0; 8];
    c.bench_function("conv3d_forward_8ch_patch", |bench| {
        bench.iter(|| black_box(conv_forward(&x, &w, &b, &spec).unwrap()))
    });
    let gout = rand_tensor(vec![1, 8, 28, 36, 36], 3);
    c.bench_function("conv3d_backward_8ch_patch", |bench| {
        bench.iter(|| black_box(conv_backward(&gout, &x, &w, &spec).unwrap()))
    });
}

fn bench_unet_forward(c: &mut Criterion) {
    let net = Network::init(build_unet3d(3, 8).unwrap(), 0).unwrap();
    let x = rand_tensor(vec![1, 3, 28, 36, 36], 4);
    c.bench_function("unet3d_base8_forward_patch", |bench| {
        bench.iter(|| black_box(net.forward_infer(&x).unwrap()))
    });
}

fn bench_elastic(c: &mut Criterion) {
    c.bench_function("elastic_field_32cube_delta4", |bench| {
        bench.iter(|| black_box(elastic_field([32, 32, 32], 4.0, 8.0, 7).unwrap()))
    });
}

fn sphere_mask(dims: [usize; 3], r: f64, shift: usize) -> Volume {
    let mut data = vec![0.0f32; dims[0] * dims[1] * dims[2]];
    let c = [dims[0] as f64 / 2.0, dims[1] as f64 / 2.0, dims[2] as f64 / 2.0 + shift as f64];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let d = (z as f64 - c[0]).powi(2)
                    + (y as f64 - c[1]).powi(2)
                    + (x as f64 - c[2]).powi(2);
                if d <= r * r {
                    data[(z * dims[1] + y) * dims[2] + x] = 1.0;
                }
            }
        }
    }
    Volume::new([1, dims[0], dims[1], dims[2]], [1.25, 1.25, 1.25], VolumeKind::Label, data)
        .unwrap()
}

fn bench_metrics(c: &mut Criterion) {
    let a = sphere_mask([32, 32, 40], 10.0, 0);
    let b = sphere_mask([32, 32, 40], 10.0, 3);
    c.bench_function("hausdorff_spheres_r10", |bench| {
        bench.iter(|| black_box(hausdorff(&a, &b).unwrap()))
    });
    c.bench_function("connected_components_sphere", |bench| {
        bench.iter(|| black_box(connected_components(&a, Connectivity::TwentySix).unwrap()))
    });
}

criterion_group!(benches, bench_conv, bench_unet_forward, bench_elastic, bench_metrics);
criterion_main!(benches);
