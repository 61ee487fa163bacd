use criterion::{black_box, criterion_group, criterion_main, Criterion};
use intercnn_core::grid::{ImageSlice, LabelMap, Prediction};
use intercnn_core::nets::{assemble_inter_input, NetKind, NetworkSpec, UNet};
use intercnn_core::robot::{generate_scribbles, RobotUserConfig};
use intercnn_core::training::spec_for;
use intercnn_core::{argmax_labels, dice};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(rng: &mut ChaCha8Rng, n: usize, c: u8) -> LabelMap {
    LabelMap::new(n, n, c as usize, (0..n * n).map(|_| rng.gen_range(0..c)).collect()).unwrap()
}

fn bench_dice(cr: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gt = random_labels(&mut rng, 320, 3);
    let pred = random_labels(&mut rng, 320, 3);
    cr.bench_function("dice 320x320", |b| b.iter(|| dice(black_box(&gt), black_box(&pred), 1).unwrap()));
}

fn bench_robot(cr: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = random_labels(&mut rng, 320, 3);
    let pred = random_labels(&mut rng, 320, 3);
    let cfg = RobotUserConfig::default();
    cr.bench_function("robot scribbles 320x320", |b| {
        b.iter(|| generate_scribbles(black_box(&pred), black_box(&gt), &cfg, &mut rng).unwrap())
    });
}

fn bench_forward(cr: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = spec_for(NetKind::Inter, &NetworkSpec { base_channels: 8, ..Default::default() }, 3);
    let net = UNet::<f32>::new(spec, 0).unwrap();
    let mut group = cr.benchmark_group("intercnn forward");
    group.sample_size(10);
    for n in [64usize, 320] {
        let image = ImageSlice::new(n, n, (0..n * n).map(|_| rng.gen()).collect()).unwrap();
        let prev = Prediction::uniform(n, n, 3);
        let gt = random_labels(&mut rng, n, 3);
        let scr = generate_scribbles(&argmax_labels(&prev), &gt, &RobotUserConfig::default(), &mut rng).unwrap();
        let x = assemble_inter_input(&image, &prev, &scr).unwrap();
        group.bench_function(format!("{n}x{n}"), |b| b.iter(|| net.predict(std::slice::from_ref(black_box(&x))).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_dice, bench_robot, bench_forward);
criterion_main!(benches);
