use mrf::rng::SeedRng;
use mrf::tensor::Tensor;
use std::time::Instant;

fn main() {
    let mut rng = SeedRng::new(1);
    for (r, s, t) in [(512usize, 128usize, 256usize), (512, 128, 128), (512, 128, 259), (64, 64, 64)] {
        let a = Tensor::randn(vec![r, s], 1.0, &mut rng);
        let b = Tensor::randn(vec![s, t], 1.0, &mut rng);
        let reps = (2e9 / (2.0 * (r * s * t) as f64)) as usize;
        let start = Instant::now();
        let mut acc = 0.0;
        for _ in 0..reps {
            let c = a.matmul(&b);
            acc += c.data()[0];
        }
        let el = start.elapsed().as_secs_f64();
        let gflops = 2.0 * (r * s * t) as f64 * reps as f64 / el / 1e9;
        println!("{r}x{s}x{t}: {gflops:.2} GF/s ({reps} reps, {el:.2}s, acc {acc:.3})");
    }
}
