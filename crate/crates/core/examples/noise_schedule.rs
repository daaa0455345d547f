//! Sigmoid and linear variance schedules and the closed-form forward process.
//!
//! `cargo run --release --example noise_schedule`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hmgdm::diffusion::{forward_noise, make_schedule, GraphLatents, ScheduleKind};
use hmgdm::nn::Tensor;

fn main() -> hmgdm::Result<()> {
    let sigmoid = make_schedule(1000, 1e-7, 2e-3, ScheduleKind::Sigmoid)?;
    let linear = make_schedule(1000, 1e-7, 2e-3, ScheduleKind::Linear)?;
    println!("{:>5} {:>11} {:>9} {:>11} {:>9}", "t", "beta sig", "abar sig", "beta lin", "abar lin");
    for t in [1, 10, 100, 250, 500, 750, 900, 1000] {
        println!(
            "{t:>5} {:>11.3e} {:>9.5} {:>11.3e} {:>9.5}",
            sigmoid.beta(t),
            sigmoid.alpha_bar(t),
            linear.beta(t),
            linear.alpha_bar(t)
        );
    }

    // empirical variance of q(x_t | x_0 = 0) against 1 - abar(t)
    let n = 20_000;
    let zeros = GraphLatents::new(Tensor::zeros(&[n, 1]), Tensor::zeros(&[0, 1]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [100, 500, 1000] {
        let noisy = forward_noise(&zeros, t, &mut rng, &sigmoid)?;
        let var = noisy.vertices.data.iter().map(|v| v * v).sum::<f64>() / n as f64;
        println!("t={t:>4}: sample variance {var:.5}, expected {:.5}", 1.0 - sigmoid.alpha_bar(t));
    }
    Ok(())
}
