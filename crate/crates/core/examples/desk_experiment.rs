//! End-to-end run on procedural two-class textures.
//!
//! `cargo run --release --example desk_experiment -- [patches] [stage2 epochs]`

use hmgdm::experiment::{run_desk, DeskConfig};

fn main() -> hmgdm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let mut config = DeskConfig::default();
    if let Some(n) = args.next() {
        config.patches = n.parse().expect("patch count");
    }
    if let Some(e) = args.next() {
        config.training.epochs = e.parse().expect("epoch count");
    }
    let report = run_desk(&config)?;
    for e in &report.codec_trace {
        println!("codec epoch {:>2}  loss {:.5}  rec {:.5}  kl {:.2}", e.epoch, e.loss, e.rec, e.kl);
    }
    for e in &report.pretrain_trace {
        println!("diffusion epoch {:>2}  loss {:.5}  lr {:.1e}", e.epoch, e.loss, e.lr);
    }
    println!("{:>6} {:>10} {:>10}", "t", "trained", "untrained");
    for (a, b) in report.rmse_trained.iter().zip(&report.rmse_untrained) {
        println!("{:>6} {:>10.5} {:>10.5}", a.t, a.rmse, b.rmse);
    }
    println!("probe accuracy: pre-trained {:.4}, random init {:.4}", report.pretrained_accuracy, report.random_accuracy);
    Ok(())
}
