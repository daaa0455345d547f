//! Survival head with the Cox partial likelihood on a synthetic cohort,
//! then C-index, median risk split, log-rank test and Kaplan-Meier curves.
//!
//! `cargo run --release --example survival -- [km.svg]`

use hmgdm::backbone::{Backbone, BackboneConfig};
use hmgdm::downstream::{finetune_head, FinetuneConfig, Targets, Task};
use hmgdm::entity_graph::{build_entity_graph, GraphParams};
use hmgdm::latent_codec::{Codec, CodecConfig, LatentGraph};
use hmgdm::metrics::{concordance_index, km_estimator, logrank_test, median_risk_split};
use hmgdm::plot::plot_km;
use hmgdm::synthetic::{survival_cohort, texture_corpus};

fn main() -> hmgdm::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "km.svg".into());
    let params = GraphParams { n_regions: 24, tile: 16, ..GraphParams::default() };
    let corpus = texture_corpus(120, 128, 5)?;
    let cohort = survival_cohort(&corpus.labels, 5);
    let codec = Codec::new(CodecConfig { tile: 16, factor: 4, hidden: 16, ..CodecConfig::default() }, 0)?;
    let latents: Vec<LatentGraph> = corpus
        .images
        .iter()
        .map(|im| codec.encode_graph(&build_entity_graph(im, &params)?))
        .collect::<hmgdm::Result<_>>()?;
    let mut backbone = Backbone::new(BackboneConfig { width: 64, layers: 2, ..BackboneConfig::default() }, 0)?;

    let n_train = 80;
    let config = FinetuneConfig { epochs: 200, lr: 1e-2, batch_size: 0, ..FinetuneConfig::default() };
    let (head, trace) = finetune_head(&latents[..n_train], Targets::Survival(&cohort[..n_train]), Task::Survival, config, &mut backbone)?;
    println!("train C-index after fitting {:.3}", trace.last().expect("epochs").metric);

    let test = &cohort[n_train..];
    let risks = head.predict_graphs(&backbone, &latents[n_train..])?.data;
    let times: Vec<f64> = test.iter().map(|r| r.time).collect();
    let events: Vec<bool> = test.iter().map(|r| r.event).collect();
    println!("held-out C-index {:.3} ({} events of {})", concordance_index(&risks, &times, &events)?, events.iter().filter(|&&e| e).count(), test.len());

    let (high, low) = median_risk_split(&risks)?;
    let pick = |idx: &[usize]| (idx.iter().map(|&i| times[i]).collect::<Vec<_>>(), idx.iter().map(|&i| events[i]).collect::<Vec<_>>());
    let ((th, eh), (tl, el)) = (pick(&high), pick(&low));
    let lr = logrank_test(&th, &eh, &tl, &el)?;
    println!("log-rank chi2 {:.3}, p = {:.2e}", lr.statistic, lr.p_value);
    plot_km(&km_estimator(&th, &eh)?, &km_estimator(&tl, &el)?, Some(lr.p_value), out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
