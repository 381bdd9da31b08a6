//! Calibration run for the end-to-end synthetic benchmark: times each stage
//! and prints the evaluation table so training defaults can be tuned.
//!
//! Usage: cargo run -p holoshot-core --example calibrate --release [master_seed]

use std::time::Instant;

use holoshot_core::encoder::{forward, init_params, supervised_pretrain, EncoderConfig, PretrainConfig, Space};
use holoshot_core::eval::{shift_comparison, sweep_k, EmbeddingRecord, EmbeddingTable, SweepConfig};
use holoshot_core::fewshot::HeadKind;
use holoshot_core::imaging::{generate_synthetic, ParticleImage, ShiftParams, Split, SyntheticSpec};
use holoshot_core::ssl::{simclr_refine, SslConfig};

fn embed_table(
    source: &str,
    params: &holoshot_core::encoder::EncoderParams,
    data: &[(ParticleImage, holoshot_core::imaging::DatasetRecord)],
) -> EmbeddingTable {
    let mut records = Vec::new();
    for chunk in data.chunks(64) {
        let images: Vec<ParticleImage> = chunk.iter().map(|(i, _)| i.clone()).collect();
        let batch = forward(params, &images, Space::Backbone).unwrap();
        for (row, (_, rec)) in chunk.iter().enumerate() {
            records.push(EmbeddingRecord {
                id: rec.image_path.clone(),
                instrument: rec.instrument.clone(),
                taxon: rec.taxon.clone(),
                split: rec.split,
                vector: batch.row(row).iter().map(|&v| v as f32).collect(),
            });
        }
    }
    EmbeddingTable {
        feature_source: source.to_string(),
        feature_dim: params.config.feature_dim,
        records,
    }
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let master_seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(42);

    let total = Instant::now();
    let mut spec = SyntheticSpec::with_default_classes(4, 250);
    spec.shift = Some(ShiftParams {
        blur_sigma: env_f64("SHIFT_BLUR", 1.0),
        gain: env_f64("SHIFT_GAIN", 1.12),
        noise_sigma: env_f64("SHIFT_NOISE", 0.02),
    });
    let t = Instant::now();
    let data = generate_synthetic(&spec, master_seed).unwrap();
    println!("synth: {} records in {:.1}s", data.len(), t.elapsed().as_secs_f64());

    // Needed subsets.
    let train_p5: Vec<_> = data
        .iter()
        .filter(|(_, r)| r.instrument == "P5" && r.split == Split::Train)
        .cloned()
        .collect();
    let unlabelled_p5: Vec<ParticleImage> = data
        .iter()
        .filter(|(_, r)| r.instrument == "P5" && r.split == Split::Unlabelled)
        .map(|(i, _)| i.clone())
        .collect();
    let eval_set: Vec<_> = data
        .iter()
        .filter(|(_, r)| !r.taxon.is_empty())
        .cloned()
        .collect();
    println!(
        "train {} / unlabelled {} / eval {}",
        train_p5.len(),
        unlabelled_p5.len(),
        eval_set.len()
    );

    let config = EncoderConfig::default();
    let init = init_params(&config, master_seed).unwrap();

    // Supervised stage.
    let taxa: Vec<String> = {
        let mut t: Vec<String> = train_p5.iter().map(|(_, r)| r.taxon.clone()).collect();
        t.sort();
        t.dedup();
        t
    };
    let images: Vec<ParticleImage> = train_p5.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<usize> = train_p5
        .iter()
        .map(|(_, r)| taxa.iter().position(|t| t == &r.taxon).unwrap())
        .collect();
    let t = Instant::now();
    let pcfg = PretrainConfig {
        epochs: env_usize("PRE_EPOCHS", 30),
        lr: env_f64("PRE_LR", 0.01),
        seed: master_seed,
        ..Default::default()
    };
    let (generic, plog) = supervised_pretrain(&init, &images, &labels, taxa.len(), &pcfg).unwrap();
    println!(
        "pretrain: {:.1}s  loss {:.4} -> {:.4}",
        t.elapsed().as_secs_f64(),
        plog.first().unwrap().mean_loss,
        plog.last().unwrap().mean_loss
    );

    // Contrastive stage.
    let t = Instant::now();
    let mut policy = holoshot_core::imaging::AugmentPolicy::default();
    policy.blur_sigma_range.1 = env_f64("AUG_BLUR_HI", policy.blur_sigma_range.1);
    policy.gain_jitter_range.0 = env_f64("AUG_GAIN_LO", policy.gain_jitter_range.0);
    policy.gain_jitter_range.1 = env_f64("AUG_GAIN_HI", policy.gain_jitter_range.1);
    let scfg = SslConfig {
        epochs: env_usize("SSL_EPOCHS", 30),
        lr: env_f64("SSL_LR", 0.1),
        temperature: env_f64("SSL_TAU", 0.5),
        policy,
        seed: master_seed,
        ..Default::default()
    };
    let (refined, slog) = simclr_refine(&generic, &unlabelled_p5, &scfg).unwrap();
    println!(
        "ssl: {:.1}s  loss {:.4} -> {:.4}",
        t.elapsed().as_secs_f64(),
        slog.first().unwrap().mean_loss,
        slog.last().unwrap().mean_loss
    );

    // Embed + sweep.
    let t = Instant::now();
    let tables = vec![
        embed_table("generic", &generic, &eval_set),
        embed_table("ssl_refined", &refined, &eval_set),
    ];
    println!("embed: {:.1}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let sweep = SweepConfig {
        ks: vec![1, 5, 25],
        repeats: 10,
        heads: vec![HeadKind::Linear, HeadKind::Prototype],
        master_seed,
        ..Default::default()
    };
    let report = sweep_k(&tables, &sweep).unwrap();
    println!("sweep: {:.1}s", t.elapsed().as_secs_f64());

    println!("\nsource        head       k   P5->P5          P5->P4");
    for e in &report.entries {
        if e.test_instrument == "P5" {
            let shifted = report
                .entries
                .iter()
                .find(|s| {
                    s.feature_source == e.feature_source
                        && s.head == e.head
                        && s.k == e.k
                        && s.test_instrument == "P4"
                })
                .unwrap();
            println!(
                "{:<13} {:<9} {:>2}   {:.3} ± {:.3}   {:.3} ± {:.3}",
                e.feature_source, e.head.to_string(), e.k, e.mean, e.stdev, shifted.mean, shifted.stdev
            );
        }
    }

    println!("\nshift comparison (drop = same - shifted):");
    for r in shift_comparison(&report).unwrap() {
        println!(
            "{:<13} {:<9} k={:<2}  same {:.3}  shifted {:.3}  drop {:+.3}",
            r.feature_source, r.head.to_string(), r.k, r.same_mean, r.shifted_mean, r.drop
        );
    }

    println!("\ntotal: {:.1}s", total.elapsed().as_secs_f64());
}
