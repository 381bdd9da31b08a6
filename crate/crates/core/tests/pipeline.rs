//! Cross-module pipeline contracts at reduced scale: supervised features
//! support a strong linear probe, contrastive refinement reduces its own
//! loss and improves shifted few-shot accuracy, and prototype predictions
//! are invariant to embedding scale.

use holoshot_core::encoder::{
    forward, init_params, supervised_pretrain, ConvBlock, EncoderConfig, EncoderParams,
    PretrainConfig, Space,
};
use holoshot_core::eval::balanced_accuracy_idx;
use holoshot_core::fewshot::{
    fit_linear, fit_prototypes, sample_episode, ClassifierHead, LabelledEmbedding,
    LinearFitConfig, ProtoFitConfig,
};
use holoshot_core::imaging::{
    generate_synthetic, DatasetRecord, ParticleImage, ShiftParams, Split, SyntheticSpec,
};
use holoshot_core::ssl::{simclr_refine, SslConfig};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: 48,
        conv_blocks: vec![
            ConvBlock { out_channels: 8, kernel: 3, stride: 2 },
            ConvBlock { out_channels: 16, kernel: 3, stride: 2 },
            ConvBlock { out_channels: 32, kernel: 3, stride: 2 },
        ],
        feature_dim: 32,
        proj_dim: 16,
    }
}

struct SmallRun {
    data: Vec<(ParticleImage, DatasetRecord)>,
    taxa: Vec<String>,
}

fn small_dataset(shift: bool) -> SmallRun {
    let mut spec = SyntheticSpec::with_default_classes(3, 60);
    spec.train_fraction = 0.25;
    spec.test_fraction = 0.25;
    if shift {
        spec.shift = Some(ShiftParams::default());
    }
    let data = generate_synthetic(&spec, 2026).unwrap();
    let taxa: Vec<String> = (0..3).map(|c| spec.taxon_name(c)).collect();
    SmallRun { data, taxa }
}

fn subset<'a>(
    run: &'a SmallRun,
    instrument: &str,
    split: Split,
) -> (Vec<ParticleImage>, Vec<usize>, Vec<&'a DatasetRecord>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut records = Vec::new();
    for (img, rec) in &run.data {
        if rec.instrument == instrument && rec.split == split {
            images.push(img.clone());
            if !rec.taxon.is_empty() {
                labels.push(run.taxa.iter().position(|t| t == &rec.taxon).unwrap());
            }
            records.push(rec);
        }
    }
    (images, labels, records)
}

fn embed(params: &EncoderParams, images: &[ParticleImage]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let batch = forward(params, chunk, Space::Backbone).unwrap();
        for i in 0..chunk.len() {
            out.push(batch.row(i).to_vec());
        }
    }
    out
}

/// Supervised pre-training on a 3-class synthetic set must support a linear
/// probe at >= 0.90 balanced accuracy on the held-out split.
#[test]
fn supervised_features_support_strong_linear_probe() {
    let run = small_dataset(false);
    let (train_images, train_labels, _) = subset(&run, "P5", Split::Train);
    let (test_images, test_labels, _) = subset(&run, "P5", Split::Test);

    let init = init_params(&small_encoder(), 1).unwrap();
    let cfg = PretrainConfig { epochs: 50, seed: 1, ..Default::default() };
    let (params, log) =
        supervised_pretrain(&init, &train_images, &train_labels, 3, &cfg).unwrap();
    assert!(log.iter().all(|s| s.mean_loss.is_finite()));

    let train_emb = embed(&params, &train_images);
    let test_emb = embed(&params, &test_images);
    let head = fit_linear(&train_emb, &train_labels, &run.taxa, &LinearFitConfig::default()).unwrap();
    let (pred, _) = head.predict(&test_emb).unwrap();
    let ba = balanced_accuracy_idx(&test_labels, &pred, 3).unwrap();
    assert!(ba >= 0.90, "linear probe balanced accuracy {ba:.3} < 0.90");
}

/// The contrastive refinement loop must reduce its own loss, and the
/// refined features must beat supervised-only features at 1-shot prototype
/// classification on the shifted held-out split in a majority of episodes.
#[test]
fn ssl_refinement_improves_shifted_one_shot_accuracy() {
    let run = small_dataset(true);
    let (train_images, train_labels, train_records) = subset(&run, "P5", Split::Train);
    let (unlabelled, _, _) = subset(&run, "P5", Split::Unlabelled);
    let (shift_test_images, shift_test_labels, _) = subset(&run, "P4", Split::Test);

    let init = init_params(&small_encoder(), 7).unwrap();
    let pcfg = PretrainConfig { epochs: 25, seed: 7, ..Default::default() };
    let (generic, _) = supervised_pretrain(&init, &train_images, &train_labels, 3, &pcfg).unwrap();

    let scfg = SslConfig { batch_n: 16, epochs: 8, seed: 7, ..Default::default() };
    let (refined, log) = simclr_refine(&generic, &unlabelled, &scfg).unwrap();
    assert!(
        log.last().unwrap().mean_loss < log.first().unwrap().mean_loss,
        "contrastive loss did not decrease: {:?}",
        log.iter().map(|s| s.mean_loss).collect::<Vec<_>>()
    );

    // Paired 1-shot episodes over both feature sources.
    let make_pool = |params: &EncoderParams| -> Vec<LabelledEmbedding> {
        let emb = embed(params, &train_images);
        emb.into_iter()
            .zip(&train_records)
            .map(|(vector, rec)| LabelledEmbedding {
                id: rec.image_path.clone(),
                taxon: rec.taxon.clone(),
                vector,
            })
            .collect()
    };
    let generic_pool = make_pool(&generic);
    let refined_pool = make_pool(&refined);
    let generic_queries = embed(&generic, &shift_test_images);
    let refined_queries = embed(&refined, &shift_test_images);

    let mut refined_wins = 0;
    let mut ties = 0;
    for seed in 0..20u64 {
        let score = |pool: &[LabelledEmbedding], queries: &[Vec<f64>]| -> f64 {
            let ep = sample_episode(pool, 1, seed).unwrap();
            let head = fit_prototypes(
                &ep.support_vectors(),
                &ep.support_labels(),
                &ep.taxa,
                &ProtoFitConfig::default(),
            )
            .unwrap();
            let (pred, _) = head.predict(queries).unwrap();
            balanced_accuracy_idx(&shift_test_labels, &pred, 3).unwrap()
        };
        let g = score(&generic_pool, &generic_queries);
        let r = score(&refined_pool, &refined_queries);
        if r > g {
            refined_wins += 1;
        } else if r == g {
            ties += 1;
        }
    }
    assert!(
        2 * refined_wins + ties > 20,
        "refined features won only {refined_wins}/20 shifted 1-shot episodes ({ties} ties)"
    );
}

/// Prototype predictions from real encoder features are invariant under
/// positive scaling of the query embeddings.
#[test]
fn prototype_predictions_scale_invariant_on_encoder_features() {
    let run = small_dataset(false);
    let (train_images, train_labels, _) = subset(&run, "P5", Split::Train);
    let (test_images, _, _) = subset(&run, "P5", Split::Test);

    let params = init_params(&small_encoder(), 3).unwrap();
    let train_emb = embed(&params, &train_images);
    let test_emb = embed(&params, &test_images);

    let head = fit_prototypes(&train_emb, &train_labels, &run.taxa, &ProtoFitConfig::default()).unwrap();
    let scaled: Vec<Vec<f64>> = test_emb
        .iter()
        .map(|e| e.iter().map(|v| v * 3.0).collect())
        .collect();
    let (p1, _) = head.predict(&test_emb).unwrap();
    let (p2, _) = head.predict(&scaled).unwrap();
    assert_eq!(p1, p2);
}
