//! Subcommand implementations. Each command is reproducible from
//! (config, master seed) alone and writes its outputs atomically where the
//! format matters (caches, checkpoints).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use holoshot_core::cache::{
    attach_splits, read_cache, write_cache, CachedRecord, EmbeddingCache, IMPORTED_DIGEST,
};
use holoshot_core::encoder::{
    file_digest, forward, init_params, load_checkpoint, save_checkpoint, supervised_pretrain,
    EncoderParams, EpochStat, PretrainConfig, Space,
};
use holoshot_core::eval::{
    sweep_k, write_fig2_csv, write_report_json, write_table1_csv, EmbeddingTable, SweepConfig,
};
use holoshot_core::imaging::{
    generate_synthetic, load_image, read_manifest, save_pgm, write_manifest, DatasetRecord,
    ParticleImage, Split,
};
use holoshot_core::ssl::{simclr_refine, SslConfig};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Generate the synthetic dataset: PGM images plus the CSV manifest.
pub fn synth(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let spec = cfg.synthetic_spec()?;
    let data = generate_synthetic(&spec, cfg.seed)?;

    let data_dir = cfg.data_dir();
    for (image, record) in &data {
        let path = data_dir.join(&record.image_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
        }
        save_pgm(&path, image)?;
    }
    let records: Vec<DatasetRecord> = data.iter().map(|(_, r)| r.clone()).collect();
    write_manifest(&cfg.manifest, &records)?;

    let labelled = records.iter().filter(|r| !r.taxon.is_empty()).count();
    println!(
        "wrote {} images ({} labelled, {} unlabelled) and {}",
        records.len(),
        labelled,
        records.len() - labelled,
        cfg.manifest.display()
    );
    Ok(())
}

fn load_split(
    cfg: &ExperimentConfig,
    instrument: &str,
    split: Split,
) -> Result<Vec<(ParticleImage, DatasetRecord)>, CliError> {
    let records = read_manifest(&cfg.manifest)?;
    let data_dir = cfg.data_dir();
    let mut out = Vec::new();
    for rec in records {
        if rec.instrument == instrument && rec.split == split {
            let image = load_image(&data_dir.join(&rec.image_path))?;
            out.push((image, rec));
        }
    }
    Ok(out)
}

fn write_log_csv(path: &Path, log: &[EpochStat]) -> Result<(), CliError> {
    let mut out = String::from("epoch,mean_loss,wall_seconds\n");
    for s in log {
        out.push_str(&format!("{},{:.6},{:.3}\n", s.epoch, s.mean_loss, s.wall_seconds));
    }
    std::fs::write(path, out).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn generic_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint_dir.join("generic.ckpt")
}

fn refined_checkpoint(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint_dir.join("ssl_refined.ckpt")
}

/// Supervised pre-training on the labelled train split of the train
/// instrument; writes `generic.ckpt` and a per-epoch loss log.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let train = load_split(cfg, &cfg.eval.train_instrument, Split::Train)?;
    if train.is_empty() {
        return Err(CliError::Data(format!(
            "no labelled train records for instrument '{}' in {}; run `holoshot synth` first",
            cfg.eval.train_instrument,
            cfg.manifest.display()
        )));
    }
    let mut taxa: Vec<String> = train.iter().map(|(_, r)| r.taxon.clone()).collect();
    taxa.sort();
    taxa.dedup();
    let images: Vec<ParticleImage> = train.iter().map(|(i, _)| i.clone()).collect();
    let labels: Vec<usize> = train
        .iter()
        .map(|(_, r)| taxa.iter().position(|t| t == &r.taxon).expect("taxa built from records"))
        .collect();

    let init = init_params(&cfg.encoder, cfg.seed)?;
    let pconf = PretrainConfig {
        epochs: cfg.pretrain.epochs,
        lr: cfg.pretrain.lr,
        momentum: cfg.pretrain.momentum,
        batch_size: cfg.pretrain.batch,
        seed: cfg.seed,
    };
    let (params, log) = supervised_pretrain(&init, &images, &labels, taxa.len(), &pconf)?;

    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.checkpoint_dir.display())))?;
    let ckpt = generic_checkpoint(cfg);
    save_checkpoint(&ckpt, &params)?;
    write_log_csv(&cfg.checkpoint_dir.join("pretrain_log.csv"), &log)?;

    match log.last() {
        Some(last) => println!(
            "pre-trained {} epochs on {} images ({} taxa), final loss {:.4} -> {}",
            log.len(),
            images.len(),
            taxa.len(),
            last.mean_loss,
            ckpt.display()
        ),
        None => println!("0 epochs requested; wrote initial parameters -> {}", ckpt.display()),
    }
    Ok(())
}

/// Contrastive refinement on the unlabelled pool of the train instrument;
/// requires `generic.ckpt` unless `--from-random` is passed. Writes
/// `ssl_refined.ckpt` and a per-epoch loss log.
pub fn ssl(cfg: &ExperimentConfig, from_random: bool) -> Result<(), CliError> {
    let start_params: EncoderParams = if from_random {
        init_params(&cfg.encoder, cfg.seed)?
    } else {
        let ckpt = generic_checkpoint(cfg);
        if !ckpt.exists() {
            return Err(CliError::Data(format!(
                "{} not found: run `holoshot pretrain` first, or pass --from-random \
                 to start from a fresh encoder",
                ckpt.display()
            )));
        }
        load_checkpoint(&ckpt, &cfg.encoder)?
    };

    let pool = load_split(cfg, &cfg.eval.train_instrument, Split::Unlabelled)?;
    let images: Vec<ParticleImage> = pool.into_iter().map(|(i, _)| i).collect();

    let sconf = SslConfig {
        batch_n: cfg.ssl.batch_n,
        temperature: cfg.ssl.temperature,
        epochs: cfg.ssl.epochs,
        lr: cfg.ssl.lr,
        momentum: cfg.ssl.momentum,
        policy: cfg.augment.clone(),
        seed: cfg.seed,
    };
    let (params, log) = simclr_refine(&start_params, &images, &sconf)?;

    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.checkpoint_dir.display())))?;
    let ckpt = refined_checkpoint(cfg);
    save_checkpoint(&ckpt, &params)?;
    write_log_csv(&cfg.checkpoint_dir.join("ssl_log.csv"), &log)?;

    match (log.first(), log.last()) {
        (Some(first), Some(last)) => println!(
            "refined {} epochs on {} unlabelled images, loss {:.4} -> {:.4} -> {}",
            log.len(),
            images.len(),
            first.mean_loss,
            last.mean_loss,
            ckpt.display()
        ),
        _ => println!("0 epochs requested; wrote starting parameters -> {}", ckpt.display()),
    }
    Ok(())
}

fn cache_path(cfg: &ExperimentConfig, source: &str, instrument: &str) -> PathBuf {
    cfg.cache_dir.join(format!("{source}_{instrument}.bcache"))
}

/// Encode every manifest image into one cache per (feature source,
/// instrument), or import externally computed vectors from CSV.
pub fn embed(
    cfg: &ExperimentConfig,
    source: Option<&str>,
    checkpoint: Option<&Path>,
    import: Option<&Path>,
) -> Result<(), CliError> {
    let manifest = read_manifest(&cfg.manifest)?;
    if manifest.is_empty() {
        return Err(CliError::Data(format!("{} is empty", cfg.manifest.display())));
    }
    std::fs::create_dir_all(&cfg.cache_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.cache_dir.display())))?;

    if let Some(import_path) = import {
        return embed_import(cfg, &manifest, import_path, source.unwrap_or("imported"));
    }

    let (source, ckpt_path) = match (source, checkpoint) {
        (Some(s), Some(c)) => (s.to_string(), c.to_path_buf()),
        (Some(s), None) => (s.to_string(), cfg.checkpoint_dir.join(format!("{s}.ckpt"))),
        (None, Some(c)) => {
            let stem = c
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CliError::Usage("cannot derive --source from checkpoint path".into()))?;
            (stem.to_string(), c.to_path_buf())
        }
        (None, None) => ("generic".to_string(), generic_checkpoint(cfg)),
    };
    if !ckpt_path.exists() {
        return Err(CliError::Data(format!(
            "checkpoint {} not found; run the training stage first",
            ckpt_path.display()
        )));
    }
    let params = load_checkpoint(&ckpt_path, &cfg.encoder)?;
    let digest = file_digest(&ckpt_path)?;
    let data_dir = cfg.data_dir();

    let mut instruments: Vec<String> = manifest.iter().map(|r| r.instrument.clone()).collect();
    instruments.sort();
    instruments.dedup();

    for instrument in &instruments {
        let records: Vec<&DatasetRecord> = manifest
            .iter()
            .filter(|r| &r.instrument == instrument)
            .collect();
        let mut cached = Vec::with_capacity(records.len());
        for chunk in records.chunks(64) {
            let images: Vec<ParticleImage> = chunk
                .iter()
                .map(|r| load_image(&data_dir.join(&r.image_path)))
                .collect::<Result<_, _>>()?;
            let batch = forward(&params, &images, Space::Backbone)?;
            for (row, rec) in chunk.iter().enumerate() {
                cached.push(CachedRecord {
                    id: rec.image_path.clone(),
                    instrument: rec.instrument.clone(),
                    taxon: rec.taxon.clone(),
                    vector: batch.row(row).iter().map(|&v| v as f32).collect(),
                });
            }
        }
        let cache = EmbeddingCache {
            feature_source: source.clone(),
            feature_dim: cfg.encoder.feature_dim,
            checkpoint_digest: digest,
            records: cached,
        };
        let path = cache_path(cfg, &source, instrument);
        write_cache(&path, &cache)?;
        println!(
            "embedded {} records for instrument {} -> {}",
            cache.records.len(),
            instrument,
            path.display()
        );
    }
    Ok(())
}

/// Import externally computed vectors: CSV rows `id,v0,v1,...` whose ids
/// must match manifest paths. An optional header row is skipped.
fn embed_import(
    cfg: &ExperimentConfig,
    manifest: &[DatasetRecord],
    import_path: &Path,
    source: &str,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(import_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", import_path.display())))?;
    let by_path: BTreeMap<&str, &DatasetRecord> =
        manifest.iter().map(|r| (r.image_path.as_str(), r)).collect();

    let mut dim: Option<usize> = None;
    let mut per_instrument: BTreeMap<String, Vec<CachedRecord>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or("").trim().to_string();
        let values: Vec<&str> = fields.map(str::trim).collect();
        if lineno == 0 && values.first().is_some_and(|v| v.parse::<f32>().is_err()) {
            continue; // header row
        }
        let vector: Vec<f32> = values
            .iter()
            .map(|v| {
                v.parse::<f32>().map_err(|_| {
                    CliError::Data(format!(
                        "{} line {}: '{v}' is not a number",
                        import_path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        if vector.is_empty() {
            return Err(CliError::Data(format!(
                "{} line {}: no vector components",
                import_path.display(),
                lineno + 1
            )));
        }
        match dim {
            None => dim = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(CliError::Data(format!(
                    "{} line {}: dimension mismatch ({} vs {d})",
                    import_path.display(),
                    lineno + 1,
                    vector.len()
                )))
            }
            _ => {}
        }
        let rec = by_path.get(id.as_str()).ok_or_else(|| {
            CliError::Data(format!(
                "{} line {}: id '{id}' not present in the manifest",
                import_path.display(),
                lineno + 1
            ))
        })?;
        per_instrument
            .entry(rec.instrument.clone())
            .or_default()
            .push(CachedRecord {
                id,
                instrument: rec.instrument.clone(),
                taxon: rec.taxon.clone(),
                vector,
            });
    }
    let dim = dim.ok_or_else(|| {
        CliError::Data(format!("{}: no records to import", import_path.display()))
    })?;

    for (instrument, records) in per_instrument {
        let count = records.len();
        let cache = EmbeddingCache {
            feature_source: source.to_string(),
            feature_dim: dim,
            checkpoint_digest: IMPORTED_DIGEST,
            records,
        };
        let path = cache_path(cfg, source, &instrument);
        write_cache(&path, &cache)?;
        println!(
            "imported {count} records (dim {dim}) for instrument {instrument} -> {}",
            path.display()
        );
    }
    Ok(())
}

/// Run the k-shot sweep from cached embeddings and write the report files.
pub fn eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let manifest = read_manifest(&cfg.manifest)?;

    let mut needed_instruments: Vec<String> = cfg.eval.test_instruments.clone();
    needed_instruments.push(cfg.eval.train_instrument.clone());
    needed_instruments.sort();
    needed_instruments.dedup();

    let mut tables: Vec<EmbeddingTable> = Vec::new();
    for source in &cfg.eval.sources {
        let mut merged: Option<EmbeddingTable> = None;
        for instrument in &needed_instruments {
            let path = cache_path(cfg, source, instrument);
            if !path.exists() {
                return Err(CliError::Data(format!(
                    "missing embedding cache for (source '{source}', instrument '{instrument}'): \
                     {} — run `holoshot embed` first",
                    path.display()
                )));
            }
            let cache = read_cache(&path)?;
            if cache.checkpoint_digest != IMPORTED_DIGEST {
                let ckpt = cfg.checkpoint_dir.join(format!("{source}.ckpt"));
                if !ckpt.exists() {
                    return Err(CliError::Data(format!(
                        "cache {} references checkpoint digest {:016x} but {} does not exist",
                        path.display(),
                        cache.checkpoint_digest,
                        ckpt.display()
                    )));
                }
                let digest = file_digest(&ckpt)?;
                if digest != cache.checkpoint_digest {
                    return Err(CliError::Data(format!(
                        "cache {} was produced by a different checkpoint than {} \
                         (digest {:016x} vs {:016x}); re-run `holoshot embed`",
                        path.display(),
                        ckpt.display(),
                        cache.checkpoint_digest,
                        digest
                    )));
                }
            }
            let table = attach_splits(&cache, &manifest)?;
            match &mut merged {
                None => merged = Some(table),
                Some(m) => {
                    if m.feature_dim != table.feature_dim {
                        return Err(CliError::Data(format!(
                            "feature dim mismatch across caches for source '{source}'"
                        )));
                    }
                    m.records.extend(table.records);
                }
            }
        }
        tables.push(merged.expect("at least one instrument"));
    }

    let sweep = SweepConfig {
        ks: cfg.eval.ks.clone(),
        repeats: cfg.eval.repeats,
        heads: cfg.eval.heads.clone(),
        train_instrument: cfg.eval.train_instrument.clone(),
        test_instruments: cfg.eval.test_instruments.clone(),
        master_seed: cfg.seed,
        linear: cfg.linear_fit.clone(),
        proto: cfg.proto_fit.clone(),
    };
    let report = sweep_k(&tables, &sweep)?;

    std::fs::create_dir_all(&cfg.report_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.report_dir.display())))?;
    write_outputs(cfg, &report)?;

    for e in &report.entries {
        println!(
            "{:<12} {:<9} k={:<3} {}->{}  {:.3} ± {:.3}",
            e.feature_source, e.head.to_string(), e.k, e.train_instrument, e.test_instrument,
            e.mean, e.stdev
        );
    }
    Ok(())
}

/// Regenerate the CSV tables from a stored report.json.
pub fn report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let path = cfg.report_dir.join("report.json");
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} not found; run `holoshot eval` first",
            path.display()
        )));
    }
    let report = holoshot_core::eval::read_report_json(&path)?;
    write_outputs(cfg, &report)?;
    println!("rewrote CSV tables in {}", cfg.report_dir.display());
    Ok(())
}

fn write_outputs(cfg: &ExperimentConfig, report: &holoshot_core::eval::EvalReport) -> Result<(), CliError> {
    write_report_json(&cfg.report_dir.join("report.json"), report)?;
    write_fig2_csv(&cfg.report_dir.join("fig2.csv"), report, false)?;
    let has_cross = report
        .entries
        .iter()
        .any(|e| e.train_instrument != e.test_instrument);
    if has_cross {
        write_fig2_csv(&cfg.report_dir.join("fig2_shift.csv"), report, true)?;
        write_table1_csv(&cfg.report_dir.join("table1.csv"), report)?;
    }
    println!("wrote report files to {}", cfg.report_dir.display());
    Ok(())
}
