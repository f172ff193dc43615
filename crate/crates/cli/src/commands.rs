use std::path::{Path, PathBuf};

use skipgru::dataset::{
    generate_corpus, load_sessions, load_tracks, read_sessions, write_sessions, write_tracks,
    LoadMode, SyntheticConfig,
};
use skipgru::eval::{score_submission, write_submission, Ensemble};
use skipgru::features::{FeaturePipeline, TrackCatalog};
use skipgru::glove::{train_glove, CooccurrenceTable, TrackEmbeddings};
use skipgru::optim::{train, Checkpoint, EmbeddingRef, TrainData};
use skipgru::{Error, Result};

use crate::config::RunConfig;
use crate::{Cli, Command, EmbedArgs, EvaluateArgs, GenDataArgs, PredictArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Embed(a) => embed(&a, cfg),
        Command::Train(a) => train_cmd(&a, cfg),
        Command::Predict(a) => predict(&a, cfg),
        Command::Evaluate(a) => evaluate(&a),
    }
}

fn required(flag: Option<&PathBuf>, file: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(file)
        .cloned()
        .ok_or_else(|| Error::Config(format!("missing {name}: pass --{name} or set paths.{name}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_sessions: a.sessions + a.holdout,
        n_tracks: a.tracks,
        acoustic_dim: a.acoustic_dim,
        seed: a.seed,
        label_noise: a.label_noise,
    };
    cfg.validate()?;
    if a.sessions == 0 {
        return Err(Error::Config("--sessions must be positive".into()));
    }
    let corpus = generate_corpus(&cfg)?;
    create_dir(&a.out_dir)?;
    write_tracks(a.out_dir.join("tracks.csv"), &corpus.tracks)?;
    let (main, holdout) = corpus.sessions.split_at(a.sessions);
    write_sessions(a.out_dir.join("sessions.csv"), main)?;
    if !holdout.is_empty() {
        write_sessions(a.out_dir.join("holdout.csv"), holdout)?;
        let withheld: Vec<_> = holdout.iter().map(|s| s.withhold_second_half()).collect();
        write_sessions(a.out_dir.join("holdout_infer.csv"), &withheld)?;
    }
    let events: usize = main.iter().map(|s| s.len()).sum();
    let skips = main
        .iter()
        .flat_map(|s| &s.events)
        .filter(|e| e.interaction.as_ref().is_some_and(|i| i.skipped))
        .count();
    println!("tracks={}", corpus.tracks.len());
    println!("sessions={}", main.len());
    println!("holdout_sessions={}", holdout.len());
    println!("events={events}");
    println!("skip_rate={:.4}", skips as f64 / events as f64);
    Ok(())
}

fn embed(a: &EmbedArgs, cfg: RunConfig) -> Result<()> {
    let sessions_path = required(a.sessions.as_ref(), cfg.paths.sessions.as_ref(), "sessions")?;
    let out = a
        .out
        .clone()
        .or(cfg.paths.embeddings.clone())
        .unwrap_or_else(|| PathBuf::from("embeddings.txt"));
    let mut g = cfg.glove;
    g.dim = a.dims.unwrap_or(g.dim);
    g.window = a.window.unwrap_or(g.window);
    g.epochs = a.epochs.unwrap_or(g.epochs);
    g.lr = a.lr.unwrap_or(g.lr);
    g.x_max = a.x_max.unwrap_or(g.x_max);
    g.alpha = a.alpha.unwrap_or(g.alpha);
    g.seed = a.seed.unwrap_or(g.seed);

    let sessions = read_sessions(&sessions_path, LoadMode::Infer)?;
    let table = CooccurrenceTable::from_sessions(&sessions, g.window)?;
    let (emb, report) = train_glove::<f64>(&table, &g)?;
    let exported = emb.export();
    exported.save(&out)?;
    let last = report
        .epoch_losses
        .last()
        .copied()
        .unwrap_or(report.initial_loss);
    println!("tracks={}", exported.len());
    println!("dims={}", exported.dim());
    println!("nonzero_entries={}", table.len());
    println!("initial_loss={:.6}", report.initial_loss);
    println!("final_loss={last:.6}");
    println!(
        "loss_trend={}",
        if last < report.initial_loss {
            "decreasing"
        } else {
            "not-decreasing"
        }
    );
    println!("out={}", out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, cfg: RunConfig) -> Result<()> {
    let sessions_path = required(a.sessions.as_ref(), cfg.paths.sessions.as_ref(), "sessions")?;
    let tracks_path = required(a.tracks.as_ref(), cfg.paths.tracks.as_ref(), "tracks")?;
    let embeddings_path = a.embeddings.clone().or(cfg.paths.embeddings.clone());
    let out = match (&a.out, &cfg.paths.checkpoint_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => {
            create_dir(dir)?;
            dir.join("model.ckpt")
        }
        (None, None) => PathBuf::from("model.ckpt"),
    };
    let mut variant = cfg.model;
    if let Some(act) = a.activation {
        variant.activation = act.into();
    }
    variant.hidden_size = a.hidden.unwrap_or(variant.hidden_size);
    variant.use_batchnorm = a.batchnorm.unwrap_or(variant.use_batchnorm);
    let mut t = cfg.training;
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.lr = a.lr.unwrap_or(t.lr);
    t.seed = a.seed.unwrap_or(t.seed);
    t.clip_norm = a.clip_norm.or(t.clip_norm);
    t.valid_fraction = a.valid_fraction.unwrap_or(t.valid_fraction);
    if !(t.valid_fraction > 0.0 && t.valid_fraction < 1.0) {
        return Err(Error::Config(format!(
            "valid_fraction must lie in (0, 1), got {}",
            t.valid_fraction
        )));
    }

    let tracks = load_tracks(&tracks_path)?;
    let (embeddings, embedding_ref) = match &embeddings_path {
        Some(p) => {
            let r = EmbeddingRef::of_file(p)?;
            (Some(TrackEmbeddings::load(p)?), Some(r))
        }
        None => (None, None),
    };
    let catalog = TrackCatalog::new(tracks, embeddings);
    let sessions = load_sessions(&sessions_path, &catalog.tracks, LoadMode::Train)?;
    let n_valid =
        ((sessions.len() as f64 * t.valid_fraction).round() as usize).clamp(1, sessions.len() - 1);
    let (train_set, valid_set) = sessions.split_at(sessions.len() - n_valid);
    let pipeline = FeaturePipeline::new(catalog.layout()).fit(train_set, &catalog.tracks)?;
    let data = TrainData {
        train: train_set,
        valid: valid_set,
        pipeline: &pipeline,
        catalog: &catalog,
        embedding: embedding_ref,
    };
    let ckpt: Checkpoint<f64> = train(&data, variant.clone(), &t.train_config())?;
    ckpt.save(&out)?;
    println!("variant={}", variant.label());
    println!("train_sessions={}", train_set.len());
    println!("valid_sessions={}", valid_set.len());
    for e in &ckpt.meta.history {
        println!(
            "epoch={} train_loss={:.6} valid_mean_aa={:.6}",
            e.epoch, e.train_loss, e.valid_mean_aa
        );
    }
    println!("best_epoch={}", ckpt.meta.best_epoch);
    if let Some(aa) = ckpt.meta.best_valid_mean_aa {
        println!("best_valid_mean_aa={aa:.6}");
    }
    println!("checkpoint={}", out.display());
    Ok(())
}

fn predict(a: &PredictArgs, cfg: RunConfig) -> Result<()> {
    let sessions_path = required(a.sessions.as_ref(), cfg.paths.sessions.as_ref(), "sessions")?;
    let tracks_path = required(a.tracks.as_ref(), cfg.paths.tracks.as_ref(), "tracks")?;
    let threshold = a.threshold.unwrap_or(cfg.training.threshold);
    let members = a
        .models
        .iter()
        .map(|p| Ok((p.display().to_string(), Checkpoint::<f64>::load(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let ensemble = Ensemble::new(members)?;
    let tracks = load_tracks(&tracks_path)?;
    let catalog = ensemble.members()[0].1.catalog(tracks)?;
    let sessions = load_sessions(&sessions_path, &catalog.tracks, LoadMode::Infer)?;
    let preds = ensemble.predict(&sessions, &catalog, threshold, a.batch_size)?;
    write_submission(&a.out, &preds)?;
    println!("models={}", ensemble.len());
    println!("sessions={}", preds.len());
    println!("out={}", a.out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let report = score_submission(&a.truth, &a.submission)?;
    print!("{}", report.to_key_value());
    let write = |path: &Path, text: String| {
        std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    };
    if let Some(p) = &a.breakdown {
        write(p, report.per_position_csv())?;
    }
    if let Some(p) = &a.per_session {
        write(p, report.per_session_csv())?;
    }
    Ok(())
}
