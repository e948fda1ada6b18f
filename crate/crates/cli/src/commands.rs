use std::fs;
use std::path::Path;
use std::time::Instant;

use dmsp_core::data::{
    generate_scr, load_csv, mask_target, save_csv, split, MultiSourceDataset, ScrConfig,
    SplitIndices, TruthGrid, DEFAULT_FRACTIONS,
};
use dmsp_core::geometry::GeoPoint;
use dmsp_core::metrics::{evaluate_model, save_residuals, Evaluation, Reference};
use dmsp_core::model::{
    forward, load_checkpoint, save_checkpoint, Checkpoint, ContextIndex, ModelConfig, Query,
    SourcePrediction,
};
use dmsp_core::training::{resume, train_epoch, TrainConfig, TrainState, TrainingSet};
use dmsp_core::DmspError;
use serde_json::json;

use crate::svg;
use crate::{BenchArgs, CliError, EvalArgs, GenScrArgs, InspectArgs, PlotArgs, PredictArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

const DEFAULT_K: usize = 3;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    write_text(path, &(text + "\n"))
}

/// k used at training time, or the default for checkpoints without one.
fn neighbors_of(ckpt: &Checkpoint) -> usize {
    ckpt.metadata["train_config"]["k_neighbors"]
        .as_u64()
        .map_or(DEFAULT_K, |k| k as usize)
}

fn split_of(ckpt: &Checkpoint, dataset: &MultiSourceDataset, seed: Option<u64>) -> Result<SplitIndices> {
    let seed = seed
        .or_else(|| ckpt.metadata["split_seed"].as_u64())
        .ok_or_else(|| CliError::Usage("checkpoint records no split seed; pass --split-seed".into()))?;
    Ok(split(dataset, DEFAULT_FRACTIONS, seed)?)
}

fn check_compatible(ckpt: &Checkpoint, dataset: &MultiSourceDataset) -> Result<()> {
    if ckpt.params.feature_dims() != dataset.feature_dims().as_slice() {
        return Err(CliError::Data(format!(
            "model expects feature widths {:?}, dataset has {:?}",
            ckpt.params.feature_dims(),
            dataset.feature_dims()
        )));
    }
    Ok(())
}

pub fn gen_scr(a: GenScrArgs) -> Result<()> {
    let config = ScrConfig {
        grid_size: a.grid_size,
        length_scale: a.length_scale,
        n_high: a.n_high,
        n_low: a.n_low,
        noise_sigma: a.noise_sigma,
        ..ScrConfig::default()
    };
    let (dataset, truth) = generate_scr(&config, a.seed)?;
    create_dir(&a.out_dir)?;
    let data_path = a.out_dir.join("dataset.csv");
    let truth_path = a.out_dir.join("truth.csv");
    save_csv(&dataset, &data_path)?;
    truth.save_csv(&truth_path)?;
    println!("{}", dataset.summary());
    println!("wrote {} and {}", data_path.display(), truth_path.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    if a.resume.is_none() && a.seed.is_none() {
        return Err(CliError::Usage("--seed is required for training".into()));
    }
    let dataset = load_csv(&a.data)?;
    let (state, config, split_seed) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let (state, mut config) = TrainState::from_checkpoint(&ckpt)?;
            let split_seed = ckpt.metadata["split_seed"]
                .as_u64()
                .ok_or_else(|| CliError::Data("checkpoint records no split seed".into()))?;
            if let Some(limit) = a.max_epochs {
                config.max_epochs = config.max_epochs.max(limit);
            }
            check_compatible(&ckpt, &dataset)?;
            (state, config, split_seed)
        }
        None => {
            let seed = a.seed.expect("checked above");
            let config = TrainConfig {
                learning_rate: a.learning_rate,
                max_epochs: a.max_epochs.unwrap_or(TrainConfig::default().max_epochs),
                patience: a.patience,
                k_neighbors: a.k,
                seed,
                mode: a.mode,
                batch_size: a.batch_size,
                strict_order: a.strict_order,
                model: ModelConfig {
                    hidden_dim: a.hidden_dim,
                    num_layers: a.layers,
                },
            };
            let state = TrainState::init(&dataset.feature_dims(), &config)?;
            (state, config, a.split_seed.unwrap_or(seed))
        }
    };
    create_dir(&a.out_dir)?;
    let sp = split(&dataset, DEFAULT_FRACTIONS, split_seed)?;
    let data = TrainingSet::new(&dataset, &sp)?;
    let ckpt_path = a.out_dir.join("model.ckpt");
    let save = |s: &TrainState| -> dmsp_core::Result<()> {
        let mut ckpt = s.to_checkpoint(&config)?;
        ckpt.metadata["split_seed"] = json!(split_seed);
        save_checkpoint(&ckpt_path, &ckpt)
    };
    let (state, report) = resume(state, &data, &config, save)?;
    save(&state)?;
    let mut report_json = serde_json::to_value(&report).expect("report serializes");
    report_json["split_seed"] = json!(split_seed);
    write_json(&a.out_dir.join("report.json"), &report_json)?;
    println!(
        "trained {} epochs (best {:?}); fidelity scores {:?}; wrote {}",
        state.epoch,
        report.best_epoch,
        report.final_fidelity_scores,
        ckpt_path.display()
    );
    Ok(())
}

fn read_rows(path: &Path, required: &[&str]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    for name in required {
        if !headers.iter().any(|h| h == name) {
            return Err(DmspError::SchemaViolation(format!("missing column `{name}` in {}", path.display())).into());
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| DmspError::Parse {
            row: i + 1,
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((headers, rows))
}

fn cell<T: std::str::FromStr>(headers: &[String], row: &[String], name: &str, line: usize) -> Result<Option<T>> {
    let Some(col) = headers.iter().position(|h| h == name) else {
        return Ok(None);
    };
    let text = row.get(col).map(String::as_str).unwrap_or("");
    if text.is_empty() {
        return Ok(None);
    }
    text.parse().map(Some).map_err(|_| {
        DmspError::Parse {
            row: line,
            message: format!("column `{name}`: cannot parse `{text}`"),
        }
        .into()
    })
}

fn required<T: std::str::FromStr>(headers: &[String], row: &[String], name: &str, line: usize) -> Result<T> {
    cell(headers, row, name, line)?.ok_or_else(|| {
        DmspError::Parse {
            row: line,
            message: format!("empty `{name}`"),
        }
        .into()
    })
}

fn prediction_cells(n_sources: usize, p: Option<&SourcePrediction>) -> Vec<String> {
    match p {
        Some(p) => p
            .per_source
            .iter()
            .map(|v| v.map(|v| v.to_string()).unwrap_or_default())
            .chain([p.fused.to_string(), p.partial.to_string()])
            .collect(),
        None => vec![String::new(); n_sources + 2],
    }
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let dataset = load_csv(&a.data)?;
    check_compatible(&ckpt, &dataset)?;
    let params = &ckpt.params;
    let k = neighbors_of(&ckpt);
    let train_split = if a.context == "train" {
        Some(split_of(&ckpt, &dataset, None)?)
    } else {
        None
    };
    let context = match &train_split {
        Some(sp) => dataset.subset(&sp.train)?,
        None => dataset.clone(),
    };
    let index = ContextIndex::build(&context)?;
    let n = params.source_count();
    let pred_header = (0..n).map(|s| format!("pred_{s}")).chain(["fused".into(), "partial".into()]);

    let mut out: Vec<Vec<String>> = Vec::new();
    let mut unpredictable = 0usize;
    let mut keep = |r: dmsp_core::Result<SourcePrediction>| -> Result<Option<SourcePrediction>> {
        match r {
            Ok(p) => Ok(Some(p)),
            Err(DmspError::NoUsableSource) => {
                unpredictable += 1;
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    };
    let header: Vec<String> = if let Some(path) = &a.locations {
        let (headers, rows) = read_rows(path, &["x", "y"])?;
        for (i, row) in rows.iter().enumerate() {
            let line = i + 1;
            let loc = GeoPoint::new(required(&headers, row, "x", line)?, required(&headers, row, "y", line)?);
            let t: i64 = cell(&headers, row, "timestamp", line)?.unwrap_or(0);
            let p = keep(forward(params, &context, &index, &Query::at(loc, t), k))?;
            let mut cells = vec![loc.x.to_string(), loc.y.to_string(), t.to_string()];
            cells.extend(prediction_cells(n, p.as_ref()));
            out.push(cells);
        }
        ["x", "y", "timestamp"].into_iter().map(String::from).chain(pred_header).collect()
    } else if let Some(path) = &a.masked_samples {
        let (headers, rows) = read_rows(path, &["source_id", "index"])?;
        for (i, row) in rows.iter().enumerate() {
            let line = i + 1;
            let s: usize = required(&headers, row, "source_id", line)?;
            let j: usize = required(&headers, row, "index", line)?;
            let sample = dataset
                .sample(s, j)
                .ok_or(DmspError::InvalidMaskTarget { source_id: s, index: j })?;
            let pos = match &train_split {
                Some(sp) => sp.train[s].binary_search(&j).map_err(|_| {
                    CliError::Data(format!("sample ({s}, {j}) is not in the training split"))
                })?,
                None => j,
            };
            let view = mask_target(&context, s, pos)?;
            let q = Query::masked(&view).expect("masked view");
            let p = keep(forward(params, &view, &index, &q, k))?;
            let mut cells = vec![
                s.to_string(),
                j.to_string(),
                sample.location.x.to_string(),
                sample.location.y.to_string(),
                sample.timestamp.to_string(),
            ];
            cells.extend(prediction_cells(n, p.as_ref()));
            out.push(cells);
        }
        ["source_id", "index", "x", "y", "timestamp"]
            .into_iter()
            .map(String::from)
            .chain(pred_header)
            .collect()
    } else {
        return Err(CliError::Usage("pass --locations or --masked-samples".into()));
    };

    let mut w = csv::Writer::from_path(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let io = |e: csv::Error| CliError::Data(format!("{}: {e}", a.out.display()));
    w.write_record(&header).map_err(io)?;
    for row in &out {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    if unpredictable > 0 {
        eprintln!("warning: {unpredictable} rows had no usable source and were left empty");
    }
    println!("wrote {} predictions to {}", out.len(), a.out.display());
    Ok(())
}

fn run_evaluation(
    ckpt: &Checkpoint,
    data: &Path,
    truth: Option<&Path>,
    reference_source: Option<usize>,
    split_seed: Option<u64>,
) -> Result<Evaluation> {
    let dataset = load_csv(data)?;
    check_compatible(ckpt, &dataset)?;
    let sp = split_of(ckpt, &dataset, split_seed)?;
    let grid;
    let reference = match (truth, reference_source) {
        (Some(path), _) => {
            grid = TruthGrid::load_csv(path)?;
            Reference::Truth(&grid)
        }
        (None, Some(s)) => Reference::Source(s),
        (None, None) => {
            return Err(CliError::Usage("pass --truth or --reference-source".into()));
        }
    };
    Ok(evaluate_model(&ckpt.params, &dataset, &sp, reference, neighbors_of(ckpt))?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ev = run_evaluation(&ckpt, &a.data, a.truth.as_deref(), a.reference_source, a.split_seed)?;
    let report = serde_json::to_value(&ev.report).expect("report serializes");
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    if let Some(path) = &a.residuals {
        save_residuals(path, &ev.rows)?;
    }
    if ev.skipped > 0 {
        eprintln!("warning: {} test samples had no usable source", ev.skipped);
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    Ok(())
}

fn fidelity_table(ckpt: &Checkpoint) -> serde_json::Value {
    let logits = ckpt.params.fidelity.as_slice();
    let scores = ckpt.params.fidelity.scores();
    json!(logits
        .iter()
        .zip(scores.as_slice())
        .enumerate()
        .map(|(s, (l, c))| json!({"source_id": s, "logit": l, "score": c}))
        .collect::<Vec<_>>())
}

pub fn inspect_fidelity(a: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    println!("{}", serde_json::to_string_pretty(&fidelity_table(&ckpt)).expect("serializes"));
    Ok(())
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ev = run_evaluation(&ckpt, &a.data, a.truth.as_deref(), a.reference_source, a.split_seed)?;
    create_dir(&a.out_dir)?;
    let scores = ckpt.params.fidelity.scores();
    let labels: Vec<String> = (0..scores.len()).map(|s| format!("source {s}")).collect();
    let files = [
        ("fidelity.svg", svg::bar_chart("Fidelity scores", &labels, scores.as_slice())),
        (
            "predictions.svg",
            svg::paired_maps(
                "Test predictions and reference",
                ["prediction", "reference"],
                &ev.rows.iter().map(|r| (r.x, r.y, r.prediction, r.reference)).collect::<Vec<_>>(),
            ),
        ),
        (
            "scatter.svg",
            svg::scatter(
                "Prediction vs reference",
                &ev.rows.iter().map(|r| (r.reference, r.prediction)).collect::<Vec<_>>(),
            ),
        ),
    ];
    for (name, doc) in files {
        let path = a.out_dir.join(name);
        write_text(&path, &doc)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    if a.scales.is_empty() || a.scales.contains(&0) || a.epochs == 0 {
        return Err(CliError::Usage("scales and epochs must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for &scale in &a.scales {
        let base = ScrConfig::default();
        let config = ScrConfig {
            n_high: base.n_high * scale,
            n_low: base.n_low * scale,
            ..base
        };
        let (dataset, _) = generate_scr(&config, a.seed)?;
        let sp = split(&dataset, DEFAULT_FRACTIONS, a.seed)?;
        let data = TrainingSet::new(&dataset, &sp)?;
        let train_config = TrainConfig {
            seed: a.seed,
            ..TrainConfig::default()
        };
        let mut state = TrainState::init(&dataset.feature_dims(), &train_config)?;
        let mut epoch_times = Vec::with_capacity(a.epochs);
        for _ in 0..a.epochs {
            let start = Instant::now();
            train_epoch(&mut state, &data, &train_config)?;
            epoch_times.push(start.elapsed().as_secs_f64());
        }
        epoch_times.sort_by(f64::total_cmp);
        let median = epoch_times[epoch_times.len() / 2];
        times.push(median);
        rows.push(json!({
            "scale": scale,
            "samples": dataset.sample_counts().iter().sum::<usize>(),
            "train_samples": data.train().sample_counts().iter().sum::<usize>(),
            "epoch_seconds": median,
        }));
    }
    let growth: Vec<f64> = times.windows(2).map(|w| w[1] / w[0]).collect();
    let out = json!({"seed": a.seed, "scales": rows, "growth": growth});
    println!("{}", serde_json::to_string_pretty(&out).expect("serializes"));
    Ok(())
}
