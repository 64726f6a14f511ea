//! The six pipeline verbs. Every command echoes its effective
//! configuration into the output directory and is byte-deterministic for a
//! fixed config and seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ciae_core::checkpoint::{load_checkpoint, save_checkpoint};
use ciae_core::fusion::{prediction_from_files, prediction_to_files, proposals_to_json};
use ciae_core::scene::{generate_scene, scene_from_files, scene_to_files};
use ciae_core::trainer::train;
use ciae_core::viz::{embedding_to_rgb, prediction_to_rgb, write_rgb};
use ciae_core::{
    assign, build_queries, evaluate, simulate_proposals, PQReport, PanopticPrediction,
    PanopticScene,
};

use crate::config::{AblateParam, RunConfig};
use crate::CliError;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

pub fn generate(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.scene.seed = seed;
    }
    ensure_dir(out)?;
    let scene = generate_scene(&cfg.scene)?;
    scene_to_files(&scene, out)?;
    cfg.echo(out)?;
    println!(
        "generated {}x{} scene: {} segments ({} things) -> {}",
        scene.width(),
        scene.height(),
        scene.segments().len(),
        scene.thing_segments().count(),
        out.display()
    );
    Ok(())
}

pub fn train_cmd(
    config: &Path,
    scene_dir: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let scene = scene_from_files(scene_dir)?;
    ensure_dir(out)?;
    let (map, bank, log) = train(std::slice::from_ref(&scene), &cfg.train, &cfg.loss)?;
    save_checkpoint(&out.join("checkpoint.bin"), &map, &bank)?;
    let mut log_json = serde_json::to_string_pretty(&log.to_json())
        .map_err(|e| CliError::runtime(format!("train log: {e}")))?;
    log_json.push('\n');
    fs::write(out.join("train_log.json"), log_json)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    cfg.echo(out)?;
    let last = log.records.last().expect("at least one record");
    println!(
        "trained {} iters (final l_ciae {:.6}) -> {}",
        bank.current_iter(),
        last.l_ciae,
        out.display()
    );
    Ok(())
}

pub fn infer(
    config: &Path,
    checkpoint: &Path,
    scene_dir: &Path,
    out: &Path,
    oracle: bool,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.proposals.seed = seed;
    }
    if oracle {
        cfg.proposals.oracle_queries = true;
    }
    let scene = scene_from_files(scene_dir)?;
    let (map, bank) = load_checkpoint(checkpoint)?;
    if (map.height(), map.width()) != (scene.height(), scene.width()) {
        return Err(CliError::config(format!(
            "checkpoint is {}x{} but the scene is {}x{}",
            map.width(),
            map.height(),
            scene.width(),
            scene.height()
        )));
    }
    ensure_dir(out)?;
    let pred = run_inference(&cfg, &map, &bank, &scene)?;
    let proposals = simulate_proposals(&scene, &cfg.proposals)?;
    prediction_to_files(&pred, out)?;
    fs::write(out.join("proposals.json"), proposals_to_json(&proposals)?)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    cfg.echo(out)?;
    println!(
        "inferred {} segments over {} queries -> {}",
        pred.segments().len(),
        pred.queries().len(),
        out.display()
    );
    Ok(())
}

fn run_inference(
    cfg: &RunConfig,
    map: &ciae_core::EmbeddingMap,
    bank: &ciae_core::MemoryBank,
    scene: &PanopticScene,
) -> Result<PanopticPrediction, CliError> {
    let view = map.normalize()?;
    let proposals = simulate_proposals(scene, &cfg.proposals)?;
    let queries = build_queries(
        &view,
        map,
        &proposals,
        bank,
        Some(scene),
        cfg.proposals.oracle_queries,
    )?;
    let min_area = cfg.fusion.min_stuff_area_for(scene.height(), scene.width());
    Ok(assign(&view, &queries, min_area, cfg.fusion.oob_score)?)
}

fn write_metrics(report: &PQReport, out: &Path) -> Result<String, CliError> {
    let mut json = serde_json::to_string_pretty(&report.to_metrics_json())
        .map_err(|e| CliError::runtime(format!("metrics: {e}")))?;
    json.push('\n');
    fs::write(out.join("metrics.json"), &json)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(json)
}

pub fn eval(pred_dir: &Path, scene_dir: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let scene = scene_from_files(scene_dir)?;
    let pred = prediction_from_files(pred_dir)?;
    let report = evaluate(&pred, &scene)?;
    let out = out.unwrap_or(pred_dir);
    ensure_dir(out)?;
    let json = write_metrics(&report, out)?;
    let echo = serde_json::json!({
        "command": "eval",
        "pred": pred_dir.display().to_string(),
        "scene": scene_dir.display().to_string(),
    });
    fs::write(
        out.join("config.echo.json"),
        serde_json::to_string_pretty(&echo).map_err(|e| CliError::runtime(e.to_string()))?
            + "\n",
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    print!("{json}");
    Ok(())
}

pub fn viz(
    checkpoint: Option<&Path>,
    pred_dir: Option<&Path>,
    out: &Path,
    palette_seed: u64,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    let mut outputs = Vec::new();
    match (checkpoint, pred_dir) {
        (Some(ckpt), None) => {
            let (map, _) = load_checkpoint(ckpt)?;
            let rgb = embedding_to_rgb(&map, 100)?;
            let path = out.join("embedding.ppm");
            write_rgb(&path, map.width(), map.height(), &rgb)?;
            outputs.push(path);
        }
        (None, Some(pred_dir)) => {
            let pred = prediction_from_files(pred_dir)?;
            let rgb = prediction_to_rgb(&pred, palette_seed);
            let path = out.join("prediction.ppm");
            write_rgb(&path, pred.width(), pred.height(), &rgb)?;
            outputs.push(path);
        }
        _ => {
            return Err(CliError::config(
                "viz needs exactly one of --checkpoint or --pred".into(),
            ))
        }
    }
    let echo = serde_json::json!({
        "command": "viz",
        "checkpoint": checkpoint.map(|p| p.display().to_string()),
        "pred": pred_dir.map(|p| p.display().to_string()),
        "palette_seed": palette_seed,
    });
    fs::write(
        out.join("config.echo.json"),
        serde_json::to_string_pretty(&echo).map_err(|e| CliError::runtime(e.to_string()))?
            + "\n",
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    for p in outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

struct AblateCell {
    index: usize,
    setting: String,
    seed: u64,
    cfg: RunConfig,
    dir: PathBuf,
}

struct CellOutcome {
    setting: String,
    seed: u64,
    pq: f64,
    pq_things: f64,
    pq_stuff: f64,
}

fn apply_sweep_value(
    cfg: &mut RunConfig,
    param: AblateParam,
    value: &serde_json::Value,
) -> Result<String, CliError> {
    let bad = || {
        CliError::config(format!(
            "ablate value {value} is not valid for parameter {}",
            param.name()
        ))
    };
    let setting = match param {
        AblateParam::Margin => {
            let v = value.as_f64().ok_or_else(bad)?;
            cfg.loss.margin = v;
            format!("margin={v}")
        }
        AblateParam::BoxExpand => {
            let v = value.as_f64().ok_or_else(bad)?;
            cfg.loss.box_expand = v;
            format!("box_expand={v}")
        }
        AblateParam::Filtering => {
            let v = value.as_bool().ok_or_else(bad)?;
            cfg.loss.filtering = v;
            format!("filtering={}", if v { "on" } else { "off" })
        }
        AblateParam::Dim => {
            let v = value.as_u64().ok_or_else(bad)? as usize;
            cfg.train.dim = v;
            format!("dim={v}")
        }
        AblateParam::Momentum => {
            let v = value.as_f64().ok_or_else(bad)?;
            cfg.train.memory_momentum = v;
            format!("momentum={v}")
        }
    };
    cfg.validate()?;
    Ok(setting)
}

fn worker_count(cells: usize) -> usize {
    let cap = std::env::var("CIAE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    cap.min(cells).max(1)
}

/// Run one fully isolated sweep cell: generate, train, infer, eval, with
/// every artifact written under the cell directory.
fn run_cell(cell: &AblateCell) -> Result<CellOutcome, CliError> {
    let cfg = &cell.cfg;
    ensure_dir(&cell.dir)?;
    let scene = generate_scene(&cfg.scene)?;
    let scene_dir = cell.dir.join("scene");
    scene_to_files(&scene, &scene_dir)?;

    let (map, bank, log) = train(std::slice::from_ref(&scene), &cfg.train, &cfg.loss)?;
    save_checkpoint(&cell.dir.join("checkpoint.bin"), &map, &bank)?;
    let mut log_json = serde_json::to_string_pretty(&log.to_json())
        .map_err(|e| CliError::runtime(format!("train log: {e}")))?;
    log_json.push('\n');
    fs::write(cell.dir.join("train_log.json"), log_json)
        .map_err(|e| CliError::runtime(e.to_string()))?;

    let pred = run_inference(cfg, &map, &bank, &scene)?;
    let pred_dir = cell.dir.join("pred");
    prediction_to_files(&pred, &pred_dir)?;

    let report = evaluate(&pred, &scene)?;
    write_metrics(&report, &cell.dir)?;
    cfg.echo(&cell.dir)?;
    Ok(CellOutcome {
        setting: cell.setting.clone(),
        seed: cell.seed,
        pq: report.pq,
        pq_things: report.pq_things,
        pq_stuff: report.pq_stuff,
    })
}

pub fn ablate(config: &Path, out: &Path) -> Result<(), CliError> {
    let base = RunConfig::load(config)?;
    let sweep = base
        .ablate
        .clone()
        .ok_or_else(|| CliError::config("config has no ablate section".into()))?;
    ensure_dir(out)?;

    let mut cells = Vec::new();
    for value in &sweep.values {
        for seed in 0..sweep.seeds {
            let mut cfg = base.clone();
            let setting = apply_sweep_value(&mut cfg, sweep.param, value)?;
            cfg.scene.seed = cfg.scene.seed.wrapping_add(seed);
            cfg.train.seed = cfg.train.seed.wrapping_add(seed);
            cfg.proposals.seed = cfg.proposals.seed.wrapping_add(seed);
            let dir = out.join("cells").join(format!("{setting}_s{seed}"));
            cells.push(AblateCell {
                index: cells.len(),
                setting,
                seed,
                cfg,
                dir,
            });
        }
    }

    let workers = worker_count(cells.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellOutcome, CliError>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let outcome = run_cell(&cells[i]);
                results.lock().unwrap()[cells[i].index] = Some(outcome);
            });
        }
    });

    let mut csv = String::from("setting,seed,pq,pq_things,pq_stuff\n");
    for slot in results.into_inner().unwrap() {
        let outcome = slot.expect("every cell ran")?;
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            outcome.setting, outcome.seed, outcome.pq, outcome.pq_things, outcome.pq_stuff
        ));
    }
    fs::write(out.join("ablate.csv"), &csv).map_err(|e| CliError::runtime(e.to_string()))?;
    base.echo(out)?;
    print!("{csv}");
    Ok(())
}
