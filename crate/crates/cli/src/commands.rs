use std::fs;
use std::path::{Path, PathBuf};

use gflow_core::causality::{aggregate_ensemble, causality_report, detect_lags, extract_causality, NormEnsemble};
use gflow_core::checkpoint::Checkpoint;
use gflow_core::data::{self, Dataset, Split, Splits};
use gflow_core::eval::{evaluate, EvalReport};
use gflow_core::model::{init_model, VelocityModel};
use gflow_core::ode::Trajectory;
use gflow_core::train::{train_with, LossHistory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{expand_grid, parse_grid, Benchmark, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::manifest::Manifest;
use crate::plot;

pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.json";

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::data(format!("{} not found", path.display()))
        } else {
            CliError::io(path, e)
        }
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match cfg.benchmark {
        Benchmark::Lorenz96 => {
            let mut ds = data::gen_lorenz96(&cfg.lorenz_spec())?;
            ds.splits = data::split_indices(ds.len(), cfg.data_seed);
            ds
        }
        Benchmark::MackeyGlass => {
            // A single long trajectory: fit and forecast on the same series.
            let mut ds = data::gen_mackey_glass(&cfg.mackey_glass_spec())?;
            ds.splits = Splits { train: vec![0], val: vec![], test: vec![0] };
            ds
        }
        Benchmark::Tsunami => {
            let dir = cfg
                .data_dir
                .as_deref()
                .ok_or_else(|| CliError::config("tsunami needs data_dir"))?;
            data::filter_and_split(&data::load_tsunami(Path::new(dir))?, cfg.data_seed)?
        }
        Benchmark::Surrogate => data::gen_surrogate_cascade(&cfg.surrogate_spec())?,
    };
    if ds.is_empty() {
        return Err(CliError::data("dataset is empty"));
    }
    Ok(ds)
}

/// Trajectories of one split with times multiplied by `time_scale`.
pub fn scaled_split(ds: &Dataset, split: Split, time_scale: f64) -> Result<Vec<Trajectory>> {
    ds.split(split)
        .into_iter()
        .map(|t| {
            if time_scale == 1.0 {
                return Ok(t);
            }
            let times = t.times.iter().map(|x| x * time_scale).collect();
            Ok(Trajectory::new(times, t.states)?)
        })
        .collect()
}

pub fn load_dataset(out: &Path) -> Result<Dataset> {
    Ok(serde_json::from_str(&read(&out.join(DATASET_FILE))?)?)
}

pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let ds = build_dataset(cfg)?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    write(&out.join(DATASET_FILE), to_json(&ds))?;
    Manifest::refresh(out)?;
    println!(
        "{:?}: {} trajectories x {} points, dt {}, series {}; splits train {} / val {} / test {}",
        cfg.benchmark,
        ds.len(),
        ds.grid.n_points(),
        ds.grid.dt,
        ds.series_names.join(","),
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len()
    );
    Ok(ds)
}

fn run_dir(out: &Path, r: usize) -> PathBuf {
    out.join(format!("run_{r}"))
}

fn run_dirs(out: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut runs = Vec::new();
    let entries = match fs::read_dir(out) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(runs),
        Err(e) => return Err(CliError::io(out, e)),
    };
    for e in entries {
        let e = e.map_err(|e| CliError::io(out, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(r) = name.strip_prefix("run_").and_then(|s| s.parse::<usize>().ok()) {
            if e.path().is_dir() {
                runs.push((r, e.path()));
            }
        }
    }
    runs.sort();
    Ok(runs)
}

pub fn load_checkpoints(out: &Path) -> Result<Vec<Checkpoint>> {
    let mut cks = Vec::new();
    for (_, dir) in run_dirs(out)? {
        let p = dir.join("checkpoint.json");
        if p.exists() {
            cks.push(Checkpoint::load(&p)?);
        }
    }
    if cks.is_empty() {
        return Err(CliError::data(format!("no checkpoints under {}", out.display())));
    }
    Ok(cks)
}

/// Trains one repeat.
pub fn train_repeat(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    data: &[Trajectory],
    r: usize,
    log_every: usize,
) -> Result<(Checkpoint, LossHistory)> {
    let seed = cfg.seed + r as u64;
    let mut model = init_model(&cfg.model_spec(ds.n_series())?, seed)?;
    let tc = cfg.train_config(seed);
    let history = train_with(&mut model, data, &tc, |rec, _| {
        if log_every > 0 && (rec.epoch + 1) % log_every == 0 {
            eprintln!(
                "run {r} epoch {:>5}: loss {:.6e} penalty {:.4e} pruned {}",
                rec.epoch + 1,
                rec.data_loss,
                rec.penalty,
                rec.pruned_columns
            );
        }
    })
    .map_err(|e| {
        let c = CliError::from(e);
        CliError::new(c.kind, format!("repeat {r} (seed {seed}): {}", c.message))
    })?;
    let mut ck = Checkpoint::new(model, tc, seed);
    let meta = [
        ("benchmark", serde_json::to_value(cfg.benchmark)?.as_str().unwrap_or_default().to_string()),
        ("repeat", r.to_string()),
        ("alpha", cfg.alpha.to_string()),
        ("rho", cfg.rho.to_string()),
        ("n_lags", cfg.n_lags.to_string()),
        ("series", ds.series_names.join(",")),
        ("time_scale", cfg.time_scale.to_string()),
    ];
    for (k, v) in meta {
        ck.metadata.insert(k.into(), v);
    }
    Ok((ck, history))
}

/// Trains `cfg.n_repeats` repeats into `out/run_<r>`. Stale run directories
/// are removed first.
pub fn train_into(cfg: &ExperimentConfig, ds: &Dataset, out: &Path) -> Result<Vec<Checkpoint>> {
    let data = scaled_split(ds, Split::Train, cfg.time_scale)?;
    if data.is_empty() {
        return Err(CliError::data("training split is empty"));
    }
    for (_, dir) in run_dirs(out)? {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let log_every = (cfg.n_max / 10).max(1);
    let results: Vec<Result<(Checkpoint, LossHistory)>> = (0..cfg.n_repeats)
        .into_par_iter()
        .map(|r| train_repeat(cfg, ds, &data, r, log_every))
        .collect();
    let mut cks = Vec::with_capacity(results.len());
    for (r, res) in results.into_iter().enumerate() {
        let (ck, history) = res?;
        let dir = run_dir(out, r);
        write(&dir.join("checkpoint.json"), ck.to_json()?)?;
        write(&dir.join("history.csv"), history.to_csv())?;
        let last = history.records.last();
        println!(
            "run {r} seed {}: final loss {}, pruned columns {}",
            ck.init_seed,
            last.map_or(f64::NAN, |l| l.data_loss),
            ck.model.pruned_count()
        );
        cks.push(ck);
    }
    Ok(cks)
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<Checkpoint>> {
    let ds = load_dataset(out)?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    let cks = train_into(cfg, &ds, out)?;
    Manifest::refresh(out)?;
    Ok(cks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub overrides: Vec<String>,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub entries: Vec<GridEntry>,
    pub selected: usize,
}

/// Trains every grid combination, scores each by mean validation MSE and
/// promotes the best one to `out/run_<r>` and `out/config.json`.
pub fn train_grid(cfg: &ExperimentConfig, grid: &str, out: &Path) -> Result<GridReport> {
    let ds = load_dataset(out)?;
    let val = scaled_split(&ds, Split::Val, cfg.time_scale)?;
    if val.is_empty() {
        return Err(CliError::data("grid search needs a non-empty validation split"));
    }
    let combos = expand_grid(&parse_grid(grid)?);
    let mut entries = Vec::with_capacity(combos.len());
    let mut best: Option<(usize, f64, ExperimentConfig)> = None;
    for (i, overrides) in combos.iter().enumerate() {
        let c = cfg.clone().with_overrides(overrides)?;
        let dir = out.join("grid").join(format!("combo_{i}"));
        write(&dir.join(CONFIG_FILE), c.to_json())?;
        let cks = train_into(&c, &ds, &dir)?;
        let models: Vec<VelocityModel> = cks.into_iter().map(|c| c.model).collect();
        let (rep, _) = evaluate(&models, &val, ds.split_indices(Split::Val), &ds.series_names)?;
        println!("grid {i} [{}]: val MSE {:.6e}", overrides.join(" "), rep.mean_mse);
        if best.as_ref().is_none_or(|b| rep.mean_mse < b.1) {
            best = Some((i, rep.mean_mse, c));
        }
        entries.push(GridEntry { overrides: overrides.clone(), val_mse: rep.mean_mse });
    }
    let (selected, _, best_cfg) = best.ok_or_else(|| CliError::config("empty grid"))?;
    for (_, dir) in run_dirs(out)? {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let src = out.join("grid").join(format!("combo_{selected}"));
    for (r, dir) in run_dirs(&src)? {
        for f in ["checkpoint.json", "history.csv"] {
            let to = run_dir(out, r).join(f);
            write(&to, read(&dir.join(f))?)?;
        }
    }
    write(&out.join(CONFIG_FILE), best_cfg.to_json())?;
    let report = GridReport { entries, selected };
    write(&out.join("grid.json"), to_json(&report))?;
    println!("selected grid {selected} [{}]", report.entries[selected].overrides.join(" "));
    Manifest::refresh(out)?;
    Ok(report)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

pub fn eval_file(split: Split) -> String {
    format!("eval_{}.json", split_name(split))
}

pub fn predictions_file(split: Split) -> String {
    format!("predictions_{}.json", split_name(split))
}

pub fn evaluate_cmd(cfg: &ExperimentConfig, out: &Path, split: Split) -> Result<EvalReport> {
    let ds = load_dataset(out)?;
    let truths = scaled_split(&ds, split, cfg.time_scale)?;
    if truths.is_empty() {
        return Err(CliError::data(format!("{} split is empty", split_name(split))));
    }
    let models: Vec<VelocityModel> = load_checkpoints(out)?.into_iter().map(|c| c.model).collect();
    let (report, preds) = evaluate(&models, &truths, ds.split_indices(split), &ds.series_names)?;
    write(&out.join(eval_file(split)), to_json(&report))?;
    write(&out.join(predictions_file(split)), to_json(&preds))?;
    Manifest::refresh(out)?;
    println!(
        "{} split: {} trajectories, {} repeats, MSE {:.6e} +/- {:.6e}",
        split_name(split),
        truths.len(),
        models.len(),
        report.mean_mse,
        report.std_mse
    );
    Ok(report)
}

pub fn causality_cmd(out: &Path) -> Result<NormEnsemble> {
    let cks = load_checkpoints(out)?;
    let names: Vec<String> = match cks[0].metadata.get("series") {
        Some(s) if !s.is_empty() => s.split(',').map(String::from).collect(),
        _ => (1..=cks[0].model.n_series).map(|i| format!("x{i}")).collect(),
    };
    let members: Vec<_> = cks.iter().map(|c| extract_causality(&c.model)).collect();
    let seeds = cks.iter().map(|c| c.init_seed).collect();
    let ens = NormEnsemble::new(members, seeds)?;
    let dir = out.join("causality");
    causality_report(&ens, &names, &dir)?;

    let delayed = !ens.members[0].lags.is_empty();
    if delayed {
        let mut csv = String::from("run,seed,target,source,rank,lag,tau,score\n");
        for (r, cm) in ens.members.iter().enumerate() {
            for target in 0..cm.n_components() {
                for source in 0..cm.n_series() {
                    let lags = detect_lags(cm, source, target)?;
                    for (rank, l) in lags.iter().enumerate() {
                        csv.push_str(&format!(
                            "{r},{},{},{},{},{},{},{}\n",
                            ens.seeds[r],
                            names[target],
                            names[source],
                            rank + 1,
                            l.index,
                            l.tau,
                            l.score
                        ));
                    }
                    if r == 0 || cm.n_series() == 1 {
                        let top: Vec<String> = lags.iter().take(3).map(|l| format!("tau{}={:.3}", l.index, l.score)).collect();
                        println!("run {r}: {} <- {}: {}", names[target], names[source], top.join(" "));
                    }
                }
            }
        }
        write(&dir.join("lags.csv"), csv)?;
    }
    let s = aggregate_ensemble(&ens);
    println!("{} runs; mean series adjacency (rows = targets):", s.n_runs);
    let adj = ens.members[0].series_adjacency();
    for (t, row) in adj.rows().into_iter().enumerate() {
        let cells: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "." }).collect();
        println!("  {:>8} {}", names.get(t).map_or("aug", String::as_str), cells.join(" "));
    }
    Manifest::refresh(out)?;
    Ok(ens)
}

/// Figures from one or more evaluated output directories, written to
/// `out/plots`. Errors, writing nothing, when no evaluation report exists.
pub fn plot_cmd(inputs: &[PathBuf], out: &Path, split: Split) -> Result<Vec<PathBuf>> {
    struct Loaded {
        dir: PathBuf,
        cfg: Option<ExperimentConfig>,
        report: EvalReport,
    }
    let mut loaded = Vec::new();
    for dir in inputs {
        let p = dir.join(eval_file(split));
        if !p.exists() {
            continue;
        }
        let report: EvalReport = serde_json::from_str(&read(&p)?)?;
        let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE)).ok();
        loaded.push(Loaded { dir: dir.clone(), cfg, report });
    }
    if loaded.is_empty() {
        return Err(CliError::data(format!("no {} found", eval_file(split))));
    }
    let plots = out.join("plots");
    let mut written = Vec::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        let p = plots.join(name);
        write(&p, body)?;
        written.push(p);
        Ok(())
    };

    for (i, l) in loaded.iter().enumerate() {
        let tag = if loaded.len() == 1 { String::new() } else { format!("{i}_") };
        let pp = l.dir.join(predictions_file(split));
        if let (Ok(ds), true) = (load_dataset(&l.dir), pp.exists()) {
            let preds: Vec<Vec<Trajectory>> = serde_json::from_str(&read(&pp)?)?;
            let scale = l.cfg.as_ref().map_or(1.0, |c| c.time_scale);
            for (k, &idx) in l.report.trajectories.iter().enumerate().take(4) {
                let truth = &ds.trajectories[idx];
                let times: Vec<f64> = truth.times.iter().map(|t| t * scale).collect();
                let pred_times = preds[0][k].times.clone();
                let bands: Vec<plot::Band> = (0..truth.dim())
                    .map(|j| {
                        let runs: Vec<Vec<f64>> = preds.iter().map(|p| p[k].states.column(j).to_vec()).collect();
                        plot::band(&runs)
                    })
                    .collect();
                let truths: Vec<Vec<f64>> = (0..truth.dim()).map(|j| truth.states.column(j).to_vec()).collect();
                let panels: Vec<plot::Panel> = (0..truth.dim())
                    .map(|j| plot::Panel {
                        title: format!("{} (trajectory {idx})", l.report.series_names[j]),
                        truth: &truths[j],
                        band: &bands[j],
                    })
                    .collect();
                emit(format!("{tag}overlay_{idx}.svg"), plot::overlay_svg(&times, &pred_times, &panels, "t"))?;
            }
        }
        let n_series = l.report.series_names.len();
        let groups = |f: fn(&gflow_core::eval::Peak) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
            (0..n_series)
                .map(|j| {
                    let pts = l
                        .report
                        .peaks
                        .iter()
                        .filter(|p| p.series == j)
                        .flat_map(|p| p.predicted.iter().map(move |q| (f(&p.observed), f(q))))
                        .collect();
                    (l.report.series_names[j].clone(), pts)
                })
                .collect()
        };
        emit(
            format!("{tag}peak_time.svg"),
            plot::scatter_svg("peak time", &groups(|p| p.time), "observed", "predicted"),
        )?;
        emit(
            format!("{tag}peak_value.svg"),
            plot::scatter_svg("peak value", &groups(|p| p.value), "observed", "predicted"),
        )?;
    }

    let mut curve: Vec<(f64, f64, f64)> = loaded
        .iter()
        .filter_map(|l| l.cfg.as_ref().map(|c| (c.n_lags as f64, l.report.mean_mse, l.report.std_mse)))
        .collect();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    if !curve.is_empty() {
        let mut csv = String::from("m,mean_mse,std_mse\n");
        for (m, mu, s) in &curve {
            csv.push_str(&format!("{m},{mu},{s}\n"));
        }
        emit("mse_vs_m.csv".into(), csv)?;
        emit("mse_vs_m.svg".into(), plot::mse_curve_svg(&curve))?;
    }
    Manifest::refresh(out)?;
    Ok(written)
}

