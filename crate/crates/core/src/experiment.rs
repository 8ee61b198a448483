//! Manifests, per-seed run artifacts and the ablation grid summary.
//!
//! Layout under `<output_dir>/<name>/`:
//!
//! ```text
//! summary.csv
//! <strategy>_<scheme>/seed-<s>/epochs.csv        epoch,loss,AP,AP50,IS,FIS
//!                             /layer_ap.csv      epoch,layer,AP,AP50
//!                             /instability.csv   epoch,IS,FCS,FOS,FIS
//!                             /assignments.jsonl
//!                             /queries.csv
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harness::{
    build_dataset, evaluate, train, write_epoch_csv, write_layer_ap_csv, write_query_csv, BenchmarkConfig,
    EpochMetrics, LayerApRow, QueryVectorRow, Strategy, TrainConfig, TrainOutcome,
};
use crate::metrics::{instability_series, write_assignment_log, write_instability_csv};
use crate::refinement::RefineScheme;

/// Overrides [`ExperimentManifest::output_dir`] when set.
pub const OUTPUT_ENV: &str = "DETR_ASSIGN_OUT";

/// Epochs averaged for the "last epochs" FIS column.
pub const FIS_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub strategies: Vec<Strategy>,
    pub schemes: Vec<RefineScheme>,
}

impl Default for GridSpec {
    /// `{baseline, CSA} × {LFO, LFT, LFD×6}`.
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Baseline, Strategy::Csa],
            schemes: RefineScheme::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    /// Cells for `ablate`; the full grid when absent.
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl ExperimentManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| invalid(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(format!("manifest: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("manifest name must be a non-empty path component"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("manifest needs at least one seed"));
        }
        self.train.validate()?;
        self.benchmark.validate()?;
        if let Some(g) = &self.grid {
            if g.strategies.is_empty() || g.schemes.is_empty() {
                return Err(invalid("grid needs at least one strategy and one scheme"));
            }
            for s in &g.strategies {
                TrainConfig { strategy: *s, ..self.train.clone() }.validate()?;
            }
        }
        Ok(())
    }

    /// `$DETR_ASSIGN_OUT/<name>` if set, else `<output_dir>/<name>`.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone());
        root.join(&self.name)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid.clone().unwrap_or_default()
    }
}

/// Benchmark defaults with one cell per seed.
pub fn default_manifest(name: &str, output_dir: impl Into<PathBuf>) -> ExperimentManifest {
    ExperimentManifest {
        name: name.to_string(),
        output_dir: output_dir.into(),
        seeds: (0..5).collect(),
        train: TrainConfig::default(),
        benchmark: BenchmarkConfig::default(),
        grid: None,
    }
}

/// One scene with one object, trained under CSA for 200 epochs.
pub fn overfit_preset() -> (BenchmarkConfig, TrainConfig) {
    let bench = BenchmarkConfig {
        train_scenes: 1,
        val_scenes: 0,
        max_objects: 1,
        ..BenchmarkConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        learning_rate: 0.002,
        strategy: Strategy::Csa,
        ..TrainConfig::default()
    };
    (bench, cfg)
}

pub fn cell_name(strategy: Strategy, scheme: RefineScheme) -> String {
    format!("{strategy}_{scheme}")
}

/// Result of one `(strategy, scheme, seed)` training run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    /// Final-layer queries of the trained model on the validation scenes.
    pub queries: Vec<QueryVectorRow>,
}

/// Trains one seed and evaluates it on its validation scenes.
pub fn run_seed(
    bench: &BenchmarkConfig,
    base: &TrainConfig,
    strategy: Strategy,
    scheme: RefineScheme,
    seed: u64,
) -> Result<SeedRun> {
    let cfg = TrainConfig {
        strategy,
        scheme,
        seed,
        ..base.clone()
    };
    let data = build_dataset(bench, &cfg)?;
    let outcome = train(&cfg, &data.train, &data.val)?;
    let queries = evaluate(&outcome.model, &data.val, &cfg)?.query_vectors;
    Ok(SeedRun { seed, outcome, queries })
}

fn write_atomic(path: &Path, body: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(body)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Writes every artifact of one seed into `dir`.
pub fn write_seed_artifacts(dir: &Path, run: &SeedRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    let o = &run.outcome;
    write_atomic(&dir.join("epochs.csv"), &to_bytes(|b| write_epoch_csv(b, &o.metrics))?)?;
    write_atomic(&dir.join("layer_ap.csv"), &to_bytes(|b| write_layer_ap_csv(b, &o.layer_ap))?)?;
    let inst = instability_series(&o.logs)?;
    write_atomic(&dir.join("instability.csv"), &to_bytes(|b| write_instability_csv(b, &inst))?)?;
    let records: Vec<_> = o.logs.iter().flat_map(|l| l.records.values().cloned()).collect();
    write_atomic(
        &dir.join("assignments.jsonl"),
        &to_bytes(|b| write_assignment_log(b, &records))?,
    )?;
    write_atomic(&dir.join("queries.csv"), &to_bytes(|b| write_query_csv(b, &run.queries))?)?;
    Ok(())
}

/// Median; the mean of the middle pair for even counts. `NaN` if empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean of the last `window` non-empty FIS values, summed in epoch order.
pub fn last_window_fis(rows: &[EpochMetrics], window: usize) -> f64 {
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.fis).collect();
    let tail = &vals[vals.len().saturating_sub(window)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Per-layer AP of the final epoch, layers in order.
pub fn final_layer_ap(rows: &[LayerApRow]) -> Vec<f64> {
    let Some(last) = rows.last().map(|r| r.epoch) else {
        return vec![];
    };
    let mut v: Vec<&LayerApRow> = rows.iter().filter(|r| r.epoch == last).collect();
    v.sort_by_key(|r| r.layer);
    v.into_iter().map(|r| r.ap).collect()
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub strategy: Strategy,
    pub scheme: RefineScheme,
    /// `ok`, or `failed: <reason>` for the first failing seed.
    pub status: String,
    pub seeds: usize,
    pub ap_median: f64,
    pub ap_min: f64,
    pub ap_max: f64,
    pub ap50_median: f64,
    pub final_is_median: f64,
    pub final_fis_median: f64,
    pub last_fis_median: f64,
    pub layer_ap_median: Vec<f64>,
}

pub fn summarize(strategy: Strategy, scheme: RefineScheme, layers: usize, runs: &[Result<SeedRun>]) -> CellSummary {
    let ok: Vec<&SeedRun> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
    let status = match runs.iter().find_map(|r| r.as_ref().err()) {
        None => "ok".to_string(),
        Some(e) => format!("failed: {e}"),
    };
    let finals: Vec<&EpochMetrics> = ok.iter().filter_map(|r| r.outcome.metrics.last()).collect();
    let ap: Vec<f64> = finals.iter().map(|m| m.ap).collect();
    let ap50: Vec<f64> = finals.iter().map(|m| m.ap50).collect();
    let is: Vec<f64> = finals.iter().map(|m| m.is.unwrap_or(f64::NAN)).collect();
    let fis: Vec<f64> = finals.iter().map(|m| m.fis.unwrap_or(f64::NAN)).collect();
    let last: Vec<f64> = ok
        .iter()
        .map(|r| last_window_fis(&r.outcome.metrics, FIS_WINDOW))
        .collect();
    let per_layer: Vec<Vec<f64>> = ok.iter().map(|r| final_layer_ap(&r.outcome.layer_ap)).collect();
    let layer_ap_median = (0..layers)
        .map(|l| median(&per_layer.iter().filter_map(|v| v.get(l).copied()).collect::<Vec<_>>()))
        .collect();
    let min = ap.iter().copied().fold(f64::INFINITY, f64::min);
    let max = ap.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    CellSummary {
        strategy,
        scheme,
        status,
        seeds: ok.len(),
        ap_median: median(&ap),
        ap_min: if ap.is_empty() { f64::NAN } else { min },
        ap_max: if ap.is_empty() { f64::NAN } else { max },
        ap50_median: median(&ap50),
        final_is_median: median(&is),
        final_fis_median: median(&fis),
        last_fis_median: median(&last),
        layer_ap_median,
    }
}

pub fn write_summary_csv(w: impl Write, rows: &[CellSummary], layers: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = [
        "strategy",
        "scheme",
        "status",
        "seeds",
        "AP_median",
        "AP_min",
        "AP_max",
        "AP50_median",
        "final_IS_median",
        "final_FIS_median",
        "last10_FIS_median",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=layers).map(|l| format!("layer{l}_AP_median")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.strategy.to_string(),
            r.scheme.to_string(),
            r.status.clone(),
            r.seeds.to_string(),
        ];
        rec.extend(
            [
                r.ap_median,
                r.ap_min,
                r.ap_max,
                r.ap50_median,
                r.final_is_median,
                r.final_fis_median,
                r.last_fis_median,
            ]
            .iter()
            .map(f64::to_string),
        );
        rec.extend(r.layer_ap_median.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Outcome of a train or ablate invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub run_dir: PathBuf,
    pub cells: Vec<CellSummary>,
}

impl ExperimentReport {
    /// A divergence in any cell, if one happened.
    pub fn divergence(&self) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.status.starts_with("failed"))
    }
}

fn run_cells(manifest: &ExperimentManifest, cells: &[(Strategy, RefineScheme)]) -> Result<ExperimentReport> {
    manifest.validate()?;
    let run_dir = manifest.run_dir();
    fs::create_dir_all(&run_dir)?;
    let layers = manifest.train.layers;
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| manifest.seeds.iter().map(move |s| (c, *s)))
        .collect();
    let results: Vec<Result<SeedRun>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (strategy, scheme) = cells[c];
            let run = run_seed(&manifest.benchmark, &manifest.train, strategy, scheme, seed)?;
            let dir = run_dir.join(cell_name(strategy, scheme)).join(format!("seed-{seed}"));
            write_seed_artifacts(&dir, &run)?;
            Ok(run)
        })
        .collect();
    let mut summaries = Vec::with_capacity(cells.len());
    let mut iter = results.into_iter();
    for &(strategy, scheme) in cells {
        let runs: Vec<Result<SeedRun>> = iter.by_ref().take(manifest.seeds.len()).collect();
        for r in &runs {
            match r {
                Err(e @ Error::Divergence { .. }) => log::warn!("{}: {e}", cell_name(strategy, scheme)),
                Err(e) => return Err(invalid(format!("{}: {e}", cell_name(strategy, scheme)))),
                Ok(_) => {}
            }
        }
        summaries.push(summarize(strategy, scheme, layers, &runs));
    }
    let body = to_bytes(|b| write_summary_csv(b, &summaries, layers))?;
    write_atomic(&run_dir.join("summary.csv"), &body)?;
    Ok(ExperimentReport {
        run_dir,
        cells: summaries,
    })
}

/// The manifest's own `(strategy, scheme)` cell over every seed.
pub fn run_train(manifest: &ExperimentManifest) -> Result<ExperimentReport> {
    run_cells(manifest, &[(manifest.train.strategy, manifest.train.scheme)])
}

/// Every grid cell over every seed; diverged cells are reported, not fatal.
pub fn run_ablation(manifest: &ExperimentManifest) -> Result<ExperimentReport> {
    let g = manifest.grid();
    let cells: Vec<(Strategy, RefineScheme)> = g
        .strategies
        .iter()
        .flat_map(|s| g.schemes.iter().map(move |c| (*s, *c)))
        .collect();
    run_cells(manifest, &cells)
}
