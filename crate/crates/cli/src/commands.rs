//! The five subcommands as library functions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use harmoniad::evalio::{
    export_heatmap, read_container, write_container, Container, Metrics, TensorData, TensorRecord,
};
use harmoniad::numerics::Tensor;
use harmoniad::pipeline::{forward, ModelParams};
use harmoniad::softgate::{split, GateMode, GateParams};
use harmoniad::training::{
    build_datasets, encode_samples, evaluate_model, train, HistoryRow, OptimState, TrainOutcome,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{feature_maps, file_stem, samples_from_container, samples_to_container};
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.had";
pub const HISTORY_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
const CONFIG_RECORD: &str = "run.config";

/// Reads a container, naming the path in errors.
pub fn read_at(path: &Path) -> CliResult<Container> {
    read_container(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(cfg.out.clone())
}

/// Model parameters, optimizer moments and the generating config.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams<f64>,
    pub optim: Option<OptimState<f64>>,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    let mut c = ck.params.to_container()?;
    if let Some(o) = &ck.optim {
        o.write_into(&ck.params, &mut c)?;
    }
    let text = ck.config.to_text().into_bytes();
    c.push(TensorRecord::new(
        CONFIG_RECORD,
        vec![text.len()],
        TensorData::U8(text),
    )?)?;
    write_container(path, &c)?;
    Ok(())
}

/// Config text embedded in a checkpoint.
pub fn checkpoint_config_text(c: &Container) -> CliResult<String> {
    match &c.require(CONFIG_RECORD)?.data {
        TensorData::U8(bytes) => {
            String::from_utf8(bytes.clone()).map_err(|_| CliError::Config("checkpoint config is not UTF-8".into()))
        }
        _ => Err(CliError::Config("checkpoint config record must be u8".into())),
    }
}

/// Loads parameters shaped by `cfg`; the embedded config is returned as-is.
pub fn load_checkpoint(path: &Path, cfg: &RunConfig) -> CliResult<Checkpoint> {
    let c = read_at(path)?;
    let mut params = ModelParams::init(&cfg.train.objective.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    params.load_container(&c)?;
    params.check_finite()?;
    let optim = if c.get("adam.step").is_some() {
        Some(OptimState::read_from(&params, &c, cfg.train.adam.clone())?)
    } else {
        None
    };
    Ok(Checkpoint {
        config: RunConfig::parse_text(&checkpoint_config_text(&c)?)?,
        params,
        optim,
    })
}

/// Reads the config embedded in the checkpoint at `path`.
pub fn read_checkpoint_config(path: &Path) -> CliResult<String> {
    checkpoint_config_text(&read_at(path)?)
}

#[derive(Clone, Debug)]
pub struct GenReport {
    pub files: Vec<(PathBuf, usize)>,
}

/// Writes `train.had`, `val.had` and `test.had` raw sample containers, plus
/// `test_features.had`: the frozen-encoder `[C, H, W]` f32 map of every test
/// image, the input format of `infer` and `split`.
pub fn cmd_gen(cfg: &RunConfig) -> CliResult<GenReport> {
    cfg.validate()?;
    let out = prepare_out(cfg)?;
    let d = &cfg.train.data;
    let mut files = Vec::new();
    for (name, seed, n, frac) in [
        ("train", cfg.train.seed, d.n_train, d.train_anomaly_fraction),
        ("val", cfg.train.seed.wrapping_add(1), d.n_val, d.test_anomaly_fraction),
        (
            "test",
            cfg.train.seed.wrapping_add(2),
            d.n_test,
            d.test_anomaly_fraction,
        ),
    ] {
        if n % d.n_classes != 0 {
            return Err(CliError::Config(format!(
                "data.n_{name} = {n} does not divide into {} classes",
                d.n_classes
            )));
        }
        let samples = harmoniad::training::synth_dataset::<f64>(seed, d.n_classes, n / d.n_classes, frac, &d.synth)?;
        let path = out.join(format!("{name}.had"));
        write_container(&path, &samples_to_container(&samples)?)?;
        files.push((path, samples.len()));
        if name == "test" {
            let mut feats = Container::new();
            for (i, s) in encode_samples(&samples, cfg.train.objective.model.channels, d.patch)?
                .iter()
                .enumerate()
            {
                feats.push_tensor(&format!("{i:05}"), &s.feat.cast::<f32>())?;
            }
            let path = out.join("test_features.had");
            write_container(&path, &feats)?;
            files.push((path, samples.len()));
        }
    }
    Ok(GenReport { files })
}

/// Fixed-width metrics table: a header row, then one row per variant.
pub fn metrics_table(rows: &[(String, Metrics)]) -> String {
    let mut s = format!("{:<24}", "variant");
    for h in Metrics::HEADER {
        s.push_str(&format!("{h:>8}"));
    }
    s.push('\n');
    for (label, m) in rows {
        s.push_str(&format!("{label:<24}"));
        for v in m.values() {
            s.push_str(&format!("{v:>8.4}"));
        }
        s.push('\n');
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[(String, Metrics)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "p_roc", "i_roc", "p_pr", "i_pr"])?;
    for (label, m) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(m.values().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Short name of the model variant a config selects.
pub fn variant_label(cfg: &RunConfig) -> String {
    let m = &cfg.train.objective.model;
    let mut s = match m.gate.mode {
        GateMode::Soft => "soft".to_string(),
        GateMode::Hard(t) => format!("hard:{t}"),
    };
    for (off, name) in [
        (!m.use_fsam, "no-fsam"),
        (!m.use_gscm, "no-gscm"),
        (!m.fsam.offset_bias, "no-f2s"),
    ] {
        if off {
            s.push('+');
            s.push_str(name);
        }
    }
    s
}

fn write_history(path: &Path, rows: &[HistoryRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step", "loss", "l_n", "l_an", "l_a", "l_far", "l_con", "l_tri", "p_roc", "i_roc", "p_pr", "i_pr",
    ])?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.loss.to_string()];
        rec.extend(r.terms.iter().map(|t| t.to_string()));
        match &r.val {
            Some(m) => rec.extend(m.values().iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub outcome: TrainOutcome<f64>,
    pub init_test: Metrics,
    pub test: Metrics,
}

/// Trains on the synthetic benchmark and writes the checkpoint, the metric
/// log and test metrics into the output directory.
pub fn cmd_train(cfg: &RunConfig, log: &mut dyn Write) -> CliResult<TrainReport> {
    cfg.validate()?;
    let out = prepare_out(cfg)?;
    let t = &cfg.train;
    let model = &t.objective.model;
    let data = build_datasets::<f64>(t.seed, &t.data, model.channels)?;
    let init = ModelParams::init(model, &mut ChaCha8Rng::seed_from_u64(t.seed))?;
    let init_test = evaluate_model(&init, model, &data.test)?;
    writeln!(log, "init test: {init_test}")?;
    let mut io_err = None;
    let outcome = train(t, &data, |r| {
        let res = match &r.val {
            Some(m) => writeln!(log, "step {:>5}  loss {:.6}  val {m}", r.step, r.loss),
            None => Ok(()),
        };
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let test = evaluate_model(&outcome.params, model, &data.test)?;
    writeln!(log, "trained test: {test}")?;
    save_checkpoint(
        &out.join(CHECKPOINT_FILE),
        &Checkpoint {
            config: cfg.clone(),
            params: outcome.params.clone(),
            optim: Some(outcome.optim.clone()),
        },
    )?;
    write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    let rows = vec![
        (format!("{} init", variant_label(cfg)), init_test),
        (variant_label(cfg), test),
    ];
    write_metrics_csv(&out.join("test.csv"), &rows)?;
    write!(log, "{}", metrics_table(&rows))?;
    Ok(TrainReport {
        outcome,
        init_test,
        test,
    })
}

/// Evaluates a checkpoint on `data` (a `gen` container) or on the test split
/// the config describes.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, log: &mut dyn Write) -> CliResult<Metrics> {
    cfg.validate()?;
    let out = prepare_out(cfg)?;
    let ck = load_checkpoint(checkpoint, cfg)?;
    let t = &cfg.train;
    let model = &t.objective.model;
    let samples = match data {
        Some(p) => encode_samples(&samples_from_container(&read_at(p)?)?, model.channels, t.data.patch)?,
        None => build_datasets::<f64>(t.seed, &t.data, model.channels)?.test,
    };
    let m = evaluate_model(&ck.params, model, &samples)?;
    let rows = vec![(variant_label(cfg), m)];
    write_metrics_csv(&out.join(EVAL_FILE), &rows)?;
    write!(log, "{}", metrics_table(&rows))?;
    Ok(m)
}

/// Heatmaps for every `[C, H, W]` record of `input`: `<name>_patch.pgm`,
/// `<name>_pixel.pgm`, plus the raw scores in `scores.had`.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, input: &Path) -> CliResult<Vec<PathBuf>> {
    cfg.train.objective.model.validate()?;
    let out = prepare_out(cfg)?;
    let ck = load_checkpoint(checkpoint, cfg)?;
    let patch = cfg.train.data.patch;
    let mut scores = Container::new();
    let mut written = Vec::new();
    for (name, feat) in feature_maps(&read_at(input)?)? {
        let [_, h, w] = *feat.shape() else { unreachable!() };
        let f = forward(&feat, &ck.params, &cfg.train.objective.model, (h * patch, w * patch))?;
        let stem = file_stem(&name);
        for (suffix, map) in [("patch", &f.map.patch_scores), ("pixel", &f.map.pixel_scores)] {
            let path = out.join(format!("{stem}_{suffix}.pgm"));
            export_heatmap(map, &path)?;
            scores.push_tensor(&format!("{name}.{suffix}"), map)?;
            written.push(path);
        }
        scores.push_tensor(&format!("{name}.image_score"), &Tensor::scalar(f.map.image_score))?;
    }
    write_container(out.join("scores.had"), &scores)?;
    Ok(written)
}

/// Per-record split outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitLine {
    pub name: String,
    pub cutoff: f64,
    pub weights: Vec<f64>,
}

/// Splits every `[C, H, W]` record into low and high components
/// (`split.had`) and reports the cutoff. Gate parameters come from the
/// checkpoint when given, otherwise from the untrained initialization.
pub fn cmd_split(
    cfg: &RunConfig,
    input: &Path,
    checkpoint: Option<&Path>,
    log: &mut dyn Write,
) -> CliResult<Vec<SplitLine>> {
    let gate_cfg = &cfg.train.objective.model.gate;
    gate_cfg.validate()?;
    let out = prepare_out(cfg)?;
    let params = match checkpoint {
        Some(p) => load_checkpoint(p, cfg)?.params.gate,
        None => GateParams::new(gate_cfg.candidates.len()),
    };
    let mut comps = Container::new();
    let mut lines = Vec::new();
    let mut report = String::new();
    for (name, feat) in feature_maps(&read_at(input)?)? {
        let (high, low, state) = split(&feat, gate_cfg, &params)?;
        comps.push_tensor(&format!("{name}.low"), &low)?;
        comps.push_tensor(&format!("{name}.high"), &high)?;
        let weights: Vec<f64> = state.weights.clone();
        let line = format!(
            "{name}  mode {}  cutoff {}  weights [{}]\n",
            gate_cfg.mode,
            state.cutoff,
            weights.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>().join(", ")
        );
        report.push_str(&line);
        lines.push(SplitLine {
            name,
            cutoff: state.cutoff,
            weights,
        });
    }
    write_container(out.join("split.had"), &comps)?;
    fs::write(out.join("split_report.txt"), &report)?;
    write!(log, "{report}")?;
    Ok(lines)
}
