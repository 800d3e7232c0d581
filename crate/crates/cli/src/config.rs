//! Flat `key = value` run configuration.
//!
//! Every knob of a run lives here; the rendered text is written next to the
//! outputs and embedded in checkpoints so a run can be reproduced from it.

use std::path::PathBuf;
use std::str::FromStr;

use harmoniad::fsam::AmplitudeMap;
use harmoniad::softgate::GateMode;
use harmoniad::training::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let (key, value) = (key.trim(), value.trim());
        let t = &mut self.train;
        let d = &mut t.data;
        let m = &mut t.objective.model;
        let w = &mut t.objective.weights;
        let h = &mut t.objective.hyper;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data.n_classes" => d.n_classes = parse(key, value)?,
            "data.n_train" => d.n_train = parse(key, value)?,
            "data.n_val" => d.n_val = parse(key, value)?,
            "data.n_test" => d.n_test = parse(key, value)?,
            "data.train_anomaly_fraction" => d.train_anomaly_fraction = parse(key, value)?,
            "data.test_anomaly_fraction" => d.test_anomaly_fraction = parse(key, value)?,
            "data.image_size" => d.synth.image_size = parse(key, value)?,
            "data.noise" => d.synth.noise = parse(key, value)?,
            "data.patch" => d.patch = parse(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.head_dim" => m.head_dim = parse(key, value)?,
            "model.mask_hidden" => m.mask_hidden = parse(key, value)?,
            "model.rank" => m.rank = parse(key, value)?,
            "model.max_h" => m.max_h = parse(key, value)?,
            "model.max_w" => m.max_w = parse(key, value)?,
            "gate.mode" => m.gate.mode = value.parse()?,
            "gate.candidates" => {
                m.gate.candidates = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<CliResult<Vec<f64>>>()?
            }
            "gate.kappa" => m.gate.kappa = parse(key, value)?,
            "gate.tau" => m.gate.tau = parse(key, value)?,
            "fsam.softplus_beta" => {
                m.fsam.amplitude_map = match value {
                    "identity" => AmplitudeMap::Identity,
                    _ => AmplitudeMap::Softplus {
                        beta: parse(key, value)?,
                    },
                }
            }
            "fsam.eps" => m.fsam.eps = parse(key, value)?,
            "ablation.no_fsam" => m.use_fsam = !parse_bool(key, value)?,
            "ablation.no_gscm" => m.use_gscm = !parse_bool(key, value)?,
            "ablation.no_f2s" => m.fsam.offset_bias = !parse_bool(key, value)?,
            "loss.lambda_n" => w.n = parse(key, value)?,
            "loss.lambda_a" => w.a = parse(key, value)?,
            "loss.lambda_con" => w.con = parse(key, value)?,
            "loss.lambda_an" => w.an = parse(key, value)?,
            "loss.lambda_far" => w.far = parse(key, value)?,
            "loss.lambda_tri" => w.tri = parse(key, value)?,
            "loss.lambda_reg" => w.reg = parse(key, value)?,
            "loss.margin_far" => h.margin_far = parse(key, value)?,
            "loss.margin_tri" => h.margin_tri = parse(key, value)?,
            "loss.tau_con" => h.tau_con = parse(key, value)?,
            "loss.radius_con" => h.radius_con = parse(key, value)?,
            "optim.lr" => t.adam.lr = parse(key, value)?,
            "optim.beta1" => t.adam.beta1 = parse(key, value)?,
            "optim.beta2" => t.adam.beta2 = parse(key, value)?,
            "optim.eps" => t.adam.eps = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> CliResult<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults overlaid with the settings in `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse_text(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                CliError::Config(msg) => CliError::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Full rendering; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &t.data;
        let m = &t.objective.model;
        let w = &t.objective.weights;
        let h = &t.objective.hyper;
        let beta = match m.fsam.amplitude_map {
            AmplitudeMap::Softplus { beta } => beta.to_string(),
            AmplitudeMap::Identity => "identity".into(),
        };
        let gate = match m.gate.mode {
            GateMode::Soft => "soft".to_string(),
            GateMode::Hard(x) => format!("hard:{x}"),
        };
        let lines = [
            format!("seed = {}", t.seed),
            format!("out = {}", self.out.display()),
            String::new(),
            format!("data.n_classes = {}", d.n_classes),
            format!("data.n_train = {}", d.n_train),
            format!("data.n_val = {}", d.n_val),
            format!("data.n_test = {}", d.n_test),
            format!("data.train_anomaly_fraction = {}", d.train_anomaly_fraction),
            format!("data.test_anomaly_fraction = {}", d.test_anomaly_fraction),
            format!("data.image_size = {}", d.synth.image_size),
            format!("data.noise = {}", d.synth.noise),
            format!("data.patch = {}", d.patch),
            String::new(),
            format!("model.channels = {}", m.channels),
            format!("model.head_dim = {}", m.head_dim),
            format!("model.mask_hidden = {}", m.mask_hidden),
            format!("model.rank = {}", m.rank),
            format!("model.max_h = {}", m.max_h),
            format!("model.max_w = {}", m.max_w),
            format!("gate.mode = {gate}"),
            format!("gate.candidates = {}", join(&m.gate.candidates)),
            format!("gate.kappa = {}", m.gate.kappa),
            format!("gate.tau = {}", m.gate.tau),
            format!("fsam.softplus_beta = {beta}"),
            format!("fsam.eps = {}", m.fsam.eps),
            format!("ablation.no_fsam = {}", !m.use_fsam),
            format!("ablation.no_gscm = {}", !m.use_gscm),
            format!("ablation.no_f2s = {}", !m.fsam.offset_bias),
            String::new(),
            format!("loss.lambda_n = {}", w.n),
            format!("loss.lambda_a = {}", w.a),
            format!("loss.lambda_con = {}", w.con),
            format!("loss.lambda_an = {}", w.an),
            format!("loss.lambda_far = {}", w.far),
            format!("loss.lambda_tri = {}", w.tri),
            format!("loss.lambda_reg = {}", w.reg),
            format!("loss.margin_far = {}", h.margin_far),
            format!("loss.margin_tri = {}", h.margin_tri),
            format!("loss.tau_con = {}", h.tau_con),
            format!("loss.radius_con = {}", h.radius_con),
            String::new(),
            "# full-dataset setting: lr 1e-2, batch 36".to_string(),
            format!("optim.lr = {}", t.adam.lr),
            format!("optim.beta1 = {}", t.adam.beta1),
            format!("optim.beta2 = {}", t.adam.beta2),
            format!("optim.eps = {}", t.adam.eps),
            format!("train.steps = {}", t.steps),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.eval_every = {}", t.eval_every),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.objective.model.validate()?;
        self.train.objective.weights.validate()?;
        let d = &self.train.data;
        if d.patch == 0 || d.synth.image_size % d.patch != 0 {
            return Err(CliError::Config(format!(
                "image size {} is not divisible by patch {}",
                d.synth.image_size, d.patch
            )));
        }
        let grid = d.synth.image_size / d.patch;
        let m = &self.train.objective.model;
        if grid > m.max_h || grid > m.max_w {
            return Err(CliError::Config(format!(
                "{grid}x{grid} patch grid exceeds model.max_h x model.max_w = {}x{}",
                m.max_h, m.max_w
            )));
        }
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}
