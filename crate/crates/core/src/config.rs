//! Run configuration in a line-oriented `key = value` format. `#` starts a
//! comment; `-` and `_` are interchangeable in keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig};
use crate::rng::Rng;
use crate::tasks::{self, GlyphSource, TaskBatch, N_DIGITS, STROKE_D_X};
use crate::training::{TrainMode, UpdateSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Recall,
    Stroke,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Recall => "recall",
            TaskKind::Stroke => "stroke",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        [TaskKind::Copy, TaskKind::Recall, TaskKind::Stroke]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub mode: TrainMode,
    pub d_h: usize,
    pub k: usize,
    pub a: usize,
    pub d_m: usize,
    pub d_att: usize,
    pub batch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub clip: f64,
    pub seed: u64,
    /// Maximum number of updates.
    pub budget: u64,
    pub eval_interval: u64,
    pub valid_batches: usize,
    pub valid_size: usize,
    /// Stop once the validation metric drops below this value.
    pub stop_below: Option<f64>,
    /// Stop after this many evaluations without improvement (0 = never).
    pub patience: u64,
    pub output_dir: PathBuf,
    pub max_len: usize,
    pub n_bits: usize,
    pub n_items: usize,
    pub item_len: usize,
    pub n_digits: usize,
    pub stroke_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskKind::Copy,
            mode: TrainMode::GumbelSt,
            d_h: 120,
            k: 16,
            a: 4,
            d_m: 32,
            d_att: 32,
            batch: 16,
            lr: 3e-3,
            gamma: 0.99,
            clip: 1.0,
            seed: 0,
            budget: 50_000,
            eval_interval: 500,
            valid_batches: 4,
            valid_size: 32,
            stop_below: None,
            patience: 0,
            output_dir: PathBuf::from("runs/default"),
            max_len: 10,
            n_bits: 8,
            n_items: 4,
            item_len: 3,
            n_digits: 3,
            stroke_file: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "task",
    "mode",
    "d_h",
    "k",
    "a",
    "d_m",
    "d_att",
    "batch",
    "lr",
    "gamma",
    "clip",
    "seed",
    "budget",
    "eval_interval",
    "valid_batches",
    "valid_size",
    "stop_below",
    "patience",
    "output_dir",
    "max_len",
    "n_bits",
    "n_items",
    "item_len",
    "n_digits",
    "stroke_file",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn opt_num(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "task" => {
                self.task = TaskKind::parse(v).ok_or_else(|| Error::Config(format!("unknown task {v:?} (copy, recall, stroke)")))?
            }
            "mode" => {
                self.mode = TrainMode::parse(v).ok_or_else(|| {
                    let names: Vec<_> = TrainMode::ALL.iter().map(|m| m.name()).collect();
                    Error::Config(format!("unknown mode {v:?} ({})", names.join(", ")))
                })?
            }
            "d_h" => self.d_h = num(&key, v)?,
            "k" => self.k = num(&key, v)?,
            "a" => self.a = num(&key, v)?,
            "d_m" => self.d_m = num(&key, v)?,
            "d_att" => self.d_att = num(&key, v)?,
            "batch" => self.batch = num(&key, v)?,
            "lr" => self.lr = num(&key, v)?,
            "gamma" => self.gamma = num(&key, v)?,
            "clip" => self.clip = num(&key, v)?,
            "seed" => self.seed = num(&key, v)?,
            "budget" => self.budget = num(&key, v)?,
            "eval_interval" => self.eval_interval = num(&key, v)?,
            "valid_batches" => self.valid_batches = num(&key, v)?,
            "valid_size" => self.valid_size = num(&key, v)?,
            "stop_below" => self.stop_below = opt_num(&key, v)?,
            "patience" => self.patience = num(&key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "max_len" => self.max_len = num(&key, v)?,
            "n_bits" => self.n_bits = num(&key, v)?,
            "n_items" => self.n_items = num(&key, v)?,
            "item_len" => self.item_len = num(&key, v)?,
            "n_digits" => self.n_digits = num(&key, v)?,
            "stroke_file" => self.stroke_file = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let _ = writeln!(s, "task = {}", self.task.name());
        let _ = writeln!(s, "mode = {}", self.mode.name());
        for (k, v) in [
            ("d_h", self.d_h),
            ("k", self.k),
            ("a", self.a),
            ("d_m", self.d_m),
            ("d_att", self.d_att),
            ("batch", self.batch),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "clip = {}", self.clip);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "budget = {}", self.budget);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "valid_batches = {}", self.valid_batches);
        let _ = writeln!(s, "valid_size = {}", self.valid_size);
        let _ = writeln!(s, "stop_below = {}", opt(self.stop_below));
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        for (k, v) in [
            ("max_len", self.max_len),
            ("n_bits", self.n_bits),
            ("n_items", self.n_items),
            ("item_len", self.item_len),
            ("n_digits", self.n_digits),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(
            s,
            "stroke_file = {}",
            self.stroke_file.as_ref().map_or("none".into(), |p| p.display().to_string())
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_h <= self.d_m {
            return bad(&format!("d_h ({}) must exceed d_m ({})", self.d_h, self.d_m));
        }
        if self.k == 0 || self.a == 0 || self.d_m == 0 || self.d_att == 0 {
            return bad("k, a, d_m and d_att must be positive");
        }
        if self.batch == 0 || self.valid_size == 0 || self.valid_batches == 0 {
            return bad("batch, valid_size and valid_batches must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return bad("lr must be finite and non-negative");
        }
        if self.clip <= 0.0 {
            return bad("clip must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        match self.task {
            TaskKind::Copy if self.max_len == 0 || self.n_bits == 0 => bad("copy needs max_len, n_bits > 0"),
            TaskKind::Recall if self.n_items < 2 || self.item_len == 0 || self.n_bits == 0 => {
                bad("recall needs n_items >= 2, item_len, n_bits > 0")
            }
            TaskKind::Stroke if self.n_digits == 0 => bad("stroke needs n_digits > 0"),
            _ => Ok(()),
        }
    }

    /// `(d_x, d_out)` of the configured task.
    pub fn task_dims(&self) -> (usize, usize) {
        match self.task {
            TaskKind::Copy => (self.n_bits + 1, self.n_bits),
            TaskKind::Recall => (self.n_bits + 2, self.n_bits),
            TaskKind::Stroke => (STROKE_D_X, N_DIGITS),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let (d_x, d_out) = self.task_dims();
        let arch = if self.mode == TrainMode::LstmBaseline {
            Architecture::Lstm
        } else {
            Architecture::Tardis
        };
        ModelConfig {
            arch,
            d_x,
            d_out,
            d_h: self.d_h,
            k: self.k,
            a: self.a,
            d_m: self.d_m,
            d_att: self.d_att,
            aux_head: self.mode == TrainMode::ReinforceAux,
        }
    }

    pub fn update_settings(&self) -> UpdateSettings {
        UpdateSettings {
            mode: self.mode,
            lr: self.lr,
            gamma: self.gamma,
            clip: self.clip,
        }
    }

    pub fn glyph_source(&self) -> Result<GlyphSource> {
        Ok(match &self.stroke_file {
            Some(p) => GlyphSource::Loaded(tasks::load_stroke_file(p)?),
            None => GlyphSource::Synthetic,
        })
    }

    /// Draws a batch of the configured task.
    pub fn sample<R: Rng + ?Sized>(&self, glyphs: &GlyphSource, size: usize, rng: &mut R) -> Result<TaskBatch> {
        match self.task {
            TaskKind::Copy => tasks::gen_copy(self.max_len, self.n_bits, size, rng),
            TaskKind::Recall => tasks::gen_assoc_recall(self.n_items, self.item_len, self.n_bits, size, rng),
            TaskKind::Stroke => tasks::gen_stroke_digits(self.n_digits, glyphs, size, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_sizes() {
        let c = RunConfig::default();
        assert_eq!((c.d_h, c.k, c.a, c.d_m), (120, 16, 4, 32));
        assert_eq!(c.lr, 3e-3);
    }

    #[test]
    fn parse_round_trip() {
        let mut c = RunConfig::default();
        c.task = TaskKind::Stroke;
        c.stop_below = Some(0.25);
        c.stroke_file = Some("a/b.csv".into());
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = RunConfig::parse("d_hidden = 3").unwrap_err().to_string();
        assert!(e.contains("d_hidden") && e.contains("eval_interval"), "{e}");
    }

    #[test]
    fn comments_and_dashes() {
        let c = RunConfig::parse("# hello\neval-interval = 7 # trailing\n\nseed=3").unwrap();
        assert_eq!((c.eval_interval, c.seed), (7, 3));
    }

    #[test]
    fn rejects_small_hidden() {
        assert!(RunConfig::parse("d_h = 32\nd_m = 32").is_err());
    }
}
