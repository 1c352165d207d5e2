//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! m = 4
//! n = 4
//! r = 2
//! loss = quadratic
//! loss.scale = 2
//! seed = 7
//! T = 10000
//! init = gaussian(0.5)
//! out_dir = out/quadratic
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lora_gd_core::losses::{make_logistic, make_quadratic, make_rank_gap_quadratic, SmoothLoss};
use lora_gd_core::rng::{SeededRng, STREAM_INIT, STREAM_LOSS};
use lora_gd_core::{Matrix, StackedAdapter};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_STEPS: usize = 10_000;
pub const DEFAULT_OUT_DIR: &str = "out";
pub const DEFAULT_LOGISTIC_SAMPLES: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Missing(String),
}

fn at(line: usize, msg: impl Into<String>) -> ConfigError {
    ConfigError::Line { line, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `0.5 * scale * ||W - T||^2` with a seeded target of rank `target_rank`
    /// and typical entry size `target_scale`.
    Quadratic { scale: f64, target_scale: f64, target_rank: usize },
    Logistic { samples: usize },
    RankGap { r_star: usize },
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Quadratic { .. } => "quadratic",
            LossSpec::Logistic { .. } => "logistic",
            LossSpec::RankGap { .. } => "rank_gap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// `B = 0`, entries of `A` drawn from `N(0, sigma^2)`.
    Gaussian(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub loss: LossSpec,
    pub seed: u64,
    pub steps: usize,
    pub init: Init,
    pub out_dir: PathBuf,
}

const KEYS: [&str; 13] = [
    "m",
    "n",
    "r",
    "loss",
    "seed",
    "T",
    "init",
    "out_dir",
    "loss.scale",
    "loss.target_scale",
    "loss.target_rank",
    "loss.samples",
    "loss.r_star",
];

struct Entries {
    map: BTreeMap<&'static str, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<(usize, T)>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(|x| Some((line, x)))
                .map_err(|_| at(line, format!("invalid value `{v}` for `{key}`"))),
        }
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<(usize, T), ConfigError> {
        self.parse(key)?
            .ok_or_else(|| ConfigError::Missing(format!("missing required key `{key}`")))
    }

    fn positive(&self, key: &str) -> Result<(usize, usize), ConfigError> {
        let (line, v) = self.required::<usize>(key)?;
        if v == 0 {
            return Err(at(line, format!("`{key}` must be positive")));
        }
        Ok((line, v))
    }
}

fn parse_init(line: usize, v: &str) -> Result<Init, ConfigError> {
    if v == "zero" {
        return Ok(Init::Zero);
    }
    let sigma = match v.strip_prefix("gaussian(").and_then(|s| s.strip_suffix(')')) {
        Some(inner) => inner
            .trim()
            .parse::<f64>()
            .map_err(|_| at(line, format!("invalid sigma in `{v}`")))?,
        None => return Err(at(line, format!("init must be `zero` or `gaussian(sigma)`, got `{v}`"))),
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(at(line, "sigma must be positive"));
    }
    Ok(Init::Gaussian(sigma))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| at(line, format!("expected `key = value`, got `{content}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if v.is_empty() {
                return Err(at(line, format!("empty value for `{k}`")));
            }
            let key = *KEYS
                .iter()
                .find(|known| **known == k)
                .ok_or_else(|| at(line, format!("unknown key `{k}`")))?;
            if let Some((first, _)) = map.insert(key, (line, v.to_string())) {
                return Err(at(line, format!("duplicate key `{k}` (first set on line {first})")));
            }
        }
        let e = Entries { map };

        let (_, m) = e.positive("m")?;
        let (_, n) = e.positive("n")?;
        let (r_line, r) = e.positive("r")?;
        if r >= m.min(n) {
            return Err(at(r_line, format!("r must satisfy r < min(m,n), got r = {r} with m = {m}, n = {n}")));
        }
        let (_, seed) = e.required::<u64>("seed")?;
        let steps = match e.parse::<usize>("T")? {
            Some((line, 0)) => return Err(at(line, "T must be at least 1")),
            Some((_, t)) => t,
            None => DEFAULT_STEPS,
        };
        let init = match e.raw("init") {
            Some((line, v)) => parse_init(line, v)?,
            None => Init::Gaussian(1.0 / (r as f64).sqrt()),
        };
        let out_dir = e.raw("out_dir").map_or(DEFAULT_OUT_DIR, |(_, v)| v).into();

        let (loss_line, loss_name) = e.required::<String>("loss")?;
        let allowed: &[&str] = match loss_name.as_str() {
            "quadratic" => &["loss.scale", "loss.target_scale", "loss.target_rank"],
            "logistic" => &["loss.samples"],
            "rank_gap" => &["loss.r_star"],
            other => {
                return Err(at(
                    loss_line,
                    format!("unknown loss `{other}` (expected quadratic, logistic or rank_gap)"),
                ))
            }
        };
        for (key, (line, _)) in &e.map {
            if key.starts_with("loss.") && !allowed.contains(key) {
                return Err(at(*line, format!("`{key}` does not apply to loss `{loss_name}`")));
            }
        }
        let loss = match loss_name.as_str() {
            "quadratic" => {
                let scale = match e.parse::<f64>("loss.scale")? {
                    Some((line, s)) if !(s >= 1.0 && s.is_finite()) => {
                        return Err(at(line, "loss.scale must be a finite value >= 1"))
                    }
                    Some((_, s)) => s,
                    None => 1.0,
                };
                let target_scale = match e.parse::<f64>("loss.target_scale")? {
                    Some((line, s)) if !(s >= 0.0 && s.is_finite()) => {
                        return Err(at(line, "loss.target_scale must be finite and non-negative"))
                    }
                    Some((_, s)) => s,
                    None => 1.0,
                };
                let target_rank = match e.parse::<usize>("loss.target_rank")? {
                    Some((line, k)) if k == 0 || k > m.min(n) => {
                        return Err(at(line, "loss.target_rank must lie in 1..=min(m,n)"))
                    }
                    Some((_, k)) => k,
                    None => m.min(n),
                };
                LossSpec::Quadratic { scale, target_scale, target_rank }
            }
            "logistic" => {
                let samples = match e.parse::<usize>("loss.samples")? {
                    Some((line, 0)) => return Err(at(line, "loss.samples must be positive")),
                    Some((_, s)) => s,
                    None => DEFAULT_LOGISTIC_SAMPLES,
                };
                LossSpec::Logistic { samples }
            }
            _ => {
                let (line, r_star) = e.required::<usize>("loss.r_star")?;
                if r_star == 0 || r_star > m.min(n) {
                    return Err(at(line, "loss.r_star must lie in 1..=min(m,n)"));
                }
                LossSpec::RankGap { r_star }
            }
        };
        Ok(RunConfig { m, n, r, loss, seed, steps, init, out_dir })
    }

    pub fn load(path: &Path) -> Result<RunConfig, crate::CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::CliError::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| crate::CliError::Config {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Fixed-order text form of every setting except `out_dir`. Parsing it
    /// back yields the same configuration (with the default `out_dir`).
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "r = {}", self.r);
        let _ = writeln!(s, "loss = {}", self.loss.name());
        match &self.loss {
            LossSpec::Quadratic { scale, target_scale, target_rank } => {
                let _ = writeln!(s, "loss.scale = {scale:?}");
                let _ = writeln!(s, "loss.target_scale = {target_scale:?}");
                let _ = writeln!(s, "loss.target_rank = {target_rank}");
            }
            LossSpec::Logistic { samples } => {
                let _ = writeln!(s, "loss.samples = {samples}");
            }
            LossSpec::RankGap { r_star } => {
                let _ = writeln!(s, "loss.r_star = {r_star}");
            }
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "T = {}", self.steps);
        match self.init {
            Init::Zero => s.push_str("init = zero\n"),
            Init::Gaussian(sigma) => {
                let _ = writeln!(s, "init = gaussian({sigma:?})");
            }
        }
        s
    }

    /// SHA-256 of [`canonical`](Self::canonical), hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn build_loss(&self) -> lora_gd_core::Result<Box<dyn SmoothLoss>> {
        let (m, n) = (self.m, self.n);
        Ok(match self.loss {
            LossSpec::Quadratic { scale, target_scale, target_rank } => {
                let mut rng = SeededRng::new(self.seed, STREAM_LOSS);
                let left = rng.gaussian_matrix(m, target_rank, 1.0);
                let right = rng.gaussian_matrix(target_rank, n, 1.0);
                let target = left.matmul(&right)?.scale(target_scale / (target_rank as f64).sqrt())?;
                Box::new(make_quadratic(m, n, target, scale)?)
            }
            LossSpec::Logistic { samples } => Box::new(make_logistic(m, n, samples, self.seed)?),
            LossSpec::RankGap { r_star } => Box::new(make_rank_gap_quadratic(m, n, r_star, self.seed)?),
        })
    }

    pub fn initial_adapter(&self) -> StackedAdapter {
        match self.init {
            Init::Zero => StackedAdapter::zeros(self.m, self.n, self.r),
            Init::Gaussian(sigma) => {
                let mut rng = SeededRng::new(self.seed, STREAM_INIT);
                let a = rng.gaussian_matrix(self.r, self.n, sigma);
                StackedAdapter::stack(&Matrix::zeros(self.m, self.r), &a).expect("validated rank and shapes")
            }
        }
    }
}
