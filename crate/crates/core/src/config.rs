//! Server configuration.
//!
//! The on-disk format is a flat `key = value` text file. Blank lines and lines
//! whose first non-space character is `#` are ignored. Values may be wrapped in
//! double quotes to keep leading or trailing whitespace. List values
//! (`species_labels`) are comma separated. Every key is optional; missing keys
//! take the defaults returned by [`AppConfig::default`].

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

/// Side length of the square classifier input.
pub const CLASSIFIER_INPUT_SIZE: u32 = 224;

/// COCO category index of "bird" as reported by a COCO-trained detector.
pub const COCO_BIRD_CLASS_ID: u32 = 14;

/// Default species list. Index in this list is the classifier output index.
pub const DEFAULT_SPECIES_LABELS: [&str; 40] = [
    "european_robin",
    "blue_tit",
    "great_tit",
    "house_sparrow",
    "common_blackbird",
    "coal_tit",
    "marsh_tit",
    "long_tailed_tit",
    "crested_tit",
    "eurasian_tree_sparrow",
    "dunnock",
    "eurasian_wren",
    "common_chaffinch",
    "brambling",
    "european_greenfinch",
    "european_goldfinch",
    "eurasian_siskin",
    "common_linnet",
    "eurasian_bullfinch",
    "hawfinch",
    "eurasian_nuthatch",
    "short_toed_treecreeper",
    "eurasian_blackcap",
    "common_chiffchaff",
    "willow_warbler",
    "goldcrest",
    "firecrest",
    "song_thrush",
    "redwing",
    "fieldfare",
    "mistle_thrush",
    "common_starling",
    "black_redstart",
    "common_redstart",
    "spotted_flycatcher",
    "pied_flycatcher",
    "yellowhammer",
    "reed_bunting",
    "great_spotted_woodpecker",
    "lesser_spotted_woodpecker",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {0}")]
    Missing(PathBuf),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendMode {
    Mock,
    Sidecar,
}

impl BackendMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendMode::Mock => "mock",
            BackendMode::Sidecar => "sidecar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FtpCredentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub ingest_dir: PathBuf,
    pub ftp_enabled: bool,
    pub ftp_port: u16,
    pub ftp_credentials: FtpCredentials,
    pub bind_address: String,
    pub settle_ms: u64,
    pub sample_rate_hz: f64,
    pub blur_filter_enabled: bool,
    pub blur_threshold: f64,
    pub det_score_threshold: f64,
    pub iou_threshold: f64,
    pub area_fraction_threshold: f64,
    pub cls_confidence_threshold: f64,
    pub bird_class_id: u32,
    pub classifier_input_size: u32,
    pub topk: usize,
    pub species_labels: Vec<String>,
    pub backend_mode: BackendMode,
    pub sidecar_endpoint: String,
    pub sidecar_pool: usize,
    pub fixture_dir: PathBuf,
    pub decoder_command: Option<String>,
    pub store_dir: PathBuf,
    pub http_port: u16,
    pub ui_dir: Option<PathBuf>,
    pub tta_enabled: bool,
    pub workers: usize,
    pub max_attempts: u32,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            ingest_dir: PathBuf::from("ingest"),
            ftp_enabled: true,
            ftp_port: 2121,
            ftp_credentials: FtpCredentials {
                username: "camera".into(),
                password: "camera".into(),
            },
            bind_address: "0.0.0.0".into(),
            settle_ms: 2000,
            sample_rate_hz: 1.0,
            blur_filter_enabled: true,
            blur_threshold: 100.0,
            det_score_threshold: 0.7,
            iou_threshold: 0.5,
            area_fraction_threshold: 0.02,
            cls_confidence_threshold: 0.7,
            bird_class_id: COCO_BIRD_CLASS_ID,
            classifier_input_size: CLASSIFIER_INPUT_SIZE,
            topk: 5,
            species_labels: DEFAULT_SPECIES_LABELS.iter().map(|s| s.to_string()).collect(),
            backend_mode: BackendMode::Mock,
            sidecar_endpoint: String::new(),
            sidecar_pool: 1,
            fixture_dir: PathBuf::from("fixtures"),
            decoder_command: None,
            store_dir: PathBuf::from("store"),
            http_port: 8080,
            ui_dir: None,
            tta_enabled: true,
            workers: 1,
            max_attempts: 3,
        }
    }
}

/// Reads `path`, applies `overrides` (each `key=value`) on top and validates.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<AppConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ConfigError::Missing(path.to_path_buf())
        } else {
            ConfigError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    AppConfig::parse_with_overrides(&text, overrides)
}

impl FromStr for AppConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AppConfig::parse_with_overrides(s, &[])
    }
}

impl AppConfig {
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<AppConfig, ConfigError> {
        let mut cfg = AppConfig::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let Some((key, value)) = split_line(raw).map_err(|message| ConfigError::Parse {
                line: line_no,
                message,
            })?
            else {
                continue;
            };
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, &value).map_err(|e| match e {
                ConfigError::Invalid { key, message } => ConfigError::Parse {
                    line: line_no,
                    message: format!("invalid value for `{key}`: {message}"),
                },
                other => other,
            })?;
        }
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| ConfigError::Invalid {
                key: ov.clone(),
                message: "override must have the form key=value".into(),
            })?;
            cfg.set(key.trim(), &unquote(value.trim()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |message: String| ConfigError::Invalid {
            key: key.to_string(),
            message,
        };
        match key {
            "ingest_dir" => self.ingest_dir = PathBuf::from(value),
            "ftp_enabled" => self.ftp_enabled = parse_bool(value).map_err(bad)?,
            "ftp_port" => self.ftp_port = parse_num(value).map_err(bad)?,
            "ftp_credentials" => {
                let (user, pass) = value
                    .split_once(':')
                    .ok_or_else(|| bad("expected user:password".into()))?;
                if user.is_empty() {
                    return Err(bad("username is empty".into()));
                }
                self.ftp_credentials = FtpCredentials {
                    username: user.to_string(),
                    password: pass.to_string(),
                };
            }
            "bind_address" => self.bind_address = value.to_string(),
            "settle_ms" => self.settle_ms = parse_num(value).map_err(bad)?,
            "sample_rate_hz" => self.sample_rate_hz = parse_num(value).map_err(bad)?,
            "blur_filter_enabled" => self.blur_filter_enabled = parse_bool(value).map_err(bad)?,
            "blur_threshold" => self.blur_threshold = parse_num(value).map_err(bad)?,
            "det_score_threshold" => self.det_score_threshold = parse_num(value).map_err(bad)?,
            "iou_threshold" => self.iou_threshold = parse_num(value).map_err(bad)?,
            "area_fraction_threshold" => {
                self.area_fraction_threshold = parse_num(value).map_err(bad)?
            }
            "cls_confidence_threshold" => {
                self.cls_confidence_threshold = parse_num(value).map_err(bad)?
            }
            "bird_class_id" => self.bird_class_id = parse_num(value).map_err(bad)?,
            "classifier_input_size" => self.classifier_input_size = parse_num(value).map_err(bad)?,
            "topk" => self.topk = parse_num(value).map_err(bad)?,
            "species_labels" => {
                self.species_labels = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "backend_mode" => {
                self.backend_mode = match value {
                    "mock" => BackendMode::Mock,
                    "sidecar" => BackendMode::Sidecar,
                    other => return Err(bad(format!("expected mock or sidecar, got `{other}`"))),
                }
            }
            "sidecar_endpoint" => self.sidecar_endpoint = value.to_string(),
            "sidecar_pool" => self.sidecar_pool = parse_num(value).map_err(bad)?,
            "fixture_dir" => self.fixture_dir = PathBuf::from(value),
            "decoder_command" => self.decoder_command = non_empty(value),
            "store_dir" => self.store_dir = PathBuf::from(value),
            "http_port" => self.http_port = parse_num(value).map_err(bad)?,
            "ui_dir" => self.ui_dir = non_empty(value).map(PathBuf::from),
            "tta_enabled" => self.tta_enabled = parse_bool(value).map_err(bad)?,
            "workers" => self.workers = parse_num(value).map_err(bad)?,
            "max_attempts" => self.max_attempts = parse_num(value).map_err(bad)?,
            _ => {
                return Err(ConfigError::Invalid {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| ConfigError::Invalid {
            key: key.to_string(),
            message: message.to_string(),
        };
        for (key, v) in [
            ("det_score_threshold", self.det_score_threshold),
            ("iou_threshold", self.iou_threshold),
            ("area_fraction_threshold", self.area_fraction_threshold),
            ("cls_confidence_threshold", self.cls_confidence_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(key, &format!("{v} is outside [0, 1]")));
            }
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(bad("sample_rate_hz", "must be a positive number"));
        }
        if !(self.blur_threshold.is_finite() && self.blur_threshold >= 0.0) {
            return Err(bad("blur_threshold", "must be a nonnegative number"));
        }
        if self.species_labels.is_empty() {
            return Err(bad("species_labels", "list is empty"));
        }
        let mut uniq = HashSet::new();
        for label in &self.species_labels {
            if !uniq.insert(label.as_str()) {
                return Err(bad("species_labels", &format!("duplicate label `{label}`")));
            }
        }
        if self.topk == 0 {
            return Err(bad("topk", "must be at least 1"));
        }
        if self.classifier_input_size == 0 {
            return Err(bad("classifier_input_size", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(bad("workers", "must be at least 1"));
        }
        if self.sidecar_pool == 0 {
            return Err(bad("sidecar_pool", "must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(bad("max_attempts", "must be at least 1"));
        }
        if self.backend_mode == BackendMode::Sidecar && self.sidecar_endpoint.is_empty() {
            return Err(bad("sidecar_endpoint", "required when backend_mode = sidecar"));
        }
        Ok(())
    }

    /// Renders every key in the file format accepted by [`load_config`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {}", quote(&v));
        };
        kv("ingest_dir", self.ingest_dir.display().to_string());
        kv("ftp_enabled", self.ftp_enabled.to_string());
        kv("ftp_port", self.ftp_port.to_string());
        kv(
            "ftp_credentials",
            format!("{}:{}", self.ftp_credentials.username, self.ftp_credentials.password),
        );
        kv("bind_address", self.bind_address.clone());
        kv("settle_ms", self.settle_ms.to_string());
        kv("sample_rate_hz", self.sample_rate_hz.to_string());
        kv("blur_filter_enabled", self.blur_filter_enabled.to_string());
        kv("blur_threshold", self.blur_threshold.to_string());
        kv("det_score_threshold", self.det_score_threshold.to_string());
        kv("iou_threshold", self.iou_threshold.to_string());
        kv("area_fraction_threshold", self.area_fraction_threshold.to_string());
        kv("cls_confidence_threshold", self.cls_confidence_threshold.to_string());
        kv("bird_class_id", self.bird_class_id.to_string());
        kv("classifier_input_size", self.classifier_input_size.to_string());
        kv("topk", self.topk.to_string());
        kv("species_labels", self.species_labels.join(","));
        kv("backend_mode", self.backend_mode.as_str().to_string());
        kv("sidecar_endpoint", self.sidecar_endpoint.clone());
        kv("sidecar_pool", self.sidecar_pool.to_string());
        kv("fixture_dir", self.fixture_dir.display().to_string());
        kv("decoder_command", self.decoder_command.clone().unwrap_or_default());
        kv("store_dir", self.store_dir.display().to_string());
        kv("http_port", self.http_port.to_string());
        kv(
            "ui_dir",
            self.ui_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("tta_enabled", self.tta_enabled.to_string());
        kv("workers", self.workers.to_string());
        kv("max_attempts", self.max_attempts.to_string());
        out
    }

    pub fn quarantine_dir(&self) -> PathBuf {
        self.store_dir.join("quarantine")
    }
}

fn split_line(raw: &str) -> Result<Option<(&str, String)>, String> {
    let line = raw.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| format!("expected `key = value`, got `{line}`"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err("empty key".into());
    }
    let value = value.trim();
    if value.starts_with('"') && (value.len() < 2 || !value.ends_with('"')) {
        return Err(format!("unterminated quote in value of `{key}`"));
    }
    Ok(Some((key, unquote(value))))
}

fn unquote(v: &str) -> String {
    if v.len() >= 2 && v.starts_with('"') && v.ends_with('"') {
        v[1..v.len() - 1].to_string()
    } else {
        v.to_string()
    }
}

fn quote(v: &str) -> String {
    if v.is_empty() || v != v.trim() || v.starts_with('"') {
        format!("\"{v}\"")
    } else {
        v.to_string()
    }
}

fn non_empty(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}
