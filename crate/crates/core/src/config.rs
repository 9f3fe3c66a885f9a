//! Experiment configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! rounds = 300
//! clients = 50
//! clients_per_round = 20
//! top_n = 4
//! data.partition = dirichlet
//! data.alpha = 1.0
//! ```
//!
//! Section keys are dotted. Unknown or repeated keys are rejected so that a
//! typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given more than once")]
    DuplicateKey { line: usize, key: String },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: cannot parse {value:?} ({reason})")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("key `{key}`: {reason}")]
    Constraint { key: String, reason: String },
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    FedLdf,
    FedAvg,
    RandomLayer,
    ClientDropout,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::FedLdf,
        Algorithm::FedAvg,
        Algorithm::RandomLayer,
        Algorithm::ClientDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedLdf => "fedldf",
            Algorithm::FedAvg => "fedavg",
            Algorithm::RandomLayer => "random_layer",
            Algorithm::ClientDropout => "client_dropout",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Algorithm::name).join(", ")
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for Algorithm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}`; valid: {}", Self::valid_names()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs {
        classes: usize,
        dim: usize,
        samples_per_class: usize,
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Separate held-out pair; when absent the training files are split.
        test: Option<(PathBuf, PathBuf)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionKind {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub partition: PartitionKind,
    pub test_fraction: f64,
    /// Seed for dataset synthesis and partitioning; defaults to the run seed.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub top_n: usize,
    /// Clients kept per round by `client_dropout`.
    pub keep: usize,
    pub rounds: usize,
    pub lr: f64,
    pub local_epochs: usize,
    /// Mini-batch size; 0 means full local batch.
    pub batch_size: usize,
    pub algorithm: Algorithm,
    pub hidden: Vec<usize>,
    pub data: DataSpec,
    pub bytes_per_param: usize,
    pub shadow_enabled: bool,
    /// Reset the shadow model to the global model after every round.
    pub shadow_resync: bool,
    /// Per-round trace records; also produced whenever the shadow is enabled.
    pub trace_enabled: bool,
}

impl ExperimentConfig {
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| {
            Err(ConfigError::Constraint {
                key: key.into(),
                reason,
            })
        };
        if self.n_clients == 0 {
            return bad("clients", "must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return bad(
                "clients_per_round",
                format!("must lie in [1, clients={}]", self.n_clients),
            );
        }
        if self.top_n == 0 || self.top_n > self.clients_per_round {
            return bad(
                "top_n",
                format!("must lie in [1, clients_per_round={}]", self.clients_per_round),
            );
        }
        if self.keep == 0 || self.keep > self.clients_per_round {
            return bad(
                "keep",
                format!("must lie in [1, clients_per_round={}]", self.clients_per_round),
            );
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1".into());
        }
        if self.bytes_per_param == 0 {
            return bad("bytes_per_param", "must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("model.hidden", "layer widths must be positive".into());
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad("data.test_fraction", "must lie in (0, 1)".into());
        }
        if let PartitionKind::Dirichlet { alpha } = self.data.partition {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return bad("data.alpha", "must be positive and finite".into());
            }
        }
        if let DataSource::Blobs {
            classes,
            dim,
            samples_per_class,
            spread,
        } = self.data.source
        {
            if classes < 2 {
                return bad("data.classes", "must be at least 2".into());
            }
            if dim == 0 {
                return bad("data.dim", "must be at least 1".into());
            }
            if samples_per_class == 0 {
                return bad("data.samples_per_class", "must be at least 1".into());
            }
            if !(spread >= 0.0 && spread.is_finite()) {
                return bad("data.spread", "must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    /// Canonical key/value pairs, every key spelled out.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("algorithm", self.algorithm.to_string()),
            ("clients", self.n_clients.to_string()),
            ("clients_per_round", self.clients_per_round.to_string()),
            ("top_n", self.top_n.to_string()),
            ("keep", self.keep.to_string()),
            ("rounds", self.rounds.to_string()),
            ("lr", self.lr.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("bytes_per_param", self.bytes_per_param.to_string()),
            ("model.hidden", join(&self.hidden)),
        ];
        match &self.data.source {
            DataSource::Blobs {
                classes,
                dim,
                samples_per_class,
                spread,
            } => {
                out.push(("data.source", "blobs".into()));
                out.push(("data.classes", classes.to_string()));
                out.push(("data.dim", dim.to_string()));
                out.push(("data.samples_per_class", samples_per_class.to_string()));
                out.push(("data.spread", spread.to_string()));
            }
            DataSource::Idx {
                images,
                labels,
                test,
            } => {
                out.push(("data.source", "idx".into()));
                out.push(("data.images", images.display().to_string()));
                out.push(("data.labels", labels.display().to_string()));
                if let Some((ti, tl)) = test {
                    out.push(("data.test_images", ti.display().to_string()));
                    out.push(("data.test_labels", tl.display().to_string()));
                }
            }
        }
        match self.data.partition {
            PartitionKind::Iid => out.push(("data.partition", "iid".into())),
            PartitionKind::Dirichlet { alpha } => {
                out.push(("data.partition", "dirichlet".into()));
                out.push(("data.alpha", alpha.to_string()));
            }
        }
        out.push(("data.test_fraction", self.data.test_fraction.to_string()));
        if let Some(s) = self.data.seed {
            out.push(("data.seed", s.to_string()));
        }
        out.push(("shadow.enabled", self.shadow_enabled.to_string()));
        out.push(("shadow.resync", self.shadow_resync.to_string()));
        out.push(("trace.enabled", self.trace_enabled.to_string()));
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.to_pairs().into_iter().collect()
    }

    /// Canonical text form; parses back to an identical config.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        text.parse()
    }
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "algorithm",
    "clients",
    "clients_per_round",
    "client_fraction",
    "top_n",
    "keep",
    "rounds",
    "lr",
    "local_epochs",
    "batch_size",
    "bytes_per_param",
    "model.hidden",
    "data.source",
    "data.classes",
    "data.dim",
    "data.samples_per_class",
    "data.spread",
    "data.images",
    "data.labels",
    "data.test_images",
    "data.test_labels",
    "data.partition",
    "data.alpha",
    "data.test_fraction",
    "data.seed",
    "shadow.enabled",
    "shadow.resync",
    "trace.enabled",
];

/// Parses `key = value` lines into a map, rejecting unknown and repeated keys.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: raw.to_string(),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                text: raw.to_string(),
            });
        }
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(ConfigError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
    }
    Ok(map)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::InvalidValue {
                    key: key.into(),
                    value: v.into(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.parse(key)?
            .ok_or_else(|| ConfigError::MissingKey(key.into()))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<usize>().map_err(|e| ConfigError::InvalidValue {
                            key: key.into(),
                            value: v.into(),
                            reason: e.to_string(),
                        })
                    })
                    .collect()
            })
            .transpose()
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let f = Fields(parse_pairs(text)?);
        let rounds: usize = f.required("rounds")?;
        let n_clients: usize = f.required("clients")?;
        let clients_per_round = match (
            f.parse::<usize>("clients_per_round")?,
            f.parse::<f64>("client_fraction")?,
        ) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Constraint {
                    key: "client_fraction".into(),
                    reason: "give either clients_per_round or client_fraction, not both".into(),
                })
            }
            (Some(k), None) => k,
            (None, Some(c)) => {
                if !(c > 0.0 && c <= 1.0) {
                    return Err(ConfigError::Constraint {
                        key: "client_fraction".into(),
                        reason: "must lie in (0, 1]".into(),
                    });
                }
                ((c * n_clients as f64).floor() as usize).max(1)
            }
            (None, None) => return Err(ConfigError::MissingKey("clients_per_round".into())),
        };
        let top_n = f.or("top_n", clients_per_round)?;
        let keep = f.or("keep", top_n)?;
        let algorithm = match f.raw("algorithm") {
            None => Algorithm::FedLdf,
            Some(v) => v.parse().map_err(|reason| ConfigError::InvalidValue {
                key: "algorithm".into(),
                value: v.into(),
                reason,
            })?,
        };
        let source = match f.raw("data.source").unwrap_or("blobs") {
            "blobs" => DataSource::Blobs {
                classes: f.or("data.classes", 4)?,
                dim: f.or("data.dim", 16)?,
                samples_per_class: f.or("data.samples_per_class", 1000)?,
                spread: f.or("data.spread", 1.0)?,
            },
            "idx" => {
                let test = match (f.raw("data.test_images"), f.raw("data.test_labels")) {
                    (Some(i), Some(l)) => Some((PathBuf::from(i), PathBuf::from(l))),
                    (None, None) => None,
                    (Some(_), None) => return Err(ConfigError::MissingKey("data.test_labels".into())),
                    (None, Some(_)) => return Err(ConfigError::MissingKey("data.test_images".into())),
                };
                DataSource::Idx {
                    images: f.required::<String>("data.images")?.into(),
                    labels: f.required::<String>("data.labels")?.into(),
                    test,
                }
            }
            other => {
                return Err(ConfigError::InvalidValue {
                    key: "data.source".into(),
                    value: other.into(),
                    reason: "expected `blobs` or `idx`".into(),
                })
            }
        };
        let partition = match f.raw("data.partition").unwrap_or("iid") {
            "iid" => PartitionKind::Iid,
            "dirichlet" => PartitionKind::Dirichlet {
                alpha: f.or("data.alpha", 1.0)?,
            },
            other => {
                return Err(ConfigError::InvalidValue {
                    key: "data.partition".into(),
                    value: other.into(),
                    reason: "expected `iid` or `dirichlet`".into(),
                })
            }
        };
        let cfg = ExperimentConfig {
            seed: f.or("seed", 0)?,
            n_clients,
            clients_per_round,
            top_n,
            keep,
            rounds,
            lr: f.or("lr", 0.05)?,
            local_epochs: f.or("local_epochs", 1)?,
            batch_size: f.or("batch_size", 32)?,
            algorithm,
            hidden: f.list("model.hidden")?.unwrap_or_else(|| vec![32, 32]),
            data: DataSpec {
                source,
                partition,
                test_fraction: f.or("data.test_fraction", 0.2)?,
                seed: f.parse("data.seed")?,
            },
            bytes_per_param: f.or("bytes_per_param", 4)?,
            shadow_enabled: f.or("shadow.enabled", false)?,
            shadow_resync: f.or("shadow.resync", true)?,
            trace_enabled: f.or("trace.enabled", false)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MNIST_SHAPED: &str = "\
# desk-scale run
seed = 3
rounds = 10
clients = 50
clients_per_round = 20
top_n = 4
data.partition = dirichlet
data.alpha = 1.0
";

    #[test]
    fn parses_with_defaults() {
        let cfg: ExperimentConfig = MNIST_SHAPED.parse().unwrap();
        assert_eq!(cfg.n_clients, 50);
        assert_eq!(cfg.clients_per_round, 20);
        assert_eq!(cfg.top_n, 4);
        assert_eq!(cfg.keep, 4);
        assert_eq!(cfg.algorithm, Algorithm::FedLdf);
        assert_eq!(cfg.bytes_per_param, 4);
        assert_eq!(cfg.local_epochs, 1);
        assert_eq!(cfg.data.partition, PartitionKind::Dirichlet { alpha: 1.0 });
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg: ExperimentConfig = MNIST_SHAPED.parse().unwrap();
        let again: ExperimentConfig = cfg.to_text().parse().unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn missing_rounds_is_named() {
        let err = "clients = 5\nclients_per_round = 2\n"
            .parse::<ExperimentConfig>()
            .unwrap_err();
        assert_eq!(err, ConfigError::MissingKey("rounds".into()));
        assert!(err.to_string().contains("rounds"));
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let err = "rounds = 1\nround = 2\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, .. }));
        let err = "rounds = 1\nrounds = 2\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { line: 2, .. }));
        let err = "rounds 1\n".parse::<ExperimentConfig>().unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
    }

    #[test]
    fn client_fraction_sets_k() {
        let cfg: ExperimentConfig = "rounds = 1\nclients = 50\nclient_fraction = 0.4\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.clients_per_round, 20);
        let cfg: ExperimentConfig = "rounds = 1\nclients = 3\nclient_fraction = 0.1\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.clients_per_round, 1);
    }

    #[test]
    fn constraint_violations_name_their_key() {
        let base = "rounds = 1\nclients = 10\nclients_per_round = 4\n";
        for (extra, key) in [
            ("top_n = 5\n", "top_n"),
            ("lr = 0\n", "lr"),
            ("local_epochs = 0\n", "local_epochs"),
            ("algorithm = fedsgd\n", "algorithm"),
            ("data.partition = dirichlet\ndata.alpha = -1\n", "data.alpha"),
        ] {
            let err = format!("{base}{extra}").parse::<ExperimentConfig>().unwrap_err();
            assert!(err.to_string().contains(key), "{err}");
        }
        let err = "rounds = 1\nclients = 3\nclients_per_round = 4\n"
            .parse::<ExperimentConfig>()
            .unwrap_err();
        assert!(err.to_string().contains("clients_per_round"));
    }

    #[test]
    fn idx_source_requires_paths() {
        let err = "rounds = 1\nclients = 2\nclients_per_round = 1\ndata.source = idx\n"
            .parse::<ExperimentConfig>()
            .unwrap_err();
        assert_eq!(err, ConfigError::MissingKey("data.images".into()));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("nope".parse::<Algorithm>().unwrap_err().contains("client_dropout"));
    }
}
