//! Line-based `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lmc_core::graph::SbmConfig;
use lmc_core::lmc::{BetaSchedule, EstimatorMode, ScoreKind};

/// Every accepted key with its default; an empty default means "unset".
const KEYS: &[(&str, &str)] = &[
    ("edges", ""),
    ("features", ""),
    ("labels", ""),
    ("sbm_blocks", "2"),
    ("sbm_nodes_per_block", "300"),
    ("sbm_p_in", "0.03"),
    ("sbm_p_out", "0.005"),
    ("feature_dim", "8"),
    ("classes", "2"),
    ("label_fraction", "0.3"),
    ("data_seed", "0"),
    ("layers", "2"),
    ("hidden", "16"),
    ("num_clusters", "8"),
    ("batch_clusters", "2"),
    ("lr", "0.05"),
    ("iterations", "200"),
    ("mode", "LMC"),
    ("alpha", ""),
    ("score", ""),
    ("eval_every", ""),
    ("warm_start", "false"),
    ("partition", ""),
    ("modes", "LMC,GAS,Cluster"),
    ("measure_every", "1"),
    ("warmup", "20"),
    ("out_dir", "out"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Files {
        edges: PathBuf,
        features: PathBuf,
        labels: PathBuf,
    },
    Sbm(SbmConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub layers: usize,
    pub hidden: usize,
    pub num_clusters: usize,
    pub batch_clusters: usize,
    pub lr: f64,
    pub iterations: usize,
    pub mode: EstimatorMode,
    pub sched: BetaSchedule,
    pub eval_every: usize,
    pub warm_start: bool,
    pub partition: Option<PathBuf>,
    pub modes: Vec<EstimatorMode>,
    pub measure_every: usize,
    pub warmup: usize,
    pub out_dir: PathBuf,
    raw: BTreeMap<String, String>,
}

/// Raw key/value pairs, validated against [`KEYS`].
#[derive(Debug, Clone, Default)]
pub struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = Self::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            map.set_pair(line)
                .with_context(|| format!("{origin}:{}", idx + 1))?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies one `key=value` (or `key = value`) override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key = value, got {pair:?}"))?;
        let key = key.trim();
        if !KEYS.iter().any(|(k, _)| *k == key) {
            bail!("unknown config key {key:?}");
        }
        self.0.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        match self.0.get(key) {
            Some(v) => v,
            None => KEYS.iter().find(|(k, _)| *k == key).map_or("", |(_, d)| d),
        }
    }

    fn parsed<T>(&self, key: &str) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse()
            .map_err(|e| anyhow!("invalid value {raw:?} for {key}: {e}"))
    }

    fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn resolved(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).to_string()))
            .collect()
    }

    pub fn into_run_config(self) -> Result<RunConfig> {
        let dataset = match (
            self.optional_path("edges"),
            self.optional_path("features"),
            self.optional_path("labels"),
        ) {
            (Some(edges), Some(features), Some(labels)) => Dataset::Files {
                edges,
                features,
                labels,
            },
            (None, None, None) => Dataset::Sbm(SbmConfig {
                blocks: self.parsed("sbm_blocks")?,
                nodes_per_block: self.parsed("sbm_nodes_per_block")?,
                p_in: self.parsed("sbm_p_in")?,
                p_out: self.parsed("sbm_p_out")?,
                feature_dim: self.parsed("feature_dim")?,
                classes: self.parsed("classes")?,
                label_fraction: self.parsed("label_fraction")?,
                seed: self.parsed("data_seed")?,
            }),
            _ => bail!("edges, features and labels must be given together"),
        };

        let layers: usize = self.parsed("layers")?;
        let hidden: usize = self.parsed("hidden")?;
        let num_clusters: usize = self.parsed("num_clusters")?;
        let batch_clusters: usize = self.parsed("batch_clusters")?;
        let lr: f64 = self.parsed("lr")?;
        if layers == 0 || hidden == 0 {
            bail!("layers and hidden must be at least 1");
        }
        if batch_clusters == 0 || batch_clusters > num_clusters {
            bail!(
                "need 1 <= batch_clusters <= num_clusters, got {batch_clusters} and {num_clusters}"
            );
        }
        if !(lr > 0.0 && lr.is_finite()) {
            bail!("lr must be a positive number, got {lr}");
        }

        let default_sched = BetaSchedule::default_for(num_clusters, batch_clusters);
        let alpha = match self.get("alpha") {
            "" => default_sched.alpha,
            _ => self.parsed("alpha")?,
        };
        let score = match self.get("score") {
            "" => default_sched.score,
            _ => self.parsed::<ScoreKind>("score")?,
        };
        let sched = BetaSchedule::new(alpha, score)?;

        let eval_every = match self.get("eval_every") {
            "" => lmc_core::experiment::epoch_steps(num_clusters, batch_clusters),
            _ => self.parsed("eval_every")?,
        };
        let measure_every: usize = self.parsed("measure_every")?;
        if eval_every == 0 || measure_every == 0 {
            bail!("eval_every and measure_every must be at least 1");
        }
        let modes = self
            .get("modes")
            .split(',')
            .map(|m| m.parse::<EstimatorMode>())
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let mut raw = self.resolved();
        raw.insert("alpha".into(), sched.alpha.to_string());
        raw.insert("score".into(), sched.score.to_string());
        raw.insert("eval_every".into(), eval_every.to_string());
        Ok(RunConfig {
            dataset,
            layers,
            hidden,
            num_clusters,
            batch_clusters,
            lr,
            iterations: self.parsed("iterations")?,
            mode: self.parsed("mode")?,
            sched,
            eval_every,
            warm_start: self.parsed("warm_start")?,
            partition: self.optional_path("partition"),
            modes,
            measure_every,
            warmup: self.parsed("warmup")?,
            out_dir: PathBuf::from(self.get("out_dir")),
            raw,
        })
    }
}

impl RunConfig {
    /// Every key with its resolved value, in `key = value` form; feeding the
    /// text back through `--config` reproduces the run.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.raw {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}
