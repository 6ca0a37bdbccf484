//! End-to-end experiment driven by one JSON configuration.
//!
//! Layout under the output directory:
//! `rollouts/{train,test}_NN.csv` with `.json` sidecars, `dataset/`, `models/<method>.json`,
//! `evaluation.json`, `report.json` and `report.txt`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{PidController, PidGains};
use crate::dataset::{ingest_external, ColumnMap, Dataset, SourceRollout};
use crate::error::{Error, Result};
use crate::excitation::{generate_reference, MultiSineSpec};
use crate::models::{load_json, save_json, train_methods, MethodKind, MethodSpec, Report, TrainedModel};
use crate::numdiff::DiffConfig;
use crate::provenance::{hash_bytes, hash_parts};
use crate::rbd::RobotModel;
use crate::sim::{rollout, Rollout, SimConfig};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ENV: &str = "HDYN_OUTPUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Robot model JSON; the built-in synthetic 7-DoF arm when absent.
    pub model: Option<PathBuf>,
    pub sim: SimConfig,
    pub excitation: MultiSineSpec,
    /// Controller gains; the tuned defaults for the model's DoF when absent.
    pub controller: Option<PidGains>,
    pub train_rollouts: usize,
    pub test_rollouts: usize,
    pub diff: DiffConfig,
    /// Differentiation used by `ingest`.
    pub ingest_diff: DiffConfig,
    /// Method seeds are replaced by the master seed.
    pub methods: Vec<MethodSpec>,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: None,
            sim: SimConfig::default(),
            excitation: MultiSineSpec::default(),
            controller: None,
            train_rollouts: 10,
            test_rollouts: 10,
            diff: DiffConfig::finite(),
            ingest_diff: DiffConfig::tvr(),
            methods: MethodKind::ALL.into_iter().map(|k| MethodSpec::new(k, 0)).collect(),
            output: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

/// Method entry as written in a config file; missing blocks take their defaults.
#[derive(Deserialize)]
struct MethodEntry {
    kind: MethodKind,
    #[serde(default)]
    symreg: Option<crate::symreg::SymRegConfig>,
    #[serde(default)]
    sindy: Option<crate::models::SindyConfig>,
    #[serde(default)]
    network: Option<crate::models::NetworkConfig>,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        let methods = value.as_object_mut().and_then(|o| o.remove("methods"));
        let mut cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        if let Some(m) = methods {
            let entries: Vec<MethodEntry> =
                serde_json::from_value(m).map_err(|e| Error::Config(format!("experiment config methods: {e}")))?;
            cfg.methods = entries
                .into_iter()
                .map(|e| {
                    let mut spec = MethodSpec::new(e.kind, cfg.seed);
                    let extra = |present: bool, name: &str| {
                        if present {
                            Err(Error::Config(format!("method {} does not take a {name} configuration", e.kind)))
                        } else {
                            Ok(())
                        }
                    };
                    match (e.symreg, spec.symreg.is_some()) {
                        (Some(c), true) => spec.symreg = Some(c),
                        (s, _) => extra(s.is_some(), "symreg")?,
                    }
                    match (e.sindy, spec.sindy.is_some()) {
                        (Some(c), true) => spec.sindy = Some(c),
                        (s, _) => extra(s.is_some(), "sindy")?,
                    }
                    match (e.network, spec.network.is_some()) {
                        (Some(c), true) => spec.network = Some(c),
                        (s, _) => extra(s.is_some(), "network")?,
                    }
                    Ok(spec)
                })
                .collect::<Result<_>>()?;
        }
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read experiment config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        for m in &mut self.methods {
            m.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_rollouts == 0 || self.test_rollouts == 0 {
            return Err(Error::Config("train_rollouts and test_rollouts must be at least 1".into()));
        }
        self.sim.validate()?;
        self.excitation.validate()?;
        let mut seen = Vec::new();
        for m in &self.methods {
            if seen.contains(&m.kind) {
                return Err(Error::Config(format!("method {} listed twice", m.kind)));
            }
            seen.push(m.kind);
            m.validate()?;
        }
        Ok(())
    }

    pub fn robot(&self) -> Result<RobotModel> {
        match &self.model {
            None => Ok(RobotModel::franka7_synthetic()),
            Some(p) if !p.exists() => Err(Error::Config(format!("robot model file {} does not exist", p.display()))),
            Some(p) => RobotModel::load(p),
        }
    }

    pub fn gains(&self, dof: usize) -> PidGains {
        self.controller.clone().unwrap_or_else(|| PidGains::default_for(dof))
    }

    /// Spec for `kind`: the configured one, else the defaults under the master seed.
    pub fn method(&self, kind: MethodKind) -> MethodSpec {
        self.methods
            .iter()
            .find(|m| m.kind == kind)
            .cloned()
            .unwrap_or_else(|| MethodSpec::new(kind, self.seed))
    }

    pub fn hash(&self) -> String {
        hash_bytes(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn rollout_dir(&self) -> PathBuf {
        self.output.join("rollouts")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output.join("dataset")
    }

    pub fn model_path(&self, kind: MethodKind) -> PathBuf {
        self.output.join("models").join(format!("{}.json", kind.id()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

/// Record written next to each rollout CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSidecar {
    pub split: SplitName,
    pub index: usize,
    pub seed: u64,
    pub config_hash: String,
    pub model_hash: String,
    pub csv_hash: String,
    pub samples: usize,
    pub max_tracking_error: f64,
}

fn rollout_name(split: SplitName, index: usize) -> String {
    format!("{}_{index:02}", split.as_str())
}

/// Seed of one rollout, derived from the master seed.
pub fn rollout_seed(master: u64, split: SplitName, index: usize) -> u64 {
    let h = hash_parts([
        ("master", &master.to_le_bytes()[..]),
        ("split", split.as_str().as_bytes()),
        ("index", &(index as u64).to_le_bytes()[..]),
    ]);
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

fn simulate_one(cfg: &ExperimentConfig, model: &RobotModel, split: SplitName, index: usize) -> Result<(Rollout, u64)> {
    let seed = rollout_seed(cfg.seed, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = generate_reference(model, &cfg.excitation, &cfg.sim.time_grid(), &mut rng)?;
    let mut pid = PidController::new(cfg.gains(model.dof()));
    Ok((rollout(model, &mut pid, &reference, &cfg.sim)?, seed))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates all train and test rollouts; returns the CSV paths.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let model = cfg.robot()?;
    let dir = cfg.rollout_dir();
    let config_hash = cfg.hash();
    let model_hash = model.content_hash();
    let jobs: Vec<(SplitName, usize)> = (0..cfg.train_rollouts)
        .map(|i| (SplitName::Train, i))
        .chain((0..cfg.test_rollouts).map(|i| (SplitName::Test, i)))
        .collect();
    let mut paths = Vec::with_capacity(jobs.len());
    for (split, index) in jobs {
        let (ro, seed) = simulate_one(cfg, &model, split, index)?;
        let csv = ro.to_csv();
        let name = rollout_name(split, index);
        let path = dir.join(format!("{name}.csv"));
        write_file(&path, &csv)?;
        let sidecar = RolloutSidecar {
            split,
            index,
            seed,
            config_hash: config_hash.clone(),
            model_hash: model_hash.clone(),
            csv_hash: hash_bytes(csv.as_bytes()),
            samples: ro.len(),
            max_tracking_error: ro.max_tracking_error().unwrap_or(f64::NAN),
        };
        save_json(dir.join(format!("{name}.json")), &sidecar)?;
        log::info!("simulated {name}");
        paths.push(path);
    }
    Ok(paths)
}

fn load_rollouts(cfg: &ExperimentConfig, split: SplitName, count: usize) -> Result<Vec<SourceRollout>> {
    (0..count)
        .map(|i| {
            let name = rollout_name(split, i);
            let path = cfg.rollout_dir().join(format!("{name}.csv"));
            if !path.exists() {
                return Err(Error::Data(format!(
                    "rollout {} is missing; run `hdyn simulate` first",
                    path.display()
                )));
            }
            Ok(SourceRollout::new(name, Rollout::load_csv(&path)?))
        })
        .collect()
}

/// Builds and saves the dataset from the simulated rollouts.
pub fn cmd_build(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let model = cfg.robot()?;
    let train = load_rollouts(cfg, SplitName::Train, cfg.train_rollouts)?;
    let test = load_rollouts(cfg, SplitName::Test, cfg.test_rollouts)?;
    let ds = Dataset::build(&train, &test, &model, &cfg.diff)?;
    ds.save(cfg.dataset_dir())?;
    Ok(ds)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join("meta.json").exists() {
        return Err(Error::Data(format!(
            "no dataset in {}; run `hdyn build` or `hdyn ingest` first",
            dir.display()
        )));
    }
    Dataset::load(dir)
}

/// Trains one method, or every configured method when `method` is `None`.
pub fn cmd_train(cfg: &ExperimentConfig, method: Option<MethodKind>) -> Result<Vec<TrainedModel>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let specs = match method {
        Some(k) => vec![cfg.method(k)],
        None => cfg.methods.clone(),
    };
    let models = train_methods(&specs, &ds)?;
    for m in &models {
        let path = cfg.model_path(m.kind());
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        m.save(path)?;
    }
    Ok(models)
}

fn load_models(cfg: &ExperimentConfig) -> Result<Vec<TrainedModel>> {
    let models: Vec<TrainedModel> = MethodKind::ALL
        .into_iter()
        .map(|k| cfg.model_path(k))
        .filter(|p| p.exists())
        .map(TrainedModel::load)
        .collect::<Result<_>>()?;
    if models.is_empty() {
        return Err(Error::Data(format!(
            "no trained models in {}; run `hdyn train --method <kind>|all` first",
            cfg.output.join("models").display()
        )));
    }
    Ok(models)
}

/// Scores every trained model on both splits and writes `evaluation.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Report> {
    let ds = load_dataset(cfg)?;
    let report = Report::build(&load_models(cfg)?, &ds)?;
    write_file(&cfg.output.join("evaluation.json"), &report.to_json())?;
    Ok(report)
}

/// Writes `report.json` and `report.txt`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<Report> {
    let ds = load_dataset(cfg)?;
    let report = Report::build(&load_models(cfg)?, &ds)?;
    write_file(&cfg.output.join("report.json"), &report.to_json())?;
    write_file(&cfg.output.join("report.txt"), &report.to_text())?;
    Ok(report)
}

/// Ingests an external trajectory directory into the dataset directory.
pub fn cmd_ingest(cfg: &ExperimentConfig, dir: impl AsRef<Path>, map: impl AsRef<Path>) -> Result<Dataset> {
    let model = cfg.robot()?;
    let map = ColumnMap::load(map)?;
    let (train, test) = ingest_external(dir, &map, &model, &cfg.ingest_diff)?;
    let ds = Dataset::build(&train, &test, &model, &cfg.ingest_diff)?;
    ds.save(cfg.dataset_dir())?;
    Ok(ds)
}

/// simulate, build, train every configured method and report.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Report> {
    cmd_simulate(cfg)?;
    cmd_build(cfg)?;
    cmd_train(cfg, None)?;
    cmd_report(cfg)
}

/// Reads a previously written report.
pub fn load_report(cfg: &ExperimentConfig) -> Result<Report> {
    load_json(cfg.output.join("report.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            train_rollouts: 2,
            test_rollouts: 1,
            output: dir.to_path_buf(),
            ..ExperimentConfig::default()
        };
        cfg.sim.horizon = 0.5;
        cfg.methods = vec![MethodSpec::new(MethodKind::RSindy, 0)];
        cfg
    }

    #[test]
    fn config_defaults_and_parsing() {
        let cfg = ExperimentConfig::from_json_str("{}").unwrap();
        assert_eq!((cfg.train_rollouts, cfg.test_rollouts), (10, 10));
        assert_eq!(cfg.methods.len(), 7);
        let cfg = ExperimentConfig::from_json_str(
            r#"{"seed": 4, "methods": [{"kind": "sr", "symreg": {"population": 50}}, {"kind": "r-sindy"}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.methods.len(), 2);
        assert_eq!(cfg.methods[0].symreg.as_ref().unwrap().population, 50);
        assert_eq!(cfg.methods[0].symreg.as_ref().unwrap().generations, 200);
        assert!(cfg.methods.iter().all(|m| m.seed == 4));
        for bad in [
            r#"{"train_rollouts": 0}"#,
            r#"{"methods": [{"kind": "nn", "sindy": {}}]}"#,
            r#"{"methods": [{"kind": "svm"}]}"#,
            r#"{"methods": [{"kind": "nn"}, {"kind": "nn"}]}"#,
            "not json",
        ] {
            assert!(matches!(ExperimentConfig::from_json_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn missing_model_file_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.model = Some(dir.path().join("nope.json"));
        let err = cmd_simulate(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn simulate_is_deterministic_and_build_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let paths = cmd_simulate(&cfg).unwrap();
        assert_eq!(paths.len(), 3);
        let first: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        cmd_simulate(&cfg).unwrap();
        let second: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert_ne!(first[0], first[1]);
        let sidecar: RolloutSidecar = load_json(cfg.rollout_dir().join("train_00.json")).unwrap();
        assert_eq!(sidecar.csv_hash, hash_bytes(&first[0]));

        let a = cmd_build(&cfg).unwrap();
        let b = cmd_build(&cfg).unwrap();
        assert_eq!(a.meta.provenance, b.meta.provenance);
        assert_eq!(a.train.x.data.ncols(), 49);
        assert_eq!(a.train.x.rows(), 2 * 250);
    }

    #[test]
    fn commands_in_wrong_order_explain_themselves() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let err = cmd_build(&cfg).unwrap_err();
        assert!(err.to_string().contains("hdyn simulate"), "{err}");
        assert_eq!(err.exit_code(), 3);
        cmd_simulate(&cfg).unwrap();
        assert!(cmd_train(&cfg, None).unwrap_err().to_string().contains("hdyn build"));
        cmd_build(&cfg).unwrap();
        assert!(cmd_evaluate(&cfg).unwrap_err().to_string().contains("hdyn train"));
    }

    #[test]
    fn train_evaluate_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let report = run_all(&cfg).unwrap();
        assert_eq!(report.methods.len(), 1);
        assert!(cfg.model_path(MethodKind::RSindy).exists());
        let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains("r-SINDy equations"));
        assert_eq!(load_report(&cfg).unwrap(), report);
        assert_eq!(cmd_evaluate(&cfg).unwrap(), report);
    }

    #[test]
    fn stale_model_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        run_all(&cfg).unwrap();
        cfg.set_seed(1);
        cmd_simulate(&cfg).unwrap();
        cmd_build(&cfg).unwrap();
        let err = cmd_report(&cfg).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("trained on dataset"));
    }

    #[test]
    fn rollout_seeds_differ_by_split_and_index() {
        let a = rollout_seed(0, SplitName::Train, 0);
        assert_ne!(a, rollout_seed(0, SplitName::Test, 0));
        assert_ne!(a, rollout_seed(0, SplitName::Train, 1));
        assert_ne!(a, rollout_seed(1, SplitName::Train, 0));
        assert_eq!(a, rollout_seed(0, SplitName::Train, 0));
    }
}
