//! The seven identification methods, hybrid prediction and the comparison report.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{residual_targets, Dataset, FeatureMatrix};
use crate::error::{Error, Result};
use crate::mlp::{self, Mlp, Scaling, TrainConfig};
use crate::sparsereg::{stlsq_normal, NormalEquations, PolyLibrary, SparseLinearModel, StlsqConfig};
use crate::symreg::{format_sig, SymRegConfig, SymbolicModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Sr,
    Sindy,
    RSr,
    RSindy,
    RSindySr,
    Nn,
    RNn,
}

impl MethodKind {
    /// Table order.
    pub const ALL: [MethodKind; 7] = [
        MethodKind::Sr,
        MethodKind::Sindy,
        MethodKind::RSr,
        MethodKind::RSindy,
        MethodKind::RSindySr,
        MethodKind::Nn,
        MethodKind::RNn,
    ];

    pub fn id(self) -> &'static str {
        match self {
            MethodKind::Sr => "sr",
            MethodKind::Sindy => "sindy",
            MethodKind::RSr => "r-sr",
            MethodKind::RSindy => "r-sindy",
            MethodKind::RSindySr => "r-sindy-sr",
            MethodKind::Nn => "nn",
            MethodKind::RNn => "r-nn",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MethodKind::Sr => "SR",
            MethodKind::Sindy => "SINDy",
            MethodKind::RSr => "r-SR",
            MethodKind::RSindy => "r-SINDy",
            MethodKind::RSindySr => "r-SINDy-SR",
            MethodKind::Nn => "NN",
            MethodKind::RNn => "r-NN",
        }
    }

    /// Whether predictions add τ_rbd from the feature columns.
    pub fn residual(self) -> bool {
        matches!(self, MethodKind::RSr | MethodKind::RSindy | MethodKind::RSindySr | MethodKind::RNn)
    }

    pub fn interpretable(self) -> bool {
        !matches!(self, MethodKind::Nn | MethodKind::RNn)
    }

    fn needs_symreg(self) -> bool {
        matches!(self, MethodKind::Sr | MethodKind::RSr | MethodKind::RSindySr)
    }

    fn needs_sindy(self) -> bool {
        matches!(self, MethodKind::Sindy | MethodKind::RSindy | MethodKind::RSindySr)
    }

    fn needs_network(self) -> bool {
        matches!(self, MethodKind::Nn | MethodKind::RNn)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SindyConfig {
    pub degree: u8,
    pub stlsq: StlsqConfig,
}

impl Default for SindyConfig {
    fn default() -> Self {
        SindyConfig {
            degree: 2,
            stlsq: StlsqConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![128, 128],
            train: TrainConfig::default(),
        }
    }
}

/// A method with exactly the configuration blocks its kind uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symreg: Option<SymRegConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sindy: Option<SindyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkConfig>,
}

impl MethodSpec {
    pub fn new(kind: MethodKind, seed: u64) -> Self {
        MethodSpec {
            kind,
            seed,
            symreg: kind.needs_symreg().then(SymRegConfig::default),
            sindy: kind.needs_sindy().then(SindyConfig::default),
            network: kind.needs_network().then(NetworkConfig::default),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.kind;
        let agree = |present: bool, needed: bool, block: &str| {
            if present == needed {
                Ok(())
            } else if needed {
                Err(Error::Config(format!("method {k} needs a {block} configuration")))
            } else {
                Err(Error::Config(format!("method {k} does not take a {block} configuration")))
            }
        };
        agree(self.symreg.is_some(), k.needs_symreg(), "symreg")?;
        agree(self.sindy.is_some(), k.needs_sindy(), "sindy")?;
        agree(self.network.is_some(), k.needs_network(), "network")?;
        if let Some(c) = &self.symreg {
            c.validate()?;
        }
        if let Some(c) = &self.sindy {
            c.stlsq.validate()?;
            if !(1..=2).contains(&c.degree) {
                return Err(Error::Config(format!("library degree must be 1 or 2, got {}", c.degree)));
            }
        }
        if let Some(c) = &self.network {
            c.train.validate()?;
            if c.hidden.contains(&0) {
                return Err(Error::Config("hidden layer widths must be positive".into()));
            }
        }
        Ok(())
    }

    /// Symbolic-regression settings for one output, seeded from the method seed.
    fn symreg_for(&self, output: usize) -> SymRegConfig {
        let mut c = self.symreg.clone().unwrap_or_default();
        c.seed = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(output as u64);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "kebab-case")]
pub enum Stage {
    Symbolic { outputs: Vec<SymbolicModel> },
    Sparse { model: SparseLinearModel },
    Network { net: Mlp, loss_curve: Vec<f64> },
}

impl Stage {
    fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Stage::Symbolic { outputs } => {
                let mut out = DMatrix::zeros(x.nrows(), outputs.len());
                for (j, m) in outputs.iter().enumerate() {
                    out.set_column(j, &m.predict(x)?);
                }
                Ok(out)
            }
            Stage::Sparse { model } => model.predict(x),
            Stage::Network { net, .. } => net.forward(x),
        }
    }

    /// Rendered expression per output with `digits` significant digits.
    fn equations(&self, digits: usize) -> Result<Vec<String>> {
        match self {
            Stage::Symbolic { outputs } => outputs
                .iter()
                .map(|m| m.expr.render_rounded(&m.features, digits))
                .collect(),
            Stage::Sparse { model } => Ok((0..model.outputs.len()).map(|j| render_sparse(model, j, digits)).collect()),
            Stage::Network { .. } => Ok(Vec::new()),
        }
    }
}

fn render_sparse(model: &SparseLinearModel, output: usize, digits: usize) -> String {
    let mut parts: Vec<(f64, String)> = model.active_terms()[output]
        .iter()
        .map(|(name, c)| (*c, format!("*{name}")))
        .collect();
    let b = model.b[output];
    if b != 0.0 {
        parts.push((b, String::new()));
    }
    if parts.is_empty() {
        return "0".into();
    }
    let mut s = String::new();
    for (i, (c, suffix)) in parts.iter().enumerate() {
        let mag = format_sig(c.abs(), digits);
        match (i, *c < 0.0) {
            (0, false) => s.push_str(&format!("{mag}{suffix}")),
            (0, true) => s.push_str(&format!("-{mag}{suffix}")),
            (_, false) => s.push_str(&format!(" + {mag}{suffix}")),
            (_, true) => s.push_str(&format!(" - {mag}{suffix}")),
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: MethodSpec,
    pub stage1: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2: Option<Stage>,
    pub residual: bool,
    /// Provenance hash of the training dataset.
    pub provenance: String,
    pub features: Vec<String>,
    pub targets: Vec<String>,
}

impl TrainedModel {
    pub fn kind(&self) -> MethodKind {
        self.spec.kind
    }

    /// Predicted motor torques; residual models add τ_rbd from the feature columns.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<DMatrix<f64>> {
        if x.names != self.features {
            return Err(Error::Data(format!(
                "feature registry mismatch for {} model: expected {} columns named like the training data",
                self.kind(),
                self.features.len()
            )));
        }
        let mut out = self.stage1.predict(&x.data)?;
        if let Some(s2) = &self.stage2 {
            out += s2.predict(&x.data)?;
        }
        if self.residual {
            out += x.rbd_torque();
        }
        Ok(out)
    }

    /// Closed-form torque equations per joint; empty for networks.
    pub fn equations(&self, digits: usize) -> Result<Vec<String>> {
        let first = self.stage1.equations(digits)?;
        if first.is_empty() {
            return Ok(first);
        }
        let second = match &self.stage2 {
            Some(s) => s.equations(digits)?,
            None => Vec::new(),
        };
        Ok(first
            .iter()
            .enumerate()
            .map(|(j, e)| {
                let mut s = format!("{} = ", self.targets[j]);
                if self.residual {
                    let _ = write!(s, "tau_rbd{} + ", j + 1);
                }
                match second.get(j) {
                    Some(e2) => {
                        let _ = write!(s, "({e}) + ({e2})");
                    }
                    None => s.push_str(e),
                }
                s
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path)
    }
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Normal equations for a library over `[τ_m | residual]`, shared by the sparse methods.
struct SparseSystem {
    degree: u8,
    library: PolyLibrary,
    ne: NormalEquations,
    outputs: usize,
}

impl SparseSystem {
    fn build(ds: &Dataset, degree: u8) -> Result<Self> {
        let x = &ds.train.x;
        let residual = residual_targets(&ds.train.y, x)?;
        let n = ds.train.y.data.ncols();
        let mut y = DMatrix::zeros(x.rows(), 2 * n);
        y.columns_mut(0, n).copy_from(&ds.train.y.data);
        y.columns_mut(n, n).copy_from(&residual.data);
        let library = PolyLibrary::new(x.names.clone(), degree)?;
        let ne = NormalEquations::accumulate(&library, &x.data, &y)?;
        Ok(SparseSystem {
            degree,
            library,
            ne,
            outputs: n,
        })
    }

    fn fit(&self, residual: bool, cfg: &StlsqConfig, targets: Vec<String>) -> Result<SparseLinearModel> {
        let start = if residual { self.outputs } else { 0 };
        let sub = NormalEquations {
            gram: self.ne.gram.clone(),
            rhs: self.ne.rhs.columns(start, self.outputs).into_owned(),
            rows: self.ne.rows,
        };
        let fit = stlsq_normal(&sub, cfg)?;
        Ok(SparseLinearModel::from_fit(self.library.clone(), targets, fit, cfg.clone()))
    }
}

fn fit_symbolic_outputs(spec: &MethodSpec, x: &FeatureMatrix, y: &DMatrix<f64>) -> Result<Stage> {
    let outputs = (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = y.column(j).iter().copied().collect();
            SymbolicModel::fit(&x.data, &col, &x.names, &spec.symreg_for(j))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Stage::Symbolic { outputs })
}

fn train_one(spec: &MethodSpec, ds: &Dataset, sparse: &mut Option<SparseSystem>) -> Result<TrainedModel> {
    spec.validate()?;
    let kind = spec.kind;
    log::info!("training {kind}");
    let x = &ds.train.x;
    let motor = &ds.train.y;
    let targets = ds.meta.targets.clone();
    let residual = || residual_targets(motor, x).map(|r| r.data);
    let mut sparse_fit = |residual: bool| -> Result<SparseLinearModel> {
        let cfg = spec.sindy.as_ref().expect("validated");
        if sparse.as_ref().is_none_or(|s| s.degree != cfg.degree) {
            *sparse = Some(SparseSystem::build(ds, cfg.degree)?);
        }
        sparse.as_ref().unwrap().fit(residual, &cfg.stlsq, targets.clone())
    };
    let (stage1, stage2) = match kind {
        MethodKind::Sr => (fit_symbolic_outputs(spec, x, &motor.data)?, None),
        MethodKind::RSr => (fit_symbolic_outputs(spec, x, &residual()?)?, None),
        MethodKind::Sindy => (Stage::Sparse { model: sparse_fit(false)? }, None),
        MethodKind::RSindy => (Stage::Sparse { model: sparse_fit(true)? }, None),
        MethodKind::RSindySr => {
            let first = sparse_fit(true)?;
            let leftover = &motor.data - x.rbd_torque() - first.predict(&x.data)?;
            let second = fit_symbolic_outputs(spec, x, &leftover)?;
            (Stage::Sparse { model: first }, Some(second))
        }
        MethodKind::Nn | MethodKind::RNn => {
            let cfg = spec.network.as_ref().expect("validated");
            let mut sizes = vec![x.data.ncols()];
            sizes.extend(&cfg.hidden);
            sizes.push(motor.data.ncols());
            let base = (kind == MethodKind::RNn).then(|| x.rbd_torque());
            let fit_target = match &base {
                Some(b) => &motor.data - b,
                None => motor.data.clone(),
            };
            let net = Mlp::new(&sizes, spec.seed)?.with_scaling(Scaling::from_data(&x.data, &fit_target))?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = spec.seed;
            let (net, loss_curve) = mlp::train(&net, &x.data, &motor.data, &train_cfg, base.as_ref())?;
            (Stage::Network { net, loss_curve }, None)
        }
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        stage1,
        stage2,
        residual: kind.residual(),
        provenance: ds.meta.provenance.clone(),
        features: x.names.clone(),
        targets,
    })
}

pub fn train_method(spec: &MethodSpec, ds: &Dataset) -> Result<TrainedModel> {
    train_one(spec, ds, &mut None)
}

/// Trains several methods, sharing one Gram accumulation among the sparse ones.
pub fn train_methods(specs: &[MethodSpec], ds: &Dataset) -> Result<Vec<TrainedModel>> {
    let mut sparse = None;
    specs.iter().map(|s| train_one(s, ds, &mut sparse)).collect()
}

/// Per-joint relative RMSE; joints with a zero target report the raw error RMS and a flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRmse {
    pub values: Vec<f64>,
    pub degenerate: Vec<bool>,
}

pub fn relative_rmse(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<RelativeRmse> {
    if pred.shape() != target.shape() || target.nrows() == 0 {
        return Err(Error::Dimension {
            what: "relative RMSE inputs",
            expected: target.nrows(),
            got: pred.nrows(),
        });
    }
    let n = target.nrows() as f64;
    let (values, degenerate) = (0..target.ncols())
        .map(|j| {
            let err = ((pred.column(j) - target.column(j)).norm_squared() / n).sqrt();
            let rms = (target.column(j).norm_squared() / n).sqrt();
            if rms > 0.0 {
                (err / rms, false)
            } else {
                (err, true)
            }
        })
        .unzip();
    Ok(RelativeRmse { values, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub method: MethodKind,
    pub train: RelativeRmse,
    pub test: RelativeRmse,
    /// One equation per joint for interpretable methods.
    pub equations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub joints: Vec<String>,
    pub methods: Vec<MethodScores>,
    /// Methods with the lowest 3-decimal score per joint.
    pub best_train: Vec<Vec<MethodKind>>,
    pub best_test: Vec<Vec<MethodKind>>,
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn best_per_joint(methods: &[MethodScores], pick: impl Fn(&MethodScores) -> &RelativeRmse, joints: usize) -> Vec<Vec<MethodKind>> {
    (0..joints)
        .map(|j| {
            let min = methods
                .iter()
                .map(|m| round3(pick(m).values[j]))
                .fold(f64::INFINITY, f64::min);
            methods
                .iter()
                .filter(|m| round3(pick(m).values[j]) == min)
                .map(|m| m.method)
                .collect()
        })
        .collect()
}

impl Report {
    pub fn build(models: &[TrainedModel], ds: &Dataset) -> Result<Report> {
        let mut methods = Vec::with_capacity(models.len());
        for m in models {
            if m.provenance != ds.meta.provenance {
                return Err(Error::Data(format!(
                    "{} model was trained on dataset {} but the report dataset is {}",
                    m.kind(),
                    m.provenance,
                    ds.meta.provenance
                )));
            }
            methods.push(MethodScores {
                method: m.kind(),
                train: relative_rmse(&m.predict(&ds.train.x)?, &ds.train.y.data)?,
                test: relative_rmse(&m.predict(&ds.test.x)?, &ds.test.y.data)?,
                equations: m.equations(4)?,
            });
        }
        methods.sort_by_key(|m| m.method);
        let joints = ds.meta.targets.len();
        Ok(Report {
            dataset: ds.meta.provenance.clone(),
            joints: (1..=joints).map(|j| j.to_string()).collect(),
            best_train: best_per_joint(&methods, |m| &m.train, joints),
            best_test: best_per_joint(&methods, |m| &m.test, joints),
            methods,
        })
    }

    pub fn scores(&self, kind: MethodKind) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.method == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Fixed-width tables with 3 decimals, best per joint starred, then the equations.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (title, best, pick) in [
            ("train", &self.best_train, (|m: &MethodScores| &m.train) as fn(&MethodScores) -> &RelativeRmse),
            ("test", &self.best_test, |m: &MethodScores| &m.test),
        ] {
            let _ = writeln!(s, "Relative RMSE per joint ({title})");
            let _ = write!(s, "{:<7}", "joint");
            for m in &self.methods {
                let _ = write!(s, "{:>12}", m.method.label());
            }
            s.push('\n');
            for (j, joint) in self.joints.iter().enumerate() {
                let _ = write!(s, "{joint:<7}");
                for m in &self.methods {
                    let mark = if best[j].contains(&m.method) { "*" } else { " " };
                    let r = pick(m);
                    let flag = if r.degenerate[j] { "!" } else { "" };
                    let _ = write!(s, "{:>11}{mark}", format!("{:.3}{flag}", r.values[j]));
                }
                s.push('\n');
            }
            s.push('\n');
        }
        for m in self.methods.iter().filter(|m| !m.equations.is_empty()) {
            let _ = writeln!(s, "{} equations", m.method.label());
            for e in &m.equations {
                let _ = writeln!(s, "  {e}");
            }
            s.push('\n');
        }
        s
    }
}
