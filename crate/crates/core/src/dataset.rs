//! Regressor construction, residual targets, train/test datasets and their persistence.
//!
//! The feature layout is fixed: `[q | q̇ | q̈ | q⃛ | τ_i | τ_c | τ_g]`, each block one
//! column per joint, so a seven-joint arm yields 49 columns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numdiff::{derive_chain, differentiate, DiffConfig};
use crate::provenance;
use crate::rbd::RobotModel;
use crate::sim::Rollout;

/// Feature blocks in column order.
pub const BLOCKS: [&str; 7] = ["q", "qd", "qdd", "qddd", "tau_i", "tau_c", "tau_g"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Q = 0,
    Qd = 1,
    Qdd = 2,
    Qddd = 3,
    TauI = 4,
    TauC = 5,
    TauG = 6,
}

pub fn feature_names(n: usize) -> Vec<String> {
    BLOCKS
        .iter()
        .flat_map(|b| (1..=n).map(move |j| format!("{b}{j}")))
        .collect()
}

pub fn target_names(n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("tau_m{j}")).collect()
}

/// Column index of `block` for joint `j` (0-based).
pub fn column(n: usize, block: Block, j: usize) -> usize {
    block as usize * n + j
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: DMatrix<f64>,
    pub names: Vec<String>,
}

impl FeatureMatrix {
    pub fn dof(&self) -> usize {
        self.names.len() / BLOCKS.len()
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    /// `τ_i + τ_c + τ_g` read back from the feature columns.
    pub fn rbd_torque(&self) -> DMatrix<f64> {
        let n = self.dof();
        let block = |b: Block| self.data.columns(b as usize * n, n);
        block(Block::TauI) + block(Block::TauC) + block(Block::TauG)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("feature columns", self.names.len(), self.data.ncols())?;
        if !self.names.len().is_multiple_of(BLOCKS.len()) || self.names != feature_names(self.dof()) {
            return Err(Error::Data("feature registry does not match the fixed layout".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Motor,
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub data: DMatrix<f64>,
    pub kind: TargetKind,
}

/// Features and motor-torque targets for one recorded trajectory.
///
/// `q̈` and `q⃛` are differentiated from the recorded `q̇`; the final state, which has no
/// torque, is dropped.
pub fn build_features(
    rollout: &Rollout,
    model: &RobotModel,
    diff: &DiffConfig,
) -> Result<(FeatureMatrix, TargetMatrix)> {
    rollout.validate()?;
    let n = model.dof();
    check_dim("rollout dof", n, rollout.dof())?;
    let len = rollout.len();
    if len < 5 {
        return Err(Error::Data(format!("rollout has {len} samples, need at least 5")));
    }
    let dt = mean_step(&rollout.t);
    let rows = len - 1;
    let mut x = DMatrix::zeros(rows, 7 * n);
    let mut y = DMatrix::zeros(rows, n);
    for j in 0..n {
        let qd: Vec<f64> = rollout.qd.iter().map(|v| v[j]).collect();
        let qdd = differentiate(&qd, dt, diff)?;
        let qddd = differentiate(&qdd, dt, diff)?;
        for k in 0..rows {
            x[(k, column(n, Block::Q, j))] = rollout.q[k][j];
            x[(k, column(n, Block::Qd, j))] = qd[k];
            x[(k, column(n, Block::Qdd, j))] = qdd[k];
            x[(k, column(n, Block::Qddd, j))] = qddd[k];
        }
    }
    for k in 0..rows {
        let q = &rollout.q[k];
        let qdd = DVector::from_fn(n, |j, _| x[(k, column(n, Block::Qdd, j))]);
        let tau_i = model.inertia_matrix(q)? * qdd;
        let tau_c = model.coriolis_torque(q, &rollout.qd[k])?;
        let tau_g = model.gravity_torque(q)?;
        for j in 0..n {
            x[(k, column(n, Block::TauI, j))] = tau_i[j];
            x[(k, column(n, Block::TauC, j))] = tau_c[j];
            x[(k, column(n, Block::TauG, j))] = tau_g[j];
            y[(k, j)] = rollout.tau_m[k][j];
        }
    }
    let features = FeatureMatrix {
        data: x,
        names: feature_names(n),
    };
    features
        .validate()
        .map_err(|e| Error::Numeric(format!("feature construction failed: {e}")))?;
    Ok((
        features,
        TargetMatrix {
            data: y,
            kind: TargetKind::Motor,
        },
    ))
}

/// `τ_m − (τ_i + τ_c + τ_g)` using the torque columns of `x`.
pub fn residual_targets(y: &TargetMatrix, x: &FeatureMatrix) -> Result<TargetMatrix> {
    if y.kind != TargetKind::Motor {
        return Err(Error::Data("targets are already residuals".into()));
    }
    check_dim("target rows", x.rows(), y.data.nrows())?;
    check_dim("target columns", x.dof(), y.data.ncols())?;
    Ok(TargetMatrix {
        data: &y.data - x.rbd_torque(),
        kind: TargetKind::Residual,
    })
}

fn mean_step(t: &[f64]) -> f64 {
    (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64
}

/// One split: stacked rows of several trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: FeatureMatrix,
    pub y: TargetMatrix,
    /// Source name and row count of each stacked trajectory.
    pub sources: Vec<(String, usize)>,
}

impl Split {
    pub fn stack(parts: Vec<(String, FeatureMatrix, TargetMatrix)>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("split has no trajectories".into()))?;
        let names = first.1.names.clone();
        let (cols, outs) = (first.1.data.ncols(), first.2.data.ncols());
        let rows: usize = parts.iter().map(|p| p.1.rows()).sum();
        let mut x = DMatrix::zeros(rows, cols);
        let mut y = DMatrix::zeros(rows, outs);
        let mut sources = Vec::new();
        let mut at = 0;
        for (name, fx, ty) in parts {
            if fx.names != names {
                return Err(Error::Data(format!("{name}: feature registry mismatch")));
            }
            let r = fx.rows();
            x.rows_mut(at, r).copy_from(&fx.data);
            y.rows_mut(at, r).copy_from(&ty.data);
            at += r;
            sources.push((name, r));
        }
        Ok(Split {
            x: FeatureMatrix { data: x, names },
            y: TargetMatrix {
                data: y,
                kind: TargetKind::Motor,
            },
            sources,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub provenance: String,
    pub model_hash: String,
    pub model_name: String,
    pub diff: DiffConfig,
    pub columns: Vec<String>,
    pub targets: Vec<String>,
    pub target_kind: TargetKind,
    pub train_sources: Vec<SourceRecord>,
    pub test_sources: Vec<SourceRecord>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub name: String,
    pub hash: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub meta: DatasetMeta,
}

/// A trajectory together with a name and the hash of the bytes it was read from.
#[derive(Debug, Clone)]
pub struct SourceRollout {
    pub name: String,
    pub hash: String,
    pub rollout: Rollout,
}

impl SourceRollout {
    pub fn new(name: impl Into<String>, rollout: Rollout) -> Self {
        let hash = provenance::hash_bytes(rollout.to_csv().as_bytes());
        SourceRollout {
            name: name.into(),
            hash,
            rollout,
        }
    }
}

impl Dataset {
    pub fn build(
        train: &[SourceRollout],
        test: &[SourceRollout],
        model: &RobotModel,
        diff: &DiffConfig,
    ) -> Result<Self> {
        diff.validate()?;
        for t in train {
            if test.iter().any(|s| s.name == t.name) {
                return Err(Error::Data(format!("{} appears in both splits", t.name)));
            }
        }
        let featurize = |set: &[SourceRollout]| -> Result<Split> {
            let parts = set
                .iter()
                .map(|s| {
                    let (x, y) = build_features(&s.rollout, model, diff)
                        .map_err(|e| Error::Data(format!("{}: {e}", s.name)))?;
                    Ok((s.name.clone(), x, y))
                })
                .collect::<Result<Vec<_>>>()?;
            Split::stack(parts)
        };
        let train_split = featurize(train)?;
        let test_split = featurize(test)?;
        let record = |set: &[SourceRollout], split: &Split| -> Vec<SourceRecord> {
            set.iter()
                .zip(&split.sources)
                .map(|(s, (_, rows))| SourceRecord {
                    name: s.name.clone(),
                    hash: s.hash.clone(),
                    rows: *rows,
                })
                .collect()
        };
        let n = model.dof();
        let model_hash = model.content_hash();
        let diff_json = serde_json::to_string(diff).expect("diff config serializes");
        let mut parts: Vec<(&str, &[u8])> = vec![("model", model_hash.as_bytes()), ("diff", diff_json.as_bytes())];
        for s in train {
            parts.push(("train", s.hash.as_bytes()));
        }
        for s in test {
            parts.push(("test", s.hash.as_bytes()));
        }
        let meta = DatasetMeta {
            provenance: provenance::hash_parts(parts),
            model_hash,
            model_name: model.name.clone(),
            diff: diff.clone(),
            columns: feature_names(n),
            targets: target_names(n),
            target_kind: TargetKind::Motor,
            train_sources: record(train, &train_split),
            test_sources: record(test, &test_split),
            notes: BTreeMap::new(),
        };
        Ok(Dataset {
            train: train_split,
            test: test_split,
            meta,
        })
    }

    pub fn dof(&self) -> usize {
        self.train.x.dof()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("X_train.csv", matrix_csv(&self.meta.columns, &self.train.x.data))?;
        write("Y_train.csv", matrix_csv(&self.meta.targets, &self.train.y.data))?;
        write("X_test.csv", matrix_csv(&self.meta.columns, &self.test.x.data))?;
        write("Y_test.csv", matrix_csv(&self.meta.targets, &self.test.y.data))?;
        write(
            "meta.json",
            serde_json::to_string_pretty(&self.meta).expect("meta serializes"),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let meta_text = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::Data(format!("no dataset at {}: {e}", dir.display())))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text).map_err(|e| Error::json(&meta_path, e))?;
        let read = |name: &str, expect: &[String]| -> Result<DMatrix<f64>> {
            let p = dir.join(name);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            parse_matrix_csv(&text, expect).map_err(|e| Error::Data(format!("{}: {e}", p.display())))
        };
        let split = |xname: &str, yname: &str, sources: &[SourceRecord]| -> Result<Split> {
            Ok(Split {
                x: FeatureMatrix {
                    data: read(xname, &meta.columns)?,
                    names: meta.columns.clone(),
                },
                y: TargetMatrix {
                    data: read(yname, &meta.targets)?,
                    kind: meta.target_kind,
                },
                sources: sources.iter().map(|s| (s.name.clone(), s.rows)).collect(),
            })
        };
        let train = split("X_train.csv", "Y_train.csv", &meta.train_sources)?;
        let test = split("X_test.csv", "Y_test.csv", &meta.test_sources)?;
        Ok(Dataset { train, test, meta })
    }
}

fn matrix_csv(header: &[String], m: &DMatrix<f64>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

fn parse_matrix_csv(text: &str, expect: &[String]) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    if header.len() != expect.len() || header.iter().zip(expect).any(|(a, b)| a.trim() != b) {
        return Err(Error::Data("header does not match the column registry".into()));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for line in lines {
        let before = values.len();
        for cell in line.split(',') {
            values.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("bad number {cell:?}: {e}")))?,
            );
        }
        check_dim("csv row width", expect.len(), values.len() - before)?;
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, expect.len(), &values))
}

/// Maps columns of external delimited-text files onto trajectory signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub t: String,
    pub q: Vec<String>,
    #[serde(default)]
    pub qd: Option<Vec<String>>,
    pub tau: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// File names for the test split; defaults to the last file in lexicographic order.
    #[serde(default)]
    pub test_files: Option<Vec<String>>,
}

fn default_delimiter() -> char {
    ','
}

impl ColumnMap {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read column map {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad column map {}: {e}", path.display())))
    }

    /// Identity map for files written by [`Rollout::to_csv`].
    pub fn rollout_csv(n: usize) -> Self {
        let names = |p: &str| (1..=n).map(|j| format!("{p}{j}")).collect::<Vec<_>>();
        ColumnMap {
            t: "t".into(),
            q: names("q"),
            qd: Some(names("qd")),
            tau: names("taum"),
            delimiter: ',',
            test_files: None,
        }
    }
}

const MAX_JITTER: f64 = 0.01;

/// Parses one external trajectory file.
///
/// When velocities are not mapped they are differentiated from positions. Rows whose
/// torque cells are all empty (such as the final state of a simulated rollout) must be
/// trailing; they contribute a state but no torque.
pub fn ingest_file(text: &str, map: &ColumnMap, dof: usize, diff: &DiffConfig) -> Result<Rollout> {
    check_dim("mapped position columns", dof, map.q.len())?;
    check_dim("mapped torque columns", dof, map.tau.len())?;
    if let Some(qd) = &map.qd {
        check_dim("mapped velocity columns", dof, qd.len())?;
    }
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Data("empty file".into()))?
        .split(map.delimiter)
        .map(|s| s.trim().to_string())
        .collect();
    let find = |name: &String| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name:?}")))
    };
    let t_col = find(&map.t)?;
    let q_cols = map.q.iter().map(find).collect::<Result<Vec<_>>>()?;
    let tau_cols = map.tau.iter().map(find).collect::<Result<Vec<_>>>()?;
    let qd_cols = map
        .qd
        .as_ref()
        .map(|c| c.iter().map(find).collect::<Result<Vec<_>>>())
        .transpose()?;

    let mut t = Vec::new();
    let mut q = Vec::new();
    let mut qd = Vec::new();
    let mut tau = Vec::new();
    for (line_no, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(map.delimiter).map(str::trim).collect();
        let num = |c: usize, name: &str| -> Result<Option<f64>> {
            let s = cells.get(c).copied().unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s
                .parse()
                .map_err(|e| Error::Data(format!("row {}: column {name:?}: {e}", line_no + 1)))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {}: column {name:?} is not finite", line_no + 1)));
            }
            Ok(Some(v))
        };
        let need = |c: usize, name: &str| -> Result<f64> {
            num(c, name)?.ok_or_else(|| Error::Data(format!("row {}: column {name:?} is empty", line_no + 1)))
        };
        t.push(need(t_col, &map.t)?);
        q.push(DVector::from_iterator(
            dof,
            q_cols.iter().zip(&map.q).map(|(c, n)| need(*c, n)).collect::<Result<Vec<_>>>()?,
        ));
        if let (Some(cols), Some(names)) = (&qd_cols, &map.qd) {
            qd.push(DVector::from_iterator(
                dof,
                cols.iter().zip(names).map(|(c, n)| need(*c, n)).collect::<Result<Vec<_>>>()?,
            ));
        }
        let torques = tau_cols
            .iter()
            .zip(&map.tau)
            .map(|(c, n)| num(*c, n))
            .collect::<Result<Vec<_>>>()?;
        if torques.iter().all(Option::is_none) {
            tau.push(None);
        } else {
            let vals = torques
                .into_iter()
                .zip(&map.tau)
                .map(|(v, n)| v.ok_or_else(|| Error::Data(format!("row {}: column {n:?} is empty", line_no + 1))))
                .collect::<Result<Vec<_>>>()?;
            tau.push(Some(DVector::from_vec(vals)));
        }
    }
    if t.len() < 5 {
        return Err(Error::Data(format!("only {} samples", t.len())));
    }
    let dt = mean_step(&t);
    if !(dt > 0.0) {
        return Err(Error::Data("timestamps are not increasing".into()));
    }
    let jitter = t
        .windows(2)
        .map(|w| ((w[1] - w[0]) - dt).abs() / dt)
        .fold(0.0, f64::max);
    if jitter > MAX_JITTER {
        return Err(Error::Data(format!(
            "sampling is not uniform: {:.2}% jitter exceeds {:.0}%",
            jitter * 100.0,
            MAX_JITTER * 100.0
        )));
    }
    // N + 1 states carry N torques; a torque on the final row is ignored
    if tau[..tau.len() - 1].iter().any(Option::is_none) {
        return Err(Error::Data("torque cells may only be empty on the final row".into()));
    }
    let tau_m: Vec<DVector<f64>> = tau.into_iter().take(t.len() - 1).map(|v| v.expect("checked")).collect();
    if qd.is_empty() {
        let mut cols = vec![vec![0.0; t.len()]; dof];
        for (j, col) in cols.iter_mut().enumerate() {
            let pos: Vec<f64> = q.iter().map(|v| v[j]).collect();
            *col = derive_chain(&pos, dt, diff)?.0;
        }
        qd = (0..t.len()).map(|k| DVector::from_fn(dof, |j, _| cols[j][k])).collect();
    }
    let rollout = Rollout {
        t,
        q,
        qd,
        tau_m,
        reference: None,
    };
    rollout.validate()?;
    Ok(rollout)
}

/// Reads every delimited-text file in `dir` (lexicographic order) and assigns splits.
pub fn ingest_external(
    dir: impl AsRef<Path>,
    map: &ColumnMap,
    model: &RobotModel,
    diff: &DiffConfig,
) -> Result<(Vec<SourceRollout>, Vec<SourceRollout>)> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("csv") | Some("txt") | Some("tsv")
                )
        })
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(Error::Data(format!(
            "{} holds {} trajectory files; need at least two",
            dir.display(),
            files.len()
        )));
    }
    let mut loaded = Vec::new();
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Data(format!("{name}: not UTF-8")))?;
        let rollout = ingest_file(&text, map, model.dof(), diff).map_err(|e| Error::Data(format!("{name}: {e}")))?;
        loaded.push(SourceRollout {
            name,
            hash: provenance::hash_bytes(&bytes),
            rollout,
        });
    }
    let test_names: Vec<String> = match &map.test_files {
        Some(names) => {
            for n in names {
                if !loaded.iter().any(|s| &s.name == n) {
                    return Err(Error::Data(format!("test file {n:?} not found in {}", dir.display())));
                }
            }
            names.clone()
        }
        None => vec![loaded.last().expect("at least two files").name.clone()],
    };
    let (test, train): (Vec<_>, Vec<_>) = loaded.into_iter().partition(|s| test_names.contains(&s.name));
    if train.is_empty() {
        return Err(Error::Data("no trajectories left for training".into()));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{PidController, PidGains};
    use crate::sim::{rollout, Reference, SimConfig};

    fn short_cfg() -> SimConfig {
        SimConfig {
            horizon: 0.5,
            ..SimConfig::default()
        }
    }

    #[test]
    fn layout_has_49_named_columns() {
        let names = feature_names(7);
        assert_eq!(names.len(), 49);
        assert_eq!(names[0], "q1");
        assert_eq!(names[7], "qd1");
        assert_eq!(names[48], "tau_g7");
        assert_eq!(column(7, Block::TauC, 2), 37);
    }

    #[test]
    fn static_rollout_features() {
        let model = RobotModel::franka7_synthetic();
        let cfg = short_cfg();
        let q0 = DVector::from_vec(vec![0.2, -0.3, 0.1, -1.8, 0.2, 1.4, 0.3]);
        let reference = Reference::constant(q0.clone(), cfg.steps() + 1);
        let mut pid = PidController::new(PidGains::default_for(7));
        let r = rollout(&model, &mut pid, &reference, &cfg).unwrap();
        let (x, y) = build_features(&r, &model, &DiffConfig::finite()).unwrap();
        assert_eq!(x.rows(), cfg.steps());
        let tg = model.gravity_torque(&q0).unwrap();
        for k in 0..x.rows() {
            for j in 0..7 {
                assert!(x.data[(k, column(7, Block::TauI, j))].abs() < 1e-9);
                assert!(x.data[(k, column(7, Block::TauC, j))].abs() < 1e-9);
                assert!((x.data[(k, column(7, Block::TauG, j))] - tg[j]).abs() < 1e-9);
                assert!((y.data[(k, j)] - tg[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn residual_guard_and_zero_residual() {
        let model = RobotModel::franka7_synthetic();
        let cfg = short_cfg();
        let t = cfg.time_grid();
        let reference = Reference {
            q: t.iter().map(|&t| DVector::from_element(7, 0.3 * t.sin())).collect(),
            qd: t.iter().map(|&t| DVector::from_element(7, 0.3 * t.cos())).collect(),
        };
        let mut pid = PidController::new(PidGains::default_for(7));
        let r = rollout(&model, &mut pid, &reference, &cfg).unwrap();
        let (x, _) = build_features(&r, &model, &DiffConfig::finite()).unwrap();
        let exact = TargetMatrix {
            data: x.rbd_torque(),
            kind: TargetKind::Motor,
        };
        let res = residual_targets(&exact, &x).unwrap();
        assert!(res.data.amax() == 0.0);
        assert!(residual_targets(&res, &x).is_err());
    }

    #[test]
    fn too_short_rollout_rejected() {
        let model = RobotModel::franka7_synthetic();
        let cfg = SimConfig {
            horizon: 0.006,
            ..SimConfig::default()
        };
        let reference = Reference::constant(DVector::zeros(7), cfg.steps() + 1);
        let mut pid = PidController::new(PidGains::default_for(7));
        let r = rollout(&model, &mut pid, &reference, &cfg).unwrap();
        assert!(build_features(&r, &model, &DiffConfig::finite()).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_provenance() {
        let model = RobotModel::franka7_synthetic();
        let cfg = short_cfg();
        let make = |amp: f64| {
            let t = cfg.time_grid();
            let reference = Reference {
                q: t.iter().map(|&t| DVector::from_element(7, amp * t.sin())).collect(),
                qd: t.iter().map(|&t| DVector::from_element(7, amp * t.cos())).collect(),
            };
            let mut pid = PidController::new(PidGains::default_for(7));
            rollout(&model, &mut pid, &reference, &cfg).unwrap()
        };
        let train = vec![SourceRollout::new("r0", make(0.2)), SourceRollout::new("r1", make(0.3))];
        let test = vec![SourceRollout::new("r2", make(0.1))];
        let ds = Dataset::build(&train, &test, &model, &DiffConfig::finite()).unwrap();
        assert_eq!(ds.train.x.rows(), 2 * cfg.steps());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let again = Dataset::build(&train, &test, &model, &DiffConfig::tvr()).unwrap();
        assert_ne!(again.meta.provenance, ds.meta.provenance);
        assert!(Dataset::build(&train, &train[..1], &model, &DiffConfig::finite()).is_err());
    }

    fn two_joint_file(rows: usize, drop_tau: bool) -> String {
        let mut s = String::from("time,p1,p2,v1,v2,u1,u2\n");
        for k in 0..rows {
            let t = k as f64 * 0.001;
            let tau = if drop_tau { ",".to_string() } else { format!("{},{}", t, -t) };
            s.push_str(&format!("{t},{},{},{},{},{tau}\n", t * t, t, 2.0 * t, 1.0));
        }
        s
    }

    fn two_joint_map() -> ColumnMap {
        ColumnMap {
            t: "time".into(),
            q: vec!["p1".into(), "p2".into()],
            qd: Some(vec!["v1".into(), "v2".into()]),
            tau: vec!["u1".into(), "u2".into()],
            delimiter: ',',
            test_files: None,
        }
    }

    #[test]
    fn ingest_reads_mapped_columns() {
        let r = ingest_file(&two_joint_file(10, false), &two_joint_map(), 2, &DiffConfig::finite()).unwrap();
        assert_eq!(r.len(), 10);
        assert_eq!(r.tau_m.len(), 9);
        assert_eq!(r.q[3][0], 0.003 * 0.003);
        assert_eq!(r.qd[3][0], 0.006);
        assert_eq!(r.tau_m[2][1], -0.002);
    }

    #[test]
    fn ingest_missing_column_named() {
        let mut map = two_joint_map();
        map.tau[1] = "torque_2".into();
        let err = ingest_file(&two_joint_file(10, false), &map, 2, &DiffConfig::finite()).unwrap_err();
        assert!(err.to_string().contains("torque_2"), "{err}");
    }

    #[test]
    fn ingest_rejects_jitter_and_nan() {
        let mut text = two_joint_file(10, false);
        text = text.replacen("0.005,", "0.0054,", 1);
        assert!(ingest_file(&text, &two_joint_map(), 2, &DiffConfig::finite()).is_err());
        let text = two_joint_file(10, false).replacen("0.002,", "NaN,", 1);
        assert!(ingest_file(&text, &two_joint_map(), 2, &DiffConfig::finite()).is_err());
    }

    #[test]
    fn ingest_derives_missing_velocity() {
        let mut map = two_joint_map();
        map.qd = None;
        let r = ingest_file(&two_joint_file(50, false), &map, 2, &DiffConfig::finite()).unwrap();
        for k in 0..50 {
            assert!((r.qd[k][0] - 2.0 * k as f64 * 0.001).abs() < 1e-9);
            assert!((r.qd[k][1] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ingest_directory_split_is_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.csv", "a.csv", "d.csv", "c.csv"] {
            std::fs::write(dir.path().join(name), two_joint_file(20, false)).unwrap();
        }
        let mut spec = RobotModel::franka7_synthetic().to_spec();
        spec.joints.truncate(2);
        let model = RobotModel::from_spec(&spec).unwrap();
        let (train, test) = ingest_external(dir.path(), &two_joint_map(), &model, &DiffConfig::finite()).unwrap();
        let names: Vec<_> = train.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["a.csv", "b.csv", "c.csv"]);
        assert_eq!(test[0].name, "d.csv");
    }
}
