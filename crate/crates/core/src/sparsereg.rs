//! Degree-2 polynomial libraries and sequentially thresholded least squares.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// One library column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Monomial {
    Bias,
    Linear(usize),
    Quadratic(usize, usize),
}

impl Monomial {
    #[inline]
    pub fn eval(self, row: &[f64]) -> f64 {
        match self {
            Monomial::Bias => 1.0,
            Monomial::Linear(i) => row[i],
            Monomial::Quadratic(i, j) => row[i] * row[j],
        }
    }

    pub fn name(self, inputs: &[String]) -> String {
        match self {
            Monomial::Bias => "1".into(),
            Monomial::Linear(i) => inputs[i].clone(),
            Monomial::Quadratic(i, j) if i == j => format!("{}^2", inputs[i]),
            Monomial::Quadratic(i, j) => format!("{}*{}", inputs[i], inputs[j]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyLibrary {
    pub inputs: Vec<String>,
    pub degree: u8,
    terms: Vec<Monomial>,
}

impl PolyLibrary {
    pub fn new(inputs: Vec<String>, degree: u8) -> Result<Self> {
        if !(1..=2).contains(&degree) {
            return Err(Error::Config(format!("library degree must be 1 or 2, got {degree}")));
        }
        let d = inputs.len();
        let mut terms = vec![Monomial::Bias];
        terms.extend((0..d).map(Monomial::Linear));
        if degree == 2 {
            for i in 0..d {
                terms.extend((i..d).map(|j| Monomial::Quadratic(i, j)));
            }
        }
        Ok(PolyLibrary { inputs, degree, terms })
    }

    /// Degree-2 library over `x1..xd`.
    pub fn quadratic(d: usize) -> Self {
        Self::new((1..=d).map(|i| format!("x{i}")).collect(), 2).expect("degree 2 is valid")
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.len()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name(&self.inputs)).collect()
    }

    pub fn expand(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("library input columns", self.input_dim(), x.ncols())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("library input contains non-finite values".into()));
        }
        let mut theta = DMatrix::zeros(x.nrows(), self.len());
        let mut row = vec![0.0; x.ncols()];
        for r in 0..x.nrows() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = x[(r, c)];
            }
            for (k, t) in self.terms.iter().enumerate() {
                theta[(r, k)] = t.eval(&row);
            }
        }
        Ok(theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StlsqConfig {
    pub threshold: f64,
    pub alpha: f64,
    pub max_iter: usize,
    /// Pose the ridge penalty and threshold on unit-RMS columns instead of original units.
    pub normalize: bool,
}

impl Default for StlsqConfig {
    fn default() -> Self {
        StlsqConfig {
            threshold: 0.01,
            alpha: 1e-4,
            max_iter: 100,
            normalize: false,
        }
    }
}

impl StlsqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::Config("threshold must be finite and non-negative".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config("ridge alpha must be finite and non-negative".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Columns whose RMS falls below this are treated as identically zero.
const DEGENERATE_RMS: f64 = 1e-10;
const BLOCK_ROWS: usize = 512;

/// `ΘᵀΘ`, `ΘᵀY` and the row count.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub rhs: DMatrix<f64>,
    pub rows: usize,
}

impl NormalEquations {
    pub fn from_theta(theta: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        check_dim("target rows", theta.nrows(), y.nrows())?;
        Ok(NormalEquations {
            gram: symmetric_gram(theta),
            rhs: theta.transpose() * y,
            rows: theta.nrows(),
        })
    }

    /// Accumulates over row blocks without materializing the full library matrix.
    pub fn accumulate(library: &PolyLibrary, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        check_dim("target rows", x.nrows(), y.nrows())?;
        check_dim("library input columns", library.input_dim(), x.ncols())?;
        let p = library.len();
        let m = y.ncols();
        let block = |s: usize| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            let len = BLOCK_ROWS.min(x.nrows() - s);
            let theta = library.expand(&x.rows(s, len).into_owned())?;
            let gram = symmetric_gram(&theta);
            Ok((gram, theta.transpose() * y.rows(s, len)))
        };
        // partials are summed in block order so the result does not depend on thread count
        let starts: Vec<usize> = (0..x.nrows()).step_by(BLOCK_ROWS).collect();
        let mut gram = DMatrix::zeros(p, p);
        let mut rhs = DMatrix::zeros(p, m);
        for wave in starts.chunks(rayon::current_num_threads().max(1)) {
            let partials: Vec<_> = wave.par_iter().map(|&s| block(s)).collect::<Result<_>>()?;
            for (g, r) in partials {
                gram += g;
                rhs += r;
            }
        }
        Ok(NormalEquations {
            gram,
            rhs,
            rows: x.nrows(),
        })
    }
}

/// `ΘᵀΘ` through a blocked product, with the upper triangle mirrored so it is exactly symmetric.
fn symmetric_gram(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = theta.transpose() * theta;
    let p = g.nrows();
    for b in 0..p {
        for a in b + 1..p {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// Raw STLSQ output: coefficients in original units, bias in row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StlsqFit {
    /// p × m.
    pub coef: DMatrix<f64>,
    pub scales: Vec<f64>,
    pub iterations: Vec<usize>,
}

/// STLSQ on an explicit library matrix. Column 0 must be the bias.
pub fn stlsq(theta: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &StlsqConfig) -> Result<StlsqFit> {
    stlsq_normal(&NormalEquations::from_theta(theta, y)?, cfg)
}

pub fn stlsq_normal(ne: &NormalEquations, cfg: &StlsqConfig) -> Result<StlsqFit> {
    cfg.validate()?;
    if ne.rows == 0 {
        return Err(Error::Data("no rows to fit".into()));
    }
    let p = ne.gram.nrows();
    let n = ne.rows as f64;
    let rms: Vec<f64> = (0..p).map(|i| (ne.gram[(i, i)].max(0.0) / n).sqrt()).collect();
    let usable: Vec<bool> = rms.iter().enumerate().map(|(i, &r)| i == 0 || r > DEGENERATE_RMS).collect();
    // the solve always runs on RMS-equilibrated columns; `normalize` only decides whether
    // the ridge penalty and threshold are posed in that scale or in original units
    let scales: Vec<f64> = rms
        .iter()
        .zip(&usable)
        .enumerate()
        .map(|(i, (&r, &u))| if i == 0 || !u { 1.0 } else { r })
        .collect();
    let (ridge, thresholds): (Vec<f64>, Vec<f64>) = scales
        .iter()
        .map(|&s| {
            if cfg.normalize {
                (cfg.alpha, cfg.threshold)
            } else {
                (cfg.alpha / (s * s), cfg.threshold * s)
            }
        })
        .unzip();
    let gs = DMatrix::from_fn(p, p, |i, j| ne.gram[(i, j)] / (scales[i] * scales[j]));
    let rs = DMatrix::from_fn(p, ne.rhs.ncols(), |i, k| ne.rhs[(i, k)] / scales[i]);
    let problem = Problem {
        gram: &gs,
        usable: &usable,
        ridge: &ridge,
        thresholds: &thresholds,
        max_iter: cfg.max_iter,
    };

    let per_output: Vec<(DVector<f64>, usize)> = (0..rs.ncols())
        .into_par_iter()
        .map(|k| problem.solve(&rs.column(k).into_owned()))
        .collect::<Result<_>>()?;
    let mut coef = DMatrix::zeros(p, rs.ncols());
    let mut iterations = Vec::with_capacity(rs.ncols());
    for (k, (w, it)) in per_output.into_iter().enumerate() {
        for i in 0..p {
            coef[(i, k)] = w[i] / scales[i];
        }
        iterations.push(it);
    }
    Ok(StlsqFit {
        coef,
        scales,
        iterations,
    })
}

struct Problem<'a> {
    gram: &'a DMatrix<f64>,
    usable: &'a [bool],
    ridge: &'a [f64],
    thresholds: &'a [f64],
    max_iter: usize,
}

impl Problem<'_> {
    /// Thresholded ridge iterations for one output; column 0 (bias) is never removed.
    fn solve(&self, r: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        let p = self.gram.nrows();
        let mut active: Vec<usize> = (0..p).filter(|&i| self.usable[i]).collect();
        let mut w = DVector::zeros(p);
        let mut iterations = self.max_iter;
        for it in 1..=self.max_iter {
            let sol = ridge_solve(self.gram, r, &active, self.ridge)?;
            w.fill(0.0);
            for (a, &i) in active.iter().enumerate() {
                w[i] = sol[a];
            }
            let kept: Vec<usize> = active
                .iter()
                .copied()
                .filter(|&i| i == 0 || w[i].abs() >= self.thresholds[i])
                .collect();
            if kept.len() == active.len() {
                iterations = it;
                break;
            }
            active = kept;
            if it == self.max_iter {
                // out of iterations: enforce the threshold on the last solve
                for i in 1..p {
                    if !active.contains(&i) {
                        w[i] = 0.0;
                    }
                }
            }
        }
        if active.len() == 1 {
            log::warn!("all library coefficients thresholded to zero; model reduces to a constant");
        }
        Ok((w, iterations))
    }
}

fn ridge_solve(g: &DMatrix<f64>, r: &DVector<f64>, active: &[usize], ridge: &[f64]) -> Result<DVector<f64>> {
    let k = active.len();
    let a = DMatrix::from_fn(k, k, |i, j| {
        g[(active[i], active[j])] + if i == j { ridge[active[i]] } else { 0.0 }
    });
    let b = DVector::from_fn(k, |i, _| r[active[i]]);
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(&b));
    }
    a.lu()
        .solve(&b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numeric("ridge system is singular; increase alpha".into()))
}

/// `Ŷ = Θ(X) Wᵀ + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLinearModel {
    pub library: PolyLibrary,
    pub outputs: Vec<String>,
    /// m × p, bias column always zero.
    #[serde(with = "triplets")]
    pub w: DMatrix<f64>,
    pub b: Vec<f64>,
    pub scales: Vec<f64>,
    pub config: StlsqConfig,
    pub iterations: Vec<usize>,
}

impl SparseLinearModel {
    pub fn fit(
        library: PolyLibrary,
        outputs: Vec<String>,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        cfg: &StlsqConfig,
    ) -> Result<Self> {
        check_dim("output names", y.ncols(), outputs.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("targets contain non-finite values".into()));
        }
        let ne = NormalEquations::accumulate(&library, x, y)?;
        let fit = stlsq_normal(&ne, cfg)?;
        Ok(Self::from_fit(library, outputs, fit, cfg.clone()))
    }

    pub fn from_fit(library: PolyLibrary, outputs: Vec<String>, fit: StlsqFit, config: StlsqConfig) -> Self {
        let m = fit.coef.ncols();
        let mut w = fit.coef.transpose();
        let b: Vec<f64> = (0..m).map(|k| w[(k, 0)]).collect();
        w.column_mut(0).fill(0.0);
        SparseLinearModel {
            library,
            outputs,
            w,
            b,
            scales: fit.scales,
            config,
            iterations: fit.iterations,
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("library input columns", self.library.input_dim(), x.ncols())?;
        let m = self.w.nrows();
        let terms = self.library.terms();
        let active: Vec<Vec<(Monomial, f64)>> = (0..m)
            .map(|k| {
                (0..terms.len())
                    .filter(|&i| self.w[(k, i)] != 0.0)
                    .map(|i| (terms[i], self.w[(k, i)]))
                    .collect()
            })
            .collect();
        let mut out = DMatrix::zeros(x.nrows(), m);
        let mut row = vec![0.0; x.ncols()];
        for r in 0..x.nrows() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = x[(r, c)];
            }
            for k in 0..m {
                out[(r, k)] = self.b[k] + active[k].iter().map(|(t, w)| w * t.eval(&row)).sum::<f64>();
            }
        }
        Ok(out)
    }

    /// Nonzero terms per output, largest magnitude first. The bias is reported in `b`.
    pub fn active_terms(&self) -> Vec<Vec<(String, f64)>> {
        let names = self.library.names();
        (0..self.w.nrows())
            .map(|k| {
                let mut terms: Vec<(String, f64)> = (0..names.len())
                    .filter(|&i| self.w[(k, i)] != 0.0)
                    .map(|i| (names[i].clone(), self.w[(k, i)]))
                    .collect();
                terms.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
                terms
            })
            .collect()
    }

    pub fn active_count(&self, output: usize) -> usize {
        self.w.row(output).iter().filter(|v| **v != 0.0).count()
    }

    /// Coefficient of the named term for one output.
    pub fn coefficient(&self, output: usize, term: &str) -> Option<f64> {
        self.library.names().iter().position(|n| n == term).map(|i| self.w[(output, i)])
    }

    pub fn render(&self, output: usize) -> String {
        let mut s = String::new();
        for (name, c) in &self.active_terms()[output] {
            if s.is_empty() {
                s = format!("{c}*{name}");
            } else if *c < 0.0 {
                s.push_str(&format!(" - {}*{name}", -c));
            } else {
                s.push_str(&format!(" + {c}*{name}"));
            }
        }
        let b = self.b[output];
        match (s.is_empty(), b) {
            (true, _) => format!("{b}"),
            (false, b) if b == 0.0 => s,
            (false, b) if b < 0.0 => format!("{s} - {}", -b),
            (false, b) => format!("{s} + {b}"),
        }
    }
}

mod triplets {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Sparse {
        rows: usize,
        cols: usize,
        entries: Vec<(usize, usize, f64)>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut entries = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    entries.push((r, c, m[(r, c)]));
                }
            }
        }
        Sparse {
            rows: m.nrows(),
            cols: m.ncols(),
            entries,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let sp = Sparse::deserialize(d)?;
        let mut m = DMatrix::zeros(sp.rows, sp.cols);
        for (r, c, v) in sp.entries {
            if r >= sp.rows || c >= sp.cols {
                return Err(serde::de::Error::custom(format!("entry ({r}, {c}) out of range")));
            }
            m[(r, c)] = v;
        }
        Ok(m)
    }
}
