//! Genetic-programming symbolic regression over `{+, −, ×}`.
//!
//! Individuals are expression trees. Every fitness evaluation refits the coefficients of the
//! top-level additive terms by least squares on the current batch and writes them back into
//! the tree, so evolution searches over term structure while constants stay optimal.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }

    fn precedence(self) -> u8 {
        match self {
            Op::Add | Op::Sub => 1,
            Op::Mul => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Var(usize),
    Const(f64),
    Bin(Op, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn var(i: usize) -> Self {
        Expr::Var(i)
    }

    pub fn constant(c: f64) -> Self {
        Expr::Const(c)
    }

    pub fn bin(op: Op, a: Expr, b: Expr) -> Self {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    pub fn add(a: Expr, b: Expr) -> Self {
        Self::bin(Op::Add, a, b)
    }

    pub fn sub(a: Expr, b: Expr) -> Self {
        Self::bin(Op::Sub, a, b)
    }

    pub fn mul(a: Expr, b: Expr) -> Self {
        Self::bin(Op::Mul, a, b)
    }

    /// Total node count.
    pub fn complexity(&self) -> usize {
        match self {
            Expr::Bin(_, a, b) => 1 + a.complexity() + b.complexity(),
            _ => 1,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Bin(_, a, b) => 1 + a.depth().max(b.depth()),
            _ => 1,
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Var(i) => Some(*i),
            Expr::Const(_) => None,
            Expr::Bin(_, a, b) => a.max_var().max(b.max_var()),
        }
    }

    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Const(c) = e {
                out.push(*c);
            }
        });
        out
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        if let Expr::Bin(_, a, b) = self {
            a.visit(f);
            b.visit(f);
        }
    }

    fn constants_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        fn walk<'a>(e: &'a mut Expr, out: &mut Vec<&'a mut f64>) {
            match e {
                Expr::Const(c) => out.push(c),
                Expr::Var(_) => {}
                Expr::Bin(_, a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
            }
        }
        walk(self, &mut out);
        out
    }

    /// Node `k` in preorder.
    fn node(&self, k: usize) -> &Expr {
        fn go<'a>(e: &'a Expr, k: &mut usize) -> Option<&'a Expr> {
            if *k == 0 {
                return Some(e);
            }
            *k -= 1;
            match e {
                Expr::Bin(_, a, b) => go(a, k).or_else(|| go(b, k)),
                _ => None,
            }
        }
        let mut k = k;
        go(self, &mut k).expect("node index in range")
    }

    fn node_mut(&mut self, k: usize) -> &mut Expr {
        fn go<'a>(e: &'a mut Expr, k: &mut usize) -> Option<&'a mut Expr> {
            if *k == 0 {
                return Some(e);
            }
            *k -= 1;
            match e {
                Expr::Bin(_, a, b) => match go(a, k) {
                    Some(n) => Some(n),
                    None => go(b, k),
                },
                _ => None,
            }
        }
        let mut k = k;
        go(self, &mut k).expect("node index in range")
    }

    pub fn eval_row(&self, row: &[f64]) -> f64 {
        match self {
            Expr::Var(i) => row[*i],
            Expr::Const(c) => *c,
            Expr::Bin(op, a, b) => op.apply(a.eval_row(row), b.eval_row(row)),
        }
    }

    /// Row-wise evaluation; rows with a non-finite result are NaN.
    pub fn evaluate(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        if let Some(i) = self.max_var() {
            if i >= x.ncols() {
                return Err(Error::Dimension {
                    what: "expression variable index",
                    expected: x.ncols(),
                    got: i + 1,
                });
            }
        }
        let cols = Columns::from_matrix(x);
        Ok(DVector::from_vec(self.eval_columns(&cols.data, cols.rows)))
    }

    fn eval_columns(&self, cols: &[Vec<f64>], n: usize) -> Vec<f64> {
        let mut out = self.eval_raw(cols, n);
        for v in out.iter_mut() {
            if !v.is_finite() {
                *v = f64::NAN;
            }
        }
        out
    }

    fn eval_raw(&self, cols: &[Vec<f64>], n: usize) -> Vec<f64> {
        match self {
            Expr::Var(i) => cols[*i].clone(),
            Expr::Const(c) => vec![*c; n],
            Expr::Bin(op, a, b) => {
                if let Expr::Const(c) = a.as_ref() {
                    let mut vb = b.eval_raw(cols, n);
                    for v in vb.iter_mut() {
                        *v = op.apply(*c, *v);
                    }
                    return vb;
                }
                let mut va = a.eval_raw(cols, n);
                match b.as_ref() {
                    Expr::Const(c) => va.iter_mut().for_each(|v| *v = op.apply(*v, *c)),
                    Expr::Var(j) => va.iter_mut().zip(&cols[*j]).for_each(|(v, w)| *v = op.apply(*v, *w)),
                    _ => {
                        let vb = b.eval_raw(cols, n);
                        va.iter_mut().zip(&vb).for_each(|(v, w)| *v = op.apply(*v, *w));
                    }
                }
                va
            }
        }
    }

    /// Structural key; constants are keyed by bit pattern.
    fn key(&self, out: &mut String) {
        match self {
            Expr::Var(i) => {
                let _ = write!(out, "v{i}");
            }
            Expr::Const(c) => {
                let _ = write!(out, "c{:x}", c.to_bits());
            }
            Expr::Bin(op, a, b) => {
                out.push('(');
                out.push(op.symbol());
                a.key(out);
                out.push(' ');
                b.key(out);
                out.push(')');
            }
        }
    }

    fn key_string(&self) -> String {
        let mut s = String::new();
        self.key(&mut s);
        s
    }

    /// Constant folding, algebraic identities and constant-first products.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Bin(op, a, b) => simplify_bin(*op, a.simplify(), b.simplify()),
            e => e.clone(),
        }
    }

    /// Infix text using feature names. Negative constants are parenthesized.
    pub fn render(&self, names: &[String]) -> Result<String> {
        let mut s = String::new();
        self.render_into(names, &mut s, None)?;
        Ok(s)
    }

    /// Like [`render`](Self::render) with constants rounded to `digits` significant digits.
    pub fn render_rounded(&self, names: &[String], digits: usize) -> Result<String> {
        let mut s = String::new();
        self.render_into(names, &mut s, Some(digits))?;
        Ok(s)
    }

    fn render_into(&self, names: &[String], out: &mut String, digits: Option<usize>) -> Result<()> {
        match self {
            Expr::Var(i) => {
                let name = names.get(*i).ok_or_else(|| Error::Dimension {
                    what: "feature registry",
                    expected: i + 1,
                    got: names.len(),
                })?;
                out.push_str(name);
            }
            Expr::Const(c) => {
                let text = match digits {
                    Some(d) => format_sig(*c, d),
                    None => format!("{c:?}"),
                };
                if text.starts_with('-') {
                    let _ = write!(out, "({text})");
                } else {
                    out.push_str(&text);
                }
            }
            Expr::Bin(op, a, b) => {
                let p = op.precedence();
                let wrap_left = matches!(a.as_ref(), Expr::Bin(o, _, _) if o.precedence() < p);
                let wrap_right = matches!(b.as_ref(), Expr::Bin(o, _, _) if o.precedence() <= p);
                render_child(a, names, out, digits, wrap_left)?;
                match op {
                    Op::Mul => out.push('*'),
                    _ => {
                        let _ = write!(out, " {} ", op.symbol());
                    }
                }
                render_child(b, names, out, digits, wrap_right)?;
            }
        }
        Ok(())
    }

    /// Parses infix text produced by [`render`](Self::render).
    pub fn parse(text: &str, names: &[String]) -> Result<Expr> {
        let mut p = Parser {
            tokens: tokenize(text)?,
            pos: 0,
            names,
        };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Data(format!("unexpected trailing input in {text:?}")));
        }
        Ok(e)
    }
}

fn render_child(e: &Expr, names: &[String], out: &mut String, digits: Option<usize>, wrap: bool) -> Result<()> {
    if wrap {
        out.push('(');
    }
    e.render_into(names, out, digits)?;
    if wrap {
        out.push(')');
    }
    Ok(())
}

pub(crate) fn format_sig(c: f64, digits: usize) -> String {
    if c == 0.0 || !c.is_finite() {
        return format!("{c:?}");
    }
    let exp = c.abs().log10().floor() as i32;
    if !(-4..=6).contains(&exp) {
        return format!("{:.*e}", digits.saturating_sub(1), c);
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{c:.decimals$}")
}

fn simplify_bin(op: Op, a: Expr, b: Expr) -> Expr {
    use Expr::{Bin, Const};
    match (op, a, b) {
        (op, Const(x), Const(y)) => Const(op.apply(x, y)),
        (Op::Add, Const(z), e) | (Op::Add, e, Const(z)) | (Op::Sub, e, Const(z)) if z == 0.0 => e,
        (Op::Mul, Const(o), e) | (Op::Mul, e, Const(o)) if o == 1.0 => e,
        (Op::Mul, Const(z), _) | (Op::Mul, _, Const(z)) if z == 0.0 => Const(0.0),
        (Op::Sub, a, b) if a == b => Const(0.0),
        // constants lead products and trail sums
        (Op::Mul, e, Const(c)) => simplify_bin(Op::Mul, Const(c), e),
        (Op::Mul, Const(c), Bin(Op::Mul, inner, rest)) if matches!(*inner, Const(_)) => {
            let Const(d) = *inner else { unreachable!() };
            simplify_bin(Op::Mul, Const(c * d), *rest)
        }
        (Op::Add, Const(c), e) => simplify_bin(Op::Add, e, Const(c)),
        (Op::Add, Bin(Op::Add, e, inner), Const(c)) if matches!(*inner, Const(_)) => {
            let Const(d) = *inner else { unreachable!() };
            simplify_bin(Op::Add, *e, Const(d + c))
        }
        (op, a, b) => Expr::bin(op, a, b),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '(' {
            out.push(Token::Open);
            i += 1;
        } else if c == ')' {
            out.push(Token::Close);
            i += 1;
        } else if "+-*".contains(c) {
            out.push(Token::Op(c));
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v: f64 = s.parse().map_err(|_| Error::Data(format!("bad number {s:?}")))?;
            out.push(Token::Num(v));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Token::Ident(chars[start..i].iter().collect()));
        } else {
            return Err(Error::Data(format!("unexpected character {c:?} in expression")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    names: &'a [String],
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut e = self.term()?;
        while let Some(Token::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            e = Expr::bin(if c == '+' { Op::Add } else { Op::Sub }, e, rhs);
        }
        Ok(e)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut e = self.factor()?;
        while let Some(Token::Op('*')) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            e = Expr::mul(e, rhs);
        }
        Ok(e)
    }

    fn factor(&mut self) -> Result<Expr> {
        let tok = self
            .peek()
            .cloned()
            .ok_or_else(|| Error::Data("unexpected end of expression".into()))?;
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Expr::Const(v)),
            Token::Ident(name) => self
                .names
                .iter()
                .position(|n| *n == name)
                .map(Expr::Var)
                .ok_or_else(|| Error::Data(format!("unknown feature {name:?}"))),
            Token::Open => {
                let e = self.expr()?;
                match self.peek() {
                    Some(Token::Close) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => Err(Error::Data("missing closing parenthesis".into())),
                }
            }
            Token::Op('-') => match self.peek().cloned() {
                Some(Token::Num(v)) => {
                    self.pos += 1;
                    Ok(Expr::Const(-v))
                }
                _ => Ok(Expr::mul(Expr::Const(-1.0), self.factor()?)),
            },
            t => Err(Error::Data(format!("unexpected token {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SymRegConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover: f64,
    pub point_mutation: f64,
    pub constant_mutation: f64,
    pub hoist_mutation: f64,
    /// Adds a random term or wraps a node in a product.
    pub insert_mutation: f64,
    /// Replaces a binary node by one of its children.
    pub delete_mutation: f64,
    pub max_complexity: usize,
    pub max_depth: usize,
    /// Fitness is `ln(relative MSE) + parsimony × complexity`.
    pub parsimony: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub restarts: usize,
    /// Stop a restart after this many generations without front improvement.
    pub patience: usize,
    pub elites: usize,
    /// Golden-section iterations per embedded constant during refinement.
    pub refine_iterations: usize,
}

impl Default for SymRegConfig {
    fn default() -> Self {
        SymRegConfig {
            population: 500,
            generations: 200,
            tournament: 7,
            crossover: 0.7,
            point_mutation: 0.2,
            constant_mutation: 0.3,
            hoist_mutation: 0.05,
            insert_mutation: 0.2,
            delete_mutation: 0.1,
            max_complexity: 30,
            max_depth: 10,
            parsimony: 0.02,
            batch_size: 10_000,
            seed: 0,
            restarts: 4,
            patience: 20,
            elites: 10,
            refine_iterations: 50,
        }
    }
}

impl SymRegConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("crossover", self.crossover),
            ("point_mutation", self.point_mutation),
            ("constant_mutation", self.constant_mutation),
            ("hoist_mutation", self.hoist_mutation),
            ("insert_mutation", self.insert_mutation),
            ("delete_mutation", self.delete_mutation),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.population < 2 || self.tournament == 0 || self.batch_size == 0 || self.restarts == 0 {
            return Err(Error::Config(
                "population ≥ 2, tournament ≥ 1, batch_size ≥ 1 and restarts ≥ 1 are required".into(),
            ));
        }
        if self.max_complexity < 1 || self.max_depth < 1 {
            return Err(Error::Config("max_complexity and max_depth must be positive".into()));
        }
        if !(self.parsimony.is_finite() && self.parsimony >= 0.0) {
            return Err(Error::Config("parsimony must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub complexity: usize,
    pub mse: f64,
    pub expr: Expr,
}

/// Best expression per complexity with MSE strictly decreasing in complexity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    entries: Vec<FrontEntry>,
}

impl ParetoFront {
    pub fn entries(&self) -> &[FrontEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best_mse(&self) -> f64 {
        self.entries.last().map_or(f64::INFINITY, |e| e.mse)
    }

    /// Inserts when no simpler-or-equal entry is at least as accurate; returns whether kept.
    pub fn insert(&mut self, expr: Expr, mse: f64) -> bool {
        if !mse.is_finite() {
            return false;
        }
        let complexity = expr.complexity();
        if self.entries.iter().any(|e| e.complexity <= complexity && e.mse <= mse) {
            return false;
        }
        self.entries.retain(|e| !(e.complexity >= complexity && e.mse >= mse));
        let at = self.entries.partition_point(|e| e.complexity < complexity);
        self.entries.insert(at, FrontEntry { complexity, mse, expr });
        true
    }

    pub fn merge(&mut self, other: &ParetoFront) {
        for e in &other.entries {
            self.insert(e.expr.clone(), e.mse);
        }
    }

    /// Entry with the largest log-loss drop per unit complexity; ties go to lower complexity.
    pub fn select(&self) -> Option<&FrontEntry> {
        let mut chosen: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let score = if i == 0 {
                0.0
            } else {
                let prev = &self.entries[i - 1];
                (ln_floor(prev.mse) - ln_floor(e.mse)) / (e.complexity - prev.complexity) as f64
            };
            if chosen.is_none_or(|(_, s)| score > s + 1e-12 * s.abs()) {
                chosen = Some((i, score));
            }
        }
        chosen.map(|(i, _)| &self.entries[i])
    }
}

fn ln_floor(x: f64) -> f64 {
    x.max(1e-300).ln()
}

/// Column-major copy of a feature matrix.
struct Columns {
    data: Vec<Vec<f64>>,
    rows: usize,
}

impl Columns {
    fn from_matrix(x: &DMatrix<f64>) -> Self {
        Columns {
            data: (0..x.ncols()).map(|c| x.column(c).iter().copied().collect()).collect(),
            rows: x.nrows(),
        }
    }

    fn gather(&self, idx: &[usize]) -> Columns {
        Columns {
            data: self.data.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect(),
            rows: idx.len(),
        }
    }
}

/// Additive term: coefficient times an optional non-constant product.
#[derive(Debug, Clone)]
struct Term {
    coef: f64,
    rest: Option<Expr>,
}

fn split_terms(e: &Expr, sign: f64, out: &mut Vec<Term>) {
    match e {
        Expr::Bin(Op::Add, a, b) => {
            split_terms(a, sign, out);
            split_terms(b, sign, out);
        }
        Expr::Bin(Op::Sub, a, b) => {
            split_terms(a, sign, out);
            split_terms(b, -sign, out);
        }
        _ => {
            let mut coef = sign;
            let mut factors = Vec::new();
            flatten_product(e, &mut coef, &mut factors);
            let rest = factors.into_iter().reduce(Expr::mul);
            out.push(Term { coef, rest });
        }
    }
}

fn flatten_product(e: &Expr, coef: &mut f64, factors: &mut Vec<Expr>) {
    match e {
        Expr::Bin(Op::Mul, a, b) => {
            flatten_product(a, coef, factors);
            flatten_product(b, coef, factors);
        }
        Expr::Const(c) => *coef *= c,
        other => factors.push(other.clone()),
    }
}

fn join_terms(terms: &[Term]) -> Expr {
    let term_expr = |t: &Term| match &t.rest {
        None => Expr::Const(t.coef),
        Some(r) if t.coef == 1.0 => r.clone(),
        Some(r) => Expr::mul(Expr::Const(t.coef), r.clone()),
    };
    terms
        .iter()
        .map(term_expr)
        .reduce(Expr::add)
        .unwrap_or(Expr::Const(0.0))
}

/// Distinct additive terms of `e` with duplicates merged, intercept first if present.
fn distinct_terms(e: &Expr) -> Vec<Term> {
    let mut raw = Vec::new();
    split_terms(e, 1.0, &mut raw);
    let mut out: Vec<Term> = Vec::new();
    let mut keys: Vec<Option<String>> = Vec::new();
    for t in raw {
        let key = t.rest.as_ref().map(Expr::key_string);
        match keys.iter().position(|k| *k == key) {
            Some(i) => out[i].coef += t.coef,
            None => {
                keys.push(key);
                out.push(t);
            }
        }
    }
    out
}

/// Least squares for the term coefficients given Gram `a` and right-hand side `b`.
fn solve_small(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let m = a.nrows();
    let jitter = 1e-12 * (0..m).map(|i| a[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let reg = a + DMatrix::identity(m, m) * jitter;
    let x = reg.cholesky()?.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Refits term coefficients on full columns and returns the rewritten expression.
fn refit_full(e: &Expr, cols: &Columns, y: &[f64]) -> Expr {
    let terms = distinct_terms(e);
    let vecs: Vec<Vec<f64>> = terms
        .iter()
        .map(|t| match &t.rest {
            None => vec![1.0; cols.rows],
            Some(r) => r.eval_columns(&cols.data, cols.rows),
        })
        .collect();
    if vecs.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return e.clone();
    }
    let m = terms.len();
    let a = DMatrix::from_fn(m, m, |i, j| dot(&vecs[i], &vecs[j]));
    let b = DVector::from_fn(m, |i, _| dot(&vecs[i], y));
    match solve_small(&a, &b) {
        Some(w) => {
            let rebuilt: Vec<Term> = terms
                .into_iter()
                .zip(w.iter())
                .map(|(t, &c)| Term { coef: c, rest: t.rest })
                .collect();
            join_terms(&rebuilt)
        }
        None => e.clone(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mse_of(e: &Expr, cols: &Columns, y: &[f64]) -> f64 {
    let pred = e.eval_columns(&cols.data, cols.rows);
    let mut s = 0.0;
    for (p, t) in pred.iter().zip(y) {
        if !p.is_finite() {
            return f64::INFINITY;
        }
        s += (p - t).powi(2);
    }
    s / y.len().max(1) as f64
}

/// Per-generation cache of term vectors and their inner products on the batch.
struct TermCache<'a> {
    cols: &'a Columns,
    y: &'a [f64],
    ids: HashMap<String, usize>,
    vecs: Vec<Option<Vec<f64>>>,
    ydot: Vec<f64>,
    dots: HashMap<(usize, usize), f64>,
}

impl<'a> TermCache<'a> {
    fn new(cols: &'a Columns, y: &'a [f64]) -> Self {
        TermCache {
            cols,
            y,
            ids: HashMap::new(),
            vecs: Vec::new(),
            ydot: Vec::new(),
            dots: HashMap::new(),
        }
    }

    /// Id of the term vector; `None` when it has non-finite entries.
    fn id(&mut self, rest: &Option<Expr>) -> Option<usize> {
        let key = rest.as_ref().map_or_else(|| "1".to_string(), Expr::key_string);
        if let Some(&id) = self.ids.get(&key) {
            return self.vecs[id].as_ref().map(|_| id);
        }
        let v = match rest {
            None => vec![1.0; self.cols.rows],
            Some(r) => r.eval_columns(&self.cols.data, self.cols.rows),
        };
        let id = self.vecs.len();
        self.ids.insert(key, id);
        if v.iter().all(|x| x.is_finite()) {
            self.ydot.push(dot(&v, self.y));
            self.vecs.push(Some(v));
            Some(id)
        } else {
            self.ydot.push(0.0);
            self.vecs.push(None);
            None
        }
    }

    fn dot(&mut self, i: usize, j: usize) -> f64 {
        let k = (i.min(j), i.max(j));
        if let Some(&d) = self.dots.get(&k) {
            return d;
        }
        let d = dot(
            self.vecs[k.0].as_ref().expect("finite term"),
            self.vecs[k.1].as_ref().expect("finite term"),
        );
        self.dots.insert(k, d);
        d
    }
}

#[derive(Debug, Clone)]
struct Individual {
    expr: Expr,
    mse: f64,
    fitness: f64,
}

struct Engine<'a> {
    cfg: &'a SymRegConfig,
    n_vars: usize,
    full: &'a Columns,
    y: &'a [f64],
    var_y: f64,
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

impl Engine<'_> {
    fn random_leaf(&self, rng: &mut ChaCha8Rng) -> Expr {
        if rng.random_bool(0.85) {
            Expr::Var(rng.random_range(0..self.n_vars))
        } else {
            Expr::Const(rng.random_range(-2.0..2.0))
        }
    }

    fn random_op(rng: &mut ChaCha8Rng) -> Op {
        match rng.random_range(0..3) {
            0 => Op::Add,
            1 => Op::Sub,
            _ => Op::Mul,
        }
    }

    fn random_tree(&self, depth: usize, full: bool, rng: &mut ChaCha8Rng) -> Expr {
        if depth <= 1 || (!full && rng.random_bool(0.3)) {
            return self.random_leaf(rng);
        }
        Expr::bin(
            Self::random_op(rng),
            self.random_tree(depth - 1, full, rng),
            self.random_tree(depth - 1, full, rng),
        )
    }

    /// Evaluates with refit coefficients; returns the rewritten expression.
    fn evaluate(&self, expr: Expr, cache: &mut TermCache) -> Individual {
        let fail = |expr| Individual {
            expr,
            mse: f64::INFINITY,
            fitness: f64::INFINITY,
        };
        let terms = distinct_terms(&expr);
        let mut ids = Vec::with_capacity(terms.len());
        for t in &terms {
            match cache.id(&t.rest) {
                Some(id) => ids.push(id),
                None => return fail(expr),
            }
        }
        let m = ids.len();
        let a = DMatrix::from_fn(m, m, |i, j| cache.dot(ids[i], ids[j]));
        let b = DVector::from_fn(m, |i, _| cache.ydot[ids[i]]);
        let n = cache.cols.rows as f64;
        let yy = dot(cache.y, cache.y);
        let (expr, w) = match solve_small(&a, &b) {
            Some(w) => {
                let rebuilt: Vec<Term> = terms
                    .iter()
                    .zip(w.iter())
                    .map(|(t, &c)| Term { coef: c, rest: t.rest.clone() })
                    .collect();
                (join_terms(&rebuilt), w)
            }
            None => (expr, DVector::from_iterator(m, terms.iter().map(|t| t.coef))),
        };
        let sse = (yy - 2.0 * w.dot(&b) + (a * &w).dot(&w)).max(0.0);
        let mse = sse / n;
        let complexity = expr.complexity();
        if complexity > self.cfg.max_complexity || expr.depth() > self.cfg.max_depth || !mse.is_finite() {
            return fail(expr);
        }
        let fitness = ln_floor(mse / self.var_y) + self.cfg.parsimony * complexity as f64;
        Individual { expr, mse, fitness }
    }

    fn tournament<'p>(&self, pop: &'p [Individual], rng: &mut ChaCha8Rng) -> &'p Individual {
        let mut best = rng.random_range(0..pop.len());
        for _ in 1..self.cfg.tournament {
            let c = rng.random_range(0..pop.len());
            if pop[c].fitness < pop[best].fitness || (pop[c].fitness == pop[best].fitness && c < best) {
                best = c;
            }
        }
        &pop[best]
    }

    fn offspring(&self, pop: &[Individual], rng: &mut ChaCha8Rng) -> Expr {
        let cfg = self.cfg;
        let parent = self.tournament(pop, rng).expr.clone();
        let mut child = parent.clone();
        if rng.random_bool(cfg.crossover) {
            let donor = &self.tournament(pop, rng).expr;
            let piece = donor.node(rng.random_range(0..donor.complexity())).clone();
            let at = rng.random_range(0..child.complexity());
            *child.node_mut(at) = piece;
        }
        if rng.random_bool(cfg.point_mutation) {
            let at = rng.random_range(0..child.complexity());
            let node = child.node_mut(at);
            match node {
                Expr::Bin(op, _, _) => *op = Self::random_op(rng),
                _ => *node = self.random_leaf(rng),
            }
        }
        if rng.random_bool(cfg.constant_mutation) {
            let mut consts = child.constants_mut();
            if !consts.is_empty() {
                let k = rng.random_range(0..consts.len());
                let c = &mut consts[k];
                if rng.random_bool(0.1) {
                    **c = rng.random_range(-2.0..2.0);
                } else {
                    let g: f64 = rng.sample(StandardNormal);
                    **c *= 1.0 + 0.1 * g;
                }
            }
        }
        if rng.random_bool(cfg.insert_mutation) {
            if rng.random_bool(0.5) {
                let term = self.random_tree(rng.random_range(1..=2), false, rng);
                child = Expr::bin(if rng.random_bool(0.5) { Op::Add } else { Op::Sub }, child, term);
            } else {
                let at = rng.random_range(0..child.complexity());
                let node = child.node_mut(at);
                let inner = std::mem::replace(node, Expr::Const(0.0));
                *node = Expr::bin(Self::random_op(rng), inner, self.random_leaf(rng));
            }
        }
        if rng.random_bool(cfg.delete_mutation) {
            let at = rng.random_range(0..child.complexity());
            let node = child.node_mut(at);
            if let Expr::Bin(_, a, b) = node {
                *node = if rng.random_bool(0.5) { (**a).clone() } else { (**b).clone() };
            }
        }
        if rng.random_bool(cfg.hoist_mutation) {
            child = child.node(rng.random_range(0..child.complexity())).clone();
        }
        if child.complexity() > cfg.max_complexity || child.depth() > cfg.max_depth {
            parent
        } else {
            child
        }
    }

    fn batch(&self, rng: &mut ChaCha8Rng) -> (Columns, Vec<f64>) {
        let n = self.full.rows;
        if n <= self.cfg.batch_size {
            return (
                Columns {
                    data: self.full.data.clone(),
                    rows: n,
                },
                self.y.to_vec(),
            );
        }
        let mut idx = sample(rng, n, self.cfg.batch_size).into_vec();
        idx.sort_unstable();
        let y = idx.iter().map(|&i| self.y[i]).collect();
        (self.full.gather(&idx), y)
    }

    fn run(&self, restart: usize) -> ParetoFront {
        let cfg = self.cfg;
        let mut front = ParetoFront::default();
        let mut tried: HashSet<String> = HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, restart as u64]));
        let (cols, yb) = self.batch(&mut rng);
        let mut cache = TermCache::new(&cols, &yb);
        let mut pop: Vec<Individual> = (0..cfg.population)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, restart as u64, u64::MAX, i as u64]));
                let depth = 2 + i % 4;
                let tree = self.random_tree(depth, i % 2 == 0, &mut r);
                self.evaluate(tree, &mut cache)
            })
            .collect();
        self.admit(&pop, &mut front, &mut tried);
        let mut best = front.best_mse();
        let mut stale = 0;
        for gen in 0..cfg.generations {
            let mut grng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, restart as u64, gen as u64]));
            let (cols, yb) = self.batch(&mut grng);
            let mut cache = TermCache::new(&cols, &yb);
            let mut order: Vec<usize> = (0..pop.len()).collect();
            order.sort_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness).then(a.cmp(&b)));
            let elites = cfg.elites.min(pop.len());
            let mut next: Vec<Individual> = order[..elites].iter().map(|&i| pop[i].clone()).collect();
            for i in elites..cfg.population {
                let mut r = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, restart as u64, gen as u64, i as u64]));
                let child = self.offspring(&pop, &mut r);
                next.push(self.evaluate(child, &mut cache));
            }
            pop = next;
            self.admit(&pop[elites..], &mut front, &mut tried);
            let now = front.best_mse();
            if now < best * (1.0 - 1e-6) {
                best = now;
                stale = 0;
            } else {
                stale += 1;
            }
            if stale >= cfg.patience || best <= 1e-28 * self.var_y.max(1e-300) {
                log::debug!("restart {restart} stopped after {} generations", gen + 1);
                break;
            }
        }
        front
    }

    /// Full-data refit and insertion of the most promising candidate per complexity.
    fn admit(&self, pop: &[Individual], front: &mut ParetoFront, tried: &mut HashSet<String>) {
        let mut best_at: HashMap<usize, &Individual> = HashMap::new();
        for ind in pop.iter().filter(|i| i.mse.is_finite()) {
            let c = ind.expr.complexity();
            match best_at.get(&c) {
                Some(b) if b.mse <= ind.mse => {}
                _ => {
                    best_at.insert(c, ind);
                }
            }
        }
        let mut levels: Vec<usize> = best_at.keys().copied().collect();
        levels.sort_unstable();
        for c in levels {
            let ind = best_at[&c];
            let bound = front
                .entries()
                .iter()
                .filter(|e| e.complexity <= c)
                .map(|e| e.mse)
                .fold(f64::INFINITY, f64::min);
            if ind.mse >= bound {
                continue;
            }
            let mut key = String::new();
            for t in distinct_terms(&ind.expr) {
                key.push('|');
                if let Some(r) = &t.rest {
                    r.key(&mut key);
                }
            }
            if !tried.insert(key) {
                continue;
            }
            let refit = refit_full(&ind.expr, self.full, self.y);
            let mse = mse_of(&refit, self.full, self.y);
            front.insert(refit, mse);
        }
    }
}

/// Evolves expressions for `y` over the columns of `x`; returns the merged front.
pub fn fit_symbolic(x: &DMatrix<f64>, y: &[f64], cfg: &SymRegConfig) -> Result<ParetoFront> {
    cfg.validate()?;
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::Dimension {
            what: "symbolic regression rows",
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("symbolic regression inputs must be finite".into()));
    }
    let full = Columns::from_matrix(x);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var_y = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
    let engine = Engine {
        cfg,
        n_vars: x.ncols(),
        full: &full,
        y,
        var_y: var_y.max(1e-300),
    };
    let mut front = ParetoFront::default();
    front.insert(Expr::Const(mean), mse_of(&Expr::Const(mean), &full, y));
    if var_y <= 1e-24 * mean.abs().max(1.0).powi(2) {
        return Ok(front);
    }
    for r in 0..cfg.restarts {
        front.merge(&engine.run(r));
    }
    Ok(front)
}

/// Full-data least-squares refit of term coefficients, then golden-section search on the
/// remaining embedded constants. Never returns a worse expression.
pub fn refine_constants(expr: &Expr, x: &DMatrix<f64>, y: &[f64], iterations: usize) -> Expr {
    let cols = Columns::from_matrix(x);
    let mut best = expr.clone();
    let mut best_mse = mse_of(&best, &cols, y);
    let refit = refit_full(&best, &cols, y);
    let m = mse_of(&refit, &cols, y);
    if m <= best_mse {
        best = refit;
        best_mse = m;
    }
    // constants inside non-linear factors
    let terms = distinct_terms(&best);
    let embedded: usize = terms
        .iter()
        .map(|t| t.rest.as_ref().map_or(0, |r| r.constants().len()))
        .sum();
    if embedded == 0 || iterations == 0 {
        return best;
    }
    let n_consts = best.constants().len();
    for k in 0..n_consts {
        let c0 = best.constants()[k];
        let span = 0.5 * c0.abs().max(1e-3);
        let eval_at = |v: f64| {
            let mut e = best.clone();
            *e.constants_mut()[k] = v;
            mse_of(&e, &cols, y)
        };
        let (mut lo, mut hi) = (c0 - span, c0 + span);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - g * (hi - lo);
        let mut b = lo + g * (hi - lo);
        let (mut fa, mut fb) = (eval_at(a), eval_at(b));
        for _ in 0..iterations {
            if fa < fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - g * (hi - lo);
                fa = eval_at(a);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + g * (hi - lo);
                fb = eval_at(b);
            }
        }
        let (v, f) = if fa < fb { (a, fa) } else { (b, fb) };
        if f < best_mse {
            *best.constants_mut()[k] = v;
            best_mse = f;
            let refit = refit_full(&best, &cols, y);
            let m = mse_of(&refit, &cols, y);
            if m <= best_mse && refit.constants().len() == n_consts {
                best = refit;
                best_mse = m;
            }
        }
    }
    best
}

/// Selected, refined expression for one output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicModel {
    pub expr: Expr,
    pub infix: String,
    pub features: Vec<String>,
    pub train_mse: f64,
    pub front: ParetoFront,
}

impl SymbolicModel {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], features: &[String], cfg: &SymRegConfig) -> Result<Self> {
        if features.len() != x.ncols() {
            return Err(Error::Dimension {
                what: "feature registry",
                expected: x.ncols(),
                got: features.len(),
            });
        }
        let front = fit_symbolic(x, y, cfg)?;
        let chosen = front.select().expect("front holds the constant model").expr.clone();
        let expr = refine_constants(&chosen, x, y, cfg.refine_iterations).simplify();
        let cols = Columns::from_matrix(x);
        let train_mse = mse_of(&expr, &cols, y);
        Ok(SymbolicModel {
            infix: expr.render(features)?,
            expr,
            features: features.to_vec(),
            train_mse,
            front,
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.expr.evaluate(x)
    }

    /// Rebuilds the tree from the stored infix text.
    pub fn reparse(&self) -> Result<Expr> {
        Expr::parse(&self.infix, &self.features)
    }
}
