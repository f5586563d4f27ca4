//! Bounded functions of the environment seen from the walker and of the next
//! few steps.
//!
//! A [`CylinderFunction`] `f(ω, (z_i))` reads environment cells at relative
//! levels `-N..=M` inside the box `|x|_∞ ≤ radius` around the walker, and the
//! steps `z_1..z_K`. Cells are addressed relative to the walker's space-time
//! position; `cell(i, x, z)` is the probability of stepping from `x` to `x + z`
//! between relative levels `i` and `i + 1`.
//!
//! Functions are written in a small expression language:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := number | '-' factor | '(' expr ')'
//!         | step(i, z)            1 if z_i = z, else 0   (i >= 1)
//!         | cell(i, [x1,..,xd], z)
//!         | abs(expr) | min(expr, expr) | max(expr, expr)
//! z      := +e1 | -e1 | +e2 | ...
//! ```

use std::fmt;
use std::sync::Arc;

use rand::prelude::*;

use crate::environment::{EnvDistribution, Environment, SiteKeyedEnv};
use crate::error::{Error, Result};
use crate::lattice::StepSet;
use crate::rng;

/// Read access to environment cells in the walker's frame.
pub trait CellView {
    /// `π(level, x → x + e_step)`.
    fn weight(&self, level: i64, x: &[i64], step: usize) -> f64;
}

/// Expression tree of a user function.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Indicator of `z_index = step`, `index >= 1`.
    Step { index: usize, step: usize },
    Cell { level: i64, site: Vec<i64>, step: usize },
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Abs(Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn parse(d: usize, text: &str) -> Result<Expr> {
        let steps = StepSet::new(d)?;
        let mut p = Parser {
            src: text,
            pos: 0,
            steps,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != text.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, view: &dyn CellView, steps: &[u8]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Step { index, step } => f64::from(u8::from(steps[index - 1] as usize == *step)),
            Expr::Cell { level, site, step } => view.weight(*level, site, *step),
            Expr::Neg(a) => -a.eval(view, steps),
            Expr::Add(a, b) => a.eval(view, steps) + b.eval(view, steps),
            Expr::Sub(a, b) => a.eval(view, steps) - b.eval(view, steps),
            Expr::Mul(a, b) => a.eval(view, steps) * b.eval(view, steps),
            Expr::Div(a, b) => a.eval(view, steps) / b.eval(view, steps),
            Expr::Abs(a) => a.eval(view, steps).abs(),
            Expr::Min(a, b) => a.eval(view, steps).min(b.eval(view, steps)),
            Expr::Max(a, b) => a.eval(view, steps).max(b.eval(view, steps)),
        }
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Neg(a) | Expr::Abs(a) => a.visit(f),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Min(a, b) | Expr::Max(a, b) => {
                a.visit(f);
                b.visit(f);
            }
            _ => {}
        }
    }

    /// Distinct `(level, site)` cells the expression reads.
    pub fn cells(&self) -> Vec<(i64, Vec<i64>)> {
        let mut out: Vec<(i64, Vec<i64>)> = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Cell { level, site, .. } = e {
                if !out.iter().any(|(l, s)| l == level && s == site) {
                    out.push((*level, site.clone()));
                }
            }
        });
        out
    }

    /// Smallest window `(N, M, K, radius)` containing every atom.
    pub fn window(&self) -> (usize, usize, usize, i64) {
        let (mut n, mut m, mut k, mut r) = (0i64, 0i64, 0usize, 0i64);
        self.visit(&mut |e| match e {
            Expr::Step { index, .. } => k = k.max(*index),
            Expr::Cell { level, site, .. } => {
                n = n.max(-level);
                m = m.max(*level);
                r = r.max(site.iter().map(|c| c.abs()).max().unwrap_or(0));
            }
            _ => {}
        });
        (n as usize, m as usize, k, r)
    }

    /// Interval enclosure of the expression's range.
    pub fn range(&self) -> Result<(f64, f64)> {
        let two = |a: &Expr, b: &Expr| -> Result<((f64, f64), (f64, f64))> { Ok((a.range()?, b.range()?)) };
        Ok(match self {
            Expr::Const(c) => (*c, *c),
            Expr::Step { .. } | Expr::Cell { .. } => (0.0, 1.0),
            Expr::Neg(a) => {
                let (lo, hi) = a.range()?;
                (-hi, -lo)
            }
            Expr::Add(a, b) => {
                let ((a0, a1), (b0, b1)) = two(a, b)?;
                (a0 + b0, a1 + b1)
            }
            Expr::Sub(a, b) => {
                let ((a0, a1), (b0, b1)) = two(a, b)?;
                (a0 - b1, a1 - b0)
            }
            Expr::Mul(a, b) => {
                let ((a0, a1), (b0, b1)) = two(a, b)?;
                let c = [a0 * b0, a0 * b1, a1 * b0, a1 * b1];
                (c.iter().copied().fold(f64::INFINITY, f64::min), c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            }
            Expr::Div(a, b) => {
                let ((a0, a1), (b0, b1)) = two(a, b)?;
                if b0 <= 0.0 && b1 >= 0.0 {
                    return Err(Error::config("division by an expression that can vanish leaves f unbounded"));
                }
                let c = [a0 / b0, a0 / b1, a1 / b0, a1 / b1];
                (c.iter().copied().fold(f64::INFINITY, f64::min), c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            }
            Expr::Abs(a) => {
                let (lo, hi) = a.range()?;
                if lo >= 0.0 {
                    (lo, hi)
                } else if hi <= 0.0 {
                    (-hi, -lo)
                } else {
                    (0.0, hi.max(-lo))
                }
            }
            Expr::Min(a, b) => {
                let ((a0, a1), (b0, b1)) = two(a, b)?;
                (a0.min(b0), a1.min(b1))
            }
            Expr::Max(a, b) => {
                let ((a0, a1), (b0, b1)) = two(a, b)?;
                (a0.max(b0), a1.max(b1))
            }
        })
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Step { index, step } => write!(f, "step({index},{})", StepSet::label(*step)),
            Expr::Cell { level, site, step } => {
                let s: Vec<String> = site.iter().map(|c| c.to_string()).collect();
                write!(f, "cell({level},[{}],{})", s.join(","), StepSet::label(*step))
            }
            Expr::Neg(a) => write!(f, "-({a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Abs(a) => write!(f, "abs({a})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    steps: StepSet,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Parse(format!("{msg} at column {} of `{}`", self.pos + 1, self.src))
    }

    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn word(&mut self) -> &str {
        self.skip_ws();
        let start = self.pos;
        while self.src[self.pos..].starts_with(|c: char| c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[self.pos..];
        let len = rest
            .char_indices()
            .find(|&(i, c)| {
                !(c.is_ascii_digit()
                    || c == '.'
                    || ((c == 'e' || c == 'E') && i > 0)
                    || ((c == '-' || c == '+') && i > 0 && matches!(rest.as_bytes()[i - 1], b'e' | b'E')))
            })
            .map_or(rest.len(), |(i, _)| i);
        self.pos += len;
        self.src[start..self.pos]
            .parse()
            .map_err(|_| self.error("bad number"))
    }

    fn integer(&mut self) -> Result<i64> {
        self.skip_ws();
        let neg = self.eat('-');
        if !neg {
            self.eat('+');
        }
        self.skip_ws();
        let start = self.pos;
        while self.src[self.pos..].starts_with(|c: char| c.is_ascii_digit()) {
            self.pos += 1;
        }
        let v: i64 = self.src[start..self.pos]
            .parse()
            .map_err(|_| self.error("expected an integer"))?;
        Ok(if neg { -v } else { v })
    }

    fn step_label(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.src[self.pos..].starts_with(|c: char| c.is_ascii_alphanumeric() || c == '+' || c == '-') {
            self.pos += 1;
        }
        self.steps.parse(&self.src[start..self.pos]).map_err(|_| self.error("expected a step such as +e1"))
    }

    fn factor(&mut self) -> Result<Expr> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some('-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => Ok(Expr::Const(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() => {
                let at = self.pos;
                let name = self.word().to_string();
                self.expect('(')?;
                let e = match name.as_str() {
                    "step" => {
                        let i = self.integer()?;
                        if i < 1 {
                            self.pos = at;
                            return Err(self.error("step indices start at 1"));
                        }
                        self.expect(',')?;
                        Expr::Step {
                            index: i as usize,
                            step: self.step_label()?,
                        }
                    }
                    "cell" => {
                        let level = self.integer()?;
                        self.expect(',')?;
                        self.expect('[')?;
                        let mut site = vec![self.integer()?];
                        while self.eat(',') {
                            site.push(self.integer()?);
                        }
                        self.expect(']')?;
                        if site.len() != self.steps.dim() {
                            self.pos = at;
                            return Err(self.error("cell site has the wrong dimension"));
                        }
                        self.expect(',')?;
                        Expr::Cell {
                            level,
                            site,
                            step: self.step_label()?,
                        }
                    }
                    "abs" => Expr::Abs(Box::new(self.expr()?)),
                    "min" | "max" => {
                        let a = Box::new(self.expr()?);
                        self.expect(',')?;
                        let b = Box::new(self.expr()?);
                        if name == "min" {
                            Expr::Min(a, b)
                        } else {
                            Expr::Max(a, b)
                        }
                    }
                    _ => {
                        self.pos = at;
                        return Err(self.error(&format!("unknown function `{name}`")));
                    }
                };
                self.expect(')')?;
                Ok(e)
            }
            Some(_) => Err(self.error("unexpected character")),
        }
    }
}

type CustomFn = dyn Fn(&dyn CellView, &[u8]) -> f64 + Send + Sync;

#[derive(Clone)]
enum Evaluator {
    Expr(Expr),
    /// `f ∘ S̄^by`: the inner function seen after `by` steps.
    Shift { inner: Box<CylinderFunction>, by: usize },
    Product(Box<CylinderFunction>, Box<CylinderFunction>),
    Custom { label: String, f: Arc<CustomFn> },
}

/// A bounded cylinder function with its declared window.
#[derive(Clone)]
pub struct CylinderFunction {
    d: usize,
    n: usize,
    m: usize,
    k: usize,
    radius: i64,
    bound: f64,
    eval: Evaluator,
}

impl fmt::Debug for CylinderFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylinderFunction")
            .field("f", &self.describe())
            .field("nmk", &(self.n, self.m, self.k))
            .field("radius", &self.radius)
            .finish()
    }
}

/// Offsets a view by `(dt, dx)`.
struct ShiftedView<'a> {
    inner: &'a dyn CellView,
    dt: i64,
    dx: Vec<i64>,
}

impl CellView for ShiftedView<'_> {
    fn weight(&self, level: i64, x: &[i64], step: usize) -> f64 {
        let y: Vec<i64> = x.iter().zip(&self.dx).map(|(a, b)| a + b).collect();
        self.inner.weight(level + self.dt, &y, step)
    }
}

fn displacement(d: usize, steps: &[u8]) -> Vec<i64> {
    let mut x = vec![0; d];
    for &s in steps {
        StepSet::apply(&mut x, s as usize);
    }
    x
}

/// The local form `f(π(0, 0), z_1)` of a function that reads nothing else.
pub struct LocalForm<'a> {
    f: &'a CylinderFunction,
}

impl LocalForm<'_> {
    /// `f` at the walker's cell `cell` and first step `step`.
    pub fn eval(&self, cell: &[f64], step: usize) -> f64 {
        struct One<'b>(&'b [f64]);
        impl CellView for One<'_> {
            fn weight(&self, _: i64, _: &[i64], step: usize) -> f64 {
                self.0[step]
            }
        }
        self.f.eval(&One(cell), &[step as u8])
    }

    pub fn uses_cell(&self) -> bool {
        self.f.uses_cells()
    }
}

impl CylinderFunction {
    pub fn from_expr(d: usize, expr: Expr) -> Result<Self> {
        StepSet::new(d)?;
        let (n, m, k, radius) = expr.window();
        let (lo, hi) = expr.range()?;
        Ok(CylinderFunction {
            d,
            n,
            m,
            k,
            radius,
            bound: lo.abs().max(hi.abs()),
            eval: Evaluator::Expr(expr),
        })
    }

    /// Parses an expression or a builtin:
    /// `builtin:one`, `builtin:step-indicator:+e1`, `builtin:step-pattern:+e1,-e2`,
    /// `builtin:cell:+e1` (the walker's own cell) and `builtin:product:<a>;<b>`.
    pub fn parse(d: usize, text: &str) -> Result<Self> {
        let text = text.trim();
        let Some(rest) = text.strip_prefix("builtin:") else {
            return Self::from_expr(d, Expr::parse(d, text.strip_prefix("expr:").unwrap_or(text))?);
        };
        let (name, arg) = rest.split_once(':').unwrap_or((rest, ""));
        let steps = StepSet::new(d)?;
        let origin = vec![0; d];
        let expr = match name {
            "one" => Expr::Const(1.0),
            "step-indicator" => Expr::Step {
                index: 1,
                step: steps.parse(arg)?,
            },
            "step-pattern" => {
                let mut e: Option<Expr> = None;
                for (i, z) in arg.split(',').enumerate() {
                    let atom = Expr::Step {
                        index: i + 1,
                        step: steps.parse(z)?,
                    };
                    e = Some(match e {
                        None => atom,
                        Some(prev) => Expr::Mul(Box::new(prev), Box::new(atom)),
                    });
                }
                e.ok_or_else(|| Error::Parse("empty step pattern".into()))?
            }
            "cell" => Expr::Cell {
                level: 0,
                site: origin,
                step: steps.parse(arg)?,
            },
            "product" => {
                let (a, b) = arg
                    .split_once(';')
                    .ok_or_else(|| Error::Parse("builtin:product needs `<a>;<b>`".into()))?;
                return Ok(Self::parse(d, a)?.product(&Self::parse(d, b)?));
            }
            other => return Err(Error::Parse(format!("unknown builtin `{other}`"))),
        };
        Self::from_expr(d, expr)
    }

    /// Wraps an opaque evaluator with a declared window and bound. Use
    /// [`probe_measurability`] to check the declaration.
    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        d: usize,
        (n, m, k): (usize, usize, usize),
        radius: i64,
        bound: f64,
        label: impl Into<String>,
        f: impl Fn(&dyn CellView, &[u8]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        StepSet::new(d)?;
        if radius < 0 || !(bound.is_finite() && bound >= 0.0) {
            return Err(Error::config("custom function needs radius >= 0 and a finite bound"));
        }
        Ok(CylinderFunction {
            d,
            n,
            m,
            k,
            radius,
            bound,
            eval: Evaluator::Custom {
                label: label.into(),
                f: Arc::new(f),
            },
        })
    }

    pub fn constant(d: usize, c: f64) -> Result<Self> {
        Self::from_expr(d, Expr::Const(c))
    }

    /// The same function declared on a larger window.
    pub fn with_window(&self, n: usize, m: usize, k: usize) -> Result<Self> {
        if n < self.n || m < self.m || k < self.k {
            return Err(Error::config(format!(
                "window (N,M,K)=({n},{m},{k}) does not contain the function's window ({},{},{})",
                self.n, self.m, self.k
            )));
        }
        let mut out = self.clone();
        out.n = n;
        out.m = m;
        out.k = k;
        Ok(out)
    }

    /// `f ∘ S̄^by`: `f` evaluated in the frame reached after `by` steps.
    pub fn shifted(&self, by: usize) -> Self {
        CylinderFunction {
            d: self.d,
            n: self.n,
            m: self.m + by,
            k: self.k + by,
            radius: self.radius + by as i64,
            bound: self.bound,
            eval: Evaluator::Shift {
                inner: Box::new(self.clone()),
                by,
            },
        }
    }

    pub fn product(&self, other: &Self) -> Self {
        CylinderFunction {
            d: self.d,
            n: self.n.max(other.n),
            m: self.m.max(other.m),
            k: self.k.max(other.k),
            radius: self.radius.max(other.radius),
            bound: self.bound * other.bound,
            eval: Evaluator::Product(Box::new(self.clone()), Box::new(other.clone())),
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `(N, M, K)`.
    pub fn nmk(&self) -> (usize, usize, usize) {
        (self.n, self.m, self.k)
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Number of steps `N + M + K + 1` of the defining expectation.
    pub fn length(&self) -> usize {
        self.n + self.m + self.k + 1
    }

    pub fn describe(&self) -> String {
        match &self.eval {
            Evaluator::Expr(e) => e.to_string(),
            Evaluator::Shift { inner, by } => format!("shift{by}[{}]", inner.describe()),
            Evaluator::Product(a, b) => format!("({}) * ({})", a.describe(), b.describe()),
            Evaluator::Custom { label, .. } => format!("custom:{label}"),
        }
    }

    /// `f(view, steps)`; `steps[0]` is `z_1`.
    pub fn eval(&self, view: &dyn CellView, steps: &[u8]) -> f64 {
        match &self.eval {
            Evaluator::Expr(e) => e.eval(view, steps),
            Evaluator::Shift { inner, by } => {
                let shifted = ShiftedView {
                    inner: view,
                    dt: *by as i64,
                    dx: displacement(self.d, &steps[..*by]),
                };
                inner.eval(&shifted, &steps[*by..])
            }
            Evaluator::Product(a, b) => a.eval(view, steps) * b.eval(view, steps),
            Evaluator::Custom { f, .. } => f(view, steps),
        }
    }

    /// Cells read for the given steps, or `None` if unknown (opaque evaluator).
    pub fn referenced_cells(&self, steps: &[u8]) -> Option<Vec<(i64, Vec<i64>)>> {
        match &self.eval {
            Evaluator::Expr(e) => Some(e.cells()),
            Evaluator::Shift { inner, by } => {
                let dx = displacement(self.d, &steps[..*by]);
                let cells = inner.referenced_cells(&steps[*by..])?;
                Some(
                    cells
                        .into_iter()
                        .map(|(l, x)| (l + *by as i64, x.iter().zip(&dx).map(|(a, b)| a + b).collect()))
                        .collect(),
                )
            }
            Evaluator::Product(a, b) => {
                let mut cells = a.referenced_cells(steps)?;
                for c in b.referenced_cells(steps)? {
                    if !cells.contains(&c) {
                        cells.push(c);
                    }
                }
                Some(cells)
            }
            Evaluator::Custom { .. } => None,
        }
    }

    /// Every cell of the declared window.
    pub fn window_cells(&self) -> Vec<(i64, Vec<i64>)> {
        let side = (2 * self.radius + 1) as usize;
        let per_level = side.pow(self.d as u32);
        let mut out = Vec::new();
        for level in -(self.n as i64)..=self.m as i64 {
            for mut i in 0..per_level {
                let mut x = vec![0; self.d];
                for c in x.iter_mut() {
                    *c = (i % side) as i64 - self.radius;
                    i /= side;
                }
                out.push((level, x));
            }
        }
        out
    }

    pub fn uses_cells(&self) -> bool {
        match &self.eval {
            Evaluator::Expr(e) => !e.cells().is_empty(),
            Evaluator::Shift { inner, .. } => inner.uses_cells(),
            Evaluator::Product(a, b) => a.uses_cells() || b.uses_cells(),
            Evaluator::Custom { .. } => true,
        }
    }

    /// `Some` when `f` reads only `z_1` and the walker's own cell.
    pub fn local_form(&self) -> Option<LocalForm<'_>> {
        let steps_only = self.k <= 1 && self.n == 0 && self.m == 0;
        let cells_ok = match self.referenced_cells(&[0]) {
            Some(cells) => cells.iter().all(|(l, x)| *l == 0 && x.iter().all(|c| *c == 0)),
            None => false,
        };
        (steps_only && cells_ok).then_some(LocalForm { f: self })
    }
}

/// Cell access backed by two environments: one inside the declared window
/// and one outside it.
struct ProbeView<'a> {
    f: &'a CylinderFunction,
    inside: &'a SiteKeyedEnv,
    outside: &'a SiteKeyedEnv,
}

impl CellView for ProbeView<'_> {
    fn weight(&self, level: i64, x: &[i64], step: usize) -> f64 {
        let f = self.f;
        let within = level >= -(f.n as i64) && level <= f.m as i64 && x.iter().all(|c| c.abs() <= f.radius);
        let env = if within { self.inside } else { self.outside };
        env.cell(level, x).expect("site-keyed environments cover every site").get(step)
    }
}

/// Checks that `f` depends only on its declared window: perturbing cells
/// outside it and the steps after `z_K` never changes the value.
pub fn probe_measurability(f: &CylinderFunction, dist: &EnvDistribution, trials: usize, seed: u64) -> Result<()> {
    if dist.dim() != f.d {
        return Err(Error::Dimension {
            expected: f.d,
            got: dist.dim(),
        });
    }
    let shared = Arc::new(dist.clone());
    let two_d = 2 * f.d;
    for t in 0..trials as u64 {
        let inside = SiteKeyedEnv::new(shared.clone(), rng::child_seed(seed, 3 * t));
        let out_a = SiteKeyedEnv::new(shared.clone(), rng::child_seed(seed, 3 * t + 1));
        let out_b = SiteKeyedEnv::new(shared.clone(), rng::child_seed(seed, 3 * t + 2));
        let mut r = rng::replica_stream(seed, t);
        let tail = 3;
        let mut steps_a: Vec<u8> = (0..f.k + tail).map(|_| r.random_range(0..two_d) as u8).collect();
        let mut steps_b = steps_a.clone();
        for s in &mut steps_b[f.k..] {
            *s = r.random_range(0..two_d) as u8;
        }
        // a differing tail must not matter
        if steps_a[f.k..] == steps_b[f.k..] {
            steps_a[f.k] = ((steps_b[f.k] as usize + 1) % two_d) as u8;
        }
        let va = f.eval(&ProbeView { f, inside: &inside, outside: &out_a }, &steps_a);
        let vb = f.eval(&ProbeView { f, inside: &inside, outside: &out_b }, &steps_b);
        if va.to_bits() != vb.to_bits() {
            return Err(Error::config(format!(
                "{} reads outside its declared window (N,M,K)=({},{},{}), radius {}: {va} vs {vb}",
                f.describe(),
                f.n,
                f.m,
                f.k,
                f.radius
            )));
        }
        if va.abs() > f.bound * (1.0 + 1e-12) {
            return Err(Error::config(format!("{} exceeds its bound {}: {va}", f.describe(), f.bound)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::ProbVector;
    use proptest::prelude::*;

    struct Fixed(Vec<f64>);
    impl CellView for Fixed {
        fn weight(&self, level: i64, x: &[i64], step: usize) -> f64 {
            // a distinct number per (level, site, step)
            let key = level * 1000 + x.iter().fold(0, |a, c| a * 31 + c) * 10;
            ((key as f64).sin().abs() * 0.5 + self.0[step]).min(1.0)
        }
    }

    #[test]
    fn parses_and_evaluates() {
        let f = CylinderFunction::parse(3, "step(1,+e1) * cell(0, [0,0,0], -e2) + 0.5*step(2, e3)").unwrap();
        assert_eq!(f.nmk(), (0, 0, 2));
        assert_eq!(f.bound(), 1.5);
        let view = Fixed(vec![0.1; 6]);
        let v = f.eval(&view, &[0, 4]);
        assert!((v - (view.weight(0, &[0, 0, 0], 1) + 0.5)).abs() < 1e-15);
        let g = CylinderFunction::parse(3, "cell(-1,[1,0,-2],+e1) - cell(2,[0,0,0],+e1)").unwrap();
        assert_eq!(g.nmk(), (1, 2, 0));
        assert_eq!(g.radius(), 2);
        assert_eq!(g.bound(), 1.0);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "step(0,+e1)",
            "step(1,+e4)",
            "cell(0,[0,0],+e1)",
            "1 / step(1,+e1)",
            "foo(1)",
            "step(1,+e1",
            "1 2",
        ] {
            assert!(CylinderFunction::parse(3, bad).is_err(), "{bad}");
        }
        assert!(CylinderFunction::parse(3, "1 / (1 + step(1,+e1))").is_ok());
    }

    #[test]
    fn builtins() {
        let one = CylinderFunction::parse(3, "builtin:one").unwrap();
        assert_eq!(one.length(), 1);
        let view = Fixed(vec![0.1; 6]);
        let s = CylinderFunction::parse(3, "builtin:step-indicator:+e1").unwrap();
        assert_eq!(s.eval(&view, &[0]), 1.0);
        assert_eq!(s.eval(&view, &[1]), 0.0);
        let p = CylinderFunction::parse(3, "builtin:step-pattern:+e1,-e2").unwrap();
        assert_eq!(p.nmk(), (0, 0, 2));
        assert_eq!(p.eval(&view, &[0, 3]), 1.0);
        let prod = CylinderFunction::parse(3, "builtin:product:builtin:step-indicator:+e1;builtin:cell:+e1").unwrap();
        assert!(prod.local_form().is_some());
        assert!(p.local_form().is_none());
    }

    #[test]
    fn shift_reads_the_moved_frame() {
        let f = CylinderFunction::parse(2, "cell(0,[0,0],+e1) * step(1,-e2)").unwrap();
        let g = f.shifted(1);
        assert_eq!(g.nmk(), (0, 1, 2));
        let view = Fixed(vec![0.2; 4]);
        // first step +e2 moves the frame to (1, [0,1])
        let v = g.eval(&view, &[2, 3]);
        assert_eq!(v, view.weight(1, &[0, 1], 0));
        assert_eq!(g.referenced_cells(&[2, 3]).unwrap(), vec![(1, vec![0, 1])]);
    }

    #[test]
    fn probing_catches_undeclared_reads() {
        let dist = EnvDistribution::two_point(2, 0.1, 0.05).unwrap();
        let honest = CylinderFunction::custom(2, (0, 0, 1), 0, 1.0, "honest", |v, z| v.weight(0, &[0, 0], z[0] as usize)).unwrap();
        probe_measurability(&honest, &dist, 20, 1).unwrap();
        let sneaky = CylinderFunction::custom(2, (0, 0, 1), 0, 1.0, "sneaky", |v, z| {
            v.weight(0, &[0, 0], z[0] as usize) * v.weight(1, &[0, 1], 0)
        })
        .unwrap();
        assert!(probe_measurability(&sneaky, &dist, 20, 1).is_err());
        let future = CylinderFunction::custom(2, (0, 0, 1), 0, 1.0, "future", |_, z| f64::from(z[1])).unwrap();
        assert!(probe_measurability(&future, &dist, 20, 1).is_err());
        let expr = CylinderFunction::parse(2, "step(2,+e1) * cell(-1,[1,-1],-e2)").unwrap();
        probe_measurability(&expr, &dist, 20, 1).unwrap();
        probe_measurability(&expr.shifted(2), &dist, 20, 1).unwrap();
    }

    #[test]
    fn local_form_matches_eval() {
        let f = CylinderFunction::parse(3, "step(1,+e1) * cell(0,[0,0,0],+e1) + 0.25").unwrap();
        let local = f.local_form().unwrap();
        let cell = ProbVector::uniform(3);
        assert_eq!(local.eval(cell.weights(), 0), 1.0 / 6.0 + 0.25);
        assert_eq!(local.eval(cell.weights(), 2), 0.25);
    }

    fn arb_expr(d: usize) -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-3.0f64..3.0).prop_map(Expr::Const),
            (1usize..4, 0..2 * d).prop_map(|(index, step)| Expr::Step { index, step }),
            (-2i64..3, proptest::collection::vec(-2i64..3, d), 0..2 * d)
                .prop_map(|(level, site, step)| Expr::Cell { level, site, step }),
        ];
        leaf.prop_recursive(4, 24, 2, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                inner.clone().prop_map(|a| Expr::Abs(Box::new(a))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Max(Box::new(a), Box::new(b))),
            ]
        })
    }

    proptest! {
        #[test]
        fn display_parses_back(e in arb_expr(2)) {
            let back = Expr::parse(2, &e.to_string()).unwrap();
            let view = Fixed(vec![0.05, 0.1, 0.15, 0.2]);
            let steps = [0u8, 3, 1];
            prop_assert_eq!(back.eval(&view, &steps).to_bits(), e.eval(&view, &steps).to_bits());
        }

        #[test]
        fn values_respect_the_bound(e in arb_expr(2), z in proptest::collection::vec(0u8..4, 3)) {
            let f = CylinderFunction::from_expr(2, e).unwrap();
            let v = f.eval(&Fixed(vec![0.05, 0.1, 0.15, 0.2]), &z);
            prop_assert!(v.abs() <= f.bound() * (1.0 + 1e-12) + 1e-12);
        }
    }
}
