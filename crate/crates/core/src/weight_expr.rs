//! A small expression language for chart weights.
//!
//! ```text
//! expr   := term (("+" | "-") term)*
//! term   := factor (("*" | "/") factor)*
//! factor := base ("^" int)?
//! base   := number | ident | "(" expr ")" | ("log" | "exp") "(" expr ")" | "-" base
//! ident  := r2 | r2_<i> | re_<i> | im_<i>      (i ≥ 1; bare r2/re/im mean index 1)
//! ```
//!
//! `r2_i` is `|z_i|²`, `re_i`/`im_i` the real and imaginary parts of `z_i`.
//! Expressions evaluate to plain values or to second-order jets, which gives
//! exact complex Hessians for the Monge–Ampère computations.

use std::fmt;

use nalgebra::DMatrix;

use crate::chart_fn::ChartFn;
use crate::{Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    R2(usize),
    Re(usize),
    Im(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Log,
    Exp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Call(Func, Box<Node>),
}

/// A parsed weight expression together with its source text.
#[derive(Clone, PartialEq)]
pub struct WeightExpr {
    source: String,
    root: Node,
}

impl fmt::Debug for WeightExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WeightExpr({:?})", self.source)
    }
}

impl fmt::Display for WeightExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            out.push(Token { tok, line: tl, column: tc });
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text: String = chars[start..i].iter().collect();
            let value: f64 = text
                .parse()
                .map_err(|_| parse_err(tl, tc, format!("malformed number `{text}`")))?;
            out.push(Token { tok: Tok::Num(value), line: tl, column: tc });
            col += i - start;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            out.push(Token { tok: Tok::Ident(text), line: tl, column: tc });
            col += i - start;
            continue;
        }
        return Err(parse_err(tl, tc, format!("unexpected character `{c}`")));
    }
    out.push(Token { tok: Tok::End, line, column: col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        let t = self.bump();
        if t.tok == want {
            Ok(())
        } else {
            Err(parse_err(t.line, t.column, format!("expected {what}, found {}", describe(&t.tok))))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.factor()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn factor(&mut self) -> Result<Node> {
        let base = self.base()?;
        if self.peek().tok != Tok::Caret {
            return Ok(base);
        }
        self.bump();
        let negative = if self.peek().tok == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        let t = self.bump();
        match t.tok {
            Tok::Num(v) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                let e = v as i32;
                Ok(Node::Pow(Box::new(base), if negative { -e } else { e }))
            }
            other => Err(parse_err(
                t.line,
                t.column,
                format!("exponent must be an integer literal, found {}", describe(&other)),
            )),
        }
    }

    fn base(&mut self) -> Result<Node> {
        let t = self.bump();
        match t.tok {
            Tok::Num(v) => Ok(Node::Num(v)),
            Tok::Minus => Ok(Node::Neg(Box::new(self.base()?))),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if let Some(func) = match name.as_str() {
                    "log" => Some(Func::Log),
                    "exp" => Some(Func::Exp),
                    _ => None,
                } {
                    self.expect(Tok::LParen, &format!("`(` after `{name}`"))?;
                    if self.peek().tok == Tok::RParen {
                        let p = self.peek();
                        return Err(parse_err(p.line, p.column, format!("`{name}` takes exactly one argument, got 0")));
                    }
                    let arg = self.expr()?;
                    if self.peek().tok == Tok::Comma {
                        let p = self.peek();
                        return Err(parse_err(
                            p.line,
                            p.column,
                            format!("`{name}` takes exactly one argument, got more"),
                        ));
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                parse_var(&name)
                    .map(Node::Var)
                    .ok_or_else(|| parse_err(t.line, t.column, format!("unknown identifier `{name}`")))
            }
            other => Err(parse_err(t.line, t.column, format!("expected a value, found {}", describe(&other)))),
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Num(v) => format!("number {v}"),
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Plus => "`+`".into(),
        Tok::Minus => "`-`".into(),
        Tok::Star => "`*`".into(),
        Tok::Slash => "`/`".into(),
        Tok::Caret => "`^`".into(),
        Tok::LParen => "`(`".into(),
        Tok::RParen => "`)`".into(),
        Tok::Comma => "`,`".into(),
        Tok::End => "end of input".into(),
    }
}

fn parse_var(name: &str) -> Option<Var> {
    let (stem, index) = match name.split_once('_') {
        Some((stem, idx)) => {
            if idx.is_empty() || !idx.chars().all(|c| c.is_ascii_digit()) {
                return None;
            }
            let i: usize = idx.parse().ok()?;
            if i == 0 {
                return None;
            }
            (stem, i - 1)
        }
        None => (name, 0),
    };
    match stem {
        "r2" => Some(Var::R2(index)),
        "re" => Some(Var::Re(index)),
        "im" => Some(Var::Im(index)),
        _ => None,
    }
}

/// Parse a weight expression.
pub fn parse_weight(source: &str) -> Result<WeightExpr> {
    if source.trim().is_empty() {
        return Err(parse_err(1, 1, "empty expression"));
    }
    let mut p = Parser { toks: lex(source)?, pos: 0 };
    let root = p.expr()?;
    let t = p.peek();
    if t.tok != Tok::End {
        return Err(parse_err(t.line, t.column, format!("unexpected {}", describe(&t.tok))));
    }
    Ok(WeightExpr { source: source.to_string(), root })
}

impl WeightExpr {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    /// Largest zero-based coordinate index referenced, if any.
    pub fn max_coordinate(&self) -> Option<usize> {
        fn walk(n: &Node, acc: &mut Option<usize>) {
            match n {
                Node::Num(_) => {}
                Node::Var(Var::R2(i) | Var::Re(i) | Var::Im(i)) => *acc = Some(acc.map_or(*i, |a| a.max(*i))),
                Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => walk(a, acc),
                Node::Bin(_, a, b) => {
                    walk(a, acc);
                    walk(b, acc);
                }
            }
        }
        let mut acc = None;
        walk(&self.root, &mut acc);
        acc
    }

    /// Reject expressions that reference coordinates beyond `dim` or are not
    /// finite at one of the given chart points.
    pub fn validate<'a>(&self, dim: usize, points: impl IntoIterator<Item = &'a [C64]>) -> Result<()> {
        if let Some(i) = self.max_coordinate() {
            if i >= dim {
                return Err(Error::invalid(format!(
                    "expression `{}` references coordinate {} but the chart has dimension {dim}",
                    self.source,
                    i + 1
                )));
            }
        }
        for (idx, z) in points.into_iter().enumerate() {
            let v = self.value(z);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    value: v,
                    context: format!("expression `{}` at {:?}", self.source, z),
                });
            }
        }
        Ok(())
    }

    pub fn value(&self, z: &[C64]) -> f64 {
        eval_value(&self.root, z)
    }

    /// Value, real gradient and real Hessian in coordinates `(x₁, y₁, x₂, y₂, …)`.
    pub fn jet(&self, z: &[C64]) -> Jet {
        eval_jet(&self.root, z)
    }
}

fn coord(z: &[C64], i: usize) -> C64 {
    z.get(i).copied().unwrap_or(C64::new(f64::NAN, f64::NAN))
}

fn eval_value(n: &Node, z: &[C64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(Var::R2(i)) => coord(z, *i).norm_sqr(),
        Node::Var(Var::Re(i)) => coord(z, *i).re,
        Node::Var(Var::Im(i)) => coord(z, *i).im,
        Node::Neg(a) => -eval_value(a, z),
        Node::Bin(op, a, b) => {
            let (x, y) = (eval_value(a, z), eval_value(b, z));
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            }
        }
        Node::Pow(a, e) => eval_value(a, z).powi(*e),
        Node::Call(Func::Log, a) => eval_value(a, z).ln(),
        Node::Call(Func::Exp, a) => eval_value(a, z).exp(),
    }
}

/// Second-order jet of a real function of `d` real variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Row-major `d × d`.
    pub hess: Vec<f64>,
}

impl Jet {
    fn constant(v: f64, d: usize) -> Self {
        Self { value: v, grad: vec![0.0; d], hess: vec![0.0; d * d] }
    }

    fn dim(&self) -> usize {
        self.grad.len()
    }

    fn add(mut self, o: &Jet, sign: f64) -> Self {
        self.value += sign * o.value;
        self.grad.iter_mut().zip(&o.grad).for_each(|(a, b)| *a += sign * b);
        self.hess.iter_mut().zip(&o.hess).for_each(|(a, b)| *a += sign * b);
        self
    }

    fn mul(&self, o: &Jet) -> Self {
        let d = self.dim();
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                hess[i * d + j] = self.value * o.hess[i * d + j]
                    + o.value * self.hess[i * d + j]
                    + self.grad[i] * o.grad[j]
                    + o.grad[i] * self.grad[j];
            }
        }
        Self {
            value: self.value * o.value,
            grad: self.grad.iter().zip(&o.grad).map(|(a, b)| self.value * b + o.value * a).collect(),
            hess,
        }
    }

    /// Compose with a scalar function given its value and first two derivatives.
    fn chain(&self, f: f64, df: f64, d2f: f64) -> Self {
        let d = self.dim();
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                hess[i * d + j] = df * self.hess[i * d + j] + d2f * self.grad[i] * self.grad[j];
            }
        }
        Self { value: f, grad: self.grad.iter().map(|g| df * g).collect(), hess }
    }

    /// Complex Hessian `∂²/∂z_i∂z̄_j` from the real one.
    pub fn complex_hessian(&self) -> DMatrix<C64> {
        let d = self.dim();
        let n = d / 2;
        let h = |a: usize, b: usize| self.hess[a * d + b];
        DMatrix::from_fn(n, n, |i, j| {
            let (xi, yi, xj, yj) = (2 * i, 2 * i + 1, 2 * j, 2 * j + 1);
            C64::new(0.25 * (h(xi, xj) + h(yi, yj)), 0.25 * (h(xi, yj) - h(yi, xj)))
        })
    }
}

fn eval_jet(n: &Node, z: &[C64]) -> Jet {
    let d = 2 * z.len();
    match n {
        Node::Num(v) => Jet::constant(*v, d),
        Node::Var(var) => {
            let mut j = Jet::constant(0.0, d);
            match *var {
                Var::R2(i) => {
                    let c = coord(z, i);
                    j.value = c.norm_sqr();
                    if i < z.len() {
                        j.grad[2 * i] = 2.0 * c.re;
                        j.grad[2 * i + 1] = 2.0 * c.im;
                        j.hess[(2 * i) * d + 2 * i] = 2.0;
                        j.hess[(2 * i + 1) * d + 2 * i + 1] = 2.0;
                    }
                }
                Var::Re(i) => {
                    j.value = coord(z, i).re;
                    if i < z.len() {
                        j.grad[2 * i] = 1.0;
                    }
                }
                Var::Im(i) => {
                    j.value = coord(z, i).im;
                    if i < z.len() {
                        j.grad[2 * i + 1] = 1.0;
                    }
                }
            }
            j
        }
        Node::Neg(a) => {
            let a = eval_jet(a, z);
            Jet::constant(0.0, d).add(&a, -1.0)
        }
        Node::Bin(op, a, b) => {
            let (a, b) = (eval_jet(a, z), eval_jet(b, z));
            match op {
                BinOp::Add => a.add(&b, 1.0),
                BinOp::Sub => a.add(&b, -1.0),
                BinOp::Mul => a.mul(&b),
                BinOp::Div => {
                    let v = b.value;
                    a.mul(&b.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v)))
                }
            }
        }
        Node::Pow(a, e) => {
            let a = eval_jet(a, z);
            let (x, e) = (a.value, *e);
            let df = if e == 0 { 0.0 } else { e as f64 * x.powi(e - 1) };
            let d2f = if e == 0 || e == 1 { 0.0 } else { (e as f64) * ((e - 1) as f64) * x.powi(e - 2) };
            a.chain(x.powi(e), df, d2f)
        }
        Node::Call(Func::Log, a) => {
            let a = eval_jet(a, z);
            let x = a.value;
            a.chain(x.ln(), 1.0 / x, -1.0 / (x * x))
        }
        Node::Call(Func::Exp, a) => {
            let a = eval_jet(a, z);
            let e = a.value.exp();
            a.chain(e, e, e)
        }
    }
}

impl ChartFn for WeightExpr {
    fn eval(&self, z: &[C64]) -> f64 {
        self.value(z)
    }

    fn complex_hessian(&self, z: &[C64]) -> Option<DMatrix<C64>> {
        Some(self.jet(z).complex_hessian())
    }

    fn as_constant(&self) -> Option<f64> {
        fn fold(n: &Node) -> Option<f64> {
            match n {
                Node::Num(v) => Some(*v),
                Node::Var(_) => None,
                Node::Neg(a) => fold(a).map(|v| -v),
                Node::Bin(op, a, b) => {
                    let (x, y) = (fold(a)?, fold(b)?);
                    Some(match op {
                        BinOp::Add => x + y,
                        BinOp::Sub => x - y,
                        BinOp::Mul => x * y,
                        BinOp::Div => x / y,
                    })
                }
                Node::Pow(a, e) => fold(a).map(|v| v.powi(*e)),
                Node::Call(Func::Log, a) => fold(a).map(f64::ln),
                Node::Call(Func::Exp, a) => fold(a).map(f64::exp),
            }
        }
        fold(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z1(re: f64, im: f64) -> Vec<C64> {
        vec![C64::new(re, im)]
    }

    #[test]
    fn zero_is_constant() {
        let e = parse_weight("0").unwrap();
        assert_eq!(e.root(), &Node::Num(0.0));
        assert_eq!(e.as_constant(), Some(0.0));
    }

    #[test]
    fn rational_radial_weight() {
        let e = parse_weight("r2/(1+r2)").unwrap();
        assert_eq!(e.value(&z1(1.0, 0.0)), 0.5);
        assert_eq!(e.value(&z1(0.0, 1.0)), 0.5);
    }

    #[test]
    fn product_space_weight() {
        let e = parse_weight("log(1+r2_1)+2*log(1+r2_2)").unwrap();
        assert_eq!(e.max_coordinate(), Some(1));
        let z = vec![C64::new(1.0, 0.0), C64::new(0.0, 1.0)];
        assert!((e.value(&z) - 3.0 * 2f64.ln()).abs() < 1e-15);
        assert!(e.validate(2, [z.as_slice()]).is_ok());
        assert!(e.validate(1, [z.as_slice()]).is_err());
    }

    #[test]
    fn precedence_and_powers() {
        let e = parse_weight("1 + 2*3^2 - 4/2").unwrap();
        assert_eq!(e.as_constant(), Some(17.0));
        let e = parse_weight("(re_1 - im_1)^2").unwrap();
        assert_eq!(e.value(&z1(3.0, 1.0)), 4.0);
        let e = parse_weight("2^-1").unwrap();
        assert_eq!(e.as_constant(), Some(0.5));
    }

    #[test]
    fn errors_carry_positions() {
        match parse_weight("r2 +\n  foo") {
            Err(Error::Parse { line, column, message }) => {
                assert_eq!((line, column), (2, 3));
                assert!(message.contains("foo"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_weight("log()"), Err(Error::Parse { .. })));
        assert!(matches!(parse_weight("exp(1, 2)"), Err(Error::Parse { .. })));
        assert!(matches!(parse_weight("r2^0.5"), Err(Error::Parse { .. })));
        assert!(matches!(parse_weight("(r2"), Err(Error::Parse { .. })));
        assert!(matches!(parse_weight(""), Err(Error::Parse { .. })));
        assert!(matches!(parse_weight("r2_0"), Err(Error::Parse { .. })));
    }

    #[test]
    fn division_by_zero_rejected_at_validation() {
        let e = parse_weight("1/r2").unwrap();
        let pts = [z1(1.0, 0.0), z1(0.0, 0.0)];
        match e.validate(1, pts.iter().map(|p| p.as_slice())) {
            Err(Error::NonFinite { node, .. }) => assert_eq!(node, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fubini_study_hessian_is_exact() {
        // ∂∂̄ log(1+|z|²) = (1+|z|²)^{-2}
        let e = parse_weight("log(1+r2)").unwrap();
        for (re, im) in [(0.0, 0.0), (0.3, -1.2), (2.0, 0.5)] {
            let h = e.complex_hessian(&z1(re, im)).unwrap();
            let want = (1.0 + re * re + im * im).powi(-2);
            assert!((h[(0, 0)].re - want).abs() < 1e-14);
            assert!(h[(0, 0)].im.abs() < 1e-15);
        }
    }

    #[test]
    fn jet_matches_finite_differences() {
        let e = parse_weight("exp(0.3*re_1*im_2) / (1 + r2_1 + 2*r2_2)^2 + log(2 + re_2)").unwrap();
        let z = vec![C64::new(0.4, -0.2), C64::new(0.1, 0.7)];
        let jet = e.jet(&z);
        let h = 1e-4;
        let shift = |k: usize, s: f64| {
            let mut w = z.clone();
            if k.is_multiple_of(2) {
                w[k / 2].re += s;
            } else {
                w[k / 2].im += s;
            }
            w
        };
        for a in 0..4 {
            let g = (e.value(&shift(a, h)) - e.value(&shift(a, -h))) / (2.0 * h);
            assert!((g - jet.grad[a]).abs() < 1e-7, "grad {a}");
            for b in 0..4 {
                let fd = |sa: f64, sb: f64| {
                    let mut w = shift(a, sa);
                    if b % 2 == 0 {
                        w[b / 2].re += sb;
                    } else {
                        w[b / 2].im += sb;
                    }
                    e.value(&w)
                };
                let hab = (fd(h, h) - fd(h, -h) - fd(-h, h) + fd(-h, -h)) / (4.0 * h * h);
                assert!((hab - jet.hess[a * 4 + b]).abs() < 1e-5, "hess {a},{b}");
            }
        }
    }
}
