//! A small arithmetic expression language for model coefficients.
//!
//! Expressions are parsed once against a [`Scope`] that maps variable names to
//! slots, and evaluated many times against a slice of slot values. Precedence,
//! from tightest to loosest: `^` (power), unary minus, `*` and `/`, then `+`
//! and `-`. All binary operators associate to the left. Functions are applied
//! by name with parentheses: `sin`, `cos`, `exp`, `ln`, `abs`, `sqrt` take one
//! argument, `pow` takes two. The identifier `pi` is a constant unless the
//! scope declares a variable of that name.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("function `{name}` at byte {offset} takes {expected} argument(s), got {found}")]
    Arity {
        name: String,
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("expected {expected} slot values, got {found}")]
    SlotCount { expected: usize, found: usize },
}

/// Variable names visible to an expression and the slot each one reads.
///
/// Several names may share a slot (`x` and `x1` in scalar systems).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scope {
    slots: Vec<String>,
    aliases: Vec<(String, usize)>,
}

impl Scope {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Self {
        Scope {
            slots: names.iter().map(|s| s.as_ref().to_string()).collect(),
            aliases: Vec::new(),
        }
    }

    pub fn with_alias(mut self, alias: &str, slot: usize) -> Self {
        assert!(slot < self.slots.len(), "alias target out of range");
        self.aliases.push((alias.to_string(), slot));
        self
    }

    /// `x1..xd, y1..yd` (plus `x`, `y` when `d == 1`).
    pub fn state_pair(d: usize) -> Self {
        let mut names: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        names.extend((1..=d).map(|k| format!("y{k}")));
        let scope = Scope::new(&names);
        if d == 1 {
            scope.with_alias("x", 0).with_alias("y", 1)
        } else {
            scope
        }
    }

    /// `y1..yd` (plus `y` when `d == 1`).
    pub fn delayed_state(d: usize) -> Self {
        let names: Vec<String> = (1..=d).map(|k| format!("y{k}")).collect();
        let scope = Scope::new(&names);
        if d == 1 {
            scope.with_alias("y", 0)
        } else {
            scope
        }
    }

    pub fn time() -> Self {
        Scope::new(&["t"])
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot_name(&self, slot: usize) -> &str {
        &self.slots[slot]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s == name).or_else(|| {
            self.aliases
                .iter()
                .find(|(a, _)| a == name)
                .map(|(_, s)| *s)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Ln,
    Abs,
    Sqrt,
}

impl UnaryOp {
    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "sin" => UnaryOp::Sin,
            "cos" => UnaryOp::Cos,
            "exp" => UnaryOp::Exp,
            "ln" => UnaryOp::Ln,
            "abs" => UnaryOp::Abs,
            "sqrt" => UnaryOp::Sqrt,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Abs => "abs",
            UnaryOp::Sqrt => "sqrt",
        }
    }

    fn apply(self, a: f64) -> Result<f64, ExprError> {
        let v = match self {
            UnaryOp::Neg => -a,
            UnaryOp::Sin => a.sin(),
            UnaryOp::Cos => a.cos(),
            UnaryOp::Exp => a.exp(),
            UnaryOp::Ln => {
                if a <= 0.0 {
                    return Err(domain("ln", format!("argument {a} is not positive")));
                }
                a.ln()
            }
            UnaryOp::Abs => a.abs(),
            UnaryOp::Sqrt => {
                if a < 0.0 {
                    return Err(domain("sqrt", format!("argument {a} is negative")));
                }
                a.sqrt()
            }
        };
        finite(self.name(), v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }

    fn apply(self, a: f64, b: f64) -> Result<f64, ExprError> {
        let v = match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => {
                if b == 0.0 {
                    return Err(domain("/", format!("division of {a} by zero")));
                }
                a / b
            }
            BinaryOp::Pow => a.powf(b),
        };
        finite(self.name(), v)
    }
}

fn domain(op: &'static str, detail: String) -> ExprError {
    ExprError::Domain { op, detail }
}

fn finite(op: &'static str, v: f64) -> Result<f64, ExprError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(domain(op, format!("result {v} is not finite")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
}

impl Node {
    fn eval(&self, slots: &[f64]) -> Result<f64, ExprError> {
        match self {
            Node::Const(c) => Ok(*c),
            Node::Var(s) => Ok(slots[*s]),
            Node::Unary(op, a) => op.apply(a.eval(slots)?),
            Node::Binary(op, a, b) => op.apply(a.eval(slots)?, b.eval(slots)?),
        }
    }

    fn collect_vars(&self, out: &mut Vec<usize>) {
        match self {
            Node::Const(_) => {}
            Node::Var(s) => {
                if !out.contains(s) {
                    out.push(*s);
                }
            }
            Node::Unary(_, a) => a.collect_vars(out),
            Node::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    fn write(&self, scope: &Scope, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) => {
                write!(f, "(-{:?})", -c)
            }
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var(s) => f.write_str(scope.slot_name(*s)),
            Node::Unary(UnaryOp::Neg, a) => {
                f.write_str("(-")?;
                a.write(scope, f)?;
                f.write_str(")")
            }
            Node::Unary(op, a) => {
                write!(f, "{}(", op.name())?;
                a.write(scope, f)?;
                f.write_str(")")
            }
            Node::Binary(op, a, b) => {
                f.write_str("(")?;
                a.write(scope, f)?;
                write!(f, " {} ", op.name())?;
                b.write(scope, f)?;
                f.write_str(")")
            }
        }
    }
}

/// A parsed expression together with the scope it was parsed against.
///
/// Immutable after construction; `Display` prints a fully parenthesized form
/// that reparses to an equivalent tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    root: Node,
    scope: Arc<Scope>,
}

impl Expr {
    pub fn parse(text: &str, scope: Arc<Scope>) -> Result<Self, ExprError> {
        let tokens = lex(text)?;
        let mut parser = Parser {
            tokens,
            pos: 0,
            scope: &scope,
        };
        let root = parser.expr()?;
        let tok = parser.peek();
        if tok.kind != Tok::End {
            return Err(ExprError::Syntax {
                offset: tok.offset,
                message: "unexpected trailing input".into(),
            });
        }
        Ok(Expr { root, scope })
    }

    pub fn from_node(root: Node, scope: Arc<Scope>) -> Self {
        Expr { root, scope }
    }

    pub fn constant(value: f64, scope: Arc<Scope>) -> Self {
        Expr {
            root: Node::Const(value),
            scope,
        }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn scope(&self) -> &Arc<Scope> {
        &self.scope
    }

    /// Evaluate with one value per scope slot.
    #[inline]
    pub fn eval_slots(&self, slots: &[f64]) -> Result<f64, ExprError> {
        if slots.len() != self.scope.len() {
            return Err(ExprError::SlotCount {
                expected: self.scope.len(),
                found: slots.len(),
            });
        }
        self.root.eval(slots)
    }

    /// Evaluate with named bindings. Only variables the expression references
    /// need to be bound.
    pub fn eval(&self, bindings: &HashMap<&str, f64>) -> Result<f64, ExprError> {
        let mut slots = vec![f64::NAN; self.scope.len()];
        for (name, value) in bindings {
            if let Some(s) = self.scope.lookup(name) {
                slots[s] = *value;
            }
        }
        for s in self.referenced_slots() {
            let bound = bindings
                .keys()
                .any(|name| self.scope.lookup(name) == Some(s));
            if !bound {
                return Err(ExprError::Unbound(self.scope.slot_name(s).to_string()));
            }
        }
        self.root.eval(&slots)
    }

    /// Slots the expression actually reads, in first-use order.
    pub fn referenced_slots(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.root.collect_vars(&mut out);
        out
    }

    /// Coefficients `(a, c)` such that the expression equals `a·slots + c`
    /// identically, or `None` if it is not recognizably affine.
    pub fn affine_coefficients(&self) -> Option<(Vec<f64>, f64)> {
        affine(&self.root, self.scope.len())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.write(&self.scope, f)
    }
}

/// Parse `text` with variables named by `vars` (slot `k` is `vars[k]`).
pub fn parse_expr<S: AsRef<str>>(text: &str, vars: &[S]) -> Result<Expr, ExprError> {
    Expr::parse(text, Arc::new(Scope::new(vars)))
}

/// Evaluate `expr` under named bindings.
pub fn eval_expr(expr: &Expr, bindings: &HashMap<&str, f64>) -> Result<f64, ExprError> {
    expr.eval(bindings)
}

fn affine(node: &Node, n: usize) -> Option<(Vec<f64>, f64)> {
    let is_const = |a: &[f64]| a.iter().all(|v| *v == 0.0);
    match node {
        Node::Const(c) => Some((vec![0.0; n], *c)),
        Node::Var(s) => {
            let mut a = vec![0.0; n];
            a[*s] = 1.0;
            Some((a, 0.0))
        }
        Node::Unary(UnaryOp::Neg, x) => {
            let (a, c) = affine(x, n)?;
            Some((a.into_iter().map(|v| -v).collect(), -c))
        }
        Node::Unary(op, x) => {
            let (a, c) = affine(x, n)?;
            if !is_const(&a) {
                return None;
            }
            Some((a, op.apply(c).ok()?))
        }
        Node::Binary(op, x, y) => {
            let (a, c) = affine(x, n)?;
            let (b, d) = affine(y, n)?;
            match op {
                BinaryOp::Add | BinaryOp::Sub => {
                    let sign = if *op == BinaryOp::Add { 1.0 } else { -1.0 };
                    let coef = a.iter().zip(&b).map(|(p, q)| p + sign * q).collect();
                    Some((coef, c + sign * d))
                }
                BinaryOp::Mul if is_const(&a) => Some((b.iter().map(|v| c * v).collect(), c * d)),
                BinaryOp::Mul if is_const(&b) => Some((a.iter().map(|v| d * v).collect(), c * d)),
                BinaryOp::Div if is_const(&b) && d != 0.0 => {
                    Some((a.iter().map(|v| v / d).collect(), c / d))
                }
                BinaryOp::Pow if is_const(&a) && is_const(&b) => Some((a, op.apply(c, d).ok()?)),
                _ => None,
            }
        }
    }
}

// ---------------------------------------------------------------------------
// lexer

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
    kind: Tok,
    offset: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let simple = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => Some(Tok::Plus),
            b'-' => Some(Tok::Minus),
            b'*' => Some(Tok::Star),
            b'/' => Some(Tok::Slash),
            b'^' => Some(Tok::Caret),
            b'(' => Some(Tok::LParen),
            b')' => Some(Tok::RParen),
            b',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(kind) = simple {
            out.push(Token {
                kind,
                offset: start,
            });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let lit = &text[start..i];
            let value: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                offset: start,
                message: format!("malformed number `{lit}`"),
            })?;
            out.push(Token {
                kind: Tok::Num(value),
                offset: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token {
                kind: Tok::Ident(text[start..i].to_string()),
                offset: start,
            });
            continue;
        }
        let ch = text[start..].chars().next().unwrap_or('?');
        return Err(ExprError::Syntax {
            offset: start,
            message: format!("unexpected character `{ch}`"),
        });
    }
    out.push(Token {
        kind: Tok::End,
        offset: text.len(),
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// recursive descent

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    scope: &'a Scope,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.kind != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, kind: Tok, what: &str) -> Result<Token, ExprError> {
        let t = self.bump();
        if t.kind == kind {
            Ok(t)
        } else {
            Err(ExprError::Syntax {
                offset: t.offset,
                message: format!("expected {what}"),
            })
        }
    }

    // expr := term (('+' | '-') term)*
    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                Tok::Plus => BinaryOp::Add,
                Tok::Minus => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // term := unary (('*' | '/') unary)*
    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                Tok::Star => BinaryOp::Mul,
                Tok::Slash => BinaryOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = Node::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    // unary := ('-' | '+') unary | power
    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.peek().kind {
            Tok::Minus => {
                self.bump();
                Ok(Node::Unary(UnaryOp::Neg, Box::new(self.unary()?)))
            }
            Tok::Plus => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    // power := primary ('^' exponent)*, exponent := '-' exponent | primary
    fn power(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.primary()?;
        while self.peek().kind == Tok::Caret {
            self.bump();
            let rhs = self.exponent()?;
            lhs = Node::Binary(BinaryOp::Pow, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn exponent(&mut self) -> Result<Node, ExprError> {
        if self.peek().kind == Tok::Minus {
            self.bump();
            return Ok(Node::Unary(UnaryOp::Neg, Box::new(self.exponent()?)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Node, ExprError> {
        let t = self.bump();
        match t.kind {
            Tok::Num(v) => Ok(Node::Const(v)),
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                if self.peek().kind == Tok::LParen {
                    return self.call(name, t.offset);
                }
                if let Some(slot) = self.scope.lookup(&name) {
                    Ok(Node::Var(slot))
                } else if name == "pi" {
                    Ok(Node::Const(std::f64::consts::PI))
                } else {
                    Err(ExprError::UnknownIdentifier {
                        name,
                        offset: t.offset,
                    })
                }
            }
            Tok::End => Err(ExprError::Syntax {
                offset: t.offset,
                message: "unexpected end of input".into(),
            }),
            _ => Err(ExprError::Syntax {
                offset: t.offset,
                message: "expected a number, variable, function call or `(`".into(),
            }),
        }
    }

    fn call(&mut self, name: String, offset: usize) -> Result<Node, ExprError> {
        let expected = if name == "pow" {
            2
        } else if UnaryOp::from_name(&name).is_some() {
            1
        } else {
            return Err(ExprError::UnknownIdentifier { name, offset });
        };
        self.expect(Tok::LParen, "`(`")?;
        let mut args = Vec::new();
        if self.peek().kind != Tok::RParen {
            args.push(self.expr()?);
            while self.peek().kind == Tok::Comma {
                self.bump();
                args.push(self.expr()?);
            }
        }
        self.expect(Tok::RParen, "`)` or `,`")?;
        if args.len() != expected {
            return Err(ExprError::Arity {
                name,
                offset,
                expected,
                found: args.len(),
            });
        }
        let mut args = args.into_iter();
        let first = Box::new(args.next().unwrap());
        Ok(match UnaryOp::from_name(&name) {
            Some(op) => Node::Unary(op, first),
            None => Node::Binary(BinaryOp::Pow, first, Box::new(args.next().unwrap())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn eval1(text: &str, vars: &[&str], vals: &[f64]) -> f64 {
        parse_expr(text, vars).unwrap().eval_slots(vals).unwrap()
    }

    #[test]
    fn drift_of_first_mode() {
        let v = eval1("-1.1*x1 + 0.2*y1", &["x1", "y1"], &[1.0, 1.0]);
        assert!((v - (-0.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_constant() {
        let e = parse_expr::<&str>("0", &[]).unwrap();
        assert_eq!(e.root(), &Node::Const(0.0));
        assert_eq!(e.eval_slots(&[]).unwrap(), 0.0);
    }

    #[test]
    fn delay_at_origin() {
        assert_eq!(eval1("2 - cos(t)", &["t"], &[0.0]), 1.0);
    }

    #[test]
    fn named_bindings() {
        let e = parse_expr("0.3*x1*cos(y1)", &["x1", "y1"]).unwrap();
        let b = HashMap::from([("x1", 1.0), ("y1", 0.0)]);
        assert!((eval_expr(&e, &b).unwrap() - 0.3).abs() < 1e-15);

        let e = parse_expr("x1 - x1", &["x1"]).unwrap();
        for x in [-3.5, 0.0, 1e10] {
            assert_eq!(eval_expr(&e, &HashMap::from([("x1", x)])).unwrap(), 0.0);
        }

        let e = parse_expr("0.2*sin(y1)", &["y1"]).unwrap();
        let v = eval_expr(&e, &HashMap::from([("y1", PI / 2.0)])).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn unbound_variable() {
        let e = parse_expr("x1 + y1", &["x1", "y1"]).unwrap();
        let err = eval_expr(&e, &HashMap::from([("x1", 1.0)])).unwrap_err();
        assert_eq!(err, ExprError::Unbound("y1".into()));
        // unreferenced variables need not be bound
        let e = parse_expr("2*x1", &["x1", "y1"]).unwrap();
        assert_eq!(eval_expr(&e, &HashMap::from([("x1", 1.5)])).unwrap(), 3.0);
    }

    #[test]
    fn precedence() {
        assert_eq!(eval1("-2^2", &[], &[]), -4.0);
        assert_eq!(eval1("2^-1", &[], &[]), 0.5);
        assert_eq!(eval1("1 + 2*3", &[], &[]), 7.0);
        assert_eq!(eval1("8 / 4 / 2", &[], &[]), 1.0);
        assert_eq!(eval1("2^3^2", &[], &[]), 64.0);
        assert_eq!(eval1("-x*3", &["x"], &[2.0]), -6.0);
        assert_eq!(eval1("10 - 4 - 3", &[], &[]), 3.0);
        assert_eq!(eval1("pow(2, 10)", &[], &[]), 1024.0);
        assert_eq!(eval1("1.5e2 + .5", &[], &[]), 150.5);
        assert_eq!(eval1("sqrt(abs(-16)) + exp(0) + ln(1)", &[], &[]), 5.0);
        assert!((eval1("sin(pi/2)", &[], &[]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_aliases() {
        let scope = Arc::new(Scope::state_pair(1));
        let e = Expr::parse("x*cos(y) + x1 - y1", scope).unwrap();
        assert_eq!(e.eval_slots(&[2.0, 0.0]).unwrap(), 2.0 + 2.0);
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse_expr("1 + * 2", &["x"]) {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        match parse_expr("(1 + 2", &["x"]) {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
        match parse_expr("1 $ 2", &["x"]) {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_expr("", &["x"]),
            Err(ExprError::Syntax { offset: 0, .. })
        ));
        assert!(matches!(
            parse_expr("1 2", &["x"]),
            Err(ExprError::Syntax { offset: 2, .. })
        ));
    }

    #[test]
    fn unknown_identifiers_and_arity() {
        assert_eq!(
            parse_expr("x + z", &["x"]).unwrap_err(),
            ExprError::UnknownIdentifier {
                name: "z".into(),
                offset: 4
            }
        );
        assert!(matches!(
            parse_expr("tan(x)", &["x"]),
            Err(ExprError::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            parse_expr("sin(x, x)", &["x"]),
            Err(ExprError::Arity {
                expected: 1,
                found: 2,
                ..
            })
        ));
        assert!(matches!(
            parse_expr("pow(x)", &["x"]),
            Err(ExprError::Arity {
                expected: 2,
                found: 1,
                ..
            })
        ));
    }

    #[test]
    fn domain_errors() {
        let ln = parse_expr("ln(x)", &["x"]).unwrap();
        assert!(matches!(
            ln.eval_slots(&[0.0]),
            Err(ExprError::Domain { op: "ln", .. })
        ));
        assert!(matches!(
            ln.eval_slots(&[-1.0]),
            Err(ExprError::Domain { .. })
        ));
        let div = parse_expr("x / (x - x)", &["x"]).unwrap();
        assert!(matches!(
            div.eval_slots(&[0.0]),
            Err(ExprError::Domain { op: "/", .. })
        ));
        assert!(matches!(
            div.eval_slots(&[1.0]),
            Err(ExprError::Domain { .. })
        ));
        let sqrt = parse_expr("sqrt(x)", &["x"]).unwrap();
        assert!(sqrt.eval_slots(&[-1.0]).is_err());
        let ovf = parse_expr("exp(x)", &["x"]).unwrap();
        assert!(ovf.eval_slots(&[1000.0]).is_err());
    }

    #[test]
    fn affine_detection() {
        let scope = Arc::new(Scope::state_pair(1));
        let e = Expr::parse("-1.1*x + 0.2*y", scope.clone()).unwrap();
        assert_eq!(e.affine_coefficients(), Some((vec![-1.1, 0.2], 0.0)));
        let e = Expr::parse("(x - 2*y)/4 + 1", scope.clone()).unwrap();
        assert_eq!(e.affine_coefficients(), Some((vec![0.25, -0.5], 1.0)));
        let e = Expr::parse("0.3*x*cos(y)", scope.clone()).unwrap();
        assert_eq!(e.affine_coefficients(), None);
        let e = Expr::parse("x*y", scope).unwrap();
        assert_eq!(e.affine_coefficients(), None);
    }

    fn arb_node(nvars: usize) -> impl Strategy<Value = Node> {
        let leaf = prop_oneof![
            (-50.0f64..50.0).prop_map(Node::Const),
            (0..nvars).prop_map(Node::Var),
        ];
        leaf.prop_recursive(5, 40, 2, |inner| {
            prop_oneof![
                (
                    prop_oneof![
                        Just(UnaryOp::Neg),
                        Just(UnaryOp::Sin),
                        Just(UnaryOp::Cos),
                        Just(UnaryOp::Abs),
                    ],
                    inner.clone()
                )
                    .prop_map(|(op, a)| Node::Unary(op, Box::new(a))),
                (
                    prop_oneof![
                        Just(BinaryOp::Add),
                        Just(BinaryOp::Sub),
                        Just(BinaryOp::Mul),
                        Just(BinaryOp::Div),
                        Just(BinaryOp::Pow),
                    ],
                    inner.clone(),
                    inner
                )
                    .prop_map(|(op, a, b)| Node::Binary(
                        op,
                        Box::new(a),
                        Box::new(b)
                    )),
            ]
        })
    }

    proptest! {
        #[test]
        fn pretty_print_reparses(node in arb_node(3), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let scope = Arc::new(Scope::new(&["x1", "x2", "t"]));
            let original = Expr::from_node(node, scope.clone());
            let text = original.to_string();
            let reparsed = Expr::parse(&text, scope).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let vals: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
                let a = original.eval_slots(&vals);
                let b = reparsed.eval_slots(&vals);
                match (a, b) {
                    (Ok(a), Ok(b)) => prop_assert_eq!(a.to_bits(), b.to_bits()),
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "{text}: {a:?} vs {b:?}"),
                }
            }
        }

        #[test]
        fn evaluation_is_pure(node in arb_node(2), x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let e = Expr::from_node(node, Arc::new(Scope::new(&["x1", "y1"])));
            let a = e.eval_slots(&[x, y]).map(f64::to_bits);
            let b = e.eval_slots(&[x, y]).map(f64::to_bits);
            prop_assert_eq!(a, b);
        }
    }
}
