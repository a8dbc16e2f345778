//! Scalar expression language used to write problem coefficients in
//! configuration files.
//!
//! Grammar (lowest to highest precedence, all binary operators left
//! associative):
//!
//! ```text
//! expr    := term   (('+' | '-') term)*
//! term    := unary  (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' exponent)*
//! exponent:= '-' exponent | primary
//! primary := number | variable | function '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! So `-x1^2` is `-(x1^2)`, `2^3^2` is `(2^3)^2`, and `-a*b` is `(-a)*b`.
//! Variables are `t`, `x1..xn`, `y`, `z1..zd`, `u1..uk`. Functions:
//! `sin cos exp tanh abs sqrt` (one argument) and `min max` (two).

mod parser;
mod tape;

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub use parser::parse;
pub use tape::Tape;

/// Declared sizes of the state, Brownian and control vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

impl Dims {
    pub fn new(n: usize, d: usize, k: usize) -> Self {
        Self { n, d, k }
    }
}

/// A resolved variable reference. Indices are zero based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X(usize),
    Y,
    Z(usize),
    U(usize),
}

impl Var {
    fn resolve(name: &str, dims: Dims) -> Option<Var> {
        if name == "t" {
            return Some(Var::T);
        }
        if name == "y" {
            return Some(Var::Y);
        }
        let (head, tail) = name.split_at(1);
        let idx: usize = tail.parse().ok()?;
        if idx == 0 || tail.starts_with('0') {
            return None;
        }
        match head {
            "x" if idx <= dims.n => Some(Var::X(idx - 1)),
            "z" if idx <= dims.d => Some(Var::Z(idx - 1)),
            "u" if idx <= dims.k => Some(Var::U(idx - 1)),
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Var::T => "t".into(),
            Var::Y => "y".into(),
            Var::X(i) => format!("x{}", i + 1),
            Var::Z(i) => format!("z{}", i + 1),
            Var::U(i) => format!("u{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
    Sqrt,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "tanh" => Func::Tanh,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Min => "min",
            Func::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("empty expression")]
    Empty,
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier \"{name}\" at offset {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("function {name} expects {expected} argument(s), got {got} (offset {offset})")]
    Arity {
        offset: usize,
        name: &'static str,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("sqrt of negative value {0}")]
    SqrtOfNegative(f64),
    #[error("power {base}^{exponent} is undefined")]
    InvalidPower { base: f64, exponent: f64 },
    #[error("missing binding for variable {0}")]
    MissingBinding(String),
}

/// Values for every variable an expression may reference.
#[derive(Debug, Clone, Copy)]
pub struct Bindings<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub u: &'a [f64],
}

impl Bindings<'_> {
    #[inline]
    pub fn get(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::Y => self.y,
            Var::X(i) => self.x[i],
            Var::Z(i) => self.z[i],
            Var::U(i) => self.u[i],
        }
    }
}

#[inline]
pub(crate) fn apply_bin(op: BinOp, a: f64, b: f64) -> Result<f64, EvalError> {
    match op {
        BinOp::Add => Ok(a + b),
        BinOp::Sub => Ok(a - b),
        BinOp::Mul => Ok(a * b),
        BinOp::Div => {
            if b == 0.0 {
                Err(EvalError::DivisionByZero)
            } else {
                Ok(a / b)
            }
        }
        BinOp::Pow => {
            let r = a.powf(b);
            if r.is_nan() && !a.is_nan() && !b.is_nan() {
                Err(EvalError::InvalidPower {
                    base: a,
                    exponent: b,
                })
            } else {
                Ok(r)
            }
        }
    }
}

#[inline]
pub(crate) fn apply_unary(f: Func, a: f64) -> Result<f64, EvalError> {
    Ok(match f {
        Func::Sin => a.sin(),
        Func::Cos => a.cos(),
        Func::Exp => a.exp(),
        Func::Tanh => a.tanh(),
        Func::Abs => a.abs(),
        Func::Sqrt => {
            if a < 0.0 {
                return Err(EvalError::SqrtOfNegative(a));
            }
            a.sqrt()
        }
        Func::Min | Func::Max => unreachable!("binary function applied as unary"),
    })
}

impl Expr {
    /// Tree-walk evaluation.
    pub fn eval(&self, b: &Bindings<'_>) -> Result<f64, EvalError> {
        self.eval_with(&|v| Ok(b.get(v)))
    }

    /// Evaluate with bindings given by variable name (`"x1"`, `"u2"`, ...).
    pub fn eval_named(&self, bindings: &HashMap<String, f64>) -> Result<f64, EvalError> {
        self.eval_with(&|v| {
            let name = v.name();
            bindings
                .get(&name)
                .copied()
                .ok_or(EvalError::MissingBinding(name))
        })
    }

    fn eval_with(&self, lookup: &dyn Fn(Var) -> Result<f64, EvalError>) -> Result<f64, EvalError> {
        match self {
            Expr::Num(v) => Ok(*v),
            Expr::Var(v) => lookup(*v),
            Expr::Neg(a) => Ok(-a.eval_with(lookup)?),
            Expr::Bin(op, a, b) => {
                let a = a.eval_with(lookup)?;
                let b = b.eval_with(lookup)?;
                apply_bin(*op, a, b)
            }
            Expr::Call(f, args) => match f {
                Func::Min => Ok(args[0].eval_with(lookup)?.min(args[1].eval_with(lookup)?)),
                Func::Max => Ok(args[0].eval_with(lookup)?.max(args[1].eval_with(lookup)?)),
                _ => apply_unary(*f, args[0].eval_with(lookup)?),
            },
        }
    }

    /// True when the expression references a variable matching `pred`.
    pub fn references(&self, pred: &dyn Fn(Var) -> bool) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => pred(*v),
            Expr::Neg(a) => a.references(pred),
            Expr::Bin(_, a, b) => a.references(pred) || b.references(pred),
            Expr::Call(_, args) => args.iter().any(|a| a.references(pred)),
        }
    }

    pub fn compile(&self) -> Tape {
        Tape::compile(self)
    }
}

/// Fully parenthesized rendering that reparses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => write!(f, "{}", v.name()),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d111() -> Dims {
        Dims::new(1, 1, 1)
    }

    fn named(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn parses_control_drift() {
        let e = parse("x1 + 2*u1", d111()).unwrap();
        assert_eq!(
            e,
            Expr::Bin(
                BinOp::Add,
                Box::new(Expr::Var(Var::X(0))),
                Box::new(Expr::Bin(
                    BinOp::Mul,
                    Box::new(Expr::Num(2.0)),
                    Box::new(Expr::Var(Var::U(0)))
                ))
            )
        );
    }

    #[test]
    fn parses_z_coupled_diffusion() {
        let e = parse("1 + 0.5*z1", d111()).unwrap();
        assert_eq!(
            e,
            Expr::Bin(
                BinOp::Add,
                Box::new(Expr::Num(1.0)),
                Box::new(Expr::Bin(
                    BinOp::Mul,
                    Box::new(Expr::Num(0.5)),
                    Box::new(Expr::Var(Var::Z(0)))
                ))
            )
        );
    }

    #[test]
    fn rejects_undeclared_state_index() {
        let err = parse("x2 + 1", d111()).unwrap_err();
        assert_eq!(
            err,
            ParseError::UnknownIdentifier {
                offset: 0,
                name: "x2".into()
            }
        );
    }

    #[test]
    fn eval_examples() {
        let e = parse("x1 + 2*u1", d111()).unwrap();
        assert_eq!(
            e.eval_named(&named(&[("x1", 3.0), ("u1", 0.5)])).unwrap(),
            4.0
        );
        let e = parse("exp(0)", d111()).unwrap();
        assert_eq!(e.eval_named(&HashMap::new()).unwrap(), 1.0);
        let e = parse("min(1, u1^2)", d111()).unwrap();
        assert_eq!(e.eval_named(&named(&[("u1", 2.0)])).unwrap(), 1.0);
    }

    #[test]
    fn precedence_and_associativity() {
        let ev = |s: &str| {
            parse(s, d111())
                .unwrap()
                .eval_named(&HashMap::new())
                .unwrap()
        };
        assert_eq!(ev("-2^2"), -4.0);
        assert_eq!(ev("2^3^2"), 64.0);
        assert_eq!(ev("2^-1"), 0.5);
        assert_eq!(ev("8/4/2"), 1.0);
        assert_eq!(ev("10-3-2"), 5.0);
        assert_eq!(ev("-3*2"), -6.0);
        assert_eq!(ev("1+2*3^2"), 19.0);
        assert_eq!(ev("max(-1, -(2))"), -1.0);
        assert_eq!(ev("1.5e1 + 2E-1"), 15.2);
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse("(x1 + 1", d111()).unwrap_err() {
            ParseError::Syntax { offset, .. } => assert_eq!(offset, 7),
            e => panic!("unexpected {e:?}"),
        }
        match parse("x1 $ 2", d111()).unwrap_err() {
            ParseError::Syntax { offset, .. } => assert_eq!(offset, 3),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(
            parse("1 +", d111()),
            Err(ParseError::Syntax { .. })
        ));
        assert!(matches!(
            parse("1 2", d111()),
            Err(ParseError::Syntax { .. })
        ));
        assert_eq!(parse("   ", d111()), Err(ParseError::Empty));
        assert!(matches!(
            parse("1e999", d111()),
            Err(ParseError::Syntax { .. })
        ));
    }

    #[test]
    fn arity_and_unknown_functions() {
        assert!(matches!(
            parse("min(1)", d111()),
            Err(ParseError::Arity {
                expected: 2,
                got: 1,
                ..
            })
        ));
        assert!(matches!(
            parse("sin(1, 2)", d111()),
            Err(ParseError::Arity {
                expected: 1,
                got: 2,
                ..
            })
        ));
        assert!(matches!(
            parse("foo(1)", d111()),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            parse("x0", d111()),
            Err(ParseError::UnknownIdentifier { .. })
        ));
        assert!(matches!(
            parse("u01", d111()),
            Err(ParseError::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn domain_errors() {
        let e = parse("1/(x1-1)", d111()).unwrap();
        assert_eq!(
            e.eval_named(&named(&[("x1", 1.0)])),
            Err(EvalError::DivisionByZero)
        );
        let e = parse("sqrt(x1)", d111()).unwrap();
        assert_eq!(
            e.eval_named(&named(&[("x1", -1.0)])),
            Err(EvalError::SqrtOfNegative(-1.0))
        );
        let e = parse("x1 + y", d111()).unwrap();
        assert_eq!(
            e.eval_named(&named(&[("x1", 1.0)])),
            Err(EvalError::MissingBinding("y".into()))
        );
    }

    #[test]
    fn tape_matches_tree_on_corpus() {
        let dims = Dims::new(2, 2, 1);
        let corpus = [
            "x1 + 2*u1",
            "1 + 0.5*z1 - z2/3",
            "sin(x1)*cos(x2) + exp(-t) - tanh(y)^2",
            "min(abs(x1), sqrt(x2^2 + 1)) / (1 + max(u1, 0.25))",
            "-x1^2 - -x2 * (y - 2)^3",
            "2^-t^2",
        ];
        let mut rng = 0x1234_5678_u64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
        };
        for src in corpus {
            let e = parse(src, dims).unwrap();
            let tape = e.compile();
            for _ in 0..200 {
                let x = [next(), next()];
                let z = [next(), next()];
                let u = [next()];
                let b = Bindings {
                    t: next().abs(),
                    x: &x,
                    y: next(),
                    z: &z,
                    u: &u,
                };
                let a = e.eval(&b);
                let c = tape.eval(&b);
                match (a, c) {
                    (Ok(a), Ok(c)) => assert_eq!(a.to_bits(), c.to_bits(), "{src}"),
                    (Err(a), Err(c)) => assert_eq!(a, c),
                    (a, c) => panic!("{src}: tree {a:?} vs tape {c:?}"),
                }
            }
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0.0f64..10.0).prop_map(Expr::Num),
            Just(Expr::Var(Var::X(0))),
            Just(Expr::Var(Var::U(0))),
            Just(Expr::Var(Var::T)),
            Just(Expr::Var(Var::Z(0))),
        ];
        leaf.prop_recursive(5, 40, 3, |inner| {
            prop_oneof![
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                (inner.clone(), inner.clone(), 0..4usize).prop_map(|(a, b, op)| {
                    let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div][op];
                    Expr::Bin(op, Box::new(a), Box::new(b))
                }),
                (inner.clone(), 0..3u32).prop_map(|(a, p)| {
                    Expr::Bin(BinOp::Pow, Box::new(a), Box::new(Expr::Num(p as f64)))
                }),
                inner.clone().prop_map(|a| Expr::Call(Func::Sin, vec![a])),
                inner.clone().prop_map(|a| Expr::Call(Func::Tanh, vec![a])),
                (inner.clone(), inner).prop_map(|(a, b)| Expr::Call(Func::Max, vec![a, b])),
            ]
        })
    }

    proptest! {
        #[test]
        fn pretty_print_round_trip(e in arb_expr(), seeds in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.0f64..1.0, -5.0f64..5.0), 1000)) {
            let printed = e.to_string();
            let back = parse(&printed, d111()).unwrap();
            for (x, u, t, z) in seeds {
                let xs = [x];
                let us = [u];
                let zs = [z];
                let b = Bindings { t, x: &xs, y: 0.0, z: &zs, u: &us };
                match (e.eval(&b), back.eval(&b)) {
                    (Ok(a), Ok(c)) => prop_assert!(a.to_bits() == c.to_bits() || (a.is_nan() && c.is_nan())),
                    (Err(a), Err(c)) => prop_assert_eq!(a, c),
                    (a, c) => prop_assert!(false, "mismatch {:?} vs {:?}", a, c),
                }
            }
        }

        #[test]
        fn product_binds_tighter_than_sum(a in -100.0f64..100.0, b in -100.0f64..100.0, c in -100.0f64..100.0) {
            let dims = Dims::new(3, 1, 0);
            let bind = [a, b, c];
            let z = [0.0];
            let bb = Bindings { t: 0.0, x: &bind, y: 0.0, z: &z, u: &[] };
            let lhs = parse("x1+x2*x3", dims).unwrap().eval(&bb).unwrap();
            let rhs = parse("x1+(x2*x3)", dims).unwrap().eval(&bb).unwrap();
            prop_assert_eq!(lhs.to_bits(), rhs.to_bits());
        }
    }
}
