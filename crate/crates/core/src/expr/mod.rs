//! Expression trees and their token representation.
//!
//! An [`Expr`] is an immutable unary-binary tree whose leaves are variables,
//! numeric constants or the constant placeholder `C`. Trees serialize to a
//! unique prefix (Polish) token sequence, see [`prefix`].
//!
//! Two expressions are *structurally* equal when their placeholder-mode
//! serializations agree: numeric constants and placeholders are
//! interchangeable for that purpose. [`Expr::strip_constants`] undoes the
//! constant injection of the generator and [`Expr::canonical_key`] turns the
//! stripped tree into a lookup string.

mod prefix;
mod token;
mod vocab;

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub use prefix::{
    deficit_after, deserialize, deserialize_with_constants, is_complete, serialize, ConstantMode,
    Serialized,
};
pub use token::{format_tokens, parse_tokens, BinaryOp, Token, UnaryOp};
pub use vocab::{Vocabulary, VocabularyError};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ExprError {
    #[error("malformed token sequence at position {position}: {reason}")]
    MalformedSequence { position: usize, reason: &'static str },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("constant in a position the injection grammar cannot produce")]
    IrreducibleConstant,
    #[error("expression still contains a constant placeholder")]
    PlaceholderPresent,
    #[error("variable x_{index} is outside the {dims}-dimensional input")]
    VariableOutOfRange { index: usize, dims: usize },
    #[error("expected {expected} constant values, got {got}")]
    ConstantCount { expected: usize, got: usize },
}

/// How [`Expr::canonical_key`] treats operand order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyMode {
    /// Operand order matters everywhere.
    #[default]
    Strict,
    /// Operands of `add` and `mul` are sorted before serialization.
    CommutativeNormalized,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    /// Variable `x_i`, 1-based.
    Var(usize),
    Const(f64),
    Placeholder,
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

#[allow(clippy::should_implement_trait)]
impl Expr {
    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn unary(op: UnaryOp, child: Expr) -> Expr {
        Expr::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, left: Expr, right: Expr) -> Expr {
        Expr::Binary(op, Box::new(left), Box::new(right))
    }

    pub fn add(l: Expr, r: Expr) -> Expr {
        Expr::binary(BinaryOp::Add, l, r)
    }

    pub fn sub(l: Expr, r: Expr) -> Expr {
        Expr::binary(BinaryOp::Sub, l, r)
    }

    pub fn mul(l: Expr, r: Expr) -> Expr {
        Expr::binary(BinaryOp::Mul, l, r)
    }

    /// Depth with a single leaf counting as 1.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Placeholder => 1,
            Expr::Unary(_, c) => 1 + c.depth(),
            Expr::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Placeholder => 1,
            Expr::Unary(_, c) => 1 + c.node_count(),
            Expr::Binary(_, l, r) => 1 + l.node_count() + r.node_count(),
        }
    }

    pub fn is_constant_leaf(&self) -> bool {
        matches!(self, Expr::Const(_) | Expr::Placeholder)
    }

    /// Number of `Const` and `Placeholder` leaves.
    pub fn constant_count(&self) -> usize {
        self.fold_leaves(0, &mut |acc, e| acc + usize::from(e.is_constant_leaf()))
    }

    pub fn placeholder_count(&self) -> usize {
        self.fold_leaves(0, &mut |acc, e| acc + usize::from(matches!(e, Expr::Placeholder)))
    }

    pub fn contains_variable(&self) -> bool {
        match self {
            Expr::Var(_) => true,
            Expr::Const(_) | Expr::Placeholder => false,
            Expr::Unary(_, c) => c.contains_variable(),
            Expr::Binary(_, l, r) => l.contains_variable() || r.contains_variable(),
        }
    }

    /// Largest variable index used, 0 when there is none.
    pub fn max_var(&self) -> usize {
        self.fold_leaves(0, &mut |acc, e| match e {
            Expr::Var(i) => acc.max(*i),
            _ => acc,
        })
    }

    fn fold_leaves<A>(&self, acc: A, f: &mut impl FnMut(A, &Expr) -> A) -> A {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Placeholder => f(acc, self),
            Expr::Unary(_, c) => c.fold_leaves(acc, f),
            Expr::Binary(_, l, r) => {
                let acc = l.fold_leaves(acc, f);
                r.fold_leaves(acc, f)
            }
        }
    }

    /// Numeric constants in pre-order.
    pub fn constants(&self) -> Vec<f64> {
        self.fold_leaves(Vec::new(), &mut |mut acc, e| {
            if let Expr::Const(c) = e {
                acc.push(*c);
            }
            acc
        })
    }

    /// Replaces every numeric constant with `C`.
    pub fn to_placeholders(&self) -> Expr {
        self.map_leaves(&mut |e| match e {
            Expr::Const(_) => Expr::Placeholder,
            other => other.clone(),
        })
    }

    /// Replaces placeholders, in pre-order, with `values`.
    pub fn fill_placeholders(&self, values: &[f64]) -> Result<Expr, ExprError> {
        let expected = self.placeholder_count();
        if expected != values.len() {
            return Err(ExprError::ConstantCount { expected, got: values.len() });
        }
        let mut it = values.iter();
        Ok(self.map_leaves(&mut |e| match e {
            Expr::Placeholder => Expr::Const(*it.next().expect("count checked")),
            other => other.clone(),
        }))
    }

    fn map_leaves(&self, f: &mut impl FnMut(&Expr) -> Expr) -> Expr {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Placeholder => f(self),
            Expr::Unary(op, c) => Expr::Unary(*op, Box::new(c.map_leaves(f))),
            Expr::Binary(op, l, r) => {
                let l = l.map_leaves(f);
                let r = r.map_leaves(f);
                Expr::Binary(*op, Box::new(l), Box::new(r))
            }
        }
    }

    /// Evaluates at one input point.
    ///
    /// Non-finite intermediates propagate; the result is then non-finite too.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, ExprError> {
        if self.placeholder_count() > 0 {
            return Err(ExprError::PlaceholderPresent);
        }
        let m = self.max_var();
        if m > x.len() {
            return Err(ExprError::VariableOutOfRange { index: m, dims: x.len() });
        }
        Ok(self.eval_with(x, &[]))
    }

    /// Evaluates with placeholders bound, in pre-order, to `consts`.
    ///
    /// Callers guarantee `consts.len() == self.placeholder_count()` and that
    /// every variable index is within `x`.
    pub fn eval_with(&self, x: &[f64], consts: &[f64]) -> f64 {
        let mut next = 0usize;
        self.eval_rec(x, consts, &mut next)
    }

    fn eval_rec(&self, x: &[f64], consts: &[f64], next: &mut usize) -> f64 {
        match self {
            Expr::Var(i) => x[*i - 1],
            Expr::Const(c) => *c,
            Expr::Placeholder => {
                let v = consts[*next];
                *next += 1;
                v
            }
            Expr::Unary(op, c) => op.apply(c.eval_rec(x, consts, next)),
            Expr::Binary(op, l, r) => {
                let a = l.eval_rec(x, consts, next);
                let b = r.eval_rec(x, consts, next);
                op.apply(a, b)
            }
        }
    }

    /// Removes injected constants: `c*u(..)` becomes `u(..)` and `c*x + c'`
    /// becomes `x`; any constant that multiplies or is added to a
    /// subexpression is dropped.
    ///
    /// Constants anywhere else (the sole child of an operator, an operand of
    /// `sub`/`div`, or the whole expression) are reported as
    /// [`ExprError::IrreducibleConstant`].
    pub fn strip_constants(&self) -> Result<Expr, ExprError> {
        match self {
            Expr::Var(i) => Ok(Expr::Var(*i)),
            Expr::Const(_) | Expr::Placeholder => Err(ExprError::IrreducibleConstant),
            Expr::Unary(op, c) => Ok(Expr::unary(*op, c.strip_constants()?)),
            Expr::Binary(op @ (BinaryOp::Add | BinaryOp::Mul), l, r) => {
                if l.is_constant_leaf() {
                    r.strip_constants()
                } else if r.is_constant_leaf() {
                    l.strip_constants()
                } else {
                    Ok(Expr::binary(*op, l.strip_constants()?, r.strip_constants()?))
                }
            }
            Expr::Binary(op, l, r) => {
                Ok(Expr::binary(*op, l.strip_constants()?, r.strip_constants()?))
            }
        }
    }

    /// Placeholder-mode prefix tokens.
    pub fn tokens(&self) -> Vec<Token> {
        serialize(self, ConstantMode::Placeholder).tokens
    }

    /// Length of the prefix serialization.
    pub fn token_len(&self) -> usize {
        self.node_count()
    }

    /// Structural identity string: the placeholder-mode serialization.
    pub fn structure_key(&self) -> String {
        format_tokens(&self.tokens())
    }

    /// Lookup key of the constant-stripped tree.
    pub fn canonical_key(&self, mode: KeyMode) -> Result<String, ExprError> {
        let stripped = self.strip_constants()?;
        Ok(match mode {
            KeyMode::Strict => stripped.structure_key(),
            KeyMode::CommutativeNormalized => stripped.commutative_normal_form().structure_key(),
        })
    }

    /// Sorts operands of `add`/`mul` by their serialization, bottom-up.
    pub fn commutative_normal_form(&self) -> Expr {
        match self {
            Expr::Var(_) | Expr::Const(_) | Expr::Placeholder => self.clone(),
            Expr::Unary(op, c) => Expr::unary(*op, c.commutative_normal_form()),
            Expr::Binary(op, l, r) => {
                let l = l.commutative_normal_form();
                let r = r.commutative_normal_form();
                if op.is_commutative() && r.structure_key() < l.structure_key() {
                    Expr::binary(*op, r, l)
                } else {
                    Expr::binary(*op, l, r)
                }
            }
        }
    }

    /// Distinct rooted subtrees that contain at least one variable.
    ///
    /// Subtrees are returned in placeholder form, deduplicated structurally,
    /// in pre-order of first occurrence.
    pub fn subtrees(&self) -> Vec<Expr> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        self.collect_subtrees(&mut seen, &mut out);
        out
    }

    fn collect_subtrees(&self, seen: &mut BTreeSet<String>, out: &mut Vec<Expr>) {
        if self.contains_variable() {
            let normalized = self.to_placeholders();
            if seen.insert(normalized.structure_key()) {
                out.push(normalized);
            }
        }
        match self {
            Expr::Unary(_, c) => c.collect_subtrees(seen, out),
            Expr::Binary(_, l, r) => {
                l.collect_subtrees(seen, out);
                r.collect_subtrees(seen, out);
            }
            _ => {}
        }
    }

    /// True when `sub` occurs as a subtree (structurally).
    pub fn contains_subtree(&self, sub: &Expr) -> bool {
        let key = sub.to_placeholders().structure_key();
        self.subtrees().iter().any(|s| s.structure_key() == key)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Var(i) => write!(f, "x_{i}"),
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Placeholder => f.write_str("C"),
            Expr::Unary(op, c) => write!(f, "{}({c})", op.symbol()),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.infix()),
        }
    }
}
