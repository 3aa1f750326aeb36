//! Prefix (Polish) serialization.
//!
//! The arity deficit of a token prefix is `1 + Σ (arity − 1)` over its
//! tokens. A serialization is well formed when the deficit is positive after
//! every proper prefix and exactly zero at the end.

use alloc::boxed::Box;
use alloc::vec::Vec;

use super::{Expr, ExprError, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstantMode {
    /// Numeric constants are emitted as `C` and their values carried in
    /// [`Serialized::constants`]; placeholders are carried as NaN.
    KeepValues,
    /// Numeric constants are emitted as `C` and their values dropped.
    Placeholder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Serialized {
    pub tokens: Vec<Token>,
    /// One value per `C` token in `KeepValues` mode, empty otherwise.
    pub constants: Vec<f64>,
}

pub fn serialize(e: &Expr, mode: ConstantMode) -> Serialized {
    let mut out = Serialized { tokens: Vec::with_capacity(e.node_count()), constants: Vec::new() };
    emit(e, mode, &mut out);
    out
}

fn emit(e: &Expr, mode: ConstantMode, out: &mut Serialized) {
    match e {
        Expr::Var(i) => out.tokens.push(Token::Var(*i)),
        Expr::Const(c) => {
            out.tokens.push(Token::Const);
            if mode == ConstantMode::KeepValues {
                out.constants.push(*c);
            }
        }
        Expr::Placeholder => {
            out.tokens.push(Token::Const);
            if mode == ConstantMode::KeepValues {
                out.constants.push(f64::NAN);
            }
        }
        Expr::Unary(op, c) => {
            out.tokens.push(Token::Unary(*op));
            emit(c, mode, out);
        }
        Expr::Binary(op, l, r) => {
            out.tokens.push(Token::Binary(*op));
            emit(l, mode, out);
            emit(r, mode, out);
        }
    }
}

/// Deficit after consuming `tokens`, validating that the prefix never
/// completes early and contains only expression tokens.
///
/// The empty prefix has deficit 1.
pub fn deficit_after(tokens: &[Token]) -> Result<usize, ExprError> {
    let mut deficit = 1usize;
    for (position, t) in tokens.iter().enumerate() {
        if deficit == 0 {
            return Err(ExprError::MalformedSequence {
                position,
                reason: "token after a complete expression",
            });
        }
        let arity = t.arity().ok_or(ExprError::MalformedSequence {
            position,
            reason: "marker token inside an expression",
        })?;
        deficit = deficit - 1 + arity;
    }
    Ok(deficit)
}

pub fn is_complete(tokens: &[Token]) -> bool {
    !tokens.is_empty() && deficit_after(tokens) == Ok(0)
}

/// Parses a complete serialization; every `C` becomes a placeholder.
pub fn deserialize(tokens: &[Token]) -> Result<Expr, ExprError> {
    check_complete(tokens)?;
    let mut pos = 0;
    Ok(build(tokens, &mut pos, &mut || Expr::Placeholder))
}

/// Parses a complete serialization, binding `C` tokens in order to
/// `constants`. NaN values become placeholders.
pub fn deserialize_with_constants(tokens: &[Token], constants: &[f64]) -> Result<Expr, ExprError> {
    check_complete(tokens)?;
    let expected = tokens.iter().filter(|t| **t == Token::Const).count();
    if expected != constants.len() {
        return Err(ExprError::ConstantCount { expected, got: constants.len() });
    }
    let mut pos = 0;
    let mut values = constants.iter();
    Ok(build(tokens, &mut pos, &mut || {
        let v = *values.next().expect("count checked");
        if v.is_nan() {
            Expr::Placeholder
        } else {
            Expr::Const(v)
        }
    }))
}

fn check_complete(tokens: &[Token]) -> Result<(), ExprError> {
    match deficit_after(tokens)? {
        0 if !tokens.is_empty() => Ok(()),
        _ => Err(ExprError::MalformedSequence {
            position: tokens.len(),
            reason: "sequence ends before the expression is complete",
        }),
    }
}

// Input validated by `check_complete`.
fn build(tokens: &[Token], pos: &mut usize, constant: &mut impl FnMut() -> Expr) -> Expr {
    let t = tokens[*pos];
    *pos += 1;
    match t {
        Token::Var(i) => Expr::Var(i),
        Token::Const => constant(),
        Token::Unary(op) => Expr::Unary(op, Box::new(build(tokens, pos, constant))),
        Token::Binary(op) => {
            let l = build(tokens, pos, constant);
            let r = build(tokens, pos, constant);
            Expr::Binary(op, Box::new(l), Box::new(r))
        }
        Token::End | Token::PromptStart | Token::PromptEnd => unreachable!("rejected by check"),
    }
}
