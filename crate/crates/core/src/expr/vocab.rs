use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BinaryOp, Token, UnaryOp};
use crate::datagen::Interval;

/// Operator sets, variable count and constant interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub binary: Vec<BinaryOp>,
    pub unary: Vec<UnaryOp>,
    pub n_vars: usize,
    pub constants: Interval,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum VocabularyError {
    #[error("vocabulary needs at least one variable")]
    NoVariables,
    #[error("constant interval must satisfy low < high")]
    EmptyConstantInterval,
    #[error("operator listed twice")]
    DuplicateOperator,
    #[error("vocabulary has no operators")]
    NoOperators,
}

impl Vocabulary {
    /// Full operator table with `n_vars` variables.
    pub fn full(n_vars: usize) -> Self {
        Vocabulary {
            binary: BinaryOp::ALL.to_vec(),
            unary: alloc::vec![
                UnaryOp::Pow2,
                UnaryOp::Pow3,
                UnaryOp::Pow4,
                UnaryOp::Pow5,
                UnaryOp::Sqrt,
                UnaryOp::Log,
                UnaryOp::Exp,
                UnaryOp::Sin,
                UnaryOp::Cos,
                UnaryOp::Asin,
            ],
            n_vars,
            constants: Interval::new(-10.0, 10.0),
        }
    }

    /// add, sub, sin, cos, tan, exp.
    pub fn simplified(n_vars: usize) -> Self {
        Vocabulary {
            binary: alloc::vec![BinaryOp::Add, BinaryOp::Sub],
            unary: alloc::vec![UnaryOp::Sin, UnaryOp::Cos, UnaryOp::Tan, UnaryOp::Exp],
            n_vars,
            constants: Interval::new(-10.0, 10.0),
        }
    }

    pub fn validate(&self) -> Result<(), VocabularyError> {
        if self.n_vars == 0 {
            return Err(VocabularyError::NoVariables);
        }
        if !(self.constants.low < self.constants.high) {
            return Err(VocabularyError::EmptyConstantInterval);
        }
        if self.binary.is_empty() && self.unary.is_empty() {
            return Err(VocabularyError::NoOperators);
        }
        let mut b = self.binary.clone();
        b.sort();
        b.dedup();
        let mut u = self.unary.clone();
        u.sort();
        u.dedup();
        if b.len() != self.binary.len() || u.len() != self.unary.len() {
            return Err(VocabularyError::DuplicateOperator);
        }
        Ok(())
    }

    pub fn contains(&self, token: Token) -> bool {
        match token {
            Token::Var(i) => i >= 1 && i <= self.n_vars,
            Token::Const | Token::End | Token::PromptStart | Token::PromptEnd => true,
            Token::Unary(op) => self.unary.contains(&op),
            Token::Binary(op) => self.binary.contains(&op),
        }
    }

    /// Every expression token (leaves and operators), in token order.
    pub fn expression_tokens(&self) -> Vec<Token> {
        let mut out: Vec<Token> = (1..=self.n_vars).map(Token::Var).collect();
        out.push(Token::Const);
        out.extend(self.unary.iter().map(|&op| Token::Unary(op)));
        out.extend(self.binary.iter().map(|&op| Token::Binary(op)));
        out.sort();
        out
    }
}
