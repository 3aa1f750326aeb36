use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ExprError;

/// Binary operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Unary operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnaryOp {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Asin,
    Pow2,
    Pow3,
    Pow4,
    Pow5,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    pub fn infix(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Mul)
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 11] = [
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Tan,
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sqrt,
        UnaryOp::Asin,
        UnaryOp::Pow2,
        UnaryOp::Pow3,
        UnaryOp::Pow4,
        UnaryOp::Pow5,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Asin => "asin",
            UnaryOp::Pow2 => "pow2",
            UnaryOp::Pow3 => "pow3",
            UnaryOp::Pow4 => "pow4",
            UnaryOp::Pow5 => "pow5",
        }
    }

    /// IEEE semantics: domain errors give NaN, overflow gives ±inf.
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        use crate::math;
        match self {
            UnaryOp::Sin => math::sin(x),
            UnaryOp::Cos => math::cos(x),
            UnaryOp::Tan => math::tan(x),
            UnaryOp::Exp => math::exp(x),
            UnaryOp::Log => math::ln(x),
            UnaryOp::Sqrt => math::sqrt(x),
            UnaryOp::Asin => math::asin(x),
            UnaryOp::Pow2 => math::powi(x, 2),
            UnaryOp::Pow3 => math::powi(x, 3),
            UnaryOp::Pow4 => math::powi(x, 4),
            UnaryOp::Pow5 => math::powi(x, 5),
        }
    }
}

/// One symbol of a prefix serialization or prompt.
///
/// The derived ordering (variables by index, then `C`, then operators) is the
/// fixed tie-break order used by every decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    /// Variable `x_i`, 1-based.
    Var(usize),
    /// Constant placeholder `C`.
    Const,
    Unary(UnaryOp),
    Binary(BinaryOp),
    /// End-of-sequence marker `<end>`.
    End,
    /// Prompt block opener `<p>`.
    PromptStart,
    /// Prompt block closer `</p>`.
    PromptEnd,
}

impl Token {
    /// Number of children for expression tokens, `None` for markers.
    pub fn arity(self) -> Option<usize> {
        match self {
            Token::Var(_) | Token::Const => Some(0),
            Token::Unary(_) => Some(1),
            Token::Binary(_) => Some(2),
            Token::End | Token::PromptStart | Token::PromptEnd => None,
        }
    }

    pub fn is_leaf(self) -> bool {
        self.arity() == Some(0)
    }

    /// Small integer code, stable across runs, used for hashing.
    pub fn code(self) -> u64 {
        match self {
            Token::Var(i) => 1000 + i as u64,
            Token::Const => 1,
            Token::Unary(op) => 100 + op as u64,
            Token::Binary(op) => 200 + op as u64,
            Token::End => 2,
            Token::PromptStart => 3,
            Token::PromptEnd => 4,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Var(i) => write!(f, "x_{i}"),
            Token::Const => f.write_str("C"),
            Token::Unary(op) => f.write_str(op.symbol()),
            Token::Binary(op) => f.write_str(op.symbol()),
            Token::End => f.write_str("<end>"),
            Token::PromptStart => f.write_str("<p>"),
            Token::PromptEnd => f.write_str("</p>"),
        }
    }
}

impl FromStr for Token {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tok = match s {
            "C" => Token::Const,
            "<end>" => Token::End,
            "<p>" => Token::PromptStart,
            "</p>" => Token::PromptEnd,
            _ => {
                if let Some(op) = BinaryOp::ALL.iter().find(|op| op.symbol() == s) {
                    Token::Binary(*op)
                } else if let Some(op) = UnaryOp::ALL.iter().find(|op| op.symbol() == s) {
                    Token::Unary(*op)
                } else if let Some(idx) = s.strip_prefix("x_") {
                    match idx.parse::<usize>() {
                        Ok(i) if i >= 1 && !idx.starts_with('0') => Token::Var(i),
                        _ => return Err(ExprError::UnknownToken(s.to_string())),
                    }
                } else {
                    return Err(ExprError::UnknownToken(s.to_string()));
                }
            }
        };
        Ok(tok)
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct TokenVisitor;
        impl Visitor<'_> for TokenVisitor {
            type Value = Token;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a token string such as \"add\" or \"x_1\"")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Token, E> {
                v.parse().map_err(|_| E::custom(alloc::format!("unknown token {v:?}")))
            }
        }
        deserializer.deserialize_str(TokenVisitor)
    }
}

/// Parses whitespace-free token strings.
pub fn parse_tokens<'a, I>(items: I) -> Result<Vec<Token>, ExprError>
where
    I: IntoIterator<Item = &'a str>,
{
    items.into_iter().map(str::parse).collect()
}

/// Space-separated text form.
pub fn format_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.to_string());
    }
    out
}
