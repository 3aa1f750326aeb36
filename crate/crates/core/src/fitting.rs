//! Constant fitting and regression metrics.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Interval};
use crate::expr::{deserialize, BinaryOp, Expr, ExprError, Token, UnaryOp};
use crate::math;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Total starts; the first has every constant at 1.0.
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub init_range: Interval,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 10,
            max_iter: 100,
            grad_tol: 1e-8,
            fd_step: 1e-6,
            init_range: Interval::new(-10.0, 10.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    /// Input with every placeholder replaced.
    pub fitted: Expr,
    /// Fitted placeholder values in pre-order.
    pub constants: Vec<f64>,
    /// Mean squared error on the fitting data.
    pub loss: f64,
    pub converged: bool,
    pub restarts_used: usize,
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("loss is non-finite from every start")]
    NonFiniteEverywhere,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("target has zero variance")]
    DegenerateTarget,
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug)]
enum Instr {
    Var(usize),
    Const(f64),
    Param(usize),
    Un(UnaryOp),
    Bin(BinaryOp),
}

/// Postfix program for fast repeated evaluation. Placeholders become
/// parameters numbered in pre-order.
#[derive(Clone, Debug)]
pub struct Compiled {
    code: Vec<Instr>,
    n_params: usize,
    stack_size: usize,
}

impl Compiled {
    pub fn new(e: &Expr) -> Self {
        let mut c = Compiled { code: Vec::with_capacity(e.node_count()), n_params: 0, stack_size: 0 };
        let mut depth = 0;
        c.emit(e, &mut depth);
        c
    }

    fn emit(&mut self, e: &Expr, depth: &mut usize) {
        match e {
            Expr::Var(i) => self.code.push(Instr::Var(*i - 1)),
            Expr::Const(v) => self.code.push(Instr::Const(*v)),
            Expr::Placeholder => {
                self.code.push(Instr::Param(self.n_params));
                self.n_params += 1;
            }
            Expr::Unary(op, c) => {
                self.emit(c, depth);
                self.code.push(Instr::Un(*op));
                return;
            }
            Expr::Binary(op, l, r) => {
                self.emit(l, depth);
                self.emit(r, depth);
                self.code.push(Instr::Bin(*op));
                *depth -= 1;
                return;
            }
        }
        *depth += 1;
        self.stack_size = self.stack_size.max(*depth);
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn eval(&self, x: &[f64], params: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for ins in &self.code {
            match *ins {
                Instr::Var(i) => stack.push(x[i]),
                Instr::Const(v) => stack.push(v),
                Instr::Param(i) => stack.push(params[i]),
                Instr::Un(op) => {
                    let a = stack.pop().expect("well-formed program");
                    stack.push(op.apply(a));
                }
                Instr::Bin(op) => {
                    let b = stack.pop().expect("well-formed program");
                    let a = stack.pop().expect("well-formed program");
                    stack.push(op.apply(a, b));
                }
            }
        }
        stack[0]
    }

    pub fn predict(&self, data: &Dataset, params: &[f64]) -> Vec<f64> {
        let mut stack = Vec::with_capacity(self.stack_size);
        data.inputs.iter().map(|x| self.eval(x, params, &mut stack)).collect()
    }

    /// Mean squared error; NaN when any prediction is non-finite.
    pub fn mse(&self, data: &Dataset, params: &[f64], stack: &mut Vec<f64>) -> f64 {
        let mut acc = 0.0;
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let p = self.eval(x, params, stack);
            if !p.is_finite() {
                return f64::NAN;
            }
            let r = p - y;
            acc += r * r;
        }
        acc / data.len() as f64
    }
}

/// Evaluates a placeholder-free expression on every input row.
pub fn predict(e: &Expr, data: &Dataset) -> Result<Vec<f64>, ExprError> {
    if e.placeholder_count() > 0 {
        return Err(ExprError::PlaceholderPresent);
    }
    check_dims(e, data)?;
    Ok(Compiled::new(e).predict(data, &[]))
}

fn check_dims(e: &Expr, data: &Dataset) -> Result<(), ExprError> {
    let m = e.max_var();
    if m > data.dims() {
        return Err(ExprError::VariableOutOfRange { index: m, dims: data.dims() });
    }
    Ok(())
}

/// Fits the placeholders of a token sequence by multi-start BFGS on MSE.
pub fn fit_constants(tokens: &[Token], data: &Dataset, cfg: &FitConfig) -> Result<FitResult, FitError> {
    fit_expr(&deserialize(tokens)?, data, cfg)
}

/// Like [`fit_constants`] for a tree. Numeric constants stay fixed.
pub fn fit_expr(e: &Expr, data: &Dataset, cfg: &FitConfig) -> Result<FitResult, FitError> {
    check_dims(e, data)?;
    let prog = Compiled::new(e);
    let k = prog.n_params();
    let mut stack = Vec::with_capacity(prog.stack_size);
    if k == 0 {
        let loss = prog.mse(data, &[], &mut stack);
        if !loss.is_finite() {
            return Err(FitError::NonFiniteEverywhere);
        }
        return Ok(FitResult { fitted: e.clone(), constants: Vec::new(), loss, converged: true, restarts_used: 0 });
    }

    let mut rng = rng::stream(cfg.seed, "fit", 0);
    let mut best: Option<(f64, Vec<f64>, bool)> = None;
    let starts = cfg.restarts.max(1);
    for s in 0..starts {
        let x0: Vec<f64> = if s == 0 {
            vec![1.0; k]
        } else {
            (0..k).map(|_| rng.gen_range(cfg.init_range.low..cfg.init_range.high)).collect()
        };
        let mut f = |p: &[f64]| prog.mse(data, p, &mut stack);
        let (x, fx, conv) = bfgs(&mut f, x0, cfg);
        if !fx.is_finite() {
            continue;
        }
        // Strict improvement keeps the lowest start index on ties.
        if best.as_ref().is_none_or(|(bf, _, _)| fx < *bf) {
            best = Some((fx, x, conv));
        }
    }
    let (loss, constants, converged) = best.ok_or(FitError::NonFiniteEverywhere)?;
    let fitted = e.fill_placeholders(&constants)?;
    Ok(FitResult { fitted, constants, loss, converged, restarts_used: starts })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

fn gradient(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel_step * math::abs(x[i]).max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Minimizes `f` from `x0`. Returns the final point, its value and whether
/// the gradient tolerance was met. A non-finite start is returned as is.
fn bfgs(f: &mut impl FnMut(&[f64]) -> f64, x0: Vec<f64>, cfg: &FitConfig) -> (Vec<f64>, f64, bool) {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    if !fx.is_finite() {
        return (x, fx, false);
    }
    let mut h = identity(n);
    let mut g = gradient(f, &x, cfg.fd_step);
    for _ in 0..cfg.max_iter {
        if g.iter().any(|v| !v.is_finite()) {
            return (x, fx, false);
        }
        if norm(&g) < cfg.grad_tol {
            return (x, fx, true);
        }
        let mut p = mat_vec(&h, &g).into_iter().map(|v| -v).collect::<Vec<_>>();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            h = identity(n);
            p = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        // Backtracking Armijo line search.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            let fxn = f(&xn);
            if fxn.is_finite() && fxn <= fx + 1e-4 * alpha * slope {
                accepted = Some((xn, fxn));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fxn)) = accepted else {
            return (x, fx, false);
        };
        let gn = gradient(f, &xn, cfg.fd_step);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy.is_finite() {
            bfgs_update(&mut h, &s, &y, sy);
        }
        x = xn;
        fx = fxn;
        g = gn;
        if fx == 0.0 {
            return (x, fx, true);
        }
    }
    let converged = g.iter().all(|v| v.is_finite()) && norm(&g) < cfg.grad_tol;
    (x, fx, converged)
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// `H <- (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

pub fn mse(y: &[f64], yhat: &[f64]) -> f64 {
    let n = y.len().min(yhat.len());
    y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64
}

pub fn mean(y: &[f64]) -> f64 {
    y.iter().sum::<f64>() / y.len() as f64
}

/// Population variance.
pub fn variance(y: &[f64]) -> f64 {
    let m = mean(y);
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
///
/// Any non-finite prediction gives `-inf`.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64, MetricError> {
    if y.len() != yhat.len() {
        return Err(MetricError::LengthMismatch(y.len(), yhat.len()));
    }
    if yhat.iter().any(|v| !v.is_finite()) {
        return Ok(f64::NEG_INFINITY);
    }
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::DegenerateTarget);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// [`r2`] with the degenerate-target rule applied: 1 for an exact fit of a
/// constant target, `-inf` otherwise. Mismatched lengths give `-inf`.
pub fn r2_score(y: &[f64], yhat: &[f64]) -> f64 {
    match r2(y, yhat) {
        Ok(v) => v,
        Err(MetricError::DegenerateTarget) if y.iter().zip(yhat).all(|(a, b)| a == b) => 1.0,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Variance guard in [`nmse`].
pub const NMSE_EPS: f64 = 1e-9;

/// `MSE / (Var(y) + 1e-9)` with the population variance.
pub fn nmse(y: &[f64], yhat: &[f64]) -> f64 {
    mse(y, yhat) / (variance(y) + NMSE_EPS)
}
