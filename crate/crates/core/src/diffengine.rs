//! Reverse-mode differentiation over a linear program of registered
//! primitives.
//!
//! A [`Program`] is a list of instructions over vector-valued variables.
//! Variables `0..inputs` are the leaves; instruction `n` defines variable
//! `inputs + n`. Every primitive supplies its own adjoint, and may declare
//! a custom backward rule that intentionally departs from the exact
//! derivative. [`finite_difference_check`] reports such departures
//! separately instead of counting them as failures.

use std::any::Any;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::activation::{clamp_min_backward, AlphaGradRule};
use crate::field::TrainableField;
use crate::renderer::{render_column_backward, render_column_taped, ColumnGeometry};

pub type VarId = usize;
pub type Saved = Box<dyn Any + Send + Sync>;

/// Which backward rule a primitive should apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Custom rules where declared.
    Custom,
    /// Exact derivatives everywhere.
    Exact,
}

impl GradMode {
    pub fn alpha_rule(self) -> AlphaGradRule {
        match self {
            GradMode::Custom => AlphaGradRule::Configured,
            GradMode::Exact => AlphaGradRule::Exact,
        }
    }
}

pub trait Primitive: Send + Sync {
    /// Evaluates the primitive and returns whatever the adjoint needs.
    fn forward(&self, inputs: &[&[f64]]) -> Result<(Vec<f64>, Saved)>;

    /// Input cotangents given the output cotangent.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], saved: &Saved, d_out: &[f64], mode: GradMode) -> Vec<Vec<f64>>;

    /// Whether [`GradMode::Custom`] may differ from the exact derivative.
    fn custom_rule(&self) -> bool {
        false
    }
}

/// Named primitives available to programs.
#[derive(Clone, Default)]
pub struct Registry {
    ops: HashMap<String, Arc<dyn Primitive>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding the elementwise, reduction, linear, loss and
    /// transmittance primitives.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register("identity", Identity);
        r.register("add", Add);
        r.register("mul", Mul);
        r.register("exp", Exp);
        r.register("log", Log);
        r.register("sum", Sum);
        r.register("linear", Linear);
        r.register("l1_loss", L1Loss);
        r.register("transmittance", Transmittance);
        r.register("exclusive_cumprod", ExclusiveCumprod);
        r
    }

    pub fn register(&mut self, name: impl Into<String>, op: impl Primitive + 'static) {
        self.ops.insert(name.into(), Arc::new(op));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<dyn Primitive>> {
        self.ops.get(name).ok_or_else(|| Error::UnregisteredPrimitive(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instr {
    pub op: String,
    pub args: Vec<VarId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub inputs: usize,
    pub instrs: Vec<Instr>,
    pub outputs: Vec<VarId>,
}

impl Program {
    pub fn new(inputs: usize) -> Self {
        Self {
            inputs,
            instrs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Appends `op(args)` and returns the new variable.
    pub fn push(&mut self, op: &str, args: &[VarId]) -> VarId {
        self.instrs.push(Instr {
            op: op.to_string(),
            args: args.to_vec(),
        });
        self.inputs + self.instrs.len() - 1
    }

    pub fn output(mut self, vars: &[VarId]) -> Self {
        self.outputs = vars.to_vec();
        self
    }

    fn check(&self) -> Result<()> {
        for (n, ins) in self.instrs.iter().enumerate() {
            if let Some(a) = ins.args.iter().find(|a| **a >= self.inputs + n) {
                return Err(Error::invalid(format!("instruction {n} reads variable {a} before it is defined")));
            }
        }
        let total = self.inputs + self.instrs.len();
        if let Some(o) = self.outputs.iter().find(|o| **o >= total) {
            return Err(Error::invalid(format!("output variable {o} does not exist")));
        }
        Ok(())
    }
}

pub struct TapeNode {
    pub op: String,
    pub inputs: Vec<VarId>,
    pub output: VarId,
    saved: Saved,
}

pub struct Tape {
    values: Vec<Vec<f64>>,
    nodes: Vec<TapeNode>,
    inputs: usize,
    outputs: Vec<VarId>,
}

impl Tape {
    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.values[v]
    }
}

fn run(registry: &Registry, program: &Program, inputs: &[Vec<f64>]) -> Result<Tape> {
    program.check()?;
    if inputs.len() != program.inputs {
        return Err(Error::DimensionMismatch {
            expected: format!("{} inputs", program.inputs),
            actual: format!("{} inputs", inputs.len()),
        });
    }
    // Resolve every op before evaluating anything.
    let ops = program
        .instrs
        .iter()
        .map(|i| registry.get(&i.op).cloned())
        .collect::<Result<Vec<_>>>()?;
    let mut values: Vec<Vec<f64>> = inputs.to_vec();
    let mut nodes = Vec::with_capacity(program.instrs.len());
    for (ins, op) in program.instrs.iter().zip(ops) {
        let args: Vec<&[f64]> = ins.args.iter().map(|a| values[*a].as_slice()).collect();
        let (out, saved) = op.forward(&args)?;
        nodes.push(TapeNode {
            op: ins.op.clone(),
            inputs: ins.args.clone(),
            output: values.len(),
            saved,
        });
        values.push(out);
    }
    Ok(Tape {
        values,
        nodes,
        inputs: program.inputs,
        outputs: program.outputs.clone(),
    })
}

/// Plain evaluation.
pub fn evaluate(registry: &Registry, program: &Program, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let tape = run(registry, program, inputs)?;
    Ok(tape.outputs.iter().map(|o| tape.values[*o].clone()).collect())
}

/// Evaluation that records what [`backward`] needs.
pub fn forward_with_tape(registry: &Registry, program: &Program, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Tape)> {
    let tape = run(registry, program, inputs)?;
    let outs = tape.outputs.iter().map(|o| tape.values[*o].clone()).collect();
    Ok((outs, tape))
}

/// Gradients of `sum_o <cotangent_o, output_o>` with respect to each input.
pub fn backward(registry: &Registry, tape: &Tape, cotangents: &[Vec<f64>], mode: GradMode) -> Result<Vec<Vec<f64>>> {
    if cotangents.len() != tape.outputs.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} cotangents", tape.outputs.len()),
            actual: format!("{} cotangents", cotangents.len()),
        });
    }
    let mut adj: Vec<Option<Vec<f64>>> = vec![None; tape.values.len()];
    for (o, c) in tape.outputs.iter().zip(cotangents) {
        if c.len() != tape.values[*o].len() {
            return Err(Error::DimensionMismatch {
                expected: format!("cotangent of length {}", tape.values[*o].len()),
                actual: format!("{}", c.len()),
            });
        }
        add_into(&mut adj[*o], c);
    }
    for node in tape.nodes.iter().rev() {
        let Some(d_out) = adj[node.output].take() else { continue };
        let op = registry.get(&node.op)?;
        let args: Vec<&[f64]> = node.inputs.iter().map(|a| tape.values[*a].as_slice()).collect();
        let grads = op.backward(&args, &tape.values[node.output], &node.saved, &d_out, mode);
        for (a, g) in node.inputs.iter().zip(grads) {
            add_into(&mut adj[*a], &g);
        }
    }
    Ok((0..tape.inputs)
        .map(|i| adj[i].take().unwrap_or_else(|| vec![0.0; tape.values[i].len()]))
        .collect())
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(v) => v.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheckReport {
    /// Relative error per flattened input entry.
    pub relative_errors: Vec<f64>,
    /// Largest error over entries not covered by a custom rule.
    pub max_error: f64,
    /// `(input, entry)` of `max_error`.
    pub max_location: Option<(usize, usize)>,
    /// Entries where a custom backward rule departs from the exact
    /// derivative; excluded from `pass`.
    pub custom_rule_entries: Vec<(usize, usize)>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Denominator floor of the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Compares [`backward`] (custom rules on) against central differences of
/// the sum of all outputs.
pub fn finite_difference_check(
    registry: &Registry,
    program: &Program,
    point: &[Vec<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradientCheckReport> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (outs, tape) = forward_with_tape(registry, program, point)?;
    let ones: Vec<Vec<f64>> = outs.iter().map(|o| vec![1.0; o.len()]).collect();
    let analytic = backward(registry, &tape, &ones, GradMode::Custom)?;
    let uses_custom = tape.nodes.iter().any(|n| registry.get(&n.op).map(|o| o.custom_rule()).unwrap_or(false));
    let exact = if uses_custom {
        Some(backward(registry, &tape, &ones, GradMode::Exact)?)
    } else {
        None
    };
    let objective = |p: &[Vec<f64>]| -> Result<f64> {
        Ok(evaluate(registry, program, p)?.iter().flatten().sum())
    };
    let mut report = GradientCheckReport {
        relative_errors: Vec::new(),
        max_error: 0.0,
        max_location: None,
        custom_rule_entries: Vec::new(),
        tolerance,
        pass: true,
    };
    let mut p = point.to_vec();
    for i in 0..p.len() {
        for e in 0..p[i].len() {
            let orig = p[i][e];
            p[i][e] = orig + step;
            let fp = objective(&p)?;
            p[i][e] = orig - step;
            let fm = objective(&p)?;
            p[i][e] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = analytic[i][e];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(RELATIVE_ERROR_FLOOR);
            report.relative_errors.push(err);
            if let Some(ex) = &exact {
                if ex[i][e] != a {
                    report.custom_rule_entries.push((i, e));
                    continue;
                }
            }
            if err > report.max_error {
                report.max_error = err;
                report.max_location = Some((i, e));
            }
        }
    }
    report.pass = report.max_error < tolerance;
    Ok(report)
}

fn nothing() -> Saved {
    Box::new(())
}

fn need(inputs: &[&[f64]], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} arguments"),
            actual: format!("{}", inputs.len()),
        });
    }
    Ok(())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("length {}", a.len()),
            actual: format!("{}", b.len()),
        });
    }
    Ok(())
}

pub struct Identity;

impl Primitive for Identity {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 1)?;
        Ok((x[0].to_vec(), nothing()))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        vec![d.to_vec()]
    }
}

pub struct Add;

impl Primitive for Add {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 2)?;
        same_len(x[0], x[1])?;
        Ok((x[0].iter().zip(x[1]).map(|(a, b)| a + b).collect(), nothing()))
    }

    fn backward(&self, _: &[&[f64]], _: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        vec![d.to_vec(), d.to_vec()]
    }
}

/// Elementwise product; a length-1 argument broadcasts.
pub struct Mul;

impl Primitive for Mul {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 2)?;
        let (a, b) = (x[0], x[1]);
        let out = if a.len() == 1 {
            b.iter().map(|v| a[0] * v).collect()
        } else if b.len() == 1 {
            a.iter().map(|v| v * b[0]).collect()
        } else {
            same_len(a, b)?;
            a.iter().zip(b).map(|(p, q)| p * q).collect()
        };
        Ok((out, nothing()))
    }

    fn backward(&self, x: &[&[f64]], _: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        let (a, b) = (x[0], x[1]);
        let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; b.len()];
        for (i, di) in d.iter().enumerate() {
            da[if a.len() == 1 { 0 } else { i }] += di * at(b, i);
            db[if b.len() == 1 { 0 } else { i }] += di * at(a, i);
        }
        vec![da, db]
    }
}

pub struct Exp;

impl Primitive for Exp {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 1)?;
        Ok((x[0].iter().map(|v| v.exp()).collect(), nothing()))
    }

    fn backward(&self, _: &[&[f64]], y: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        vec![d.iter().zip(y).map(|(a, b)| a * b).collect()]
    }
}

pub struct Log;

impl Primitive for Log {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 1)?;
        Ok((x[0].iter().map(|v| v.ln()).collect(), nothing()))
    }

    fn backward(&self, x: &[&[f64]], _: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        vec![d.iter().zip(x[0]).map(|(a, b)| a / b).collect()]
    }
}

pub struct Sum;

impl Primitive for Sum {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 1)?;
        Ok((vec![x[0].iter().sum()], nothing()))
    }

    fn backward(&self, x: &[&[f64]], _: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        vec![vec![d[0]; x[0].len()]]
    }
}

/// `y = W x` with `W` row-major `[m x n]`, `m = len(W) / len(x)`.
pub struct Linear;

impl Primitive for Linear {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 2)?;
        let (w, v) = (x[0], x[1]);
        if v.is_empty() || w.len() % v.len() != 0 {
            return Err(Error::DimensionMismatch {
                expected: format!("weights divisible by {}", v.len()),
                actual: format!("{}", w.len()),
            });
        }
        let n = v.len();
        Ok((w.chunks_exact(n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect(), nothing()))
    }

    fn backward(&self, x: &[&[f64]], _: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        let (w, v) = (x[0], x[1]);
        let n = v.len();
        let mut dw = vec![0.0; w.len()];
        let mut dv = vec![0.0; n];
        for (r, dr) in d.iter().enumerate() {
            for c in 0..n {
                dw[r * n + c] = dr * v[c];
                dv[c] += dr * w[r * n + c];
            }
        }
        vec![dw, dv]
    }
}

/// `sum |pred - target|`; the subgradient at ties is 0.
pub struct L1Loss;

impl Primitive for L1Loss {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 2)?;
        same_len(x[0], x[1])?;
        Ok((vec![x[0].iter().zip(x[1]).map(|(p, t)| (p - t).abs()).sum()], nothing()))
    }

    fn backward(&self, x: &[&[f64]], _: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        let g: Vec<f64> = x[0].iter().zip(x[1]).map(|(p, t)| d[0] * sign0(p - t)).collect();
        let h = g.iter().map(|v| -v).collect();
        vec![g, h]
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `alpha = exp(min(0, a))` elementwise, with the one-sided estimator for
/// the clamp.
pub struct Transmittance;

impl Primitive for Transmittance {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 1)?;
        Ok((x[0].iter().map(|a| a.min(0.0).exp()).collect(), nothing()))
    }

    fn backward(&self, x: &[&[f64]], y: &[f64], _: &Saved, d: &[f64], mode: GradMode) -> Vec<Vec<f64>> {
        vec![x[0]
            .iter()
            .zip(y)
            .zip(d)
            .map(|((a, alpha), g)| {
                // d alpha / d min = alpha; then the clamp rule.
                let up = g * alpha;
                match mode {
                    GradMode::Custom => clamp_min_backward(*a, up),
                    GradMode::Exact => {
                        if *a < 0.0 {
                            up
                        } else {
                            0.0
                        }
                    }
                }
            })
            .collect()]
    }

    fn custom_rule(&self) -> bool {
        true
    }
}

/// Exclusive cumulative product computed in log space:
/// `T_i = exp(sum_{i' < i} ln a_i')`.
pub struct ExclusiveCumprod;

impl Primitive for ExclusiveCumprod {
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 1)?;
        let mut acc = 0.0;
        let out = x[0]
            .iter()
            .map(|a| {
                let t = f64::exp(acc);
                acc += a.ln();
                t
            })
            .collect();
        Ok((out, nothing()))
    }

    fn backward(&self, x: &[&[f64]], y: &[f64], _: &Saved, d: &[f64], _: GradMode) -> Vec<Vec<f64>> {
        // dT_i / d ln a_k = T_i for i > k.
        let n = x[0].len();
        let mut g = vec![0.0; n];
        let mut acc = 0.0;
        for k in (0..n).rev() {
            g[k] = acc / x[0][k];
            acc += d[k] * y[k];
        }
        vec![g]
    }
}

/// One rendered Doppler column as a function of the field parameters.
///
/// Input: the flat parameter vector. Output: the column in
/// `[range x antenna]` layout.
pub struct RenderColumnOp<F> {
    pub field: F,
    pub geometry: ColumnGeometry,
    pub clip: f64,
}

impl<F> Primitive for RenderColumnOp<F>
where
    F: TrainableField + Clone + Send + Sync + 'static,
    F::Tape: Sync + 'static,
{
    fn forward(&self, x: &[&[f64]]) -> Result<(Vec<f64>, Saved)> {
        need(x, 1)?;
        let mut field = self.field.clone();
        same_len(field.params(), x[0])?;
        field.params_mut().copy_from_slice(x[0]);
        let (out, tape) = render_column_taped(&field, &self.geometry, self.clip);
        Ok((out, Box::new((field, tape))))
    }

    fn backward(&self, x: &[&[f64]], _: &[f64], saved: &Saved, d: &[f64], mode: GradMode) -> Vec<Vec<f64>> {
        let (field, tape) = saved
            .downcast_ref::<(F, crate::renderer::ColumnTape<F::Tape>)>()
            .expect("render column state");
        let mut grad = vec![0.0; x[0].len()];
        render_column_backward(field, &self.geometry, tape, d, mode.alpha_rule(), &mut grad);
        vec![grad]
    }

    fn custom_rule(&self) -> bool {
        true
    }
}
