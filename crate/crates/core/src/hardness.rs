//! Reduction from MAX-E3SAT to inverting a two-layer ReLU network.
//!
//! A formula `φ` with `n` variables and `m` clauses becomes
//! `h(x) = W2·relu(W1·x + b)` with target `z = (0^m, 1^{Kn})`. Inputs use
//! `x_i = −1` for "X_i true" and `+1` for "false". Clause neuron `j` fires
//! with value 1 exactly when clause `j` is unsatisfied by a binary input;
//! the `Kn` copy outputs equal `|x_i|` and pull real inputs towards `±1`.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::invert::{invert_from, initial_guess, InversionConfig};
use crate::nn::{spectral_norm, spectral_norm_op, LayerSpec, LinearOperator, Network, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::{norm, Tensor};

/// Largest variable count the brute-force routines accept.
pub const BRUTE_FORCE_MAX_VARS: usize = 20;

const POWER_ITERS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Literal {
    /// 1-based variable index.
    pub var: usize,
    pub negated: bool,
}

impl Literal {
    pub fn new(var: usize, negated: bool) -> Self {
        Self { var, negated }
    }

    /// Truth value under `assignment` (0-based storage).
    pub fn eval(self, assignment: &[bool]) -> bool {
        assignment[self.var - 1] != self.negated
    }

    fn from_dimacs(v: i64) -> Self {
        Self::new(v.unsigned_abs() as usize, v < 0)
    }

    fn to_dimacs(self) -> i64 {
        let v = self.var as i64;
        if self.negated {
            -v
        } else {
            v
        }
    }
}

/// A 3-CNF formula whose clauses each mention three distinct variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnfFormula {
    n: usize,
    clauses: Vec<[Literal; 3]>,
    b: usize,
}

impl CnfFormula {
    pub fn new(n: usize, clauses: Vec<[Literal; 3]>) -> Result<Self> {
        for (j, c) in clauses.iter().enumerate() {
            if let Some(msg) = clause_problem(c, n) {
                return contract(format!("clause {j}: {msg}"));
            }
        }
        let mut occurrences = vec![0usize; n];
        for lit in clauses.iter().flatten() {
            occurrences[lit.var - 1] += 1;
        }
        let b = occurrences.into_iter().max().unwrap_or(0);
        Ok(Self { n, clauses, b })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.clauses.len()
    }

    /// Maximum number of clauses any single variable occurs in.
    pub fn b(&self) -> usize {
        self.b
    }

    pub fn clauses(&self) -> &[[Literal; 3]] {
        &self.clauses
    }

    /// Uniformly random clauses over distinct variable triples with random
    /// signs. Needs `n >= 3`.
    pub fn random(n: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        if n < 3 {
            return contract(format!("random 3-CNF needs at least 3 variables, got {n}"));
        }
        let mut clauses = Vec::with_capacity(m);
        for _ in 0..m {
            let mut vars: Vec<usize> = (1..=n).collect();
            // partial Fisher–Yates for the first three slots
            for k in 0..3 {
                let r = k + rng.below((n - k) as u64) as usize;
                vars.swap(k, r);
            }
            let lit = |k: usize, rng: &mut Rng| Literal::new(vars[k], rng.below(2) == 1);
            clauses.push([lit(0, rng), lit(1, rng), lit(2, rng)]);
        }
        Self::new(n, clauses)
    }

    pub fn to_dimacs(&self) -> String {
        let mut out = format!("p cnf {} {}\n", self.n, self.m());
        for c in &self.clauses {
            let [a, b, d] = c.map(Literal::to_dimacs);
            out.push_str(&format!("{a} {b} {d} 0\n"));
        }
        out
    }
}

impl fmt::Display for CnfFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_dimacs())
    }
}

fn clause_problem(c: &[Literal; 3], n: usize) -> Option<String> {
    if let Some(l) = c.iter().find(|l| l.var == 0 || l.var > n) {
        return Some(format!("variable {} outside 1..={n}", l.var));
    }
    if c[0].var == c[1].var || c[0].var == c[2].var || c[1].var == c[2].var {
        return Some("repeated variable".into());
    }
    None
}

fn parse_err<T>(line: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Parse { line, msg: msg.into() })
}

/// Reads DIMACS CNF. Comment lines start with `c`; a `%` line ends the
/// clause list (SATLIB convention). Clauses may span lines; errors report
/// the line on which the offending clause ends.
pub fn parse_dimacs(text: &str) -> Result<CnfFormula> {
    let mut header: Option<(usize, usize)> = None;
    let mut clauses = Vec::new();
    let mut pending: Vec<i64> = Vec::new();
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        if line.starts_with('%') {
            break;
        }
        last_line = line_no;
        if line.starts_with('p') {
            if header.is_some() {
                return parse_err(line_no, "duplicate problem line");
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (n, m) = match fields[..] {
                ["p", "cnf", n, m] => match (n.parse(), m.parse()) {
                    (Ok(n), Ok(m)) => (n, m),
                    _ => return parse_err(line_no, format!("bad counts in `{line}`")),
                },
                _ => return parse_err(line_no, format!("expected `p cnf <vars> <clauses>`, got `{line}`")),
            };
            header = Some((n, m));
            continue;
        }
        let Some((n, _)) = header else {
            return parse_err(line_no, "clause before the problem line");
        };
        for tok in line.split_whitespace() {
            let v: i64 = match tok.parse() {
                Ok(v) => v,
                Err(_) => return parse_err(line_no, format!("bad literal `{tok}`")),
            };
            if v != 0 {
                pending.push(v);
                continue;
            }
            if pending.len() != 3 {
                return parse_err(line_no, format!("clause has {} literals, expected 3", pending.len()));
            }
            let clause = [0, 1, 2].map(|k| Literal::from_dimacs(pending[k]));
            if let Some(msg) = clause_problem(&clause, n) {
                return parse_err(line_no, msg);
            }
            clauses.push(clause);
            pending.clear();
        }
    }
    let Some((n, m)) = header else {
        return parse_err(last_line.max(1), "missing problem line");
    };
    if !pending.is_empty() {
        return parse_err(last_line, "last clause is not terminated by 0");
    }
    if clauses.len() != m {
        return parse_err(last_line, format!("header declares {m} clauses, found {}", clauses.len()));
    }
    CnfFormula::new(n, clauses)
}

/// `x_i = −1` for true, `+1` for false.
pub fn assignment_to_input(assignment: &[bool]) -> Tensor {
    Tensor::vector(assignment.iter().map(|&t| if t { -1.0 } else { 1.0 }).collect())
}

/// Sign rounding with ties at 0 going to `+1` (false).
pub fn input_to_assignment(x: &Tensor) -> Vec<bool> {
    x.data().iter().map(|&v| v < 0.0).collect()
}

fn check_len(phi: &CnfFormula, len: usize) -> Result<()> {
    if len != phi.n {
        return contract(format!("assignment of length {len} for {} variables", phi.n));
    }
    Ok(())
}

/// Number of clauses with all three literals false.
pub fn unsat_count(phi: &CnfFormula, assignment: &[bool]) -> Result<usize> {
    check_len(phi, assignment.len())?;
    Ok(phi.clauses.iter().filter(|c| !c.iter().any(|l| l.eval(assignment))).count())
}

fn assignment_from_bits(bits: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| bits >> i & 1 == 1).collect()
}

fn check_brute_force(phi: &CnfFormula) -> Result<()> {
    if phi.n > BRUTE_FORCE_MAX_VARS {
        return contract(format!("brute force capped at {BRUTE_FORCE_MAX_VARS} variables, got {}", phi.n));
    }
    Ok(())
}

/// First satisfying assignment in binary counting order (variable 1 is the
/// lowest bit), or `None`.
pub fn brute_force_sat(phi: &CnfFormula) -> Result<Option<Vec<bool>>> {
    check_brute_force(phi)?;
    let found = (0..1u64 << phi.n).into_par_iter().find_first(|&bits| {
        let a = assignment_from_bits(bits, phi.n);
        phi.clauses.iter().all(|c| c.iter().any(|l| l.eval(&a)))
    });
    Ok(found.map(|bits| assignment_from_bits(bits, phi.n)))
}

/// Minimum number of unsatisfied clauses over all `2^n` assignments.
pub fn min_unsat(phi: &CnfFormula) -> Result<usize> {
    check_brute_force(phi)?;
    let best = (0..1u64 << phi.n)
        .into_par_iter()
        .map(|bits| {
            let a = assignment_from_bits(bits, phi.n);
            phi.clauses.iter().filter(|c| !c.iter().any(|l| l.eval(&a))).count()
        })
        .min();
    Ok(best.unwrap_or(0))
}

/// Every assignment in binary counting order.
pub fn all_assignments(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0..1u64 << n).map(move |bits| assignment_from_bits(bits, n))
}

/// Second layer: identity on the clause block, then sums of consecutive
/// hidden pairs. Stored implicitly; the dense form has
/// `(m + Kn)(m + 2Kn)` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSumOperator {
    pub m: usize,
    pub pairs: usize,
}

impl LinearOperator for PairSumOperator {
    fn nrows(&self) -> usize {
        self.m + self.pairs
    }

    fn ncols(&self) -> usize {
        self.m + 2 * self.pairs
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v[..self.m].to_vec();
        out.extend((0..self.pairs).map(|t| v[self.m + 2 * t] + v[self.m + 2 * t + 1]));
        out
    }

    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        let mut out = u[..self.m].to_vec();
        for t in 0..self.pairs {
            let g = u[self.m + t];
            out.push(g);
            out.push(g);
        }
        out
    }
}

impl PairSumOperator {
    pub fn to_dense(&self) -> Tensor {
        let (rows, cols) = (self.nrows(), self.ncols());
        let mut w = Tensor::zeros(&[rows, cols]);
        let d = w.data_mut();
        for j in 0..self.m {
            d[j * cols + j] = 1.0;
        }
        for t in 0..self.pairs {
            let r = (self.m + t) * cols;
            d[r + self.m + 2 * t] = 1.0;
            d[r + self.m + 2 * t + 1] = 1.0;
        }
        w
    }
}

/// `h_φ(x) = W2·relu(W1·x + b)` and its target.
///
/// Hidden unit `m + 2t` computes `max(x_i, 0)` and `m + 2t + 1` computes
/// `max(−x_i, 0)` for copy `t = (i−1)·K + k`; output `m + t` is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedNetwork {
    pub w1: Tensor,
    pub b: Vec<f64>,
    pub w2: PairSumOperator,
    pub z: Vec<f64>,
    pub k: usize,
    pub m: usize,
    pub n: usize,
}

pub fn build_reduction(phi: &CnfFormula, k: usize) -> Result<ReducedNetwork> {
    if k == 0 {
        return contract("copy count K must be at least 1");
    }
    let (m, n) = (phi.m(), phi.n());
    let hidden = m + 2 * k * n;
    let mut w1 = Tensor::zeros(&[hidden, n]);
    let d = w1.data_mut();
    for (j, clause) in phi.clauses.iter().enumerate() {
        for lit in clause {
            d[j * n + lit.var - 1] = if lit.negated { -1.0 } else { 1.0 };
        }
    }
    for i in 0..n {
        for c in 0..k {
            let row = m + 2 * (i * k + c);
            d[row * n + i] = 1.0;
            d[(row + 1) * n + i] = -1.0;
        }
    }
    let mut b = vec![-2.0; m];
    b.resize(hidden, 0.0);
    let mut z = vec![0.0; m];
    z.resize(m + k * n, 1.0);
    Ok(ReducedNetwork {
        w1,
        b,
        w2: PairSumOperator { m, pairs: k * n },
        z,
        k,
        m,
        n,
    })
}

impl ReducedNetwork {
    pub fn output_dim(&self) -> usize {
        self.m + self.k * self.n
    }

    pub fn hidden_dim(&self) -> usize {
        self.m + 2 * self.k * self.n
    }

    /// `h_φ(x)` for one input of length `n`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return contract(format!("input of length {} for {} variables", x.len(), self.n));
        }
        let mut pre = self.w1.matvec(x);
        for (p, b) in pre.iter_mut().zip(&self.b) {
            *p = (*p + b).max(0.0);
        }
        Ok(self.w2.apply(&pre))
    }

    /// `‖h_φ(x) − z‖₂²`.
    pub fn residual_sq(&self, x: &[f64]) -> Result<f64> {
        let y = self.forward(x)?;
        Ok(y.iter().zip(&self.z).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn target(&self) -> Tensor {
        Tensor::vector(self.z.clone())
    }

    /// The same map as a dense `Linear → ReLU → Linear` network whose cut is
    /// the output, usable with [`crate::invert`].
    pub fn to_network(&self) -> Result<Network> {
        let (n, hid, out) = (self.n, self.hidden_dim(), self.output_dim());
        let spec = NetworkSpec {
            input_shape: vec![n],
            layers: vec![
                LayerSpec::Linear { in_dim: n, out_dim: hid },
                LayerSpec::Relu,
                LayerSpec::Linear { in_dim: hid, out_dim: out },
            ],
            cut_index: 3,
        };
        let params = vec![
            vec![self.w1.clone(), Tensor::vector(self.b.clone())],
            vec![],
            vec![self.w2.to_dense(), Tensor::zeros(&[out])],
        ];
        Network::from_params(spec, params)
    }

    /// `(‖W1‖₂, ‖W2‖₂)` by power iteration. `‖W1‖` is taken from the
    /// `n × n` Gram matrix, which is cheap even for large `K`.
    pub fn spectral_norms(&self, seed: u64) -> Result<(f64, f64)> {
        let gram = gram(&self.w1);
        let w1 = spectral_norm(&gram, POWER_ITERS, seed)?.sqrt();
        let w2 = spectral_norm_op(&self.w2, POWER_ITERS, seed)?;
        Ok((w1, w2))
    }
}

/// `WᵀW` for a row-major matrix.
fn gram(w: &Tensor) -> Tensor {
    let (rows, n) = (w.rows(), w.row_len());
    let mut g = Tensor::zeros(&[n, n]);
    let d = g.data_mut();
    for r in 0..rows {
        let row = w.row(r);
        for (a, &ra) in row.iter().enumerate().filter(|(_, v)| **v != 0.0) {
            for (b, &rb) in row.iter().enumerate() {
                d[a * n + b] += ra * rb;
            }
        }
    }
    g
}

/// True iff `‖h_φ(x) − z‖∞ ≤ 1e-9` at the encoded assignment.
pub fn verify_completeness(phi: &CnfFormula, k: usize, assignment: &[bool]) -> Result<bool> {
    check_len(phi, assignment.len())?;
    let net = build_reduction(phi, k)?;
    let y = net.forward(assignment_to_input(assignment).data())?;
    Ok(y.iter().zip(&net.z).all(|(a, b)| (a - b).abs() <= 1e-9))
}

/// `max_{Δ∈[0,1]} n·(2BΔ − KΔ²)`, the bound on how much sign rounding can
/// raise the squared residual. Equals `n·B²/K` when `K ≥ B`.
pub fn rounding_bound(n: usize, b: usize, k: usize) -> f64 {
    let (b, k) = (b as f64, k as f64);
    let delta = (b / k).min(1.0);
    n as f64 * (2.0 * b * delta - k * delta * delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub samples: usize,
    pub max_d: f64,
    pub bound: f64,
    pub violations: usize,
}

/// Draws `x ~ U[−1,1]^n` and checks
/// `D(x) = ‖h(x̄) − z‖² − ‖h(x) − z‖² ≤ rounding_bound` with `x̄` the
/// sign-rounded input.
pub fn soundness_scan(phi: &CnfFormula, k: usize, samples: usize, seed: u64) -> Result<SoundnessReport> {
    if samples == 0 {
        return contract("soundness scan needs at least one sample");
    }
    let net = build_reduction(phi, k)?;
    let bound = rounding_bound(phi.n, phi.b, k);
    let ds: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = Rng::derive(seed, s as u64);
            let x: Vec<f64> = (0..phi.n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let xbar = assignment_to_input(&input_to_assignment(&Tensor::vector(x.clone())));
            Ok(net.residual_sq(xbar.data())? - net.residual_sq(&x)?)
        })
        .collect::<Result<_>>()?;
    Ok(SoundnessReport {
        samples,
        max_d: ds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        bound,
        violations: ds.iter().filter(|&&d| d > bound + 1e-9).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub trials: usize,
    pub w1_norm: f64,
    pub w2_norm: f64,
    /// `‖W2‖·‖W1‖`
    pub u: f64,
    pub max_ratio: f64,
    pub violations: usize,
}

/// Random probing of `‖h(x₁) − h(x₂)‖ ≤ U·‖x₁ − x₂‖ + 1e-9` on `[−1,1]^n`.
pub fn lipschitz_check(net: &ReducedNetwork, trials: usize, seed: u64) -> Result<LipschitzReport> {
    if trials == 0 {
        return contract("lipschitz check needs at least one trial");
    }
    let (w1_norm, w2_norm) = net.spectral_norms(seed)?;
    let u = w1_norm * w2_norm;
    let mut rng = Rng::new(seed);
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for _ in 0..trials {
        let x1: Vec<f64> = (0..net.n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let x2: Vec<f64> = (0..net.n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let dy: Vec<f64> = net.forward(&x1)?.iter().zip(net.forward(&x2)?).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a - b).collect();
        let (ny, nx) = (norm(&dy), norm(&dx));
        if ny > u * nx + 1e-9 {
            violations += 1;
        }
        if nx > 0.0 {
            max_ratio = max_ratio.max(ny / nx);
        }
    }
    Ok(LipschitzReport {
        trials,
        w1_norm,
        w2_norm,
        u,
        max_ratio,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionAttack {
    /// `‖h(s*) − z‖₂ / √(m + Kn)`
    pub epsilon: f64,
    pub unsat: usize,
    pub assignment: Vec<bool>,
    pub recovered: Vec<f64>,
    /// `‖s* − x_ref‖₂ / √n` against a reference solution, when one is given.
    pub solution_distance: Option<f64>,
}

/// Inverts `h_φ` towards `z` with inputs clamped to `[−1, 1]`, starting from
/// `start` or the configured initial guess.
pub fn attack_reduction(
    phi: &CnfFormula,
    k: usize,
    cfg: &InversionConfig,
    start: Option<Tensor>,
    reference: Option<&[bool]>,
) -> Result<ReductionAttack> {
    let reduced = build_reduction(phi, k)?;
    let net = reduced.to_network()?;
    let cfg = InversionConfig {
        clamp: Some([-1.0, 1.0]),
        tv_weight: 0.0,
        ..*cfg
    };
    let start = start.unwrap_or_else(|| initial_guess(&[phi.n], &cfg));
    let result = invert_from(&net, &reduced.target(), start, &cfg)?;
    let s = result.recovered.data();
    let epsilon = (reduced.residual_sq(s)? / reduced.output_dim() as f64).sqrt();
    let assignment = input_to_assignment(&result.recovered);
    let solution_distance = match reference {
        Some(r) => {
            check_len(phi, r.len())?;
            let x = assignment_to_input(r);
            Some(dist(s, x.data()) / (phi.n as f64).sqrt())
        }
        None => None,
    };
    Ok(ReductionAttack {
        epsilon,
        unsat: unsat_count(phi, &assignment)?,
        assignment,
        recovered: s.to_vec(),
        solution_distance,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Best attack over `restarts` random starts (restart `r` uses seed
/// `derive(cfg.seed, r)`). Ties keep the earlier restart.
pub fn attack_reduction_restarts(
    phi: &CnfFormula,
    k: usize,
    cfg: &InversionConfig,
    restarts: usize,
) -> Result<(ReductionAttack, Vec<f64>)> {
    if restarts == 0 {
        return contract("need at least one restart");
    }
    let runs: Vec<ReductionAttack> = (0..restarts)
        .map(|r| {
            let seed = Rng::derive(cfg.seed, r as u64).next_u64();
            attack_reduction(phi, k, &InversionConfig { seed, ..*cfg }, None, None)
        })
        .collect::<Result<_>>()?;
    let eps: Vec<f64> = runs.iter().map(|a| a.epsilon).collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.epsilon < a.epsilon { b } else { a })
        .expect("at least one restart");
    Ok((best, eps))
}

/// Summary written by `mixcon reduce`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessReport {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// `None` when the formula is unsatisfiable.
    pub completeness: Option<bool>,
    pub min_unsat: usize,
    #[serde(rename = "max_D")]
    pub max_d: f64,
    pub bound: f64,
    pub violations: usize,
    #[serde(rename = "lipschitz_U")]
    pub lipschitz_u: f64,
    pub max_ratio: f64,
}

/// Brute-force satisfiability plus the soundness and Lipschitz probes.
pub fn verify(phi: &CnfFormula, k: usize, samples: usize, trials: usize, seed: u64) -> Result<HardnessReport> {
    let model = brute_force_sat(phi)?;
    let completeness = match &model {
        Some(a) => Some(verify_completeness(phi, k, a)?),
        None => None,
    };
    let sound = soundness_scan(phi, k, samples, Rng::derive(seed, 0).next_u64())?;
    let lip = lipschitz_check(&build_reduction(phi, k)?, trials, Rng::derive(seed, 1).next_u64())?;
    Ok(HardnessReport {
        n: phi.n,
        m: phi.m(),
        b: phi.b,
        k,
        completeness,
        min_unsat: min_unsat(phi)?,
        max_d: sound.max_d,
        bound: sound.bound,
        violations: sound.violations,
        lipschitz_u: lip.u,
        max_ratio: lip.max_ratio,
    })
}
