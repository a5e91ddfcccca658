//! The explicit dropout regularizer of a deep linear network, its
//! decomposition into per-level sub-regularizers, nuclear-norm lower bounds
//! and equalization accounting, together with brute-force oracles
//! (full mask enumeration and Monte Carlo) for the dropout objective.

use ndarray::{Array1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::network::{
    self, c_row_norms, network_map, Architecture, DropoutConfig, InputMoment, WeightStack,
};

/// Default cap on the number of equalization terms enumerated explicitly.
pub const TERM_BUDGET: u64 = 1_000_000;
/// Default cap on the number of hidden units for full mask enumeration.
pub const MASK_UNIT_BUDGET: usize = 24;

/// Above this many hidden units mask probabilities are accumulated in log space.
const LOG_SPACE_UNITS: usize = 16;
/// Samples per deterministic Monte Carlo chunk.
const MC_CHUNK: usize = 4096;

/// `nu = prod_i (1 + lambda / d_i) - 1` over the hidden widths.
pub fn effective_nu(arch: &Architecture, cfg: &DropoutConfig) -> f64 {
    let lambda = cfg.lambda();
    arch.hidden_widths()
        .iter()
        .map(|&d| 1.0 + lambda / d as f64)
        .product::<f64>()
        - 1.0
}

/// Elementary symmetric polynomials `e_0, ..., e_n` of `values`.
pub fn elementary_symmetric(values: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; values.len() + 1];
    e[0] = 1.0;
    for (n, &x) in values.iter().enumerate() {
        for l in (1..=n + 1).rev() {
            e[l] += x * e[l - 1];
        }
    }
    e
}

/// `X + lambda * diag(X)`.
fn add_scaled_diagonal(x: &Matrix, diag_source: &Matrix, lambda: f64) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.nrows() {
        out[[i, i]] += lambda * diag_source[[i, i]];
    }
    out
}

fn sandwich(w: &Matrix, inner: &Matrix) -> Matrix {
    w.t().dot(&inner.dot(w))
}

fn trace_with(x: &Matrix, m: &InputMoment) -> f64 {
    if m.is_identity() {
        linalg::trace(x)
    } else {
        (x * m.c()).sum()
    }
}

/// `R = L_theta - L`, evaluated by a backward recursion over the layers.
///
/// With `P_i = W_i^T P_{i+1} W_i` the noiseless Gram chain and
/// `S_i = W_i^T (S_{i+1} + lambda diag(P_{i+1} + S_{i+1})) W_i`,
/// `R = tr(S_1 C)`. Tracking the excess `S` directly, instead of the full
/// second moment minus `tr(M C M^T)`, avoids cancellation when `lambda` is small.
pub fn explicit_regularizer(ws: &WeightStack, cfg: &DropoutConfig, m: &InputMoment) -> Result<f64> {
    m.check_dim(ws.architecture().input_dim())?;
    let lambda = cfg.lambda();
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let layers = ws.layers();
    let top = &layers[layers.len() - 1];
    let mut p = top.t().dot(top);
    let mut s = Matrix::zeros(p.dim());
    for w in layers[..layers.len() - 1].iter().rev() {
        let total = &p + &s;
        let s_inner = add_scaled_diagonal(&s, &total, lambda);
        s = sandwich(w, &s_inner);
        p = sandwich(w, &p);
    }
    Ok(trace_with(&s, m).max(0.0))
}

/// Per-level coefficients `R_1, ..., R_k` with `R = sum_l lambda^l R_l`.
///
/// Level `l` collects the terms where exactly `l` hidden layers contribute a
/// diagonal (variance) factor, so `S^(l)_i = W_i^T (S^(l)_{i+1} + diag(S^(l-1)_{i+1})) W_i`
/// with `S^(0)` the noiseless Gram chain.
pub fn sub_regularizers(ws: &WeightStack, m: &InputMoment) -> Result<Vec<f64>> {
    m.check_dim(ws.architecture().input_dim())?;
    let k = ws.hidden_depth();
    let layers = ws.layers();
    let top = &layers[k];
    let mut levels: Vec<Matrix> = vec![top.t().dot(top)];
    levels.extend((0..k).map(|_| Matrix::zeros((top.ncols(), top.ncols()))));
    for w in layers[..k].iter().rev() {
        let mut next = Vec::with_capacity(k + 1);
        next.push(sandwich(w, &levels[0]));
        for l in 1..=k {
            let inner = add_scaled_diagonal(&levels[l], &levels[l - 1], 1.0);
            next.push(sandwich(w, &inner));
        }
        levels = next;
    }
    Ok(levels[1..].iter().map(|s| trace_with(s, m).max(0.0)).collect())
}

/// `||W_{k+1 -> 1} C^{1/2}||_*`.
pub fn map_nuclear_c(ws: &WeightStack, m: &InputMoment) -> Result<f64> {
    m.check_dim(ws.architecture().input_dim())?;
    let map = network_map(ws);
    if m.is_identity() {
        network::nuclear_norm(&map)
    } else {
        network::nuclear_norm(&map.dot(m.sqrt_c()))
    }
}

/// `LB_l = ||M C^{1/2}||_*^2 * e_l(1/d_1, ..., 1/d_k)` for `l = 1..k`.
pub fn lower_bounds(ws: &WeightStack, m: &InputMoment) -> Result<Vec<f64>> {
    let nuc = map_nuclear_c(ws, m)?;
    Ok(lower_bounds_from_nuclear(ws.architecture(), nuc))
}

fn lower_bounds_from_nuclear(arch: &Architecture, nuc: f64) -> Vec<f64> {
    let inv: Vec<f64> = arch.hidden_widths().iter().map(|&d| 1.0 / d as f64).collect();
    elementary_symmetric(&inv)[1..]
        .iter()
        .map(|e| nuc * nuc * e)
        .collect()
}

/// Normalized equalization gaps `r_l = R_l / LB_l - 1` and `r = R / (nu ||M C^{1/2}||_*^2) - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGaps {
    pub levels: Vec<f64>,
    /// `None` when `nu = 0` (no dropout), where the envelope vanishes.
    pub overall: Option<f64>,
}

pub fn normalized_gaps(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    m: &InputMoment,
) -> Result<NormalizedGaps> {
    let report = regularizer_report(ws, cfg, m)?;
    let levels = report
        .levels
        .iter()
        .map(|l| l.gap)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Undefined("equalization gaps of a zero network map".into()))?;
    Ok(NormalizedGaps {
        levels,
        overall: report.overall_gap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub l: usize,
    #[serde(rename = "R_l")]
    pub r_l: f64,
    #[serde(rename = "LB_l")]
    pub lb_l: f64,
    pub gap: Option<f64>,
}

/// Everything the closed form says about one weight stack at one retain probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerReport {
    #[serde(rename = "R")]
    pub total_r: f64,
    pub nu: f64,
    #[serde(rename = "nuclear")]
    pub map_nuclear_c: f64,
    pub levels: Vec<LevelReport>,
    pub overall_gap: Option<f64>,
}

pub fn regularizer_report(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    m: &InputMoment,
) -> Result<RegularizerReport> {
    let total_r = explicit_regularizer(ws, cfg, m)?;
    let r_levels = sub_regularizers(ws, m)?;
    let nuc = map_nuclear_c(ws, m)?;
    let lbs = lower_bounds_from_nuclear(ws.architecture(), nuc);
    let nu = effective_nu(ws.architecture(), cfg);
    let levels = r_levels
        .iter()
        .zip(&lbs)
        .enumerate()
        .map(|(i, (&r_l, &lb_l))| LevelReport {
            l: i + 1,
            r_l,
            lb_l,
            gap: (lb_l > 0.0).then(|| r_l / lb_l - 1.0),
        })
        .collect();
    let envelope = nu * nuc * nuc;
    Ok(RegularizerReport {
        total_r,
        nu,
        map_nuclear_c: nuc,
        levels,
        overall_gap: (envelope > 0.0).then(|| total_r / envelope - 1.0),
    })
}

/// One summand `|alpha * prod beta * gamma|` of the sub-regularizer expansion.
///
/// Layer and node indices are 1-based: pivot layers are hidden layers `1..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizationTerm {
    pub pivot_layers: Vec<usize>,
    pub pivot_nodes: Vec<usize>,
    pub head: f64,
    pub middle_product: f64,
    pub tail: f64,
    pub term_value: f64,
}

/// Number of equalization terms: `prod_i (1 + d_i) - 1` over hidden widths.
pub fn equalization_term_count(arch: &Architecture) -> u64 {
    arch.hidden_widths()
        .iter()
        .fold(1u64, |acc, &d| acc.saturating_mul(1 + d as u64))
        - 1
}

/// Precomputed pieces shared by every term.
struct TermTables {
    /// `heads[j][i] = ||W_{j -> 1}(i, :)||_C`.
    heads: Vec<Vec<f64>>,
    /// `tails[j][i] = ||W_{k+1 -> j+1}(:, i)||`.
    tails: Vec<Vec<f64>>,
    /// `links[a][b] = W_{b -> a+1}` for hidden layers `a < b`.
    links: Vec<Vec<Option<Matrix>>>,
    k: usize,
}

impl TermTables {
    fn new(ws: &WeightStack, m: &InputMoment) -> Result<Self> {
        m.check_dim(ws.architecture().input_dim())?;
        let k = ws.hidden_depth();
        let mut heads = vec![Vec::new(); k + 1];
        let mut tails = vec![Vec::new(); k + 1];
        let mut links = vec![vec![None; k + 1]; k + 1];
        for j in 1..=k {
            heads[j] = c_row_norms(&ws.chain(j, 1), m);
            let tail = ws.chain(k + 1, j + 1);
            tails[j] = tail
                .axis_iter(Axis(1))
                .map(|c| c.dot(&c).sqrt())
                .collect();
            for (b, link) in links[j].iter_mut().enumerate().skip(j + 1) {
                *link = Some(ws.chain(b, j + 1));
            }
        }
        Ok(Self { heads, tails, links, k })
    }

    /// Depth-first walk over all (pivot layers, pivot nodes) tuples.
    fn visit(&self, mut f: impl FnMut(&[usize], &[usize], f64, f64, f64)) {
        let mut layers = Vec::with_capacity(self.k);
        let mut nodes = Vec::with_capacity(self.k);
        for j in 1..=self.k {
            for (i, &head) in self.heads[j].iter().enumerate() {
                layers.push(j);
                nodes.push(i);
                self.extend(&mut layers, &mut nodes, head, 1.0, &mut f);
                layers.pop();
                nodes.pop();
            }
        }
    }

    fn extend(
        &self,
        layers: &mut Vec<usize>,
        nodes: &mut Vec<usize>,
        head: f64,
        middle: f64,
        f: &mut impl FnMut(&[usize], &[usize], f64, f64, f64),
    ) {
        let j = *layers.last().unwrap();
        let i = *nodes.last().unwrap();
        f(layers, nodes, head, middle, self.tails[j][i]);
        for b in j + 1..=self.k {
            let link = self.links[j][b].as_ref().unwrap();
            for next in 0..link.nrows() {
                layers.push(b);
                nodes.push(next);
                self.extend(layers, nodes, head, middle * link[[next, i]], f);
                layers.pop();
                nodes.pop();
            }
        }
    }
}

/// Every term of the expansion, provided there are at most [`TERM_BUDGET`] of them.
pub fn equalization_terms(ws: &WeightStack, m: &InputMoment) -> Result<Vec<EqualizationTerm>> {
    equalization_terms_with_budget(ws, m, TERM_BUDGET)
}

pub fn equalization_terms_with_budget(
    ws: &WeightStack,
    m: &InputMoment,
    budget: u64,
) -> Result<Vec<EqualizationTerm>> {
    check_term_budget(ws.architecture(), budget)?;
    let tables = TermTables::new(ws, m)?;
    let mut terms = Vec::new();
    tables.visit(|layers, nodes, head, middle, tail| {
        terms.push(EqualizationTerm {
            pivot_layers: layers.to_vec(),
            pivot_nodes: nodes.iter().map(|n| n + 1).collect(),
            head,
            middle_product: middle,
            tail,
            term_value: (head * middle * tail).abs(),
        })
    });
    Ok(terms)
}

fn check_term_budget(arch: &Architecture, budget: u64) -> Result<()> {
    let count = equalization_term_count(arch);
    if count > budget {
        return Err(Error::Capacity(format!(
            "{count} equalization terms exceed the budget of {budget}; use the gap criterion instead"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqualizationMethod {
    /// Every term compared against its target value.
    Terms,
    /// Normalized gaps `r_l` compared against zero.
    Gaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualizationCheck {
    pub equalized: bool,
    /// Largest relative deviation of a term from its target, or the largest
    /// gap `r_l` under the gap method.
    pub max_deviation: f64,
    pub method: EqualizationMethod,
}

pub fn is_equalized(ws: &WeightStack, m: &InputMoment, tol: f64) -> Result<EqualizationCheck> {
    is_equalized_with_budget(ws, m, tol, TERM_BUDGET)
}

pub fn is_equalized_with_budget(
    ws: &WeightStack,
    m: &InputMoment,
    tol: f64,
    budget: u64,
) -> Result<EqualizationCheck> {
    let nuc = map_nuclear_c(ws, m)?;
    let arch = ws.architecture();
    if equalization_term_count(arch) <= budget {
        let tables = TermTables::new(ws, m)?;
        let widths = arch.widths();
        let mut worst = 0.0f64;
        tables.visit(|layers, _, head, middle, tail| {
            let denom: f64 = layers.iter().map(|&j| widths[j] as f64).product();
            let target = nuc / denom;
            let value = (head * middle * tail).abs();
            let dev = if target > 0.0 {
                (value - target).abs() / target
            } else {
                value
            };
            worst = worst.max(dev);
        });
        return Ok(EqualizationCheck {
            equalized: worst <= tol,
            max_deviation: worst,
            method: EqualizationMethod::Terms,
        });
    }
    let r_levels = sub_regularizers(ws, m)?;
    let lbs = lower_bounds_from_nuclear(arch, nuc);
    let worst = r_levels
        .iter()
        .zip(&lbs)
        .map(|(&r, &lb)| if lb > 0.0 { r / lb - 1.0 } else { r })
        .fold(0.0f64, f64::max);
    Ok(EqualizationCheck {
        equalized: worst <= tol,
        max_deviation: worst,
        method: EqualizationMethod::Gaps,
    })
}

/// Binary dropout masks `b_1, ..., b_k`, one per hidden layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMaskPattern {
    masks: Vec<Vec<bool>>,
}

impl DropoutMaskPattern {
    pub fn new(arch: &Architecture, masks: Vec<Vec<bool>>) -> Result<Self> {
        let widths = arch.hidden_widths();
        if masks.len() != widths.len() || masks.iter().zip(widths).any(|(b, &d)| b.len() != d) {
            return Err(Error::Shape(format!(
                "mask lengths do not match hidden widths {widths:?}"
            )));
        }
        Ok(Self { masks })
    }

    /// Each unit kept independently with probability `theta`.
    pub fn sample<R: Rng + ?Sized>(arch: &Architecture, theta: f64, rng: &mut R) -> Self {
        let masks = arch
            .hidden_widths()
            .iter()
            .map(|&d| (0..d).map(|_| rng.random::<f64>() < theta).collect())
            .collect();
        Self { masks }
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn kept(&self) -> usize {
        self.masks.iter().flatten().filter(|&&b| b).count()
    }
}

fn scale_rows_by_mask(x: &mut Matrix, mask: &[bool], inv_theta: f64) {
    for (mut row, &keep) in x.axis_iter_mut(Axis(0)).zip(mask) {
        if keep {
            row *= inv_theta;
        } else {
            row.fill(0.0);
        }
    }
}

/// `theta^{-k} W_{k+1} B_k ... B_1 W_1` for one mask pattern.
pub fn dropout_map(ws: &WeightStack, pattern: &DropoutMaskPattern, theta: f64) -> Result<Matrix> {
    if pattern.masks.len() != ws.hidden_depth() {
        return Err(Error::Shape("mask pattern depth does not match the stack".into()));
    }
    let inv_theta = 1.0 / theta;
    let layers = ws.layers();
    let mut acc = layers[0].clone();
    for (w, mask) in layers[1..].iter().zip(&pattern.masks) {
        if mask.len() != acc.nrows() {
            return Err(Error::Shape("mask width does not match the layer".into()));
        }
        scale_rows_by_mask(&mut acc, mask, inv_theta);
        acc = w.dot(&acc);
    }
    Ok(acc)
}

/// `E ||U diag(b) V x||^2` for `b ~ Bernoulli(theta)^n` and `E[x x^T] = C`.
pub fn masked_second_moment(u: &Matrix, v: &Matrix, m: &InputMoment, theta: f64) -> Result<f64> {
    if u.ncols() != v.nrows() {
        return Err(Error::Shape(format!(
            "inner dimensions differ: U is {}x{}, V is {}x{}",
            u.nrows(),
            u.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta must lie in [0, 1], got {theta}")));
    }
    let full = network::c_norm_sq(&u.dot(v), m)?;
    let row_norms = c_row_norms(v, m);
    let diag: f64 = u
        .axis_iter(Axis(1))
        .zip(&row_norms)
        .map(|(col, rn)| col.dot(&col) * rn * rn)
        .sum();
    Ok(theta * theta * full + (theta - theta * theta) * diag)
}

/// `R` by summing `P(b) ||W_bar(b) - W||_C^2` over every mask pattern.
///
/// Refuses stacks with more than [`MASK_UNIT_BUDGET`] hidden units.
pub fn exact_dropout_regularizer(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    m: &InputMoment,
) -> Result<f64> {
    exact_dropout_regularizer_with_budget(ws, cfg, m, MASK_UNIT_BUDGET)
}

pub fn exact_dropout_regularizer_with_budget(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    m: &InputMoment,
    max_units: usize,
) -> Result<f64> {
    let arch = ws.architecture();
    m.check_dim(arch.input_dim())?;
    let units = arch.hidden_units();
    if units > max_units {
        return Err(Error::Capacity(format!(
            "{units} hidden units exceed the enumeration budget of {max_units}"
        )));
    }
    if cfg.theta() == 1.0 {
        return Ok(0.0);
    }
    let enumerator = MaskEnumerator {
        ws,
        map: network_map(ws),
        m,
        theta: cfg.theta(),
        log_space: units > LOG_SPACE_UNITS,
    };
    let first_width = arch.hidden_widths()[0];
    let partials: Vec<f64> = (0u64..1 << first_width)
        .into_par_iter()
        .map(|bits| enumerator.sum_given_first_layer(bits))
        .collect();
    Ok(partials.iter().sum::<f64>().max(0.0))
}

struct MaskEnumerator<'a> {
    ws: &'a WeightStack,
    map: Matrix,
    m: &'a InputMoment,
    theta: f64,
    log_space: bool,
}

impl MaskEnumerator<'_> {
    fn layer_weight(&self, bits: u64, width: usize) -> f64 {
        let on = bits.count_ones() as i32;
        let off = width as i32 - on;
        if self.log_space {
            (on as f64 * self.theta.ln() + off as f64 * (1.0 - self.theta).ln()).exp()
        } else {
            self.theta.powi(on) * (1.0 - self.theta).powi(off)
        }
    }

    fn apply(&self, acc: &Matrix, bits: u64, layer: usize) -> Matrix {
        let mask: Vec<bool> = (0..acc.nrows()).map(|i| bits >> i & 1 == 1).collect();
        let mut masked = acc.clone();
        scale_rows_by_mask(&mut masked, &mask, 1.0 / self.theta);
        self.ws.layer(layer).dot(&masked)
    }

    fn sum_given_first_layer(&self, bits: u64) -> f64 {
        let w1 = self.ws.layer(1);
        let weight = self.layer_weight(bits, w1.nrows());
        if weight == 0.0 {
            return 0.0;
        }
        let next = self.apply(w1, bits, 2);
        weight * self.descend(next, 2)
    }

    /// `acc = W_{layer} B_{layer-1} ... W_1`; returns the conditional expectation.
    fn descend(&self, acc: Matrix, layer: usize) -> f64 {
        if layer == self.ws.layers().len() {
            let diff = &acc - &self.map;
            return network::c_norm_sq(&diff, self.m).expect("dimensions checked");
        }
        let width = acc.nrows();
        let mut total = 0.0;
        for bits in 0u64..1 << width {
            let weight = self.layer_weight(bits, width);
            if weight == 0.0 {
                continue;
            }
            total += weight * self.descend(self.apply(&acc, bits, layer + 1), layer + 1);
        }
        total
    }
}

/// Source of `(x, y)` pairs for Monte Carlo estimates.
pub trait DataSampler: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Array1<f64>, Array1<f64>);
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// `NaN` for a single sample.
    pub std_error: f64,
    pub samples: usize,
}

/// Running mean and sum of squared deviations, merged in a fixed order.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Moments {
    pub n: usize,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(self, other: Moments) -> Moments {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * other.n as f64 / n as f64,
            m2: self.m2 + other.m2 + delta * delta * (self.n * other.n) as f64 / n as f64,
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

/// Per-chunk generator: the same seed and chunk index always give the same stream.
pub(crate) fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Monte Carlo estimate of `L_theta = E ||y - W_bar x||^2` over data and masks.
pub fn mc_dropout_objective<S: DataSampler>(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    sampler: &S,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    let arch = ws.architecture();
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if sampler.input_dim() != arch.input_dim() || sampler.output_dim() != arch.output_dim() {
        return Err(Error::Shape("sampler dimensions do not match the network".into()));
    }
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let theta = cfg.theta();
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c as u64);
            let len = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut acc = Moments::default();
            for _ in 0..len {
                let (x, y) = sampler.sample(&mut rng);
                let pattern = DropoutMaskPattern::sample(arch, theta, &mut rng);
                let out = masked_forward(ws, &pattern, theta, x);
                let r = &y - &out;
                acc.push(r.dot(&r));
            }
            acc
        })
        .collect();
    let total = parts.into_iter().fold(Moments::default(), Moments::merge);
    Ok(McEstimate {
        mean: total.mean,
        std_error: total.std_error(),
        samples: total.n,
    })
}

fn masked_forward(
    ws: &WeightStack,
    pattern: &DropoutMaskPattern,
    theta: f64,
    x: Array1<f64>,
) -> Array1<f64> {
    let layers = ws.layers();
    let mut h = layers[0].dot(&x);
    for (w, mask) in layers[1..].iter().zip(pattern.masks()) {
        for (v, &keep) in h.iter_mut().zip(mask) {
            *v = if keep { *v / theta } else { 0.0 };
        }
        h = w.dot(&h);
    }
    h
}

/// Population second moments of a regression problem: `tr E[y y^T]`,
/// `C_yx = E[y x^T]` and `C = E[x x^T]`.
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    pub trace_cyy: f64,
    pub cyx: Matrix,
    pub moment: InputMoment,
}

impl PopulationMoments {
    pub fn new(trace_cyy: f64, cyx: Matrix, moment: InputMoment) -> Result<Self> {
        moment.check_dim(cyx.ncols())?;
        Ok(Self {
            trace_cyy,
            cyx,
            moment,
        })
    }

    /// Noise-free targets `y = N x` with `x ~ N(0, I)`.
    pub fn linear_identity(n: &Matrix) -> Self {
        Self {
            trace_cyy: n.iter().map(|v| v * v).sum(),
            cyx: n.clone(),
            moment: InputMoment::identity(n.ncols()),
        }
    }

    fn check(&self, ws: &WeightStack) -> Result<()> {
        let arch = ws.architecture();
        if self.cyx.nrows() != arch.output_dim() || self.cyx.ncols() != arch.input_dim() {
            return Err(Error::Shape(format!(
                "C_yx is {}x{} but the network maps {} -> {}",
                self.cyx.nrows(),
                self.cyx.ncols(),
                arch.input_dim(),
                arch.output_dim()
            )));
        }
        Ok(())
    }

    /// `E ||y - M x||^2 = tr C_yy - 2 tr(C_yx M^T) + ||M||_C^2` for a map `M`.
    pub fn loss_of_map(&self, map: &Matrix) -> Result<f64> {
        let cross = (&self.cyx * map).sum();
        Ok(self.trace_cyy - 2.0 * cross + network::c_norm_sq(map, &self.moment)?)
    }
}

/// Population risk `L(W)` of the deterministic network.
pub fn population_loss(ws: &WeightStack, pm: &PopulationMoments) -> Result<f64> {
    pm.check(ws)?;
    pm.loss_of_map(&network_map(ws))
}

/// Closed-form dropout objective `L_theta = tr C_yy - 2 tr(C_yx M^T) + E_b ||W_bar||_C^2`.
///
/// The mask-averaged second moment is propagated forward from the input, so
/// this agrees with `L + R` without sharing any code with [`explicit_regularizer`].
pub fn dropout_objective(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    pm: &PopulationMoments,
) -> Result<f64> {
    pm.check(ws)?;
    let cross = (&pm.cyx * &network_map(ws)).sum();
    Ok(pm.trace_cyy - 2.0 * cross + mask_averaged_second_moment(ws, cfg.lambda(), &pm.moment))
}

/// `E_b ||W_bar||_C^2` by the forward recursion `G_1 = C`, `G_{i+1} = D(W_i G_i W_i^T)`
/// with `D(X) = X + lambda diag(X)`.
pub fn mask_averaged_second_moment(ws: &WeightStack, lambda: f64, m: &InputMoment) -> f64 {
    let layers = ws.layers();
    let n = layers.len();
    let mut g = m.c().clone();
    for w in &layers[..n - 1] {
        let h = w.dot(&g).dot(&w.t());
        g = add_scaled_diagonal(&h, &h, lambda);
    }
    let top = &layers[n - 1];
    (top.dot(&g) * top).sum()
}

/// Gradient of the closed-form `L_theta` with respect to every layer.
///
/// The mask-averaged second moment `tr(E[W_bar] C E[W_bar]^T) + R` is a chain of
/// maps `G -> W G W^T -> (1 + lambda diag)` applied to `C`, so its gradient
/// follows from one forward sweep (the `G_i`) and one backward sweep (the `T_i`).
pub fn dropout_objective_gradient(
    ws: &WeightStack,
    cfg: &DropoutConfig,
    pm: &PopulationMoments,
) -> Result<Vec<Matrix>> {
    pm.check(ws)?;
    let mut grads = second_moment_gradient(ws, cfg.lambda(), &pm.moment);
    let (prefix, suffix) = chain_products(ws);
    for (i, g) in grads.iter_mut().enumerate() {
        // d tr(C_yx M^T) / d W_i = A_i^T C_yx B_i^T
        let cross = suffix[i].t().dot(&pm.cyx).dot(&prefix[i].t());
        g.scaled_add(-2.0, &cross);
    }
    Ok(grads)
}

/// Gradient of `E_b ||W_bar||_C^2` with respect to each layer.
pub(crate) fn second_moment_gradient(
    ws: &WeightStack,
    lambda: f64,
    m: &InputMoment,
) -> Vec<Matrix> {
    let layers = ws.layers();
    let n = layers.len();
    // forward: G_1 = C, G_{i+1} = D(W_i G_i W_i^T)
    let mut g = Vec::with_capacity(n);
    g.push(m.c().clone());
    for w in &layers[..n - 1] {
        let h = w.dot(g.last().unwrap()).dot(&w.t());
        g.push(add_scaled_diagonal(&h, &h, lambda));
    }
    // backward: T_{k+1} = D(W_{k+1}^T W_{k+1}), T_i = D(W_i^T T_{i+1} W_i)
    let mut grads = vec![Matrix::zeros((0, 0)); n];
    let top = &layers[n - 1];
    grads[n - 1] = top.dot(&g[n - 1]) * 2.0;
    let q = top.t().dot(top);
    let mut t = add_scaled_diagonal(&q, &q, lambda);
    for i in (0..n - 1).rev() {
        let w = &layers[i];
        grads[i] = t.dot(w).dot(&g[i]) * 2.0;
        if i > 0 {
            let q = sandwich(w, &t);
            t = add_scaled_diagonal(&q, &q, lambda);
        }
    }
    grads
}

/// `prefix[i] = W_{i-1} ... W_1` (identity for the first layer) and
/// `suffix[i] = W_{k+1} ... W_{i+1}` (identity for the last), 0-based `i`.
pub(crate) fn chain_products(ws: &WeightStack) -> (Vec<Matrix>, Vec<Matrix>) {
    let layers = ws.layers();
    let n = layers.len();
    let mut prefix = Vec::with_capacity(n);
    prefix.push(Matrix::eye(layers[0].ncols()));
    for i in 1..n {
        prefix.push(layers[i - 1].dot(&prefix[i - 1]));
    }
    let mut suffix = vec![Matrix::zeros((0, 0)); n];
    suffix[n - 1] = Matrix::eye(layers[n - 1].nrows());
    for i in (0..n - 1).rev() {
        suffix[i] = suffix[i + 1].dot(&layers[i + 1]);
    }
    (prefix, suffix)
}
