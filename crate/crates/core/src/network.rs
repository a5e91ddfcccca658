//! Factored linear networks: architectures, weight stacks, dropout settings
//! and input second moments.

use std::path::Path;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ensure_finite, Matrix, Spectrum};

/// Layer widths `(d_0, d_1, ..., d_{k+1})` of a network with `k >= 1` hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureRepr", into = "ArchitectureRepr")]
pub struct Architecture {
    widths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ArchitectureRepr {
    widths: Vec<usize>,
}

impl TryFrom<ArchitectureRepr> for Architecture {
    type Error = Error;
    fn try_from(r: ArchitectureRepr) -> Result<Self> {
        Architecture::new(r.widths)
    }
}

impl From<Architecture> for ArchitectureRepr {
    fn from(a: Architecture) -> Self {
        ArchitectureRepr { widths: a.widths }
    }
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Shape(format!(
                "an architecture needs input, output and at least one hidden width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Shape(format!("every width must be positive, got {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of hidden layers `k`.
    pub fn hidden_depth(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[1..self.widths.len() - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    /// `min_{i >= 1} d_i`: the largest rank a network map can have.
    pub fn max_rank(&self) -> usize {
        self.widths[1..].iter().copied().min().unwrap_or(0)
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden_widths().iter().sum()
    }
}

/// The weight matrices `W_1, ..., W_{k+1}`, input layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    weights: Vec<Matrix>,
    arch: Architecture,
}

impl WeightStack {
    pub fn new(weights: Vec<Matrix>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::Shape(format!(
                "a weight stack needs at least two layers, got {}",
                weights.len()
            )));
        }
        let mut widths = vec![weights[0].ncols()];
        for (i, w) in weights.iter().enumerate() {
            if w.ncols() != *widths.last().unwrap() {
                return Err(Error::Shape(format!(
                    "layer {} has {} columns but the previous layer has {} rows",
                    i + 1,
                    w.ncols(),
                    widths.last().unwrap()
                )));
            }
            ensure_finite(w.view(), &format!("layer {}", i + 1))?;
            widths.push(w.nrows());
        }
        let arch = Architecture::new(widths)?;
        Ok(Self { weights, arch })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn hidden_depth(&self) -> usize {
        self.arch.hidden_depth()
    }

    /// All layers; `layers()[i]` is `W_{i+1}` with shape `d_{i+1} x d_i`.
    pub fn layers(&self) -> &[Matrix] {
        &self.weights
    }

    /// `W_i` with the 1-based layer index used throughout the crate.
    pub fn layer(&self, i: usize) -> &Matrix {
        &self.weights[i - 1]
    }

    pub fn into_layers(self) -> Vec<Matrix> {
        self.weights
    }

    /// `W_{hi -> lo} = W_hi W_{hi-1} ... W_lo` for `1 <= lo <= hi <= k+1`.
    pub fn chain(&self, hi: usize, lo: usize) -> Matrix {
        assert!(1 <= lo && lo <= hi && hi <= self.weights.len());
        let mut acc = self.weights[lo - 1].clone();
        for w in &self.weights[lo..hi] {
            acc = w.dot(&acc);
        }
        acc
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: WeightFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&WeightFile::from(self))?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

/// On-disk form of a weight stack: `{"widths": [...], "weights": [[[...]]]}`.
///
/// Each matrix is a list of rows. `serde_json` prints the shortest decimal
/// that parses back to the same `f64`, so files round-trip bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightFile {
    pub widths: Vec<usize>,
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl From<&WeightStack> for WeightFile {
    fn from(ws: &WeightStack) -> Self {
        WeightFile {
            widths: ws.arch.widths.clone(),
            weights: ws.weights.iter().map(matrix_to_rows).collect(),
        }
    }
}

impl TryFrom<WeightFile> for WeightStack {
    type Error = Error;
    fn try_from(f: WeightFile) -> Result<Self> {
        let weights = f
            .weights
            .iter()
            .map(|rows| matrix_from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        let ws = WeightStack::new(weights)?;
        if ws.arch.widths != f.widths {
            return Err(Error::Shape(format!(
                "declared widths {:?} do not match weight shapes {:?}",
                f.widths, ws.arch.widths
            )));
        }
        Ok(ws)
    }
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Builds a matrix from a list of equally long rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || ncols == 0 {
        return Err(Error::Shape("matrix must have at least one row and column".into()));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let m = Matrix::from_shape_vec((rows.len(), ncols), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    ensure_finite(m.view(), "matrix")?;
    Ok(m)
}

/// Retain probability `theta` and the derived `lambda = (1 - theta) / theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    theta: f64,
    lambda: f64,
}

impl DropoutConfig {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "retain probability must lie in (0, 1], got {theta}"
            )));
        }
        Ok(Self {
            theta,
            lambda: (1.0 - theta) / theta,
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Dropout rate `1 - theta`.
    pub fn rate(&self) -> f64 {
        1.0 - self.theta
    }
}

/// Input second moment `C = E[x x^T]` with its principal square root and
/// the inverse of that root.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMoment {
    c: Matrix,
    sqrt_c: Matrix,
    inv_sqrt_c: Matrix,
    identity: bool,
}

impl InputMoment {
    pub fn identity(dim: usize) -> Self {
        let eye = Matrix::eye(dim);
        Self {
            c: eye.clone(),
            sqrt_c: eye.clone(),
            inv_sqrt_c: eye,
            identity: true,
        }
    }

    /// Rejects non-symmetric input and eigenvalues `<= 1e-12 * lambda_max`.
    pub fn new(c: Matrix) -> Result<Self> {
        let n = c.nrows();
        if c.ncols() != n || n == 0 {
            return Err(Error::Shape(format!(
                "second moment must be square, got {}x{}",
                n,
                c.ncols()
            )));
        }
        let scale = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..n {
            for j in 0..i {
                if (c[[i, j]] - c[[j, i]]).abs() > 1e-12 * scale.max(1.0) {
                    return Err(Error::InvalidArgument("second moment is not symmetric".into()));
                }
            }
        }
        let sym = (&c + &c.t()) * 0.5;
        let (values, vectors) = linalg::symmetric_eigen(&sym)?;
        let top = values[0];
        let floor = values[n - 1];
        if top.is_nan() || top <= 0.0 || floor <= 1e-12 * top {
            return Err(Error::InvalidArgument(format!(
                "second moment is not positive definite (eigenvalues in [{floor:e}, {top:e}])"
            )));
        }
        let sqrt_c = linalg::spectral_apply(&values, &vectors, f64::sqrt);
        let inv_sqrt_c = linalg::spectral_apply(&values, &vectors, |x| 1.0 / x.sqrt());
        Ok(Self {
            c: sym,
            sqrt_c,
            inv_sqrt_c,
            identity: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn sqrt_c(&self) -> &Matrix {
        &self.sqrt_c
    }

    pub fn inv_sqrt_c(&self) -> &Matrix {
        &self.inv_sqrt_c
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub(crate) fn check_dim(&self, d0: usize) -> Result<()> {
        if self.dim() != d0 {
            return Err(Error::Shape(format!(
                "second moment is {0}x{0} but the input dimension is {d0}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `W_{k+1} ... W_1`.
pub fn network_map(ws: &WeightStack) -> Matrix {
    ws.chain(ws.layers().len(), 1)
}

/// `||X||_C^2 = trace(X C X^T)`.
pub fn c_norm_sq(x: &Matrix, m: &InputMoment) -> Result<f64> {
    m.check_dim(x.ncols())?;
    if m.is_identity() {
        return Ok(x.iter().map(|v| v * v).sum());
    }
    let xc = x.dot(m.c());
    Ok((&xc * x).sum().max(0.0))
}

pub fn nuclear_norm(x: &Matrix) -> Result<f64> {
    Ok(linalg::svd(x)?.nuclear_norm())
}

pub fn spectrum(x: &Matrix) -> Result<Spectrum> {
    linalg::svd(x)
}

/// Multiplies `W_i` by `alphas[i-1]`. The product of `alphas` must be 1.
pub fn rescale(ws: &WeightStack, alphas: &[f64]) -> Result<WeightStack> {
    if alphas.len() != ws.layers().len() {
        return Err(Error::Shape(format!(
            "need {} scale factors, got {}",
            ws.layers().len(),
            alphas.len()
        )));
    }
    if alphas.iter().any(|&a| a == 0.0 || !a.is_finite()) {
        return Err(Error::Contract("scale factors must be finite and nonzero".into()));
    }
    let prod: f64 = alphas.iter().product();
    if (prod - 1.0).abs() > 1e-12 {
        return Err(Error::Contract(format!("scale factors multiply to {prod}, not 1")));
    }
    WeightStack::new(
        ws.layers()
            .iter()
            .zip(alphas)
            .map(|(w, &a)| w * a)
            .collect(),
    )
}

/// Gaussian weights with standard deviation `scale / sqrt(fan_in)`.
pub fn random_init(arch: &Architecture, scale: f64, seed: u64) -> Result<WeightStack> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("init scale must be positive, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = arch
        .widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, scale / (fan_in as f64).sqrt()).expect("positive std");
            Matrix::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng))
        })
        .collect();
    WeightStack::new(weights)
}

/// Row norms `||C^{1/2} x_i||` of a matrix whose rows live in input space.
pub(crate) fn c_row_norms(x: &Matrix, m: &InputMoment) -> Vec<f64> {
    if m.is_identity() {
        return x.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect();
    }
    let xc = x.dot(m.c());
    xc.axis_iter(Axis(0))
        .zip(x.axis_iter(Axis(0)))
        .map(|(a, b)| a.dot(&b).max(0.0).sqrt())
        .collect()
}
