//! Linear two-component autoencoder objectives and the PCA bridge.
//!
//! `X` is a `d x n` matrix whose columns are centered samples. Both
//! objectives use the unsquared Frobenius norm, the setting in which the
//! triangle-inequality relaxation from the one-step objective to the
//! three-term objective holds.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;
use crate::train::{adam_step, AdamConfig, AdamMoments};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::shape("matrix", "columns have unequal lengths"));
        }
        Ok(Matrix::from_fn(rows, cols, |i, j| columns[j][i]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip(other, "add", |a, b| a + b)
    }

    fn zip(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Columns `0..k` as a new matrix.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("matrix extents are positive")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [r, c] => Matrix::from_rows(r, c, t.data().to_vec()),
            ref s => Err(Error::shape("matrix", format!("expected 2-D tensor, got {s:?}"))),
        }
    }
}

/// `d x n` sample matrix with zero mean across samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMatrix(Matrix);

impl DataMatrix {
    /// Centers `x` by subtracting the mean sample from every column.
    pub fn centered(x: Matrix) -> Self {
        let n = x.cols.max(1) as f64;
        let mut x = x;
        for i in 0..x.rows {
            let row = &mut x.data[i * x.cols..(i + 1) * x.cols];
            let mean = row.iter().sum::<f64>() / n;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        DataMatrix(x)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn samples(&self) -> usize {
        self.0.cols
    }

    /// `X X^T / n`.
    pub fn covariance(&self) -> Matrix {
        let x = &self.0;
        let n = x.cols.max(1) as f64;
        Matrix::from_fn(x.rows, x.rows, |i, j| {
            let a = &x.data[i * x.cols..(i + 1) * x.cols];
            let b = &x.data[j * x.cols..(j + 1) * x.cols];
            a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / n
        })
    }

    /// Samples with the columns permuted.
    pub fn permuted(&self, order: &[usize]) -> DataMatrix {
        let x = &self.0;
        DataMatrix(Matrix::from_fn(x.rows, x.cols, |i, j| x.get(i, order[j])))
    }
}

/// Linear autoencoder with two component blocks; columns are directions.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAE {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl LinearAE {
    pub fn new(w1: Matrix, w2: Matrix) -> Result<Self> {
        let ae = LinearAE { w1, w2 };
        ae.validate(None)?;
        Ok(ae)
    }

    /// Weights drawn from `N(0, 1/d)`.
    pub fn random(d: usize, k1: usize, k2: usize, seed: u64) -> Result<Self> {
        let mut rng = SeedStream::new(seed);
        let sd = (1.0 / d as f64).sqrt();
        let w1 = Matrix::from_fn(d, k1, |_, _| sd * rng.normal());
        let w2 = Matrix::from_fn(d, k2, |_, _| sd * rng.normal());
        LinearAE::new(w1, w2)
    }

    /// Row counts must agree with each other and with the data dimension.
    fn check_dims(&self, d: usize) -> Result<()> {
        let (d1, d2) = (self.w1.rows, self.w2.rows);
        if d1 != d2 {
            return Err(Error::shape("linear_ae", format!("w1 has {d1} rows, w2 has {d2}")));
        }
        if d != d1 {
            return Err(Error::shape(
                "linear_ae",
                format!("weights have {d1} rows, data has dimension {d}"),
            ));
        }
        Ok(())
    }

    fn validate(&self, d: Option<usize>) -> Result<()> {
        let (d1, k1, k2) = (self.w1.rows, self.w1.cols, self.w2.cols);
        self.check_dims(d.unwrap_or(d1))?;
        if k1 == 0 || k2 == 0 || k1 + k2 > d1 {
            return Err(Error::Invalid(format!(
                "need k1, k2 >= 1 and k1 + k2 <= d, got k1={k1}, k2={k2}, d={d1}"
            )));
        }
        if !self.w1.data.iter().chain(&self.w2.data).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite linear AE weights".into()));
        }
        Ok(())
    }
}

/// `w w^T m`.
fn project(w: &Matrix, m: &Matrix) -> Result<Matrix> {
    w.matmul(&w.transpose().matmul(m)?)
}

/// `l1 ||X - w1 w1^T X|| + l2 ||R - w2 w2^T R||` with `R = X - w1 w1^T X`.
pub fn objective_eq1(x: &DataMatrix, ae: &LinearAE, l1: f64, l2: f64) -> Result<f64> {
    ae.check_dims(x.dim())?;
    let x = x.matrix();
    let r = x.sub(&project(&ae.w1, x)?)?;
    let r2 = r.sub(&project(&ae.w2, &r)?)?;
    Ok(l1 * r.frobenius() + l2 * r2.frobenius())
}

/// `l1 ||X - P1 X|| + l2 ||X - (P1 X + P2 X)|| + l3 ||P2 P1 X||` with `Pi = wi wi^T`.
pub fn objective_eq2(x: &DataMatrix, ae: &LinearAE, l1: f64, l2: f64, l3: f64) -> Result<f64> {
    ae.check_dims(x.dim())?;
    let x = x.matrix();
    let p1x = project(&ae.w1, x)?;
    let p2x = project(&ae.w2, x)?;
    let r1 = x.sub(&p1x)?;
    let r2 = r1.sub(&p2x)?;
    let cross = project(&ae.w2, &p1x)?;
    Ok(l1 * r1.frobenius() + l2 * r2.frobenius() + l3 * cross.frobenius())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Slack absorbed by the bound comparison.
pub const BOUND_SLACK: f64 = 1e-9;

/// Compares the one-step objective against its three-term relaxation with `l3 = l2`.
pub fn bound_check(x: &DataMatrix, ae: &LinearAE, l1: f64, l2: f64) -> Result<BoundCheck> {
    let lhs = objective_eq1(x, ae, l1, l2)?;
    let rhs = objective_eq2(x, ae, l1, l2, l2)?;
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + BOUND_SLACK,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// `d x k` orthonormal columns.
    pub components: Matrix,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Indices `i` with `eigenvalues[i] - eigenvalues[i + 1] < 1e-8`.
    pub degenerate: Vec<usize>,
}

pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;
const DEGENERATE_GAP: f64 = 1e-8;

/// Top-`k` eigenpairs of `X X^T / n` by deflated power iteration.
pub fn pca_oracle(x: &DataMatrix, k: usize) -> Result<PcaResult> {
    let d = x.dim();
    if k == 0 || k > d {
        return Err(Error::Invalid(format!("pca rank {k} outside 1..={d}")));
    }
    let mut c = x.covariance();
    let scale = c.frobenius().max(f64::MIN_POSITIVE);
    let mut rng = SeedStream::new(0x0050_4341);
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigs = Vec::with_capacity(k);

    for component in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        orthogonalize(&mut v, &comps);
        normalize(&mut v);
        let mut converged = false;
        let mut residual = f64::INFINITY;
        let mut lambda = 0.0;
        for _ in 0..PCA_MAX_ITERATIONS {
            let cv = sym_apply(&c, &v);
            lambda = dot(&v, &cv);
            residual = cv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            if residual <= PCA_TOLERANCE * scale {
                converged = true;
                break;
            }
            let mut next = cv;
            orthogonalize(&mut next, &comps);
            if normalize(&mut next) == 0.0 {
                // v lies in the null space of the deflated operator
                converged = true;
                lambda = 0.0;
                break;
            }
            v = next;
        }
        if !converged {
            return Err(Error::NoConvergence { component, residual });
        }
        let lambda = lambda.max(0.0);
        for i in 0..d {
            for j in 0..d {
                let val = c.get(i, j) - lambda * v[i] * v[j];
                c.set(i, j, val);
            }
        }
        comps.push(v);
        eigs.push(lambda);
    }

    // deflation can return near-ties slightly out of order
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eigs[b].total_cmp(&eigs[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eigs[i]).collect();
    let components = Matrix::from_columns(&order.iter().map(|&i| comps[i].clone()).collect::<Vec<_>>())?;
    let degenerate = eigenvalues
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] - w[1] < DEGENERATE_GAP)
        .map(|(i, _)| i)
        .collect();
    Ok(PcaResult {
        components,
        eigenvalues,
        degenerate,
    })
}

/// Minimal rank-`k` mean squared reconstruction error `sum_{i>k} lambda_i`.
pub fn eckart_young_optimum(x: &DataMatrix, k: usize) -> Result<f64> {
    let all = pca_oracle(x, x.dim())?;
    Ok(all.eigenvalues[k.min(all.eigenvalues.len())..].iter().sum())
}

/// `||X - w w^T X||_F^2 / n`.
pub fn reconstruction_error(x: &DataMatrix, w: &Matrix) -> Result<f64> {
    let r = x.matrix().sub(&project(w, x.matrix())?)?;
    Ok(r.frobenius().powi(2) / x.samples().max(1) as f64)
}

/// Principal angles between the column spans of `a` and `b`, ascending, in radians.
pub fn principal_angles(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "principal_angles",
            format!("ambient dimensions {} and {} differ", a.rows, b.rows),
        ));
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let m = qa.transpose().matmul(&qb)?;
    let (small, large) = if m.rows <= m.cols {
        (m.matmul(&m.transpose())?, m.rows)
    } else {
        (m.transpose().matmul(&m)?, m.cols)
    };
    let mut sv: Vec<f64> = symmetric_eigenvalues(&small)
        .into_iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    debug_assert_eq!(sv.len(), large);
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv.into_iter().map(|s| s.clamp(0.0, 1.0).acos()).collect())
}

/// Modified Gram–Schmidt; fails on (numerically) dependent columns.
pub fn orthonormal_basis(a: &Matrix) -> Result<Matrix> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(a.cols);
    for j in 0..a.cols {
        let mut v = a.column(j);
        let orig = norm(&v);
        orthogonalize(&mut v, &cols);
        orthogonalize(&mut v, &cols);
        let n = norm(&v);
        if orig == 0.0 || n <= 1e-10 * orig {
            return Err(Error::RankDeficient { column: j });
        }
        v.iter_mut().for_each(|x| *x /= n);
        cols.push(v);
    }
    Matrix::from_columns(&cols)
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
fn symmetric_eigenvalues(s: &Matrix) -> Vec<f64> {
    let n = s.rows;
    let mut a = s.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

fn sym_apply(c: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..c.rows)
        .map(|i| dot(&c.data[i * c.cols..(i + 1) * c.cols], v))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Centered samples `Q diag(sqrt(spectrum)) G` with a random rotation `Q`.
pub fn planted_spectrum(spectrum: &[f64], n: usize, seed: u64) -> Result<DataMatrix> {
    let d = spectrum.len();
    if d == 0 || n == 0 {
        return Err(Error::Invalid("planted spectrum needs d >= 1 and n >= 1".into()));
    }
    let mut rng = SeedStream::new(seed);
    let q = orthonormal_basis(&Matrix::from_fn(d, d, |_, _| rng.normal()))?;
    let g = Matrix::from_fn(d, n, |i, _| spectrum[i].sqrt() * rng.normal());
    Ok(DataMatrix::centered(q.matmul(&g)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearTrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    /// Multiplicative learning-rate factor applied every step.
    pub lr_decay: f64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        LinearTrainConfig {
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            steps: 3000,
            lr_decay: 0.999,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearTrainResult {
    pub ae: LinearAE,
    /// Three-term objective before each step, then once more at the end.
    pub trace: Vec<f64>,
}

/// Objective above which linear training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

fn eq2_graph(g: &mut Graph, p: &ParamStore, x: &Tensor, w: ObjectiveWeights) -> Result<Var> {
    let x = g.constant(x.clone());
    let w1 = g.param(p, "w1")?;
    let w2 = g.param(p, "w2")?;
    let w1t = g.transpose(w1)?;
    let w2t = g.transpose(w2)?;
    let c1 = g.matmul(w1t, x)?;
    let p1x = g.matmul(w1, c1)?;
    let c2 = g.matmul(w2t, x)?;
    let p2x = g.matmul(w2, c2)?;
    let r1 = g.sub(x, p1x)?;
    let r2 = g.sub(r1, p2x)?;
    let c3 = g.matmul(w2t, p1x)?;
    let cross = g.matmul(w2, c3)?;
    let n1 = g.frobenius_norm(r1);
    let n2 = g.frobenius_norm(r2);
    let n3 = g.frobenius_norm(cross);
    let t1 = g.mul_scalar(n1, w.l1);
    let t2 = g.mul_scalar(n2, w.l2);
    let t3 = g.mul_scalar(n3, w.l3);
    let s = g.add(t1, t2)?;
    g.add(s, t3)
}

/// Minimizes the three-term objective over `w1, w2` with Adam.
pub fn train_linear(
    x: &DataMatrix,
    init: &LinearAE,
    w: ObjectiveWeights,
    cfg: &LinearTrainConfig,
) -> Result<LinearTrainResult> {
    init.validate(Some(x.dim()))?;
    let xt = x.matrix().to_tensor();
    let mut params = ParamStore::new();
    params.insert("w1", init.w1.to_tensor());
    params.insert("w2", init.w2.to_tensor());
    let mut moments = AdamMoments::new(&params);
    let mut adam = cfg.adam;
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        params.zero_grads();
        let mut g = Graph::new();
        let root = eq2_graph(&mut g, &params, &xt, w)?;
        let obj = g.value(root).item();
        trace.push(obj);
        if !obj.is_finite() || obj > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                epoch: 0,
                batch: step,
                detail: format!("linear objective {obj:e}"),
            });
        }
        if step == cfg.steps {
            break;
        }
        g.backward(root, &mut params)?;
        adam_step(&mut params, &mut moments, &adam)?;
        adam.lr *= cfg.lr_decay;
    }
    let ae = LinearAE {
        w1: Matrix::from_tensor(params.value("w1")?)?,
        w2: Matrix::from_tensor(params.value("w2")?)?,
    };
    Ok(LinearTrainResult { ae, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn to_na(m: &Matrix) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
    }

    /// Independent evaluation of both objectives with nalgebra.
    fn oracle(x: &Matrix, w1: &Matrix, w2: &Matrix, l: [f64; 3]) -> (f64, f64) {
        let (x, w1, w2) = (to_na(x), to_na(w1), to_na(w2));
        let p1 = &w1 * w1.transpose();
        let p2 = &w2 * w2.transpose();
        let r = &x - &p1 * &x;
        let eq1 = l[0] * r.norm() + l[1] * (&r - &p2 * &r).norm();
        let eq2 = l[0] * r.norm() + l[1] * (&x - &p1 * &x - &p2 * &x).norm() + l[2] * (&p2 * &p1 * &x).norm();
        (eq1, eq2)
    }

    fn random_instance(seed: u64, d: usize, n: usize, k1: usize, k2: usize) -> (DataMatrix, LinearAE) {
        let mut rng = SeedStream::new(seed);
        let x = DataMatrix::centered(Matrix::from_fn(d, n, |_, _| rng.normal()));
        let ae = LinearAE::random(d, k1, k2, seed ^ 0xABCD).unwrap();
        (x, ae)
    }

    #[test]
    fn centering_zeroes_row_means() {
        let (x, _) = random_instance(1, 4, 9, 1, 1);
        for i in 0..4 {
            let m: f64 = (0..9).map(|j| x.matrix().get(i, j)).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_give_norm_of_x() {
        let (x, _) = random_instance(2, 3, 5, 1, 1);
        let ae = LinearAE {
            w1: Matrix::zeros(3, 1),
            w2: Matrix::zeros(3, 1),
        };
        let nx = x.matrix().frobenius();
        assert!((objective_eq1(&x, &ae, 0.7, 1.3).unwrap() - 2.0 * nx).abs() < 1e-12);
    }

    #[test]
    fn exact_reconstruction_gives_zero() {
        let x = DataMatrix(Matrix::from_rows(1, 1, vec![2.0]).unwrap());
        for w2 in [0.0, 0.5, -3.0] {
            let ae = LinearAE {
                w1: Matrix::from_rows(1, 1, vec![1.0]).unwrap(),
                w2: Matrix::from_rows(1, 1, vec![w2]).unwrap(),
            };
            assert_eq!(objective_eq1(&x, &ae, 1.0, 1.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn objectives_match_matrix_oracle() {
        let (x, ae) = random_instance(3, 3, 5, 1, 1);
        let l = [0.8, 1.7, 0.4];
        let (e1, e2) = oracle(x.matrix(), &ae.w1, &ae.w2, l);
        assert!((objective_eq1(&x, &ae, l[0], l[1]).unwrap() - e1).abs() < 1e-12);
        assert!((objective_eq2(&x, &ae, l[0], l[1], l[2]).unwrap() - e2).abs() < 1e-12);
    }

    #[test]
    fn eq2_degenerate_cases() {
        let (x, ae) = random_instance(4, 4, 6, 2, 1);
        let zero2 = LinearAE {
            w1: ae.w1.clone(),
            w2: Matrix::zeros(4, 1),
        };
        let r = x
            .matrix()
            .sub(&project(&ae.w1, x.matrix()).unwrap())
            .unwrap()
            .frobenius();
        assert!((objective_eq2(&x, &zero2, 1.0, 2.0, 5.0).unwrap() - 3.0 * r).abs() < 1e-12);

        // orthonormal w1 orthogonal to w2: cross term vanishes
        let e = |i: usize| Matrix::from_fn(4, 1, |r, _| if r == i { 1.0 } else { 0.0 });
        let w1 = Matrix::from_fn(4, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let ortho = LinearAE {
            w1,
            w2: e(3).scale(2.0),
        };
        let with = objective_eq2(&x, &ortho, 1.0, 1.0, 1.0).unwrap();
        let without = objective_eq2(&x, &ortho, 1.0, 1.0, 0.0).unwrap();
        assert!((with - without).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (x, _) = random_instance(5, 3, 4, 1, 1);
        let ae = LinearAE::random(4, 1, 1, 0).unwrap();
        assert!(objective_eq1(&x, &ae, 1.0, 1.0).is_err());
        assert!(LinearAE::random(3, 2, 2, 0).is_err());
    }

    #[test]
    fn bound_check_cases() {
        let (x, ae) = random_instance(6, 2, 4, 1, 1);
        let b = bound_check(&x, &ae, 1.0, 1.0).unwrap();
        let (e1, e2) = oracle(x.matrix(), &ae.w1, &ae.w2, [1.0, 1.0, 1.0]);
        assert!((b.lhs - e1).abs() < 1e-12 && (b.rhs - e2).abs() < 1e-12);
        assert!(b.holds && b.lhs <= b.rhs);

        let w2zero = LinearAE {
            w1: ae.w1.clone(),
            w2: Matrix::zeros(2, 1),
        };
        let b = bound_check(&x, &w2zero, 0.3, 2.0).unwrap();
        assert_eq!(b.lhs, b.rhs);
    }

    #[test]
    fn pca_recovers_planted_diagonal_spectrum() {
        let mut rng = SeedStream::new(7);
        let sd = [2.0, 1.0, 0.5];
        let x = DataMatrix::centered(Matrix::from_fn(3, 10_000, |i, _| sd[i] * rng.normal()));
        let p = pca_oracle(&x, 3).unwrap();
        for (e, t) in p.eigenvalues.iter().zip([4.0, 1.0, 0.25]) {
            assert!((e - t).abs() / t < 0.05, "{e} vs {t}");
        }
        let gram = p.components.transpose().matmul(&p.components).unwrap();
        assert!(gram.sub(&Matrix::identity(3)).unwrap().frobenius() < 1e-8);
    }

    #[test]
    fn pca_isotropic_and_rank_one() {
        // exactly isotropic: X X^T / n = 2 I
        let n = 4;
        let x = DataMatrix(Matrix::from_fn(2, n, |i, j| match (i, j) {
            (0, 0) | (1, 1) => 2.0,
            (0, 2) | (1, 3) => -2.0,
            _ => 0.0,
        }));
        let p = pca_oracle(&x, 2).unwrap();
        assert!((p.eigenvalues[0] - 2.0).abs() < 1e-9 && (p.eigenvalues[1] - 2.0).abs() < 1e-9);
        assert_eq!(p.degenerate, vec![0]);

        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, -1.0, 2.0, 0.7, -2.0];
        let x = DataMatrix::centered(Matrix::from_fn(4, 5, |i, j| u[i] * v[j]));
        let p = pca_oracle(&x, 1).unwrap();
        let un = norm(&u);
        let c = p.components.column(0);
        assert!((dot(&c, &u) / un).abs() > 1.0 - 1e-10);
    }

    #[test]
    fn pca_error_equals_trailing_eigenvalues() {
        let x = planted_spectrum(&[5.0, 3.0, 2.0, 1.0, 0.5, 0.1], 500, 8).unwrap();
        let all = pca_oracle(&x, 6).unwrap();
        for k in 1..6 {
            let err = reconstruction_error(&x, &all.components.leading_columns(k)).unwrap();
            let trailing: f64 = all.eigenvalues[k..].iter().sum();
            assert!((err - trailing).abs() / trailing < 1e-6, "k={k}: {err} vs {trailing}");
        }
    }

    #[test]
    fn pca_rejects_bad_rank() {
        let x = planted_spectrum(&[1.0, 1.0], 10, 0).unwrap();
        assert!(pca_oracle(&x, 0).is_err());
        assert!(pca_oracle(&x, 3).is_err());
    }

    #[test]
    fn principal_angle_cases() {
        let a = Matrix::from_rows(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let ang = principal_angles(&a, &a.scale(3.0)).unwrap();
        assert!(ang.iter().all(|t| t.abs() < 1e-7), "{ang:?}");

        let e1 = Matrix::from_rows(2, 1, vec![1.0, 0.0]).unwrap();
        let e2 = Matrix::from_rows(2, 1, vec![0.0, 1.0]).unwrap();
        let ang = principal_angles(&e1, &e2).unwrap();
        assert!((ang[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);

        // plane {e1, e3} against {cos t e1 + sin t e2, e3}
        let t = std::f64::consts::FRAC_PI_4;
        let a = Matrix::from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let b = Matrix::from_columns(&[vec![t.cos(), t.sin(), 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let ang = principal_angles(&a, &b).unwrap();
        assert!(ang[0].abs() < 1e-7 && (ang[1] - t).abs() < 1e-12, "{ang:?}");

        let dep = Matrix::from_columns(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(matches!(
            principal_angles(&dep, &e1),
            Err(Error::RankDeficient { column: 1 })
        ));
    }

    #[test]
    fn train_linear_zero_data_starts_at_zero() {
        let x = DataMatrix(Matrix::zeros(4, 8));
        let ae = LinearAE::random(4, 1, 1, 3).unwrap();
        let cfg = LinearTrainConfig {
            steps: 5,
            ..Default::default()
        };
        let r = train_linear(
            &x,
            &ae,
            ObjectiveWeights {
                l1: 1.0,
                l2: 1.0,
                l3: 1.0,
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(r.trace[0], 0.0);
    }

    #[test]
    fn train_linear_gradient_is_correct() {
        use crate::autodiff::{finite_difference_check, GradCheckOptions};
        let (x, ae) = random_instance(9, 5, 7, 2, 1);
        let mut p = ParamStore::new();
        p.insert("w1", ae.w1.to_tensor());
        p.insert("w2", ae.w2.to_tensor());
        let xt = x.matrix().to_tensor();
        let w = ObjectiveWeights {
            l1: 0.7,
            l2: 1.1,
            l3: 0.9,
        };
        let r = finite_difference_check(|g, p| eq2_graph(g, p, &xt, w), &mut p, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        let direct = objective_eq2(&x, &ae, w.l1, w.l2, w.l3).unwrap();
        let mut g = Graph::new();
        let root = eq2_graph(&mut g, &p, &xt, w).unwrap();
        assert!((g.value(root).item() - direct).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn bound_always_holds(seed in any::<u64>(), d in 2usize..8, n in 1usize..12, l1 in 0.0f64..3.0, l2 in 0.0f64..3.0) {
                let k1 = 1 + (seed as usize % (d - 1));
                let k2 = 1 + ((seed >> 8) as usize % (d - k1));
                let (x, ae) = random_instance(seed, d, n, k1, k2);
                let b = bound_check(&x, &ae, l1, l2).unwrap();
                prop_assert!(b.holds, "{b:?}");
            }

            #[test]
            fn objectives_ignore_sample_order(seed in any::<u64>()) {
                let (x, ae) = random_instance(seed, 4, 7, 2, 1);
                let order = SeedStream::new(seed).permutation(7);
                let xp = x.permuted(&order);
                let a = objective_eq2(&x, &ae, 1.0, 0.5, 2.0).unwrap();
                let b = objective_eq2(&xp, &ae, 1.0, 0.5, 2.0).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
                let a = objective_eq1(&x, &ae, 1.0, 0.5).unwrap();
                let b = objective_eq1(&xp, &ae, 1.0, 0.5).unwrap();
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
        }
    }
}
