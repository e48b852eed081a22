//! Dense 64-bit kernels shared by the model and the importance criteria.
//!
//! Every reduction runs left to right in index order so that repeated calls on
//! the same input are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this norm a vector carries no direction; cosine against it is 0.
pub const COSINE_EPS: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 80;
const MAX_SVD_DIM: usize = 1024;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in &mut self.data {
            *x *= alpha;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.data)
    }

    /// Remove column `c`, shifting later columns left.
    pub fn remove_column(&mut self, c: usize) {
        let cols = self.cols;
        let mut data = Vec::with_capacity(self.rows * (cols - 1));
        for r in 0..self.rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            data.extend_from_slice(&row[..c]);
            data.extend_from_slice(&row[c + 1..]);
        }
        self.data = data;
        self.cols -= 1;
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        let m = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * m..(i + 1) * m];
            accumulate_rows(out_row, a_row, |kk| &other.data[kk * m..(kk + 1) * m]);
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        self.matmul(&other.transpose())
    }

    /// `acc += aᵀ · b`
    pub fn add_t_matmul(&mut self, a: &Matrix, b: &Matrix) {
        assert_eq!(a.rows, b.rows, "t_matmul shared dimension");
        assert_eq!((self.rows, self.cols), (a.cols, b.cols), "t_matmul output shape");
        let m = b.cols;
        let at = a.transpose();
        for kk in 0..a.cols {
            let out_row = &mut self.data[kk * m..(kk + 1) * m];
            accumulate_rows(out_row, at.row(kk), |i| b.row(i));
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out += Σ_k coef[k] · row(k)`, summed in increasing `k` for every element.
#[inline]
fn accumulate_rows<'a>(out: &mut [f64], coef: &[f64], row: impl Fn(usize) -> &'a [f64]) {
    let n = out.len();
    let blocks = coef.len() / 4;
    for b in 0..blocks {
        let k = b * 4;
        let (c0, c1, c2, c3) = (coef[k], coef[k + 1], coef[k + 2], coef[k + 3]);
        let (r0, r1, r2, r3) = (&row(k)[..n], &row(k + 1)[..n], &row(k + 2)[..n], &row(k + 3)[..n]);
        for j in 0..n {
            out[j] = out[j] + c0 * r0[j] + c1 * r1[j] + c2 * r2[j] + c3 * r3[j];
        }
    }
    for k in blocks * 4..coef.len() {
        let c = coef[k];
        let r = &row(k)[..n];
        for j in 0..n {
            out[j] += c * r[j];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four lanes, combined in a fixed order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub fn l2_norm(v: &[f64]) -> Result<f64> {
    check_finite(v)?;
    Ok(v.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Cosine similarity; 0 when either vector has norm below [`COSINE_EPS`].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!("cosine of {} vs {} dims", u.len(), v.len())));
    }
    let nu = l2_norm(u)?;
    let nv = l2_norm(v)?;
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Singular values in descending order, by one-sided Jacobi rotations on the
/// columns of the narrower orientation.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let small = m.rows.min(m.cols);
    if small == 0 {
        return Err(Error::Empty("matrix with a zero dimension"));
    }
    if m.rows.max(m.cols) > MAX_SVD_DIM {
        return Err(Error::Dimension(format!(
            "{}x{} exceeds the {MAX_SVD_DIM}x{MAX_SVD_DIM} limit",
            m.rows, m.cols
        )));
    }
    m.check_finite()?;

    // Columns of the tall orientation: `small` columns of length `long`.
    let mut cols: Vec<Vec<f64>> = if m.rows >= m.cols {
        (0..m.cols).map(|c| m.column(c)).collect()
    } else {
        (0..m.rows).map(|r| m.row(r).to_vec()).collect()
    };

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..small {
            for q in p + 1..small {
                let (left, right) = cols.split_at_mut(q);
                let cp = &mut left[p];
                let cq = &mut right[0];
                let alpha = dot(cp, cp);
                let beta = dot(cq, cq);
                let gamma = dot(cp, cq);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let xp = *x;
                    let yq = *y;
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: format!("{}x{} matrix", m.rows, m.cols),
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    let mut sv: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// ‖M‖²_F / σ₁².
pub fn stable_rank(m: &Matrix) -> Result<f64> {
    m.check_finite()?;
    let fro = m.frobenius_sq();
    if fro == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let sv = singular_values(m)?;
    let top = sv[0] * sv[0];
    // Clamp into the admissible range.
    let upper = m.rows.min(m.cols) as f64;
    Ok((fro / top).clamp(1.0, upper))
}

/// Per-dimension mean and population standard deviation.
pub fn per_dim_stats<V: AsRef<[f64]>>(samples: &[V]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = samples.first().ok_or(Error::Empty("per-dimension statistics need a sample"))?;
    let mut acc = DimAccumulator::new(first.as_ref().len());
    for s in samples {
        acc.push(s.as_ref())?;
    }
    Ok((acc.mean().to_vec(), acc.std()))
}

/// Values strictly outside `[μ − cσ, μ + cσ]` with population σ.
pub fn outlier_count(values: &[f64], c: f64) -> Result<usize> {
    if values.len() < 2 {
        return Err(Error::Empty("outlier count needs at least two values"));
    }
    check_finite(values)?;
    let mut acc = ScalarAccumulator::default();
    for &v in values {
        acc.push(v);
    }
    Ok(count_outside(values, acc.mean(), acc.std(), c))
}

pub(crate) fn count_outside(values: &[f64], mean: f64, std: f64, c: f64) -> usize {
    if std == 0.0 {
        return 0;
    }
    let lo = mean - c * std;
    let hi = mean + c * std;
    values.iter().filter(|&&v| v < lo || v > hi).count()
}

/// Streaming Welford mean/variance for a single series.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
}

impl ScalarAccumulator {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

/// Streaming per-dimension Welford moments plus raw sums of squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimAccumulator {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl DimAccumulator {
    pub fn new(dim: usize) -> Self {
        DimAccumulator { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim], sum_sq: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!("sample of {} dims, expected {}", x.len(), self.dim())));
        }
        check_finite(x)?;
        self.count += 1;
        let n = self.count as f64;
        for j in 0..x.len() {
            let delta = x[j] - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (x[j] - self.mean[j]);
            self.sum_sq[j] += x[j] * x[j];
        }
        Ok(())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.dim()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|m| (m / n).max(0.0).sqrt()).collect()
    }

    /// ‖x_j‖₂ over the series of each dimension.
    pub fn dim_norms(&self) -> Vec<f64> {
        self.sum_sq.iter().map(|s| s.sqrt()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l2_norm(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]).unwrap(), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut naive = 0.0;
        for x in &v {
            naive += x * x;
        }
        let naive = naive.sqrt();
        assert!((l2_norm(&v).unwrap() - naive).abs() <= 1e-12 * naive);
    }

    #[test]
    fn non_finite_input_names_index() {
        match l2_norm(&[1.0, f64::NAN, 2.0]) {
            Err(Error::NonFinite { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn singular_value_examples() {
        assert_eq!(singular_values(&Matrix::identity(4)).unwrap(), vec![1.0; 4]);
        let sv = singular_values(&Matrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(sv, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn singular_values_preserve_frobenius() {
        for (r, c, seed) in [(8, 6, 1), (6, 8, 2), (32, 64, 3), (1, 5, 4)] {
            let m = random_matrix(r, c, seed);
            let sv = singular_values(&m).unwrap();
            let sum: f64 = sv.iter().map(|s| s * s).sum();
            let fro = m.frobenius_sq();
            assert!((sum - fro).abs() <= 1e-8 * fro);
            assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn singular_values_match_gram_eigen_oracle() {
        let m = random_matrix(8, 6, 11);
        let gram = nalgebra::DMatrix::<f64>::from_fn(6, 6, |i, j| (0..8).map(|r| m.get(r, i) * m.get(r, j)).sum());
        let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(gram).eigenvalues.iter().map(|e: &f64| e.max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let sv = singular_values(&m).unwrap();
        for (a, b) in sv.iter().zip(&eig) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn stable_rank_examples() {
        assert!((stable_rank(&Matrix::identity(8)).unwrap() - 8.0).abs() < 1e-9);
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0, 2.0, -1.0];
        let outer = Matrix::from_vec(3, 4, u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect()).unwrap();
        assert!((stable_rank(&outer).unwrap() - 1.0).abs() < 1e-9);
        assert!((stable_rank(&Matrix::diag(&[2.0, 1.0, 1.0])).unwrap() - 1.5).abs() < 1e-10);
        assert!(matches!(stable_rank(&Matrix::zeros(3, 3)), Err(Error::ZeroMatrix)));
    }

    #[test]
    fn per_dim_stats_examples() {
        let (_, std) = per_dim_stats(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(std, vec![0.0; 3]);
        let (mean, std) = per_dim_stats(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!((mean[0], std[0]), (1.0, 1.0));
        assert!(per_dim_stats::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn per_dim_stats_match_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Vec<f64>> = (0..100).map(|_| (0..8).map(|_| rng.random_range(-2.0..5.0)).collect()).collect();
        let (mean, std) = per_dim_stats(&samples).unwrap();
        for j in 0..8 {
            let mu: f64 = samples.iter().map(|s| s[j]).sum::<f64>() / 100.0;
            let var: f64 = samples.iter().map(|s| (s[j] - mu).powi(2)).sum::<f64>() / 100.0;
            assert!((mean[j] - mu).abs() < 1e-12);
            assert!((std[j] - var.sqrt()).abs() < 1e-12);
        }
        let again = per_dim_stats(&samples).unwrap();
        assert_eq!(again.1, std);
    }

    #[test]
    fn outlier_examples() {
        assert_eq!(outlier_count(&[1.0; 4], 3.0).unwrap(), 0);
        let mut v = vec![0.0; 9];
        v.push(100.0);
        assert_eq!(outlier_count(&v, 1.0).unwrap(), 1);
        assert!(outlier_count(&[1.0], 3.0).is_err());

        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(outlier_count(&draws, 3.0).unwrap() <= 15);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = random_matrix(5, 7, 1);
        let b = random_matrix(7, 3, 2);
        let ab = a.matmul(&b);
        let abt = a.matmul_t(&b.transpose());
        let mut atb = Matrix::zeros(5, 3);
        atb.add_t_matmul(&a.transpose(), &b);
        for i in 0..ab.data.len() {
            assert!((ab.data[i] - abt.data[i]).abs() < 1e-12);
            assert!((ab.data[i] - atb.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn remove_column_shifts() {
        let mut m = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        m.remove_column(1);
        assert_eq!(m.data, vec![1.0, 3.0, 4.0, 6.0]);
        assert_eq!(m.cols, 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy() -> impl Strategy<Value = Matrix> {
            (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-10.0f64..10.0, r * c)
                    .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn cosine_self_and_symmetry(u in proptest::collection::vec(-5.0f64..5.0, 1..20),
                                        v in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
                if l2_norm(&u).unwrap() >= COSINE_EPS {
                    prop_assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
                }
                let n = u.len().min(v.len());
                prop_assert_eq!(cosine(&u[..n], &v[..n]).unwrap(), cosine(&v[..n], &u[..n]).unwrap());
            }

            #[test]
            fn stable_rank_scale_invariant(m in matrix_strategy(), alpha in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
                prop_assume!(m.frobenius_sq() > 1e-6);
                let mut scaled = m.clone();
                scaled.scale(alpha);
                let a = stable_rank(&m).unwrap();
                let b = stable_rank(&scaled).unwrap();
                prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0), "{} vs {}", a, b);
            }

            #[test]
            fn singular_values_row_permutation(m in matrix_strategy(), shift in 0usize..7) {
                let k = shift % m.rows;
                let mut permuted = Matrix::zeros(m.rows, m.cols);
                for r in 0..m.rows {
                    permuted.row_mut((r + k) % m.rows).copy_from_slice(m.row(r));
                }
                let a = singular_values(&m).unwrap();
                let b = singular_values(&permuted).unwrap();
                let scale = a[0].max(1.0);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-8 * scale);
                }
            }
        }
    }
}
