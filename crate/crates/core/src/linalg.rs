//! Small dense square matrices (at most a handful of channels wide).

/// Row-major `n × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "matrix must be square");
        Self {
            n,
            data: rows.concat(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        (0..self.n)
            .map(|i| dot(&self.data[i * self.n..(i + 1) * self.n], v))
            .collect()
    }

    pub fn transpose_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.n);
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.data[i * self.n + j] * v[i];
            }
        }
        out
    }

    /// `vᵀ A v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.mul_vec(v))
    }

    pub fn max_abs_diff(&self, other: &SquareMatrix) -> f64 {
        assert_eq!(self.n, other.n);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frobenius_diff(&self, other: &SquareMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub const POWER_ITERATIONS: usize = 100;
pub const POWER_TOLERANCE: f64 = 1e-10;

/// Spectral norm `‖A‖₂` by power iteration on `AᵀA`.
///
/// Iterates until the Rayleigh quotient moves by less than `tol` (relative)
/// or `max_iter` is reached. For positive semi-definite `AᵀA` the Rayleigh
/// quotient is non-decreasing along the iteration, so the estimate never
/// drops below the value at `start`.
pub fn spectral_norm(a: &SquareMatrix, start: Option<&[f64]>, max_iter: usize, tol: f64) -> f64 {
    let n = a.dim();
    let mut v: Vec<f64> = match start {
        Some(s) if norm(s) > 0.0 => s.to_vec(),
        _ => (0..n).map(|i| 1.0 + 0.1 * i as f64).collect(),
    };
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut rayleigh = 0.0;
    for _ in 0..max_iter {
        let av = a.mul_vec(&v);
        let w = a.transpose_mul_vec(&av);
        let next = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        let converged = (next - rayleigh).abs() <= tol * next.abs().max(f64::MIN_POSITIVE);
        rayleigh = next;
        v = w.into_iter().map(|x| x / nw).collect();
        if converged {
            break;
        }
    }
    // one last Rayleigh quotient on the final iterate
    let av = a.mul_vec(&v);
    rayleigh.max(dot(&av, &av)).sqrt()
}
