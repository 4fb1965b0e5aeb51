//! Dense kernels on row-major `f64` slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Sixteen independent chains keep the FMA units busy.
    let mut acc = [0.0f64; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..16 {
            acc[k] = x[k].mul_add(y[k], acc[k]);
        }
    }
    for (k, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[k] = x.mul_add(*y, acc[k]);
    }
    let mut half = [0.0f64; 8];
    for k in 0..8 {
        half[k] = acc[k] + acc[k + 8];
    }
    ((half[0] + half[4]) + (half[1] + half[5])) + ((half[2] + half[6]) + (half[3] + half[7]))
}

/// `y += W x` for `W` of shape `rows x x.len()`.
pub fn gemv_add(w: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(cols)) {
        *yi += dot(row, x);
    }
}

/// Read-only matrix view with arbitrary strides.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols`.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `C = beta C + A B` with `C` row-major `a.rows x b.cols`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views were built from slices of exactly rows * cols
    // elements and every (i, j) addressed through (rs, cs) lies inside them;
    // `c` has m * n elements and is addressed row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place log-softmax.
pub fn log_softmax(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
    let lse = m + s.ln();
    for v in z.iter_mut() {
        *v -= lse;
    }
}

/// Log-softmax of `z` into `logp` and softmax into `p`, one exp per entry.
pub fn log_softmax_probs(z: &[f64], logp: &mut [f64], p: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (pi, &v) in p.iter_mut().zip(z) {
        *pi = (v - m).exp();
        s += *pi;
    }
    let lse = m + s.ln();
    let inv = 1.0 / s;
    for ((lp, pi), &v) in logp.iter_mut().zip(p.iter_mut()).zip(z) {
        *lp = v - lse;
        *pi *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(n: usize, f: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * f).sin()).collect()
    }

    #[test]
    fn dot_matches_naive_for_all_tails() {
        for n in 0..40 {
            let a = fill(n, 0.37);
            let b = fill(n, 0.91);
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn gemv_matches_naive() {
        let w = fill(3 * 11, 0.37);
        let x = fill(11, 0.91);
        let mut y = vec![1.0; 3];
        gemv_add(&w, &x, &mut y);
        for r in 0..3 {
            let naive: f64 = 1.0 + (0..11).map(|c| w[r * 11 + c] * x[c]).sum::<f64>();
            assert!((y[r] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_all_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a = fill(m * k, 0.13);
        let b = fill(k * n, 0.29);
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let naive: Vec<f64> = (0..m * n)
            .map(|ij| 0.5 + (0..k).map(|p| a[(ij / n) * k + p] * b[p * n + ij % n]).sum::<f64>())
            .collect();
        let ops = [
            (MatRef::new(&a, m, k), MatRef::new(&b, k, n)),
            (MatRef::new(&at, k, m).t(), MatRef::new(&b, k, n)),
            (MatRef::new(&a, m, k), MatRef::new(&bt, n, k).t()),
            (MatRef::new(&at, k, m).t(), MatRef::new(&bt, n, k).t()),
        ];
        for (x, y) in ops {
            let mut c = vec![1.0; m * n];
            gemm(x, y, 0.5, &mut c);
            for (p, q) in c.iter().zip(&naive) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut z = vec![1000.0, 1001.0, 999.0];
        let (mut lp, mut p) = (vec![0.0; 3], vec![0.0; 3]);
        log_softmax_probs(&z, &mut lp, &mut p);
        log_softmax(&mut z);
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        for i in 0..3 {
            assert!((lp[i] - z[i]).abs() < 1e-12);
            assert!((p[i] - z[i].exp()).abs() < 1e-12);
        }
    }
}
