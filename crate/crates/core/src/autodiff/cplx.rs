use num_complex::Complex64;

pub(crate) fn unpack(s: &[f64]) -> Vec<Complex64> {
    s.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

pub(crate) fn pack_into(v: &[Complex64], out: &mut [f64]) {
    for (z, p) in v.iter().zip(out.chunks_exact_mut(2)) {
        p[0] = z.re;
        p[1] = z.im;
    }
}

/// Row-major complex matrix view with an optional conjugate transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [Complex64],
    pub rows: usize,
    pub cols: usize,
    pub adjoint: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [Complex64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            adjoint: false,
        }
    }

    pub fn adj(self) -> Self {
        Mat {
            adjoint: !self.adjoint,
            ..self
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        if self.adjoint {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        if self.adjoint {
            self.data[j * self.cols + i].conj()
        } else {
            self.data[i * self.cols + j]
        }
    }
}

pub(crate) fn matmul(a: Mat<'_>, b: Mat<'_>) -> Vec<Complex64> {
    let (m, n) = a.shape();
    let (n2, p) = b.shape();
    debug_assert_eq!(n, n2);
    let mut out = vec![Complex64::new(0.0, 0.0); m * p];
    for i in 0..m {
        for l in 0..n {
            let ail = a.at(i, l);
            for j in 0..p {
                out[i * p + j] += ail * b.at(l, j);
            }
        }
    }
    out
}
