use rayon::prelude::*;

/// Below this many multiply-adds the row loop stays on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 16;

/// `C[m×n] = A[m×k] · B[k×n]`, row-major.
///
/// Each output row is accumulated in a fixed order by exactly one thread, so
/// results are bit-identical whether or not the row loop runs in parallel.
pub(crate) fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    let row = |(i, out): (usize, &mut [f64])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PARALLEL_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let (m, k, n) = (64, 48, 40);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 97) as f64).cos()).collect();
        let par = matmul_raw(&a, m, k, &b, n);
        let mut serial = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                if a[i * k + p] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    serial[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        assert_eq!(par, serial);
    }
}
