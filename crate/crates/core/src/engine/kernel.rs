//! Dense matrix product used by `matmul` and by the matmul gradients.
//!
//! Each output element is accumulated over the inner index in increasing
//! order starting from zero, whichever path runs, so results do not depend on
//! the CPU features detected at runtime or on whether an operand is read
//! transposed.

/// Row-major matrix data, optionally read as its transpose.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Operand<'a> {
    /// `data` holds a matrix with `cols` columns; `transposed` reads it as
    /// its transpose.
    pub fn new(data: &'a [f64], cols: usize, transposed: bool) -> Self {
        if transposed {
            Self {
                data,
                row_stride: 1,
                col_stride: cols,
            }
        } else {
            Self {
                data,
                row_stride: cols,
                col_stride: 1,
            }
        }
    }

    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_stride + j * self.col_stride]
    }
}

/// `out[m,n] += a[m,k] . b[k,n]`. `out` must start zeroed.
pub(crate) fn gemm(a: Operand, b: Operand, out: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected just above.
            unsafe { gemm_avx512(a, b, out, m, k, n) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            unsafe { gemm_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    blocked::<Portable>(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512(a: Operand, b: Operand, out: &mut [f64], m: usize, k: usize, n: usize) {
    blocked::<x86::Avx512>(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: Operand, b: Operand, out: &mut [f64], m: usize, k: usize, n: usize) {
    blocked::<x86::Avx2>(a, b, out, m, k, n);
}

/// Computes one `ROWS x COLS` output block from packed panels: `ap` holds
/// `[p][ROWS]` and `bp` holds `[p][COLS]`. The block is added onto `out`
/// at `(i0, j0)`, whose rows are `n` long.
trait Tile {
    const ROWS: usize;
    const COLS: usize;
    fn tile(ap: &[f64], bp: &[f64], out: &mut [f64], i0: usize, j0: usize, n: usize);
}

struct Portable;

impl Tile for Portable {
    const ROWS: usize = 4;
    const COLS: usize = 8;

    #[inline(always)]
    fn tile(ap: &[f64], bp: &[f64], out: &mut [f64], i0: usize, j0: usize, n: usize) {
        let mut acc = [[0.0f64; 8]; 4];
        for (arow, brow) in ap.chunks_exact(4).zip(bp.chunks_exact(8)) {
            for (acc_row, &av) in acc.iter_mut().zip(arow) {
                for (x, &bv) in acc_row.iter_mut().zip(brow) {
                    *x += av * bv;
                }
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + 8];
            for (x, v) in o.iter_mut().zip(acc_row) {
                *x += v;
            }
        }
    }
}

/// Register-blocked tiles written with intrinsics. The compiler left to
/// itself vectorizes the portable tile across rows and keeps the
/// accumulators in memory. Products and sums stay separate instructions so
/// rounding matches the scalar loop.
#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    use super::Tile;

    fn check_bounds(rows: usize, cols: usize, ap: &[f64], bp: &[f64], out: &[f64], i0: usize, j0: usize, n: usize) {
        assert!(ap.len() % rows == 0 && bp.len() == ap.len() / rows * cols);
        assert!(j0 + cols <= n && (i0 + rows) * n <= out.len());
    }

    pub(super) struct Avx512;

    impl Tile for Avx512 {
        const ROWS: usize = 8;
        const COLS: usize = 16;

        #[inline(always)]
        fn tile(ap: &[f64], bp: &[f64], out: &mut [f64], i0: usize, j0: usize, n: usize) {
            check_bounds(8, 16, ap, bp, out, i0, j0, n);
            // SAFETY: only reached through `gemm_avx512`, after avx512f was
            // detected; every pointer offset is covered by `check_bounds`.
            unsafe { tile_8x16(ap, bp, out, i0, j0, n) }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn tile_8x16(ap: &[f64], bp: &[f64], out: &mut [f64], i0: usize, j0: usize, n: usize) {
        let mut acc = [[_mm512_setzero_pd(); 2]; 8];
        for (arow, brow) in ap.chunks_exact(8).zip(bp.chunks_exact(16)) {
            let b0 = _mm512_loadu_pd(brow.as_ptr());
            let b1 = _mm512_loadu_pd(brow.as_ptr().wrapping_add(8));
            for (acc_row, &a) in acc.iter_mut().zip(arow) {
                let av = _mm512_set1_pd(a);
                acc_row[0] = _mm512_add_pd(acc_row[0], _mm512_mul_pd(av, b0));
                acc_row[1] = _mm512_add_pd(acc_row[1], _mm512_mul_pd(av, b1));
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            let o = out.as_mut_ptr().wrapping_add((i0 + r) * n + j0);
            let o1 = o.wrapping_add(8);
            _mm512_storeu_pd(o, _mm512_add_pd(_mm512_loadu_pd(o), acc_row[0]));
            _mm512_storeu_pd(o1, _mm512_add_pd(_mm512_loadu_pd(o1), acc_row[1]));
        }
    }

    pub(super) struct Avx2;

    impl Tile for Avx2 {
        const ROWS: usize = 4;
        const COLS: usize = 8;

        #[inline(always)]
        fn tile(ap: &[f64], bp: &[f64], out: &mut [f64], i0: usize, j0: usize, n: usize) {
            check_bounds(4, 8, ap, bp, out, i0, j0, n);
            // SAFETY: only reached through `gemm_avx2`, after avx2 was
            // detected; every pointer offset is covered by `check_bounds`.
            unsafe { tile_4x8(ap, bp, out, i0, j0, n) }
        }
    }

    #[target_feature(enable = "avx2")]
    unsafe fn tile_4x8(ap: &[f64], bp: &[f64], out: &mut [f64], i0: usize, j0: usize, n: usize) {
        let mut acc = [[_mm256_setzero_pd(); 2]; 4];
        for (arow, brow) in ap.chunks_exact(4).zip(bp.chunks_exact(8)) {
            let b0 = _mm256_loadu_pd(brow.as_ptr());
            let b1 = _mm256_loadu_pd(brow.as_ptr().wrapping_add(4));
            for (acc_row, &a) in acc.iter_mut().zip(arow) {
                let av = _mm256_set1_pd(a);
                acc_row[0] = _mm256_add_pd(acc_row[0], _mm256_mul_pd(av, b0));
                acc_row[1] = _mm256_add_pd(acc_row[1], _mm256_mul_pd(av, b1));
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            let o = out.as_mut_ptr().wrapping_add((i0 + r) * n + j0);
            let o1 = o.wrapping_add(4);
            _mm256_storeu_pd(o, _mm256_add_pd(_mm256_loadu_pd(o), acc_row[0]));
            _mm256_storeu_pd(o1, _mm256_add_pd(_mm256_loadu_pd(o1), acc_row[1]));
        }
    }
}

#[inline(always)]
fn blocked<T: Tile>(a: Operand, b: Operand, out: &mut [f64], m: usize, k: usize, n: usize) {
    let (rows, cols) = (T::ROWS, T::COLS);
    let full_rows = m - m % rows;
    let full_cols = n - n % cols;
    if full_rows > 0 && full_cols > 0 {
        // a as [row block][p][rows], b one [p][cols] panel at a time
        let mut apack = vec![0.0; full_rows * k];
        for (blk, dst) in apack.chunks_exact_mut(rows * k).enumerate() {
            for (p, d) in dst.chunks_exact_mut(rows).enumerate() {
                for (r, v) in d.iter_mut().enumerate() {
                    *v = a.at(blk * rows + r, p);
                }
            }
        }
        let mut bpack = vec![0.0; k * cols];
        for j0 in (0..full_cols).step_by(cols) {
            pack_panel(b, &mut bpack, j0, cols);
            for (blk, ap) in apack.chunks_exact(rows * k).enumerate() {
                T::tile(ap, &bpack, out, blk * rows, j0, n);
            }
        }
    }
    for i in 0..full_rows {
        edge_row(a, b, out, i, full_cols, n, k);
    }
    for i in full_rows..m {
        edge_row(a, b, out, i, 0, n, k);
    }
}

/// Copies columns `j0..j0+cols` of `b` into `dst` laid out as `[p][cols]`.
fn pack_panel(b: Operand, dst: &mut [f64], j0: usize, cols: usize) {
    if b.col_stride == 1 {
        for (p, d) in dst.chunks_exact_mut(cols).enumerate() {
            let start = p * b.row_stride + j0;
            d.copy_from_slice(&b.data[start..start + cols]);
        }
    } else {
        // column j of a transposed operand is a contiguous stored row
        for c in 0..cols {
            let start = (j0 + c) * b.col_stride;
            let src = &b.data[start..start + dst.len() / cols];
            for (d, &v) in dst.chunks_exact_mut(cols).zip(src) {
                d[c] = v;
            }
        }
    }
}

/// Columns `j_from..n` of output row `i`.
#[inline(always)]
fn edge_row(a: Operand, b: Operand, out: &mut [f64], i: usize, j_from: usize, n: usize, k: usize) {
    if j_from == n {
        return;
    }
    let orow = &mut out[i * n + j_from..(i + 1) * n];
    for p in 0..k {
        let av = a.at(i, p);
        if b.col_stride == 1 {
            let start = p * b.row_stride + j_from;
            for (o, &bv) in orow.iter_mut().zip(&b.data[start..start + n - j_from]) {
                *o += av * bv;
            }
        } else {
            for (j, o) in orow.iter_mut().enumerate() {
                *o += av * b.at(p, j_from + j);
            }
        }
    }
}
