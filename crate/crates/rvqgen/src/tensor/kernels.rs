//! Shared math kernels. The tape ops and the cached inference path both call
//! these, so forward math has exactly one implementation.

use super::Scalar;

/// `c <- op(a) * op(b) + beta * c` for row-major matrices.
///
/// `op` is transposition: with `ta` set, `a` is stored as `[k, m]` and read as
/// its transpose; same for `tb` with `b` stored `[n, k]`.
pub fn gemm<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    ta: bool,
    b: &[E],
    tb: bool,
    beta: f64,
    c: &mut [E],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    E::gemm_strided(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Row-wise softmax of `x / temp` with optional attention masking.
///
/// `row_limit[r]` restricts row `r` to columns `< row_limit[r]` (causal
/// prefix); `key_visible[c]` hides column `c` from every row. Masked entries
/// come out exactly zero. A row with no admissible column comes out all zero.
/// Accumulation runs in f64 regardless of `E`.
pub fn softmax_rows_masked<E: Scalar>(
    x: &[E],
    rows: usize,
    cols: usize,
    temp: f64,
    row_limit: Option<&[usize]>,
    key_visible: Option<&[bool]>,
    out: &mut [E],
) {
    debug_assert!(temp > 0.0);
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let limit = row_limit.map_or(cols, |l| l[r].min(cols));
        let row = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for c in 0..limit {
            if key_visible.is_none_or(|v| v[c]) {
                max = max.max(row[c].to_f64());
            }
        }
        if max == f64::NEG_INFINITY {
            orow.fill(E::ZERO);
            continue;
        }
        let mut sum = 0.0f64;
        for c in 0..cols {
            let admissible = c < limit && key_visible.is_none_or(|v| v[c]);
            if admissible {
                let e = ((row[c].to_f64() - max) / temp).exp();
                sum += e;
                orow[c] = E::from_f64(e);
            } else {
                orow[c] = E::ZERO;
            }
        }
        let inv = 1.0 / sum;
        for p in orow.iter_mut() {
            *p = E::from_f64(p.to_f64() * inv);
        }
    }
}

/// Root-mean-square normalization per row with a learned per-column gain:
/// `out[r, c] = x[r, c] / sqrt(mean_c x[r, c]^2 + eps) * gain[c]`.
pub fn rms_norm_rows<E: Scalar>(
    x: &[E],
    rows: usize,
    cols: usize,
    gain: &[E],
    eps: f64,
    out: &mut [E],
) {
    debug_assert_eq!(gain.len(), cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut ms = 0.0f64;
        for v in row {
            let f = v.to_f64();
            ms += f * f;
        }
        let inv = 1.0 / (ms / cols as f64 + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = E::from_f64(row[c].to_f64() * inv * gain[c].to_f64());
        }
    }
}

/// Rotary position encoding over adjacent channel pairs `(2i, 2i+1)`:
/// pair `i` of row `r` rotates by `positions[r] * base^(-2i / cols)`.
/// With `invert` set the rotation is undone (used by the backward pass).
pub fn rope_rows<E: Scalar>(
    x: &[E],
    rows: usize,
    cols: usize,
    positions: &[usize],
    base: f64,
    invert: bool,
    out: &mut [E],
) {
    debug_assert_eq!(cols % 2, 0, "rotary encoding needs an even channel count");
    debug_assert_eq!(positions.len(), rows);
    let half = cols / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / cols as f64))
        .collect();
    let sign = if invert { -1.0 } else { 1.0 };
    for r in 0..rows {
        let pos = positions[r] as f64;
        for i in 0..half {
            let angle = sign * pos * freqs[i];
            let (sin, cos) = angle.sin_cos();
            let a = x[r * cols + 2 * i].to_f64();
            let b = x[r * cols + 2 * i + 1].to_f64();
            out[r * cols + 2 * i] = E::from_f64(a * cos - b * sin);
            out[r * cols + 2 * i + 1] = E::from_f64(a * sin + b * cos);
        }
    }
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu_slice<E: Scalar>(x: &[E], out: &mut [E]) {
    for (o, v) in out.iter_mut().zip(x) {
        let f = v.to_f64();
        let sig = 1.0 / (1.0 + (-f).exp());
        *o = E::from_f64(f * sig);
    }
}
