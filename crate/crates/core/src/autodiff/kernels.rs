//! Dense row-major kernels used by the tape: a register-blocked `out += a·b`
//! that every product and its adjoints reduce to, and an element-wise tanh.
//! The same source is compiled for AVX2 and AVX-512 targets and the widest one
//! the CPU supports is picked at runtime.

trait Madd {
    fn madd(a: f64, b: f64, c: f64) -> f64;
}

struct Plain;
struct Fused;

impl Madd for Plain {
    #[inline(always)]
    fn madd(a: f64, b: f64, c: f64) -> f64 {
        a * b + c
    }
}

impl Madd for Fused {
    #[inline(always)]
    fn madd(a: f64, b: f64, c: f64) -> f64 {
        a.mul_add(b, c)
    }
}

#[inline(always)]
fn axpy<M: Madd>(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = M::madd(alpha, xi, *yi);
    }
}

#[inline(always)]
fn dot<M: Madd>(x: &[f64], y: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] = M::madd(a[l], b[l], acc[l]);
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for (a, b) in xr.iter().zip(yr) {
        s = M::madd(*a, *b, s);
    }
    s
}

/// `out += a · b` with `a: n×k`, `b: k×m`. Output rows are processed `ROWS`
/// at a time in 16-column blocks held in local accumulators.
#[inline(always)]
fn gemm_acc_impl<M: Madd>(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm_acc_rows::<M, 2>(a, b, out, n, k, m)
}

#[inline(always)]
fn gemm_acc_rows<M: Madd, const ROWS: usize>(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    const W: usize = 16;
    if m == 1 {
        for i in 0..n {
            out[i] += dot::<M>(&a[i * k..(i + 1) * k], &b[..k]);
        }
        return;
    }
    let mut j0 = 0;
    while j0 + W <= m {
        let mut i = 0;
        while i + ROWS <= n {
            block::<M, ROWS, W>(a, b, out, i, j0, k, m);
            i += ROWS;
        }
        while i < n {
            block::<M, 1, W>(a, b, out, i, j0, k, m);
            i += 1;
        }
        j0 += W;
    }
    if j0 < m {
        for i in 0..n {
            let row = &mut out[i * m + j0..(i + 1) * m];
            for kk in 0..k {
                axpy::<M>(a[i * k + kk], &b[kk * m + j0..(kk + 1) * m], row);
            }
        }
    }
}

/// `R×W` block of `out` starting at row `i`, column `j0`.
#[inline(always)]
fn block<M: Madd, const R: usize, const W: usize>(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    i: usize,
    j0: usize,
    k: usize,
    m: usize,
) {
    let mut acc = [[0.0; W]; R];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[(i + r) * m + j0..(i + r) * m + j0 + W]);
    }
    for kk in 0..k {
        let brow: &[f64; W] = b[kk * m + j0..kk * m + j0 + W].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let x = a[(i + r) * k + kk];
            for l in 0..W {
                row[l] = M::madd(x, brow[l], row[l]);
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[(i + r) * m + j0..(i + r) * m + j0 + W].copy_from_slice(row);
    }
}

/// `out += aᵀ · g` with `a: n×k`, `g: n×m`, `out: k×m`, without forming `aᵀ`.
#[inline(always)]
fn gemm_tn_acc_impl<M: Madd>(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    const W: usize = 16;
    let mut j0 = 0;
    while j0 + W <= m {
        let mut kk = 0;
        while kk + 2 <= k {
            let mut acc0 = [0.0; W];
            let mut acc1 = [0.0; W];
            acc0.copy_from_slice(&out[kk * m + j0..kk * m + j0 + W]);
            acc1.copy_from_slice(&out[(kk + 1) * m + j0..(kk + 1) * m + j0 + W]);
            for i in 0..n {
                let grow: &[f64; W] = g[i * m + j0..i * m + j0 + W].try_into().unwrap();
                let (x0, x1) = (a[i * k + kk], a[i * k + kk + 1]);
                for l in 0..W {
                    acc0[l] = M::madd(x0, grow[l], acc0[l]);
                    acc1[l] = M::madd(x1, grow[l], acc1[l]);
                }
            }
            out[kk * m + j0..kk * m + j0 + W].copy_from_slice(&acc0);
            out[(kk + 1) * m + j0..(kk + 1) * m + j0 + W].copy_from_slice(&acc1);
            kk += 2;
        }
        if kk < k {
            let mut acc = [0.0; W];
            acc.copy_from_slice(&out[kk * m + j0..kk * m + j0 + W]);
            for i in 0..n {
                let grow: &[f64; W] = g[i * m + j0..i * m + j0 + W].try_into().unwrap();
                let x = a[i * k + kk];
                for l in 0..W {
                    acc[l] = M::madd(x, grow[l], acc[l]);
                }
            }
            out[kk * m + j0..kk * m + j0 + W].copy_from_slice(&acc);
        }
        j0 += W;
    }
    if j0 < m {
        for i in 0..n {
            let grow = &g[i * m + j0..(i + 1) * m];
            for kk in 0..k {
                axpy::<M>(a[i * k + kk], grow, &mut out[kk * m + j0..(kk + 1) * m]);
            }
        }
    }
}

/// Element-wise `tanh` built on a polynomial `exp` that vectorises.
#[inline(always)]
fn tanh_impl<M: Madd>(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        // tanh|v| = (1 − e)/(1 + e) with e = exp(−2|v|) ∈ (0, 1].
        let e = exp_nonpositive::<M>(-2.0 * v.abs());
        let t = (1.0 - e) / (1.0 + e);
        *o = t.copysign(v);
    }
}

/// `exp(x)` for `x ≤ 0`, flushing to zero below −708.
#[inline(always)]
fn exp_nonpositive<M: Madd>(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5·2^52: adding it rounds to an integer held in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let xc = x.max(-708.0);
    let kf = M::madd(xc, LOG2E, SHIFT);
    let bits = kf.to_bits();
    let n = kf - SHIFT;
    let r = M::madd(-n, LN2_LO, M::madd(-n, LN2_HI, xc));
    // Taylor series to degree 13; |r| ≤ ln2/2 keeps the truncation below 1e-17.
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = M::madd(p, r, c);
    }
    let scale = f64::from_bits(
        bits.wrapping_sub(SHIFT.to_bits())
            .wrapping_add(1023)
            .wrapping_shl(52),
    );
    let v = p * scale;
    if x < -708.0 {
        0.0
    } else {
        v
    }
}

macro_rules! dispatch {
    ($name:ident, $imp:ident, ($($arg:ident: $ty:ty),*)) => {
        pub(crate) fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,avx2,fma")]
                unsafe fn avx512($($arg: $ty),*) {
                    $imp::<Fused>($($arg),*)
                }
                #[target_feature(enable = "avx2,fma")]
                unsafe fn avx2($($arg: $ty),*) {
                    $imp::<Fused>($($arg),*)
                }
                match level() {
                    Level::Avx512 => return unsafe { avx512($($arg),*) },
                    Level::Avx2 => return unsafe { avx2($($arg),*) },
                    Level::Baseline => {}
                }
            }
            $imp::<Plain>($($arg),*)
        }
    };
}

dispatch!(gemm_acc, gemm_acc_impl, (a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize));
dispatch!(gemm_tn_acc, gemm_tn_acc_impl, (a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize));
dispatch!(tanh, tanh_impl, (x: &[f64], out: &mut [f64]));

/// `out = a · b` with `a: n×k`, `b: k×m`; `out` must be zeroed.
pub(crate) fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm_acc(a, b, out, n, k, m);
}

/// `ga += g · bᵀ` with `g: n×m`, `b: k×m`; `bt` is `b` transposed (`m×k`).
pub(crate) fn grad_lhs(g: &[f64], bt: &[f64], ga: &mut [f64], n: usize, k: usize, m: usize) {
    gemm_acc(g, bt, ga, n, m, k);
}

/// `gb += aᵀ · g` with `a: n×k`, `g: n×m`.
pub(crate) fn grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], n: usize, k: usize, m: usize) {
    if m == 1 {
        // gbᵀ (1×k) += gᵀ (1×n) · a (n×k)
        gemm_acc(g, a, gb, 1, n, k);
    } else {
        gemm_tn_acc(a, g, gb, n, k, m);
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
#[allow(dead_code)]
enum Level {
    Avx512,
    Avx2,
    Baseline,
}

#[cfg(target_arch = "x86_64")]
fn level() -> Level {
    use std::sync::OnceLock;
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("fma") {
            Level::Avx512
        } else if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            Level::Avx2
        } else {
            Level::Baseline
        }
    })
}

pub(crate) fn transpose(b: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; b.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = b[r * cols + c];
        }
    }
    t
}
