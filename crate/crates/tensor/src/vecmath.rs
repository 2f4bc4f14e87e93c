//! Branch-free `f32` elementwise math that the compiler can vectorize, with
//! AVX2/FMA variants selected at runtime.

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;
/// Adding and subtracting `1.5 * 2^23` rounds to the nearest integer.
const ROUND_MAGIC: f32 = 12_582_912.0;
const GELU_C: f32 = 0.797_884_6;
const GELU_A: f32 = 0.044_715;

/// `e^x` to within a few ulp on `[-87, 88]`; inputs are clamped to that range.
#[inline(always)]
pub(crate) fn exp(x: f32) -> f32 {
    let x = x.max(-87.0).min(88.0);
    let t = x * LOG2E + ROUND_MAGIC;
    let n = t - ROUND_MAGIC;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let y = p * r * r + r + 1.0;
    // The low mantissa bits of `t` hold `n` as an integer.
    let e = t
        .to_bits()
        .wrapping_sub(ROUND_MAGIC.to_bits())
        .wrapping_add(127)
        << 23;
    y * f32::from_bits(e)
}

#[inline(always)]
fn tanh(x: f32) -> f32 {
    1.0 - 2.0 / (exp(2.0 * x) + 1.0)
}

#[inline(always)]
fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline(always)]
fn gelu_grad(x: f32) -> f32 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline(always)]
fn exp_slice_body(xs: &mut [f32]) {
    for x in xs {
        *x = exp(*x);
    }
}

#[inline(always)]
fn gelu_body(xs: &[f32], out: &mut [f32]) {
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = gelu(x);
    }
}

#[inline(always)]
fn gelu_grad_body(xs: &[f32], g: &[f32], dx: &mut [f32]) {
    for ((d, &x), &gv) in dx.iter_mut().zip(xs).zip(g) {
        *d += gv * gelu_grad(x);
    }
}

/// False if any value is NaN or infinite. Uses independent lanes so the
/// reduction vectorizes.
#[inline(always)]
fn all_finite_body(xs: &[f32]) -> bool {
    let mut acc = [0.0f32; 16];
    let chunks = xs.chunks_exact(16);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..16 {
            acc[i] += c[i] * 0.0;
        }
    }
    rest.iter().all(|v| v.is_finite()) && acc.iter().all(|v| *v == 0.0)
}

macro_rules! dispatch {
    ($name:ident, $body:ident, ($($arg:ident: $ty:ty),*) $(-> $ret:ty)?) => {
        pub(crate) fn $name($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide($($arg: $ty),*) $(-> $ret)? {
                    $body($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were detected above.
                    return unsafe { wide($($arg),*) };
                }
            }
            $body($($arg),*)
        }
    };
}

dispatch!(exp_slice, exp_slice_body, (xs: &mut [f32]));
dispatch!(gelu_slice, gelu_body, (xs: &[f32], out: &mut [f32]));
dispatch!(gelu_grad_slice, gelu_grad_body, (xs: &[f32], g: &[f32], dx: &mut [f32]));
dispatch!(all_finite, all_finite_body, (xs: &[f32]) -> bool);
