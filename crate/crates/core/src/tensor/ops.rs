use std::fmt;

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// `x` for `x >= 0`, `slope * x` otherwise.
    LeakyRelu(f64),
    Sigmoid,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu(s) => write!(f, "lrelu({s})"),
            Activation::Sigmoid => write!(f, "sigmoid"),
        }
    }
}

/// Pooling over `[B, C, H, W]`. Global kinds collapse to `[B, C, 1, 1]`;
/// windowed kinds use non-overlapping `k x k` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    GlobalAvg,
    GlobalMax,
    Avg2d(usize),
    Max2d(usize),
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for the running update.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Numerically safe logistic function, clamped so the result stays strictly
/// inside `(0, 1)` even where `f64` would round to an endpoint.
#[inline]
pub fn sigmoid_value(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// (`-1 -> 1`, `n -> n-2`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub(crate) const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub(crate) const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel responses of one `h x w` plane with reflect padding, written as
/// paired differences so flat regions give exact zeros.
pub(crate) fn sobel_plane(src: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for y in 0..h {
        let rows = [
            reflect(y as isize - 1, h) * w,
            y * w,
            reflect(y as isize + 1, h) * w,
        ];
        for x in 0..w {
            let cols = [reflect(x as isize - 1, w), x, reflect(x as isize + 1, w)];
            let a = |r: usize, c: usize| src[rows[r] + cols[c]];
            gx[y * w + x] = (a(0, 2) - a(0, 0)) + 2.0 * (a(1, 2) - a(1, 0)) + (a(2, 2) - a(2, 0));
            gy[y * w + x] = (a(2, 0) - a(0, 0)) + 2.0 * (a(2, 1) - a(0, 1)) + (a(2, 2) - a(0, 2));
        }
    }
}
