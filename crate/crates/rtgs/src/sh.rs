//! Real spherical harmonics up to degree 3.
//!
//! View-dependent surfel color is stored as SH coefficients per channel and
//! decoded as `0.5 + sum_k c_k * Y_k(dir)` with a clamp at zero. The basis is
//! always evaluated at a unit ray direction. Camera rays are constant, but
//! reflection rays inherit their direction from the shaded normal, so the
//! basis also exposes its gradient with respect to the direction.

pub const MAX_COEFFS: usize = 16;

/// DC basis value; a constant color `c` is stored as `(c - 0.5) / DC_NORM`.
pub const DC_NORM: f64 = 0.282_094_791_773_878_14;

const C0: f64 = DC_NORM;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of coefficients for an SH degree (0..=3).
pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluates the first `n` basis functions at unit direction `dir`.
pub fn basis(dir: [f64; 3], n: usize) -> [f64; MAX_COEFFS] {
    let [x, y, z] = dir;
    let mut b = [0.0; MAX_COEFFS];
    b[0] = C0;
    if n > 1 {
        b[1] = -C1 * y;
        b[2] = C1 * z;
        b[3] = -C1 * x;
    }
    if n > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = C2[0] * x * y;
        b[5] = C2[1] * y * z;
        b[6] = C2[2] * (2.0 * zz - xx - yy);
        b[7] = C2[3] * x * z;
        b[8] = C2[4] * (xx - yy);
        if n > 9 {
            b[9] = C3[0] * y * (3.0 * xx - yy);
            b[10] = C3[1] * x * y * z;
            b[11] = C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = C3[5] * z * (xx - yy);
            b[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Gradients of the first `n` basis functions with respect to the direction
/// components, treating each as a polynomial in `(x, y, z)`.
pub fn basis_grad(dir: [f64; 3], n: usize) -> [[f64; 3]; MAX_COEFFS] {
    let [x, y, z] = dir;
    let mut g = [[0.0; 3]; MAX_COEFFS];
    if n > 1 {
        g[1] = [0.0, -C1, 0.0];
        g[2] = [0.0, 0.0, C1];
        g[3] = [-C1, 0.0, 0.0];
    }
    if n > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[4] = [C2[0] * y, C2[0] * x, 0.0];
        g[5] = [0.0, C2[1] * z, C2[1] * y];
        g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        g[7] = [C2[3] * z, 0.0, C2[3] * x];
        g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
        if n > 9 {
            g[9] = [
                6.0 * C3[0] * x * y,
                C3[0] * (3.0 * xx - 3.0 * yy),
                0.0,
            ];
            g[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
            g[11] = [
                -2.0 * C3[2] * x * y,
                C3[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * C3[2] * y * z,
            ];
            g[12] = [
                -6.0 * C3[3] * x * z,
                -6.0 * C3[3] * y * z,
                C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                C3[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * C3[4] * x * y,
                8.0 * C3[4] * x * z,
            ];
            g[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
            g[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
        }
    }
    g
}

/// Decodes RGB from SH coefficients and precomputed basis values.
/// Returns the clamped color and a per-channel flag telling whether the
/// clamp at zero was active (those channels carry no gradient).
pub fn eval_color(coeffs: &[[f64; 3]], basis: &[f64; MAX_COEFFS]) -> ([f64; 3], [bool; 3]) {
    let mut color = [0.5; 3];
    for (k, c) in coeffs.iter().enumerate() {
        for ch in 0..3 {
            color[ch] += c[ch] * basis[k];
        }
    }
    let mut clamped = [false; 3];
    for ch in 0..3 {
        if color[ch] < 0.0 {
            color[ch] = 0.0;
            clamped[ch] = true;
        }
    }
    (color, clamped)
}

/// Accumulates the adjoint of [`eval_color`] into per-coefficient gradients.
pub fn eval_color_backward(
    d_color: [f64; 3],
    clamped: [bool; 3],
    basis: &[f64; MAX_COEFFS],
    d_coeffs: &mut [[f64; 3]],
) {
    for (k, dc) in d_coeffs.iter_mut().enumerate() {
        for ch in 0..3 {
            if !clamped[ch] {
                dc[ch] += d_color[ch] * basis[k];
            }
        }
    }
}
