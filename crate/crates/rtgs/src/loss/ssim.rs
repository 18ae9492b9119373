//! SSIM with an 11x11 Gaussian window and an exact backward pass.
//!
//! Local means and (co)variances come from separable Gaussian filtering
//! with zero padding. The window is symmetric, so the filter is its own
//! adjoint and the backward pass is three more convolutions.

use crate::img::Map;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn window_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - mid) * (i as f64 - mid)) / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable zero-padded Gaussian filter over every channel.
fn blur(src: &Map) -> Map {
    let k = window_kernel();
    let r = WINDOW / 2;
    let (w, h, ch) = (src.width, src.height, src.channels);
    let mut tmp = Map::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sx = x as isize + i as isize - r as isize;
                    if sx >= 0 && (sx as usize) < w {
                        acc += kv * src.get(sx as usize, y, c);
                    }
                }
                tmp.set(x, y, c, acc);
            }
        }
    }
    let mut out = Map::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    let sy = y as isize + i as isize - r as isize;
                    if sy >= 0 && (sy as usize) < h {
                        acc += kv * tmp.get(x, sy as usize, c);
                    }
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

fn hadamard(a: &Map, b: &Map) -> Map {
    let mut out = Map::new(a.width, a.height, a.channels);
    for (o, (x, y)) in out.data.iter_mut().zip(a.data.iter().zip(b.data.iter())) {
        *o = x * y;
    }
    out
}

/// Mean SSIM over all pixels and channels, plus the filtered moment maps
/// the backward pass reuses.
pub struct SsimForward {
    pub mean: f64,
    mu_x: Map,
    mu_y: Map,
    sigma_x2: Map,
    sigma_y2: Map,
    sigma_xy: Map,
}

pub fn ssim_forward(x: &Map, y: &Map) -> SsimForward {
    assert_eq!(x.width, y.width);
    assert_eq!(x.height, y.height);
    assert_eq!(x.channels, y.channels);
    let mu_x = blur(x);
    let mu_y = blur(y);
    let mut sigma_x2 = blur(&hadamard(x, x));
    let mut sigma_y2 = blur(&hadamard(y, y));
    let mut sigma_xy = blur(&hadamard(x, y));
    for i in 0..x.data.len() {
        sigma_x2.data[i] -= mu_x.data[i] * mu_x.data[i];
        sigma_y2.data[i] -= mu_y.data[i] * mu_y.data[i];
        sigma_xy.data[i] -= mu_x.data[i] * mu_y.data[i];
    }
    let mut total = 0.0;
    for i in 0..x.data.len() {
        total += ssim_value(
            mu_x.data[i],
            mu_y.data[i],
            sigma_x2.data[i],
            sigma_y2.data[i],
            sigma_xy.data[i],
        );
    }
    SsimForward {
        mean: total / x.data.len() as f64,
        mu_x,
        mu_y,
        sigma_x2,
        sigma_y2,
        sigma_xy,
    }
}

fn ssim_value(mu_x: f64, mu_y: f64, sx2: f64, sy2: f64, sxy: f64) -> f64 {
    let a1 = 2.0 * mu_x * mu_y + C1;
    let a2 = 2.0 * sxy + C2;
    let b1 = mu_x * mu_x + mu_y * mu_y + C1;
    let b2 = sx2 + sy2 + C2;
    (a1 * a2) / (b1 * b2)
}

/// Accumulates `d_mean * d(mean SSIM)/dX` into `d_x`; `y` is the fixed
/// reference.
pub fn ssim_backward(fwd: &SsimForward, x: &Map, y: &Map, d_mean: f64, d_x: &mut Map) {
    let n = x.data.len() as f64;
    let mut d_mu = Map::new(x.width, x.height, x.channels);
    let mut d_sx2 = Map::new(x.width, x.height, x.channels);
    let mut d_sxy = Map::new(x.width, x.height, x.channels);
    for i in 0..x.data.len() {
        let mu_x = fwd.mu_x.data[i];
        let mu_y = fwd.mu_y.data[i];
        let a1 = 2.0 * mu_x * mu_y + C1;
        let a2 = 2.0 * fwd.sigma_xy.data[i] + C2;
        let b1 = mu_x * mu_x + mu_y * mu_y + C1;
        let b2 = fwd.sigma_x2.data[i] + fwd.sigma_y2.data[i] + C2;
        let s = (a1 * a2) / (b1 * b2);
        let d_s = d_mean / n;
        let d_a1 = d_s * a2 / (b1 * b2);
        let d_a2 = d_s * a1 / (b1 * b2);
        let d_b1 = -d_s * s / b1;
        let d_b2 = -d_s * s / b2;
        // sigma_xy = blur(xy) - mu_x mu_y feeds both a2 and the mean terms.
        let d_sxy_i = 2.0 * d_a2;
        let d_sx2_i = d_b2;
        d_mu.data[i] = d_a1 * 2.0 * mu_y + d_b1 * 2.0 * mu_x
            - d_sx2_i * 2.0 * mu_x
            - d_sxy_i * mu_y;
        d_sx2.data[i] = d_sx2_i;
        d_sxy.data[i] = d_sxy_i;
    }
    let mu_part = blur(&d_mu);
    let sx2_part = blur(&d_sx2);
    let sxy_part = blur(&d_sxy);
    for i in 0..x.data.len() {
        d_x.data[i] +=
            mu_part.data[i] + 2.0 * x.data[i] * sx2_part.data[i] + y.data[i] * sxy_part.data[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, ch: usize) -> Map {
        let mut m = Map::new(w, h, ch);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        m
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_map(&mut rng, 16, 12, 3);
        let s = ssim_forward(&x, &x);
        assert!((s.mean - 1.0).abs() < 1e-9, "ssim {}", s.mean);
    }

    #[test]
    fn constant_images_match_closed_form() {
        let mut x = Map::new(16, 16, 1);
        let mut y = Map::new(16, 16, 1);
        for v in x.data.iter_mut() {
            *v = 0.4;
        }
        for v in y.data.iter_mut() {
            *v = 0.1;
        }
        let s = ssim_forward(&x, &y);
        // Zero padding shrinks the local means near the border, so compare
        // at an interior pixel whose window fits entirely in the image.
        let mu_x = s.mu_x.get(8, 8, 0);
        let mu_y = s.mu_y.get(8, 8, 0);
        assert!((mu_x - 0.4).abs() < 1e-12);
        assert!((mu_y - 0.1).abs() < 1e-12);
        let want = (2.0 * 0.4 * 0.1 + C1) / (0.4 * 0.4 + 0.1 * 0.1 + C1);
        let got = ssim_value(
            mu_x,
            mu_y,
            s.sigma_x2.get(8, 8, 0),
            s.sigma_y2.get(8, 8, 0),
            s.sigma_xy.get(8, 8, 0),
        );
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    /// The separable filter plus moment algebra must agree with a direct
    /// per-window double loop using the full 2D kernel.
    #[test]
    fn matches_dense_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_map(&mut rng, 14, 11, 2);
        let y = random_map(&mut rng, 14, 11, 2);
        let s = ssim_forward(&x, &y);

        let k = window_kernel();
        let r = (WINDOW / 2) as isize;
        let mut total = 0.0;
        for c in 0..x.channels {
            for py in 0..x.height as isize {
                for px in 0..x.width as isize {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let w = k[(dx + r) as usize] * k[(dy + r) as usize];
                            let (sx, sy) = (px + dx, py + dy);
                            if sx < 0
                                || sy < 0
                                || sx >= x.width as isize
                                || sy >= x.height as isize
                            {
                                continue;
                            }
                            let xv = x.get(sx as usize, sy as usize, c);
                            let yv = y.get(sx as usize, sy as usize, c);
                            mx += w * xv;
                            my += w * yv;
                            mxx += w * xv * xv;
                            myy += w * yv * yv;
                            mxy += w * xv * yv;
                        }
                    }
                    total += ssim_value(mx, my, mxx - mx * mx, myy - my * my, mxy - mx * my);
                }
            }
        }
        let want = total / x.data.len() as f64;
        assert!((s.mean - want).abs() < 1e-12, "{} vs {want}", s.mean);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_map(&mut rng, 9, 8, 2);
        let y = random_map(&mut rng, 9, 8, 2);
        let mut d_x = Map::new(9, 8, 2);
        let fwd = ssim_forward(&x, &y);
        ssim_backward(&fwd, &x, &y, 1.0, &mut d_x);
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (ssim_forward(&xp, &y).mean - ssim_forward(&xm, &y).mean) / (2.0 * h);
            assert!(
                (d_x.data[i] - fd).abs() < 1e-7,
                "pixel {i}: {} vs {fd}",
                d_x.data[i]
            );
        }
    }
}
