//! Front-to-back alpha blending over an ordered fragment run.
//!
//! Attributes are blended premultiplied (`sum_i x_i a_i T_i` with
//! `T_i = prod_{j<i} (1 - a_j)`), never divided by the accumulated opacity.
//! Per-fragment alpha is `min(opacity * g, 0.99)`. When the running
//! transmittance drops below the early-stop threshold the walk ends and the
//! remaining fragments contribute nothing, forward and backward alike.

/// Per-fragment alpha ceiling.
pub const ALPHA_CLIP: f64 = 0.99;
/// Default transmittance early-stop used during training.
pub const EARLY_STOP: f64 = 1e-4;

/// One fragment ready for blending: the unclipped alpha `opacity * g` and
/// the attribute vector.
#[derive(Debug, Clone, Copy)]
pub struct BlendFrag<const C: usize> {
    pub raw_alpha: f64,
    pub attrs: [f64; C],
}

/// Blend result: premultiplied attributes, accumulated opacity, how many
/// fragments were consumed, and the final transmittance.
#[derive(Debug, Clone, Copy)]
pub struct BlendOut<const C: usize> {
    pub attrs: [f64; C],
    pub alpha: f64,
    pub used: usize,
    pub final_t: f64,
}

pub fn blend_forward<const C: usize>(frags: &[BlendFrag<C>], early_stop: f64) -> BlendOut<C> {
    let mut out = [0.0; C];
    let mut t = 1.0;
    let mut used = 0;
    for frag in frags {
        let a = frag.raw_alpha.min(ALPHA_CLIP);
        for c in 0..C {
            out[c] += frag.attrs[c] * a * t;
        }
        t *= 1.0 - a;
        used += 1;
        if t < early_stop {
            break;
        }
    }
    BlendOut {
        attrs: out,
        alpha: 1.0 - t,
        used,
        final_t: t,
    }
}

/// Backward pass of [`blend_forward`]. Walks the same fragment run and calls
/// `sink(index, d_raw_alpha, d_attrs)` for every consumed fragment. The
/// suffix trick turns the quadratic dependence of later transmittances on
/// earlier alphas into one reverse sweep.
pub fn blend_backward<const C: usize>(
    frags: &[BlendFrag<C>],
    early_stop: f64,
    d_attrs: &[f64; C],
    d_alpha: f64,
    mut sink: impl FnMut(usize, f64, [f64; C]),
) {
    // Replay to recover per-fragment transmittances.
    let mut ts = Vec::with_capacity(frags.len());
    let mut t = 1.0;
    let mut used = 0;
    for frag in frags {
        ts.push(t);
        t *= 1.0 - frag.raw_alpha.min(ALPHA_CLIP);
        used += 1;
        if t < early_stop {
            break;
        }
    }
    let final_t = t;

    // suffix[c] = sum over later fragments of x_j a_j T_j.
    let mut suffix = [0.0; C];
    for i in (0..used).rev() {
        let frag = &frags[i];
        let a = frag.raw_alpha.min(ALPHA_CLIP);
        let ti = ts[i];
        let one_minus = 1.0 - a;

        let mut d_a = 0.0;
        for c in 0..C {
            // d out_c / d a_i = x_i T_i - suffix_c / (1 - a_i)
            d_a += d_attrs[c] * (frag.attrs[c] * ti - suffix[c] / one_minus);
        }
        // d A / d a_i = final_t / (1 - a_i)
        d_a += d_alpha * final_t / one_minus;

        let mut d_x = [0.0; C];
        for c in 0..C {
            d_x[c] = d_attrs[c] * a * ti;
            suffix[c] += frag.attrs[c] * a * ti;
        }
        let d_raw = if frag.raw_alpha > ALPHA_CLIP { 0.0 } else { d_a };
        sink(i, d_raw, d_x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute<const C: usize>(frags: &[BlendFrag<C>]) -> ([f64; C], f64) {
        // Direct expansion of the blending sums, no incremental state.
        let mut out = [0.0; C];
        for i in 0..frags.len() {
            let a = frags[i].raw_alpha.min(ALPHA_CLIP);
            let mut t = 1.0;
            for frag in &frags[..i] {
                t *= 1.0 - frag.raw_alpha.min(ALPHA_CLIP);
            }
            for c in 0..C {
                out[c] += frags[i].attrs[c] * a * t;
            }
        }
        let mut t = 1.0;
        for frag in frags {
            t *= 1.0 - frag.raw_alpha.min(ALPHA_CLIP);
        }
        (out, 1.0 - t)
    }

    #[test]
    fn two_fragment_hand_value() {
        let frags = [
            BlendFrag {
                raw_alpha: 0.5,
                attrs: [1.0],
            },
            BlendFrag {
                raw_alpha: 0.5,
                attrs: [0.5],
            },
        ];
        let out = blend_forward(&frags, 0.0);
        // 1.0 * 0.5 + 0.5 * 0.5 * 0.5 = 0.625; A = 1 - 0.25 = 0.75
        assert!((out.attrs[0] - 0.625).abs() < 1e-15);
        assert!((out.alpha - 0.75).abs() < 1e-15);
        assert_eq!(out.used, 2);
    }

    #[test]
    fn alpha_clip_applies() {
        let frags = [BlendFrag {
            raw_alpha: 5.0,
            attrs: [1.0],
        }];
        let out = blend_forward(&frags, 0.0);
        assert!((out.attrs[0] - ALPHA_CLIP).abs() < 1e-15);
        assert!((out.alpha - ALPHA_CLIP).abs() < 1e-15);
    }

    #[test]
    fn early_stop_cuts_the_tail() {
        let frags: Vec<BlendFrag<1>> = (0..100)
            .map(|_| BlendFrag {
                raw_alpha: 0.9,
                attrs: [1.0],
            })
            .collect();
        let out = blend_forward(&frags, 1e-4);
        // T after k fragments is 0.1^k; below 1e-4 after 4.
        assert_eq!(out.used, 4);
        assert!((out.final_t - 1e-4).abs() < 1e-15);
        // Backward touches exactly the consumed fragments.
        let mut touched = Vec::new();
        blend_backward(&frags, 1e-4, &[1.0], 0.0, |i, _, _| touched.push(i));
        touched.reverse();
        assert_eq!(touched, vec![0, 1, 2, 3]);
    }

    #[test]
    fn matches_brute_force_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let frags: Vec<BlendFrag<3>> = (0..n)
                .map(|_| BlendFrag {
                    raw_alpha: rng.gen_range(0.0..1.2),
                    attrs: [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(0.0..1.0),
                        rng.gen_range(0.0..2.0),
                    ],
                })
                .collect();
            let out = blend_forward(&frags, 0.0);
            let (b_attrs, b_alpha) = brute(&frags);
            for c in 0..3 {
                assert!((out.attrs[c] - b_attrs[c]).abs() < 1e-12);
            }
            assert!((out.alpha - b_alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..60 {
            let n = rng.gen_range(1..12);
            let frags: Vec<BlendFrag<2>> = (0..n)
                .map(|_| BlendFrag {
                    // Stay away from the 0.99 clip so the check is smooth.
                    raw_alpha: rng.gen_range(0.05..0.9),
                    attrs: [rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)],
                })
                .collect();
            let w = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let w_alpha: f64 = rng.gen_range(-1.0..1.0);
            let score = |frags: &[BlendFrag<2>]| {
                let out = blend_forward(frags, 0.0);
                out.attrs[0] * w[0] + out.attrs[1] * w[1] + out.alpha * w_alpha
            };
            let mut d_raw = vec![0.0; n];
            let mut d_attr = vec![[0.0; 2]; n];
            blend_backward(&frags, 0.0, &w, w_alpha, |i, da, dx| {
                d_raw[i] += da;
                for c in 0..2 {
                    d_attr[i][c] += dx[c];
                }
            });
            let h = 1e-6;
            for i in 0..n {
                let mut fp = frags.clone();
                let mut fm = frags.clone();
                fp[i].raw_alpha += h;
                fm[i].raw_alpha -= h;
                let fd = (score(&fp) - score(&fm)) / (2.0 * h);
                assert!(
                    (fd - d_raw[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "alpha {i}: {fd} vs {}",
                    d_raw[i]
                );
                for c in 0..2 {
                    let mut fp = frags.clone();
                    let mut fm = frags.clone();
                    fp[i].attrs[c] += h;
                    fm[i].attrs[c] -= h;
                    let fd = (score(&fp) - score(&fm)) / (2.0 * h);
                    assert!(
                        (fd - d_attr[i][c]).abs() < 1e-6 * (1.0 + fd.abs()),
                        "attr {i}/{c}: {fd} vs {}",
                        d_attr[i][c]
                    );
                }
            }
        }
    }
}
