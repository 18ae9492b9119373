//! Microfacet BSDF used for deferred shading.
//!
//! Reflection is a Torrance-Sparrow lobe with a GGX normal distribution,
//! separable Smith shadowing and Schlick's Fresnel approximation. Because
//! the ray tracer follows the exact mirror direction, the half vector equals
//! the surface normal at evaluation time and the lobe collapses to the
//! on-manifold weight `D(1) * G1(c)^2 * F(c) / (4c)` with `c = n.wo`.
//! Transmission uses the complementary Fresnel energy inside the
//! transparent-object mask. Stored roughness is remapped by a fitted
//! log-polynomial before evaluation; every routine has an exact derivative
//! used by the backward passes.

use crate::error::{Error, Result};

/// Guard below which shading is skipped (grazing or back-facing view).
pub const MIN_COS: f64 = 1e-4;
/// Upper clamp on the reflection weight.
pub const MAX_BRDF_WEIGHT: f64 = 10.0;
/// Lower clamp on remapped roughness.
pub const REMAP_FLOOR: f64 = 0.02;

/// GGX (Trowbridge-Reitz) normal distribution.
pub fn ggx_d(cos_h: f64, alpha: f64) -> f64 {
    let k = cos_h * cos_h * (alpha * alpha - 1.0) + 1.0;
    alpha * alpha / (std::f64::consts::PI * k * k)
}

/// GGX value plus derivatives: (D, dD/dcos_h, dD/dalpha).
pub fn ggx_d_grad(cos_h: f64, alpha: f64) -> (f64, f64, f64) {
    let pi = std::f64::consts::PI;
    let a2 = alpha * alpha;
    let k = cos_h * cos_h * (a2 - 1.0) + 1.0;
    let d = a2 / (pi * k * k);
    let d_cos = -4.0 * a2 * cos_h * (a2 - 1.0) / (pi * k * k * k);
    let d_alpha = (2.0 * alpha * k - 4.0 * alpha * a2 * cos_h * cos_h) / (pi * k * k * k);
    (d, d_cos, d_alpha)
}

/// Smith separable masking term for one direction.
pub fn smith_g1(cos: f64, alpha: f64) -> f64 {
    let s = (alpha * alpha + (1.0 - alpha * alpha) * cos * cos).sqrt();
    2.0 * cos / (cos + s)
}

/// Smith G1 plus derivatives: (G1, dG1/dcos, dG1/dalpha).
pub fn smith_g1_grad(cos: f64, alpha: f64) -> (f64, f64, f64) {
    let a2 = alpha * alpha;
    let s = (a2 + (1.0 - a2) * cos * cos).sqrt();
    let denom = cos + s;
    let g = 2.0 * cos / denom;
    let ds_dcos = (1.0 - a2) * cos / s;
    let d_cos = (2.0 * denom - 2.0 * cos * (1.0 + ds_dcos)) / (denom * denom);
    let ds_dalpha = alpha * (1.0 - cos * cos) / s;
    let d_alpha = -2.0 * cos * ds_dalpha / (denom * denom);
    (g, d_cos, d_alpha)
}

/// Schlick Fresnel for one channel.
pub fn fresnel_schlick(cos: f64, f0: f64) -> f64 {
    let m = 1.0 - cos;
    let m2 = m * m;
    f0 + (1.0 - f0) * m2 * m2 * m
}

/// Schlick Fresnel plus derivatives: (F, dF/dcos, dF/df0).
pub fn fresnel_schlick_grad(cos: f64, f0: f64) -> (f64, f64, f64) {
    let m = 1.0 - cos;
    let m2 = m * m;
    let m5 = m2 * m2 * m;
    let f = f0 + (1.0 - f0) * m5;
    let d_cos = -5.0 * (1.0 - f0) * m2 * m2;
    let d_f0 = 1.0 - m5;
    (f, d_cos, d_f0)
}

const REMAP_COEFFS: [f64; 5] = [1.62142, 0.819955, 0.1734, 0.0171201, 0.000_640_711];

/// Maps stored roughness to the wider effective roughness used at
/// evaluation time. Polynomial in `ln(alpha)`, clamped below at
/// [`REMAP_FLOOR`]. `alpha` must be positive.
pub fn roughness_remap(alpha: f64) -> Result<f64> {
    Ok(roughness_remap_grad(alpha)?.0)
}

/// Remap value plus derivative: (g, dg/dalpha). The derivative is zero in
/// the floored region.
pub fn roughness_remap_grad(alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::validation(format!(
            "roughness_remap needs alpha > 0, got {alpha}"
        )));
    }
    let l = alpha.ln();
    let [c0, c1, c2, c3, c4] = REMAP_COEFFS;
    let g = c0 + l * (c1 + l * (c2 + l * (c3 + l * c4)));
    if g < REMAP_FLOOR {
        return Ok((REMAP_FLOOR, 0.0));
    }
    let dg_dl = c1 + l * (2.0 * c2 + l * (3.0 * c3 + l * 4.0 * c4));
    Ok((g, dg_dl / alpha))
}

/// Forward cache of [`brdf_weight`].
#[derive(Debug, Clone, Copy)]
pub struct BrdfWeight {
    pub value: [f64; 3],
    /// True when the view direction failed the grazing guard; everything is
    /// zero and carries no gradient.
    pub skipped: bool,
    clamped: [bool; 3],
    d: f64,
    g1: f64,
    f: [f64; 3],
    cos_o: f64,
    alpha_eff: f64,
    f0: [f64; 3],
}

/// On-manifold reflection weight `D(1) * G1(c)^2 * F(c) / (4c)` per channel,
/// clamped above at [`MAX_BRDF_WEIGHT`]. This is the BRDF times the
/// incident cosine for the exact mirror direction; the `cosine-free`
/// feature divides the cosine back out (denominator `4c^2`).
pub fn brdf_weight(cos_o: f64, alpha_eff: f64, f0: [f64; 3]) -> BrdfWeight {
    let mut out = BrdfWeight {
        value: [0.0; 3],
        skipped: true,
        clamped: [false; 3],
        d: 0.0,
        g1: 0.0,
        f: [0.0; 3],
        cos_o,
        alpha_eff,
        f0,
    };
    if cos_o <= MIN_COS {
        return out;
    }
    out.skipped = false;
    out.d = ggx_d(1.0, alpha_eff);
    out.g1 = smith_g1(cos_o, alpha_eff);
    let denom_cos = if cfg!(feature = "cosine-free") {
        cos_o * cos_o
    } else {
        cos_o
    };
    let scale = out.d * out.g1 * out.g1 / (4.0 * denom_cos);
    for c in 0..3 {
        out.f[c] = fresnel_schlick(cos_o, f0[c]);
        let w = scale * out.f[c];
        if w > MAX_BRDF_WEIGHT {
            out.value[c] = MAX_BRDF_WEIGHT;
            out.clamped[c] = true;
        } else {
            out.value[c] = w;
        }
    }
    out
}

/// Backward pass of [`brdf_weight`]: returns (d_cos_o, d_alpha_eff, d_f0).
pub fn brdf_weight_backward(cache: &BrdfWeight, d_value: [f64; 3]) -> (f64, f64, [f64; 3]) {
    if cache.skipped {
        return (0.0, 0.0, [0.0; 3]);
    }
    let c = cache.cos_o;
    let (_, dd_dcos, dd_dalpha) = ggx_d_grad(1.0, cache.alpha_eff);
    let _ = dd_dcos; // half vector is fixed at the normal
    let (_, dg1_dcos, dg1_dalpha) = smith_g1_grad(c, cache.alpha_eff);
    let g2 = cache.g1 * cache.g1;
    let (denom_cos, cos_power) = if cfg!(feature = "cosine-free") {
        (c * c, 2.0)
    } else {
        (c, 1.0)
    };
    let inv4c = 1.0 / (4.0 * denom_cos);

    let mut d_cos = 0.0;
    let mut d_alpha = 0.0;
    let mut d_f0 = [0.0; 3];
    for ch in 0..3 {
        if cache.clamped[ch] || d_value[ch] == 0.0 {
            continue;
        }
        let (_, df_dcos, df_df0) = fresnel_schlick_grad(c, cache.f0[ch]);
        let w = cache.d * g2 * cache.f[ch] * inv4c;
        let dw_dcos = cache.d * inv4c
            * (2.0 * cache.g1 * dg1_dcos * cache.f[ch] + g2 * df_dcos)
            - cos_power * w / c;
        let dw_dalpha =
            (dd_dalpha * g2 + cache.d * 2.0 * cache.g1 * dg1_dalpha) * cache.f[ch] * inv4c;
        let dw_df0 = cache.d * g2 * df_df0 * inv4c;
        d_cos += d_value[ch] * dw_dcos;
        d_alpha += d_value[ch] * dw_dalpha;
        d_f0[ch] = d_value[ch] * dw_df0;
    }
    (d_cos, d_alpha, d_f0)
}

/// Forward cache of [`btdf_weight`].
#[derive(Debug, Clone, Copy)]
pub struct BtdfWeight {
    pub value: [f64; 3],
    pub masked: bool,
    cos_o: f64,
    f0: [f64; 3],
}

/// Transmission weight: the energy not reflected, `1 - F(c)` per channel,
/// active only inside the transparent-object mask.
pub fn btdf_weight(cos_o: f64, f0: [f64; 3], in_mask: bool) -> BtdfWeight {
    let mut out = BtdfWeight {
        value: [0.0; 3],
        masked: !in_mask,
        cos_o,
        f0,
    };
    if !in_mask {
        return out;
    }
    for c in 0..3 {
        out.value[c] = 1.0 - fresnel_schlick(cos_o, f0[c]);
    }
    out
}

/// Backward pass of [`btdf_weight`]: returns (d_cos_o, d_f0).
pub fn btdf_weight_backward(cache: &BtdfWeight, d_value: [f64; 3]) -> (f64, [f64; 3]) {
    if cache.masked {
        return (0.0, [0.0; 3]);
    }
    let mut d_cos = 0.0;
    let mut d_f0 = [0.0; 3];
    for c in 0..3 {
        let (_, df_dcos, df_df0) = fresnel_schlick_grad(cache.cos_o, cache.f0[c]);
        d_cos -= d_value[c] * df_dcos;
        d_f0[c] = -d_value[c] * df_df0;
    }
    (d_cos, d_f0)
}

/// Final color: `(1 - ks) * cd + ks * (wr * cr + wt * ct)` componentwise,
/// floored at zero (blended diffuse colors can dip negative mid-training).
pub fn compose_final(
    cd: [f64; 3],
    ks: f64,
    wr: [f64; 3],
    cr: [f64; 3],
    wt: [f64; 3],
    ct: [f64; 3],
) -> [f64; 3] {
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = ((1.0 - ks) * cd[c] + ks * (wr[c] * cr[c] + wt[c] * ct[c])).max(0.0);
    }
    out
}

/// Adjoints of [`compose_final`] inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ComposeGrad {
    pub d_cd: [f64; 3],
    pub d_ks: f64,
    pub d_wr: [f64; 3],
    pub d_cr: [f64; 3],
    pub d_wt: [f64; 3],
    pub d_ct: [f64; 3],
}

pub fn compose_final_backward(
    cd: [f64; 3],
    ks: f64,
    wr: [f64; 3],
    cr: [f64; 3],
    wt: [f64; 3],
    ct: [f64; 3],
    d_out: [f64; 3],
) -> ComposeGrad {
    let mut g = ComposeGrad::default();
    for c in 0..3 {
        if (1.0 - ks) * cd[c] + ks * (wr[c] * cr[c] + wt[c] * ct[c]) < 0.0 {
            continue;
        }
        g.d_cd[c] = d_out[c] * (1.0 - ks);
        g.d_ks += d_out[c] * (wr[c] * cr[c] + wt[c] * ct[c] - cd[c]);
        g.d_wr[c] = d_out[c] * ks * cr[c];
        g.d_cr[c] = d_out[c] * ks * wr[c];
        g.d_wt[c] = d_out[c] * ks * ct[c];
        g.d_ct[c] = d_out[c] * ks * wt[c];
    }
    g
}

/// Monte Carlo estimate of the projected-solid-angle integral of the GGX
/// lobe over the hemisphere around the normal. Equals 1 for a normalized
/// distribution. Uses `samples` stratified-jittered cosine strata so the
/// estimate stays tight even for sharp low-roughness lobes.
pub fn ggx_projected_integral(alpha: f64, samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for i in 0..samples {
        // Uniform over the hemisphere the z coordinate is uniform in [0, 1];
        // stratify it and jitter inside each stratum.
        let cos = (i as f64 + rng.gen_range(0.0..1.0)) / samples as f64;
        acc += ggx_d(cos, alpha) * cos * 2.0 * std::f64::consts::PI;
    }
    acc / samples as f64
}

/// General Torrance-Sparrow BRDF `D G F / (4 (n.wi)(n.wo))` for arbitrary
/// directions (both pointing away from the surface). Used by tests to check
/// reciprocity and by nothing on the hot path, which always evaluates the
/// collapsed on-manifold form.
pub fn brdf_eval(
    n: [f64; 3],
    wi: [f64; 3],
    wo: [f64; 3],
    alpha_eff: f64,
    f0: [f64; 3],
) -> [f64; 3] {
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let ci = dot(n, wi);
    let co = dot(n, wo);
    if ci <= MIN_COS || co <= MIN_COS {
        return [0.0; 3];
    }
    let mut h = [wi[0] + wo[0], wi[1] + wo[1], wi[2] + wo[2]];
    let hn = dot(h, h).sqrt();
    if hn < 1e-12 {
        return [0.0; 3];
    }
    for v in &mut h {
        *v /= hn;
    }
    let d = ggx_d(dot(n, h), alpha_eff);
    let g = smith_g1(ci, alpha_eff) * smith_g1(co, alpha_eff);
    let cos_oh = dot(wo, h);
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = d * g * fresnel_schlick(cos_oh.abs(), f0[c]) / (4.0 * ci * co);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ggx_pinned_values() {
        let pi = std::f64::consts::PI;
        assert!((ggx_d(1.0, 1.0) - 1.0 / pi).abs() < 1e-15);
        assert!((ggx_d(1.0, 0.5) - 4.0 / pi).abs() < 1e-12);
    }

    #[test]
    fn smith_g1_is_one_at_normal_incidence() {
        for alpha in [0.05, 0.3, 0.7, 1.0] {
            assert!((smith_g1(1.0, alpha) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fresnel_endpoints_are_exact() {
        for f0 in [0.0, 0.04, 0.5, 1.0] {
            assert_eq!(fresnel_schlick(1.0, f0), f0);
            assert_eq!(fresnel_schlick(0.0, f0), 1.0);
        }
    }

    #[test]
    fn remap_pinned_values() {
        assert_eq!(roughness_remap(1.0).unwrap(), 1.62142);
        assert!(roughness_remap(0.0).is_err());
        assert!(roughness_remap(-0.1).is_err());
        // Monotone increasing over the stored-roughness domain.
        let mut prev = roughness_remap(0.02).unwrap();
        for i in 1..=100 {
            let a = 0.02 + (1.0 - 0.02) * i as f64 / 100.0;
            let g = roughness_remap(a).unwrap();
            assert!(g > prev, "remap not monotone at {a}");
            prev = g;
        }
    }

    #[test]
    fn brdf_weight_perfect_mirror_head_on() {
        // wo = wi = n, alpha_eff = 1, f0 = 1: D = 1/pi, G = 1, F = 1
        // so the weight is 1 / (4 pi).
        let w = brdf_weight(1.0, 1.0, [1.0; 3]);
        for c in 0..3 {
            assert!((w.value[c] - 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
        }
        assert!(!w.skipped);
    }

    #[test]
    fn brdf_weight_guards() {
        let w = brdf_weight(1e-5, 0.5, [0.04; 3]);
        assert!(w.skipped);
        assert_eq!(w.value, [0.0; 3]);
        let (dc, da, df) = brdf_weight_backward(&w, [1.0; 3]);
        assert_eq!((dc, da, df), (0.0, 0.0, [0.0; 3]));

        // Tiny roughness at grazing blows up and gets clamped; the clamped
        // channel carries no gradient.
        let w = brdf_weight(0.02, 0.02, [1.0; 3]);
        assert_eq!(w.value, [MAX_BRDF_WEIGHT; 3]);
        let (dc, da, df) = brdf_weight_backward(&w, [1.0; 3]);
        assert_eq!((dc, da, df), (0.0, 0.0, [0.0; 3]));
    }

    #[test]
    fn btdf_weight_masked_and_open() {
        let w = btdf_weight(0.8, [0.04; 3], false);
        assert_eq!(w.value, [0.0; 3]);
        let w = btdf_weight(1.0, [0.04; 3], true);
        for c in 0..3 {
            assert!((w.value[c] - 0.96).abs() < 1e-15);
        }
    }

    #[test]
    fn compose_final_pinned_value() {
        let out = compose_final([0.5; 3], 0.5, [1.0; 3], [0.5; 3], [1.0; 3], [0.5; 3]);
        for c in 0..3 {
            assert!((out[c] - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn compose_floors_negative_channels_without_gradient() {
        let cd = [-0.4, 0.2, 0.2];
        let out = compose_final(cd, 0.0, [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.2);
        let g = compose_final_backward(cd, 0.0, [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3], [1.0; 3]);
        assert_eq!(g.d_cd[0], 0.0);
        assert_eq!(g.d_cd[1], 1.0);
    }

    #[test]
    fn reciprocity_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = [0.0, 0.0, 1.0];
        for _ in 0..500 {
            let sample = |rng: &mut ChaCha8Rng| {
                let z: f64 = rng.gen_range(0.05..1.0);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                [r * phi.cos(), r * phi.sin(), z]
            };
            let wi = sample(&mut rng);
            let wo = sample(&mut rng);
            let alpha = rng.gen_range(0.05..1.5);
            let f0 = [rng.gen_range(0.01..0.99); 3];
            let a = brdf_eval(n, wi, wo, alpha, f0);
            let b = brdf_eval(n, wo, wi, alpha, f0);
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-12 * a[c].abs().max(1.0));
            }
        }
    }

    /// Central-difference checks for every analytic derivative in the module.
    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let h = 1e-6;
        let close = |a: f64, b: f64| (a - b).abs() < 1e-5 * (1.0 + a.abs().max(b.abs()));
        for _ in 0..200 {
            let cos: f64 = rng.gen_range(0.05..0.98);
            let alpha: f64 = rng.gen_range(0.05..1.4);
            let f0: f64 = rng.gen_range(0.02..0.9);

            let (_, dc, da) = ggx_d_grad(cos, alpha);
            assert!(close(dc, (ggx_d(cos + h, alpha) - ggx_d(cos - h, alpha)) / (2.0 * h)));
            assert!(close(da, (ggx_d(cos, alpha + h) - ggx_d(cos, alpha - h)) / (2.0 * h)));

            let (_, dc, da) = smith_g1_grad(cos, alpha);
            assert!(close(dc, (smith_g1(cos + h, alpha) - smith_g1(cos - h, alpha)) / (2.0 * h)));
            assert!(close(da, (smith_g1(cos, alpha + h) - smith_g1(cos, alpha - h)) / (2.0 * h)));

            let (_, dc, df) = fresnel_schlick_grad(cos, f0);
            assert!(close(
                dc,
                (fresnel_schlick(cos + h, f0) - fresnel_schlick(cos - h, f0)) / (2.0 * h)
            ));
            assert!(close(
                df,
                (fresnel_schlick(cos, f0 + h) - fresnel_schlick(cos, f0 - h)) / (2.0 * h)
            ));

            let a_stored: f64 = rng.gen_range(0.05..0.98);
            let (_, da) = roughness_remap_grad(a_stored).unwrap();
            let fd = (roughness_remap(a_stored + h).unwrap()
                - roughness_remap(a_stored - h).unwrap())
                / (2.0 * h);
            assert!(close(da, fd));
        }
    }

    #[test]
    fn weight_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let h = 1e-6;
        for _ in 0..100 {
            let cos: f64 = rng.gen_range(0.2..0.95);
            let alpha: f64 = rng.gen_range(0.3..1.2);
            let f0 = [
                rng.gen_range(0.02..0.9),
                rng.gen_range(0.02..0.9),
                rng.gen_range(0.02..0.9),
            ];
            let seed = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let score = |cos: f64, alpha: f64, f0: [f64; 3]| {
                let w = brdf_weight(cos, alpha, f0);
                w.value[0] * seed[0] + w.value[1] * seed[1] + w.value[2] * seed[2]
            };
            let cache = brdf_weight(cos, alpha, f0);
            assert!(!cache.clamped.iter().any(|&c| c), "keep away from clamp");
            let (dc, da, df) = brdf_weight_backward(&cache, seed);
            let close = |a: f64, b: f64| (a - b).abs() < 2e-5 * (1.0 + a.abs().max(b.abs()));
            assert!(close(dc, (score(cos + h, alpha, f0) - score(cos - h, alpha, f0)) / (2.0 * h)));
            assert!(close(da, (score(cos, alpha + h, f0) - score(cos, alpha - h, f0)) / (2.0 * h)));
            for c in 0..3 {
                let mut fp = f0;
                let mut fm = f0;
                fp[c] += h;
                fm[c] -= h;
                assert!(close(df[c], (score(cos, alpha, fp) - score(cos, alpha, fm)) / (2.0 * h)));
            }

            // Transmission side.
            let gamma = true;
            let score_t = |cos: f64, f0: [f64; 3]| {
                let w = btdf_weight(cos, f0, gamma);
                w.value[0] * seed[0] + w.value[1] * seed[1] + w.value[2] * seed[2]
            };
            let cache_t = btdf_weight(cos, f0, gamma);
            let (dc, df) = btdf_weight_backward(&cache_t, seed);
            assert!(close(dc, (score_t(cos + h, f0) - score_t(cos - h, f0)) / (2.0 * h)));
            for c in 0..3 {
                let mut fp = f0;
                let mut fm = f0;
                fp[c] += h;
                fm[c] -= h;
                assert!(close(df[c], (score_t(cos, fp) - score_t(cos, fm)) / (2.0 * h)));
            }
        }
    }

    #[test]
    fn compose_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = 1e-6;
        for _ in 0..50 {
            let mut v = [0.0f64; 16];
            for x in &mut v {
                *x = rng.gen_range(0.0..1.0);
            }
            let seed = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let unpack = |v: &[f64; 16]| {
                (
                    [v[0], v[1], v[2]],
                    v[3],
                    [v[4], v[5], v[6]],
                    [v[7], v[8], v[9]],
                    [v[10], v[11], v[12]],
                    [v[13], v[14], v[15]],
                )
            };
            let score = |v: &[f64; 16]| {
                let (cd, ks, wr, cr, wt, ct) = unpack(v);
                let out = compose_final(cd, ks, wr, cr, wt, ct);
                out[0] * seed[0] + out[1] * seed[1] + out[2] * seed[2]
            };
            let (cd, ks, wr, cr, wt, ct) = unpack(&v);
            let g = compose_final_backward(cd, ks, wr, cr, wt, ct, seed);
            let analytic = [
                g.d_cd[0], g.d_cd[1], g.d_cd[2], g.d_ks, g.d_wr[0], g.d_wr[1], g.d_wr[2],
                g.d_cr[0], g.d_cr[1], g.d_cr[2], g.d_wt[0], g.d_wt[1], g.d_wt[2], g.d_ct[0],
                g.d_ct[1], g.d_ct[2],
            ];
            for i in 0..16 {
                let mut vp = v;
                let mut vm = v;
                vp[i] += h;
                vm[i] -= h;
                let fd = (score(&vp) - score(&vm)) / (2.0 * h);
                assert!(
                    (fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "slot {i}: fd {fd} vs {a}",
                    a = analytic[i]
                );
            }
        }
    }

    /// White-furnace style check: D integrates to 1 against the projected
    /// solid angle over the hemisphere. Stratified-jittered samples keep the
    /// variance low enough for the sharp low-roughness lobes.
    #[test]
    fn ggx_normalization_monte_carlo() {
        for alpha in [0.1, 0.3, 0.7, 1.0] {
            let integral = ggx_projected_integral(alpha, 100_000, 99);
            assert!(
                (integral - 1.0).abs() < 0.02,
                "alpha {alpha}: integral {integral}"
            );
        }
    }
}
