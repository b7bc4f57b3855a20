//! Quadrature rules: adaptive Gauss–Kronrod on intervals, fixed rules on
//! edges and triangles.

use crate::scalar::Real;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// One Kronrod-15 panel; returns (K15 estimate, |K15 - G7|).
fn gk15<T: Real, F: Fn(T) -> T>(f: &F, a: T, b: T) -> (T, T) {
    let half = (b - a) * T::lit(0.5);
    let mid = (a + b) * T::lit(0.5);
    let fc = f(mid);
    let mut kron = fc * T::lit(WGK[7]);
    let mut gauss = fc * T::lit(WG[3]);
    for j in 0..7 {
        let dx = half * T::lit(XGK[j]);
        let s = f(mid - dx) + f(mid + dx);
        kron += s * T::lit(WGK[j]);
        if j % 2 == 1 {
            gauss += s * T::lit(WG[j / 2]);
        }
    }
    (kron * half, ((kron - gauss) * half).abs())
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]` to relative
/// tolerance `rel_tol` (clamped to the scalar's resolution).
pub fn integrate<T: Real, F: Fn(T) -> T>(f: F, a: T, b: T, rel_tol: f64) -> T {
    if a == b {
        return T::zero();
    }
    let tol = T::tol(rel_tol);
    // Coarse estimate of the total magnitude sets the absolute target.
    let panels = 4;
    let width = (b - a) / T::of_usize(panels);
    let mut stack: Vec<(T, T, T, T, usize)> = Vec::with_capacity(64);
    let mut scale = T::zero();
    for i in 0..panels {
        let lo = a + width * T::of_usize(i);
        let hi = if i + 1 == panels { b } else { lo + width };
        let (k, e) = gk15(&f, lo, hi);
        scale += k.abs();
        stack.push((lo, hi, k, e, 0));
    }
    let abs_tol = tol * scale.max(T::min_positive_value());
    let total_len = (b - a).abs();
    let mut sum = T::zero();
    while let Some((lo, hi, k, e, depth)) = stack.pop() {
        let share = abs_tol * (hi - lo).abs() / total_len;
        if e <= share || depth >= 40 {
            sum += k;
            continue;
        }
        let mid = (lo + hi) * T::lit(0.5);
        let (k1, e1) = gk15(&f, lo, mid);
        let (k2, e2) = gk15(&f, mid, hi);
        stack.push((lo, mid, k1, e1, depth + 1));
        stack.push((mid, hi, k2, e2, depth + 1));
    }
    sum
}

/// Three-point Gauss rule on `[0, 1]`: (abscissa, weight).
pub fn gauss3_unit<T: Real>() -> [(T, T); 3] {
    let d = T::lit(0.5 * (0.6f64).sqrt());
    let h = T::lit(0.5);
    [
        (h - d, T::lit(5.0 / 18.0)),
        (h, T::lit(8.0 / 18.0)),
        (h + d, T::lit(5.0 / 18.0)),
    ]
}

/// Seven-point Gauss rule on `[0, 1]` (the Gauss nodes of the Kronrod pair).
pub fn gauss7_unit<T: Real>() -> [(T, T); 7] {
    let mut out = [(T::zero(), T::zero()); 7];
    for (i, j) in [1usize, 3, 5].into_iter().enumerate() {
        let x = 0.5 * XGK[j];
        let w = 0.5 * WG[i];
        out[2 * i] = (T::lit(0.5 - x), T::lit(w));
        out[2 * i + 1] = (T::lit(0.5 + x), T::lit(w));
    }
    out[6] = (T::lit(0.5), T::lit(0.5 * WG[3]));
    out
}

/// Rule on `[0, 1]` for integrands with a `log²` singularity at 0: the
/// seven-point Gauss rule after the substitution `t = τ³`.
pub fn graded_log_unit<T: Real>() -> [(T, T); 7] {
    let mut out = gauss7_unit::<T>();
    let three = T::lit(3.0);
    for (x, w) in out.iter_mut() {
        let tau = *x;
        *x = tau * tau * tau;
        *w = *w * three * tau * tau;
    }
    out
}

/// Six-point degree-4 rule on the reference triangle: barycentric
/// coordinates and weights summing to one (multiply by the area).
pub fn triangle6<T: Real>() -> [([T; 3], T); 6] {
    let a1 = 0.445_948_490_915_965;
    let w1 = 0.223_381_589_678_011;
    let a2 = 0.091_576_213_509_771;
    let w2 = 0.109_951_743_655_322;
    let p = |a: f64, w: f64| -> [([T; 3], T); 3] {
        let b = 1.0 - 2.0 * a;
        [
            ([T::lit(a), T::lit(a), T::lit(b)], T::lit(w)),
            ([T::lit(a), T::lit(b), T::lit(a)], T::lit(w)),
            ([T::lit(b), T::lit(a), T::lit(a)], T::lit(w)),
        ]
    };
    let q1 = p(a1, w1);
    let q2 = p(a2, w2);
    [q1[0], q1[1], q1[2], q2[0], q2[1], q2[2]]
}
