//! Adaptive Gauss–Kronrod (7/15) quadrature on finite intervals.

use crate::error::{numerical, Result};

#[allow(clippy::excessive_precision)]
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
#[allow(clippy::excessive_precision)]
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
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Integrate `f` over `[a, b]` to absolute error `abs_tol` or relative error
/// `rel_tol`, whichever is looser. Fails with the offending interval if the
/// subdivision budget runs out.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (total, err) = kronrod(&f, a, b);
    let mut segments = vec![(a, b, total, err)];
    let mut total = total;
    let mut err = err;
    for _ in 0..2000 {
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        // split the segment with the largest error estimate
        let (idx, _) = segments.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, s)| if s.3 > best.1 { (i, s.3) } else { best });
        let (lo, hi, val, e) = segments.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = kronrod(&f, lo, mid);
        let (v2, e2) = kronrod(&f, mid, hi);
        total += v1 + v2 - val;
        err += e1 + e2 - e;
        segments.push((lo, mid, v1, e1));
        segments.push((mid, hi, v2, e2));
    }
    if err <= abs_tol.max(rel_tol * total.abs()) {
        return Ok(total);
    }
    let worst = segments.iter().max_by(|x, y| x.3.total_cmp(&y.3)).map(|s| (s.0, s.1)).unwrap_or((a, b));
    Err(numerical(format!(
        "quadrature on [{a}, {b}] did not converge (error estimate {err:.3e}, worst interval [{:.6}, {:.6}])",
        worst.0, worst.1
    )))
}

/// [`integrate`] over consecutive pieces `[pts[i], pts[i+1]]`; use when the
/// integrand is sharply peaked at a known location.
pub fn integrate_pieces<F: Fn(f64) -> f64>(f: F, pts: &[f64], abs_tol: f64, rel_tol: f64) -> Result<f64> {
    let mut total = 0.0;
    for w in pts.windows(2) {
        total += integrate(&f, w[0], w[1], abs_tol / (pts.len() as f64), rel_tol)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_and_smooth_functions() {
        let v = integrate(|x| x.powi(6), -1.0, 1.0, 1e-14, 1e-14).unwrap();
        assert!((v - 2.0 / 7.0).abs() < 1e-14);
        let v = integrate(f64::exp, 0.0, 3.0, 1e-13, 1e-13).unwrap();
        assert!((v - (3f64.exp() - 1.0)).abs() < 1e-11);
    }

    #[test]
    fn endpoint_singularity() {
        // ∫_0^1 x^{-1/2} dx = 2
        let v = integrate(|x: f64| 1.0 / x.sqrt(), 0.0, 1.0, 1e-9, 1e-9).unwrap();
        assert!((v - 2.0).abs() < 1e-8);
    }
}
