//! Normal-distribution numerics for the latent-liability estimators:
//! bivariate orthant probabilities, truncated first and second moments,
//! and tetrachoric correlation.
//!
//! Quadrant moments use the closed-form reductions of the truncated
//! bivariate normal to univariate normal functions and one bivariate
//! orthant probability, computed with Genz's Drezner-Wesolowsky variant.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Quadrant mass below which conditional moments are undefined.
pub const QUADRANT_FLOOR: f64 = 1e-12;
/// Tail mass below which univariate truncated moments are undefined.
pub const TAIL_FLOOR: f64 = 1e-15;
/// Distance from +-1 at which tetrachoric estimates are clamped.
pub const TETRACHORIC_BOUNDARY: f64 = 1e-6;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `P(X > x)`.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        -SQRT_2 * erfc_inv(2.0 * p)
    }
}

// Gauss-Legendre (weight, abscissa) pairs on [-1, 0]; the rule is
// applied symmetrically.
const GL6: [(f64, f64); 3] = [
    (0.171_324_492_379_170_5, -0.932_469_514_203_152_2),
    (0.360_761_573_048_138_4, -0.661_209_386_466_264_7),
    (0.467_913_934_572_691, -0.238_619_186_083_197),
];
const GL12: [(f64, f64); 6] = [
    (0.047_175_336_386_511_77, -0.981_560_634_246_719_1),
    (0.106_939_325_995_318_3, -0.904_117_256_370_475),
    (0.160_078_328_543_346_4, -0.769_902_674_194_305),
    (0.203_167_426_723_065_9, -0.587_317_954_286_617_1),
    (0.233_492_536_538_354_7, -0.367_831_498_998_180_2),
    (0.249_147_045_813_402_9, -0.125_233_408_511_469_2),
];
const GL20: [(f64, f64); 10] = [
    (0.017_614_007_139_152_12, -0.993_128_599_185_094_9),
    (0.040_601_429_800_386_94, -0.963_971_927_277_913_8),
    (0.062_672_048_334_109_06, -0.912_234_428_251_326),
    (0.083_276_741_576_704_75, -0.839_116_971_822_218_8),
    (0.101_930_119_817_240_4, -0.746_331_906_460_150_8),
    (0.118_194_531_961_518_4, -0.636_053_680_726_515),
    (0.131_688_638_449_176_6, -0.510_867_001_950_827_1),
    (0.142_096_109_318_382_1, -0.373_706_088_715_419_6),
    (0.149_172_986_472_603_7, -0.227_785_851_141_645_1),
    (0.152_753_387_130_725_9, -0.076_526_521_133_497_33),
];

/// `P(X > h, Y > k)` for a standard bivariate normal with correlation `r`.
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if r >= 1.0 {
        return norm_sf(h.max(k));
    }
    if r <= -1.0 {
        return (norm_cdf(-k) - norm_cdf(h)).max(0.0);
    }
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let hk = h * k;
    if r.abs() < 0.925 {
        let mut bvn = 0.0;
        if r != 0.0 {
            let hs = 0.5 * (h * h + k * k);
            let asr = r.asin();
            for &(w, x) in quad {
                for sgn in [-1.0, 1.0] {
                    let sn = (0.5 * asr * (sgn * x + 1.0)).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / (4.0 * PI);
        }
        return bvn + norm_sf(h) * norm_sf(k);
    }

    let (h, k, hk) = if r < 0.0 { (h, -k, -hk) } else { (h, k, hk) };
    let mut bvn = 0.0;
    let as_ = (1.0 - r) * (1.0 + r);
    let mut a = as_.sqrt();
    let bs = (h - k) * (h - k);
    let c = (4.0 - hk) / 8.0;
    let d = (12.0 - hk) / 16.0;
    let asr = -0.5 * (bs / as_ + hk);
    if asr > -100.0 {
        bvn = a * asr.exp() * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
    }
    if -hk < 100.0 {
        let b = bs.sqrt();
        bvn -=
            (-0.5 * hk).exp() * (2.0 * PI).sqrt() * norm_cdf(-b / a) * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
    }
    a *= 0.5;
    for &(w, x) in quad {
        for sgn in [-1.0, 1.0] {
            let xs = (a * (sgn * x + 1.0)).powi(2);
            let rs = (1.0 - xs).sqrt();
            let asr = -0.5 * (bs / xs + hk);
            if asr > -100.0 {
                bvn += a
                    * w
                    * asr.exp()
                    * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
            }
        }
    }
    bvn = -bvn / (2.0 * PI);
    if r > 0.0 {
        bvn + norm_sf(h.max(k))
    } else {
        -bvn + (norm_sf(h) - norm_sf(k)).max(0.0)
    }
}

/// Standard bivariate normal density.
pub fn bvn_pdf(x: f64, y: f64, r: f64) -> f64 {
    let s2 = 1.0 - r * r;
    (-(x * x - 2.0 * r * x * y + y * y) / (2.0 * s2)).exp() / (2.0 * PI * s2.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateParams {
    pub mu1: f64,
    pub mu2: f64,
    pub s1: f64,
    pub s2: f64,
    pub corr: f64,
}

impl BivariateParams {
    pub fn new(mu1: f64, mu2: f64, s1: f64, s2: f64, corr: f64) -> Result<Self> {
        let p = BivariateParams { mu1, mu2, s1, s2, corr };
        p.validate()?;
        Ok(p)
    }

    pub fn standard(corr: f64) -> Self {
        BivariateParams {
            mu1: 0.0,
            mu2: 0.0,
            s1: 1.0,
            s2: 1.0,
            corr,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.mu1.is_finite()
            && self.mu2.is_finite()
            && self.s1 > 0.0
            && self.s2 > 0.0
            && self.s1.is_finite()
            && self.s2.is_finite()
            && self.corr.abs() <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid bivariate parameters {self:?}")))
        }
    }
}

/// Integration region of one coordinate relative to the threshold 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Positive,
    Negative,
    Free,
}

impl Region {
    pub fn from_bit(z: bool) -> Self {
        if z {
            Region::Positive
        } else {
            Region::Negative
        }
    }
}

pub type QuadrantSpec = [Region; 2];

/// `P((Y1, Y2) in region)`, with `Free` coordinates marginalised.
pub fn bvn_rectangle_prob(p: &BivariateParams, q: QuadrantSpec) -> Result<f64> {
    p.validate()?;
    let h1 = -p.mu1 / p.s1;
    let h2 = -p.mu2 / p.s2;
    let uni = |region: Region, h: f64| match region {
        Region::Positive => norm_sf(h),
        Region::Negative => norm_cdf(h),
        Region::Free => 1.0,
    };
    match q {
        [Region::Free, r] => Ok(uni(r, h2)),
        [r, Region::Free] => Ok(uni(r, h1)),
        [a, b] => {
            let sa = if a == Region::Positive { 1.0 } else { -1.0 };
            let sb = if b == Region::Positive { 1.0 } else { -1.0 };
            Ok(bvn_upper(sa * h1, sb * h2, sa * sb * p.corr))
        }
    }
}

/// Moments of a standard normal restricted to `(a, b)`:
/// `(mass, E[X], E[X^2])`.
fn interval_moments(a: f64, b: f64) -> (f64, f64, f64) {
    let mass = if a > 0.0 {
        norm_sf(a) - norm_sf(b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    };
    let (pa, pb) = (norm_pdf(a), norm_pdf(b));
    let apa = if a.is_finite() { a * pa } else { 0.0 };
    let bpb = if b.is_finite() { b * pb } else { 0.0 };
    let m1 = (pa - pb) / mass;
    let m2 = 1.0 + (apa - bpb) / mass;
    (mass, m1, m2)
}

/// `E[Y | Z = z]` and `E[Y^2 | Z = z]` for `Y ~ N(mu, var)` and
/// `Z = 1{Y > 0}`.
pub fn trunc_uni_moments(mu: f64, var: f64, z: bool) -> Result<(f64, f64)> {
    if !(var > 0.0 && var.is_finite() && mu.is_finite()) {
        return Err(Error::Domain(format!("invalid normal parameters mu={mu}, var={var}")));
    }
    let s = var.sqrt();
    // reflect so the kept side is always y > 0
    let sign = if z { 1.0 } else { -1.0 };
    let m = sign * mu;
    let alpha = -m / s;
    let tail = norm_sf(alpha);
    if tail < TAIL_FLOOR {
        return Err(Error::Underflow {
            what: format!("truncated normal mu={mu}, var={var}, z={}", z as u8),
            mass: tail,
        });
    }
    let lambda = norm_pdf(alpha) / tail;
    let mean = m + s * lambda;
    let variance = var * (1.0 + alpha * lambda - lambda * lambda).max(0.0);
    Ok((sign * mean, variance + mean * mean))
}

/// Orthant moments of a standard bivariate normal on `X1 > h1, X2 > h2`:
/// `(mass, E[X1|.], E[X2|.], E[X1 X2|.])`.
fn upper_orthant_moments(h1: f64, h2: f64, r: f64) -> Result<(f64, f64, f64, f64)> {
    if 1.0 - r.abs() < 1e-12 {
        // degenerate: X2 = sign(r) X1
        let (a, b) = if r > 0.0 {
            (h1.max(h2), f64::INFINITY)
        } else {
            (h1, -h2)
        };
        if a >= b {
            return Err(Error::Underflow {
                what: "degenerate quadrant is empty".into(),
                mass: 0.0,
            });
        }
        let (mass, m1, m2) = interval_moments(a, b);
        if mass < QUADRANT_FLOOR {
            return Err(Error::Underflow {
                what: "degenerate quadrant".into(),
                mass,
            });
        }
        let sgn = r.signum();
        return Ok((mass, m1, sgn * m1, sgn * m2));
    }
    let mass = bvn_upper(h1, h2, r);
    if mass < QUADRANT_FLOOR {
        return Err(Error::Underflow {
            what: format!("bivariate quadrant h=({h1:.3},{h2:.3}), corr={r:.4}"),
            mass,
        });
    }
    let s = (1.0 - r * r).sqrt();
    let (p1, p2) = (norm_pdf(h1), norm_pdf(h2));
    let q21 = norm_sf((h2 - r * h1) / s);
    let q12 = norm_sf((h1 - r * h2) / s);
    let e1 = p1 * q21 + r * p2 * q12;
    let e2 = p2 * q12 + r * p1 * q21;
    let joint = (1.0 - r * r) * bvn_pdf(h1, h2, r);
    let e12 = r * mass + r * h1 * p1 * q21 + r * h2 * p2 * q12 + joint;
    Ok((mass, e1 / mass, e2 / mass, e12 / mass))
}

/// `(E[Y1|.], E[Y2|.], E[Y1 Y2|.])` conditional on the quadrant selected by
/// `(Z1, Z2) = (z1, z2)` with `Z = 1{Y > 0}`.
pub fn trunc_biv_moments(p: &BivariateParams, z1: bool, z2: bool) -> Result<(f64, f64, f64)> {
    p.validate()?;
    let a = if z1 { 1.0 } else { -1.0 };
    let b = if z2 { 1.0 } else { -1.0 };
    // W = (a Y1, b Y2) lives on the upper orthant
    let (m1, m2) = (a * p.mu1, b * p.mu2);
    let r = a * b * p.corr;
    let (_, x1, x2, x12) = upper_orthant_moments(-m1 / p.s1, -m2 / p.s2, r)?;
    let w1 = m1 + p.s1 * x1;
    let w2 = m2 + p.s2 * x2;
    let w12 = m1 * m2 + m1 * p.s2 * x2 + m2 * p.s1 * x1 + p.s1 * p.s2 * x12;
    Ok((a * w1, b * w2, a * b * w12))
}

/// `(E[Y1|Z2], E[Y2|Z2], E[Y1 Y2|Z2])` with `Y1` unrestricted.
pub fn trunc_cross_moments_halfplane(p: &BivariateParams, z2: bool) -> Result<(f64, f64, f64)> {
    p.validate()?;
    let (e2, e22) = trunc_uni_moments(p.mu2, p.s2 * p.s2, z2)?;
    let slope = p.corr * p.s1 / p.s2;
    let e1 = p.mu1 + slope * (e2 - p.mu2);
    let e12 = p.mu1 * e2 + slope * (e22 - p.mu2 * e2);
    Ok((e1, e2, e12))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TetrachoricEstimate {
    pub corr: f64,
    /// Set when the table forces the estimate onto the boundary.
    pub boundary: bool,
}

/// Tetrachoric correlation of a 2x2 table `counts[z1][z2]`, with
/// thresholds fixed at the marginal proportions.
pub fn tetrachoric_corr(counts: [[f64; 2]; 2]) -> Result<TetrachoricEstimate> {
    if counts.iter().flatten().any(|&c| !(c >= 0.0 && c.is_finite())) {
        return Err(Error::Domain("table counts must be finite and non-negative".into()));
    }
    let n: f64 = counts.iter().flatten().sum();
    let row1 = counts[1][0] + counts[1][1];
    let col1 = counts[0][1] + counts[1][1];
    if row1 <= 0.0 || row1 >= n || col1 <= 0.0 || col1 >= n {
        return Err(Error::Domain("tetrachoric correlation needs positive margins".into()));
    }
    let edge = 1.0 - TETRACHORIC_BOUNDARY;
    if counts[0][1] == 0.0 || counts[1][0] == 0.0 {
        return Ok(TetrachoricEstimate {
            corr: edge,
            boundary: true,
        });
    }
    if counts[0][0] == 0.0 || counts[1][1] == 0.0 {
        return Ok(TetrachoricEstimate {
            corr: -edge,
            boundary: true,
        });
    }
    let t1 = norm_quantile(1.0 - row1 / n);
    let t2 = norm_quantile(1.0 - col1 / n);
    let target = counts[1][1] / n;
    // P(X1 > t1, X2 > t2) is increasing in the correlation
    let f = |r: f64| bvn_upper(t1, t2, r) - target;
    let (mut lo, mut hi) = (-edge, edge);
    if f(lo) >= 0.0 {
        return Ok(TetrachoricEstimate {
            corr: lo,
            boundary: true,
        });
    }
    if f(hi) <= 0.0 {
        return Ok(TetrachoricEstimate {
            corr: hi,
            boundary: true,
        });
    }
    let mut r = 0.0;
    for _ in 0..200 {
        let fr = f(r);
        if fr.abs() < 1e-15 {
            break;
        }
        if fr > 0.0 {
            hi = r;
        } else {
            lo = r;
        }
        let step = fr / bvn_pdf(t1, t2, r);
        let mut next = r - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - r).abs() < 1e-14 {
            r = next;
            break;
        }
        r = next;
    }
    Ok(TetrachoricEstimate {
        corr: r,
        boundary: false,
    })
}
