use serde::Serialize;

/// The 16 NF4 levels in ascending order, from −1 to +1 with an exact 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Nf4Codebook {
    pub values: [f64; 16],
}

impl Nf4Codebook {
    pub fn zero_index(&self) -> usize {
        self.values.iter().position(|&v| v == 0.0).expect("codebook contains 0")
    }

    /// Index of the nearest level; ties go to the lower index.
    pub fn nearest(&self, x: f64) -> usize {
        // Levels are sorted, so the nearest one is adjacent to the insertion
        // point.
        let hi = self.values.partition_point(|&v| v < x);
        if hi == 0 {
            return 0;
        }
        if hi == 16 {
            return 15;
        }
        let lo = hi - 1;
        if x - self.values[lo] <= self.values[hi] - x {
            lo
        } else {
            hi
        }
    }

    /// Widest gap between adjacent levels.
    pub fn max_gap(&self) -> f64 {
        self.values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Builds the NF4 levels: normal quantiles at evenly spaced probabilities
/// between `offset` and 1/2 on each side, normalized to ±1.
///
/// `offset = 1 − (1/30 + 1/32)/2`. The positive side uses 8 quantiles of
/// `linspace(offset, 0.5, 9)` (dropping 0.5) and the negative side 7 of
/// `linspace(offset, 0.5, 8)`, so the half with more levels is positive.
pub fn build_nf4_codebook() -> Nf4Codebook {
    let offset = 1.0 - 0.5 * (1.0 / 30.0 + 1.0 / 32.0);
    let side = |count: usize| -> Vec<f64> {
        (0..count)
            .map(|i| {
                let p = offset + (0.5 - offset) * i as f64 / count as f64;
                inverse_normal_cdf(p)
            })
            .collect()
    };
    let pos = side(8);
    let neg = side(7);
    let mut v: Vec<f64> = neg.iter().map(|x| -x).collect();
    v.push(0.0);
    v.extend(pos);
    v.sort_by(|a, b| a.total_cmp(b));
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut values = [0.0; 16];
    for (dst, x) in values.iter_mut().zip(&v) {
        *dst = x / max;
    }
    // The outermost quantiles are the same on both sides, so they map to
    // exactly ±1.
    values[0] = -1.0;
    values[15] = 1.0;
    Nf4Codebook { values }
}

/// Standard normal quantile function.
///
/// Rational approximation (relative error about 1e-9) followed by one Halley
/// step against the erfc-based CDF.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability {p} outside (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.38357751867269e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549671010243084,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let low = 0.02425;
    let x = if p < low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}
