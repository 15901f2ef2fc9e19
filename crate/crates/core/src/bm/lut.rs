use crate::error::{Error, Result};
use crate::tensor::{Activations, NEG_INF};

/// Quantized `exp`/`ln` pair for inference.
///
/// `exp` uses `n_bins` uniform bins over `[-range, range]`, each holding the
/// value at the bin midpoint. `ln` splits its argument into binary exponent
/// and mantissa; the mantissa `[1, 2)` is quantized into `n_bins` midpoint
/// bins and the exponent contributes a table entry `e·ln 2`, so the table has
/// uniform relative resolution over `(0, exp(range)]`. Inputs outside either
/// domain clamp to the endpoints; `ln(0)` is `NEG_INF`.
#[derive(Clone, Debug)]
pub struct ExpLnLut {
    range: f64,
    exp_table: Vec<f64>,
    exp_scale: f64,
    ln_mantissa: Vec<f64>,
    ln_exponent: Vec<f64>,
    ln_max: f64,
    ln_min: f64,
}

const EXP_BIAS: i64 = 1023;

impl ExpLnLut {
    pub fn new(n_bins: usize, range: f64) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Invalid(format!("LUT needs at least 2 bins, got {n_bins}")));
        }
        if !(range.is_finite() && range > 0.0 && range < 700.0) {
            return Err(Error::Invalid(format!("LUT range {range} must be in (0, 700)")));
        }
        let width = 2.0 * range / n_bins as f64;
        let exp_table = (0..n_bins)
            .map(|i| (-range + (i as f64 + 0.5) * width).exp())
            .collect();
        let mwidth = 1.0 / n_bins as f64;
        let ln_mantissa = (0..n_bins)
            .map(|i| (1.0 + (i as f64 + 0.5) * mwidth).ln())
            .collect();
        let ln_exponent = (0..2048)
            .map(|e| (e as i64 - EXP_BIAS) as f64 * std::f64::consts::LN_2)
            .collect();
        Ok(Self {
            range,
            exp_table,
            exp_scale: 1.0 / width,
            ln_mantissa,
            ln_exponent,
            ln_max: range,
            ln_min: -range,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.exp_table.len()
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn exp(&self, x: f64) -> f64 {
        if x == NEG_INF {
            return 0.0;
        }
        let n = self.exp_table.len();
        let t = ((x.clamp(-self.range, self.range) + self.range) * self.exp_scale) as usize;
        self.exp_table[t.min(n - 1)]
    }

    pub fn ln(&self, x: f64) -> f64 {
        if x == 0.0 {
            return NEG_INF;
        }
        debug_assert!(x > 0.0, "ln LUT on negative input {x}");
        let bits = x.to_bits();
        let biased = ((bits >> 52) & 0x7ff) as usize;
        if biased == 0 {
            // subnormal: far below exp(-range)
            return self.ln_min;
        }
        let n = self.ln_mantissa.len();
        // top mantissa bits select the bin: (frac * n) without a multiply when n is a power of two
        let frac_bits = bits & ((1u64 << 52) - 1);
        let bin = if n.is_power_of_two() {
            (frac_bits >> (52 - n.trailing_zeros().min(52))) as usize
        } else {
            ((frac_bits as f64 / (1u64 << 52) as f64) * n as f64) as usize
        };
        let v = self.ln_exponent[biased] + self.ln_mantissa[bin.min(n - 1)];
        v.clamp(self.ln_min, self.ln_max)
    }
}

impl Activations for ExpLnLut {
    fn exp(&self, x: f64) -> f64 {
        ExpLnLut::exp(self, x)
    }

    fn ln(&self, x: f64) -> f64 {
        ExpLnLut::ln(self, x)
    }
}
