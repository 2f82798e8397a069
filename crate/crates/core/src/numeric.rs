//! Scalar helpers shared by the kernels.

/// Correctly rounded sum of a sequence of finite floats.
///
/// Shewchuk's partials algorithm with round-half-even on the final
/// collapse. Because the result is the exact sum rounded once, it does not
/// depend on the order of the inputs. Attention uses it for reductions over
/// the key axis so that reordering face blocks cannot change a single bit of
/// the output.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut inline = [0.0f64; INLINE_PARTIALS];
    let mut spill: Vec<f64> = Vec::new();
    let mut len = 0usize;
    for mut x in values {
        let partials: &mut [f64] = if spill.is_empty() { &mut inline[..len] } else { &mut spill[..] };
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        if spill.is_empty() && kept < INLINE_PARTIALS {
            inline[kept] = x;
            len = kept + 1;
        } else {
            if spill.is_empty() {
                spill.extend_from_slice(&inline[..kept]);
            } else {
                spill.truncate(kept);
            }
            spill.push(x);
        }
    }
    let partials: &[f64] = if spill.is_empty() { &inline[..len] } else { &spill };
    round_partials(partials)
}

const INLINE_PARTIALS: usize = 32;

/// Correctly rounded value of non-overlapping partials sorted by magnitude.
fn round_partials(partials: &[f64]) -> f64 {
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid-weighted linear unit, `x * sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
