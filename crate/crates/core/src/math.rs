//! Float helpers that `core` does not provide without `std`.

#[inline]
pub(crate) fn round_half_away(x: f32) -> f32 {
    // libm::roundf rounds half away from zero.
    libm::roundf(x)
}

#[inline]
pub(crate) fn absf(x: f32) -> f32 {
    libm::fabsf(x)
}

#[inline]
pub(crate) fn sqrt64(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub(crate) fn exp64(x: f64) -> f64 {
    libm::exp(x)
}

/// Dot product of two equal-length slices with 64-bit accumulation.
///
/// Eight independent lanes keep the loop vectorizable while the summation
/// order stays fixed, so the result is identical on every platform.
pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Sum with 64-bit accumulation, same lane layout as [`dot_f64`].
pub(crate) fn sum_f64(a: &[f32]) -> f64 {
    let mut lanes = [0f64; 8];
    let c = a.chunks_exact(8);
    let r = c.remainder();
    for x in c {
        for l in 0..8 {
            lanes[l] += x[l] as f64;
        }
    }
    let mut tail = 0f64;
    for x in r {
        tail += *x as f64;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// Population mean and standard deviation with 64-bit accumulation.
pub(crate) fn mean_std(a: &[f32]) -> (f64, f64) {
    if a.is_empty() {
        return (0.0, 0.0);
    }
    let n = a.len() as f64;
    let mean = sum_f64(a) / n;
    let mut lanes = [0f64; 4];
    let c = a.chunks_exact(4);
    let r = c.remainder();
    for x in c {
        for l in 0..4 {
            let d = x[l] as f64 - mean;
            lanes[l] += d * d;
        }
    }
    let mut tail = 0f64;
    for x in r {
        let d = *x as f64 - mean;
        tail += d * d;
    }
    let var = ((lanes[0] + lanes[2]) + (lanes[1] + lanes[3]) + tail) / n;
    (mean, sqrt64(var))
}
