use super::{int_range, QuantParams};
use crate::error::{Error, Result};

/// Smallest scale a quantizer may take.
pub const SCALE_FLOOR: f32 = 1e-8;

fn finite_bounds(samples: &[f32]) -> Result<(f32, f32)> {
    if samples.is_empty() {
        return Err(Error::Empty("quantizer calibration samples"));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (i, &v) in samples.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: "calibration sample".into(),
            });
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok((lo, hi))
}

fn params_for_range(lo: f32, hi: f32, bits: u8, signed: bool) -> Result<QuantParams> {
    let (qmin, qmax) = int_range(bits, signed);
    let span = (qmax - qmin) as f32;
    let (scale, zero) = if hi - lo <= SCALE_FLOOR * span {
        // degenerate range: floor the scale and put the value mid-grid
        let mid = ((qmin + qmax) as f32 / 2.0).round();
        (SCALE_FLOOR, (mid - lo / SCALE_FLOOR).round())
    } else {
        let s = (hi - lo) / span;
        (s, (qmin as f32 - lo / s).round())
    };
    let zero = zero.clamp(qmin as f32, qmax as f32) as i32;
    QuantParams::new(scale, zero, bits, signed)
}

/// Min-max initialization: the grid spans exactly `[min, max]` of the
/// samples.
pub fn init_minmax(samples: &[f32], bits: u8, signed: bool) -> Result<QuantParams> {
    let (lo, hi) = finite_bounds(samples)?;
    params_for_range(lo, hi, bits, signed)
}

fn round_trip_mse(samples: &[f32], p: &QuantParams) -> f64 {
    let s: f64 = samples
        .iter()
        .map(|&x| {
            let d = (p.fake_quant_value(x) - x) as f64;
            d * d
        })
        .sum();
    s / samples.len() as f64
}

/// Clip-ratio search over `r ∈ {1, 1 - 1/grid, …, 1/grid}` applied to the
/// min-max range. Returns the candidate with the lowest round-trip MSE;
/// ties keep the larger ratio.
pub fn init_mse_search(
    samples: &[f32],
    bits: u8,
    signed: bool,
    grid: usize,
) -> Result<QuantParams> {
    if grid < 2 {
        return Err(Error::Contract(format!(
            "clip search grid must be >= 2, got {grid}"
        )));
    }
    let (lo, hi) = finite_bounds(samples)?;
    let mut best = params_for_range(lo, hi, bits, signed)?;
    let mut best_err = round_trip_mse(samples, &best);
    for i in 1..grid {
        let r = 1.0 - i as f32 / grid as f32;
        let cand = params_for_range(lo * r, hi * r, bits, signed)?;
        let err = round_trip_mse(samples, &cand);
        if err < best_err {
            best = cand;
            best_err = err;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn exact_fit_unsigned() {
        let samples: Vec<f32> = (0..=15).map(|v| v as f32).collect();
        let p = init_minmax(&samples, 4, false).unwrap();
        assert_eq!(p.scale, 1.0);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn degenerate_input_floors_scale() {
        let p = init_minmax(&[0.0; 10], 4, true).unwrap();
        assert_eq!(p.scale, SCALE_FLOOR);
        // mid-grid of [-8, 7] rounds to -1 (half away from zero of -0.5)
        assert_eq!(p.zero_point, -1);
        assert_eq!(p.fake_quant_value(0.0), 0.0);

        let p = init_minmax(&[3e-8; 4], 8, false).unwrap();
        assert_eq!(p.scale, SCALE_FLOOR);
        assert!((p.fake_quant_value(3e-8) - 3e-8).abs() < 1e-9);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        assert!(matches!(init_minmax(&[], 4, true), Err(Error::Empty(_))));
        assert!(matches!(
            init_minmax(&[1.0, f32::NAN], 4, true),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(init_mse_search(&[1.0], 4, true, 1).is_err());
    }

    #[test]
    fn minmax_scale_beats_doubled_and_halved_scales() {
        let x = normals(10_000, 3);
        let p = init_minmax(&x, 8, true).unwrap();
        let base = round_trip_mse(&x, &p);
        for k in [0.5f32, 2.0] {
            let alt = p.with_scale(p.scale * k);
            assert!(base < round_trip_mse(&x, &alt), "scale x{k}");
        }
    }

    #[test]
    fn representable_samples_keep_full_range() {
        let samples: Vec<f32> = (-8..=7).map(|v| v as f32 * 0.5).collect();
        let p = init_mse_search(&samples, 4, true, 80).unwrap();
        assert_eq!(p, init_minmax(&samples, 4, true).unwrap());
        assert_eq!(round_trip_mse(&samples, &p), 0.0);
    }

    #[test]
    fn outlier_pulls_clip_range_inward() {
        let mut x = normals(10_000, 11);
        x.push(100.0);
        let full = init_minmax(&x, 4, true).unwrap();
        let searched = init_mse_search(&x, 4, true, 80).unwrap();
        assert!(searched.scale < full.scale);
        // brute force: the optimum over the grid is interior
        let errs: Vec<f64> = (0..80)
            .map(|i| {
                let r = 1.0 - i as f32 / 80.0;
                let (lo, hi) = finite_bounds(&x).unwrap();
                round_trip_mse(&x, &params_for_range(lo * r, hi * r, 4, true).unwrap())
            })
            .collect();
        let argmin = (0..80)
            .min_by(|&a, &b| errs[a].partial_cmp(&errs[b]).unwrap())
            .unwrap();
        assert!(argmin > 0 && argmin < 79);
        assert_eq!(round_trip_mse(&x, &searched), errs[argmin]);
    }

    #[test]
    fn two_candidate_grid_is_exhaustive() {
        for seed in 0..5 {
            let x = normals(500, seed);
            let (lo, hi) = finite_bounds(&x).unwrap();
            let full = params_for_range(lo, hi, 3, true).unwrap();
            let half = params_for_range(lo * 0.5, hi * 0.5, 3, true).unwrap();
            let expect = if round_trip_mse(&x, &half) < round_trip_mse(&x, &full) {
                half
            } else {
                full
            };
            assert_eq!(init_mse_search(&x, 3, true, 2).unwrap(), expect);
        }
    }
}
