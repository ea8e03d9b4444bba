use proptest::prelude::*;
use quest_core::quant::{
    dequantize, init_minmax, init_mse_search, quantize, ClusterMap, QuantParams,
};
use quest_core::Tensor;

fn params() -> impl Strategy<Value = QuantParams> {
    (2u8..=8, any::<bool>(), 1e-3f32..2.0, -4i32..4).prop_map(|(bits, signed, scale, z)| {
        let (lo, hi) = quest_core::quant::int_range(bits, signed);
        QuantParams::new(scale, z.clamp(lo, hi), bits, signed).unwrap()
    })
}

fn range(p: &QuantParams) -> (f32, f32) {
    (
        (p.qmin - p.zero_point) as f32 * p.scale,
        (p.qmax - p.zero_point) as f32 * p.scale,
    )
}

proptest! {
    #[test]
    fn in_range_error_is_at_most_half_a_step(p in params(), u in 0.0f32..1.0) {
        let (lo, hi) = range(&p);
        let x = lo + u * (hi - lo);
        prop_assert!((p.fake_quant_value(x) - x).abs() <= p.scale / 2.0 * (1.0 + 1e-5));
    }

    #[test]
    fn fake_quant_is_idempotent_and_monotone(p in params(), a in -50.0f32..50.0, b in -50.0f32..50.0) {
        let fa = p.fake_quant_value(a);
        prop_assert_eq!(p.fake_quant_value(fa).to_bits(), fa.to_bits());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(p.fake_quant_value(lo) <= p.fake_quant_value(hi));
    }

    #[test]
    fn integers_stay_on_the_grid(p in params(), xs in prop::collection::vec(-100.0f32..100.0, 1..64)) {
        let t = Tensor::new(&[xs.len()], xs).unwrap();
        let q = quantize(&t, &p).unwrap();
        prop_assert!(q.data.iter().all(|&v| v >= p.qmin && v <= p.qmax));
        let back = dequantize(&q, &p).unwrap();
        for (d, &x) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(d.to_bits(), p.fake_quant_value(x).to_bits());
        }
    }

    #[test]
    fn mse_search_never_loses_to_min_max(xs in prop::collection::vec(-5.0f32..5.0, 8..256), bits in 2u8..=8) {
        let p = init_mse_search(&xs, bits, true, 40).unwrap();
        let err = |p: &QuantParams| xs.iter().map(|&x| (p.fake_quant_value(x) - x).powi(2) as f64).sum::<f64>();
        let full = init_minmax(&xs, bits, true).unwrap();
        prop_assert!(err(&p) <= err(&full) * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn clusters_partition_every_step(total in 1usize..400, k in 1usize..50) {
        prop_assume!(k <= total);
        let map = ClusterMap::new(total, k).unwrap();
        let mut next = 1;
        for c in 0..k {
            let (a, b) = map.steps_of(c);
            prop_assert_eq!(a, next);
            prop_assert!(b >= a);
            for t in a..=b {
                prop_assert_eq!(map.cluster_of(t).unwrap(), c);
            }
            next = b + 1;
        }
        prop_assert_eq!(next, total + 1);
    }
}

#[test]
fn exhaustive_three_bit_grid() {
    for signed in [false, true] {
        let p = QuantParams::new(0.25, if signed { 0 } else { 2 }, 3, signed).unwrap();
        let xs: Vec<f32> = (-400..=400).map(|i| i as f32 / 100.0).collect();
        for w in xs.windows(2) {
            assert!(p.fake_quant_value(w[0]) <= p.fake_quant_value(w[1]));
        }
        for &x in &xs {
            let f = p.fake_quant_value(x);
            assert_eq!(p.fake_quant_value(f), f);
        }
    }
}
