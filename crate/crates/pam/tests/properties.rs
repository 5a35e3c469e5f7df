use proptest::prelude::*;

use pam::backbone::PlacementPlan;
use pam::blocks::{soft_gate, GateConfig};
use pam::harness::data::severity;
use pam::tensor::{conv2d, l2_normalize, ConvSpec, Tensor};

proptest! {
    #[test]
    fn conv_output_extent_matches_closed_form(
        c in 1usize..5,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        pad in 0usize..3,
        h in 5usize..12,
        w in 5usize..12,
        seed in 0u64..1000,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let spec = ConvSpec::depthwise(c, k).stride(stride).padding(pad);
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x = Tensor::from_vec(&[1, c, h, w], (0..c * h * w).map(|_| next()).collect())?;
        let wt = Tensor::from_vec(&[c, 1, k, k], (0..c * k * k).map(|_| next()).collect())?;
        let y = conv2d(&x, &wt, None, &spec)?;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        prop_assert_eq!(y.shape(), vec![1, c, ho, wo]);
    }

    #[test]
    fn gate_is_bounded_even_and_monotone(a in -90.0f64..=90.0, b in -90.0f64..=90.0) {
        let cfg = GateConfig::default();
        let sa = soft_gate(a, &cfg).unwrap();
        let sb = soft_gate(b, &cfg).unwrap();
        prop_assert!(sa > 0.0 && sa < 1.0);
        prop_assert_eq!(sa, soft_gate(-a, &cfg).unwrap());
        if a.abs() < b.abs() {
            prop_assert!(sa < sb);
        }
    }

    #[test]
    fn severity_bounded_and_even(y in -90.0f64..=90.0) {
        let s = severity(y);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, severity(-y));
    }

    #[test]
    fn placement_plan_round_trips(stages in prop::collection::btree_set(1usize..=4, 0..=4)) {
        let stages: Vec<usize> = stages.into_iter().collect();
        let plan = PlacementPlan::from_stages(&stages).unwrap();
        let rendered = plan.render();
        let back = PlacementPlan::parse(&rendered).unwrap();
        prop_assert_eq!(back.stages(), stages);
    }

    #[test]
    fn l2_normalize_yields_unit_rows(
        rows in 1usize..4,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut state = seed.wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 + 0.1
        };
        let x = Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| next()).collect())?;
        let y = l2_normalize(&x)?;
        let d = y.to_vec();
        for r in 0..rows {
            let norm: f64 = d[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
