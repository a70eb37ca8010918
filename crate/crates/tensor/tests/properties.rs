use proptest::prelude::*;
use rsfme_tensor::{ops, Tensor};

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f64..50.0, r * c)
            .prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(), shift in -100.0f64..100.0) {
        let y = ops::softmax(&x);
        let c = x.dim(1);
        for row in y.data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let shifted = ops::softmax(&x.map(|v| v + shift));
        prop_assert!(shifted.approx_eq(&y, 1e-6));
        prop_assert_eq!(shifted.argmax_rows(), x.argmax_rows());
    }

    #[test]
    fn concat_then_narrow_is_identity(c1 in 1usize..4, c2 in 1usize..4, h in 1usize..4, seed in 0u64..1000) {
        let a = Tensor::from_fn(&[2, c1, h, 2], |i| (i as u64 * 31 + seed) as f64);
        let b = Tensor::from_fn(&[2, c2, h, 2], |i| -((i as u64 * 17 + seed) as f64));
        let cat = ops::concat_channels(&[&a, &b]).unwrap();
        prop_assert_eq!(cat.dim(1), c1 + c2);
        prop_assert_eq!(ops::narrow(&cat, 1, 0, c1).unwrap(), a);
        prop_assert_eq!(ops::narrow(&cat, 1, c1, c2).unwrap(), b);
    }

    #[test]
    fn forward_ops_stay_finite(x in matrix()) {
        prop_assert!(ops::gelu(&x).is_finite());
        prop_assert!(ops::layer_norm(&x, None, None, 1e-5).unwrap().is_finite());
        prop_assert!(ops::softmax(&x).is_finite());
        let x4 = x.reshape(&[1, 1, x.dim(0), x.dim(1)]).unwrap();
        let stats = ops::NormStats::from_batch(&x4, 1e-5).unwrap();
        prop_assert!(ops::batch_norm(&x4, &stats).unwrap().is_finite());
    }
}
