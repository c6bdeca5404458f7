use masktx_tensor::checkpoint::{read_checkpoint, write_checkpoint};
use masktx_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-1e3f64..1e3, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_sums_to_one(x in tensor_strategy(), axis_seed in 0usize..8) {
        let axis = axis_seed % x.rank();
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, axis).unwrap();
        let sums = g.sum_axis(s, axis).unwrap();
        for &total in g.value(sums).data() {
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        for &p in g.value(s).data() {
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn gradient_has_tensor_shape(x in tensor_strategy()) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let e = g.exp(v);
        let s = g.sum_all(e);
        let grads = g.backward(s).unwrap();
        prop_assert_eq!(grads.get(v).unwrap().shape(), x.shape());
    }

    #[test]
    fn checkpoint_round_trip(entries in prop::collection::vec(("[a-z.]{1,12}", tensor_strategy()), 0..5)) {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &entries).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(&back) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
