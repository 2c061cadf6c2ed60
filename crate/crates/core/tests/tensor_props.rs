use hypercae::tensor::*;
use proptest::prelude::*;

fn tensor(dims: Dims4) -> impl Strategy<Value = Tensor4> {
    prop::collection::vec(-1.0f64..1.0, dims.len()).prop_map(move |v| Tensor4::from_vec(dims, v).unwrap())
}

fn bank(o: usize, i: usize, k: usize) -> impl Strategy<Value = KernelBank> {
    (
        prop::collection::vec(-1.0f64..1.0, o * i * k * k),
        prop::collection::vec(-1.0f64..1.0, o),
    )
        .prop_map(move |(w, b)| KernelBank::from_parts(o, i, k, k, w, b).unwrap())
}

/// (input, kernels, stride) with kernels of side 1, 3 or 5.
fn conv_case() -> impl Strategy<Value = (Tensor4, KernelBank, usize)> {
    (1usize..3, 1usize..4, 1usize..4, 2usize..9, 2usize..9, prop::sample::select(vec![1usize, 3, 5]), 1usize..3)
        .prop_flat_map(|(b, ci, co, h, w, k, s)| (tensor(Dims4::new(b, ci, h, w)), bank(co, ci, k), Just(s)))
}

fn zero_bias(k: &KernelBank) -> KernelBank {
    let mut k = k.clone();
    k.bias.iter_mut().for_each(|b| *b = 0.0);
    k
}

proptest! {
    #[test]
    fn transpose_is_adjoint((x, k, s) in conv_case(), seed in any::<u64>()) {
        let k = zero_bias(&k);
        let y = conv2d(&x, &k, s).unwrap();
        let mut g = y.zeros_like();
        let mut state = seed | 1;
        for v in g.data_mut() {
            state ^= state << 13; state ^= state >> 7; state ^= state << 17;
            *v = (state % 2001) as f64 / 1000.0 - 1.0;
        }
        let d = x.dims();
        let xt = conv2d_transpose(&g, &k, s, (d.rows, d.cols)).unwrap();
        let lhs = y.dot(&g);
        let rhs = x.dot(&xt);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn conv_output_shape((x, k, s) in conv_case()) {
        let y = conv2d(&x, &k, s).unwrap();
        let d = x.dims();
        prop_assert_eq!(y.dims(), Dims4::new(d.batch, k.out_channels(), d.rows.div_ceil(s), d.cols.div_ceil(s)));
    }

    #[test]
    fn conv_is_linear_in_input((x, k, s) in conv_case(), a in -2.0f64..2.0) {
        let k = zero_bias(&k);
        let y = conv2d(&x, &k, s).unwrap();
        let ya = conv2d(&x.map(|v| a * v), &k, s).unwrap();
        for (p, q) in y.data().iter().zip(ya.data()) {
            prop_assert!((a * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_one_transpose_is_flipped_conv((x, k, _) in conv_case()) {
        let k = zero_bias(&k);
        let y = conv2d(&x, &k, 1).unwrap();
        let d = x.dims();
        let a = conv2d_transpose(&y, &k, 1, (d.rows, d.cols)).unwrap();
        let b = conv2d(&y, &k.flip_swap(), 1).unwrap();
        prop_assert_eq!(a.dims(), b.dims());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn flip_swap_is_an_involution(k in bank(3, 2, 3)) {
        prop_assert_eq!(k.flip_swap().flip_swap().data, k.data);
    }

    #[test]
    fn unpool_fills_windows_with_abs_max(x in (1usize..3, 1usize..7, 1usize..7)
        .prop_flat_map(|(c, h, w)| tensor(Dims4::new(1, c, h, w))))
    {
        let (pooled, trace) = maxpool2(&x);
        let up = unpool_absmax(&trace);
        prop_assert_eq!(up.dims(), x.dims());
        let d = x.dims();
        for c in 0..d.channels {
            for r in 0..d.rows {
                for col in 0..d.cols {
                    let (wr, wc) = (r / 2 * 2, col / 2 * 2);
                    let mut best = x.get(0, c, wr, wc);
                    let mut mx = best;
                    for rr in wr..(wr + 2).min(d.rows) {
                        for cc in wc..(wc + 2).min(d.cols) {
                            let v = x.get(0, c, rr, cc);
                            if v.abs() > best.abs() { best = v; }
                            mx = mx.max(v);
                        }
                    }
                    prop_assert_eq!(up.get(0, c, r, col), best);
                    prop_assert_eq!(pooled.get(0, c, r / 2, col / 2), mx);
                }
            }
        }
    }

    #[test]
    fn pool_backward_routes_to_argmax(x in tensor(Dims4::new(1, 2, 5, 4))) {
        let (pooled, trace) = maxpool2(&x);
        let ones = Tensor4::filled(pooled.dims(), 1.0).unwrap();
        let g = maxpool2_backward(&trace, &ones).unwrap();
        prop_assert_eq!(g.data().iter().sum::<f64>(), pooled.dims().len() as f64);
        prop_assert!((g.dot(&x) - pooled.data().iter().sum::<f64>()).abs() < 1e-12);
    }
}
