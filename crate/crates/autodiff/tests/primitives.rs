use metatrack_autodiff::gradcheck::{check_gradient, check_second_order, finite_difference_oracle, relative_error};
use metatrack_autodiff::suite::{primitive_cases, run_case, uniform_tensor};
use metatrack_autodiff::{kernels, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_central_differences_over_100_seeds() {
    let mut worst = Vec::new();
    for case in primitive_cases() {
        let mut max_first: f64 = 0.0;
        let mut max_second: f64 = 0.0;
        for seed in 0..100 {
            let outcome = run_case(&case, seed).unwrap();
            assert!(outcome.passes(), "{} failed at seed {seed}: {outcome:?}", case.name);
            max_first = max_first.max(outcome.first_order);
            max_second = max_second.max(outcome.second_order);
        }
        worst.push((case.name, max_first, max_second));
    }
    for (name, first, second) in worst {
        println!("{name:>24}: first-order {first:.2e}, second-order {second:.2e}");
    }
}

#[test]
fn depthwise_xcorr_with_itself_is_sum_of_squares() {
    let block = uniform_tensor(&[1, 3, 4, 4], -2.0, 2.0, 11);
    let out = kernels::depthwise_xcorr(&block, &block, (0, 0)).unwrap();
    assert_eq!(out.shape(), &[1, 3, 1, 1]);
    for c in 0..3 {
        // Nested-loop oracle.
        let mut expected = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                expected += block.at(&[0, c, y, x]) * block.at(&[0, c, y, x]);
            }
        }
        assert!((out.at(&[0, c, 0, 0]) - expected).abs() < 1e-12);
    }
}

#[test]
fn gradient_accumulates_over_reuse() {
    // w feeds both a matmul and an elementwise product.
    let build = |tape: &mut Tape, w| {
        let m = tape.reshape(w, &[2, 2])?;
        let mm = tape.matmul(m, m)?;
        let flat = tape.reshape(mm, &[4])?;
        let prod = tape.mul(flat, w)?;
        let s = tape.sigmoid(prod)?;
        tape.sum(s)
    };
    let x = uniform_tensor(&[4], -2.0, 2.0, 3);
    let check = check_gradient(build, &x, 1e-4).unwrap();
    assert!(check.passes(1e-5), "{check:?}");
}

#[test]
fn nested_second_order_through_conv_and_xcorr() {
    let build = |tape: &mut Tape, x| {
        let input = tape.narrow(x, 0, 0, 2 * 4 * 4)?;
        let input = tape.reshape(input, &[1, 2, 4, 4])?;
        let kernel = tape.narrow(x, 0, 32, 2 * 2 * 2)?;
        let kernel = tape.reshape(kernel, &[1, 2, 2, 2])?;
        let r = tape.depthwise_xcorr(input, kernel, (0, 0))?;
        let k2 = Tensor::from_fn(&[2, 2, 3, 3], |i| ((i % 5) as f64 - 2.0) * 0.3);
        let k2 = tape.constant(k2);
        let c = tape.conv2d(r, k2, (1, 1))?;
        let t = tape.tanh(c)?;
        tape.sum(t)
    };
    let x = uniform_tensor(&[40], -1.0, 1.0, 5);
    let dir = uniform_tensor(&[40], -1.0, 1.0, 6);
    let check = check_second_order(build, &x, &dir, 1e-4).unwrap();
    assert!(check.passes(1e-4), "{check:?}");
}

#[test]
fn forward_replays_bit_identically() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.leaf(uniform_tensor(&[1, 2, 6, 6], -2.0, 2.0, 9));
        let k = tape.leaf(uniform_tensor(&[3, 2, 3, 3], -2.0, 2.0, 10));
        let y = tape.conv2d(x, k, (1, 1)).unwrap();
        let y = tape.softplus(y).unwrap();
        let loss = tape.mean(y).unwrap();
        tape.backward(loss, &[x, k], true).unwrap();
        tape.verify_replay().unwrap();
        tape.value(loss).item().unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn finite_difference_of_composed_scalar() {
    let f = |t: &Tensor| Ok(t.data().iter().map(|v| v.sin()).sum::<f64>());
    let x = Tensor::from_vec(vec![0.3, -1.2]);
    let g = finite_difference_oracle(f, &x, 1e-4).unwrap();
    let exact = x.map(f64::cos);
    assert!(relative_error(&g, &exact) < 1e-8);
}

proptest! {
    #[test]
    fn broadcast_then_sum_scales_by_extent(values in proptest::collection::vec(-5.0f64..5.0, 1..6), extent in 1usize..5) {
        let n = values.len();
        let t = Tensor::new(vec![n, 1], values.clone()).unwrap();
        let b = kernels::broadcast(&t, &[n, extent]).unwrap();
        let s = kernels::sum_axes(&b, &[1]).unwrap();
        for (got, v) in s.data().iter().zip(&values) {
            prop_assert!((got - v * extent as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trips(seed in 0u64..1000) {
        let t = uniform_tensor(&[2, 3, 4], -1.0, 1.0, seed);
        let p = kernels::permute(&t, &[1, 2, 0]).unwrap();
        let back = kernels::permute(&p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(back, t);
    }
}
