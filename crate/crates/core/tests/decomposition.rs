use proptest::prelude::*;
use stmformer_core::decomp::{moving_average, multi_decomp, positional_table, stride1_patch, value_embed, Embedding, KernelBank};
use stmformer_core::gradcheck::grad_check;
use stmformer_core::params::ParamStore;
use stmformer_core::{DenseArray, SeededRng, Tape, Var};

fn random(shape: &[usize], seed: u64) -> DenseArray {
    let mut rng = SeededRng::new(seed);
    DenseArray::from_fn(shape, |_| rng.standard_normal())
}

fn decompose(x: &DenseArray, bank: &KernelBank, logits: &[f64]) -> (DenseArray, DenseArray) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let l = tape.constant(DenseArray::vector(logits));
    let (s, t) = multi_decomp(&mut tape, xv, bank, l).unwrap();
    (tape.value(s).clone(), tape.value(t).clone())
}

fn embedding(tape: &mut Tape, value: DenseArray, patch: DenseArray, t: usize, patch_len: usize, positions: bool) -> Embedding {
    let d = value.shape()[1];
    Embedding {
        value: tape.constant(value),
        patch: tape.constant(patch),
        positional: tape.constant(if positions { positional_table(t, d) } else { DenseArray::zeros(&[t, d]) }),
        patch_len,
    }
}

#[test]
fn moving_average_examples() {
    let c = DenseArray::full(&[5, 2, 2], 2.0);
    assert!(moving_average(&c, 3).unwrap().data().iter().all(|&v| (v - 2.0).abs() < 1e-15));

    let x = DenseArray::from_vec(&[5, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let want = [4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0];
    for (g, w) in moving_average(&x, 3).unwrap().data().iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
    assert_eq!(moving_average(&x, 1).unwrap(), x);
    assert!(moving_average(&x, 4).is_err());
}

#[test]
fn multi_decomp_examples() {
    let x = random(&[16, 3, 4], 1);
    let (s, t) = decompose(&x, &KernelBank::new(&[3, 7, 15]).unwrap(), &[0.0, 0.0, 0.0]);
    for i in 0..x.len() {
        assert!((s.data()[i] + t.data()[i] - x.data()[i]).abs() <= 1e-12);
    }

    let (_, t) = decompose(&x, &KernelBank::new(&[3]).unwrap(), &[0.0]);
    assert!(t.max_abs_diff(&moving_average(&x, 3).unwrap()) < 1e-15);

    let (s, _) = decompose(&x, &KernelBank::new(&[1, 5]).unwrap(), &[50.0, 0.0]);
    assert!(s.data().iter().all(|v| v.abs() <= 1e-9));
}

#[test]
fn value_embed_examples() {
    let (t, n, c) = (4, 2, 3);
    let x = random(&[t, n, c], 2);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());

    let emb = embedding(&mut tape, DenseArray::zeros(&[c, 5]), DenseArray::eye(5), t, 1, false);
    let y = value_embed(&mut tape, xv, &emb).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let emb = embedding(&mut tape, DenseArray::eye(c), DenseArray::eye(c), t, 1, false);
    let y = value_embed(&mut tape, xv, &emb).unwrap();
    assert_eq!(tape.value(y), &x);

    let emb = embedding(&mut tape, DenseArray::eye(c + 1), DenseArray::eye(c + 1), t, 1, false);
    assert!(value_embed(&mut tape, xv, &emb).is_err());

    let r = grad_check(
        |tape, v| {
            let e = Embedding {
                value: v[0],
                patch: v[0],
                positional: tape.constant(positional_table(t, 4)),
                patch_len: 1,
            };
            let xv = tape.constant(x.clone());
            let y = value_embed(tape, xv, &e)?;
            Ok(tape.sum_all(y))
        },
        &[random(&[c, 4], 3)],
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn positional_table_is_deterministic() {
    assert_eq!(positional_table(16, 8), positional_table(16, 8));
    assert_eq!(positional_table(16, 8).shape(), &[16, 8]);
}

#[test]
fn stride1_patch_examples() {
    let mut tape = Tape::new();
    let x = random(&[5, 2, 3], 4);
    let xv = tape.constant(x.clone());
    let emb = embedding(&mut tape, DenseArray::eye(3), DenseArray::eye(3), 5, 1, false);
    let y = stride1_patch(&mut tape, xv, &emb).unwrap();
    assert_eq!(tape.value(y), &x);

    // Averaging projection over two stacked frames of one channel.
    let seq = DenseArray::from_vec(&[3, 1, 1], vec![1.0, 10.0, 100.0]).unwrap();
    let sv = tape.constant(seq);
    let avg = DenseArray::from_vec(&[2, 1], vec![0.5, 0.5]).unwrap();
    let emb = embedding(&mut tape, DenseArray::eye(1), avg, 3, 2, false);
    let y = stride1_patch(&mut tape, sv, &emb).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 5.5, 55.0]);

    let emb = embedding(&mut tape, DenseArray::eye(3), DenseArray::eye(3), 5, 6, false);
    assert!(stride1_patch(&mut tape, xv, &emb).is_err());
}

#[test]
fn stride1_patch_preserves_shape() {
    let mut rng = SeededRng::new(5);
    for p in 1..=4 {
        let mut store = ParamStore::new();
        Embedding::init_params(&mut store, "e", 4, 8, p, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let emb = Embedding::bind(&mut tape, &bound, "e", 16, 8, p).unwrap();
        let x = tape.constant(random(&[16, 3, 4], p as u64));
        let v = value_embed(&mut tape, x, &emb).unwrap();
        let y: Var = stride1_patch(&mut tape, v, &emb).unwrap();
        assert_eq!(tape.shape(y), &[16, 3, 8]);
    }
}

fn bank_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec((0usize..5).prop_map(|h| 2 * h + 1), 1..4)
        .prop_flat_map(|k| {
            let n = k.len();
            (Just(k), prop::collection::vec(-3.0f64..3.0, n))
        })
}

proptest! {
    #[test]
    fn reconstruction_is_exact((kernels, logits) in bank_strategy(), seed in any::<u64>()) {
        let x = random(&[12, 2, 3], seed);
        let (s, t) = decompose(&x, &KernelBank::new(&kernels).unwrap(), &logits);
        for i in 0..x.len() {
            prop_assert!((s.data()[i] + t.data()[i] - x.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_input_is_its_own_trend((kernels, logits) in bank_strategy(), c in -50.0f64..50.0) {
        let x = DenseArray::full(&[10, 2, 2], c);
        let (_, t) = decompose(&x, &KernelBank::new(&kernels).unwrap(), &logits);
        prop_assert!(t.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn interior_trend_is_shift_equivariant((kernels, logits) in bank_strategy(), shift in 1usize..4, seed in any::<u64>()) {
        let len = 24;
        let base = random(&[len + shift, 1, 1], seed);
        let x = base.slice_axis(0, shift, len).unwrap();
        let shifted = base.slice_axis(0, 0, len).unwrap();
        let bank = KernelBank::new(&kernels).unwrap();
        let (_, t) = decompose(&x, &bank, &logits);
        let (_, ts) = decompose(&shifted, &bank, &logits);
        let h = bank.max_half_width();
        for i in (h + shift)..(len - h) {
            prop_assert!((ts.data()[i] - t.data()[i - shift]).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_rejects_even_lengths(k in 1usize..10) {
        prop_assert!(KernelBank::new(&[2 * k]).is_err());
    }
}
