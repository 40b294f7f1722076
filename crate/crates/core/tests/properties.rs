use cdecay::data::{batches, encode_idx, parse_idx, synth_generate, SynthConfig};
use cdecay::diagnostics::alignment_scores;
use cdecay::linalg::{svd, Matrix};
use cdecay::model::{load_checkpoint, save_checkpoint, ModelConfig, TransformerModel};
use cdecay::pairs::{energy_of, enumerate_pairs, PairSet};
use cdecay::regularizers::{apply_cd_update, CdConfig};
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

fn pair(max: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(m, n, p)| {
        (
            prop::collection::vec(-2.0f64..2.0, m * n),
            prop::collection::vec(-2.0f64..2.0, p * m),
        )
            .prop_map(move |(a, b)| (Matrix::from_vec(m, n, a).unwrap(), Matrix::from_vec(p, m, b).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_sorted_nonnegative_values(w in matrix(12)) {
        let s = svd(&w).unwrap();
        prop_assert!(s.s.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!(s.s.iter().all(|&v| v >= 0.0));
        let scale = w.max_abs().max(1.0);
        prop_assert!(s.reconstruct().max_abs_diff(&w) <= 1e-10 * scale);
        let utu = s.u.t_matmul(&s.u).unwrap();
        prop_assert!(utu.max_abs_diff(&Matrix::identity(utu.rows())) <= 1e-10);
    }

    #[test]
    fn energy_is_invariant_to_upstream_scale((w1, w2) in pair(10), c in 0.1f64..10.0) {
        prop_assume!(w1.frobenius_norm() > 1e-6);
        let a = energy_of(&w1, &w2, true, "p").unwrap();
        let b = energy_of(&w1.scale(c), &w2, true, "p").unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1e-12));
    }

    #[test]
    fn energy_equals_singular_form((w1, w2) in pair(10)) {
        let s = svd(&w1).unwrap();
        let direct = energy_of(&w1, &w2, false, "p").unwrap();
        let via = w2.matmul(&s.u.scale_columns(&s.s)).unwrap().frobenius_norm_sq();
        prop_assert!((direct - via).abs() <= 1e-8 * direct.max(1e-300));
    }

    #[test]
    fn alignment_scores_are_cosines((w1, w2) in pair(8)) {
        let a = alignment_scores(&w1, &w2).unwrap();
        prop_assert!(a.alpha.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        for (i, &m) in a.max_alpha.iter().enumerate() {
            prop_assert_eq!(m, a.alpha.row(i).iter().cloned().fold(0.0, f64::max));
        }
    }

    #[test]
    fn epochs_are_permutations(n in 1usize..60, bs in 1usize..70, seed in 0u64..1000, epoch in 0u64..5) {
        let data = cdecay::data::random_batch(n, 1, 2, 3, seed);
        let b = batches(&data, bs, seed, epoch).unwrap();
        prop_assert_eq!(b.len(), n.div_ceil(bs));
        let mut seen: Vec<Vec<u64>> = b
            .iter()
            .flat_map(|x| (0..x.len()).map(|i| x.image(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        let mut all: Vec<Vec<u64>> = (0..n).map(|i| data.image(i).iter().map(|v| v.to_bits()).collect()).collect();
        seen.sort();
        all.sort();
        prop_assert_eq!(seen, all);
    }

    #[test]
    fn idx_round_trip(side in 1usize..6, n in 1usize..8, seed in any::<u8>()) {
        let pixels: Vec<u8> = (0..n * side * side).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (img, lab) = encode_idx(&pixels, &labels, side);
        let d = parse_idx(&img, &lab, "img", "lab").unwrap();
        prop_assert_eq!(d.len(), n);
        prop_assert_eq!(d.side, side);
        for (k, &p) in pixels.iter().enumerate() {
            prop_assert_eq!(d.images[k], p as f64 / 255.0);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = TransformerModel::new(ModelConfig { seed: 7, ..ModelConfig::default() }).unwrap();
    save_checkpoint(&m, dir.path()).unwrap();
    assert_eq!(load_checkpoint(dir.path()).unwrap(), m);
}

#[test]
fn synth_is_deterministic_and_balanced() {
    let cfg = SynthConfig { samples_train: 503, samples_eval: 97, ..SynthConfig::default() };
    let (a, b) = synth_generate(&cfg).unwrap();
    assert_eq!(synth_generate(&cfg).unwrap(), (a.clone(), b.clone()));
    for d in [&a, &b] {
        let c = d.class_counts(10);
        assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
    }
    assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn zero_strength_update_is_a_no_op() {
    let mut m = TransformerModel::new(ModelConfig::default()).unwrap();
    let before = m.clone();
    let pairs = enumerate_pairs(&m, PairSet::C);
    apply_cd_update(&mut m, &pairs, 1.0, &CdConfig { lambda_cd: 0.0, ..CdConfig::default() }).unwrap();
    assert_eq!(m, before);
}
