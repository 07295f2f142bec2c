mod common;

use common::{brute_force_ngrams, direct_flux, dm, plain_transformer, random_baseline};
use contextual_flux::flux::{embedding_entropy, flux_sequence, FluxConfig, ScoreScale};
use contextual_flux::metrics::{count_repeated_ngrams, pca_project, response_similarity};
use contextual_flux::model::{init_params, transformer_forward, ModelConfig};
use contextual_flux::training::{loss_fn, sample_batch, train_on, TrainConfig};
use contextual_flux::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(4, 7, 30.0)) {
        let y = x.softmax(1).unwrap();
        for i in 0..4 {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(i).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn matmul_is_associative(a in matrix(3, 4, 2.0), b in matrix(4, 2, 2.0), c in matrix(2, 5, 2.0)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
        let oracle = dm(&a) * dm(&b) * dm(&c);
        prop_assert!(left.data().iter().zip(oracle.transpose().iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn ngrams_match_brute_force(tokens in prop::collection::vec(0u8..8, 4..64)) {
        let mut prev = usize::MAX;
        for n in 1..=4 {
            let c = count_repeated_ngrams(&tokens, n).unwrap();
            prop_assert_eq!(c, brute_force_ngrams(&tokens, n));
            prop_assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn similarity_ignores_order(
        responses in prop::collection::vec(prop::collection::vec(0u8..4, 2..12), 2..6),
        rot in 0usize..6,
    ) {
        let s = response_similarity(&responses).unwrap();
        let mut shuffled = responses.clone();
        shuffled.rotate_left(rot % responses.len());
        shuffled.reverse();
        prop_assert!((s - response_similarity(&shuffled).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn planar_pca_is_a_rotation(x in matrix(7, 2, 5.0)) {
        prop_assume!(x.data().chunks(2).any(|r| r != &x.data()[..2]));
        let p = pca_project(&x, 2).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let d0 = ((x.at(i, 0) - x.at(j, 0)).powi(2) + (x.at(i, 1) - x.at(j, 1)).powi(2)).sqrt();
                let d1 = ((p.at(i, 0) - p.at(j, 0)).powi(2) + (p.at(i, 1) - p.at(j, 1)).powi(2)).sqrt();
                prop_assert!((d0 - d1).abs() < 1e-9, "{} vs {}", d0, d1);
            }
        }
    }

    #[test]
    fn batched_flux_matches_direct_sum(
        t in 1usize..10,
        seed in any::<u64>(),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = || Tensor::matrix(t, 3, (0..t * 3).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (t0, e, q, k, v) = (m(), m(), m(), m(), m());
        let cfg = FluxConfig { alpha, beta, score_scale: ScoreScale::None, ..FluxConfig::default() };
        let got = flux_sequence(&t0, &e, &q, &k, &v, &cfg).unwrap();
        let want = direct_flux(&rows_of(&t0), &rows_of(&e), &rows_of(&q), &rows_of(&k), &rows_of(&v), alpha, beta, 1.0);
        for i in 0..t {
            for c in 0..3 {
                prop_assert!((got.at(i, c) - want[i][c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn entropy_is_bounded(x in matrix(6, 3, 4.0)) {
        prop_assume!(x.data().iter().any(|v| *v != 0.0));
        let h = embedding_entropy(&x).unwrap().item();
        prop_assert!(h >= -1e-15 && h <= 6f64.ln() + 1e-12);
    }
}

#[test]
fn pca_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let x = Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let mut c = dm(&x);
        let means = c.row_mean();
        for mut row in c.row_iter_mut() {
            row -= &means;
        }
        let eig = SymmetricEigen::new(c.transpose() * &c);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let basis = DMatrix::from_columns(&[eig.eigenvectors.column(order[0]), eig.eigenvectors.column(order[1])]);
        let oracle = &c * basis;
        let got = pca_project(&x, 2).unwrap();
        for comp in 0..2 {
            let sign = if oracle[(0, comp)] * got.at(0, comp) < 0.0 { -1.0 } else { 1.0 };
            for i in 0..6 {
                assert!((got.at(i, comp) - sign * oracle[(i, comp)]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn baseline_mode_is_plain_attention() {
    for seed in 0..20 {
        let (cfg, params, tokens) = random_baseline(seed);
        let got = transformer_forward(&tokens, &params, &cfg).unwrap().logits;
        let want = plain_transformer(&tokens, &params, &cfg);
        let diff = got.data().iter().zip(want.transpose().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "seed {seed}: {diff}");
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg).unwrap();
    let corpus = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/data/alice29.txt")).unwrap();
    let batch = sample_batch(&corpus, 4, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let loss = loss_fn(&params, &batch, &cfg).unwrap();
    assert!((loss.cross_entropy - 256f64.ln()).abs() < 0.5, "{}", loss.cross_entropy);
}

#[test]
fn flux_changes_the_loss_trajectory() {
    let corpus = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/data/alice29.txt")).unwrap();
    let model = ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, context_len: 16, ..ModelConfig::default() };
    let base = ModelConfig { flux: FluxConfig::off(), ..model.clone() };
    let t = TrainConfig { batch_size: 2, context_len: 16, max_steps: 8, ..TrainConfig::default() };
    let a = train_on(&corpus, &t, &base).unwrap().checkpoint.loss_history;
    let b = train_on(&corpus, &t, &model).unwrap().checkpoint.loss_history;
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).skip(1).all(|(x, y)| x != y));
}
