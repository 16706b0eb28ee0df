use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

fn random_probs(rng: &mut ChaCha8Rng, z: usize, k: usize) -> Array2<f64> {
    softmax_rows(&Array2::from_shape_fn((z, k), |_| rng.random_range(-2.0..2.0)))
}

#[test]
fn kl_of_identical_rows_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_probs(&mut rng, 6, 5);
    assert_eq!(classification_alignment(p.view(), p.view()).unwrap(), 0.0);
}

#[test]
fn kl_closed_form_ln2() {
    let p = array![[1.0, 0.0]];
    let q = array![[0.5, 0.5]];
    assert_abs_diff_eq!(
        classification_alignment(p.view(), q.view()).unwrap(),
        std::f64::consts::LN_2,
        epsilon = 1e-12
    );
}

#[test]
fn kl_rejects_bad_inputs() {
    let p = array![[0.7, 0.7]];
    let q = array![[0.5, 0.5]];
    assert!(matches!(
        classification_alignment(p.view(), q.view()),
        Err(Error::NotADistribution { row: 0, .. })
    ));
    let q3 = array![[0.2, 0.3, 0.5]];
    assert!(matches!(
        classification_alignment(q.view(), q3.view()),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn kl_saturated_rows_stay_finite() {
    let p = array![[0.0, 1.0], [1.0, 0.0]];
    let q = array![[1.0, 0.0], [1.0, 0.0]];
    let v = classification_alignment(p.view(), q.view()).unwrap();
    // First row: 1 * (ln 1 - ln 1e-7); second row: 0.
    assert_abs_diff_eq!(v, -(1e-7f64).ln() / 2.0, epsilon = 1e-9);
}

#[test]
fn kl_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let z = rng.random_range(1..9);
        let k = rng.random_range(2..6);
        let (p, q) = (random_probs(&mut rng, z, k), random_probs(&mut rng, z, k));
        let mut brute = 0.0;
        for n in 0..z {
            let mut row = 0.0;
            for c in 0..k {
                row += p[[n, c]] * (p[[n, c]] / q[[n, c]]).ln();
            }
            brute += row;
        }
        brute /= z as f64;
        assert_abs_diff_eq!(classification_alignment(p.view(), q.view()).unwrap(), brute, epsilon = 1e-9);
    }
}

#[test]
fn l2_examples() {
    let a = array![[0.0, 0.0, 64.0, 64.0]];
    let b = array![[32.0, 32.0, 64.0, 64.0]];
    assert_abs_diff_eq!(localization_alignment(a.view(), b.view(), (64.0, 64.0)).unwrap(), 0.5, epsilon = 1e-12);
    assert_eq!(localization_alignment(a.view(), a.view(), (64.0, 64.0)).unwrap(), 0.0);
    let c = array![[0.0, 0.0, 1.0]];
    assert!(localization_alignment(c.view(), c.view(), (1.0, 1.0)).is_err());
}

#[test]
fn zero_l2_means_unit_iou() {
    let a = array![[3.0, 4.0, 20.0, 30.0]];
    let v = localization_alignment(a.view(), a.view(), (64.0, 64.0)).unwrap();
    assert_eq!(v, 0.0);
    let ba = crate::bbox::BBox::new(a[[0, 0]], a[[0, 1]], a[[0, 2]], a[[0, 3]]);
    assert_eq!(ba.iou(&ba), 1.0);
}

/// Central differences with h = 1e-4; returns the relative error of the
/// whole gradient, `|a - n|_2 / max(|a|_2, |n|_2)`.
fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) -> f64 {
    let h = 1e-4;
    let mut num = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[idx] += h;
        xm.as_slice_mut().unwrap()[idx] -= h;
        num.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    norm(&(analytic - &num)) / norm(analytic).max(norm(&num)).max(1e-12)
}

#[test]
fn alignment_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let z = rng.random_range(1..=8);
        let k = rng.random_range(2..=6);
        let (p, q) = (random_probs(&mut rng, z, k), random_probs(&mut rng, z, k));
        let (_, gp, gq) = classification_alignment_grad(p.view(), q.view()).unwrap();
        let e1 = fd_check(|x| classification_alignment_unchecked(x.view(), q.view()).0, &p, &gp);
        let e2 = fd_check(|x| classification_alignment_unchecked(p.view(), x.view()).0, &q, &gq);
        assert!(e1 < 1e-4 && e2 < 1e-4, "{e1} {e2}");

        let a = Array2::from_shape_fn((z, 4), |_| rng.random_range(0.0..64.0));
        let b = Array2::from_shape_fn((z, 4), |_| rng.random_range(0.0..64.0));
        let (_, ga, gb) = localization_alignment_grad(a.view(), b.view(), (64.0, 48.0)).unwrap();
        let e3 = fd_check(|x| localization_alignment(x.view(), b.view(), (64.0, 48.0)).unwrap(), &a, &ga);
        let e4 = fd_check(|x| localization_alignment(a.view(), x.view(), (64.0, 48.0)).unwrap(), &b, &gb);
        assert!(e3 < 1e-4 && e4 < 1e-4, "{e3} {e4}");
    }
}

#[test]
fn detection_loss_minimum_is_zero() {
    let probs = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let deltas = array![[0.1, -0.2, 0.3, 0.0], [5.0, 5.0, 5.0, 5.0]];
    let targets = [
        ProposalTarget { row: 0, class: 1, box_target: Some([0.1, -0.2, 0.3, 0.0]) },
        ProposalTarget { row: 1, class: 0, box_target: None },
    ];
    let v = detection_loss(probs.view(), deltas.view(), &targets, 0.0, 1.0).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn detection_loss_uniform_prediction_is_ln5() {
    let probs = Array2::from_elem((3, 5), 0.2);
    let deltas = Array2::zeros((3, 4));
    let targets: Vec<_> = (0..3)
        .map(|row| ProposalTarget { row, class: row % 2, box_target: (row % 2 == 1).then_some([0.0; 4]) })
        .collect();
    let g = detection_loss_grad(probs.view(), deltas.view(), &targets, 0.0, 1.0).unwrap();
    assert_abs_diff_eq!(g.class_term, 5f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(g.value, 1.6094379124341003, epsilon = 1e-12);
}

#[test]
fn detection_loss_empty_batch() {
    let probs = Array2::from_elem((1, 5), 0.2);
    let deltas = Array2::zeros((1, 4));
    assert!(matches!(
        detection_loss(probs.view(), deltas.view(), &[], 0.0, 1.0),
        Err(Error::EmptyBatch)
    ));
}

#[test]
fn detection_logit_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Array2::from_shape_fn((4, 5), |_| rng.random_range(-2.0..2.0));
    let deltas = Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0));
    let targets: Vec<_> = (0..4)
        .map(|row| ProposalTarget { row, class: row, box_target: (row > 0).then(|| [0.3, -1.5, 0.2, 0.9]) })
        .collect();
    for ls in [0.0, 0.1] {
        let g = detection_loss_grad(softmax_rows(&logits).view(), deltas.view(), &targets, ls, 1.0).unwrap();
        let e = fd_check(
            |x| detection_loss(softmax_rows(x).view(), deltas.view(), &targets, ls, 1.0).unwrap(),
            &logits,
            &g.d_logits,
        );
        assert!(e < 1e-4, "logits {e}");
        let e = fd_check(
            |x| detection_loss(softmax_rows(&logits).view(), x.view(), &targets, ls, 1.0).unwrap(),
            &deltas,
            &g.d_deltas,
        );
        assert!(e < 1e-4, "deltas {e}");
    }
}

#[test]
fn total_loss_accounting() {
    let b = total_loss(1.0, 0.5, 0.25, 1.0, 1.0).unwrap();
    assert_eq!(b.l_tot, 1.75);
    let b = total_loss(0.8, 0.5, 0.25, 0.0, 0.0).unwrap();
    assert_eq!(b.l_tot, b.l_det);
    assert!(matches!(total_loss(1.0, 0.0, 0.0, -0.1, 1.0), Err(Error::NegativeWeight(_))));
}

proptest! {
    #[test]
    fn kl_nonnegative_and_permutation_equivariant(seed in 0u64..10_000, z in 1usize..9, k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = (random_probs(&mut rng, z, k), random_probs(&mut rng, z, k));
        let v = classification_alignment(p.view(), q.view()).unwrap();
        prop_assert!(v >= 0.0);
        let mut perm: Vec<usize> = (0..z).collect();
        perm.reverse();
        let pp = p.select(ndarray::Axis(0), &perm);
        let qp = q.select(ndarray::Axis(0), &perm);
        let vp = classification_alignment(pp.view(), qp.view()).unwrap();
        prop_assert!((v - vp).abs() < 1e-12);

        let a = Array2::from_shape_fn((z, 4), |_| rng.random_range(0.0..64.0));
        let b = Array2::from_shape_fn((z, 4), |_| rng.random_range(0.0..64.0));
        let l = localization_alignment(a.view(), b.view(), (64.0, 64.0)).unwrap();
        let lp = localization_alignment(
            a.select(ndarray::Axis(0), &perm).view(),
            b.select(ndarray::Axis(0), &perm).view(),
            (64.0, 64.0),
        ).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - lp).abs() < 1e-12);
    }
}
