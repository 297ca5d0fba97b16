//! Finite-difference checks and hand cases for the candidate kernels.
//!
//! The oracle here is central differencing of `candidate_forward` probed
//! through a fixed linear functional; it never calls `candidate_backward`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Scalar probe: s = <upstream, forward(x)>.
fn probe(spec: &CandidateOpSpec, weights: &CandidateWeights, x: &Tensor, up: &Tensor) -> f64 {
    up.dot(&candidate_forward(spec, weights, x).unwrap())
}

/// Checks candidate_backward against central finite differences of the
/// probe over every input coordinate and every weight coordinate.
fn check_gradients(spec: &CandidateOpSpec, shape: &[usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = spec.init_weights(shape, &mut rng).unwrap();
    let x = rand_tensor(shape, &mut rng);
    let up = rand_tensor(shape, &mut rng);

    let (grad_x, grad_w) = candidate_backward(spec, &weights, &x, &up).unwrap();

    for j in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[j] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[j] -= FD_STEP;
        let fd = (probe(spec, &weights, &xp, &up) - probe(spec, &weights, &xm, &up))
            / (2.0 * FD_STEP);
        let an = grad_x.data()[j];
        assert!(
            rel_err(an, fd) <= FD_REL_TOL,
            "{spec}: input grad {j}: analytic {an} vs fd {fd}"
        );
    }

    let n_tensors = grad_w.tensors().len();
    for ti in 0..n_tensors {
        for j in 0..grad_w.tensors()[ti].numel() {
            let mut wp = weights.clone();
            wp.tensors_mut()[ti].data_mut()[j] += FD_STEP;
            let mut wm = weights.clone();
            wm.tensors_mut()[ti].data_mut()[j] -= FD_STEP;
            let fd =
                (probe(spec, &wp, &x, &up) - probe(spec, &wm, &x, &up)) / (2.0 * FD_STEP);
            let an = grad_w.tensors()[ti].data()[j];
            assert!(
                rel_err(an, fd) <= FD_REL_TOL,
                "{spec}: weight grad tensor {ti} coord {j}: analytic {an} vs fd {fd}"
            );
        }
    }
}

#[test]
fn identity_forward_is_unchanged() {
    let x = Tensor::new(vec![2, 2, 1], vec![1.0, -2.0, 3.5, 0.0]).unwrap();
    let y = candidate_forward(&CandidateOpSpec::Identity, &CandidateWeights::Identity, &x).unwrap();
    assert_eq!(x, y);
}

#[test]
fn dense_all_zero_weights_give_all_zero_output() {
    let spec = CandidateOpSpec::DenseExpand {
        expansion: 3,
        shortcut: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = [2, 2, 1];
    let mut weights = spec.init_weights(&shape, &mut rng).unwrap();
    for t in weights.tensors_mut() {
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
    let x = rand_tensor(&shape, &mut rng);
    let y = candidate_forward(&spec, &weights, &x).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_k3_e3_preserves_shape_with_internal_channels_12() {
    let spec = CandidateOpSpec::Conv2d {
        kernel: 3,
        expansion: 3,
        shortcut: false,
    };
    let shape = [8, 8, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let weights = spec.init_weights(&shape, &mut rng).unwrap();
    match &weights {
        CandidateWeights::Conv {
            w_expand, w_depth, ..
        } => {
            assert_eq!(w_expand.shape(), &[12, 4]);
            assert_eq!(w_depth.shape(), &[12, 3, 3]);
        }
        _ => panic!("conv weights expected"),
    }
    let x = rand_tensor(&shape, &mut rng);
    let y = candidate_forward(&spec, &weights, &x).unwrap();
    assert_eq!(y.shape(), &shape);
}

#[test]
fn every_candidate_kind_preserves_shape() {
    let shape = [4, 4, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut family = CandidateOpSpec::full_family();
    family.push(CandidateOpSpec::DenseExpand {
        expansion: 3,
        shortcut: true,
    });
    for spec in family {
        let weights = spec.init_weights(&shape, &mut rng).unwrap();
        let x = rand_tensor(&shape, &mut rng);
        let y = candidate_forward(&spec, &weights, &x).unwrap();
        assert_eq!(y.shape(), &shape, "{spec}");
    }
}

#[test]
fn identity_backward_passes_upstream_through() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let up = Tensor::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap();
    let (gx, gw) =
        candidate_backward(&CandidateOpSpec::Identity, &CandidateWeights::Identity, &x, &up)
            .unwrap();
    assert_eq!(gx, up);
    assert!(matches!(gw, CandidateGrads::Identity));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let spec = CandidateOpSpec::Conv2d {
        kernel: 3,
        expansion: 3,
        shortcut: true,
    };
    let shape = [4, 4, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let weights = spec.init_weights(&shape, &mut rng).unwrap();
    let x = rand_tensor(&shape, &mut rng);
    let up = Tensor::zeros(&shape);
    let (gx, gw) = candidate_backward(&spec, &weights, &x, &up).unwrap();
    assert!(gx.data().iter().all(|&v| v == 0.0));
    for t in gw.tensors() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    check_gradients(
        &CandidateOpSpec::Conv2d {
            kernel: 3,
            expansion: 3,
            shortcut: false,
        },
        &[4, 4, 2],
        10,
    );
    check_gradients(
        &CandidateOpSpec::Conv2d {
            kernel: 5,
            expansion: 6,
            shortcut: true,
        },
        &[5, 4, 1],
        11,
    );
    check_gradients(
        &CandidateOpSpec::Conv2d {
            kernel: 7,
            expansion: 3,
            shortcut: true,
        },
        &[4, 4, 1],
        12,
    );
}

#[test]
fn dense_gradients_match_finite_differences() {
    check_gradients(
        &CandidateOpSpec::DenseExpand {
            expansion: 3,
            shortcut: false,
        },
        &[3, 3, 1],
        13,
    );
    check_gradients(
        &CandidateOpSpec::DenseExpand {
            expansion: 6,
            shortcut: true,
        },
        &[2, 2, 2],
        14,
    );
}

#[test]
fn forward_is_deterministic() {
    let spec = CandidateOpSpec::Conv2d {
        kernel: 5,
        expansion: 3,
        shortcut: true,
    };
    let shape = [6, 6, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = spec.init_weights(&shape, &mut rng).unwrap();
    let x = rand_tensor(&shape, &mut rng);
    let y1 = candidate_forward(&spec, &weights, &x).unwrap();
    let y2 = candidate_forward(&spec, &weights, &x).unwrap();
    for (a, b) in y1.data().iter().zip(y2.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn name_round_trips() {
    let mut family = CandidateOpSpec::full_family();
    family.push(CandidateOpSpec::DenseExpand {
        expansion: 6,
        shortcut: true,
    });
    for spec in family {
        assert_eq!(CandidateOpSpec::parse(&spec.name()).unwrap(), spec);
    }
    assert!(CandidateOpSpec::parse("conv4x4-e3").is_err());
    assert!(CandidateOpSpec::parse("conv3x3-e5").is_err());
    assert!(CandidateOpSpec::parse("pool3x3").is_err());
}

#[test]
fn full_family_has_thirteen_members() {
    assert_eq!(CandidateOpSpec::full_family().len(), 13);
}

#[test]
fn mac_counts_scale_with_kernel_and_expansion() {
    let shape = [8, 8, 1];
    let id = CandidateOpSpec::Identity.mac_count(&shape);
    assert_eq!(id, 0);
    let small = CandidateOpSpec::Conv2d {
        kernel: 3,
        expansion: 3,
        shortcut: false,
    }
    .mac_count(&shape);
    // 8*8 * 1*3 * (2*1 + 9) = 2112
    assert_eq!(small, 2112);
    let big = CandidateOpSpec::Conv2d {
        kernel: 7,
        expansion: 6,
        shortcut: false,
    }
    .mac_count(&shape);
    assert_eq!(big, 8 * 8 * 6 * (2 + 49));
    assert!(big > small);
}
