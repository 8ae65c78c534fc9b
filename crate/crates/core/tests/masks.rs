mod common;

use gmconv_core::mask::{circular_mask, elliptic_mask, mask_grad, MaskParams, SIGMA_MAX, SIGMA_MIN};
use proptest::prelude::*;

use common::{literal_circular, literal_elliptic};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The 8 dihedral images of cell `(r, c)` on a `k x k` grid.
fn dihedral(r: usize, c: usize, k: usize) -> [(usize, usize); 8] {
    let (rr, cc) = (k - 1 - r, k - 1 - c);
    [(r, c), (c, rr), (rr, cc), (cc, r), (r, cc), (rr, c), (c, r), (cc, rr)]
}

proptest! {
    #[test]
    fn circular_matches_literal(sigma in 0.1f64..100.0, k in 1usize..14) {
        let m = circular_mask(sigma, k).unwrap();
        prop_assert!(max_diff(m.values(), &literal_circular(sigma, k)) < 1e-12);
    }

    #[test]
    fn elliptic_matches_literal(s1 in 0.1f64..100.0, s2 in 0.1f64..100.0, k in 1usize..14) {
        let m = elliptic_mask(s1, s2, k).unwrap();
        prop_assert!(max_diff(m.values(), &literal_elliptic(s1, s2, k)) < 1e-12);
    }

    #[test]
    fn values_in_unit_interval_with_unit_peak(s1 in 1e-3f64..1e3, s2 in 1e-3f64..1e3, k in 1usize..14) {
        for m in [circular_mask(s1, k).unwrap(), elliptic_mask(s1, s2, k).unwrap()] {
            prop_assert!(m.values().iter().all(|v| *v > 0.0 || *v == 0.0 && s1.min(s2) < 1.0));
            prop_assert!(m.values().iter().all(|v| *v <= 1.0));
            prop_assert_eq!(m.values().iter().copied().fold(0.0, f64::max), 1.0);
            if k % 2 == 1 {
                prop_assert_eq!(m.at(k / 2, k / 2), 1.0);
            }
        }
    }

    #[test]
    fn circular_odd_is_dihedral_symmetric(sigma in 0.01f64..50.0, half in 0usize..7) {
        let k = 2 * half + 1;
        let m = circular_mask(sigma, k).unwrap();
        for r in 0..k {
            for c in 0..k {
                for (r2, c2) in dihedral(r, c, k) {
                    prop_assert_eq!(m.at(r, c), m.at(r2, c2));
                }
            }
        }
    }

    #[test]
    fn monotone_in_distance(sigma in 0.05f64..50.0, k in 1usize..14) {
        let m = circular_mask(sigma, k).unwrap();
        let c = (k as f64 - 1.0) / 2.0;
        let d2 = |i: usize| {
            let (y, x) = ((i / k) as f64 - c, (i % k) as f64 - c);
            x * x + y * y
        };
        for i in 0..k * k {
            for j in 0..k * k {
                if d2(i) < d2(j) {
                    prop_assert!(m.values()[i] >= m.values()[j]);
                }
            }
        }
    }

    #[test]
    fn monotone_in_sigma(s in 0.05f64..50.0, grow in 1.0f64..4.0, k in 1usize..12) {
        let small = circular_mask(s, k).unwrap();
        let large = circular_mask(s * grow, k).unwrap();
        prop_assert!(small.values().iter().zip(large.values()).all(|(a, b)| a <= b));
    }

    #[test]
    fn sign_of_sigma_is_ignored(s in 0.05f64..50.0, k in 1usize..10) {
        let (neg, pos) = (circular_mask(-s, k).unwrap(), circular_mask(s, k).unwrap());
        prop_assert_eq!(neg.values(), pos.values());
    }

    #[test]
    fn sigma_gradient_matches_finite_differences(s1 in 0.3f64..20.0, s2 in 0.3f64..20.0, k in 2usize..10) {
        let h = 1e-6;
        let g = mask_grad(&MaskParams::circular(s1, k)).unwrap();
        let fd: Vec<f64> = circular_mask(s1 + h, k).unwrap().values().iter()
            .zip(circular_mask(s1 - h, k).unwrap().values())
            .map(|(a, b)| (a - b) / (2.0 * h)).collect();
        for (a, n) in g.d_sigma1.iter().zip(&fd) {
            prop_assert!(common::rel_err(*a, *n) < 1e-5, "{} vs {}", a, n);
        }
        let g = mask_grad(&MaskParams::elliptic(s1, s2, k)).unwrap();
        let fd2: Vec<f64> = elliptic_mask(s1, s2 + h, k).unwrap().values().iter()
            .zip(elliptic_mask(s1, s2 - h, k).unwrap().values())
            .map(|(a, b)| (a - b) / (2.0 * h)).collect();
        for (a, n) in g.d_sigma2.unwrap().iter().zip(&fd2) {
            prop_assert!(common::rel_err(*a, *n) < 1e-5, "{} vs {}", a, n);
        }
    }
}

#[test]
fn clamp_limits() {
    for k in [3, 5, 11] {
        let flat = circular_mask(SIGMA_MAX, k).unwrap();
        assert!(flat.values().iter().all(|v| *v >= 1.0 - 1e-9));
        let beyond = circular_mask(1e9, k).unwrap();
        assert_eq!(beyond.values(), flat.values());

        let delta = circular_mask(SIGMA_MIN, k).unwrap();
        let centre = (k / 2) * k + k / 2;
        for (i, v) in delta.values().iter().enumerate() {
            if i == centre {
                assert_eq!(*v, 1.0);
            } else {
                assert!(*v < 1e-300);
            }
        }
        assert_eq!(circular_mask(1e-9, k).unwrap().values(), delta.values());
    }
}

#[test]
fn clamped_sigma_has_zero_gradient() {
    for s in [SIGMA_MIN, SIGMA_MAX, 1e-6, 1e8, -1e8] {
        let g = mask_grad(&MaskParams::circular(s, 5)).unwrap();
        assert!(g.d_sigma1.iter().all(|v| *v == 0.0), "sigma {s}");
    }
}

#[test]
fn elliptic_axes_are_horizontal_then_vertical() {
    // wide sigma1 keeps the middle row bright, narrow sigma2 darkens the middle column
    let m = elliptic_mask(10.0, 0.5, 5).unwrap();
    assert!(m.at(2, 0) > 0.9);
    assert!(m.at(0, 2) < 1e-3);
}
