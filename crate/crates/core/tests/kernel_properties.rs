use convcnp::kernels::{KernelSpec, JITTER};
use convcnp::rng::rng;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

const KERNELS: [KernelSpec; 3] = [KernelSpec::eq(), KernelSpec::matern52(), KernelSpec::weakly_periodic()];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kernels_are_stationary(x in -5.0f64..5.0, x2 in -5.0f64..5.0, tau in -10.0f64..10.0) {
        for k in KERNELS {
            let a = k.eval(x, x2);
            let b = k.eval(x + tau, x2 + tau);
            prop_assert!((a - b).abs() < 1e-12, "{}: {a} vs {b}", k.name());
        }
    }

    #[test]
    fn kernels_are_symmetric(x in -5.0f64..5.0, x2 in -5.0f64..5.0) {
        for k in KERNELS {
            prop_assert_eq!(k.eval(x, x2), k.eval(x2, x));
        }
    }

    #[test]
    fn eq_is_non_negative(x in -50.0f64..50.0, x2 in -50.0f64..50.0, ls in 0.01f64..5.0) {
        let k = KernelSpec::Eq { length_scale: ls, amplitude: 1.0 };
        prop_assert!(k.eval(x, x2) >= 0.0);
    }
}

#[test]
fn jittered_gram_factorises_on_random_sets() {
    assert_eq!(JITTER, 1e-6);
    let mut r = rng(2024);
    for k in KERNELS {
        for set in 0..1000 {
            let xs: Vec<f64> = (0..20).map(|_| r.random_range(-2.0..2.0)).collect();
            let gram = k.gram(&xs) + DMatrix::identity(20, 20) * JITTER;
            assert!(gram.cholesky().is_some(), "{} set {set}", k.name());
        }
    }
}
