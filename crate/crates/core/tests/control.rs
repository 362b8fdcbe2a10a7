use approx::assert_abs_diff_eq;
use blockflow::control::*;
use blockflow::linalg::Matrix;
use proptest::prelude::*;

fn m(rows: &[&[f64]]) -> Matrix<f64> {
    Matrix::from_rows(rows)
}

fn siso(a: Matrix<f64>, b: Matrix<f64>, c: Matrix<f64>, d: f64) -> StateSpace<f64> {
    StateSpace::continuous(a, b, c, Matrix::scalar(d)).unwrap()
}

#[test]
fn zoh_examples() {
    let z = c2d_zoh(&siso(m(&[&[0.0]]), m(&[&[1.0]]), m(&[&[1.0]]), 0.0), 0.5).unwrap();
    assert_eq!(z.a, m(&[&[1.0]]));
    assert_eq!(z.b, m(&[&[0.5]]));
    assert_eq!(z.sample_time, SampleTime::Discrete(0.5));

    let z = c2d_zoh(&siso(m(&[&[-1.0]]), m(&[&[1.0]]), m(&[&[1.0]]), 0.0), 1.0).unwrap();
    let e = (-1f64).exp();
    assert_abs_diff_eq!(z.a[(0, 0)], e, epsilon = 1e-9);
    assert_abs_diff_eq!(z.b[(0, 0)], 1.0 - e, epsilon = 1e-9);
    assert_abs_diff_eq!(z.a[(0, 0)], 0.367879, epsilon = 1e-6);
    assert_abs_diff_eq!(z.b[(0, 0)], 0.632121, epsilon = 1e-6);

    let di = siso(
        m(&[&[0.0, 1.0], &[0.0, 0.0]]),
        m(&[&[0.0], &[1.0]]),
        m(&[&[1.0, 0.0]]),
        0.0,
    );
    let z = c2d_zoh(&di, 1.0).unwrap();
    assert_eq!(z.a, m(&[&[1.0, 1.0], &[0.0, 1.0]]));
    assert_abs_diff_eq!(z.b[(0, 0)], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(z.b[(1, 0)], 1.0, epsilon = 1e-15);
    assert_eq!(c2d_zoh(&z, 1.0), Err(ControlError::AlreadyDiscrete));
}

#[test]
fn tustin_examples() {
    let b = m(&[&[2.0], &[3.0]]);
    let zero = StateSpace::continuous(
        Matrix::zeros(2, 2),
        b.clone(),
        m(&[&[1.0, 0.0]]),
        Matrix::scalar(0.0),
    )
    .unwrap();
    let t = c2d_tustin(&zero, 0.1).unwrap();
    assert_eq!(t.a, Matrix::identity(2));
    assert_eq!(t.b, b.scale(0.1));

    let t = c2d_tustin(&siso(m(&[&[-1.0]]), m(&[&[1.0]]), m(&[&[1.0]]), 0.0), 2.0).unwrap();
    assert_eq!(t.a[(0, 0)], 0.0);

    let sing = siso(m(&[&[2.0 / 0.5]]), m(&[&[1.0]]), m(&[&[1.0]]), 0.0);
    assert_eq!(
        c2d_tustin(&sing, 0.5),
        Err(ControlError::DiscretizationSingularity)
    );
}

#[test]
fn dlqr_examples() {
    let one = m(&[&[1.0]]);
    let sol = dlqr(&m(&[&[0.0]]), &one, &one, &one).unwrap();
    assert_abs_diff_eq!(sol.p[(0, 0)], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(sol.k[(0, 0)], 0.0, epsilon = 1e-12);

    let sol = dlqr(&one, &one, &one, &one).unwrap();
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    assert_abs_diff_eq!(sol.p[(0, 0)], phi, epsilon = 1e-10);
    assert_abs_diff_eq!(sol.k[(0, 0)], phi / (1.0 + phi), epsilon = 1e-10);
    assert_abs_diff_eq!(sol.p[(0, 0)], 1.6180340, epsilon = 1e-6);
    assert_abs_diff_eq!(sol.k[(0, 0)], 0.6180340, epsilon = 1e-6);

    assert!(matches!(
        dlqr(&m(&[&[2.0]]), &m(&[&[0.0]]), &one, &one),
        Err(ControlError::RiccatiNoConvergence { .. })
    ));
    assert!(matches!(
        dlqr(&one, &m(&[&[1.0, 2.0]]), &one, &one),
        Err(ControlError::DimensionMismatch(_))
    ));
}

#[test]
fn ss2tf_examples() {
    let tf = ss2tf(&siso(m(&[&[0.0]]), m(&[&[1.0]]), m(&[&[1.0]]), 0.0)).unwrap();
    assert_eq!((tf.num, tf.den), (vec![1.0], vec![1.0, 0.0]));

    let tf = ss2tf(&siso(m(&[&[-1.0]]), m(&[&[1.0]]), m(&[&[1.0]]), 0.0)).unwrap();
    assert_eq!((tf.num, tf.den), (vec![1.0], vec![1.0, 1.0]));

    let di = siso(
        m(&[&[0.0, 1.0], &[0.0, 0.0]]),
        m(&[&[0.0], &[1.0]]),
        m(&[&[1.0, 0.0]]),
        0.0,
    );
    let tf = ss2tf(&di).unwrap();
    assert_eq!((tf.num, tf.den), (vec![1.0], vec![1.0, 0.0, 0.0]));

    let mimo = StateSpace::continuous(
        m(&[&[0.0]]),
        m(&[&[1.0, 1.0]]),
        m(&[&[1.0]]),
        m(&[&[0.0, 0.0]]),
    )
    .unwrap();
    assert!(matches!(
        ss2tf(&mimo),
        Err(ControlError::UnsupportedShape(_))
    ));
}

#[test]
fn tf2ss_examples() {
    let ss = tf2ss(&TransferFunction::continuous(vec![1.0], vec![1.0, 1.0]).unwrap()).unwrap();
    assert_eq!(ss.a, m(&[&[-1.0]]));
    assert_eq!(ss.b, m(&[&[1.0]]));
    assert_eq!(ss.c, m(&[&[1.0]]));
    assert_eq!(ss.d, m(&[&[0.0]]));

    let ss = tf2ss(&TransferFunction::continuous(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap()).unwrap();
    assert_eq!(ss.d, m(&[&[1.0]]));
    assert_eq!(ss.c, m(&[&[1.0]]));
    assert_eq!(ss.a, m(&[&[-1.0]]));

    let improper = TransferFunction::continuous(vec![1.0, 0.0, 0.0], vec![1.0, 1.0]).unwrap();
    assert_eq!(
        tf2ss(&improper),
        Err(ControlError::ImproperTransferFunction)
    );
    assert_eq!(
        TransferFunction::continuous(vec![1.0], vec![0.0, 1.0]),
        Err(ControlError::ZeroDenominator)
    );
}

#[test]
fn tf2ss_normalizes_to_monic() {
    let tf = TransferFunction::continuous(vec![2.0], vec![2.0, 4.0]).unwrap();
    let back = ss2tf(&tf2ss(&tf).unwrap()).unwrap();
    assert_eq!(back.den, vec![1.0, 2.0]);
    assert_eq!(back.num, vec![1.0]);
}

fn poly_from_roots(roots: &[f64]) -> Vec<f64> {
    let mut p = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; p.len() + 1];
        for (i, &c) in p.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= r * c;
        }
        p = next;
    }
    p
}

fn stable_matrix(n: usize, entries: &[f64]) -> Matrix<f64> {
    let mut a = Matrix::from_vec(n, n, entries[..n * n].to_vec());
    let shift = a.norm_inf() + 0.1;
    for i in 0..n {
        a[(i, i)] -= shift;
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn tf_round_trip(
        roots in prop::collection::vec(-3.0f64..-0.1, 1..=4),
        num in prop::collection::vec(-2.0f64..2.0, 5),
        gain in 0.5f64..3.0,
    ) {
        let n = roots.len();
        let den: Vec<f64> = poly_from_roots(&roots).iter().map(|c| c * gain).collect();
        let tf = TransferFunction::continuous(num[..=n].to_vec(), den).unwrap();
        let back = ss2tf(&tf2ss(&tf).unwrap()).unwrap();
        let want = tf.monic();
        prop_assert_eq!(back.den.len(), want.den.len());
        for (x, y) in back.den.iter().zip(&want.den) {
            prop_assert!((x - y).abs() <= 1e-8, "{:?} vs {:?}", back.den, want.den);
        }
        for (x, y) in back.padded_num().iter().zip(&want.padded_num()) {
            prop_assert!((x - y).abs() <= 1e-8, "{:?} vs {:?}", back.num, want.num);
        }
    }

    #[test]
    fn zoh_tustin_agree_to_second_order(n in 1usize..=4, entries in prop::collection::vec(-1.0f64..1.0, 16)) {
        let a = stable_matrix(n, &entries);
        let sys = StateSpace::continuous(a, Matrix::zeros(n, 1), Matrix::zeros(1, n), Matrix::zeros(1, 1)).unwrap();
        let d2 = zoh_tustin_discrepancy(&sys, 1e-2).unwrap();
        let d3 = zoh_tustin_discrepancy(&sys, 1e-3).unwrap();
        let ratio = d2 / d3;
        prop_assert!((50.0..=200.0).contains(&ratio), "ratio {}", ratio);
    }

    #[test]
    fn dlqr_residual_and_stability(
        n in 1usize..=4,
        m in 1usize..=2,
        a in prop::collection::vec(-1.5f64..1.5, 16),
        b in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let a = Matrix::from_vec(n, n, a[..n * n].to_vec());
        let mut b = Matrix::from_vec(n, m, b[..n * m].to_vec());
        // Keep the pair comfortably controllable.
        for i in 0..n.min(m) {
            b[(i, i)] += 1.0;
        }
        let q = Matrix::identity(n);
        let r = Matrix::identity(m);
        let sol = dlqr(&a, &b, &q, &r).unwrap();
        let res = dare_residual(&a, &b, &q, &r, &sol.p).unwrap();
        prop_assert!(res <= 1e-9 * sol.p.norm_inf().max(1.0), "residual {}", res);
        let closed = &a - &(&b * &sol.k);
        prop_assert!(spectral_radius_estimate(&closed, 12) < 1.0);
    }
}

#[test]
fn expm_matches_series_on_small_matrix() {
    let a = m(&[&[0.1, 0.2], &[-0.3, 0.05]]);
    let mut term = Matrix::identity(2);
    let mut sum = Matrix::identity(2);
    for k in 1..30 {
        term = (&term * &a).scale(1.0 / k as f64);
        sum = &sum + &term;
    }
    let e = expm(&a);
    assert!((&e - &sum).max_abs() < 1e-14);
}
