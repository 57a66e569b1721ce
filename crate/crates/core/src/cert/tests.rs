use super::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn bound_examples() {
    let (lo, up) = level_transition_bounds(0.0, 1.0, 0.1, 0.5).unwrap();
    assert!((lo - 0.8).abs() < 1e-15);
    assert_eq!(up, 1.0);
    // all mass at theta1 makes P(V < theta2) = 1, above the naive formula
    assert!((naive_upper_bound(1.0, 0.1, 0.5) - 0.8).abs() < 1e-15);
    assert!(1.0 > naive_upper_bound(1.0, 0.1, 0.5));
    let (lo, _) = level_transition_bounds(0.0, 1.0, 0.5 - 1e-12, 0.5).unwrap();
    assert!(lo < 1e-11);
    assert!(level_transition_bounds(0.0, 1.0, 0.5, 0.5).is_err());
    assert!(level_transition_bounds(0.2, 1.0, 0.1, 0.5).is_err());
    assert!(level_transition_bounds(0.0, 0.5, 0.1, 0.5).is_err());
}

#[test]
fn two_atom_lattice_never_violates_the_bounds() {
    let (vmin, vmax, t1, t2) = (0.0, 1.0, 0.3, 0.6);
    let (lo, up) = level_transition_bounds(vmin, vmax, t1, t2).unwrap();
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    for &a in &grid {
        for &b in &grid {
            for w in 0..=20 {
                let pa = w as f64 / 20.0;
                let mean = pa * a + (1.0 - pa) * b;
                let prob = pa * f64::from(u8::from(a < t2)) + (1.0 - pa) * f64::from(u8::from(b < t2));
                if mean <= t1 {
                    assert!(lo <= prob + 1e-12 && prob <= up + 1e-12);
                }
            }
        }
    }
}

#[test]
fn ladder_closed_form_and_ordering() {
    for (lam, vt) in [(0.1, 0.5), (0.3, 0.2), (0.2, 0.05)] {
        let l = build_level_ladder(lam, 0.5, 1.0, 0.0, vt, MarginShift::Minus, DEFAULT_MAX_LEVELS).unwrap();
        let inner = *l.thresholds.last().unwrap();
        assert!((inner - 0.5 / (1.0 + (vt - 1.0) * lam)).abs() < 1e-10);
        assert!(l.thresholds.windows(2).all(|w| w[0] > w[1]));
        assert!(l.thresholds[0] <= 1.0);
        for w in l.thresholds.windows(2) {
            assert!((w[0] - (w[1] + vt * lam * w[1])).abs() < 1e-12);
        }
    }
    assert!(build_level_ladder(0.0, 0.5, 1.0, 0.0, 0.5, MarginShift::Minus, 100).is_err());
    assert!(build_level_ladder(0.1, 0.99, 1.0, 0.0, 0.5, MarginShift::Minus, 100).is_err());
    assert!(build_level_ladder(0.1, 0.5, 1.0, 0.0, 1.0, MarginShift::Minus, 100).is_err());
}

#[test]
fn closed_form_chains() {
    let stay = TransitionBoundMatrix::from_columns(vec![vec![1.0]]).unwrap();
    for k in [0, 1, 10, 100] {
        assert_eq!(stay.escape_after(&[0.0, 1.0], k), 0.0);
    }
    let q = 0.03;
    let leak = TransitionBoundMatrix::from_columns(vec![vec![1.0 - q]]).unwrap();
    let a = leak.augmented();
    assert_eq!((a[0][0], a[1][0], a[1][1]), (1.0, 0.0, 1.0 - q));
    assert!((a[0][1] - q).abs() < 1e-15);
    for k in [1, 10, 50] {
        let exact = 1.0 - (1.0 - q).powi(k as i32);
        assert!((leak.escape_after(&[0.0, 1.0], k) - exact).abs() < 1e-12);
    }
    // Monte-Carlo replay of the same chain
    let mut rng = RandomSource::new(4, 0);
    let n = 100_000;
    let k = 20;
    let hits = (0..n).filter(|_| (0..k).any(|_| rng.gen_bool(q))).count();
    let (lo, hi) = wilson_interval(hits, n, Z95);
    let exact = 1.0 - (1.0 - q).powi(k);
    assert!(lo - 1e-3 <= exact && exact <= hi + 1e-3, "{lo} {exact} {hi}");
}

#[test]
fn rederived_matrix_is_left_stochastic_and_delta_is_monotone() {
    let ladder = build_level_ladder(0.2, 0.3, 1.0, 0.0, 0.1, MarginShift::Minus, DEFAULT_MAX_LEVELS).unwrap();
    let m = transition_bounds(&ladder, 5.0, TransitionBoundRule::Rederived);
    for col in 0..m.levels() + 1 {
        let s: f64 = m.augmented().iter().map(|r| r[col]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let mut prev = 0.0;
    for k in 0..60 {
        let d = delta_fl(&ladder, 5.0, k, TransitionBoundRule::Rederived)
            .unwrap()
            .delta_fl;
        assert!(d >= prev - 1e-15 && (0.0..=1.0).contains(&d));
        prev = d;
    }
    assert_eq!(
        delta_fl(&ladder, 5.0, 0, TransitionBoundRule::Rederived)
            .unwrap()
            .delta_fl,
        0.0
    );
}

#[test]
fn nearest_rules_produce_valid_matrices() {
    for rule in [TransitionBoundRule::NearestPlus, TransitionBoundRule::NearestMinus] {
        let ladder = build_level_ladder(0.3, 0.3, 1.0, 0.1, 0.2, rule.shift(), DEFAULT_MAX_LEVELS).unwrap();
        let m = transition_bounds(&ladder, 3.0, rule);
        for col in 1..=m.levels() {
            let s: f64 = m.augmented().iter().map(|r| r[col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let r = delta_fl(&ladder, 3.0, 10, rule).unwrap();
        assert!((0.0..=1.0).contains(&r.delta_fl));
    }
}

#[test]
fn certify_takes_the_best_vartheta() {
    let input = CertInput::new(0.2, 0.3, 1.0, 0.0, 10.0, 0.0).unwrap();
    let r = certify(&input, 50, &CertOptions::default()).unwrap();
    let best = r.per_vartheta.iter().filter_map(|p| p.1).fold(f64::INFINITY, f64::min);
    assert_eq!(r.delta_fl, best);
    let with_f = certify(
        &input,
        50,
        &CertOptions {
            delta_f: 0.1,
            ..CertOptions::default()
        },
    )
    .unwrap();
    assert!((with_f.delta - (best + 0.1 - 0.1 * best)).abs() < 1e-15);
    let json = serde_json::to_string(&r).unwrap();
    let back: CertificateReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

/// Random chain over states with increasing values where every state below
/// `level` satisfies a linear drift of rate at least `lambda`.
pub(crate) fn drift_chain(n: usize, level: f64, rng: &mut RandomSource) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * level)).collect();
    v.sort_by(f64::total_cmp);
    v[0] = 0.0;
    let lambda = rng.gen_range(0.05..0.5);
    let mut p = vec![vec![0.0; n]; n];
    p[0][0] = 1.0;
    for s in 1..n {
        let mut row: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    rng.gen_range(0.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        row[s] += 0.1;
        let t: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= t);
        let mean: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        let target = (1.0 - lambda) * v[s];
        if v[s] < level && mean > target {
            // mix with a jump to the bottom state
            let rho = (mean - target) / mean;
            row.iter_mut().for_each(|x| *x *= 1.0 - rho);
            row[0] += rho;
        }
        p[s] = row;
    }
    (p, v)
}

pub(crate) fn exact_escape(p: &[Vec<f64>], v: &[f64], start: usize, level: f64, k: usize) -> f64 {
    let n = v.len();
    let mut dist = vec![0.0; n];
    dist[start] = 1.0;
    let mut escaped = 0.0;
    for _ in 0..k {
        let mut next = vec![0.0; n];
        for s in 0..n {
            for t in 0..n {
                next[t] += dist[s] * p[s][t];
            }
        }
        for t in 0..n {
            if v[t] > level {
                escaped += next[t];
                next[t] = 0.0;
            }
        }
        dist = next;
    }
    escaped
}

#[test]
fn chain_certificates_never_undercut_the_exact_escape_probability() {
    let mut rng = RandomSource::new(77, 0);
    let mut checked = 0;
    while checked < 15 {
        let (p, v) = drift_chain(12, 1.0, &mut rng);
        let start = v.iter().rposition(|x| *x < 0.5).unwrap_or(0);
        for k in [10, 50, 100] {
            match certify_chain(&p, &v, start, 1.0, k, &CertOptions::default()) {
                Ok(r) => {
                    let exact = exact_escape(&p, &v, start, 1.0, k);
                    assert!(r.delta_fl >= exact - 1e-12, "delta {} < exact {}", r.delta_fl, exact);
                    checked += 1;
                }
                Err(_) => continue,
            }
        }
    }
}

proptest! {
    #[test]
    fn lower_bound_is_sound_for_three_atoms(
        a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0,
        wa in 0.0f64..1.0, wb in 0.0f64..1.0, t1 in 0.0f64..0.9, gap in 0.01f64..0.5,
    ) {
        let t2 = (t1 + gap).min(0.99);
        prop_assume!(t2 > t1);
        let (wa, wb) = (wa / 2.0, wb / 2.0);
        let wc = 1.0 - wa - wb;
        let mean = wa * a + wb * b + wc * c;
        prop_assume!(mean <= t1);
        let prob: f64 = [(a, wa), (b, wb), (c, wc)].iter().filter(|(x, _)| *x < t2).map(|(_, w)| w).sum();
        let (lo, up) = level_transition_bounds(0.0, 1.0, t1, t2).unwrap();
        prop_assert!(lo <= prob + 1e-12 && prob <= up + 1e-12);
    }

    #[test]
    fn delta_shrinks_as_xi_decreases(xi in 0.05f64..0.6, dxi in 0.0f64..0.04) {
        let opts = CertOptions::default();
        let hi = CertInput::new(0.3, xi, 1.0, 0.0, 10.0, 0.0).unwrap();
        let lo = CertInput::new(0.3, xi - dxi, 1.0, 0.0, 10.0, 0.0).unwrap();
        // the comparison is on a fixed ladder
        for vt in DEFAULT_VARTHETAS {
            let l = build_level_ladder(0.3, xi, 1.0, 0.0, vt, MarginShift::Minus, DEFAULT_MAX_LEVELS);
            if let Ok(l) = l {
                let mut l2 = l.clone();
                l2.xi = xi - dxi;
                let a = delta_fl(&l, 10.0, 30, opts.rule).unwrap().delta_fl;
                let b = delta_fl(&l2, 10.0, 30, opts.rule).unwrap().delta_fl;
                prop_assert!(b <= a + 1e-12);
            }
        }
        let _ = (hi, lo);
    }
}
