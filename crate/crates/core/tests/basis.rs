use approx::assert_abs_diff_eq;
use biquant::basis::*;
use proptest::prelude::*;

/// Textbook recursive Cox-de Boor definition with the right-closed last span.
fn naive(knots: &[f64], i: usize, p: usize, t: f64, last: usize) -> f64 {
    if p == 0 {
        let inside = knots[i] <= t && t < knots[i + 1];
        let at_end = t == knots[knots.len() - 1] && i == last;
        return if inside || at_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        v += (t - knots[i]) / d1 * naive(knots, i, p - 1, t, last);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + p + 1] - t) / d2 * naive(knots, i + 1, p - 1, t, last);
    }
    v
}

#[test]
fn partition_of_unity_on_a_fine_grid() {
    for m in 2..=12 {
        let b = SplineBasis::new(m, -3.0, 7.0).unwrap();
        for k in 0..=10_000 {
            let t = -3.0 + 10.0 * k as f64 / 10_000.0;
            let v = b.eval(t).unwrap();
            assert_abs_diff_eq!(v.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(v.iter().all(|&x| x >= -1e-15));
            assert!(v.iter().filter(|&&x| x != 0.0).count() <= b.degree() + 1);
        }
    }
}

#[test]
fn matches_recursive_definition() {
    for m in [3, 4, 5, 8, 11] {
        let b = SplineBasis::new(m, 0.0, 2.0).unwrap();
        let p = b.degree();
        // Index of the last nonempty span's degree-0 function.
        let last = b.knots().len() - p - 2;
        for k in 0..=200 {
            let t = 2.0 * k as f64 / 200.0;
            let v = b.eval(t).unwrap();
            for (i, &vi) in v.iter().enumerate() {
                assert_abs_diff_eq!(vi, naive(b.knots(), i, p, t, last), epsilon = 1e-13);
            }
        }
    }
}

#[test]
fn design_layouts_and_labels() {
    let times: Vec<f64> = (1..=24).map(|t| t as f64).collect();
    let plain = build_design(DesignLayout::Plain { m: 6 }, &times, 2).unwrap();
    assert_eq!(plain.row_width(), 6);
    assert_eq!(plain.layout().label(), "6");
    let seasonal = build_design(DesignLayout::Seasonal { m1: 5, m2: 3, m3: 4 }, &times, 2).unwrap();
    assert_eq!(seasonal.row_width(), 12);
    assert_eq!(seasonal.layout().label(), "5-3-4");
    assert!(build_design(DesignLayout::Plain { m: 3 }, &times, 2).is_err());
    assert!(build_design(DesignLayout::Seasonal { m1: 3, m2: 3, m3: 3 }, &times, 2).is_err());
}

#[test]
fn seasonal_row_is_modulated_trend() {
    let times: Vec<f64> = (1..=36).map(|t| t as f64).collect();
    let d = seasonal_design(4, 4, 4, &times, 2).unwrap();
    let b = SplineBasis::new(4, 1.0, 36.0).unwrap();
    for (t, &time) in times.iter().enumerate() {
        let base = b.eval(time).unwrap();
        let (s, c) = (std::f64::consts::PI * time / 6.0).sin_cos();
        let row = d.row(t);
        for k in 0..4 {
            assert_abs_diff_eq!(row[k], base[k], epsilon = 1e-15);
            assert_abs_diff_eq!(row[4 + k], base[k] * c, epsilon = 1e-15);
            assert_abs_diff_eq!(row[8 + k], base[k] * s, epsilon = 1e-15);
        }
    }
}

proptest! {
    #[test]
    fn unity_at_random_points(m in 2usize..15, lo in -100.0f64..100.0, width in 0.1f64..500.0, u in 0.0f64..=1.0) {
        let b = SplineBasis::new(m, lo, lo + width).unwrap();
        let t = (lo + u * width).min(lo + width);
        let v = b.eval(t).unwrap();
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
