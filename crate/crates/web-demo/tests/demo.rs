use mflab_web::{compare, field_on_grid, inference_gflops, T_END};

#[test]
fn grid_layout_and_center_velocity() {
    let f = field_on_grid(8, 1.0, 0.5, 5, 2.0).unwrap();
    assert_eq!(f.len(), 5 * 5 * 4);
    assert_eq!(&f[..2], &[-2.0, -2.0]);
    // The symmetric ring has zero mean, so the origin stays put.
    let c = &f[12 * 4..13 * 4];
    assert_eq!(&c[..2], &[0.0, 0.0]);
    assert!(c[2].abs() < 1e-12 && c[3].abs() < 1e-12, "{c:?}");
}

#[test]
fn exact_jump_lands_near_atoms_and_beats_one_euler_step() {
    let c = compare(8, 1.0, 64, 1, 5).unwrap();
    assert_eq!((c.noise.len(), c.euler.len(), c.exact.len()), (64, 64, 64));
    for p in &c.exact {
        let r = p[0].hypot(p[1]);
        assert!((r - 1.0).abs() < 5.0 * T_END, "{p:?}");
    }
    // One Euler step from pure noise collapses toward the data mean.
    for (p, z) in c.euler.iter().zip(&c.noise) {
        let want = T_END * z[0].hypot(z[1]);
        assert!((p[0].hypot(p[1]) - want).abs() < 1e-12, "{p:?}");
    }
    assert!(c.exact_ed < c.euler_ed);
}

#[test]
fn many_euler_steps_approach_the_exact_map() {
    let coarse = compare(8, 1.0, 32, 4, 9).unwrap();
    let fine = compare(8, 1.0, 32, 256, 9).unwrap();
    let gap = |c: &mflab_web::Comparison| {
        c.euler
            .iter()
            .zip(&c.exact)
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .fold(0.0, f64::max)
    };
    assert!(gap(&fine) < gap(&coarse));
    assert!(gap(&fine) < 0.05, "{}", gap(&fine));
}

#[test]
fn empty_and_invalid_inputs() {
    let c = compare(8, 1.0, 0, 4, 1).unwrap();
    assert!(c.exact.is_empty() && c.euler_ed == 0.0);
    assert!(compare(0, 1.0, 4, 4, 1).is_err());
    assert!(field_on_grid(8, -1.0, 0.5, 3, 1.0).is_err());
}

#[test]
fn budget_totals() {
    assert_eq!(inference_gflops(310.0, 114.0, 2).unwrap(), 538.0);
    assert_eq!(inference_gflops(106.0, 157.0, 1).unwrap(), 263.0);
}
