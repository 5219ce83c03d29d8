use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rins_core::scaling::{fit_power_law, log_grid, optimal_r, FitResult, RCurveFamily};

fn synthetic(beta: f64, c: f64, eps: f64) -> Vec<(f64, f64)> {
    log_grid(1e2, 1e6, 20).into_iter().map(|x| (x, beta * x.powf(-c) + eps)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn noisy_recovery_median_within_five_percent() {
    let noise = LogNormal::new(0.0, 0.01).unwrap();
    let mut errs = [vec![], vec![], vec![]];
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<_> = synthetic(2.0, 0.5, 0.1)
            .into_iter()
            .map(|(x, y)| (x, y * noise.sample(&mut rng)))
            .collect();
        let f = fit_power_law(&pts).unwrap();
        errs[0].push(rel(f.beta, 2.0));
        errs[1].push(rel(f.c, 0.5));
        errs[2].push(rel(f.eps_inf, 0.1));
    }
    for (name, e) in ["beta", "c", "eps_inf"].iter().zip(errs) {
        let m = median(e);
        assert!(m < 0.05, "{name}: median relative error {m}");
    }
}

#[test]
fn rescaling_compute_keeps_exponent() {
    let pts = synthetic(2.0, 0.5, 0.1);
    let base = fit_power_law(&pts).unwrap();
    for k in [1e-3, 7.0, 1e4] {
        let scaled: Vec<_> = pts.iter().map(|&(x, y)| (k * x, y)).collect();
        let f = fit_power_law(&scaled).unwrap();
        assert!(rel(f.c, base.c) < 0.01);
        // loss = beta * x^-c = (beta k^c) (k x)^-c
        assert!(rel(f.beta, base.beta * k.powf(base.c)) < 0.01);
        assert!(rel(f.eps_inf, base.eps_inf) < 1e-9);
    }
}

fn exact(beta: f64, c: f64, eps_inf: f64) -> FitResult {
    FitResult {
        beta,
        c,
        eps_inf,
        residual: 0.0,
        n_points: 20,
        x_min: 1e2,
        x_max: 1e8,
    }
}

/// Plain bisection on `ln x` for the crossing of two curves.
fn bisect_crossover(a: &FitResult, b: &FitResult, mut lo: f64, mut hi: f64) -> f64 {
    let g = |x: f64| a.predict(x) - b.predict(x);
    let s_lo = g(lo).signum();
    for _ in 0..200 {
        let mid = ((lo.ln() + hi.ln()) / 2.0).exp();
        if g(mid).signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

#[test]
fn crossover_matches_bisection() {
    let a = exact(1.0, 0.3, 1.0);
    let b = exact(4.0, 0.4, 0.8);
    let fam = RCurveFamily::from([(1, a), (2, b)]);
    let opt = optimal_r(&fam, &log_grid(1e2, 1e8, 40)).unwrap();
    assert_eq!(opt.breakpoints.len(), 1);
    let bp = opt.breakpoints[0];
    assert_eq!((bp.r_from, bp.r_to), (1, 2));
    let oracle = bisect_crossover(&a, &b, 1e2, 1e8);
    assert!(rel(bp.x_break, oracle) < 0.02, "{} vs {oracle}", bp.x_break);
    assert!(opt.breakpoints_csv().starts_with("x_break,r\n"));
}

#[test]
fn crossover_from_fitted_curves() {
    let fa = fit_power_law(&synthetic(1.0, 0.3, 1.0)).unwrap();
    let fb = fit_power_law(&synthetic(4.0, 0.4, 0.8)).unwrap();
    let fam = RCurveFamily::from([(1, fa), (2, fb)]);
    let opt = optimal_r(&fam, &log_grid(1e2, 1e6, 60)).unwrap();
    let oracle = bisect_crossover(&exact(1.0, 0.3, 1.0), &exact(4.0, 0.4, 0.8), 1e2, 1e6);
    assert_eq!(opt.breakpoints.len(), 1);
    assert!(rel(opt.breakpoints[0].x_break, oracle) < 0.02);
}

#[test]
fn larger_r_with_larger_beta_and_lower_floor_is_nondecreasing() {
    // beta_r grows and eps_r shrinks with r; every pair crosses once.
    let fam: RCurveFamily = (1..=4)
        .map(|r| (r, exact(1.0 + r as f64, 0.3 + 0.02 * r as f64, 1.2 - 0.1 * r as f64)))
        .collect();
    let opt = optimal_r(&fam, &log_grid(1e1, 1e12, 400)).unwrap();
    assert!(opt.is_nondecreasing());
    let rs: Vec<usize> = opt.points.iter().map(|p| p.r).collect();
    assert_eq!(rs.first(), Some(&1));
    assert_eq!(rs.last(), Some(&4));
}

#[test]
fn argmin_invariant_to_uniform_loss_scaling() {
    let fits: Vec<FitResult> = [(1.0, 0.3, 1.0), (2.5, 0.35, 0.9), (5.0, 0.4, 0.8)]
        .iter()
        .map(|&(b, c, e)| fit_power_law(&synthetic(b, c, e)).unwrap())
        .collect();
    let grid = log_grid(1e2, 1e6, 80);
    let base: RCurveFamily = fits.iter().enumerate().map(|(i, f)| (i + 1, *f)).collect();
    let reference = optimal_r(&base, &grid).unwrap();
    for k in [0.5, 3.0] {
        let scaled: RCurveFamily = [(1.0, 0.3, 1.0), (2.5, 0.35, 0.9), (5.0, 0.4, 0.8)]
            .iter()
            .enumerate()
            .map(|(i, &(b, c, e))| {
                let pts: Vec<_> = synthetic(b, c, e).into_iter().map(|(x, y)| (x, k * y)).collect();
                (i + 1, fit_power_law(&pts).unwrap())
            })
            .collect();
        let opt = optimal_r(&scaled, &grid).unwrap();
        let a: Vec<usize> = opt.points.iter().map(|p| p.r).collect();
        let b: Vec<usize> = reference.points.iter().map(|p| p.r).collect();
        assert_eq!(a, b, "k={k}");
    }
}
