mod common;

use growthmix::fit::{enumerate_classes, fit, FitOptions, Freeze, Optimizer, StartValues};
use growthmix::growth::Frame;
use growthmix::likelihood::{log_likelihood, responsibilities, Design};
use growthmix::mixture::{Gating, MixtureSpec, ModelKind};
use growthmix::simulate::{condition, generate, generate_from, EXPERT_NAMES, GATING_NAMES};

fn data(n: usize, seed: u64) -> growthmix::data::LongitudinalDataset {
    let mut c = condition(1).unwrap();
    c.n = n;
    generate(&c, seed).unwrap().data
}

fn quick() -> FitOptions {
    FitOptions {
        optimizer: Optimizer::DirectQuasiNewton,
        ..FitOptions::default()
    }
}

#[test]
fn single_class_loglik_matches_explicit_oracle() {
    let d = data(200, 3);
    let fm = fit(&MixtureSpec::new(ModelKind::Fmm, 1), &d, None, &quick()).unwrap();
    let c = &fm.original.classes[0];
    let oracle = common::oracle_loglik(&d, &c.beta0, &c.psi, c.gamma, c.residual);
    assert!((oracle - fm.log_likelihood).abs() < 1e-8 * oracle.abs(), "{oracle} vs {}", fm.log_likelihood);
}

#[test]
fn em_is_monotone_and_rows_are_distributions() {
    let d = data(300, 5);
    let spec = MixtureSpec::new(ModelKind::Fmm, 2);
    let fm = fit(&spec, &d, None, &FitOptions::default()).unwrap();
    assert!(fm.trace.len() > 2);
    for w in fm.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "decrease {} -> {}", w[0], w[1]);
    }
    for i in 0..fm.responsibilities.nrows() {
        let s: f64 = fm.responsibilities.row(i).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn canonical_order_and_relabeling_keep_loglik() {
    let d = data(300, 7);
    let spec = MixtureSpec::new(ModelKind::Full, 2).with_gating(GATING_NAMES).with_expert(EXPERT_NAMES);
    let fm = fit(&spec, &d, None, &quick()).unwrap();
    let g: Vec<f64> = fm.estimates.classes.iter().map(|c| c.gamma).collect();
    assert!(g[0] <= g[1]);
    let design = Design::new(&d, &spec).unwrap();
    let swapped = fm.estimates.permuted(&[1, 0]);
    let a = log_likelihood(&spec, &fm.estimates, &design).unwrap();
    let b = log_likelihood(&spec, &swapped, &design).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
    let (canon, _) = swapped.canonicalized();
    assert_eq!(log_likelihood(&spec, &canon, &design).unwrap(), a);
}

#[test]
fn reparameterized_fit_matches_original_frame_loglik() {
    let d = data(300, 9);
    let spec = MixtureSpec::new(ModelKind::Fmm, 2).with_frame(Frame::Reparameterized);
    let fm = fit(&spec, &d, None, &quick()).unwrap();
    let orig_spec = MixtureSpec::new(ModelKind::Fmm, 2);
    let design = Design::new(&d, &orig_spec).unwrap();
    let ll = log_likelihood(&orig_spec, &fm.original, &design).unwrap();
    assert!((ll - fm.log_likelihood).abs() < 1e-6, "{ll} vs {}", fm.log_likelihood);
    // Fitting directly in the original frame reaches the same optimum.
    let fo = fit(&orig_spec, &d, None, &quick()).unwrap();
    assert!((fo.log_likelihood - fm.log_likelihood).abs() < 1e-3 * fo.log_likelihood.abs().sqrt());
}

#[test]
fn uninformative_covariates_reproduce_fmm_posteriors() {
    let d = data(300, 11);
    let fmm_spec = MixtureSpec::new(ModelKind::Fmm, 2);
    let fmm = fit(&fmm_spec, &d, None, &quick()).unwrap();
    let full_spec = MixtureSpec::new(ModelKind::Full, 2).with_gating(GATING_NAMES).with_expert(EXPERT_NAMES);
    let full = common::full_from_fmm(&fmm.estimates, &d);
    let r_full = responsibilities(&full_spec, &full, &Design::new(&d, &full_spec).unwrap()).unwrap();
    let r_fmm = responsibilities(&fmm_spec, &fmm.estimates, &Design::new(&d, &fmm_spec).unwrap()).unwrap();
    assert!((r_full - r_fmm).amax() < 1e-8);
}

#[test]
fn frozen_zero_paths_reproduce_fmm_fit() {
    let d = data(300, 13);
    let tight = FitOptions {
        tolerance: 1e-12,
        ..quick()
    };
    let fmm = fit(&MixtureSpec::new(ModelKind::Fmm, 2), &d, None, &tight).unwrap();
    let spec = MixtureSpec::new(ModelKind::Full, 2).with_gating(GATING_NAMES).with_expert(EXPERT_NAMES);
    let start = common::full_from_fmm(&fmm.estimates, &d);
    let opts = FitOptions {
        freeze: Freeze {
            gating_slopes: true,
            paths: true,
            covariate_moments: true,
            class_params: false,
        },
        ..tight
    };
    let full = fit(&spec, &d, Some(&StartValues { params: start.clone() }), &opts).unwrap();
    assert!(full.converged(), "{:?}", full.status);
    for (a, b) in full.estimates.classes.iter().zip(&fmm.estimates.classes) {
        assert!((a.beta0 - b.beta0).amax() < 1e-4, "{} vs {}", a.beta0, b.beta0);
        assert!((a.psi - b.psi).amax() < 1e-4);
        assert!((a.gamma - b.gamma).abs() < 1e-4);
        assert!((a.residual - b.residual).abs() < 1e-4);
    }
    // Frozen blocks come back bit-for-bit.
    for (a, s) in full.estimates.classes.iter().zip(&start.classes) {
        assert_eq!(a.paths, s.paths);
        assert_eq!(a.cov_mean, s.cov_mean);
        assert_eq!(a.cov_cov, s.cov_cov);
    }
    let (Gating::Logistic(g), Gating::Logistic(g0)) = (&full.estimates.gating, &start.gating) else { panic!() };
    assert_eq!(g.coefficients, g0.coefficients);
}

#[test]
fn same_seed_same_fit() {
    let d = data(200, 15);
    let spec = MixtureSpec::new(ModelKind::Cp, 2).with_gating(GATING_NAMES);
    let a = fit(&spec, &d, None, &quick()).unwrap();
    let b = fit(&spec, &d, None, &quick()).unwrap();
    assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
    assert_eq!(a.estimates, b.estimates);
}

#[test]
fn standard_errors_cover_both_frames() {
    let d = data(300, 17);
    let fm = fit(&MixtureSpec::new(ModelKind::Fmm, 2), &d, None, &quick()).unwrap();
    let se = fm.standard_errors.as_ref().unwrap();
    assert!(!se.singular);
    for frame in [Frame::Original, Frame::Reparameterized] {
        for p in se.in_frame(frame) {
            let s = p.se.unwrap();
            assert!(s > 0.0 && s.is_finite(), "{}: {s}", p.name);
            assert!(p.lower.unwrap() < p.estimate && p.estimate < p.upper.unwrap());
        }
    }
}

#[test]
fn enumeration_picks_two_separated_classes() {
    let g = generate_from(&common::separated_model(400, 3.0), 21).unwrap();
    let e = enumerate_classes(&g.data, 3, &quick()).unwrap();
    assert_eq!(e.chosen, 2);
    assert_eq!(e.entries.len(), 3);
}

#[test]
fn invalid_requests_are_rejected() {
    let d = data(50, 1);
    let spec = MixtureSpec::new(ModelKind::Cp, 2).with_gating(["missing"]);
    assert!(matches!(fit(&spec, &d, None, &quick()), Err(growthmix::Error::InvalidInput(_))));
    let bad = FitOptions {
        tolerance: 0.0,
        ..quick()
    };
    assert!(fit(&MixtureSpec::new(ModelKind::Fmm, 2), &d, None, &bad).is_err());
}
