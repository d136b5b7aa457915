use growthmix::classification::{accuracy, entropy, kappa_agreement, Assignment, PosteriorMatrix};
use growthmix::data::{Individual, LongitudinalDataset};
use growthmix::growth::{
    implied_covariance, implied_mean, inverse_reparam_jacobian, loading_matrix, mahalanobis_distance, reparam_jacobian,
    ClassParams, Frame, GrowthFactors,
};
use growthmix::io::{export_writers, ingest_readers, IngestOptions};
use growthmix::mixture::{gating_probabilities, pack, unpack, Gating, GatingParams, MixtureParams, MixtureSpec, ModelKind, ParamLayout};
use growthmix::montecarlo::performance_metrics;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use proptest::prelude::*;

fn psd3() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform6(-2.0..2.0f64).prop_map(|v| {
        let l = Matrix3::new(v[0].abs() + 0.5, 0.0, 0.0, v[1], v[2].abs() + 0.5, 0.0, v[3], v[4], v[5].abs() + 0.5);
        l * l.transpose()
    })
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Vector3::from)
}

fn class(beta0: Vector3<f64>, psi: Matrix3<f64>, gamma: f64, paths: Vec<f64>) -> ClassParams {
    ClassParams {
        beta0,
        psi,
        gamma,
        paths: DMatrix::from_vec(3, 2, paths),
        cov_mean: DVector::from_vec(vec![0.3, -0.2]),
        cov_cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
        residual: 1.3,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn reparameterization_round_trips(eta in vec3(100.0), gamma in 0.5..8.5f64) {
        let g = GrowthFactors::new(eta[0], eta[1], eta[2], Frame::Original);
        let back = g.reparameterize(gamma).unwrap().inverse_reparameterize(gamma).unwrap();
        prop_assert!((back.eta - g.eta).amax() < 1e-10 * (1.0 + eta.amax()));
        let prod = inverse_reparam_jacobian(gamma) * reparam_jacobian(gamma);
        prop_assert!((prod - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn frames_imply_identical_moments(
        beta in vec3(50.0),
        psi in psd3(),
        gamma in 1.0..8.0f64,
        paths in prop::collection::vec(-1.0..1.0f64, 6),
    ) {
        let c = class(beta, psi, gamma, paths);
        let r = c.to_frame(Frame::Original, Frame::Reparameterized);
        let times: Vec<f64> = (0..10).map(|t| t as f64 + 0.1).collect();
        let lo = loading_matrix(&times, gamma, Frame::Original).unwrap();
        let lr = loading_matrix(&times, gamma, Frame::Reparameterized).unwrap();
        let (mo, mr) = (implied_mean(&c, &lo).unwrap(), implied_mean(&r, &lr).unwrap());
        prop_assert!((mo - mr).amax() < 1e-10 * (1.0 + beta.amax() * 10.0));
        let (so, sr) = (implied_covariance(&c, &lo).unwrap(), implied_covariance(&r, &lr).unwrap());
        prop_assert!((so - sr).amax() < 1e-9 * (1.0 + psi.amax() * 100.0));
    }

    #[test]
    fn mahalanobis_ignores_common_shifts(a in vec3(10.0), b in vec3(10.0), s in vec3(100.0), psi in psd3()) {
        let d0 = mahalanobis_distance(&a, &b, &psi).unwrap();
        let d1 = mahalanobis_distance(&(a + s), &(b + s), &psi).unwrap();
        prop_assert!((d0 - d1).abs() < 1e-9 * (1.0 + d0));
        prop_assert!(d0 >= 0.0);
    }

    #[test]
    fn gating_probabilities_are_a_distribution(
        x in prop::collection::vec(-3.0..3.0f64, 2),
        b in prop::collection::vec(-20.0..20.0f64, 9),
    ) {
        let gp = GatingParams {
            intercepts: vec![b[0], b[1], b[2]],
            coefficients: vec![vec![b[3], b[4]], vec![b[5], b[6]], vec![b[7], b[8]]],
        };
        let p = gating_probabilities(&x, &gp).unwrap();
        prop_assert_eq!(p.len(), 4);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_bounded(rows in prop::collection::vec(prop::collection::vec(0.01..1.0f64, 3), 2..40)) {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let e = entropy(&PosteriorMatrix::from_rows(&rows).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn accuracy_ignores_label_names(labels in prop::collection::vec(1usize..=3, 5..60), truth in prop::collection::vec(1usize..=3, 60)) {
        let truth = Assignment::new(truth[..labels.len()].to_vec(), 3).unwrap();
        let a = Assignment::new(labels.clone(), 3).unwrap();
        let renamed = Assignment::new(labels.iter().map(|l| [0, 3, 1, 2][*l]).collect(), 3).unwrap();
        let (x, y) = (accuracy(&a, &truth).unwrap(), accuracy(&renamed, &truth).unwrap());
        prop_assert!((x - y).abs() < 1e-15);
        prop_assert!(x >= 1.0 / 3.0 - 1e-12);
    }

    #[test]
    fn kappa_is_symmetric(a in prop::collection::vec(1usize..=2, 20), b in prop::collection::vec(1usize..=2, 20)) {
        prop_assume!(a.contains(&1) && a.contains(&2) && b.contains(&1) && b.contains(&2));
        let (x, y) = (Assignment::new(a, 2).unwrap(), Assignment::new(b, 2).unwrap());
        let (k1, k2) = (kappa_agreement(&x, &y).unwrap(), kappa_agreement(&y, &x).unwrap());
        prop_assert!((k1.kappa - k2.kappa).abs() < 1e-12);
        prop_assert!(k1.kappa <= 1.0 + 1e-12);
    }

    #[test]
    fn rmse_decomposes(est in prop::collection::vec(-5.0..5.0f64, 2..200), truth in -3.0..3.0f64) {
        let m = performance_metrics(&est, &vec![None; est.len()], truth).unwrap();
        let s = est.len() as f64;
        let lhs = m.rmse.powi(2);
        let rhs = m.bias.powi(2) + m.empirical_se.powi(2) * (s - 1.0) / s;
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs));
    }

    #[test]
    fn packing_round_trips(
        b0 in vec3(50.0), b1 in vec3(50.0), p0 in psd3(), p1 in psd3(),
        g in prop::array::uniform2(1.5..7.5f64),
        paths in prop::collection::vec(-1.0..1.0f64, 6),
        gate in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let spec = MixtureSpec::new(ModelKind::Full, 2).with_gating(["g1", "g2"]).with_expert(["e1", "e2"]);
        let params = MixtureParams {
            frame: Frame::Original,
            classes: vec![class(b0, p0, g[0], paths.clone()), class(b1, p1, g[1], paths)],
            gating: Gating::Logistic(GatingParams { intercepts: vec![gate[0]], coefficients: vec![vec![gate[1], gate[2]]] }),
        };
        let layout = ParamLayout::new(&spec, (1.0, 8.0));
        let back = unpack(&pack(&params, &layout).unwrap()).unwrap();
        for (a, b) in back.classes.iter().zip(&params.classes) {
            prop_assert!((a.beta0 - b.beta0).amax() < 1e-9);
            prop_assert!((a.psi - b.psi).amax() < 1e-9 * (1.0 + b.psi.amax()));
            prop_assert!((a.gamma - b.gamma).abs() < 1e-9);
            prop_assert!((&a.cov_cov - &b.cov_cov).amax() < 1e-12);
            prop_assert!((a.residual - b.residual).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn export_then_ingest_is_lossless(
        rows in prop::collection::vec((prop::collection::vec(-1e6..1e6f64, 1..6), prop::array::uniform2(-1e3..1e3f64)), 1..20),
    ) {
        let individuals: Vec<Individual> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (ys, x))| Individual {
                id: format!("p{i}"),
                times: (0..ys.len()).map(|t| t as f64 * 0.7 + i as f64 * 1e-7).collect(),
                outcomes: ys,
                covariates: x.to_vec(),
            })
            .collect();
        let ds = LongitudinalDataset::new(vec!["a".into(), "b".into()], individuals).unwrap();
        let (mut o, mut c) = (Vec::new(), Vec::new());
        export_writers(&ds, &mut o, &mut c, None).unwrap();
        let (back, report) = ingest_readers(o.as_slice(), Some(c.as_slice()), &IngestOptions::default()).unwrap();
        prop_assert!(report.notices.is_empty());
        prop_assert_eq!(back, ds);
    }
}
