mod common;

use growthmix::forest::{evaluate_split, grow_tree, variable_importance, ForestConfig, TemplateModel};
use growthmix::simulate::{forest_scenario, generate_from};

fn all_covariates(data: &growthmix::data::LongitudinalDataset) -> Vec<String> {
    data.covariate_names.clone()
}

#[test]
fn pure_noise_rarely_splits() {
    let template = TemplateModel::default();
    let mut root_only = 0;
    let runs = 20;
    for seed in 0..runs {
        let g = common::null_data(400, 100 + seed);
        let config = ForestConfig {
            seed,
            ..ForestConfig::default()
        };
        let tree = grow_tree(&template, &g.data, &all_covariates(&g.data), &config).unwrap();
        if tree.splits() == 0 {
            root_only += 1;
        }
    }
    assert!(root_only * 10 >= runs * 9, "{root_only} of {runs} trees stayed at the root");
}

#[test]
fn split_improvement_is_nonnegative_and_favors_signal() {
    let g = generate_from(&forest_scenario(3, 800).unwrap(), 5).unwrap();
    let template = TemplateModel::default();
    let mut best_signal = 0.0f64;
    let mut best_noise = 0.0f64;
    for name in ["xe1", "xe2", "noise1", "noise2"] {
        for t in [-0.5, 0.0, 0.5] {
            let imp = evaluate_split(&template, &g.data, name, t, 50).unwrap().unwrap();
            assert!(imp >= -1e-6, "{name} at {t}: {imp}");
            if name.starts_with("xe") {
                best_signal = best_signal.max(imp);
            } else {
                best_noise = best_noise.max(imp);
            }
        }
    }
    assert!(best_signal > best_noise, "{best_signal} vs {best_noise}");
    assert_eq!(evaluate_split(&template, &g.data, "xe1", 0.0, 500).unwrap(), None);
}

#[test]
fn importance_is_independent_of_thread_count() {
    let g = generate_from(&forest_scenario(3, 300).unwrap(), 9).unwrap();
    let covs = all_covariates(&g.data);
    let run = |threads| {
        let config = ForestConfig {
            trees: 4,
            seed: 11,
            threads,
            ..ForestConfig::default()
        };
        variable_importance(&TemplateModel::default(), &g.data, &covs, &config).unwrap()
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), covs.len());
    let mut ranks: Vec<usize> = a.rows.iter().map(|r| r.rank).collect();
    ranks.sort();
    assert_eq!(ranks, (1..=covs.len()).collect::<Vec<_>>());
    for r in &a.rows {
        assert!(r.score >= 0.0);
        if r.trees_used == 0 {
            assert_eq!(r.score, 0.0);
        }
    }
}

#[test]
fn bad_configuration_is_rejected() {
    let g = common::null_data(100, 1);
    let covs = all_covariates(&g.data);
    let zero = ForestConfig {
        trees: 0,
        ..ForestConfig::default()
    };
    assert!(variable_importance(&TemplateModel::default(), &g.data, &covs, &zero).is_err());
    let many = ForestConfig {
        candidates: covs.len() + 1,
        ..ForestConfig::default()
    };
    assert!(grow_tree(&TemplateModel::default(), &g.data, &covs, &many).is_err());
    assert!(evaluate_split(&TemplateModel::default(), &g.data, "absent", 0.0, 10).is_err());
}
