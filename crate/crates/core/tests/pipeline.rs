use svihmm::batch::{default_prior, run_batch_vb, BatchConfig};
use svihmm::checkpoint;
use svihmm::dataset::{generate, read_dataset, write_dataset};
use svihmm::eval::{holdout_split, predictive_log_prob, transition_error};
use svihmm::svi::{run_svihmm, SviConfig};
use svihmm::synthetic::Generator;

#[test]
fn generate_fit_checkpoint_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rc.bin");
    write_dataset(&path, &generate(Generator::Rc, 5000, 11, true).unwrap()).unwrap();
    let data = read_dataset(&path).unwrap();
    assert_eq!(data.meta.generator, "rc");
    let (train, test) = holdout_split(&data.obs, 0.1).unwrap();
    let prior = default_prior(&train, 8).unwrap();
    let truth = Generator::Rc.params();

    let batch = run_batch_vb(&train, 8, &prior, &BatchConfig { seed: 3, ..BatchConfig::default() }).unwrap();
    let model = dir.path().join("batch.json");
    checkpoint::save(&batch.final_state, &model).unwrap();
    let restored = checkpoint::load(&model).unwrap();
    let pred = predictive_log_prob(&restored, &test).unwrap();
    assert_eq!(pred.to_bits(), predictive_log_prob(&batch.final_state, &test).unwrap().to_bits());
    assert!(transition_error(&restored, &truth).unwrap() < 0.5);

    let cfg = SviConfig { subchain_len: 41, minibatch: 5, iters: 200, grow_u: 2, seed: 3, ..SviConfig::default() };
    let svi = run_svihmm(&train, 8, &prior, &cfg, Some(&test)).unwrap();
    let svi_pred = predictive_log_prob(&svi.final_state, &test).unwrap();
    assert!((svi_pred - pred).abs() < 0.1, "svi {svi_pred} batch {pred}");
    assert!(svi.records.iter().all(|r| r.rho.is_some() && r.wall_seconds >= 0.0));

    let trace = dir.path().join("trace.csv");
    svi.write_csv(&trace).unwrap();
    let rows = csv::Reader::from_path(&trace).unwrap().records().count();
    assert_eq!(rows, 200);
}

#[test]
fn true_parameters_predict_best_on_average() {
    // Majority vote over 20 fresh samples: the generating parameters score at
    // least as well as a perturbed copy.
    use svihmm::eval::log_likelihood_per_obs;
    use svihmm::model::{sample_hmm, GaussianEmission, HmmParams};
    let truth = Generator::Dd.params();
    let shifted: Vec<GaussianEmission> = truth
        .emissions()
        .iter()
        .map(|e| GaussianEmission::new(e.mean().add_scalar(0.5), e.cov().clone()).unwrap())
        .collect();
    let perturbed = HmmParams::stationary(truth.trans().clone(), shifted).unwrap();
    let wins = (0..20)
        .filter(|&s| {
            let (_, y) = sample_hmm(&truth, 2000, 500 + s).unwrap();
            log_likelihood_per_obs(&truth, &y).unwrap() >= log_likelihood_per_obs(&perturbed, &y).unwrap()
        })
        .count();
    assert!(wins > 10, "{wins}/20");
}
