use latent_match::eval::{lookback_sensitivity, score};
use latent_match::history::HistoryConfig;
use latent_match::pipeline::{run_pipeline, RunConfig};
use latent_match::synthgen::generate;

#[test]
fn identical_lookbacks_do_not_deviate() {
    let mut cfg = RunConfig { baselines: false, ..RunConfig::default() };
    cfg.dgp.n_units = 200;
    cfg.train.epochs = 3;
    let data = generate(&cfg.dgp_config()).unwrap();
    let report = lookback_sensitivity(&cfg, &data, &[90, 90]).unwrap();
    assert!(report.max_deviation.iter().all(|d| *d == 0.0));
}

#[test]
fn long_memory_favours_the_long_window() {
    let rmse = |lookback: i64| {
        let mut cfg = RunConfig { baselines: false, ..RunConfig::default() };
        cfg.dgp.memory_days = 120;
        cfg.features.history = HistoryConfig::with_lookback(lookback);
        let out = run_pipeline(&cfg, None).unwrap();
        score(&out.lmn, &out.oracle).unwrap().rmse
    };
    let (short, long) = (rmse(30), rmse(180));
    assert!(long <= short, "RMSE 180 days {long} vs 30 days {short}");
}
