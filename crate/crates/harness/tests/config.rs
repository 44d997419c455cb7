use proptest::prelude::*;
use wkb_harness::{ConfigError, Experiment, ExperimentConfig};

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        0..Experiment::ALL.len(),
        any::<u64>(),
        0.51..0.99f64,
        -3.0..3.0f64,
        0usize..8,
        prop::collection::vec(0.5..4.0f64, 1..5),
        prop::collection::vec(1.0..2.0f64, 2..10),
        (1e-3..0.1f64, 0.01..2.0f64, 0.01..0.5f64),
        any::<bool>(),
    )
        .prop_map(|(e, seed, gamma, amp, l, ks, gaps, (growth, dtau, dt), plots)| {
            let mut cfg = ExperimentConfig::default_for(Experiment::ALL[e]);
            cfg.seed = seed;
            cfg.potential.gamma = gamma;
            cfg.potential.amplitude = amp;
            cfg.packet.l_max = l;
            cfg.k_values = ks;
            let mut t = 1.0;
            cfg.checkpoints = gaps
                .iter()
                .map(|g| {
                    t *= g;
                    t
                })
                .collect();
            cfg.policy.growth = growth;
            cfg.policy.dtau_max = dtau;
            cfg.box_spec.dt = dt;
            cfg.plots = plots;
            cfg
        })
}

proptest! {
    #[test]
    fn text_form_roundtrips(cfg in arb_config()) {
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn partial_file_keeps_defaults() {
    let cfg = ExperimentConfig::parse("experiment = cook-decay\n# comment\npotential.gamma = 0.7  # trailing\n").unwrap();
    let mut want = ExperimentConfig::default_for(Experiment::CookDecay);
    want.potential.gamma = 0.7;
    // the slope bound follows gamma unless it is given explicitly
    want.thresholds.insert("slope_max".into(), -2.0 * 0.7 + 0.15);
    assert_eq!(cfg, want);
}

#[test]
fn errors_name_the_problem() {
    assert!(matches!(ExperimentConfig::parse("seed = 3\n"), Err(ConfigError::MissingExperiment)));
    assert!(matches!(ExperimentConfig::parse("experiment = cook-decay\nbogus = 1\n"), Err(ConfigError::UnknownKey(k)) if k == "bogus"));
    assert!(matches!(
        ExperimentConfig::parse("experiment = cook-decay\nthreshold.zero_max = 1\n"),
        Err(ConfigError::UnknownKey(_))
    ));
    assert!(matches!(ExperimentConfig::parse("experiment = cook-decay\nseed = -1\n"), Err(ConfigError::Value { .. })));
    assert!(matches!(ExperimentConfig::parse("experiment = cook-decay\njust words\n"), Err(ConfigError::Syntax { line: 2, .. })));
    assert!(matches!(ExperimentConfig::parse("experiment = nonsense\n"), Err(ConfigError::Value { .. })));
    let cfg = ExperimentConfig::parse("experiment = verify-bounds\npotential.gamma = 1.2\n").unwrap();
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("gamma"), "{msg}");
}
