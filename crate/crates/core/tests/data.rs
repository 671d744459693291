use accordion::config::ExperimentConfig;
use accordion::data::{Dataset, SpiralSpec};
use accordion::policy::PolicyName;

fn nearest_neighbour_error(train: &Dataset, test: &Dataset) -> f64 {
    let mut wrong = 0;
    for i in 0..test.len() {
        let q = test.features().row(i);
        let mut best = (f32::INFINITY, 0);
        for j in 0..train.len() {
            let p = train.features().row(j);
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if d < best.0 {
                best = (d, train.labels()[j]);
            }
        }
        wrong += usize::from(best.1 != test.labels()[i]);
    }
    wrong as f64 / test.len() as f64
}

#[test]
fn desk_spirals_are_learnable() {
    let s = SpiralSpec::default().generate().unwrap();
    let err = nearest_neighbour_error(&s.train, &s.test);
    assert!(err < 0.15, "1-NN error {err}");
}

#[test]
fn desk_spirals_shape_and_balance() {
    let s = SpiralSpec::default().generate().unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (6000, 1000, 1000));
    assert_eq!(s.train.dim(), 2);
    for count in s.train.class_counts() {
        // 2000 per class before about 2% of labels are flipped
        assert!((1900..=2100).contains(&count), "{count}");
    }
}

#[test]
fn generation_is_seeded() {
    let a = SpiralSpec::default().generate().unwrap();
    let b = SpiralSpec::default().generate().unwrap();
    let c = SpiralSpec { seed: 8, ..SpiralSpec::default() }.generate().unwrap();
    assert_eq!(a.train.digest(), b.train.digest());
    assert_ne!(a.train.digest(), c.train.digest());
    assert_ne!(a.train.digest(), a.test.digest());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.bin");
    let s = SpiralSpec { train: 50, ..SpiralSpec::default() }.generate().unwrap();
    s.train.save(&path).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, s.train);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 1);
    assert!(Dataset::from_bytes(&bytes).is_err());
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    let cfg = ExperimentConfig::desk(PolicyName::BlockComl05, 11);
    std::fs::write(&path, cfg.emit()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
}

#[test]
fn bad_config_values_rejected() {
    let mut cfg = ExperimentConfig::desk(PolicyName::Coml05, 0);
    cfg.policy.p_full = Some(1.5);
    assert!(ExperimentConfig::parse(&cfg.emit()).is_err());
    let mut cfg = ExperimentConfig::desk(PolicyName::Coml05, 0);
    cfg.train.batch_size = 0;
    assert!(ExperimentConfig::parse(&cfg.emit()).is_err());
    assert!(ExperimentConfig::parse("seed = 1").is_err());
}
