use labelguide::labelenc::LabelEncoderVariant;
use labelguide::nn::state_hash;
use labelguide::pipeline::{train_labelenc, train_student, train_teacher, Corpus, Dataset, ExperimentConfig, PipelineError};

const TINY: &str = r#"
seed = 1
grid_cells = 8

[world]
extent = 10.0
azimuth_bins = 16
max_objects = 3
points_density = 300.0

[model]
teacher_channels = 4
student_channels = 6
embed_dim = 4
depth_bins = 4
column_channels = 4
lift_channels = 4
head_channels = 4
label_hidden = 4

[partition]
image = 2
lidar = 2
label = 2

[data]
train_scenes = 16
val_scenes = 8

[teacher]
epochs = 2
batch_size = 4

[labelenc]
epochs = 1
batch_size = 4

[student]
epochs = 2
batch_size = 4
"#;

fn setup() -> (ExperimentConfig, Corpus<f64>) {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let data = Dataset::generate(&cfg.world, cfg.data.train_scenes, cfg.data.val_scenes).unwrap();
    let corpus = Corpus::new(data, &cfg);
    (cfg, corpus)
}

fn with_switches(cfg: &ExperimentConfig, lidar: bool, label: bool) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.switches.use_lidar_distill = lidar;
    c.switches.use_label_distill = label;
    c
}

#[test]
fn disabled_terms_ignore_their_sources() {
    let (cfg, corpus) = setup();
    let teacher = train_teacher(&cfg, &corpus).unwrap().model;
    let le = train_labelenc(&cfg, &corpus, LabelEncoderVariant::Inverse, Some(&teacher), None).unwrap().model;
    let off = with_switches(&cfg, false, false);
    let a = train_student(&off, &corpus, Some(&teacher), Some(&le)).unwrap();
    let b = train_student(&off, &corpus, None, None).unwrap();
    assert_eq!(state_hash(&a.stage.model), state_hash(&b.stage.model));
    assert_eq!(a.audit.teacher_before, None);

    let label_only = with_switches(&cfg, false, true);
    let c = train_student(&label_only, &corpus, Some(&teacher), Some(&le)).unwrap();
    let names: Vec<&str> = c.stage.epochs[0].components.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"label_feature"));
    assert!(!names.contains(&"lidar_feature") && !names.contains(&"response"));
    assert!(c.audit.intact());
}

#[test]
fn enabled_terms_require_their_sources() {
    let (cfg, corpus) = setup();
    let lidar = with_switches(&cfg, true, false);
    assert!(matches!(train_student(&lidar, &corpus, None, None), Err(PipelineError::MissingCheckpoint("teacher"))));
    let label = with_switches(&cfg, false, true);
    assert!(matches!(train_student(&label, &corpus, None, None), Err(PipelineError::MissingCheckpoint("labelenc"))));
}

#[test]
fn training_is_deterministic_and_seeded() {
    let (cfg, corpus) = setup();
    let a = train_teacher(&cfg, &corpus).unwrap();
    let b = train_teacher(&cfg, &corpus).unwrap();
    assert_eq!(state_hash(&a.model), state_hash(&b.model));
    assert_eq!(a.report(), b.report());
    let other = ExperimentConfig { seed: cfg.seed + 1, ..cfg.clone() };
    assert_ne!(state_hash(&train_teacher(&other, &corpus).unwrap().model), state_hash(&a.model));
}
