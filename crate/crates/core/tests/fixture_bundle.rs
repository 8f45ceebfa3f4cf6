use std::path::Path;

use streamtemp::config::RunConfig;
use streamtemp::fixture::{generate, FixtureConfig};
use streamtemp::runner::load_data;

fn bundled() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

#[test]
fn bundled_fixture_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    generate(&FixtureConfig::default()).write(dir.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for name in names {
        let fresh = std::fs::read(dir.path().join(&name)).unwrap();
        let kept = std::fs::read(bundled().join(&name)).unwrap();
        assert!(fresh == kept, "{name:?} differs from the bundled copy");
    }
}

#[test]
fn bundled_config_ingests_cleanly() {
    let config = RunConfig::load(&bundled().join("config.toml")).unwrap();
    let (data, report) = load_data(&config).unwrap();
    assert_eq!(report.sites_loaded, 36);
    assert!(report.parse_issues.is_empty());
    assert!(report.excluded_sites.is_empty());
    assert_eq!(data.test_sites().len(), 10);
    assert_eq!(data.default_pool().len(), 20);
}
