use std::path::Path;

use winfair::experiment::ExperimentSpec;
use winfair::pipeline::Method;

fn load(name: &str) -> ExperimentSpec {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentSpec::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn shipped_configs_load() {
    let synth = load("synthetic.toml");
    assert_eq!(synth.seeds.len(), 10);
    assert_eq!(synth.run_matrix().len(), 4 * 10);

    let bias = load("bias_introduction.toml");
    let retrain = bias
        .run_matrix()
        .into_iter()
        .filter(|(_, c)| c.method == Method::RetrainDp)
        .count();
    assert_eq!(retrain, 3 * 5);

    let adult = load("adult.toml");
    assert_eq!(adult.runs.len(), 3);
}
