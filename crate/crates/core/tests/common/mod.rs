#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tbscreen::cohort::{save_cohort, CohortTag};
use tbscreen::synth::{generate_study, PanelSpec};

pub fn panel(
    dataset: &str,
    prefix: &str,
    tag: CohortTag,
    seed: u64,
    n_pos: usize,
    n_neg: usize,
) -> PanelSpec {
    PanelSpec {
        dataset: dataset.into(),
        reader_prefix: prefix.into(),
        reader_tag: tag,
        seed,
        n_pos,
        n_neg,
        n_readers: 6,
        attributes: true,
        ..PanelSpec::default()
    }
}

/// Three datasets read by an India-based panel, the first also by a
/// US-based panel.
pub fn three_dataset_study() -> Vec<PanelSpec> {
    vec![
        panel("alpha", "in", CohortTag::IndiaBased, 11, 60, 140),
        panel("alpha", "us", CohortTag::UsBased, 12, 60, 140),
        panel("beta", "in", CohortTag::IndiaBased, 13, 40, 110),
        panel("gamma", "in", CohortTag::IndiaBased, 14, 50, 100),
    ]
}

/// Writes the study CSVs under `dir/data` and a run config at `dir/run.toml`.
pub fn write_fixture(dir: &Path, panels: &[PanelSpec], extra_config: &str) -> PathBuf {
    let (cohort, _) = generate_study(panels).unwrap();
    save_cohort(&cohort, &dir.join("data")).unwrap();
    let config = format!(
        "seed = 5\n{extra_config}\n[inputs]\ncases = \"data/cases.csv\"\nreads = \"data/reads.csv\"\nreaders = \"data/readers.csv\"\n\n[bootstrap]\nn_resamples = 200\n"
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}
