#![allow(dead_code)]

use std::sync::OnceLock;

use simbench_core::data::Domain;
use simbench_core::par::Parallelism;
use simbench_core::workbench::{DataSource, Workbench};

pub const SEED: u64 = simbench_core::workbench::DEFAULT_SEED;

/// Models trained once per test binary.
pub fn workbench(domain: Domain) -> &'static Workbench {
    static TABULAR: OnceLock<Workbench> = OnceLock::new();
    static TEXT: OnceLock<Workbench> = OnceLock::new();
    let cell = match domain {
        Domain::Tabular => &TABULAR,
        Domain::Text => &TEXT,
    };
    cell.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        Workbench::train_all(DataSource::fixture(domain), dir.path(), SEED, Parallelism::Parallel)
            .unwrap()
            .0
    })
}
