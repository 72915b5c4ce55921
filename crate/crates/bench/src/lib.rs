//! Shared fixtures for the benchmarks.

use spreme_core::spreme::{init_coefficients, EnvData};
use spreme_core::{build_benchmark_dataset, CoefficientSet, Dataset, FeatureLibrary, Hyperparams, SystemKind};

pub struct Fixture {
    pub dataset: Dataset,
    pub library: FeatureLibrary,
    pub hyper: Hyperparams,
    pub coeffs: CoefficientSet,
    pub data: EnvData,
}

/// Benchmark dataset of `kind` (seed 0) with its sparse-regression
/// initialization.
pub fn fixture(kind: SystemKind) -> Fixture {
    let dataset = build_benchmark_dataset(kind, 0).expect("benchmark dataset");
    let library = kind.default_library();
    let hyper = Hyperparams::default();
    let coeffs = init_coefficients(&dataset.train, &library, &hyper).expect("initialization");
    let data = EnvData::from_environments(&dataset.train).training_part(hyper.validation_fraction);
    Fixture {
        dataset,
        library,
        hyper,
        coeffs,
        data,
    }
}
