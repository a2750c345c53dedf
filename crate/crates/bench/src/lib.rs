//! Fixtures shared by the benchmarks.

use funcreg_core::data::{generate_benchmark, BenchmarkData, ShiftBenchmark, SplitSizes};
use funcreg_core::model::{ModelConfig, ModelState, Params};
use funcreg_core::training::finetune_init;

/// A benchmark small enough to regenerate per iteration.
pub fn small_spec() -> ShiftBenchmark {
    ShiftBenchmark {
        sizes: SplitSizes {
            pretrain: 500,
            pretrain_test: 100,
            id_train: 64,
            id_test: 60,
            ood_test: 60,
            heldout: 40,
        },
        ..ShiftBenchmark::default()
    }
}

/// Fine-tuning state with a snapshot, on freshly initialized weights.
pub fn finetune_state(data: &BenchmarkData) -> ModelState {
    let spec = ShiftBenchmark::default();
    let pre = Params::init(spec.input_dim(), spec.num_classes, &ModelConfig::default()).expect("valid config");
    let mut state = ModelState::new(finetune_init(&pre, &data.finetune_classes, true).expect("classes in range"));
    state.take_snapshot();
    state
}

pub fn data() -> BenchmarkData {
    generate_benchmark(&small_spec()).expect("valid spec")
}
