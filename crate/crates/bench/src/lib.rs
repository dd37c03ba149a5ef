//! Fixtures shared by the benchmarks under `benches/`.

use ddnas_core::model::{Batch, ModelSpec};
use ddnas_core::synthetic::keyword_corpus;
use ddnas_core::trainer;
use ddnas_core::{Classifier, TrainConfig};

/// A fresh search model and one training batch at desk scale.
pub fn desk_search() -> (TrainConfig, Classifier, Batch) {
    let cfg = TrainConfig::desk();
    let data = trainer::prepare(&keyword_corpus(200, 1), &cfg).expect("synthetic corpus prepares");
    let model = Classifier::new(&ModelSpec::search(data.vocab.len(), 2, &cfg), 0)
        .expect("desk config is valid");
    let batch = Batch::from_examples(&data.train[..cfg.batch_size]).expect("nonempty batch");
    (cfg, model, batch)
}
