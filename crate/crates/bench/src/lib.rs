//! Inputs shared by the benchmarks.

use flextab_core::classifier::{FeaturizerConfig, FormatClassifier, LabelRecord, TrainConfig};
use flextab_core::execution::ReasoningOutcome;
use flextab_core::{Answer, Instance, Table, TabularFormat, TaskKind};

/// A `rows` x 6 table of mixed text and numeric cells.
pub fn table(rows: usize) -> Table {
    let header = ["rank", "nation", "gold", "silver", "bronze", "total"]
        .map(String::from)
        .to_vec();
    let rows = (0..rows)
        .map(|r| {
            vec![
                (r + 1).to_string(),
                format!("nation {r}"),
                (r % 7).to_string(),
                (r % 5).to_string(),
                (r % 3).to_string(),
                (r % 7 + r % 5 + r % 3).to_string(),
            ]
        })
        .collect();
    Table::new(header, rows).expect("rectangular")
}

pub fn instance(i: usize, rows: usize) -> Instance {
    Instance::new(
        format!("b{i}"),
        format!("which nation ranked {i} and how many gold medals did it win"),
        table(rows),
        &["1"],
        TaskKind::Qa,
    )
    .expect("valid instance")
}

/// One outcome per format for one instance; every third one is an error-free
/// duplicate of the first answer so the vote has a plurality to find.
pub fn ballot(samples: usize) -> Vec<ReasoningOutcome> {
    let mut out = Vec::new();
    for f in TabularFormat::ALL {
        for s in 0..samples {
            let raw = if (f.index() + s) % 3 == 0 {
                "42".to_string()
            } else {
                format!("{}", f.index() * 10 + s)
            };
            out.push(ReasoningOutcome {
                instance_id: "b".into(),
                format: f,
                sample_index: s,
                raw_text: String::new(),
                answer: Some(Answer::new(raw, TaskKind::Qa)),
                mean_logprob: -((f.index() + s) as f64) / 8.0,
                error: None,
            });
        }
    }
    out
}

/// A small trained classifier plus the records it was trained on.
pub fn trained(n: usize) -> (FormatClassifier, Vec<LabelRecord>) {
    let featurizer = FeaturizerConfig::default();
    let records: Vec<LabelRecord> = (0..n)
        .map(|i| {
            let inst = instance(i, 5 + i % 10);
            let mut labels = vec![0u8; 5];
            labels[i % 5] = 1;
            LabelRecord {
                instance_id: inst.id.clone(),
                labels,
                features: featurizer.featurize(&inst),
            }
        })
        .collect();
    let config = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let (model, _) =
        flextab_core::classifier::train(&records, &TabularFormat::ALL, featurizer, &config).expect("trains");
    (model, records)
}
