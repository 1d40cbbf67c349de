#![no_main]

use libfuzzer_sys::fuzz_target;
use vace::metrics::{evaluate, MetricsConfig};
use vace::scoring::read_scores_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(rows) = read_scores_csv(data) else { return };
    let Some(labels) = rows.iter().map(|r| r.label).collect::<Option<Vec<u8>>>() else {
        return;
    };
    let scores: Vec<f64> = rows.iter().map(|r| r.point_score).collect();
    if let Ok(result) = evaluate(&scores, &labels, &MetricsConfig::default()) {
        assert!(result.values().iter().all(|v| v.is_nan() || (0.0..=1.0).contains(v)));
    }
});
