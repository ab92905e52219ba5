// Kept in its own test binary: it changes MIST_THREADS for the process.

use mist_harness::{train, TrainConfig};

#[test]
fn thread_count_does_not_change_results() {
    let cfg = TrainConfig {
        steps: 6,
        batch_size: 5,
        eval_samples: 12,
        ..TrainConfig::tiny()
    };
    std::env::set_var("MIST_THREADS", "1");
    let (m1, serial) = train(&cfg).unwrap();
    std::env::set_var("MIST_THREADS", "3");
    let (m3, parallel) = train(&cfg).unwrap();
    std::env::remove_var("MIST_THREADS");
    assert_eq!(serial.rows, parallel.rows);
    assert_eq!(m1.store, m3.store);
}
