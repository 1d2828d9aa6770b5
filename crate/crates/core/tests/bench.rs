//! Timing checks. Kept in one test so nothing else competes for the CPU
//! while the clock runs.

mod common;

use std::path::Path;

use common::tiny::{test_images, TinyRun};
use wsdl::eval::{bench, BenchMode, BenchResult, BENCH_MIN_IMAGES, BENCH_REPEATS};
use wsdl::synthdata::RgbImage;

/// Largest allowed deviation of a repeat from the median repeat.
const REPEAT_SPREAD: f64 = 0.2;
/// Largest allowed throughput gap between modes when there is one level.
const SINGLE_LEVEL_GAP: f64 = 0.1;

/// At least the benchmark minimum of images, cycling the test split.
fn bench_images(data: &Path) -> Vec<RgbImage> {
    let base = test_images(data);
    base.iter().cycle().take(BENCH_MIN_IMAGES).cloned().collect()
}

fn check_stable(res: &BenchResult) {
    assert!(res.images_per_second > 0.0);
    assert_eq!(res.seconds.len(), BENCH_REPEATS);
    for &s in &res.seconds {
        let dev = (s - res.median_seconds).abs() / res.median_seconds;
        assert!(dev <= REPEAT_SPREAD, "{} repeats unstable: {:?}", res.mode, res.seconds);
    }
}

#[test]
fn bench_timings() {
    let r = TinyRun::train();
    let images = bench_images(&r.data);
    assert!(bench(&r.model.dln(), &test_images(&r.data), BenchMode::Shared, 1).is_err());

    let single = r.model.dln().with_levels(&["cam".to_string()]).unwrap();
    let shared = bench(&single, &images, BenchMode::Shared, BENCH_REPEATS).unwrap();
    let separate = bench(&single, &images, BenchMode::Separate, BENCH_REPEATS).unwrap();
    check_stable(&shared);
    check_stable(&separate);
    let ratio = shared.images_per_second / separate.images_per_second;
    println!("one level: shared/separate throughput ratio {ratio:.3}");
    assert!(
        (ratio - 1.0).abs() <= SINGLE_LEVEL_GAP,
        "one-level modes differ: ratio {ratio}"
    );

    let both = r.model.dln();
    let shared = bench(&both, &images, BenchMode::Shared, BENCH_REPEATS).unwrap();
    let separate = bench(&both, &images, BenchMode::Separate, BENCH_REPEATS).unwrap();
    let ratio = shared.images_per_second / separate.images_per_second;
    println!("two levels: shared/separate throughput ratio {ratio:.3}");
    assert!(ratio > 1.0);
}
