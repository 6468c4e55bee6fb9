use bli_core::stress::{run_spmc, StressParams};
use bli_core::IndexConfig;

fn inserts() -> usize {
    std::env::var("BLI_STRESS_INSERTS").ok().and_then(|s| s.parse().ok()).unwrap_or(100_000)
}

#[test]
fn spmc_default_config() {
    let r = run_spmc(&StressParams {
        inserts: inserts(),
        ..StressParams::default()
    });
    assert!(r.clean(), "{r:?}");
}

#[test]
fn spmc_tiny_buckets_heavy_smo_churn() {
    // Small capacities force frequent splits, re-segmentation, merges and root
    // growth while readers are active.
    for theta in [1, 3] {
        let r = run_spmc(&StressParams {
            bulk: 100,
            inserts: inserts() / 2,
            readers: 4,
            tracked: 2000,
            seed: 9 + u64::from(theta),
            cfg: IndexConfig {
                dbucket_capacity: 4,
                sbucket_capacity: 2,
                initial_fill_ratio: 0.5,
                corridor_error: 1.0,
                merge_threshold: theta,
                ..IndexConfig::default()
            },
        });
        assert!(r.clean(), "theta {theta}: {r:?}");
        assert!(r.reclaimed > 0, "{r:?}");
    }
}

#[test]
fn stalled_reader_blocks_reclamation_without_harm() {
    let idx = bli_core::Index::new(IndexConfig {
        dbucket_capacity: 4,
        sbucket_capacity: 2,
        ..IndexConfig::default()
    })
    .unwrap();
    idx.insert(1, 1);
    let stalled = idx.reader();
    let guard = stalled.pin();
    for k in 2..2000 {
        idx.insert(k, k);
    }
    let during = idx.reclaim_stats();
    assert!(during.retired > 100, "{during:?}");
    assert_eq!(during.reclaimed, 0, "{during:?}");
    for k in 1..2000 {
        assert_eq!(stalled.get(k), Some(k));
    }
    drop(guard);
    assert!(idx.try_advance_epoch());
    assert_eq!(idx.reclaim_stats().pending(), 0);
}
