use std::fs::OpenOptions;
use std::io::{Seek, SeekFrom, Write};

use thaw_core::Tensor;
use thaw_runtime::cache::{
    cache_eligibility, inspect, ActivationCache, CacheConfig, PrefetchSchedule, PutOutcome,
};

fn act(ids: &[u64]) -> Tensor<f32> {
    let mut data = Vec::new();
    for &id in ids {
        for j in 0..6 {
            data.push(id as f32 * 0.37 + j as f32 * 1.25 - 3.0);
        }
    }
    Tensor::new(vec![ids.len(), 2, 3], data).unwrap()
}

fn cache(dir: &std::path::Path, depth: usize) -> ActivationCache {
    let mut cfg = CacheConfig::new(dir, 0);
    cfg.prefetch_depth = depth;
    ActivationCache::open(cfg).unwrap()
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn put_then_get_is_bitwise_equal() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 0);
    let ids = [4, 9, 1];
    let a = act(&ids);
    assert_eq!(c.put(0, 0, &ids, &a, 1, 3).unwrap(), PutOutcome::Written);
    let got = c.get(&ids, 1, 3).unwrap();
    assert_eq!(got.shape(), a.shape());
    assert_eq!(bits(&got), bits(&a));
}

#[test]
fn window_keeps_the_last_five_batches() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 0);
    let batches: Vec<Vec<u64>> = (0..6).map(|b| vec![2 * b, 2 * b + 1]).collect();
    for (i, ids) in batches.iter().enumerate() {
        c.put(0, i as u32, ids, &act(ids), 0, 1).unwrap();
    }
    assert_eq!(c.resident_len(), 5);
    let io = c.stats().io_reads;
    for ids in &batches[1..] {
        assert!(c.get(ids, 0, 1).is_some());
    }
    assert_eq!(
        c.stats().io_reads,
        io,
        "resident hits must not touch the disk"
    );
    assert_eq!(
        bits(&c.get(&batches[0], 0, 1).unwrap()),
        bits(&act(&batches[0]))
    );
    assert!(c.stats().io_reads > io, "the first batch is disk-only");
    assert!(c.stats().resident_peak <= 5);
}

#[test]
fn mismatched_leading_dimension_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 0);
    assert!(c.put(0, 0, &[1, 2, 3], &act(&[1, 2]), 0, 0).is_err());
}

#[test]
fn misses_on_version_boundary_unknown_and_partial() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 0);
    c.put(0, 0, &[1, 2], &act(&[1, 2]), 0, 3).unwrap();
    assert!(c.get(&[1, 2], 0, 4).is_none());
    assert!(c.get(&[1, 2], 1, 3).is_none());
    assert!(c.get(&[77], 0, 3).is_none());
    assert!(c.get(&[1, 77], 0, 3).is_none());
    assert!(c.get(&[2, 1], 0, 3).is_some());
}

#[test]
fn rows_from_different_entries_assemble_a_new_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 0);
    c.put(0, 0, &[0, 1], &act(&[0, 1]), 0, 1).unwrap();
    c.put(0, 1, &[2, 3], &act(&[2, 3]), 0, 1).unwrap();
    let got = c.get(&[3, 0], 0, 1).unwrap();
    assert_eq!(bits(&got), bits(&act(&[3, 0])));
}

#[test]
fn corrupted_entry_is_a_miss_and_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 0);
    let batches: Vec<Vec<u64>> = (0..6).map(|b| vec![b]).collect();
    for (i, ids) in batches.iter().enumerate() {
        c.put(0, i as u32, ids, &act(ids), 0, 1).unwrap();
    }
    let file = dir.path().join("worker0").join("epoch00000.thac");
    let mut f = OpenOptions::new().write(true).open(&file).unwrap();
    f.write_all(b"XXXX").unwrap();
    drop(f);
    assert!(c.get(&batches[0], 0, 1).is_none());
    assert_eq!(c.stats().corrupt_dropped, 1);
    assert!(c.get(&batches[0], 0, 1).is_none());
    assert!(c.get(&batches[5], 0, 1).is_some());
}

#[test]
fn truncated_tail_keeps_earlier_entries() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut c = cache(dir.path(), 0);
        for b in 0..3u64 {
            c.put(2, b as u32, &[b], &act(&[b]), 0, 1).unwrap();
        }
    }
    let file = dir.path().join("worker0").join("epoch00002.thac");
    let len = std::fs::metadata(&file).unwrap().len();
    let f = OpenOptions::new().write(true).open(&file).unwrap();
    f.set_len(len - 10).unwrap();
    let mut c = cache(dir.path(), 0);
    assert_eq!(c.indexed_samples(), 2);
    assert_eq!(bits(&c.get(&[1], 0, 1).unwrap()), bits(&act(&[1])));
    assert!(c.get(&[2], 0, 1).is_none());
}

fn replay(depth: usize) -> (usize, ActivationCache, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), depth);
    let ids: Vec<u64> = (0..80).collect();
    for (b, chunk) in ids.chunks(8).enumerate() {
        c.put(0, b as u32, chunk, &act(chunk), 1, 2).unwrap();
    }
    // Next epoch visits the samples in a different order.
    let mut perm: Vec<u64> = ids.iter().map(|i| (i * 37 + 11) % 80).collect();
    perm.rotate_left(3);
    let batches: Vec<Vec<u64>> = perm.chunks(8).map(<[u64]>::to_vec).collect();
    let mut hits = 0;
    for (b, want) in batches.iter().enumerate() {
        let schedule = PrefetchSchedule {
            upcoming: batches[b + 1..].to_vec(),
            depth,
        };
        if let Some(t) = c.get(want, 1, 2) {
            assert_eq!(bits(&t), bits(&act(want)));
            hits += 1;
        }
        c.prefetch(&schedule, 1, 2);
    }
    (hits, c, dir)
}

#[test]
fn prefetch_replay_hits_every_batch() {
    let (hits, c, _dir) = replay(2);
    assert_eq!(hits, 10);
    let s = c.stats();
    // Every batch after the first was loaded ahead of its lookup.
    assert_eq!(s.resident_hits, 9);
    assert!(s.resident_peak <= 5);
}

#[test]
fn depth_zero_reads_on_demand() {
    let (hits, c, _dir) = replay(0);
    assert_eq!(hits, 10);
    assert_eq!(c.stats().resident_hits, 0);
    assert!(c.stats().io_reads >= 10);
}

#[test]
fn short_schedule_prefetches_what_remains() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 4);
    c.put(0, 0, &[1], &act(&[1]), 0, 0).unwrap();
    c.put(0, 1, &[2], &act(&[2]), 0, 0).unwrap();
    c.invalidate().unwrap();
    assert!(c.get(&[1], 0, 0).is_none());
    c.put(1, 0, &[1], &act(&[1]), 0, 0).unwrap();
    let schedule = PrefetchSchedule {
        upcoming: vec![vec![1]],
        depth: 4,
    };
    c.prefetch(&schedule, 0, 0);
    assert!(c.get(&[1], 0, 0).is_some());
}

#[test]
fn invalidate_forgets_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 2);
    c.put(0, 0, &[5, 6], &act(&[5, 6]), 0, 1).unwrap();
    c.invalidate().unwrap();
    assert!(c.get(&[5, 6], 0, 1).is_none());
    assert_eq!(c.indexed_samples(), 0);
    assert!(inspect(dir.path()).unwrap().entries.is_empty());
}

#[test]
fn disk_limit_stops_writes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = CacheConfig::new(dir.path(), 0);
    cfg.disk_limit = Some(300);
    let mut c = ActivationCache::open(cfg).unwrap();
    let mut outcomes = Vec::new();
    for b in 0..5u64 {
        outcomes.push(c.put(0, b as u32, &[b], &act(&[b]), 0, 0).unwrap());
    }
    assert_eq!(outcomes[0], PutOutcome::Written);
    assert!(outcomes.contains(&PutOutcome::Skipped));
    assert!(c.disk_limit_hit());
    assert!(inspect(dir.path()).unwrap().total_bytes <= 300);
    assert!(c.get(&[0], 0, 0).is_some());
}

#[test]
fn write_failure_disables_caching() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 0);
    let wdir = dir.path().join("worker0");
    std::fs::remove_dir_all(&wdir).unwrap();
    std::fs::write(&wdir, b"not a directory").unwrap();
    assert_eq!(
        c.put(0, 0, &[1], &act(&[1]), 0, 0).unwrap(),
        PutOutcome::Disabled
    );
    assert!(!c.is_enabled());
    assert!(c.get(&[1], 0, 0).is_none());
    assert_eq!(
        c.put(0, 1, &[2], &act(&[2]), 0, 0).unwrap(),
        PutOutcome::Skipped
    );
}

#[test]
fn inspect_lists_entries_and_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cache(dir.path(), 0);
    c.put(3, 0, &[1, 2], &act(&[1, 2]), 2, 5).unwrap();
    c.put(3, 1, &[3], &act(&[3]), 2, 5).unwrap();
    let inv = inspect(dir.path()).unwrap();
    assert_eq!(inv.entries.len(), 2);
    assert_eq!(inv.entries[0].header.sample_ids, vec![1, 2]);
    assert_eq!(inv.entries[1].header.epoch, 3);
    assert_eq!(
        inv.total_bytes,
        inv.entries.iter().map(|e| e.bytes).sum::<u64>()
    );
    let mut f = OpenOptions::new()
        .append(true)
        .open(&inv.entries[0].file)
        .unwrap();
    f.seek(SeekFrom::End(0)).unwrap();
    f.write_all(b"THAC\x01").unwrap();
    assert_eq!(inspect(dir.path()).unwrap().damaged.len(), 1);
}

#[test]
fn eligibility_threshold() {
    assert!(!cache_eligibility(0.05, 0.10));
    assert!(cache_eligibility(0.40, 0.10));
    assert!(cache_eligibility(0.01, 0.0));
    assert!(!cache_eligibility(0.0, 0.0));
}
