//! Disk-backed cache of frozen-prefix activations with a small resident window
//! and a lookahead prefetch thread.
//!
//! Entries are appended one file per epoch; an index maps every sample id to
//! its row in the latest entry holding it, so a batch drawn in a later epoch
//! (under a different permutation) is assembled row by row. A lookup hits only
//! when every id is present under the current boundary and freeze version.

pub mod format;
mod prefetch;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use thaw_core::Tensor;

use crate::{Result, RuntimeError};
use format::{encode_entry, scan_file, EntryHeader, EntryLocation};
use prefetch::{Prefetcher, ReadPlan};

pub use format::{CacheEntry, MAGIC};

/// Batches held in memory at once.
pub const RESIDENT_BATCHES: usize = 5;
pub const DEFAULT_PREFETCH_DEPTH: usize = 2;
pub const DEFAULT_THRESHOLD: f64 = 0.10;

/// Whether caching pays off: some prefix is frozen and its share of forward
/// FLOPs reaches `threshold`.
pub fn cache_eligibility(frozen_fraction_fwd_flops: f64, threshold: f64) -> bool {
    frozen_fraction_fwd_flops > 0.0 && frozen_fraction_fwd_flops >= threshold
}

#[derive(Debug, Clone)]
pub struct CacheConfig {
    /// Root directory; each worker writes under `worker<id>/`.
    pub dir: PathBuf,
    pub worker_id: usize,
    /// Batches to load ahead of consumption; 0 reads from disk on demand.
    pub prefetch_depth: usize,
    /// Stop writing once this many bytes are on disk.
    pub disk_limit: Option<u64>,
}

impl CacheConfig {
    pub fn new(dir: impl Into<PathBuf>, worker_id: usize) -> Self {
        CacheConfig {
            dir: dir.into(),
            worker_id,
            prefetch_depth: DEFAULT_PREFETCH_DEPTH,
            disk_limit: None,
        }
    }

    pub fn worker_dir(&self) -> PathBuf {
        self.dir.join(format!("worker{}", self.worker_id))
    }
}

/// Upcoming batches, in consumption order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefetchSchedule {
    pub upcoming: Vec<Vec<u64>>,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub puts: u64,
    pub hits: u64,
    pub resident_hits: u64,
    pub misses: u64,
    /// Disk read operations issued by lookups and prefetches.
    pub io_reads: u64,
    pub bytes_written: u64,
    pub resident_peak: usize,
    pub prefetched: u64,
    /// Prefetched batches dropped because the window was full of unconsumed entries.
    pub prefetch_skipped: u64,
    pub corrupt_dropped: u64,
    pub invalidations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Written,
    /// Caching is off, or writing stopped at the disk limit.
    Skipped,
    /// The write failed; caching is now disabled for the run.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RowLoc {
    file: usize,
    sample_shape: Arc<[usize]>,
    entry: EntryLocation,
    payload_len: u64,
    row: usize,
    boundary: u32,
    version: u32,
}

#[derive(Debug)]
struct Resident {
    ids: Vec<u64>,
    boundary: u32,
    version: u32,
    tensor: Tensor<f32>,
    /// Loaded ahead and not yet consumed.
    pending: bool,
}

pub struct ActivationCache {
    config: CacheConfig,
    files: Vec<PathBuf>,
    writer: Option<(u32, usize, File)>,
    index: HashMap<u64, RowLoc>,
    resident: VecDeque<Resident>,
    in_flight: HashSet<Vec<u64>>,
    prefetcher: Option<Prefetcher>,
    stats: CacheStats,
    enabled: bool,
    writes_enabled: bool,
    disk_limit_hit: bool,
    disk_bytes: u64,
    epoch_generation: u64,
}

impl ActivationCache {
    /// Opens the worker's cache directory, rebuilding the index from any
    /// entries already on disk.
    pub fn open(config: CacheConfig) -> Result<Self> {
        let dir = config.worker_dir();
        std::fs::create_dir_all(&dir)?;
        let prefetcher = (config.prefetch_depth > 0).then(Prefetcher::spawn);
        let mut cache = ActivationCache {
            config,
            files: Vec::new(),
            writer: None,
            index: HashMap::new(),
            resident: VecDeque::new(),
            in_flight: HashSet::new(),
            prefetcher,
            stats: CacheStats::default(),
            enabled: true,
            writes_enabled: true,
            disk_limit_hit: false,
            disk_bytes: 0,
            epoch_generation: 0,
        };
        cache.rebuild_index()?;
        Ok(cache)
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn disk_limit_hit(&self) -> bool {
        self.disk_limit_hit
    }

    pub fn resident_len(&self) -> usize {
        self.resident.len()
    }

    pub fn indexed_samples(&self) -> usize {
        self.index.len()
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        self.files.clear();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(self.config.worker_dir())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "thac"))
            .collect();
        paths.sort();
        for path in paths {
            let scan = scan_file(&path)?;
            if let Some((offset, reason)) = &scan.damaged_tail {
                warn!(
                    "{}: ignoring entries from offset {offset}: {reason}",
                    path.display()
                );
            }
            self.disk_bytes += scan.bytes;
            let file = self.files.len();
            self.files.push(path);
            for (h, loc) in scan.entries {
                self.register(file, &h, loc);
            }
        }
        Ok(())
    }

    fn register(&mut self, file: usize, h: &EntryHeader, entry: EntryLocation) {
        let sample_shape: Arc<[usize]> = h.dims[1..].into();
        for (row, &id) in h.sample_ids.iter().enumerate() {
            self.index.insert(
                id,
                RowLoc {
                    file,
                    sample_shape: Arc::clone(&sample_shape),
                    entry,
                    payload_len: h.payload_len(),
                    row,
                    boundary: h.boundary_module,
                    version: h.freeze_version,
                },
            );
        }
    }

    fn file_for_epoch(&mut self, epoch: u32) -> Result<&mut File> {
        if self.writer.as_ref().map(|w| w.0) != Some(epoch) {
            let path = self
                .config
                .worker_dir()
                .join(format!("epoch{epoch:05}.thac"));
            let handle = OpenOptions::new().create(true).append(true).open(&path)?;
            let idx = match self.files.iter().position(|p| *p == path) {
                Some(i) => i,
                None => {
                    self.files.push(path);
                    self.files.len() - 1
                }
            };
            self.writer = Some((epoch, idx, handle));
        }
        Ok(&mut self.writer.as_mut().expect("set above").2)
    }

    /// Persists the activation of one batch and makes it resident.
    #[allow(clippy::too_many_arguments)]
    pub fn put(
        &mut self,
        epoch: u32,
        batch_seq: u32,
        sample_ids: &[u64],
        activation: &Tensor<f32>,
        boundary_module: u32,
        freeze_version: u32,
    ) -> Result<PutOutcome> {
        if activation.rank() == 0 || activation.shape()[0] != sample_ids.len() {
            return Err(RuntimeError::Protocol(format!(
                "activation leading dimension {:?} does not match {} sample ids",
                activation.shape().first(),
                sample_ids.len()
            )));
        }
        if !self.enabled || !self.writes_enabled {
            return Ok(PutOutcome::Skipped);
        }
        let header = EntryHeader {
            epoch,
            batch_seq,
            boundary_module,
            freeze_version,
            sample_ids: sample_ids.to_vec(),
            dims: activation.shape().to_vec(),
        };
        let bytes = encode_entry(&header, activation.data());
        if let Some(limit) = self.config.disk_limit {
            if self.disk_bytes + bytes.len() as u64 > limit {
                warn!(
                    "activation cache reached its {limit}-byte disk limit; further writes disabled"
                );
                self.writes_enabled = false;
                self.disk_limit_hit = true;
                return Ok(PutOutcome::Skipped);
            }
        }
        let offset = self.disk_bytes_of_current(epoch);
        let written = offset.and_then(|offset| {
            let f = self.file_for_epoch(epoch)?;
            f.write_all(&bytes)?;
            Ok(offset)
        });
        let offset = match written {
            Ok(o) => o,
            Err(e) => {
                warn!("activation cache write failed, caching disabled: {e}");
                self.disable();
                return Ok(PutOutcome::Disabled);
            }
        };
        let file = self.writer.as_ref().expect("opened").1;
        let payload_offset = offset + (bytes.len() as u64 - header.payload_len() - 8);
        self.register(
            file,
            &header,
            EntryLocation {
                offset,
                payload_offset,
                len: bytes.len() as u64,
            },
        );
        self.disk_bytes += bytes.len() as u64;
        self.stats.bytes_written += bytes.len() as u64;
        self.stats.puts += 1;
        self.insert_resident(Resident {
            ids: sample_ids.to_vec(),
            boundary: boundary_module,
            version: freeze_version,
            tensor: activation.clone(),
            pending: false,
        });
        Ok(PutOutcome::Written)
    }

    /// Current length of the epoch's file, i.e. where the next entry starts.
    fn disk_bytes_of_current(&mut self, epoch: u32) -> Result<u64> {
        let f = self.file_for_epoch(epoch)?;
        Ok(f.metadata()?.len())
    }

    fn disable(&mut self) {
        self.enabled = false;
        self.index.clear();
        self.resident.clear();
        self.in_flight.clear();
        self.writer = None;
    }

    /// Adds to the window, evicting the oldest consumed entry when full. When
    /// every resident entry is still awaiting consumption, nothing is evicted
    /// and the new entry is not kept.
    fn insert_resident(&mut self, entry: Resident) -> bool {
        if self.resident.len() >= RESIDENT_BATCHES {
            match self.resident.iter().position(|r| !r.pending) {
                Some(i) => {
                    self.resident.remove(i);
                }
                None => return false,
            }
        }
        self.resident.push_back(entry);
        self.stats.resident_peak = self.stats.resident_peak.max(self.resident.len());
        true
    }

    fn drain_prefetched(&mut self, block_for: Option<&[u64]>) {
        let Some(p) = &self.prefetcher else { return };
        let mut arrived = p.try_results();
        if let Some(ids) = block_for {
            if self.in_flight.contains(ids) && !arrived.iter().any(|d| d.ids == ids) {
                while let Some(done) = p.wait_result() {
                    let found = done.ids == ids;
                    arrived.push(done);
                    if found {
                        break;
                    }
                }
            }
        }
        for done in arrived {
            self.in_flight.remove(&done.ids);
            self.stats.io_reads += done.io_reads;
            if done.generation != self.epoch_generation {
                continue;
            }
            match done.result {
                Ok(tensor) => {
                    let kept = self.insert_resident(Resident {
                        ids: done.ids,
                        boundary: done.boundary,
                        version: done.version,
                        tensor,
                        pending: true,
                    });
                    if kept {
                        self.stats.prefetched += 1;
                    } else {
                        self.stats.prefetch_skipped += 1;
                    }
                }
                Err(e) => self.drop_corrupt(&done.ids, &e),
            }
        }
    }

    fn drop_corrupt(&mut self, ids: &[u64], err: &RuntimeError) {
        warn!("dropping unreadable cache entry: {err}");
        self.stats.corrupt_dropped += 1;
        let bad: HashSet<(usize, u64)> = ids
            .iter()
            .filter_map(|id| self.index.get(id))
            .map(|l| (l.file, l.entry.offset))
            .collect();
        self.index
            .retain(|_, l| !bad.contains(&(l.file, l.entry.offset)));
    }

    fn plan(&self, sample_ids: &[u64], boundary: u32, version: u32) -> Option<ReadPlan> {
        let mut rows = Vec::with_capacity(sample_ids.len());
        let first = self.index.get(sample_ids.first()?)?;
        let per_sample = first.sample_shape.to_vec();
        for id in sample_ids {
            let loc = self.index.get(id)?;
            if loc.boundary != boundary
                || loc.version != version
                || *loc.sample_shape != per_sample[..]
            {
                return None;
            }
            rows.push(prefetch::RowRead {
                path: self.files[loc.file].clone(),
                entry: loc.entry,
                payload_len: loc.payload_len,
                row: loc.row,
            });
        }
        Some(ReadPlan {
            ids: sample_ids.to_vec(),
            boundary,
            version,
            rows,
            per_sample,
            generation: self.epoch_generation,
        })
    }

    /// Returns the activation for exactly these samples, or `None` on a miss.
    pub fn get(
        &mut self,
        sample_ids: &[u64],
        boundary_module: u32,
        freeze_version: u32,
    ) -> Option<Tensor<f32>> {
        if !self.enabled || sample_ids.is_empty() {
            self.stats.misses += 1;
            return None;
        }
        self.drain_prefetched(Some(sample_ids));
        if let Some(r) = self.resident.iter_mut().find(|r| {
            r.ids == sample_ids && r.boundary == boundary_module && r.version == freeze_version
        }) {
            r.pending = false;
            self.stats.hits += 1;
            self.stats.resident_hits += 1;
            return Some(r.tensor.clone());
        }
        let Some(plan) = self.plan(sample_ids, boundary_module, freeze_version) else {
            self.stats.misses += 1;
            return None;
        };
        let (result, reads) = plan.execute();
        self.stats.io_reads += reads;
        match result {
            Ok(t) => {
                self.stats.hits += 1;
                Some(t)
            }
            Err(e) => {
                self.drop_corrupt(sample_ids, &e);
                self.stats.misses += 1;
                None
            }
        }
    }

    /// Starts loading the next `depth` scheduled batches that are cached but not resident.
    pub fn prefetch(
        &mut self,
        schedule: &PrefetchSchedule,
        boundary_module: u32,
        freeze_version: u32,
    ) {
        if !self.enabled || self.prefetcher.is_none() {
            return;
        }
        self.drain_prefetched(None);
        for ids in schedule.upcoming.iter().take(schedule.depth) {
            if self.in_flight.contains(ids) || self.resident.iter().any(|r| &r.ids == ids) {
                continue;
            }
            let Some(plan) = self.plan(ids, boundary_module, freeze_version) else {
                continue;
            };
            self.in_flight.insert(ids.clone());
            self.prefetcher.as_ref().expect("checked").submit(plan);
        }
    }

    /// Forgets every entry and deletes the worker's files.
    pub fn invalidate(&mut self) -> Result<()> {
        self.epoch_generation += 1;
        self.index.clear();
        self.resident.clear();
        self.in_flight.clear();
        self.writer = None;
        for f in self.files.drain(..) {
            if let Err(e) = std::fs::remove_file(&f) {
                if e.kind() != std::io::ErrorKind::NotFound {
                    return Err(e.into());
                }
            }
        }
        self.disk_bytes = 0;
        self.stats.invalidations += 1;
        Ok(())
    }
}

/// One entry as listed by `inspect`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryInfo {
    pub file: PathBuf,
    pub offset: u64,
    pub header: EntryHeader,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default)]
pub struct CacheInventory {
    pub entries: Vec<EntryInfo>,
    pub total_bytes: u64,
    pub damaged: Vec<(PathBuf, u64, String)>,
}

/// Lists every entry in every cache file under `dir`.
pub fn inspect(dir: &Path) -> Result<CacheInventory> {
    let mut inv = CacheInventory::default();
    let mut stack = vec![dir.to_path_buf()];
    let mut files = Vec::new();
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "thac") {
                files.push(p);
            }
        }
    }
    files.sort();
    for f in files {
        let scan = scan_file(&f)?;
        inv.total_bytes += scan.bytes;
        if let Some((off, reason)) = scan.damaged_tail {
            inv.damaged.push((f.clone(), off, reason));
        }
        for (header, loc) in scan.entries {
            inv.entries.push(EntryInfo {
                file: f.clone(),
                offset: loc.offset,
                header,
                bytes: loc.len,
            });
        }
    }
    Ok(inv)
}
