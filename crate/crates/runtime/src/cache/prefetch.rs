use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::{self, JoinHandle};

use thaw_core::Tensor;

use super::format::{read_row, validate_entry, EntryLocation};
use crate::Result;

#[derive(Debug, Clone)]
pub(crate) struct RowRead {
    pub path: PathBuf,
    pub entry: EntryLocation,
    pub payload_len: u64,
    pub row: usize,
}

/// Disk reads that assemble one batch, resolved from the index by its owner.
#[derive(Debug, Clone)]
pub(crate) struct ReadPlan {
    pub ids: Vec<u64>,
    pub boundary: u32,
    pub version: u32,
    pub rows: Vec<RowRead>,
    pub per_sample: Vec<usize>,
    pub generation: u64,
}

impl ReadPlan {
    /// Reads every row, validating each distinct entry once. Returns the
    /// tensor and the number of read operations issued.
    pub fn execute(&self) -> (Result<Tensor<f32>>, u64) {
        let row_len: usize = self.per_sample.iter().product();
        let mut data = vec![0f32; row_len * self.rows.len()];
        let mut reads = 0u64;
        let mut validated = BTreeSet::new();
        let mut handles: BTreeMap<PathBuf, File> = BTreeMap::new();
        let result = (|| {
            for (i, r) in self.rows.iter().enumerate() {
                if !handles.contains_key(&r.path) {
                    handles.insert(r.path.clone(), File::open(&r.path)?);
                }
                let f = handles.get_mut(&r.path).expect("inserted");
                if validated.insert((r.path.clone(), r.entry.offset)) {
                    validate_entry(f, r.entry, r.payload_len)?;
                    reads += 1;
                }
                read_row(f, r.entry, r.row, &mut data[i * row_len..(i + 1) * row_len])?;
                reads += 1;
            }
            let mut shape = vec![self.rows.len()];
            shape.extend_from_slice(&self.per_sample);
            Ok(Tensor::new(shape, std::mem::take(&mut data))?)
        })();
        (result, reads)
    }
}

pub(crate) struct Prefetched {
    pub ids: Vec<u64>,
    pub boundary: u32,
    pub version: u32,
    pub generation: u64,
    pub result: Result<Tensor<f32>>,
    pub io_reads: u64,
}

/// Background reader. It only touches the disk; the index and resident
/// window stay with the cache owner, which receives finished batches by message.
pub(crate) struct Prefetcher {
    jobs: Option<Sender<ReadPlan>>,
    done: Receiver<Prefetched>,
    thread: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn() -> Self {
        let (jtx, jrx) = mpsc::channel::<ReadPlan>();
        let (dtx, drx) = mpsc::channel();
        let thread = thread::Builder::new()
            .name("prefetch".into())
            .spawn(move || {
                for plan in jrx {
                    let (result, io_reads) = plan.execute();
                    let msg = Prefetched {
                        ids: plan.ids,
                        boundary: plan.boundary,
                        version: plan.version,
                        generation: plan.generation,
                        result,
                        io_reads,
                    };
                    if dtx.send(msg).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn prefetch thread");
        Prefetcher {
            jobs: Some(jtx),
            done: drx,
            thread: Some(thread),
        }
    }

    pub fn submit(&self, plan: ReadPlan) {
        if let Some(tx) = &self.jobs {
            let _ = tx.send(plan);
        }
    }

    pub fn try_results(&self) -> Vec<Prefetched> {
        self.done.try_iter().collect()
    }

    pub fn wait_result(&self) -> Option<Prefetched> {
        self.done.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        self.jobs = None;
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
