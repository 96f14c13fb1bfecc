//! The exemplar memory: an append-only per-task store that serves replay
//! batches during training and the kNN criterion at inference.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{label_blocks, Example};
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryBuffer {
    tasks: BTreeMap<u32, Vec<Example>>,
    /// Insertion order of task ids.
    order: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    task: u32,
    count: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tasks: Vec<ManifestEntry>,
}

pub fn exemplar_file_name(task: u32) -> String {
    format!("exemplars_task{task}.jsonl")
}

/// Writes examples as JSON Lines.
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut body = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut body, ex)?;
        body.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&body).map_err(|e| Error::io(path, e))
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

impl MemoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.tasks.values().map(Vec::len).sum()
    }

    pub fn task_ids(&self) -> &[u32] {
        &self.order
    }

    pub fn contains_task(&self, task_id: u32) -> bool {
        self.tasks.contains_key(&task_id)
    }

    pub fn task(&self, task_id: u32) -> Option<&[Example]> {
        self.tasks.get(&task_id).map(Vec::as_slice)
    }

    pub fn counts(&self) -> Vec<(u32, usize)> {
        self.order
            .iter()
            .map(|t| (*t, self.tasks[t].len()))
            .collect()
    }

    /// Appends a completed task's exemplars. A task can be added once.
    pub fn add_task_exemplars(&mut self, task_id: u32, exemplars: Vec<Example>) -> Result<()> {
        if self.tasks.contains_key(&task_id) {
            return Err(Error::InvalidState(format!(
                "task {task_id} already buffered"
            )));
        }
        let mut ids = BTreeSet::new();
        for ex in &exemplars {
            if ex.task != task_id {
                return Err(Error::InvalidInput(format!(
                    "exemplar {} belongs to task {}, not {task_id}",
                    ex.id, ex.task
                )));
            }
            if !ids.insert(ex.id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate exemplar id {} in task {task_id}",
                    ex.id
                )));
            }
        }
        self.tasks.insert(task_id, exemplars);
        self.order.push(task_id);
        Ok(())
    }

    fn all(&self) -> Vec<&Example> {
        self.order
            .iter()
            .flat_map(|t| self.tasks[t].iter())
            .collect()
    }

    /// Up to `batch_size` exemplars drawn across every buffered task, in
    /// label blocks so each included label appears at least twice when the
    /// buffer allows. A buffer no larger than `batch_size` is returned whole.
    pub fn replay_batch(&self, batch_size: usize, seed: u64, step: u64) -> Vec<&Example> {
        let all = self.all();
        if all.len() <= batch_size {
            return all;
        }
        let mut rng = stream(seed, "replay", &[step]);
        let labels: Vec<u32> = all.iter().map(|e| e.label).collect();
        let mut out = Vec::with_capacity(batch_size);
        for block in label_blocks(&labels, &mut rng) {
            if out.len() + block.len() <= batch_size {
                out.extend(block.into_iter().map(|i| all[i]));
            }
            if out.len() == batch_size {
                break;
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest { tasks: Vec::new() };
        for &t in &self.order {
            let file = exemplar_file_name(t);
            write_examples(&dir.join(&file), &self.tasks[&t])?;
            manifest.tasks.push(ManifestEntry {
                task: t,
                count: self.tasks[&t].len(),
                file,
            });
        }
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let body = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&body)?;
        let mut buf = Self::new();
        for entry in manifest.tasks {
            let examples = read_examples(&dir.join(&entry.file))?;
            if examples.len() != entry.count {
                return Err(Error::InvalidState(format!(
                    "{}: manifest says {} exemplars, file has {}",
                    entry.file,
                    entry.count,
                    examples.len()
                )));
            }
            buf.add_task_exemplars(entry.task, examples)?;
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Input;

    fn exemplars(task: u32, labels: &[u32], per_label: usize, first_id: u64) -> Vec<Example> {
        let mut id = first_id;
        let mut out = Vec::new();
        for &l in labels {
            for _ in 0..per_label {
                out.push(Example {
                    id,
                    task,
                    label: l,
                    input: Input::Text(format!("x{id}")),
                });
                id += 1;
            }
        }
        out
    }

    #[test]
    fn add_and_retrieve() {
        let mut buf = MemoryBuffer::new();
        buf.add_task_exemplars(0, exemplars(0, &[0, 1], 100, 0))
            .unwrap();
        assert_eq!(buf.len(), 200);
        buf.add_task_exemplars(1, exemplars(1, &[2, 3], 5, 1000))
            .unwrap();
        assert!(buf.task(0).unwrap().iter().all(|e| e.task == 0));
        assert!(buf.task(1).unwrap().iter().all(|e| e.task == 1));
        assert_eq!(buf.task(1).unwrap().len(), 10);
        assert!(matches!(
            buf.add_task_exemplars(0, exemplars(0, &[0], 1, 5000)),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let mut ex = exemplars(0, &[0], 2, 0);
        ex[1].id = ex[0].id;
        assert!(MemoryBuffer::new().add_task_exemplars(0, ex).is_err());
    }

    #[test]
    fn replay_is_stratified() {
        let mut buf = MemoryBuffer::new();
        buf.add_task_exemplars(0, exemplars(0, &[0, 1], 100, 0))
            .unwrap();
        let batch = buf.replay_batch(96, 3, 10);
        assert_eq!(batch.len(), 96);
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for e in &batch {
            *counts.entry(e.label).or_default() += 1;
        }
        assert!(counts.values().all(|&c| c >= 2));
        let ids: Vec<u64> = batch.iter().map(|e| e.id).collect();
        let again: Vec<u64> = buf.replay_batch(96, 3, 10).iter().map(|e| e.id).collect();
        assert_eq!(ids, again);
        let other: Vec<u64> = buf.replay_batch(96, 3, 11).iter().map(|e| e.id).collect();
        assert_ne!(ids, other);
    }

    #[test]
    fn small_buffer_returned_whole() {
        let mut buf = MemoryBuffer::new();
        buf.add_task_exemplars(0, exemplars(0, &[0, 1], 3, 0))
            .unwrap();
        assert_eq!(buf.replay_batch(96, 0, 1).len(), 6);
        assert!(MemoryBuffer::new().replay_batch(96, 0, 1).is_empty());
    }

    #[test]
    fn save_and_load() {
        let mut buf = MemoryBuffer::new();
        buf.add_task_exemplars(0, exemplars(0, &[0, 1], 4, 0))
            .unwrap();
        buf.add_task_exemplars(1, exemplars(1, &[2], 3, 50))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        buf.save(dir.path()).unwrap();
        assert_eq!(MemoryBuffer::load(dir.path()).unwrap(), buf);
    }
}
