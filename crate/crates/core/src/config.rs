//! Experiment configuration files: flat `key = value` lines grouped under
//! `[section]` headers, `#` comments. Anything left out keeps its default.
//!
//! ```text
//! [synthetic]
//! n_tasks = 4
//!
//! [run]
//! mode = sccl
//! seeds = 0, 1, 2, 3, 4
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{gen_synthetic_tasks, load_manifest, SyntheticSpec, TaskSequence};
use crate::trainer::RunConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Task-order manifest listing JSON Lines files.
    Manifest(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<TaskSequence> {
        match self {
            DataSource::Manifest(p) => load_manifest(p),
            DataSource::Synthetic(spec) => gen_synthetic_tasks(spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub data: DataSource,
    /// Template for every run; `seed` is overwritten per entry of `seeds`.
    pub run: RunConfig,
    pub seeds: Vec<u64>,
}

/// The synthetic 4-task benchmark data: 4 tasks of 2 labels, 200 train and
/// 100 test examples per label.
pub fn benchmark_data() -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(4, 2, 200, 100, 500, 0);
    spec.signal_share = 0.35;
    spec.distractor_share = 0.6;
    spec
}

/// Training settings used with [`benchmark_data`]. Paper defaults except
/// where the tiny from-scratch encoder needs a different regime.
pub fn benchmark_run() -> RunConfig {
    RunConfig {
        batch_size: 16,
        replay_batch_size: 16,
        epochs: 30,
        base_lr: 5e-4,
        replay_every: 15,
        ..RunConfig::default()
    }
}

pub fn benchmark_config() -> CliConfig {
    CliConfig {
        data: DataSource::Synthetic(benchmark_data()),
        run: benchmark_run(),
        seeds: vec![0, 1, 2, 3, 4],
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses config text; relative manifest paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let sections = split_sections(text)?;
        let mut run = RunConfig::default();
        let mut seeds = vec![0];
        let mut manifest = None;
        let mut synthetic = None;

        for (section, entries) in &sections {
            let mut kv = Entries::new(section, entries);
            match section.as_str() {
                "data" => {
                    if let Some(p) = kv.take::<String>("manifest")? {
                        let p = PathBuf::from(p);
                        manifest = Some(if p.is_absolute() { p } else { base.join(p) });
                    }
                }
                "synthetic" => {
                    let mut s = benchmark_data();
                    kv.set(&mut s.n_tasks, "n_tasks")?;
                    kv.set(&mut s.labels_per_task, "labels_per_task")?;
                    kv.set(&mut s.train_per_label, "train_per_label")?;
                    kv.set(&mut s.test_per_label, "test_per_label")?;
                    kv.set(&mut s.vocab_size, "vocab_size")?;
                    kv.set(&mut s.seed, "seed")?;
                    kv.set(&mut s.signal_share, "signal_share")?;
                    kv.set(&mut s.distractor_share, "distractor_share")?;
                    synthetic = Some(s);
                }
                "run" => {
                    kv.set(&mut run.mode, "mode")?;
                    if let Some(list) = kv.take::<String>("seeds")? {
                        seeds = parse_list(&list)
                            .map_err(|e| Error::Config(format!("[run] seeds: {e}")))?;
                    }
                    kv.set(&mut run.batch_size, "batch_size")?;
                    kv.set(&mut run.epochs, "epochs")?;
                    kv.set(&mut run.base_lr, "lr")?;
                    kv.set(&mut run.replay_every, "replay_every")?;
                    kv.set(&mut run.replay_batch_size, "replay_batch_size")?;
                    kv.set(&mut run.memory_per_task, "memory_per_task")?;
                    kv.set(&mut run.clusters_per_label, "clusters_per_label")?;
                    kv.set(&mut run.temperatures.kappa, "kappa")?;
                    kv.set(&mut run.temperatures.tau, "tau")?;
                    kv.set(&mut run.temperatures.t_infer, "temperature")?;
                    kv.set(&mut run.k, "k")?;
                }
                "encoder" => {
                    kv.set(&mut run.hashing.dim, "hash_dim")?;
                    kv.set(&mut run.hashing.ngram_min, "ngram_min")?;
                    kv.set(&mut run.hashing.ngram_max, "ngram_max")?;
                    kv.set(&mut run.hashing.signed, "signed")?;
                    if let Some(list) = kv.take::<String>("widths")? {
                        run.widths = parse_list(&list)
                            .map_err(|e| Error::Config(format!("[encoder] widths: {e}")))?;
                    }
                }
                other => return Err(Error::Config(format!("unknown section [{other}]"))),
            }
            kv.finish()?;
        }

        let data = match (manifest, synthetic) {
            (Some(p), None) => DataSource::Manifest(p),
            (None, Some(s)) => DataSource::Synthetic(s),
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "both a manifest and a synthetic spec are given; pick one".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "no data source: add [data] manifest = ... or a [synthetic] section".into(),
                ))
            }
        };
        if seeds.is_empty() {
            return Err(Error::Config("[run] seeds is empty".into()));
        }
        let cfg = Self { data, run, seeds };
        cfg.run_for(cfg.seeds[0]).validate()?;
        Ok(cfg)
    }

    pub fn run_for(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.run.clone()
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let r = &self.run;
        match &self.data {
            DataSource::Manifest(p) => {
                let _ = writeln!(out, "[data]\nmanifest = {}\n", p.display());
            }
            DataSource::Synthetic(s) => {
                let _ = writeln!(
                    out,
                    "[synthetic]\nn_tasks = {}\nlabels_per_task = {}\ntrain_per_label = {}\ntest_per_label = {}\n\
                     vocab_size = {}\nseed = {}\nsignal_share = {:?}\ndistractor_share = {:?}\n",
                    s.n_tasks,
                    s.labels_per_task,
                    s.train_per_label,
                    s.test_per_label,
                    s.vocab_size,
                    s.seed,
                    s.signal_share,
                    s.distractor_share
                );
            }
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "[run]\nmode = {}\nseeds = {}\nbatch_size = {}\nepochs = {}\nlr = {:?}\nreplay_every = {}\n\
             replay_batch_size = {}\nmemory_per_task = {}\nclusters_per_label = {}\nkappa = {:?}\ntau = {:?}\n\
             temperature = {:?}\nk = {}\n",
            r.mode,
            seeds.join(", "),
            r.batch_size,
            r.epochs,
            r.base_lr,
            r.replay_every,
            r.replay_batch_size,
            r.memory_per_task,
            r.clusters_per_label,
            r.temperatures.kappa,
            r.temperatures.tau,
            r.temperatures.t_infer,
            r.k
        );
        let widths: Vec<String> = r.widths.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "[encoder]\nhash_dim = {}\nngram_min = {}\nngram_max = {}\nsigned = {}\nwidths = {}",
            r.hashing.dim,
            r.hashing.ngram_min,
            r.hashing.ngram_max,
            r.hashing.signed,
            widths.join(", ")
        );
        out
    }
}

type Section = Vec<(usize, String, String)>;

fn split_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim().to_string();
            if sections.contains_key(&name) {
                return Err(Error::Config(format!(
                    "line {}: section [{name}] repeated",
                    i + 1
                )));
            }
            sections.insert(name.clone(), Vec::new());
            current = Some(name);
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value, got {line:?}",
                i + 1
            )));
        };
        let Some(sec) = &current else {
            return Err(Error::Config(format!(
                "line {}: key outside any section",
                i + 1
            )));
        };
        sections.get_mut(sec).expect("section registered").push((
            i + 1,
            k.trim().to_string(),
            v.trim().to_string(),
        ));
    }
    Ok(sections)
}

struct Entries<'a> {
    section: &'a str,
    map: BTreeMap<&'a str, (usize, &'a str)>,
    dup: Option<(usize, &'a str)>,
}

impl<'a> Entries<'a> {
    fn new(section: &'a str, entries: &'a Section) -> Self {
        let mut map = BTreeMap::new();
        let mut dup = None;
        for (line, k, v) in entries {
            if map.insert(k.as_str(), (*line, v.as_str())).is_some() && dup.is_none() {
                dup = Some((*line, k.as_str()));
            }
        }
        Self { section, map, dup }
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let Some((line, v)) = self.map.remove(key) else {
            return Ok(None);
        };
        v.parse().map(Some).map_err(|e| {
            Error::Config(format!(
                "line {line}: [{}] {key} = {v:?}: {e}",
                self.section
            ))
        })
    }

    fn set<T: FromStr>(&mut self, slot: &mut T, key: &str) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some((line, k)) = self.dup {
            return Err(Error::Config(format!(
                "line {line}: [{}] {k} given twice",
                self.section
            )));
        }
        if let Some((k, (line, _))) = self.map.into_iter().next() {
            return Err(Error::Config(format!(
                "line {line}: unknown key [{}] {k}",
                self.section
            )));
        }
        Ok(())
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

/// Parses a comma-separated seed list such as `0,1,2`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = parse_list(s).map_err(|e| Error::Config(format!("seeds: {e}")))?;
    if seeds.is_empty() {
        return Err(Error::Config("seeds: empty list".into()));
    }
    Ok(seeds)
}

impl FromStr for CliConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, Path::new("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Mode;

    #[test]
    fn empty_synthetic_section_gives_benchmark_data_and_paper_run() {
        let c: CliConfig = "[synthetic]\n".parse().unwrap();
        assert_eq!(c.data, DataSource::Synthetic(benchmark_data()));
        assert_eq!(c.run, RunConfig::default());
        assert_eq!(c.run.batch_size, 96);
        assert_eq!(c.run.replay_every, 100);
        assert_eq!(c.seeds, vec![0]);
    }

    #[test]
    fn exactly_one_data_source() {
        let both = "[data]\nmanifest = a.txt\n[synthetic]\nn_tasks = 2\n";
        assert!(matches!(both.parse::<CliConfig>(), Err(Error::Config(_))));
        assert!(matches!(
            "[run]\nk = 3\n".parse::<CliConfig>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_and_comments() {
        let c: CliConfig = "# hi\n[synthetic]\nn_tasks = 2 # two\n[run]\nmode = cl_only\nseeds = 3, 4\nlr = 1e-3\n\
                            [encoder]\nwidths = 32, 8\nsigned = false\n"
            .parse()
            .unwrap();
        assert_eq!(c.run.mode, Mode::ClOnly);
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.run.base_lr, 1e-3);
        assert_eq!(c.run.widths, vec![32, 8]);
        assert!(!c.run.hashing.signed);
        assert_eq!(c.run_for(4).seed, 4);
    }

    #[test]
    fn strictness() {
        for bad in [
            "[synthetic]\nbogus = 1\n",
            "[synthetic]\nn_tasks = 1\nn_tasks = 2\n",
            "[nope]\n",
            "n_tasks = 1\n",
            "[synthetic]\nn_tasks = x\n",
            "[synthetic]\n[run]\nmode = fancy\n",
            "[synthetic]\n[run]\nreplay_every = 0\n",
            "[synthetic]\n[run]\nseeds = \n",
        ] {
            assert!(
                matches!(bad.parse::<CliConfig>(), Err(Error::Config(_))),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn relative_manifest_resolves_against_base() {
        let c = CliConfig::parse("[data]\nmanifest = orders/o1.txt\n", Path::new("/cfg")).unwrap();
        assert_eq!(
            c.data,
            DataSource::Manifest(PathBuf::from("/cfg/orders/o1.txt"))
        );
    }

    #[test]
    fn render_round_trips() {
        let mut c = benchmark_config();
        c.run.temperatures.kappa = 0.1 + 0.2;
        let back: CliConfig = c.render().parse().unwrap();
        assert_eq!(back, c);
    }
}
