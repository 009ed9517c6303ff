use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::{E1_MARKER, E2_MARKER, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::numkit::Rng;

use super::config::StreamConfig;

/// One labeled sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub tokens: Vec<u32>,
    pub e1_pos: usize,
    pub e2_pos: usize,
    /// Global relation id.
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Label-description sequences, available whenever the relation is.
    Description,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Description => "desc",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "desc" => Some(Split::Description),
            _ => None,
        }
    }
}

/// Data of one task. Relation ids are global and contiguous in task order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskData {
    /// 1-based.
    pub task: usize,
    pub relations: Vec<usize>,
    pub train: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    pub descriptions: Vec<TaskInstance>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
}

/// Vocabulary layout: reserved markers, then one topic block per task, then
/// shared tokens.
struct Layout<'a> {
    cfg: &'a StreamConfig,
}

impl Layout<'_> {
    fn topic_start(&self, task: usize) -> u32 {
        (RESERVED_TOKENS + (task - 1) * self.cfg.topic_tokens) as u32
    }

    fn signature(&self, task: usize, local: usize, sub: usize) -> Vec<u32> {
        let k = self.cfg.signature_tokens;
        let block = local * self.cfg.subclusters + sub;
        let start = self.topic_start(task) as usize + block * k;
        (start..start + k).map(|v| v as u32).collect()
    }

    /// Filler tokens of subcluster `sub`: the topic tokens left after the
    /// signatures, split into one region per subcluster. Falls back to the
    /// whole topic when too few remain.
    fn topic_filler(&self, task: usize, sub: usize) -> std::ops::Range<u32> {
        let c = self.cfg;
        let used = c.signature_blocks() * c.signature_tokens;
        let start = self.topic_start(task);
        let free = c.topic_tokens - used;
        let width = free / c.subclusters;
        if width == 0 {
            return start..start + c.topic_tokens as u32;
        }
        let lo = start + (used + sub * width) as u32;
        lo..lo + width as u32
    }

    fn shared(&self) -> std::ops::Range<u32> {
        let start = (RESERVED_TOKENS + self.cfg.tasks * self.cfg.topic_tokens) as u32;
        start..self.cfg.vocab as u32
    }
}

fn pick(range: &std::ops::Range<u32>, rng: &mut Rng) -> u32 {
    range.start + rng.below((range.end - range.start) as usize) as u32
}

fn instance(layout: &Layout<'_>, task: usize, local: usize, label: usize, signature_rate: f64, noise: f64, rng: &mut Rng) -> TaskInstance {
    let cfg = layout.cfg;
    let n = cfg.seq_len;
    let sub = rng.below(cfg.subclusters);
    let sig = layout.signature(task, local, sub);
    let filler = layout.topic_filler(task, sub);
    let shared = layout.shared();
    let any = RESERVED_TOKENS as u32..cfg.vocab as u32;
    let e1_pos = rng.below(n);
    let mut e2_pos = rng.below(n - 1);
    if e2_pos >= e1_pos {
        e2_pos += 1;
    }
    let tokens = (0..n)
        .map(|i| {
            if i == e1_pos {
                return E1_MARKER;
            }
            if i == e2_pos {
                return E2_MARKER;
            }
            if rng.uniform() < noise {
                return pick(&any, rng);
            }
            if rng.uniform() < signature_rate {
                sig[rng.below(sig.len())]
            } else if shared.is_empty() || rng.uniform() < cfg.topic_rate {
                pick(&filler, rng)
            } else {
                pick(&shared, rng)
            }
        })
        .collect();
    TaskInstance {
        tokens,
        e1_pos,
        e2_pos,
        label,
    }
}

/// Draws the whole stream. Task `t` owns relations
/// `(t-1)·R .. t·R` and a private block of topic tokens.
pub fn generate_stream(cfg: &StreamConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    let layout = Layout { cfg };
    let r = cfg.relations_per_task;
    let tasks = (1..=cfg.tasks)
        .map(|t| {
            let mut rng = Rng::derive(seed, &format!("stream/task{t}"));
            let relations: Vec<usize> = ((t - 1) * r..t * r).collect();
            let draw = |count: usize, sig_rate: f64, noise: f64, rng: &mut Rng| {
                let mut out = Vec::with_capacity(count * r);
                for (local, &label) in relations.iter().enumerate() {
                    for _ in 0..count {
                        out.push(instance(&layout, t, local, label, sig_rate, noise, rng));
                    }
                }
                out
            };
            let train = draw(cfg.train_per_relation, cfg.signature_rate, cfg.noise, &mut rng);
            let test = draw(cfg.test_per_relation, cfg.signature_rate, cfg.noise, &mut rng);
            // descriptions are clean renderings of the relation template
            let descriptions = draw(cfg.descriptions_per_relation, cfg.signature_rate.max(0.5), 0.0, &mut rng);
            TaskData {
                task: t,
                relations: relations.clone(),
                train,
                test,
                descriptions,
            }
        })
        .collect();
    Ok(TaskStream { tasks })
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task owning `relation`.
    pub fn task_of(&self, relation: usize) -> Option<usize> {
        self.tasks.iter().find(|t| t.relations.contains(&relation)).map(|t| t.task)
    }

    pub fn file_name(task: usize) -> String {
        format!("task-{task:02}.tsv")
    }

    /// One tab-separated file per task: two header lines, a column line,
    /// then `tokens, e1_pos, e2_pos, label, split` rows.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for t in &self.tasks {
            let mut s = String::new();
            let rels: Vec<String> = t.relations.iter().map(|r| r.to_string()).collect();
            writeln!(s, "# task\t{}", t.task).unwrap();
            writeln!(s, "# relations\t{}", rels.join(",")).unwrap();
            writeln!(s, "tokens\te1_pos\te2_pos\tlabel\tsplit").unwrap();
            for (split, rows) in [(Split::Train, &t.train), (Split::Test, &t.test), (Split::Description, &t.descriptions)] {
                for x in rows {
                    let toks: Vec<String> = x.tokens.iter().map(|v| v.to_string()).collect();
                    writeln!(s, "{}\t{}\t{}\t{}\t{}", toks.join(" "), x.e1_pos, x.e2_pos, x.label, split.tag()).unwrap();
                }
            }
            let path = dir.join(Self::file_name(t.task));
            fs::write(&path, s)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Reads `task-01.tsv`, `task-02.tsv`, … until the first missing file.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut tasks = Vec::new();
        loop {
            let path = dir.join(Self::file_name(tasks.len() + 1));
            if !path.exists() {
                break;
            }
            tasks.push(read_task(&path)?);
        }
        if tasks.is_empty() {
            return Err(Error::format(dir, "no task files"));
        }
        Ok(TaskStream { tasks })
    }
}

fn read_task(path: &Path) -> Result<TaskData> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::format(path, reason);
    let mut lines = text.lines();
    let header = |line: Option<&str>, key: &str| -> Result<String> {
        line.and_then(|l| l.strip_prefix(&format!("# {key}\t")))
            .map(str::to_string)
            .ok_or_else(|| Error::format(path, format!("missing `{key}` header")))
    };
    let task: usize = header(lines.next(), "task")?.parse().map_err(|_| bad("bad task id".into()))?;
    let relations = header(lines.next(), "relations")?
        .split(',')
        .map(|v| v.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| bad("bad relation list".into()))?;
    if lines.next() != Some("tokens\te1_pos\te2_pos\tlabel\tsplit") {
        return Err(bad("missing column line".into()));
    }
    let mut data = TaskData {
        task,
        relations,
        train: Vec::new(),
        test: Vec::new(),
        descriptions: Vec::new(),
    };
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(format!("row {n}: expected 5 fields")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("row {n}: bad integer `{s}`")));
        let tokens = f[0]
            .split(' ')
            .map(|v| v.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("row {n}: bad tokens")))?;
        let x = TaskInstance {
            tokens,
            e1_pos: num(f[1])?,
            e2_pos: num(f[2])?,
            label: num(f[3])?,
        };
        if x.e1_pos == x.e2_pos || x.e1_pos >= x.tokens.len() || x.e2_pos >= x.tokens.len() {
            return Err(bad(format!("row {n}: bad marker positions")));
        }
        if !data.relations.contains(&x.label) {
            return Err(bad(format!("row {n}: label {} not in task", x.label)));
        }
        match Split::parse(f[4]) {
            Some(Split::Train) => data.train.push(x),
            Some(Split::Test) => data.test.push(x),
            Some(Split::Description) => data.descriptions.push(x),
            None => return Err(bad(format!("row {n}: unknown split `{}`", f[4]))),
        }
    }
    Ok(data)
}
