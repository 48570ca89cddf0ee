//! On-disk dataset: `manifest.txt` (key=value), `images.bin` (NHWC bytes),
//! `labels.bin` (u32 LE) and optionally `patches.bin` (row, col, size as u32 LE).

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, PatchBox, SplitSets};
use crate::error::{io_err, RapError, Result};

/// Ordered `key=value` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .ok_or_else(|| RapError::Dataset(format!("manifest lacks `{key}`")))?
            .parse()
            .map_err(|_| RapError::Dataset(format!("manifest: bad value for `{key}`")))
    }

    fn ids(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self
            .get(key)
            .ok_or_else(|| RapError::Dataset(format!("manifest lacks `{key}`")))?;
        raw.split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| RapError::Dataset(format!("manifest: bad id in `{key}`")))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| RapError::Dataset(format!("manifest line without `=`: {line}")))?;
            m.push(k.trim(), v.trim());
        }
        Ok(m)
    }
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes `dataset` and its class split; `extra` entries (generator
/// parameters) are appended to the manifest.
pub fn write_dataset_dir(
    dir: &Path,
    dataset: &Dataset,
    split: &SplitSets,
    split_seed: u64,
    extra: &[(String, String)],
) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut m = Manifest::default();
    m.push("format", "rap-dataset");
    m.push("version", 1);
    m.push("count", dataset.len());
    m.push("hw", dataset.hw());
    m.push("classes", dataset.num_classes());
    m.push("split_seed", split_seed);
    m.push("split_train", join(&split.train));
    m.push("split_val", join(&split.val));
    m.push("split_test", join(&split.test));
    m.push("has_patches", dataset.patches().is_some());
    for (k, v) in extra {
        m.push(k, v);
    }
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(io_err(p))
    };
    write("manifest.txt", m.render().as_bytes())?;
    write("images.bin", dataset.pixels())?;
    let labels: Vec<u8> = dataset.labels().iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    write("labels.bin", &labels)?;
    if let Some(p) = dataset.patches() {
        let bytes: Vec<u8> = p
            .iter()
            .flat_map(|b| [b.row as u32, b.col as u32, b.size as u32])
            .flat_map(u32::to_le_bytes)
            .collect();
        write("patches.bin", &bytes)?;
    }
    Ok(m)
}

pub fn read_dataset_dir(dir: &Path) -> Result<(Dataset, SplitSets, Manifest)> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(io_err(p))
    };
    let text = String::from_utf8(read("manifest.txt")?).map_err(|_| RapError::Dataset("manifest is not UTF-8".into()))?;
    let m = Manifest::parse(&text)?;
    if m.get("format") != Some("rap-dataset") {
        return Err(RapError::Dataset("not a rap-dataset manifest".into()));
    }
    let (count, hw, classes): (usize, usize, usize) = (m.require("count")?, m.require("hw")?, m.require("classes")?);
    let labels: Vec<usize> = read("labels.bin")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if labels.len() != count {
        return Err(RapError::Dataset(format!(
            "labels.bin holds {} labels, manifest says {count}",
            labels.len()
        )));
    }
    let mut ds = Dataset::new(hw, read("images.bin")?, labels, classes)?;
    if m.require::<bool>("has_patches")? {
        let words: Vec<usize> = read("patches.bin")?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let boxes = words
            .chunks_exact(3)
            .map(|w| PatchBox {
                row: w[0],
                col: w[1],
                size: w[2],
            })
            .collect();
        ds = ds.with_patches(boxes)?;
    }
    let split = SplitSets {
        train: m.ids("split_train")?,
        val: m.ids("split_val")?,
        test: m.ids("split_test")?,
    };
    if !split.is_disjoint() {
        return Err(RapError::Dataset("manifest splits overlap".into()));
    }
    Ok((ds, split, m))
}
