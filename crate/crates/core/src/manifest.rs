//! Clip manifests: `clip_id,path,label,split` with paths relative to the
//! manifest's directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonarError};
use crate::parallel::{try_par_map, Execution};
use crate::synth::LabeledClip;
use crate::wav::{read_wav, write_wav};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const WAV_DIR: &str = "wav";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = SonarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(SonarError::InvalidConfig(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub path: String,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

/// Split assignment for `n` items: a seeded shuffle, the first 70% to
/// train, the next 15% to validation, the remainder to test.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Writes `wav/<clip_id>.wav` for every clip and `manifest.csv` under
/// `out_dir`, returning the manifest path.
pub fn write_manifest(
    clips: &[LabeledClip],
    out_dir: &Path,
    seed: u64,
    exec: Execution,
) -> Result<PathBuf> {
    let wav_dir = out_dir.join(WAV_DIR);
    fs::create_dir_all(&wav_dir).map_err(|e| SonarError::io(&wav_dir, e))?;
    let splits = assign_splits(clips.len(), seed);
    let entries: Vec<ManifestEntry> = clips
        .iter()
        .zip(&splits)
        .map(|(c, &split)| ManifestEntry {
            clip_id: c.clip_id.clone(),
            path: format!("{WAV_DIR}/{}.wav", c.clip_id),
            label: c.label,
            split,
        })
        .collect();
    try_par_map(exec, clips, |c| {
        write_wav(&wav_dir.join(format!("{}.wav", c.clip_id)), &c.signal)
    })?;
    let path = out_dir.join(MANIFEST_FILE);
    write_entries(&path, &entries)?;
    Ok(path)
}

pub fn write_entries(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let csv_err = |source| SonarError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for e in entries {
        w.serialize(e).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SonarError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let csv_err = |source| SonarError::Csv {
        path: path.to_path_buf(),
        source,
    };
    if !path.exists() {
        return Err(SonarError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut entries = Vec::new();
    for row in r.deserialize() {
        let e: ManifestEntry =
            row.map_err(|e| SonarError::InvalidData(format!("{}: {e}", path.display())))?;
        if e.label > 1 {
            return Err(SonarError::InvalidData(format!(
                "{}: label {} for {}",
                path.display(),
                e.label,
                e.clip_id
            )));
        }
        entries.push(e);
    }
    if entries.is_empty() {
        return Err(SonarError::InvalidData(format!(
            "{}: empty manifest",
            path.display()
        )));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Manifest { entries, root })
}

impl Manifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn load(&self, entries: &[&ManifestEntry], exec: Execution) -> Result<Vec<LabeledClip>> {
        try_par_map(exec, entries, |e| {
            Ok(LabeledClip {
                clip_id: e.clip_id.clone(),
                label: e.label,
                signal: read_wav(&self.resolve(e))?,
            })
        })
    }

    pub fn load_split(&self, split: Split, exec: Execution) -> Result<Vec<LabeledClip>> {
        self.load(&self.split(split), exec)
    }

    pub fn load_all(&self, exec: Execution) -> Result<Vec<LabeledClip>> {
        let all: Vec<&ManifestEntry> = self.entries.iter().collect();
        self.load(&all, exec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GenConfig};

    #[test]
    fn split_sizes() {
        let s = assign_splits(100, 7);
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (70, 15, 15)
        );
        assert_eq!(s, assign_splits(100, 7));
        assert_ne!(s, assign_splits(100, 8));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            clip_samples: 1600,
            n_real: 4,
            n_fake: 3,
            ..GenConfig::default()
        };
        let clips = generate_dataset(&cfg, Execution::Parallel).unwrap();
        let path = write_manifest(&clips, dir.path(), 1, Execution::Parallel).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.entries.len(), 7);
        assert_eq!(m.entries[0].path, "wav/real_000000.wav");
        let loaded = m.load_all(Execution::Sequential).unwrap();
        for (a, b) in clips.iter().zip(&loaded) {
            assert_eq!((a.label, &a.clip_id), (b.label, &b.clip_id));
            for (x, y) in a.signal.samples().iter().zip(b.signal.samples()) {
                assert!((x - y).abs() <= 1.0 / 32768.0);
            }
        }
        let first = std::fs::read(&path).unwrap();
        write_manifest(&clips, dir.path(), 1, Execution::Sequential).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "clip_id,path,label,split\n").unwrap();
        assert!(read_manifest(&path).unwrap_err().is_usage());
        assert!(read_manifest(&dir.path().join("none.csv"))
            .unwrap_err()
            .is_usage());
        std::fs::write(&path, "clip_id,path,label,split\na,a.wav,3,train\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
