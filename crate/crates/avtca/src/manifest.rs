//! Dataset manifests and sample files.
//!
//! A manifest is a text file of `# key value` metadata lines followed by one
//! `<relative path>\t<class index>\t<split tag>` record per sample. Each
//! sample file holds two AVT1 tensors back to back: audio `[1, L]`, then
//! video `[1, T, 56, 56]`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use avtca_core::data::{assign_splits, generate_sample, Sample, Split, SyntheticSpec, TRAIN_DEN, TRAIN_NUM};
use avtca_core::{ModelConfig, Tensor};

use crate::avt1;
use crate::error::{CliError, CliResult};

pub const FILE_NAME: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub path: String,
    pub class: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    /// Ordered `(key, value)` metadata.
    pub meta: Vec<(String, String)>,
    pub records: Vec<Record>,
}

impl Manifest {
    /// Records and metadata for `spec`, with the stratified split applied.
    pub fn synthetic(spec: &SyntheticSpec) -> CliResult<Self> {
        spec.validate()?;
        let labels: Vec<usize> = (0..spec.classes).flat_map(|c| std::iter::repeat_n(c, spec.per_class)).collect();
        let splits = assign_splits(&labels, spec.classes, spec.seed)?;
        let records = labels
            .iter()
            .zip(splits)
            .enumerate()
            .map(|(i, (&class, split))| Record { path: sample_path(class, i % spec.per_class), class, split })
            .collect();
        let names: Vec<String> = (0..spec.classes).map(|c| format!("class{c}")).collect();
        let meta = [
            ("classes", spec.classes.to_string()),
            ("class_names", names.join(",")),
            ("per_class", spec.per_class.to_string()),
            ("split", format!("{}/{}", 100 * TRAIN_NUM / TRAIN_DEN, 100 - 100 * TRAIN_NUM / TRAIN_DEN)),
            ("seed", spec.seed.to_string()),
            ("noise", spec.noise.to_string()),
            ("audio_len", spec.audio_len.to_string()),
            ("frames", spec.frames.to_string()),
        ];
        Ok(Self { meta: meta.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(), records })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `(train, val)` sample counts.
    pub fn split_totals(&self) -> (usize, usize) {
        let train = self.records.iter().filter(|r| r.split == Split::Train).count();
        (train, self.records.len() - train)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            writeln!(s, "# {k} {v}").unwrap();
        }
        for r in &self.records {
            writeln!(s, "{}\t{}\t{}", r.path, r.class, r.split.as_str()).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let bad = |what: &str| CliError::Data(format!("manifest line {}: {what}", n + 1));
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some((k, v)) = rest.split_once(' ') {
                    m.meta.push((k.to_owned(), v.trim().to_owned()));
                } else if !rest.is_empty() {
                    m.meta.push((rest.to_owned(), String::new()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, class, split] = fields[..] else {
                return Err(bad("expected three tab-separated fields"));
            };
            if path.is_empty() || Path::new(path).is_absolute() {
                return Err(bad("sample path must be relative"));
            }
            let class = class.parse().map_err(|_| bad("class index is not a non-negative integer"))?;
            let split = Split::parse(split).map_err(|e| bad(&e.to_string()))?;
            m.records.push(Record { path: path.to_owned(), class, split });
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::data_io(&path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::output_io(&path, e))
    }
}

pub fn sample_path(class: usize, index: usize) -> String {
    format!("samples/c{class}_{index:05}.avt")
}

pub fn write_sample(path: &Path, s: &Sample<f32>) -> CliResult<()> {
    let io = |e| CliError::output_io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    avt1::write(&mut w, &s.audio).map_err(io)?;
    avt1::write(&mut w, &s.video).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_sample(path: &Path, label: usize) -> CliResult<Sample<f32>> {
    let io = |e| CliError::data_io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let audio: Tensor<f32> = avt1::read(&mut r).map_err(io)?;
    let video = avt1::read(&mut r).map_err(io)?;
    Ok(Sample { audio, video, label })
}

/// Writes the manifest and, unless `manifest_only`, every sample file.
pub fn generate_dataset(dir: &Path, spec: &SyntheticSpec, manifest_only: bool) -> CliResult<Manifest> {
    let manifest = Manifest::synthetic(spec)?;
    let samples_dir = dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| CliError::output_io(&samples_dir, e))?;
    if !manifest_only {
        for (i, r) in manifest.records.iter().enumerate() {
            let s = generate_sample::<f32>(spec, r.class, i % spec.per_class)?;
            write_sample(&dir.join(&r.path), &s)?;
        }
    }
    manifest.write(dir)?;
    Ok(manifest)
}

/// Samples of a dataset directory in manifest order, with their split tags.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub samples: Vec<Sample<f32>>,
    pub splits: Vec<Split>,
}

impl Dataset {
    /// Loads every sample and checks it against the model's classes and
    /// extents; a mismatch there is a digest error.
    pub fn load(dir: &Path, cfg: &ModelConfig) -> CliResult<Self> {
        let manifest = Manifest::read(dir)?;
        if manifest.records.is_empty() {
            return Err(CliError::Data(format!("{}: manifest lists no samples", dir.display())));
        }
        let audio = [1, cfg.audio_len];
        let video = [1, cfg.frames, cfg.frame_size, cfg.frame_size];
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let path = dir.join(&r.path);
            if r.class >= cfg.classes {
                return Err(CliError::Digest(format!("{}: class {} but the model has {} classes", path.display(), r.class, cfg.classes)));
            }
            let s = read_sample(&path, r.class)?;
            if s.audio.shape() != audio || s.video.shape() != video {
                return Err(CliError::Digest(format!(
                    "{}: sample extents audio {:?} video {:?}, the model expects {audio:?} and {video:?}",
                    path.display(),
                    s.audio.shape(),
                    s.video.shape()
                )));
            }
            samples.push(s);
        }
        let splits = manifest.records.iter().map(|r| r.split).collect();
        Ok(Self { dir: dir.to_owned(), samples, splits })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }
}
