//! Documents with their images, and the JSONL corpus layout: one
//! `{split}.jsonl` file per split with PGM images under `images/`.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::image::ImageGrid;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// One document with its images, their captions and the gold summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalExample {
    pub doc_id: String,
    pub paragraphs: Vec<String>,
    pub images: Vec<ImageGrid>,
    pub captions: Vec<String>,
    pub summary: String,
    /// Image paths relative to the corpus directory, when loaded from disk.
    pub image_paths: Vec<String>,
}

impl MultiModalExample {
    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(contract_err!("document {} has no images", self.doc_id));
        }
        if self.images.len() != self.captions.len() {
            return Err(contract_err!(
                "document {} has {} images but {} captions",
                self.doc_id,
                self.images.len(),
                self.captions.len()
            ));
        }
        if self.summary.trim().is_empty() {
            return Err(contract_err!("document {} has an empty summary", self.doc_id));
        }
        Ok(())
    }
}

/// The on-disk form of a document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub doc_id: String,
    pub paragraphs: Vec<String>,
    pub image_paths: Vec<String>,
    pub captions: Vec<String>,
    pub summary: String,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        if self.doc_id.is_empty() {
            return Err(Error::Parse("empty doc_id".into()));
        }
        if self.image_paths.is_empty() {
            return Err(Error::Parse(format!("document {} lists no images", self.doc_id)));
        }
        if self.image_paths.len() != self.captions.len() {
            return Err(Error::Parse(format!(
                "document {}: {} image paths but {} captions",
                self.doc_id,
                self.image_paths.len(),
                self.captions.len()
            )));
        }
        if self.summary.trim().is_empty() {
            return Err(Error::Parse(format!("document {} has an empty summary", self.doc_id)));
        }
        for p in &self.image_paths {
            let path = Path::new(p);
            if path.is_absolute() || path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(Error::Parse(format!(
                    "image path {p:?} must stay inside the corpus directory"
                )));
            }
        }
        Ok(())
    }

    /// Parses and validates one JSONL line.
    pub fn from_json_line(line: &str, line_no: usize) -> Result<Self> {
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| Error::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        Ok(rec)
    }

    pub fn load(self, root: &Path) -> Result<MultiModalExample> {
        let images = self
            .image_paths
            .iter()
            .map(|p| ImageGrid::read_pgm(&root.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let ex = MultiModalExample {
            doc_id: self.doc_id,
            paragraphs: self.paragraphs,
            images,
            captions: self.captions,
            summary: self.summary,
            image_paths: self.image_paths,
        };
        ex.validate()?;
        Ok(ex)
    }
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Writes one split, storing each image as `images/{doc_id}_{i}.pgm`.
pub fn write_jsonl(examples: &[MultiModalExample], dir: &Path, split: &str) -> Result<()> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(format!("creating {}", image_dir.display()), e))?;
    let mut out = Vec::new();
    for ex in examples {
        ex.validate()?;
        let mut image_paths = Vec::with_capacity(ex.images.len());
        for (i, img) in ex.images.iter().enumerate() {
            let rel = format!("images/{}_{i}.pgm", ex.doc_id);
            img.write_pgm(&dir.join(&rel))?;
            image_paths.push(rel);
        }
        let rec = DatasetRecord {
            doc_id: ex.doc_id.clone(),
            paragraphs: ex.paragraphs.clone(),
            image_paths,
            captions: ex.captions.clone(),
            summary: ex.summary.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Parse(e.to_string()))?;
        out.push(b'\n');
    }
    let path = split_path(dir, split);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses records from JSONL text, failing on the first bad line.
pub fn parse_jsonl(text: &str) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = DatasetRecord::from_json_line(line, n + 1)?;
        if !seen.insert(rec.doc_id.clone()) {
            return Err(Error::Record {
                line: n + 1,
                message: format!("duplicate doc_id {}", rec.doc_id),
            });
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn read_jsonl(dir: &Path, split: &str) -> Result<Vec<MultiModalExample>> {
    let path = split_path(dir, split);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_jsonl(&text)?.into_iter().map(|r| r.load(dir)).collect()
}
