//! Labeled image sets on disk: a directory holding `meta.txt` (key=value
//! lines), `images.f32` (row-major `C×H×W` little-endian f32 per image) and
//! `labels.u32` (little-endian).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    TestShifted,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::SourceTrain => "source-train",
            Split::SourceVal => "source-val",
            Split::TestShifted => "test-shifted",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source-train" => Ok(Split::SourceTrain),
            "source-val" => Ok(Split::SourceVal),
            "test-shifted" => Ok(Split::TestShifted),
            _ => Err(Error::format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Free-form identifier, echoed into statistics and reports.
    pub id: String,
    pub split: Split,
    pub n_samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
}

impl DatasetMeta {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn to_text(&self) -> String {
        format!(
            "version={DATASET_VERSION}\nid={}\nsplit={}\nn_samples={}\nchannels={}\nheight={}\nwidth={}\nn_classes={}\nclass_names={}\n",
            self.id,
            self.split,
            self.n_samples,
            self.channels,
            self.height,
            self.width,
            self.n_classes(),
            self.class_names.join(",")
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("meta.txt line {}: expected key=value", i + 1))
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::format(format!("meta.txt lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("meta.txt: {k} is not a count")))
        };
        let version = num("version")?;
        if version != DATASET_VERSION as usize {
            return Err(Error::format(format!(
                "dataset version {version}, expected {DATASET_VERSION}"
            )));
        }
        let class_names: Vec<String> = get("class_names")?.split(',').map(str::to_string).collect();
        if num("n_classes")? != class_names.len() {
            return Err(Error::format("n_classes disagrees with class_names"));
        }
        Ok(Self {
            id: get("id")?.clone(),
            split: get("split")?.parse()?,
            n_samples: num("n_samples")?,
            channels: num("channels")?,
            height: num("height")?,
            width: num("width")?,
            class_names,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl DatasetBundle {
    /// Checks image shapes and label ranges against `meta`.
    pub fn new(meta: DatasetMeta, images: Vec<Image>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != meta.n_samples || labels.len() != meta.n_samples {
            return Err(Error::data(format!(
                "meta says {} samples, got {} images and {} labels",
                meta.n_samples,
                images.len(),
                labels.len()
            )));
        }
        if let Some(img) = images.iter().find(|i| {
            (i.channels(), i.height(), i.width()) != (meta.channels, meta.height, meta.width)
        }) {
            return Err(Error::data(format!(
                "image of shape {}x{}x{} in a {}x{}x{} dataset",
                img.channels(),
                img.height(),
                img.width(),
                meta.channels,
                meta.height,
                meta.width
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= meta.n_classes()) {
            return Err(Error::data(format!(
                "label {y} out of range for {} classes",
                meta.n_classes()
            )));
        }
        Ok(Self {
            meta,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.images.truncate(n);
        self.labels.truncate(n);
        self.meta.n_samples = n;
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.txt"), self.meta.to_text())?;
        let mut px = Vec::with_capacity(self.len() * self.meta.pixels() * 4);
        for img in &self.images {
            for &v in img.data() {
                px.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        fs::write(dir.join("images.f32"), px)?;
        let lb: Vec<u8> = self
            .labels
            .iter()
            .flat_map(|&y| (y as u32).to_le_bytes())
            .collect();
        fs::write(dir.join("labels.u32"), lb)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta = DatasetMeta::from_text(&fs::read_to_string(dir.join("meta.txt"))?)?;
        let px = fs::read(dir.join("images.f32"))?;
        let lb = fs::read(dir.join("labels.u32"))?;
        let per = meta.pixels();
        if px.len() != meta.n_samples * per * 4 {
            return Err(Error::format(format!(
                "images.f32 holds {} bytes, meta implies {}",
                px.len(),
                meta.n_samples * per * 4
            )));
        }
        if lb.len() != meta.n_samples * 4 {
            return Err(Error::format(format!(
                "labels.u32 holds {} bytes, meta implies {}",
                lb.len(),
                meta.n_samples * 4
            )));
        }
        let floats: Vec<f64> = px
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let images = if per == 0 {
            Vec::new()
        } else {
            floats
                .chunks_exact(per)
                .map(|c| Image::new(meta.channels, meta.height, meta.width, c.to_vec()))
                .collect::<Result<Vec<_>>>()?
        };
        let labels = lb
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .collect();
        Self::new(meta, images, labels)
    }
}
