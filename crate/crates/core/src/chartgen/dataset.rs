use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::qa::{generate_qa, QaRecord};
use super::render::{render_chart, RasterImage};
use super::spec::{sample_chart_spec, ChartSpec, GeneratorConfig};
use crate::error::{Error, Result};
use crate::negcap::{synthesize_negatives, CaptionRecord, NegativeSynthesisConfig};
use crate::numerics::hex_digest;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPECS_FILE: &str = "specs.jsonl";
pub const QA_FILE: &str = "qa.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    /// Chart seeds for a split occupy a disjoint 31-bit window under the
    /// root seed.
    pub fn chart_seed(self, root: u64, index: usize) -> u64 {
        assert!(index < 1 << 31, "chart index {index} out of range");
        let bit = match self {
            Split::Train => 0,
            Split::Eval => 1u64 << 31,
        };
        (root << 32) | bit | index as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub chart_id: String,
    pub image: String,
    pub spec_file: String,
    pub qa_ids: Vec<String>,
    pub caption_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub generator_config_digest: String,
    pub negatives_config_digest: Option<String>,
    pub generator: GeneratorConfig,
    pub negatives: Option<NegativeSynthesisConfig>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Digest over both configs; equal digests mean equal dataset bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.split.as_str());
        h.update(&self.generator_config_digest);
        h.update(self.negatives_config_digest.as_deref().unwrap_or("-"));
        hex_digest(h)
    }
}

/// One chart with its raster and records.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartEntry {
    pub spec: ChartSpec,
    pub image: RasterImage,
    pub qas: Vec<QaRecord>,
    pub captions: Vec<CaptionRecord>,
}

impl ChartEntry {
    pub fn positives(&self) -> impl Iterator<Item = &CaptionRecord> {
        self.captions.iter().filter(|c| c.polarity == crate::negcap::Polarity::Positive)
    }

    pub fn negatives_for<'a>(&'a self, qa_id: &'a str) -> impl Iterator<Item = &'a CaptionRecord> + 'a {
        self.captions
            .iter()
            .filter(move |c| c.source_qa_id == qa_id && c.polarity == crate::negcap::Polarity::HardNegative)
    }
}

/// In-memory dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub generator: GeneratorConfig,
    pub negatives: Option<NegativeSynthesisConfig>,
    pub entries: Vec<ChartEntry>,
}

pub fn config_digest(config: &GeneratorConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    hex_digest(h)
}

impl Dataset {
    /// Generate specs, rasters, QA records and positive captions.
    pub fn generate(config: &GeneratorConfig, split: Split) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::with_capacity(config.charts);
        for i in 0..config.charts {
            let seed = split.chart_seed(config.seed, i);
            let spec = sample_chart_spec(seed, config)?;
            let image = render_chart(&spec, config.resolution)?;
            let qas = generate_qa(&spec, seed, &config.qa_kinds)?;
            let captions = qas.iter().map(CaptionRecord::positive).collect();
            entries.push(ChartEntry { spec, image, qas, captions });
        }
        Ok(Self { split, generator: config.clone(), negatives: None, entries })
    }

    /// Replace any existing hard negatives with freshly synthesized ones.
    /// QAs for which `K` distinct negatives cannot be built are dropped
    /// together with their positive caption.
    pub fn synthesize_negatives(&mut self, config: &NegativeSynthesisConfig) -> Result<usize> {
        config.validate()?;
        let mut dropped = 0;
        for e in &mut self.entries {
            let mut kept_qas = Vec::with_capacity(e.qas.len());
            let mut captions = Vec::new();
            for qa in &e.qas {
                match synthesize_negatives(qa, &e.spec, config) {
                    Ok(negs) => {
                        captions.push(CaptionRecord::positive(qa));
                        captions.extend(negs);
                        kept_qas.push(qa.clone());
                    }
                    Err(Error::Exhausted { .. }) | Err(Error::Strategy(_)) => dropped += 1,
                    Err(e) => return Err(e),
                }
            }
            e.qas = kept_qas;
            e.captions = captions;
        }
        self.negatives = Some(config.clone());
        Ok(dropped)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            split: self.split,
            generator_config_digest: config_digest(&self.generator),
            negatives_config_digest: self.negatives.as_ref().map(NegativeSynthesisConfig::digest),
            generator: self.generator.clone(),
            negatives: self.negatives.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    chart_id: e.spec.chart_id.clone(),
                    image: format!("{IMAGES_DIR}/{}.png", e.spec.chart_id),
                    spec_file: SPECS_FILE.into(),
                    qa_ids: e.qas.iter().map(|q| q.qa_id.clone()).collect(),
                    caption_ids: e.captions.iter().map(|c| c.caption_id.clone()).collect(),
                })
                .collect(),
        }
    }

    /// Write PNGs, line-delimited records and the manifest under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let images = dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let manifest = self.manifest();
        for (e, m) in self.entries.iter().zip(&manifest.entries) {
            e.image.write_png(&dir.join(&m.image))?;
        }
        write_jsonl(&dir.join(SPECS_FILE), self.entries.iter().map(|e| &e.spec))?;
        write_jsonl(&dir.join(QA_FILE), self.entries.iter().flat_map(|e| &e.qas))?;
        write_jsonl(&dir.join(CAPTIONS_FILE), self.entries.iter().flat_map(|e| &e.captions))?;
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
        if config_digest(&manifest.generator) != manifest.generator_config_digest {
            return Err(Error::Contract(format!("{}: generator digest does not match its config", dir.display())));
        }
        let specs: Vec<ChartSpec> = read_jsonl(&dir.join(SPECS_FILE))?;
        let qas: Vec<QaRecord> = read_jsonl(&dir.join(QA_FILE))?;
        let captions: Vec<CaptionRecord> = read_jsonl(&dir.join(CAPTIONS_FILE))?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        let (mut qi, mut ci) = (0, 0);
        for (m, spec) in manifest.entries.iter().zip(specs) {
            if spec.chart_id != m.chart_id {
                return Err(Error::Contract(format!("spec order mismatch at {}", m.chart_id)));
            }
            let image = RasterImage::read_png(&dir.join(&m.image))?;
            let e_qas = qas[qi..qi + m.qa_ids.len()].to_vec();
            let e_caps = captions[ci..ci + m.caption_ids.len()].to_vec();
            qi += m.qa_ids.len();
            ci += m.caption_ids.len();
            if e_qas.iter().map(|q| &q.qa_id).ne(m.qa_ids.iter())
                || e_caps.iter().map(|c| &c.caption_id).ne(m.caption_ids.iter())
            {
                return Err(Error::Contract(format!("record order mismatch at {}", m.chart_id)));
            }
            entries.push(ChartEntry { spec, image, qas: e_qas, captions: e_caps });
        }
        if entries.len() != manifest.entries.len() {
            return Err(Error::Contract(format!("{}: fewer specs than manifest entries", dir.display())));
        }
        Ok(Self { split: manifest.split, generator: manifest.generator, negatives: manifest.negatives, entries })
    }

    /// First `n` charts.
    pub fn prefix(&self, n: usize) -> Dataset {
        Dataset {
            split: self.split,
            generator: self.generator.clone(),
            negatives: self.negatives.clone(),
            entries: self.entries[..n.min(self.entries.len())].to_vec(),
        }
    }
}

/// Generate a split and write it to `out_dir`.
pub fn build_dataset(config: &GeneratorConfig, split: Split, out_dir: &Path) -> Result<DatasetManifest> {
    Dataset::generate(config, split)?.write(out_dir)
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::Json { path: path.into(), source: e })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Json { path: path.into(), source: e })?);
    }
    Ok(out)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Json { path: path.into(), source: e })
}
