//! Dataset manifests, the train/val/test split, and client sharding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::PartitionError;
use crate::metrics::GroundTruthBox;
use crate::rng::Prng;

pub const MIN_SPLIT_RECORDS: usize = 10;

const IMAGE_EXTENSIONS: &[&str] = &["ppm", "pgm", "png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub image_path: String,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), PartitionError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(PartitionError::DuplicateId(r.id.clone()));
            }
            for b in &r.boxes {
                if b.class_id >= self.class_names.len() {
                    return Err(PartitionError::InvalidBox {
                        id: r.id.clone(),
                        reason: format!("class {} >= {} classes", b.class_id, self.class_names.len()),
                    });
                }
                b.validate().map_err(|reason| PartitionError::InvalidBox {
                    id: r.id.clone(),
                    reason,
                })?;
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    pub fn index(&self) -> HashMap<&str, &Record> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> Result<Self, PartitionError> {
        let m: Self = serde_json::from_str(s).map_err(|e| PartitionError::Parse {
            file: PathBuf::from("<manifest>"),
            line: e.line(),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(PartitionError::InvalidSplit(format!("fractions {fracs:?} must lie in (0,1)")));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PartitionError::InvalidSplit(format!("fractions {fracs:?} must sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn floor_count(n: usize, frac: f64) -> usize {
    // Tolerate representation error such as 0.1 * 30 = 3.0000000000000004.
    (n as f64 * frac + 1e-9).floor() as usize
}

/// Seeded shuffle, then floor-sized val and test lists; the remainder goes
/// to train.
pub fn split_dataset(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Split, PartitionError> {
    spec.validate()?;
    let n = manifest.records.len();
    if n < MIN_SPLIT_RECORDS {
        return Err(PartitionError::TooFewRecords {
            needed: MIN_SPLIT_RECORDS,
            actual: n,
        });
    }
    let mut ids = manifest.ids();
    Prng::new(spec.seed).shuffle(&mut ids);
    let n_val = floor_count(n, spec.val_frac);
    let n_test = floor_count(n, spec.test_frac);
    let n_train = n - n_val - n_test;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(Split { train: ids, val, test })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub record_ids: Vec<String>,
}

/// Balanced shard sizes: `len / n` each, with the remainder handed out one
/// record at a time starting from client 0.
pub fn shard_sizes(len: usize, n_clients: usize) -> Vec<usize> {
    let (base, rem) = (len / n_clients, len % n_clients);
    (0..n_clients).map(|k| base + usize::from(k < rem)).collect()
}

/// Random sampling without replacement: shuffle the positions, cut the
/// shuffled list into contiguous blocks of [`shard_sizes`]. Within a shard,
/// records keep their order from `train_ids`, so a single client sees
/// exactly the centralized ordering.
pub fn shard_training_set(train_ids: &[String], n_clients: usize, seed: u64) -> Result<Vec<ClientShard>, PartitionError> {
    if n_clients == 0 || n_clients > train_ids.len() {
        return Err(PartitionError::TooManyClients {
            clients: n_clients,
            records: train_ids.len(),
        });
    }
    let order = Prng::new(seed).permutation(train_ids.len());
    let mut start = 0;
    Ok(shard_sizes(train_ids.len(), n_clients)
        .into_iter()
        .enumerate()
        .map(|(client_id, size)| {
            let mut positions = order[start..start + size].to_vec();
            start += size;
            positions.sort_unstable();
            ClientShard {
                client_id,
                record_ids: positions.into_iter().map(|p| train_ids[p].clone()).collect(),
            }
        })
        .collect())
}

/// Number of images in `ids` holding at least one box of each class.
pub fn class_histogram<'a>(
    manifest: &DatasetManifest,
    ids: impl IntoIterator<Item = &'a String>,
) -> Result<Vec<usize>, PartitionError> {
    let index = manifest.index();
    let mut counts = vec![0; manifest.class_names.len()];
    for id in ids {
        let rec = index.get(id.as_str()).ok_or_else(|| PartitionError::UnknownId(id.clone()))?;
        let mut present = vec![false; counts.len()];
        for b in &rec.boxes {
            present[b.class_id] = true;
        }
        for (c, p) in counts.iter_mut().zip(present) {
            *c += usize::from(p);
        }
    }
    Ok(counts)
}

pub fn shard_class_histogram(manifest: &DatasetManifest, shard: &ClientShard) -> Result<Vec<usize>, PartitionError> {
    class_histogram(manifest, &shard.record_ids)
}

/// Markdown table of training images per class: a `Centralized` row over
/// the whole training subset, then one row per client.
pub fn distribution_table(
    manifest: &DatasetManifest,
    train_ids: &[String],
    shards: &[ClientShard],
) -> Result<String, PartitionError> {
    let mut s = String::from("| Dataset | Training images |");
    for name in &manifest.class_names {
        write!(s, " {name} |").unwrap();
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(manifest.class_names.len()));
    s.push('\n');
    let mut row = |label: String, n: usize, counts: Vec<usize>| {
        write!(s, "| {label} | {n} |").unwrap();
        for c in counts {
            write!(s, " {c} |").unwrap();
        }
        s.push('\n');
    };
    row("Centralized".into(), train_ids.len(), class_histogram(manifest, train_ids)?);
    for shard in shards {
        row(
            format!("Client{}", shard.client_id + 1),
            shard.record_ids.len(),
            shard_class_histogram(manifest, shard)?,
        );
    }
    Ok(s)
}

/// Shard assignment as persisted: client id → record ids.
pub fn shards_to_json(shards: &[ClientShard]) -> serde_json::Result<String> {
    let map: BTreeMap<usize, &Vec<String>> = shards.iter().map(|s| (s.client_id, &s.record_ids)).collect();
    serde_json::to_string_pretty(&map)
}

pub fn shards_from_json(s: &str) -> serde_json::Result<Vec<ClientShard>> {
    let map: BTreeMap<usize, Vec<String>> = serde_json::from_str(s)?;
    Ok(map
        .into_iter()
        .map(|(client_id, record_ids)| ClientShard { client_id, record_ids })
        .collect())
}

/// Parse one YOLO label file body. Blank lines are ignored.
pub fn parse_yolo_labels(text: &str, file: &Path, classes: usize) -> Result<Vec<GroundTruthBox>, PartitionError> {
    let err = |line: usize, reason: String| PartitionError::Parse {
        file: file.to_path_buf(),
        line,
        reason,
    };
    let mut boxes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(line, format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(line, format!("bad class id `{}`", fields[0])))?;
        if class_id >= classes {
            return Err(err(line, format!("class id {class_id} >= {classes} classes")));
        }
        let mut v = [0f32; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(line, format!("bad number `{f}`")))?;
        }
        boxes.push(GroundTruthBox::new(class_id, v[0], v[1], v[2], v[3]).map_err(|r| err(line, r))?);
    }
    Ok(boxes)
}

/// Read a YOLO layout: every image in `images_dir` needs `<stem>.txt` in
/// `labels_dir`. Records are ordered by file name; ids are file stems.
pub fn ingest_yolo_dir(images_dir: &Path, labels_dir: &Path, class_names: &[String]) -> Result<DatasetManifest, PartitionError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PartitionError::Io { path, source }
    };
    let mut images: Vec<PathBuf> = fs::read_dir(images_dir)
        .map_err(io(images_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    images.sort();

    let mut records = Vec::with_capacity(images.len());
    for image in images {
        let stem = image
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| PartitionError::Parse {
                file: image.clone(),
                line: 0,
                reason: "non-UTF-8 file name".into(),
            })?
            .to_string();
        let label = labels_dir.join(format!("{stem}.txt"));
        if !label.is_file() {
            return Err(PartitionError::MissingLabel(label));
        }
        let text = fs::read_to_string(&label).map_err(io(&label))?;
        let boxes = parse_yolo_labels(&text, &label, class_names.len())?;
        records.push(Record {
            id: stem,
            image_path: image.to_string_lossy().into_owned(),
            boxes,
        });
    }
    let manifest = DatasetManifest {
        records,
        class_names: class_names.to_vec(),
    };
    manifest.validate()?;
    Ok(manifest)
}
