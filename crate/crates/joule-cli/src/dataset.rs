//! Dataset ingestion. The seeded generators make runs self-contained;
//! two on-disk formats cover everything else.
//!
//! **Labeled CSV** (`name = "csv"`): no header row; each record is the
//! sample's feature values followed by one nonnegative integer label.
//! Values use `.` as the decimal separator. All records must have the
//! same width. The feature count is the record width minus one.
//!
//! **IDX** (`name = "idx"`): the big-endian format MNIST ships in.
//! `path` points at the image file, `labels_path` at the label file.
//! Both start with a four-byte magic — two zero bytes, the element type
//! (only `0x08`, unsigned byte, is supported), and the dimension count —
//! followed by one big-endian u32 per dimension, then the elements in
//! row-major order. Image bytes are mapped to `[-1, 1]` via
//! `v·(2/255) − 1`; the label file must be one-dimensional with the same
//! leading count as the images.

use std::path::Path;

use joule_core::data::{gaussian_blobs_2d, synth_digits, two_moons, uniform_noise};
use joule_core::{LabeledDataset, Tensor};

use crate::config::{DatasetConfig, ExperimentConfig};

/// Loads the configured dataset and cuts the train/eval split.
pub fn load_split(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset), String> {
    let full = load_full(&cfg.dataset, cfg.seed)?;
    let split_seed = cfg.dataset.split_seed.unwrap_or(cfg.seed);
    full.split(cfg.dataset.eval_n, split_seed)
        .map_err(|e| format!("dataset split: {e}"))
}

/// Loads the whole dataset a descriptor names, reshaped if asked.
pub fn load_full(ds: &DatasetConfig, seed: u64) -> Result<LabeledDataset, String> {
    let data = match ds.name.as_str() {
        "two-moons" => two_moons(ds.n, ds.noise_std, seed),
        "gaussian-mixture" => gaussian_blobs_2d(ds.n, ds.components, ds.noise_std, seed),
        "synth-digits" => synth_digits(ds.n, seed),
        "uniform" => {
            let shape = ds.input_shape.clone().unwrap_or_else(|| vec![2]);
            uniform_noise(ds.n, &shape, seed)
        }
        "csv" => return apply_shape(load_csv(ds)?, ds),
        "idx" => return apply_shape(load_idx(ds)?, ds),
        other => {
            return Err(format!(
                "dataset.name: unknown source `{other}` (expected two-moons, \
                 gaussian-mixture, synth-digits, uniform, csv, or idx)"
            ))
        }
    };
    apply_shape(data.map_err(|e| format!("dataset `{}`: {e}", ds.name))?, ds)
}

/// The same samples viewed under a different per-sample shape.
pub fn reshaped(data: &LabeledDataset, shape: &[usize]) -> Result<LabeledDataset, String> {
    let per: usize = shape.iter().product();
    if per != data.feature_count() {
        return Err(format!(
            "dataset.input_shape: {shape:?} holds {per} values but each sample has {}",
            data.feature_count()
        ));
    }
    let mut full = vec![data.len()];
    full.extend_from_slice(shape);
    let inputs = Tensor::from_vec(&full, data.inputs().data().to_vec())
        .map_err(|e| format!("dataset reshape: {e}"))?;
    LabeledDataset::new(inputs, data.labels().to_vec(), data.num_classes())
        .map_err(|e| format!("dataset reshape: {e}"))
}

/// Collapses each sample to a flat vector for a dense first layer.
pub fn flattened(data: LabeledDataset) -> Result<LabeledDataset, String> {
    if data.input_shape().len() == 1 {
        return Ok(data);
    }
    reshaped(&data, &[data.feature_count()])
}

fn apply_shape(data: LabeledDataset, ds: &DatasetConfig) -> Result<LabeledDataset, String> {
    match &ds.input_shape {
        Some(shape) if data.input_shape() != &shape[..] => reshaped(&data, shape),
        _ => Ok(data),
    }
}

fn required_path(ds: &DatasetConfig) -> Result<&Path, String> {
    ds.path
        .as_deref()
        .ok_or_else(|| format!("dataset.path: required for `{}` data", ds.name))
}

// ── labeled CSV ──────────────────────────────────────────────────────────

fn load_csv(ds: &DatasetConfig) -> Result<LabeledDataset, String> {
    let path = required_path(ds)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("cannot read dataset at {}: {e}", path.display()))?;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| format!("{}: record {}: {e}", path.display(), i + 1))?;
        let row = i + 1;
        if record.len() < 2 {
            return Err(format!(
                "{}: record {row} has {} fields; need at least one feature plus a label",
                path.display(),
                record.len()
            ));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(format!(
                    "{}: record {row} has {} fields where earlier records had {w}",
                    path.display(),
                    record.len()
                ))
            }
            Some(_) => {}
        }
        for field in record.iter().take(record.len() - 1) {
            data.push(field.parse::<f64>().map_err(|_| {
                format!("{}: record {row}: `{field}` is not a number", path.display())
            })?);
        }
        let label = &record[record.len() - 1];
        labels.push(label.parse::<usize>().map_err(|_| {
            format!(
                "{}: record {row}: label `{label}` is not a nonnegative integer",
                path.display()
            )
        })?);
    }
    if labels.is_empty() {
        return Err(format!("{}: no records", path.display()));
    }

    let d = width.expect("nonempty") - 1;
    let classes = match ds.classes {
        Some(c) => c,
        None => labels.iter().max().expect("nonempty") + 1,
    };
    let inputs = Tensor::from_vec(&[labels.len(), d], data)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    LabeledDataset::new(inputs, labels, classes).map_err(|e| format!("{}: {e}", path.display()))
}

// ── IDX ──────────────────────────────────────────────────────────────────

fn load_idx(ds: &DatasetConfig) -> Result<LabeledDataset, String> {
    let images_path = required_path(ds)?;
    let labels_path = ds
        .labels_path
        .as_deref()
        .ok_or_else(|| "dataset.labels_path: required for `idx` data".to_string())?;

    let (image_dims, image_bytes) = read_idx_u8(images_path)?;
    let (label_dims, label_bytes) = read_idx_u8(labels_path)?;
    if image_dims.is_empty() {
        return Err(format!(
            "{}: zero-dimensional image file",
            images_path.display()
        ));
    }
    let n = image_dims[0];
    if label_dims != [n] {
        return Err(format!(
            "{}: expected a one-dimensional label file with {n} entries to match {}, found dimensions {label_dims:?}",
            labels_path.display(),
            images_path.display()
        ));
    }

    let data: Vec<f64> = image_bytes
        .iter()
        .map(|&b| f64::from(b) * (2.0 / 255.0) - 1.0)
        .collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = match ds.classes {
        Some(c) => c,
        None => labels.iter().max().map_or(1, |m| m + 1),
    };
    let inputs = Tensor::from_vec(&image_dims, data)
        .map_err(|e| format!("{}: {e}", images_path.display()))?;
    LabeledDataset::new(inputs, labels, classes)
        .map_err(|e| format!("{}: {e}", images_path.display()))
}

fn read_idx_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>), String> {
    let bytes =
        std::fs::read(path).map_err(|e| format!("cannot read dataset at {}: {e}", path.display()))?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format!("{}: not an IDX file (bad magic)", path.display()));
    }
    if bytes[2] != 0x08 {
        return Err(format!(
            "{}: IDX element type 0x{:02x} unsupported (only unsigned bytes, 0x08)",
            path.display(),
            bytes[2]
        ));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format!(
            "{}: truncated IDX header ({} dimensions declared)",
            path.display(),
            ndims
        ));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let at = 4 + 4 * i;
            u32::from_be_bytes(bytes[at..at + 4].try_into().expect("fixed slice")) as usize
        })
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header != expected {
        return Err(format!(
            "{}: dimensions {dims:?} promise {expected} bytes but the file holds {}",
            path.display(),
            bytes.len() - header
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}
