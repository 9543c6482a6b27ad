//! Dataset ingestion and partitioning.
//!
//! Loaders for MNIST IDX files (big-endian, magic 2051/2049) and the UCI
//! household power consumption text export (semicolon-separated, `?` for
//! missing values), plus deterministic synthetic generators for desk-scale
//! tests. Partitioning follows the label-sorted shard construction: sort by
//! label, cut into `clients * shards_per_client` contiguous shards, deal
//! each client `shards_per_client` shards without replacement.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

const IDX_IMAGE_MAGIC: u32 = 2051;
const IDX_LABEL_MAGIC: u32 = 2049;

/// Assignment of sample indices to clients. Indices are disjoint across
/// clients, cover the training split, and every client is nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignment.len()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.assignment[id]
    }

    pub fn total_samples(&self) -> usize {
        self.assignment.iter().map(Vec::len).sum()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?
        .read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("truncated at byte {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Load an MNIST-style IDX image/label file pair. Pixels are scaled to
/// [0, 1]; headers are validated and errors carry the failing byte offset.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let img_bytes = read_file(images_path)?;
    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            detail: format!("bad magic {magic} at byte 0, expected {IDX_IMAGE_MAGIC}"),
        });
    }
    let count = be_u32(&img_bytes, 4, images_path)? as usize;
    let rows = be_u32(&img_bytes, 8, images_path)? as usize;
    let cols = be_u32(&img_bytes, 12, images_path)? as usize;
    let pixels = count * rows * cols;
    if img_bytes.len() != 16 + pixels {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            detail: format!(
                "expected {} pixel bytes after byte 16, found {}",
                pixels,
                img_bytes.len().saturating_sub(16)
            ),
        });
    }

    let lbl_bytes = read_file(labels_path)?;
    let magic = be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            detail: format!("bad magic {magic} at byte 0, expected {IDX_LABEL_MAGIC}"),
        });
    }
    let lbl_count = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if lbl_bytes.len() != 8 + lbl_count {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            detail: format!(
                "expected {} label bytes after byte 8, found {}",
                lbl_count,
                lbl_bytes.len().saturating_sub(8)
            ),
        });
    }
    if lbl_count != count {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            detail: format!("{lbl_count} labels for {count} images"),
        });
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Matrix::from_vec(count, rows * cols, data)?;
    let labels = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    Ok((inputs, labels))
}

/// A loaded regression table: z-scored features, raw target column, and the
/// number of rows dropped for missing values.
#[derive(Debug, Clone)]
pub struct PowerData {
    pub features: Matrix,
    pub target: Vec<f64>,
    pub dropped_rows: usize,
}

/// Column names that are never numeric features in the power export.
const NON_NUMERIC_COLUMNS: [&str; 2] = ["Date", "Time"];

/// Load the household power consumption export: semicolon-separated with a
/// header row and `?` for missing fields. Rows with any missing field are
/// dropped (and counted); features are z-scored; the target column defaults
/// to `Global_active_power`.
pub fn load_power_csv(path: &Path, target_column: Option<&str>) -> Result<PowerData> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let target_name = target_column.unwrap_or("Global_active_power");
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Format {
        path: path.display().to_string(),
        detail: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(';').map(str::trim).collect();
    let target_idx = columns
        .iter()
        .position(|&c| c == target_name)
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: format!("target column {target_name} not in header"),
        })?;
    let feature_idx: Vec<usize> = columns
        .iter()
        .enumerate()
        .filter(|&(i, c)| i != target_idx && !NON_NUMERIC_COLUMNS.contains(c))
        .map(|(i, _)| i)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: "no numeric feature columns".into(),
        });
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut dropped = 0usize;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(';').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "line {}: {} fields, header has {}",
                    line_no + 1,
                    fields.len(),
                    columns.len()
                ),
            });
        }
        let mut missing = false;
        let parse = |idx: usize| -> Result<Option<f64>> {
            let field = fields[idx];
            if field == "?" {
                return Ok(None);
            }
            field.parse::<f64>().map(Some).map_err(|_| Error::Format {
                path: path.display().to_string(),
                detail: format!(
                    "line {}: unparseable numeric field {:?} in column {}",
                    line_no + 1,
                    field,
                    columns[idx]
                ),
            })
        };
        let mut feature_row = Vec::with_capacity(feature_idx.len());
        for &idx in &feature_idx {
            match parse(idx)? {
                Some(v) => feature_row.push(v),
                None => missing = true,
            }
        }
        let target = parse(target_idx)?;
        if missing || target.is_none() {
            dropped += 1;
            continue;
        }
        rows.push(feature_row);
        targets.push(target.unwrap());
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            detail: format!("no usable rows ({dropped} dropped)"),
        });
    }

    let mut features = Matrix::from_rows(&rows)?;
    z_score_columns(&mut features);
    Ok(PowerData {
        features,
        target: targets,
        dropped_rows: dropped,
    })
}

/// In-place z-scoring of every column; constant columns are centered only.
fn z_score_columns(m: &mut Matrix) {
    let n = m.rows() as f64;
    for c in 0..m.cols() {
        let mean = (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / n;
        let var = (0..m.rows())
            .map(|r| {
                let d = m.get(r, c) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        for r in 0..m.rows() {
            let v = m.get(r, c);
            m.set(r, c, if sd > 0.0 { (v - mean) / sd } else { v - mean });
        }
    }
}

/// Shuffled train/test index split: `test_fraction` of the indices go to
/// the test side, the rest to train, deterministic per rng stream.
pub fn split_indices(
    n: usize,
    test_fraction: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} leaves an empty train or test split of {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let test = order[..n_test].to_vec();
    let train = order[n_test..].to_vec();
    Ok((train, test))
}

/// Label-sorted shard partition: deterministic per rng stream; each client
/// receives `shards_per_client` contiguous label-sorted shards.
pub fn partition_noniid(
    n_samples: usize,
    labels: &[usize],
    total_clients: usize,
    shards_per_client: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Partition> {
    if labels.len() != n_samples {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            n_samples
        )));
    }
    if total_clients == 0 || shards_per_client == 0 {
        return Err(Error::Config("clients and shards_per_client must be positive".into()));
    }
    if total_clients > n_samples {
        return Err(Error::Config(format!(
            "cannot split {n_samples} samples across {total_clients} clients"
        )));
    }
    let num_shards = total_clients * shards_per_client;
    if num_shards > n_samples {
        return Err(Error::Config(format!(
            "{num_shards} shards requested from {n_samples} samples"
        )));
    }

    // Sort by (label, index): stable and deterministic.
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.sort_by_key(|&i| (labels[i], i));

    // Contiguous shards; the remainder pads the last shard.
    let shard_size = n_samples / num_shards;
    let mut shards: Vec<&[usize]> = Vec::with_capacity(num_shards);
    for s in 0..num_shards {
        let start = s * shard_size;
        let end = if s == num_shards - 1 {
            n_samples
        } else {
            (s + 1) * shard_size
        };
        shards.push(&order[start..end]);
    }

    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(rng);

    let mut assignment = vec![Vec::new(); total_clients];
    for (slot, &shard) in shard_ids.iter().enumerate() {
        assignment[slot % total_clients].extend_from_slice(shards[shard]);
    }
    for ids in &mut assignment {
        ids.sort_unstable();
    }
    Ok(Partition { assignment })
}

/// Uniform random partition (round-robin deal of a shuffled index list).
pub fn partition_iid(
    n_samples: usize,
    total_clients: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Partition> {
    if total_clients == 0 {
        return Err(Error::Config("clients must be positive".into()));
    }
    if total_clients > n_samples {
        return Err(Error::Config(format!(
            "cannot split {n_samples} samples across {total_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(rng);
    let mut assignment = vec![Vec::new(); total_clients];
    for (slot, idx) in order.into_iter().enumerate() {
        assignment[slot % total_clients].push(idx);
    }
    for ids in &mut assignment {
        ids.sort_unstable();
    }
    Ok(Partition { assignment })
}

/// Label-skew statistic: mean over clients of the majority-label fraction.
/// 1.0 means single-label clients; 1/num_classes means perfectly mixed.
pub fn label_skew(partition: &Partition, labels: &[usize]) -> f64 {
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let mut total = 0.0;
    for client in &partition.assignment {
        let mut counts = vec![0usize; num_classes];
        for &idx in client {
            counts[labels[idx]] += 1;
        }
        let majority = counts.into_iter().max().unwrap_or(0);
        total += majority as f64 / client.len() as f64;
    }
    total / partition.assignment.len() as f64
}

/// Gaussian blobs with guaranteed class-center separation of at least
/// `margin` times the unit spread. Labels cycle round-robin, so classes are
/// balanced up to one sample.
pub fn synth_classification(
    n: usize,
    dim: usize,
    classes: usize,
    margin: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Matrix, Vec<usize>)> {
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be > 0, got {margin}")));
    }
    if classes == 0 || dim == 0 || n == 0 {
        return Err(Error::Config("n, dim and classes must be positive".into()));
    }
    // Centers on coordinate axes at multiples of the margin: any two centers
    // are at least `margin` apart (unit spread).
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut center = vec![0.0; dim];
            let axis = c % dim;
            let level = (c / dim + 1) as f64;
            center[axis] = margin * level;
            center
        })
        .collect();

    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dim {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            data.push(centers[class][d] + z);
        }
        labels.push(class);
    }
    Ok((Matrix::from_vec(n, dim, data)?, labels))
}

/// Linear regression data: standard normal features, a fixed random linear
/// map, and additive Gaussian target noise.
pub fn synth_regression(
    n: usize,
    dim: usize,
    noise_std: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Matrix, Vec<f64>)> {
    if !(noise_std >= 0.0) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {noise_std}")));
    }
    if dim == 0 || n == 0 {
        return Err(Error::Config("n and dim must be positive".into()));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let weights: Vec<f64> = (0..dim)
        .map(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y = 0.0;
        for w in &weights {
            let x: f64 = rand_distr::StandardNormal.sample(rng);
            data.push(x);
            y += w * x;
        }
        if noise_std > 0.0 {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            y += noise_std * z;
        }
        targets.push(y);
    }
    Ok((Matrix::from_vec(n, dim, data)?, targets))
}

/// Write a dataset as CSV for external inspection: feature columns
/// `x0..x{d-1}` then a `target` column.
pub fn write_dataset_csv(
    inputs: &Matrix,
    targets: &crate::nn::Targets,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    for c in 0..inputs.cols() {
        let _ = write!(out, "x{c},");
    }
    out.push_str("target\n");
    for r in 0..inputs.rows() {
        for v in inputs.row(r) {
            let _ = write!(out, "{v},");
        }
        match targets {
            crate::nn::Targets::Labels(l) => {
                let _ = write!(out, "{}", l[r]);
            }
            crate::nn::Targets::Values(m) => {
                let _ = write!(out, "{}", m.get(r, 0));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamPurpose};
    use rand::Rng;
    use std::io::Write;

    fn write_idx_fixture(dir: &Path, pixels: &[[u8; 4]], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        // 2x2 images, hand-assembled big-endian headers.
        let img_path = dir.join("images-idx3-ubyte");
        let lbl_path = dir.join("labels-idx1-ubyte");
        let mut img = Vec::new();
        img.extend_from_slice(&2051u32.to_be_bytes());
        img.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for p in pixels {
            img.extend_from_slice(p);
        }
        std::fs::File::create(&img_path).unwrap().write_all(&img).unwrap();
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&2049u32.to_be_bytes());
        lbl.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lbl.extend_from_slice(labels);
        std::fs::File::create(&lbl_path).unwrap().write_all(&lbl).unwrap();
        (img_path, lbl_path)
    }

    #[test]
    fn idx_fixture_round_trips_exact_pixels() {
        let dir = std::env::temp_dir().join(format!("dpfl-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (img, lbl) = write_idx_fixture(&dir, &[[0, 128, 255, 64], [1, 2, 3, 4]], &[7, 2]);
        let (inputs, labels) = load_mnist(&img, &lbl).unwrap();
        assert_eq!(inputs.rows(), 2);
        assert_eq!(inputs.cols(), 4);
        assert_eq!(labels, vec![7, 2]);
        assert_eq!(inputs.get(0, 0), 0.0);
        assert_eq!(inputs.get(0, 1), 128.0 / 255.0);
        assert_eq!(inputs.get(0, 2), 1.0);
        assert_eq!(inputs.get(1, 3), 4.0 / 255.0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_idx_file_is_format_error() {
        let dir = std::env::temp_dir().join(format!("dpfl-idx-empty-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = dir.join("empty");
        std::fs::write(&img, b"").unwrap();
        let err = load_mnist(&img, &img).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_format_error_with_offset() {
        let dir = std::env::temp_dir().join(format!("dpfl-idx-magic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let img = dir.join("bad");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&999u32.to_be_bytes());
        bytes.extend_from_slice(&[0; 12]);
        std::fs::write(&img, &bytes).unwrap();
        let err = load_mnist(&img, &img).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad magic 999"), "{msg}");
        assert!(msg.contains("byte 0"), "{msg}");
        std::fs::remove_dir_all(&dir).ok();
    }

    fn write_power_fixture(name: &str, body: &str) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("dpfl-power-{}-{name}.txt", std::process::id()));
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn power_fixture_drops_missing_rows() {
        let path = write_power_fixture(
            "drop",
            "Date;Time;Global_active_power;Voltage\n\
             16/12/2006;17:24:00;4.216;234.84\n\
             16/12/2006;17:25:00;?;233.63\n\
             16/12/2006;17:26:00;5.36;233.29\n",
        );
        let data = load_power_csv(&path, None).unwrap();
        assert_eq!(data.features.rows(), 2);
        assert_eq!(data.dropped_rows, 1);
        assert_eq!(data.target, vec![4.216, 5.36]);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn all_missing_power_file_is_error() {
        let path = write_power_fixture(
            "empty",
            "Date;Time;Global_active_power;Voltage\n\
             16/12/2006;17:24:00;?;?\n",
        );
        assert!(load_power_csv(&path, None).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn unparseable_field_names_line() {
        let path = write_power_fixture(
            "badnum",
            "Date;Time;Global_active_power;Voltage\n\
             16/12/2006;17:24:00;4.2;oops\n",
        );
        let err = load_power_csv(&path, None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn z_scored_columns_have_zero_mean_unit_variance() {
        let path = write_power_fixture(
            "zscore",
            "Date;Time;Global_active_power;Voltage;Global_intensity\n\
             a;b;1.0;230.1;8.4\n\
             a;b;2.0;232.8;9.2\n\
             a;b;3.0;229.4;7.7\n\
             a;b;4.0;235.0;10.1\n",
        );
        let data = load_power_csv(&path, None).unwrap();
        for c in 0..data.features.cols() {
            let n = data.features.rows() as f64;
            let mean: f64 = (0..data.features.rows()).map(|r| data.features.get(r, c)).sum::<f64>() / n;
            let var: f64 = (0..data.features.rows())
                .map(|r| {
                    let d = data.features.get(r, c) - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            assert!(mean.abs() < 1e-9, "col {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "col {c} var {var}");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn single_client_owns_everything() {
        let labels = vec![0, 1, 0, 1, 1];
        let mut rng = stream_rng(3, StreamPurpose::Partition, &[]);
        let p = partition_noniid(5, &labels, 1, 2, &mut rng).unwrap();
        assert_eq!(p.client(0), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn two_clients_one_shard_each_see_few_labels() {
        let labels: Vec<usize> = (0..40).map(|i| i / 20).collect(); // 20 zeros then 20 ones
        let mut rng = stream_rng(4, StreamPurpose::Partition, &[]);
        let p = partition_noniid(40, &labels, 2, 1, &mut rng).unwrap();
        for client in 0..2 {
            let distinct: std::collections::BTreeSet<usize> =
                p.client(client).iter().map(|&i| labels[i]).collect();
            assert!(distinct.len() <= 2);
        }
    }

    #[test]
    fn partition_is_exact_disjoint_cover() {
        let mut rng = stream_rng(5, StreamPurpose::DataGen, &[]);
        let labels: Vec<usize> = (0..503).map(|_| rng.random_range(0..10)).collect();
        let mut prng = stream_rng(5, StreamPurpose::Partition, &[]);
        let p = partition_noniid(503, &labels, 7, 3, &mut prng).unwrap();
        let mut seen = vec![false; 503];
        for c in 0..p.num_clients() {
            assert!(!p.client(c).is_empty());
            for &idx in p.client(c) {
                assert!(!seen[idx], "index {idx} assigned twice");
                seen[idx] = true;
            }
        }
        assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn noniid_label_skew_exceeds_uniform() {
        let mut rng = stream_rng(6, StreamPurpose::DataGen, &[]);
        let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..10)).collect();
        let mut a = stream_rng(7, StreamPurpose::Partition, &[]);
        let noniid = partition_noniid(1000, &labels, 20, 2, &mut a).unwrap();
        let mut b = stream_rng(7, StreamPurpose::Partition, &[1]);
        let iid = partition_iid(1000, 20, &mut b).unwrap();
        let skew_noniid = label_skew(&noniid, &labels);
        let skew_iid = label_skew(&iid, &labels);
        assert!(
            skew_noniid > skew_iid,
            "noniid skew {skew_noniid} vs iid {skew_iid}"
        );
    }

    #[test]
    fn median_distinct_labels_stays_low_on_bundled_subset() {
        let base = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
        let images = base.join("train-images-idx3-ubyte");
        let labels_path = base.join("train-labels-idx1-ubyte");
        let (_, labels) = load_mnist(&images, &labels_path).unwrap();
        let mut rng = stream_rng(11, StreamPurpose::Partition, &[]);
        let p = partition_noniid(labels.len(), &labels, 100, 2, &mut rng).unwrap();
        let mut distinct_counts: Vec<usize> = (0..p.num_clients())
            .map(|c| {
                let set: std::collections::BTreeSet<usize> =
                    p.client(c).iter().map(|&i| labels[i]).collect();
                set.len()
            })
            .collect();
        distinct_counts.sort_unstable();
        let median = distinct_counts[distinct_counts.len() / 2];
        assert!(median <= 4, "median distinct labels {median}");
    }

    #[test]
    fn partition_rejects_more_clients_than_samples() {
        let labels = vec![0, 1, 0];
        let mut rng = stream_rng(8, StreamPurpose::Partition, &[]);
        assert!(partition_noniid(3, &labels, 10, 1, &mut rng).is_err());
    }

    #[test]
    fn single_class_generator_labels_all_same() {
        let mut rng = stream_rng(9, StreamPurpose::DataGen, &[]);
        let (_, labels) = synth_classification(50, 3, 1, 2.0, &mut rng).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn wide_margin_is_separable_by_nearest_centroid() {
        let mut rng = stream_rng(10, StreamPurpose::DataGen, &[]);
        let (inputs, labels) = synth_classification(400, 4, 3, 30.0, &mut rng).unwrap();
        // Recover centroids from the data, then classify by nearest centroid.
        let mut sums = vec![vec![0.0; 4]; 3];
        let mut counts = vec![0usize; 3];
        for (i, &l) in labels.iter().enumerate() {
            for d in 0..4 {
                sums[l][d] += inputs.get(i, d);
            }
            counts[l] += 1;
        }
        for (l, sum) in sums.iter_mut().enumerate() {
            for v in sum.iter_mut() {
                *v /= counts[l] as f64;
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in sums.iter().enumerate() {
                let d: f64 = (0..4).map(|d| (inputs.get(i, d) - center[d]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(best, l, "sample {i}");
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let gen = |seed| {
            let mut rng = stream_rng(seed, StreamPurpose::DataGen, &[]);
            synth_classification(64, 5, 4, 3.0, &mut rng).unwrap()
        };
        let (a_inputs, a_labels) = gen(21);
        let (b_inputs, b_labels) = gen(21);
        assert_eq!(a_inputs.as_slice(), b_inputs.as_slice());
        assert_eq!(a_labels, b_labels);

        let gen_reg = |seed| {
            let mut rng = stream_rng(seed, StreamPurpose::DataGen, &[]);
            synth_regression(64, 5, 0.1, &mut rng).unwrap()
        };
        assert_eq!(gen_reg(22).0.as_slice(), gen_reg(22).0.as_slice());
    }

    /// Ordinary least squares via normal equations with Gaussian elimination;
    /// the independent oracle for the regression generator.
    fn ols_residual_mse(inputs: &Matrix, targets: &[f64]) -> f64 {
        let d = inputs.cols();
        let n = inputs.rows();
        let mut ata = vec![vec![0.0; d]; d];
        let mut atb = vec![0.0; d];
        for i in 0..n {
            let row = inputs.row(i);
            for a in 0..d {
                for b in 0..d {
                    ata[a][b] += row[a] * row[b];
                }
                atb[a] += row[a] * targets[i];
            }
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..d {
            let mut pivot = col;
            for r in col + 1..d {
                if ata[r][col].abs() > ata[pivot][col].abs() {
                    pivot = r;
                }
            }
            ata.swap(col, pivot);
            atb.swap(col, pivot);
            let diag = ata[col][col];
            for r in col + 1..d {
                let f = ata[r][col] / diag;
                for c in col..d {
                    ata[r][c] -= f * ata[col][c];
                }
                atb[r] -= f * atb[col];
            }
        }
        let mut w = vec![0.0; d];
        for r in (0..d).rev() {
            let mut acc = atb[r];
            for c in r + 1..d {
                acc -= ata[r][c] * w[c];
            }
            w[r] = acc / ata[r][r];
        }
        let mut mse = 0.0;
        for i in 0..n {
            let pred: f64 = inputs.row(i).iter().zip(&w).map(|(x, wv)| x * wv).sum();
            mse += (pred - targets[i]).powi(2);
        }
        mse / n as f64
    }

    #[test]
    fn noiseless_regression_has_zero_ols_residual() {
        let mut rng = stream_rng(30, StreamPurpose::DataGen, &[]);
        let (inputs, targets) = synth_regression(500, 6, 0.0, &mut rng).unwrap();
        assert!(ols_residual_mse(&inputs, &targets) < 1e-9);
    }

    #[test]
    fn noisy_regression_ols_residual_matches_noise_variance() {
        let sigma = 0.3;
        let mut rng = stream_rng(31, StreamPurpose::DataGen, &[]);
        let (inputs, targets) = synth_regression(10_000, 6, sigma, &mut rng).unwrap();
        let mse = ols_residual_mse(&inputs, &targets);
        let expected = sigma * sigma;
        assert!(
            (mse - expected).abs() / expected < 0.10,
            "mse {mse} vs sigma^2 {expected}"
        );
    }

    #[test]
    fn dataset_csv_export_round_trips_header() {
        let dir = std::env::temp_dir().join(format!("dpfl-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("synth.csv");
        let inputs = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        write_dataset_csv(&inputs, &crate::nn::Targets::Labels(vec![0, 1]), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1,target\n"));
        assert!(text.contains("1,2,0\n"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
