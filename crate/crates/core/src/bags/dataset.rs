use std::path::Path;

use rand::seq::SliceRandom;

use super::imageio::read_image;
use super::SourceImage;
use crate::error::{Error, Result};
use crate::rng;

/// Load the images listed in a `path,label` CSV (header optional), paths
/// relative to `root`. Order follows the file.
pub fn load_dataset(root: &Path, labels_file: &Path) -> Result<Vec<SourceImage>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(labels_file)
        .map_err(|e| Error::Ingestion {
            path: labels_file.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })?;
    let ingestion = |row: usize, message: String| Error::Ingestion {
        path: labels_file.to_path_buf(),
        row,
        message,
    };

    let mut images = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| ingestion(row, e.to_string()))?;
        if record.len() != 2 {
            return Err(ingestion(row, format!("expected `path,label`, got {} fields", record.len())));
        }
        let (rel, label) = (&record[0], &record[1]);
        let label = match label {
            "0" => false,
            "1" => true,
            other if row == 1 && other.parse::<f64>().is_err() => continue, // header line
            other => return Err(ingestion(row, format!("label must be 0 or 1, got {other:?}"))),
        };
        let rgb = read_image(&root.join(rel)).map_err(|e| ingestion(row, e.to_string()))?;
        images.push(rgb.into_source(label, rel)?);
    }
    Ok(images)
}

/// Seeded shuffle, then the first `fraction` of items become the training set.
///
/// With at least two items both parts are non-empty.
pub fn split_train_val<T: Clone>(dataset: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if dataset.is_empty() {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SPLIT));
    let mut n_train = (n as f64 * fraction).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    } else {
        n_train = n;
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
