//! Image I/O, context crops, synthetic data and manifests.

pub mod crop;
pub mod manifest;
pub mod ppm;
pub mod synth;

use std::path::Path;

pub use crop::{resize_bilinear, square_crop, three_scale_crops, DEFAULT_SCALES};
pub use manifest::{DatasetManifest, FaceBox, ManifestSource, Record, Split};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};
pub use synth::{synth_dataset, SynthSample, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Network inputs for one image: the scale-1 crop for one branch, or one
/// crop per scale for three.
pub fn model_inputs(
    image: &Tensor,
    center: Option<(f64, f64)>,
    branches: usize,
    scales: [f64; 3],
) -> Result<Vec<Tensor>> {
    let center = match center {
        Some(c) => c,
        None => crop::image_center(image)?,
    };
    match branches {
        1 => Ok(vec![square_crop(image, center, scales[0])?]),
        3 => Ok(three_scale_crops(image, center, scales)?.into()),
        n => Err(Error::invalid(format!("no cropping scheme for {n} branches"))),
    }
}

/// One prepared training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<Tensor>,
    pub age: f64,
}

pub fn load_samples(manifest: &DatasetManifest, branches: usize, scales: [f64; 3]) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let image = load_ppm(&r.path)?;
            Ok(Sample {
                inputs: model_inputs(&image, r.face_box.map(|b| b.center()), branches, scales)?,
                age: r.age,
            })
        })
        .collect()
}

/// Renders a synthetic dataset into `dir` as `img_NNNN.ppm` plus `manifest.csv`.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = synth_dataset(spec)?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let path = dir.join(format!("img_{i:04}.ppm"));
        save_ppm(&s.image, &path)?;
        records.push(Record {
            path,
            age: s.age,
            face_box: None,
        });
    }
    let manifest = DatasetManifest {
        records,
        source: ManifestSource::Synthetic,
    };
    let csv_path = dir.join("manifest.csv");
    std::fs::write(&csv_path, manifest.to_csv(dir)?).map_err(|e| Error::io(&csv_path, e))?;
    Ok(manifest)
}
