//! Seeded synthetic image classification data: small spatial patterns
//! with amplitude jitter and Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Batch;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSettings {
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            classes: 4,
            train: 2000,
            val: 500,
            image_size: 8,
            channels: 1,
            noise: 0.35,
            seed: 42,
        }
    }
}

impl DataSettings {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 6 {
            return Err(Error::Config(format!(
                "dataset supports 2..=6 classes, got {}",
                self.classes
            )));
        }
        if self.train == 0 || self.val == 0 {
            return Err(Error::Config("train and val sizes must be positive".to_string()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".to_string()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".to_string()));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::Config("noise must be finite and >= 0".to_string()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.image_size, self.image_size, self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Borrowing batch over the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<'_>> {
        Batch::new(
            indices.iter().map(|&i| &self.inputs[i]).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    pub fn full_batch(&self) -> Result<Batch<'_>> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }
}

/// Class template intensity in [0,1] at pixel (row, col).
fn template(class: usize, row: usize, col: usize, size: usize) -> f64 {
    let third = size / 3;
    let inside = match class % 6 {
        // Horizontal band.
        0 => row >= third && row < size - third,
        // Vertical band.
        1 => col >= third && col < size - third,
        // Main diagonal band.
        2 => row.abs_diff(col) <= size / 6,
        // Center blob.
        3 => {
            let c = (size - 1) as f64 / 2.0;
            let dr = row as f64 - c;
            let dc = col as f64 - c;
            (dr * dr + dc * dc).sqrt() <= size as f64 / 4.0
        }
        // Anti-diagonal band.
        4 => (row + col).abs_diff(size - 1) <= size / 6,
        // Coarse checkerboard.
        _ => (row / 2 + col / 2).is_multiple_of(2),
    };
    if inside {
        1.0
    } else {
        0.0
    }
}

fn generate_one(
    class: usize,
    settings: &DataSettings,
    normal: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let s = settings.image_size;
    let c = settings.channels;
    let amp = rng.random_range(0.7..1.3);
    let mut t = Tensor::zeros(&[s, s, c]);
    {
        let data = t.data_mut();
        for row in 0..s {
            for col in 0..s {
                let base = amp * template(class, row, col, s);
                for ch in 0..c {
                    data[(row * s + col) * c + ch] = base + normal.sample(rng);
                }
            }
        }
    }
    t
}

/// Generates the train/validation split. Classes are balanced round-robin
/// and the whole sequence is a pure function of the settings.
pub fn generate_split(settings: &DataSettings) -> Result<(Dataset, Dataset)> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let normal = Normal::new(0.0, settings.noise.max(1e-12))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut make = |count: usize| -> Dataset {
        let mut inputs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % settings.classes;
            inputs.push(generate_one(class, settings, &normal, &mut rng));
            labels.push(class);
        }
        // Shuffle so mini-batches mix classes.
        for i in (1..count).rev() {
            let j = rng.random_range(0..=i);
            inputs.swap(i, j);
            labels.swap(i, j);
        }
        Dataset {
            inputs,
            labels,
            num_classes: settings.classes,
        }
    };
    let train = make(settings.train);
    let val = make(settings.val);
    Ok((train, val))
}
