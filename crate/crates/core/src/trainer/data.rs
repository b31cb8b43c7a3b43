use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::imaging::{augment_sample, crop_or_pad_mask, preprocess_volume, AugmentParams, PreprocessConfig};
use crate::phantom::SubjectSample;
use crate::seed;
use crate::tensor::{Real, Tensor};
use crate::volume::{ImageVolume, LabelMask, NUM_CLASSES};

const STREAM_SHUFFLE: u64 = 11;
const STREAM_AUGMENT: u64 = 12;

/// A subject after preprocessing, at network resolution.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub image: ImageVolume,
    pub mask: LabelMask,
}

pub fn prepare(sample: &SubjectSample, pre: &PreprocessConfig) -> Result<Prepared> {
    sample.mask.validate_classes(NUM_CLASSES)?;
    Ok(Prepared {
        id: sample.id.clone(),
        image: preprocess_volume(&sample.image, pre)?,
        mask: crop_or_pad_mask(&sample.mask, pre.target_size),
    })
}

pub fn prepare_all(samples: &[SubjectSample], pre: &PreprocessConfig) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| prepare(s, pre)).collect()
}

/// One training slice. `key` identifies it independently of its position
/// (subject id tag, domain tag, slice index) and seeds its augmentation.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub key: [u64; 3],
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
}

/// Pool of 2D training slices of equal size.
#[derive(Debug, Clone)]
pub struct SliceSet {
    pub size: usize,
    pub slices: Vec<SliceSample>,
}

impl SliceSet {
    pub fn from_subjects(samples: &[SubjectSample], pre: &PreprocessConfig) -> Result<Self> {
        let mut slices = Vec::new();
        for s in samples {
            let p = prepare(s, pre)?;
            for i in 0..p.image.dims().slices {
                slices.push(SliceSample {
                    key: [seed::tag(&s.id), s.domain.tag() as u64, i as u64],
                    image: p.image.slice(i).to_vec(),
                    mask: p.mask.slice(i).to_vec(),
                });
            }
        }
        if slices.is_empty() {
            return Err(Error::Dataset("no training slices".into()));
        }
        Ok(Self {
            size: pre.target_size,
            slices,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Slice order of one epoch, a function of the seed, stream and epoch.
    pub fn epoch_order(&self, seed: u64, stream: &[u64], epoch: u64) -> Vec<usize> {
        let mut path = vec![STREAM_SHUFFLE];
        path.extend_from_slice(stream);
        path.push(epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed::stream(seed, &path));
        order
    }

    /// Images `N x 1 x H x W` and one-hot targets `N x K x H x W`. With
    /// augmentation each slice draws from its own stream, so a batch does
    /// not depend on how many workers assemble it.
    pub fn batch<T: Real>(
        &self,
        indices: &[usize],
        augment: Option<(&AugmentParams, u64, &[u64], u64)>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, hw) = (indices.len(), self.size * self.size);
        let mut x = Vec::with_capacity(n * hw);
        let mut y = vec![T::zero(); n * NUM_CLASSES * hw];
        for (b, &i) in indices.iter().enumerate() {
            let s = &self.slices[i];
            let (img, mask) = match augment {
                Some((params, seed_value, stream, epoch)) => {
                    let mut path = vec![STREAM_AUGMENT];
                    path.extend_from_slice(stream);
                    path.push(epoch);
                    path.extend_from_slice(&s.key);
                    let mut rng = seed::stream(seed_value, &path);
                    augment_sample(&s.image, &s.mask, self.size, self.size, params, &mut rng)?
                }
                None => (s.image.clone(), s.mask.clone()),
            };
            x.extend(img.iter().map(|&v| T::lit(v as f64)));
            for (p, &c) in mask.iter().enumerate() {
                y[(b * NUM_CLASSES + c as usize) * hw + p] = T::one();
            }
        }
        Ok((
            Tensor::new(vec![n, 1, self.size, self.size], x)?,
            Tensor::new(vec![n, NUM_CLASSES, self.size, self.size], y)?,
        ))
    }
}
