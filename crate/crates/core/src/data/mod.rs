//! Procedural two-modality phantom datasets, label-safe augmentation and
//! the on-disk sample format.

mod augment;
mod io;
mod phantom;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use augment::{augment_sample, Augmentation};
pub use io::{read_dataset, read_sample, write_dataset, write_sample, MANIFEST_FILE, SAMPLE_EXT};
pub use phantom::{synthesize_dataset, synthesize_label, synthesize_sample, ModalityStyle, PhantomSpec};

use crate::error::{Error, Result};

/// Role of a dataset in cross-modality training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Assistant,
    Target,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Assistant => "assistant",
            Modality::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "assistant" => Some(Modality::Assistant),
            "target" => Some(Modality::Target),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Integer class map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width, "label buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self::new(height, width, vec![class; height * width])
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Pixel count per class, for classes `0..num_classes`.
    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes.max(1)];
        for &c in &self.data {
            let c = c as usize;
            if c >= counts.len() {
                counts.resize(c + 1, 0);
            }
            counts[c] += 1;
        }
        counts
    }
}

/// One grayscale image in `[-1, 1]` with its per-pixel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Vec<f32>,
    pub label: LabelMap,
    pub modality: Modality,
}

impl LabeledSample {
    pub fn new(image: Vec<f32>, label: LabelMap, modality: Modality) -> Result<Self> {
        if image.len() != label.len() {
            return Err(Error::Input(format!(
                "image has {} pixels but label map is {}x{}",
                image.len(),
                label.height,
                label.width
            )));
        }
        Ok(Self {
            image,
            label,
            modality,
        })
    }

    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.len() != self.label.len() {
            return Err(Error::Input("image/label shape mismatch".into()));
        }
        if let Some(&bad) = self.label.data.iter().find(|&&c| c as usize >= num_classes) {
            return Err(Error::Input(format!(
                "label value {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }
}

/// An ordered collection of samples of one modality.
///
/// Sample reads through [`Dataset::get`] are counted so callers can audit
/// which datasets a training mode actually touched.
#[derive(Debug)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    modality: Modality,
    num_classes: usize,
    reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            samples: self.samples.clone(),
            modality: self.modality,
            num_classes: self.num_classes,
            reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.modality == other.modality
            && self.num_classes == other.num_classes
            && self.samples == other.samples
    }
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, modality: Modality, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes > u8::MAX as usize {
            return Err(Error::Config(format!("num_classes {num_classes} out of range")));
        }
        if let Some(first) = samples.first() {
            let (h, w) = (first.height(), first.width());
            for (i, s) in samples.iter().enumerate() {
                if s.modality != modality {
                    return Err(Error::Input(format!(
                        "sample {i} is {} but dataset is {modality}",
                        s.modality
                    )));
                }
                if s.height() != h || s.width() != w {
                    return Err(Error::Input(format!(
                        "sample {i} is {}x{}, expected {h}x{w}",
                        s.height(),
                        s.width()
                    )));
                }
                s.validate(num_classes)
                    .map_err(|e| Error::Input(format!("sample {i}: {e}")))?;
            }
        }
        Ok(Self {
            samples,
            modality,
            num_classes,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(height, width)` of every sample, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height(), s.width()))
    }

    /// Audited access to one sample.
    pub fn get(&self, index: usize) -> &LabeledSample {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.samples[index]
    }

    /// Unaudited view, for I/O and inspection.
    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    /// First `count` samples, in order.
    pub fn take(&self, count: usize) -> Result<Self> {
        if count > self.len() {
            return Err(Error::Config(format!(
                "requested {count} samples from a dataset of {}",
                self.len()
            )));
        }
        Dataset::new(self.samples[..count].to_vec(), self.modality, self.num_classes)
    }

    /// Same samples relabelled with a different modality role.
    pub fn with_modality(&self, modality: Modality) -> Self {
        let samples = self
            .samples
            .iter()
            .cloned()
            .map(|mut s| {
                s.modality = modality;
                s
            })
            .collect();
        Self {
            samples,
            modality,
            num_classes: self.num_classes,
            reads: AtomicUsize::new(0),
        }
    }
}
