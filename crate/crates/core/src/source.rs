//! Where images come from: anything that can turn a unit key into a tensor.

use std::collections::HashMap;

use crate::recordstore::{RecordError, RecordFile};
use crate::tensor::ImageTensor;

/// Resolves image keys to tensors. Implementations must be safe to call
/// from several threads at once.
pub trait ImageSource: Sync {
    fn contains(&self, key: &str) -> bool;
    fn fetch(&self, key: &str) -> Result<ImageTensor, RecordError>;
}

/// Images held in memory, keyed by unit key.
#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    images: HashMap<String, ImageTensor>,
}

impl InMemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, img: ImageTensor) {
        self.images.insert(key.into(), img);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl<K: Into<String>> FromIterator<(K, ImageTensor)> for InMemorySource {
    fn from_iter<T: IntoIterator<Item = (K, ImageTensor)>>(iter: T) -> Self {
        Self { images: iter.into_iter().map(|(k, v)| (k.into(), v)).collect() }
    }
}

impl ImageSource for InMemorySource {
    fn contains(&self, key: &str) -> bool {
        self.images.contains_key(key)
    }

    fn fetch(&self, key: &str) -> Result<ImageTensor, RecordError> {
        self.images.get(key).cloned().ok_or_else(|| RecordError::KeyNotFound(key.to_string()))
    }
}

impl ImageSource for RecordFile {
    fn contains(&self, key: &str) -> bool {
        RecordFile::contains(self, key)
    }

    fn fetch(&self, key: &str) -> Result<ImageTensor, RecordError> {
        self.get(key)
    }
}
