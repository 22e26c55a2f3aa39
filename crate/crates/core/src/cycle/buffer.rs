use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::error::{invalid, Error, Result};

/// Pool of previously generated images for discriminator updates.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    capacity: usize,
    images: Vec<Vec<f64>>,
}

impl HistoryBuffer {
    pub const DEFAULT_CAPACITY: usize = 1000;
    pub const DEFAULT_SAMPLE: usize = 32;

    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("buffer capacity must be positive"));
        }
        Ok(Self {
            capacity,
            images: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Vec<f64>] {
        &self.images
    }

    /// Appends while there is room, otherwise overwrites a uniformly chosen
    /// slot.
    pub fn push<R: Rng + ?Sized>(&mut self, image: Vec<f64>, rng: &mut R) {
        if self.images.len() < self.capacity {
            self.images.push(image);
        } else {
            let slot = rng.random_range(0..self.capacity);
            self.images[slot] = image;
        }
    }

    /// Uniform sample without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if self.images.is_empty() {
            return Err(Error::Empty { what: "history buffer" });
        }
        if count > self.images.len() {
            return Err(invalid("sample larger than buffer contents"));
        }
        Ok(index::sample(rng, self.images.len(), count)
            .into_iter()
            .map(|i| self.images[i].clone())
            .collect())
    }

    /// Pushes `new_images` and then samples `count` from the whole pool.
    pub fn push_sample<R: Rng + ?Sized>(&mut self, new_images: Vec<Vec<f64>>, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if count > self.capacity {
            return Err(invalid("sample count exceeds capacity"));
        }
        for img in new_images {
            self.push(img, rng);
        }
        self.sample(count, rng)
    }
}
