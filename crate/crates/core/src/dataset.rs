//! In-memory labelled image sets.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(channels, height, width)` of one image.
    shape: [usize; 3],
    data: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(shape: [usize; 3], data: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || data.len() != per * labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                detail: alloc::format!("{} values for {} images of shape {:?}", data.len(), labels.len(), shape),
            });
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::InvalidArgument(alloc::format!("label {} of image {} out of range", labels[i], i)));
        }
        Ok(Self { shape, data, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.image_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images `[start, end)` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::InvalidArgument(alloc::format!("range {}..{} outside {} images", start, end, self.len())));
        }
        let n = self.image_len();
        Self::new(self.shape, self.data[start * n..end * n].to_vec(), self.labels[start..end].to_vec(), self.classes)
    }

    /// Stacks the selected images into `[N, C, H, W]` with their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.shape;
        (Tensor::new(alloc::vec![indices.len(), c, h, w], data).expect("sizes checked"), labels)
    }

    /// Consecutive batches covering the whole set in order.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |s| {
            let idx: Vec<usize> = (s..(s + bs).min(self.len())).collect();
            self.batch(&idx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_and_slice() {
        let ds = Dataset::new([1, 2, 2], (0..12).map(|v| v as f64).collect(), alloc::vec![0, 1, 2], 3).unwrap();
        let (x, y) = ds.batch(&[2, 0]);
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(&x.data()[..4], &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(y, [2, 0]);
        assert_eq!(ds.slice(1, 3).unwrap().labels(), &[1, 2]);
        assert_eq!(ds.sequential_batches(2).count(), 2);
        assert!(Dataset::new([1, 2, 2], alloc::vec![0.0; 4], alloc::vec![5], 3).is_err());
    }
}
