use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel class indices on an H x W grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "label_map_new",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    /// Class indices from the channel argmax of a [K, H, W] tensor,
    /// ties resolved to the lowest class.
    pub fn from_class_scores(scores: &Tensor) -> Result<Self> {
        let shape = scores.shape();
        if shape.len() != 3 {
            return Err(Error::Domain {
                op: "from_class_scores",
                detail: format!("expected [K, H, W], got {shape:?}"),
            });
        }
        let (k, h, w) = (shape[0], shape[1], shape[2]);
        if k > u8::MAX as usize {
            return Err(Error::Domain {
                op: "from_class_scores",
                detail: format!("{k} classes exceed label range"),
            });
        }
        let arg = scores.argmax_axis(0)?;
        LabelMap::new(h, w, arg.into_iter().map(|c| c as u8).collect())
    }
}

/// Sparse annotation: pixels either carry a class in 0..K or the sentinel K
/// meaning unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleMask {
    labels: LabelMap,
    num_classes: usize,
}

impl ScribbleMask {
    pub fn new(labels: LabelMap, num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes > u8::MAX as usize {
            return Err(Error::Domain {
                op: "scribble_mask_new",
                detail: format!("num_classes {num_classes} out of range"),
            });
        }
        if let Some(&bad) = labels.data().iter().find(|&&v| v > num_classes as u8) {
            return Err(Error::Domain {
                op: "scribble_mask_new",
                detail: format!("label {bad} exceeds sentinel {num_classes}"),
            });
        }
        Ok(ScribbleMask {
            labels,
            num_classes,
        })
    }

    /// A mask with every pixel unlabeled.
    pub fn empty(height: usize, width: usize, num_classes: usize) -> Result<Self> {
        ScribbleMask::new(
            LabelMap::filled(height, width, num_classes as u8),
            num_classes,
        )
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut LabelMap {
        &mut self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sentinel(&self) -> u8 {
        self.num_classes as u8
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn is_annotated(&self, row: usize, col: usize) -> bool {
        self.labels.get(row, col) != self.sentinel()
    }

    /// Number of annotated pixels.
    pub fn annotated_count(&self) -> usize {
        let s = self.sentinel();
        self.labels.data().iter().filter(|&&v| v != s).count()
    }

    /// 1.0 at annotated pixels, 0.0 elsewhere, shaped [H, W].
    pub fn indicator(&self) -> Tensor {
        let s = self.sentinel();
        let data = self
            .labels
            .data()
            .iter()
            .map(|&v| if v == s { 0.0 } else { 1.0 })
            .collect();
        Tensor::new(vec![self.height(), self.width()], data).expect("indicator shape")
    }

    /// One-hot [K, H, W] over annotated pixels; unlabeled pixels are all-zero.
    pub fn one_hot(&self) -> Tensor {
        let (k, h, w) = (self.num_classes, self.height(), self.width());
        let s = self.sentinel();
        let mut data = vec![0.0; k * h * w];
        for (i, &v) in self.labels.data().iter().enumerate() {
            if v != s {
                data[v as usize * h * w + i] = 1.0;
            }
        }
        Tensor::new(vec![k, h, w], data).expect("one_hot shape")
    }
}

/// Dense ground truth as one-hot [K, H, W].
pub fn one_hot_dense(labels: &LabelMap, num_classes: usize) -> Result<Tensor> {
    let (h, w) = (labels.height(), labels.width());
    let mut data = vec![0.0; num_classes * h * w];
    for (i, &v) in labels.data().iter().enumerate() {
        if v as usize >= num_classes {
            return Err(Error::Domain {
                op: "one_hot_dense",
                detail: format!("label {v} out of range for {num_classes} classes"),
            });
        }
        data[v as usize * h * w + i] = 1.0;
    }
    Tensor::new(vec![num_classes, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scribble_counts_annotated_pixels() {
        let mut m = ScribbleMask::empty(2, 3, 4).unwrap();
        assert_eq!(m.annotated_count(), 0);
        m.labels_mut().set(0, 0, 2);
        m.labels_mut().set(1, 2, 0);
        assert_eq!(m.annotated_count(), 2);
        assert!(m.is_annotated(0, 0));
        assert!(!m.is_annotated(0, 1));
    }

    #[test]
    fn scribble_rejects_labels_beyond_sentinel() {
        let labels = LabelMap::new(1, 2, vec![0, 5]).unwrap();
        assert!(ScribbleMask::new(labels, 4).is_err());
    }

    #[test]
    fn one_hot_leaves_unlabeled_rows_zero() {
        let labels = LabelMap::new(1, 2, vec![1, 4]).unwrap();
        let m = ScribbleMask::new(labels, 4).unwrap();
        let y = m.one_hot();
        assert_eq!(y.shape(), &[4, 1, 2]);
        let col: f64 = (0..4).map(|c| y.get(&[c, 0, 1])).sum();
        assert_eq!(col, 0.0);
        assert_eq!(y.get(&[1, 0, 0]), 1.0);
    }
}
