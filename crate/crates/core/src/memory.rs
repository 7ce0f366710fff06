//! Per-class prototype memory with momentum updates.
//!
//! One D-dimensional prototype per class, initialized as the mean of the
//! snippet features at point annotations and refreshed with an exponential
//! moving average of pseudo-action snippet features. Updates happen outside
//! any gradient computation: reads hand out plain matrices that enter the
//! tape as constants.

use ndarray::{Array2, ArrayView1};

use crate::data::TrainVideo;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    prototypes: Array2<f64>,
    mu: f64,
    initialized: bool,
}

impl PrototypeMemory {
    /// Mean of the annotated snippet features per class. `embed` maps a
    /// video's raw T x D features into the space the memory lives in; pass
    /// the identity to store raw-feature prototypes.
    pub fn init<'a, F>(
        videos: impl IntoIterator<Item = TrainVideo<'a>>,
        num_classes: usize,
        mu: f64,
        embed: F,
    ) -> Result<Self>
    where
        F: Fn(&Array2<f64>) -> Array2<f64>,
    {
        let mut sums = Array2::<f64>::zeros((num_classes, 0));
        let mut counts = vec![0usize; num_classes];
        let mut first = true;
        for video in videos {
            let feats = embed(video.features);
            if first {
                sums = Array2::zeros((num_classes, feats.ncols()));
                first = false;
            }
            for p in video.points {
                if p.label >= num_classes {
                    return Err(Error::Shape(format!(
                        "point label {} out of range {num_classes}",
                        p.label
                    )));
                }
                let mut row = sums.row_mut(p.label);
                row += &feats.row(p.t);
                counts[p.label] += 1;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                return Err(Error::ClassWithoutPoints { class: c });
            }
            let mut row = sums.row_mut(c);
            row /= n as f64;
        }
        Ok(PrototypeMemory {
            prototypes: sums,
            mu,
            initialized: true,
        })
    }

    /// Restores a memory from checkpointed state.
    pub fn from_parts(prototypes: Array2<f64>, mu: f64, initialized: bool) -> Self {
        PrototypeMemory {
            prototypes,
            mu,
            initialized,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Snapshot of the prototype matrix (C x D), for attention reads and
    /// contrastive targets.
    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    /// Momentum update of class `c`: `m <- mu * m + (1 - mu) * x`.
    pub fn update(&mut self, c: usize, x: ArrayView1<'_, f64>) -> Result<()> {
        if !self.initialized {
            return Err(Error::MemoryUninitialized);
        }
        if c >= self.num_classes() || x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "memory update class {c} (C={}) with vector of length {} (D={})",
                self.num_classes(),
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("memory update with non-finite vector".into()));
        }
        let mut row = self.prototypes.row_mut(c);
        for (m, &v) in row.iter_mut().zip(x.iter()) {
            *m = self.mu * *m + (1.0 - self.mu) * v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PointAnnotation, VideoRecord};
    use ndarray::array;

    fn corpus_with_points(points: Vec<Vec<PointAnnotation>>, feats: Vec<Array2<f64>>) -> Vec<VideoRecord> {
        points
            .into_iter()
            .zip(feats)
            .enumerate()
            .map(|(i, (ps, f))| VideoRecord::new(format!("v{i}"), f, 1.0, ps, None))
            .collect()
    }

    #[test]
    fn init_averages_point_features() {
        let videos = corpus_with_points(
            vec![vec![
                PointAnnotation { t: 0, label: 0 },
                PointAnnotation { t: 1, label: 0 },
            ]],
            vec![array![[1.0, 0.0], [0.0, 1.0]]],
        );
        let mem = PrototypeMemory::init(
            videos.iter().map(|v| v.train_view()),
            1,
            0.999,
            |f| f.clone(),
        )
        .unwrap();
        assert_eq!(mem.prototypes().row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn init_single_point_is_identity() {
        let videos = corpus_with_points(
            vec![vec![PointAnnotation { t: 1, label: 0 }]],
            vec![array![[9.0, 9.0], [3.0, -4.0]]],
        );
        let mem =
            PrototypeMemory::init(videos.iter().map(|v| v.train_view()), 1, 0.9, |f| f.clone())
                .unwrap();
        assert_eq!(mem.prototypes().row(0).to_vec(), vec![3.0, -4.0]);
    }

    #[test]
    fn class_without_points_errors_with_class_index() {
        let videos = corpus_with_points(
            vec![vec![PointAnnotation { t: 0, label: 0 }]],
            vec![Array2::zeros((2, 2))],
        );
        let err = PrototypeMemory::init(videos.iter().map(|v| v.train_view()), 3, 0.9, |f| {
            f.clone()
        })
        .unwrap_err();
        match err {
            Error::ClassWithoutPoints { class } => assert_eq!(class, 1),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err_to_string_contains_class());
    }

    fn err_to_string_contains_class() -> bool {
        Error::ClassWithoutPoints { class: 2 }
            .to_string()
            .contains("class 2")
    }

    #[test]
    fn update_is_exact_momentum_blend() {
        let mut mem = PrototypeMemory::from_parts(array![[1.0, 0.0]], 0.999, true);
        mem.update(0, array![0.0, 1.0].view()).unwrap();
        let row = mem.prototypes().row(0);
        assert!((row[0] - 0.999).abs() < 1e-15);
        assert!((row[1] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn update_with_prototype_is_fixed_point() {
        let mut mem = PrototypeMemory::from_parts(array![[0.25, -0.75]], 0.99, true);
        let before = mem.prototypes().clone();
        let row = before.row(0).to_owned();
        mem.update(0, row.view()).unwrap();
        for (a, b) in mem.prototypes().iter().zip(before.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_momentum_replaces_prototype() {
        let mut mem = PrototypeMemory::from_parts(array![[5.0, 5.0]], 0.0, true);
        mem.update(0, array![-1.0, 2.0].view()).unwrap();
        assert_eq!(mem.prototypes().row(0).to_vec(), vec![-1.0, 2.0]);
    }

    #[test]
    fn update_before_init_is_state_error() {
        let mut mem = PrototypeMemory::from_parts(array![[0.0]], 0.9, false);
        let err = mem.update(0, array![1.0].view()).unwrap_err();
        assert_eq!(err.code(), "E_MEMORY_UNINITIALIZED");
    }

    #[test]
    fn other_rows_untouched_by_update() {
        let mut mem = PrototypeMemory::from_parts(array![[1.0, 1.0], [2.0, 2.0]], 0.5, true);
        mem.update(0, array![3.0, 3.0].view()).unwrap();
        assert_eq!(mem.prototypes().row(1).to_vec(), vec![2.0, 2.0]);
    }
}
