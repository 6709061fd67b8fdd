//! Datasets, K-fold batch duplication, corruptions and file formats.

mod corrupt;
mod idx;
mod synthetic;

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;

pub use corrupt::{corrupt, CorruptionSpec, CorruptionType};
pub use idx::{load_idx, parse_idx, IdxArray};
pub use synthetic::{gaussians, synthetic, two_moons};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled examples with features flattened to `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// `(height, width, channels)` when rows are images in HWC order.
    pub image_shape: Option<(usize, usize, usize)>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.ndim() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            num_classes,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, h: usize, w: usize, c: usize) -> Result<Self> {
        if h * w * c != self.dim() {
            return Err(Error::Shape {
                op: "image_shape",
                lhs: vec![h, w, c],
                rhs: vec![self.dim()],
            });
        }
        self.image_shape = Some((h, w, c));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Ok(Self {
            name: self.name.clone(),
            features: Tensor::new(vec![indices.len(), d], data)?,
            labels,
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        })
    }

    /// Splits off the last `fraction` of examples as a held-out set.
    pub fn split_tail(&self, fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "held-out fraction {fraction} not in [0, 1)"
            )));
        }
        let held = ((self.len() as f64) * fraction).round() as usize;
        let cut = self.len() - held;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    /// Batch of examples `indices` as `(features [B, D], labels)`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.subset(indices)?;
        Ok((s.features, s.labels))
    }

    /// Per-feature `(min, max)` over the dataset.
    pub fn feature_bounds(&self) -> Vec<(f64, f64)> {
        let d = self.dim();
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for row in self.features.data().chunks(d) {
            for (b, &v) in out.iter_mut().zip(row) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        out
    }

    /// Affine map of each feature so `bounds` lands on `[0, 1]`; constant
    /// features map to 0.5.
    pub fn normalized(&self, bounds: &[(f64, f64)]) -> Result<Self> {
        if bounds.len() != self.dim() {
            return Err(Error::Shape {
                op: "normalize",
                lhs: vec![bounds.len()],
                rhs: vec![self.dim()],
            });
        }
        let d = self.dim();
        let data = self
            .features
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = bounds[i % d];
                if hi > lo {
                    (v - lo) / (hi - lo)
                } else {
                    0.5
                }
            })
            .collect();
        let mut out = self.clone();
        out.features = Tensor::new(self.features.shape().to_vec(), data)?;
        Ok(out)
    }

    /// Index order for one epoch.
    pub fn shuffled_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }

    /// Writes `x0,x1,...,label` CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for (row, label) in self.features.data().chunks(self.dim()).zip(&self.labels) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{},{label}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(name: &str, r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Parse { offset: 0, msg: "empty csv".into() })?;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let d = cols.len().saturating_sub(1);
        let header_ok = d >= 1
            && cols.last() == Some(&"label")
            && cols[..d].iter().enumerate().all(|(j, c)| *c == format!("x{j}"));
        if !header_ok {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("expected header x0,...,label, got `{header}`"),
            });
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut offset = header.len() + 1;
        for line in lines {
            let line = line?;
            let start = offset;
            offset += line.len() + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { offset: start, msg };
            let cells: Vec<&str> = line.trim().split(',').collect();
            if cells.len() != d + 1 {
                return Err(bad(format!("expected {} fields, got {}", d + 1, cells.len())));
            }
            for c in &cells[..d] {
                data.push(c.parse::<f64>().map_err(|e| bad(format!("`{c}`: {e}")))?);
            }
            labels.push(cells[d].parse::<usize>().map_err(|e| bad(format!("label `{}`: {e}", cells[d])))?);
        }
        let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
        Dataset::new(name, Tensor::new(vec![labels.len(), d], data)?, labels, classes)
    }
}

/// Repeats the rows of `x` `k` times: rows `[kB, (k+1)B)` are component `k`'s copy.
pub fn duplicate_batch(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || x.ndim() == 0 {
        return Err(Error::InvalidArgument(format!(
            "duplicate_batch needs k >= 1 and a batch axis, got k={k}, shape {:?}",
            x.shape()
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[0] *= k;
    let data = x.data().repeat(k);
    Tensor::new(shape, data)
}

/// Component `k`'s block of a duplicated batch.
pub fn component_block(x: &Tensor, k: usize, num_components: usize) -> Result<Tensor> {
    if num_components == 0 || k >= num_components || x.ndim() == 0 || x.shape()[0] % num_components != 0 {
        return Err(Error::Batch {
            rows: x.shape().first().copied().unwrap_or(0),
            k: num_components,
        });
    }
    let b = x.shape()[0] / num_components;
    let width = x.len() / x.shape()[0];
    let mut shape = x.shape().to_vec();
    shape[0] = b;
    Tensor::new(shape, x.data()[k * b * width..(k + 1) * b * width].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_three_times() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let d = duplicate_batch(&x, 3).unwrap();
        assert_eq!(d.shape(), &[6, 2]);
        for k in 0..3 {
            assert_eq!(component_block(&d, k, 3).unwrap(), x);
        }
        assert_eq!(duplicate_batch(&x, 1).unwrap(), x);
    }

    #[test]
    fn csv_round_trip() {
        let ds = Dataset::new(
            "t",
            Tensor::from_rows(&[vec![0.1, -2.5], vec![1e-17, 3.0]]).unwrap(),
            vec![1, 0],
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"x0,x1,label\n"));
        let back = Dataset::read_csv("t", buf.as_slice()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_bad_header_rejected() {
        assert!(Dataset::read_csv("t", "a,b\n1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn normalization_hits_unit_interval() {
        let ds = Dataset::new(
            "t",
            Tensor::from_rows(&[vec![-1.0, 5.0], vec![3.0, 5.0], vec![1.0, 5.0]]).unwrap(),
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        let n = ds.normalized(&ds.feature_bounds()).unwrap();
        assert_eq!(n.features.data(), &[0.0, 0.5, 1.0, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn tail_split_is_deterministic() {
        let ds = Dataset::new("t", Tensor::zeros(&[10, 1]), vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let (a, b) = ds.split_tail(0.2).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
    }
}
