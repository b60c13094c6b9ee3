//! Group-wise accuracy evaluation and feature export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::biasdata::BiasedDataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mlp::MlpModel;
use crate::report::fmt_g6;

/// Accuracy over bias-aligned, bias-conflicting, and pooled samples.
/// An empty group reports `None` rather than a misleading zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAccuracy {
    pub acc_ba: Option<f64>,
    pub acc_bc: Option<f64>,
    pub acc_unbiased: Option<f64>,
    pub n_ba: usize,
    pub n_bc: usize,
}

impl std::fmt::Display for GroupAccuracy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |a: Option<f64>| match a {
            Some(v) => fmt_g6(v),
            None => "undefined".to_string(),
        };
        write!(
            f,
            "acc_unbiased={} acc_ba={} acc_bc={} (n_ba={}, n_bc={})",
            show(self.acc_unbiased),
            show(self.acc_ba),
            show(self.acc_bc),
            self.n_ba,
            self.n_bc
        )
    }
}

const EVAL_BATCH: usize = 512;

/// Assembles dataset rows `range` into an f64 batch matrix.
pub fn batch_features(ds: &BiasedDataset, idx: &[usize]) -> Result<Matrix> {
    let mut m = Matrix::zeros(idx.len(), ds.input_dim);
    for (row, &i) in idx.iter().enumerate() {
        let s = &ds.samples[i];
        if s.x.len() != ds.input_dim {
            return Err(Error::shape("batch_features", "sample width mismatch"));
        }
        for (dst, &v) in m.row_mut(row).iter_mut().zip(&s.x) {
            *dst = v as f64;
        }
    }
    Ok(m)
}

/// Argmax over logits with ties broken toward the lowest class index.
pub fn predict(model: &MlpModel, ds: &BiasedDataset) -> Result<Vec<usize>> {
    if ds.input_dim != model.input_dim() {
        return Err(Error::shape(
            "predict",
            format!(
                "dataset width {} vs model input {}",
                ds.input_dim,
                model.input_dim()
            ),
        ));
    }
    let n = ds.samples.len();
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = batch_features(ds, &idx)?;
        let (logits, _) = model.forward(&x)?;
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let mut best = 0usize;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            preds.push(best);
        }
        start = end;
    }
    Ok(preds)
}

pub fn accuracy_by_group(model: &MlpModel, ds: &BiasedDataset) -> Result<GroupAccuracy> {
    let preds = predict(model, ds)?;
    let mut n_ba = 0usize;
    let mut n_bc = 0usize;
    let mut ok_ba = 0usize;
    let mut ok_bc = 0usize;
    for (s, &p) in ds.samples.iter().zip(&preds) {
        let correct = p == s.y as usize;
        if s.aligned {
            n_ba += 1;
            ok_ba += usize::from(correct);
        } else {
            n_bc += 1;
            ok_bc += usize::from(correct);
        }
    }
    let ratio = |ok: usize, n: usize| {
        if n == 0 {
            None
        } else {
            Some(ok as f64 / n as f64)
        }
    };
    Ok(GroupAccuracy {
        acc_ba: ratio(ok_ba, n_ba),
        acc_bc: ratio(ok_bc, n_bc),
        acc_unbiased: ratio(ok_ba + ok_bc, n_ba + n_bc),
        n_ba,
        n_bc,
    })
}

/// Writes post-activation values at layer `k` as CSV:
/// `sample_id,y,bias,aligned,f_0..f_{d-1}`.
pub fn export_features(
    model: &MlpModel,
    ds: &BiasedDataset,
    k: usize,
    path: &Path,
) -> Result<()> {
    let layer = model.layer(k)?;
    let out_dim = layer.out_dim();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "sample_id,y,bias,aligned")?;
    for j in 0..out_dim {
        write!(w, ",f_{j}")?;
    }
    writeln!(w)?;
    let last = model.layer_count() - 1;
    let n = ds.samples.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = batch_features(ds, &idx)?;
        let (_, cache) = model.forward(&x)?;
        let z = cache.preactivation(k);
        for (r, &i) in idx.iter().enumerate() {
            let s = &ds.samples[i];
            write!(w, "{},{},{},{}", i, s.y, s.bias, u8::from(s.aligned))?;
            for j in 0..out_dim {
                let v = z.get(r, j);
                // Hidden layers export the rectified value; the output
                // layer is identity.
                let v = if k < last { v.max(0.0) } else { v };
                write!(w, ",{}", fmt_g6(v))?;
            }
            writeln!(w)?;
        }
        start = end;
    }
    w.flush()?;
    Ok(())
}
