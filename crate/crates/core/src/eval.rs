//! Pose metrics, per-joint diagnostics and the feature separability study.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::Window;
use crate::sim::{HEAD, JOINT_NAMES, NECK};

/// Coordinate- and joint-level errors between two `[.., J*3]` pose tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointErrors {
    /// Root mean squared coordinate error.
    pub rmse: f64,
    /// Mean absolute coordinate error.
    pub mae: f64,
    /// Mean per-joint Euclidean error.
    pub mpjpe: f64,
    /// Mean Euclidean error of each joint.
    pub per_joint: Vec<f64>,
    pub frames: usize,
}

fn check_pair(pred: &Tensor, truth: &Tensor, joints: usize) -> Result<usize> {
    if pred.shape() != truth.shape() {
        return Err(Error::dim(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    let per_frame = joints * 3;
    if joints == 0 || pred.numel() == 0 || pred.numel() % per_frame != 0 {
        return Err(Error::dim(format!("{:?} is not a whole number of {joints}-joint frames", pred.shape())));
    }
    Ok(pred.numel() / per_frame)
}

pub fn joint_errors(pred: &Tensor, truth: &Tensor, joints: usize) -> Result<JointErrors> {
    let frames = check_pair(pred, truth, joints)?;
    let (p, t) = (pred.data(), truth.data());
    let (mut sq, mut abs) = (0.0, 0.0);
    let mut per_joint = vec![0.0; joints];
    for f in 0..frames {
        for j in 0..joints {
            let mut d2 = 0.0;
            for c in 0..3 {
                let i = (f * joints + j) * 3 + c;
                let e = p[i] - t[i];
                sq += e * e;
                abs += e.abs();
                d2 += e * e;
            }
            per_joint[j] += d2.sqrt();
        }
    }
    let n = p.len() as f64;
    per_joint.iter_mut().for_each(|v| *v /= frames as f64);
    Ok(JointErrors {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        mpjpe: per_joint.iter().sum::<f64>() / joints as f64,
        per_joint,
        frames,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pckh {
    pub fraction: f64,
    /// Correct fraction per joint.
    pub per_joint: Vec<f64>,
    /// Frames skipped because head and neck coincide.
    pub excluded_frames: usize,
}

/// Fraction of joints within half the ground-truth head–neck length.
pub fn pckh05(pred: &Tensor, truth: &Tensor, joints: usize, head: usize, neck: usize) -> Result<Pckh> {
    let frames = check_pair(pred, truth, joints)?;
    if head >= joints || neck >= joints || head == neck {
        return Err(Error::Config(format!("head {head} / neck {neck} invalid for {joints} joints")));
    }
    let (p, t) = (pred.data(), truth.data());
    let at = |d: &[f64], f: usize, j: usize| {
        let i = (f * joints + j) * 3;
        [d[i], d[i + 1], d[i + 2]]
    };
    let dist = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let (mut excluded, mut used) = (0, 0);
    let mut hits = vec![0usize; joints];
    for f in 0..frames {
        let thr = 0.5 * dist(at(t, f, head), at(t, f, neck));
        if thr < 1e-12 {
            excluded += 1;
            continue;
        }
        used += 1;
        for (j, h) in hits.iter_mut().enumerate() {
            if dist(at(p, f, j), at(t, f, j)) < thr {
                *h += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Data("every frame has a degenerate head-neck link".into()));
    }
    Ok(Pckh {
        fraction: hits.iter().sum::<usize>() as f64 / (used * joints) as f64,
        per_joint: hits.iter().map(|&h| h as f64 / used as f64).collect(),
        excluded_frames: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub mpjpe: f64,
    pub pckh05: f64,
    pub per_joint_error: Vec<f64>,
    pub per_joint_pckh05: Vec<f64>,
    pub frames: usize,
    pub excluded_frames: usize,
    pub windows: usize,
}

impl MetricReport {
    /// Skeleton layout fixed to the 21-joint rig.
    pub fn compute(pred: &Tensor, truth: &Tensor) -> Result<Self> {
        let joints = JOINT_NAMES.len();
        let e = joint_errors(pred, truth, joints)?;
        let p = pckh05(pred, truth, joints, HEAD, NECK)?;
        let windows = if pred.rank() == 3 { pred.shape()[0] } else { 1 };
        Ok(Self {
            rmse: e.rmse,
            mae: e.mae,
            mpjpe: e.mpjpe,
            pckh05: p.fraction,
            per_joint_error: e.per_joint,
            per_joint_pckh05: p.per_joint,
            frames: e.frames,
            excluded_frames: p.excluded_frames,
            windows,
        })
    }

    /// Writes `metrics.json` and `per_joint.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.json");
        fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("per_joint.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["joint", "name", "mean_error", "pckh05"]).map_err(|e| csv_err(&path, e))?;
        for (j, (err, pck)) in self.per_joint_error.iter().zip(&self.per_joint_pckh05).enumerate() {
            let name = JOINT_NAMES.get(j).copied().unwrap_or("?");
            w.write_record([j.to_string(), name.to_string(), err.to_string(), pck.to_string()])
                .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Stacks window poses into `[N, T, 63]`.
pub fn stack_poses(windows: &[Window]) -> Result<Tensor> {
    Tensor::stack(&windows.iter().map(|w| w.pose.clone()).collect::<Vec<_>>())
}

/// Runs the model over `windows` in batches of `batch` and returns the
/// predictions `[N, T, 63]`.
pub fn predict_windows(model: &Model, store: &ParamStore, windows: &[Window], batch: usize) -> Result<Tensor> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("no windows to evaluate".into()));
    }
    let mut parts = Vec::new();
    for chunk in windows.chunks(batch.max(1)) {
        let x = Tensor::stack(&chunk.iter().map(|w| w.x.clone()).collect::<Vec<_>>())?;
        let m = Tensor::stack(&chunk.iter().map(|w| w.m.clone()).collect::<Vec<_>>())?;
        let p = model.predict(store, &x, &m)?;
        parts.extend((0..chunk.len()).map(|i| p.index0(i)));
    }
    Tensor::stack(&parts)
}

pub fn evaluate(model: &Model, store: &ParamStore, windows: &[Window], batch: usize) -> Result<MetricReport> {
    let pred = predict_windows(model, store, windows, batch)?;
    MetricReport::compute(&pred, &stack_poses(windows)?)
}

/// Per-coordinate mean pose `[T, 63]` over `windows`, frame-independent.
pub fn mean_pose(windows: &[Window]) -> Result<Tensor> {
    let first = windows.first().ok_or_else(|| Error::EmptyInput("mean pose of no windows".into()))?;
    let (t, c) = (first.pose.shape()[0], first.pose.shape()[1]);
    let mut mean = vec![0.0; c];
    for w in windows {
        for row in w.pose.data().chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
    }
    let n = (windows.len() * t) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Tensor::new(&[t, c], mean.repeat(t))
}

/// Scores the constant `mean` prediction on `windows`.
pub fn baseline_report(mean: &Tensor, windows: &[Window]) -> Result<MetricReport> {
    let truth = stack_poses(windows)?;
    let pred = Tensor::stack(&vec![mean.clone(); windows.len()])?;
    MetricReport::compute(&pred, &truth)
}

// ----- separability ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub silhouette: f64,
    /// Variance captured by each of the two components.
    pub eigenvalues: [f64; 2],
    pub explained_ratio: f64,
}

/// Principal axes of row samples.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit component vectors, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Sample variances along every component (all of them, descending).
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    /// Fits `k` components; uses the `n × n` Gram matrix when samples are
    /// fewer than dimensions.
    pub fn fit(samples: &[Vec<f64>], k: usize) -> Result<Self> {
        let n = samples.len();
        let dim = samples.first().map_or(0, |s| s.len());
        if n < 2 || dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::dim(format!("pca needs >= 2 equal-length samples, got {n}")));
        }
        let mut mean = vec![0.0; dim];
        for s in samples {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let xc = DMatrix::from_fn(n, dim, |i, j| samples[i][j] - mean[j]);
        let denom = (n - 1) as f64;
        let (mut values, vectors): (Vec<f64>, Vec<Vec<f64>>) = if dim <= n {
            let cov = xc.transpose() * &xc / denom;
            let eig = SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let vecs = order.iter().take(k).map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
            (order.iter().map(|&i| eig.eigenvalues[i]).collect(), vecs)
        } else {
            let gram = &xc * xc.transpose() / denom;
            let eig = SymmetricEigen::new(gram);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let mut vecs = Vec::new();
            for &i in order.iter().take(k) {
                let v = xc.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                vecs.push(if norm > 1e-300 { (v / norm).iter().copied().collect() } else { vec![0.0; dim] });
            }
            (order.iter().map(|&i| eig.eigenvalues[i]).collect(), vecs)
        };
        values.iter_mut().for_each(|v| *v = v.max(0.0));
        if values.first().map_or(true, |&v| v <= 1e-12) {
            return Err(Error::Numerical("samples have no variance to project".into()));
        }
        let components = vectors
            .into_iter()
            .map(|mut v: Vec<f64>| {
                let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if lead < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        Ok(Self {
            mean,
            components,
            eigenvalues: values,
        })
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, a) in self.components.iter().zip(coords) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += a * v);
        }
        out
    }
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::dim("silhouette needs one label per point"));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::Data("silhouette needs at least two clusters".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![(0.0, 0usize); clusters.len()];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                let c = clusters.binary_search(&labels[j]).expect("known label");
                sums[c].0 += dist(p, q);
                sums[c].1 += 1;
            }
        }
        let own = clusters.binary_search(&labels[i]).expect("known label");
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|(c, s)| *c != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / points.len() as f64)
}

/// Projects flattened feature windows to two principal components and
/// scores how well `labels` separate there.
pub fn feature_pca(features: &[Vec<f64>], labels: &[usize]) -> Result<SeparabilityReport> {
    if features.len() != labels.len() {
        return Err(Error::dim("one label per feature window"));
    }
    let mut counts = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 3) {
        return Err(Error::Data("need at least 2 clusters of at least 3 samples".into()));
    }
    let pca = Pca::fit(features, 2)?;
    let points: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut p = pca.project(f);
            p.resize(2, 0.0);
            p
        })
        .collect();
    let total: f64 = pca.eigenvalues.iter().sum();
    let top = [pca.eigenvalues[0], pca.eigenvalues.get(1).copied().unwrap_or(0.0)];
    Ok(SeparabilityReport {
        silhouette: silhouette(&points, labels)?,
        points: points.iter().map(|p| [p[0], p[1]]).collect(),
        labels: labels.to_vec(),
        eigenvalues: top,
        explained_ratio: (top[0] + top[1]) / total,
    })
}

impl SeparabilityReport {
    pub fn write_points(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["x", "y", "cluster"]).map_err(|e| csv_err(path, e))?;
        for (p, l) in self.points.iter().zip(&self.labels) {
            w.write_record([p[0].to_string(), p[1].to_string(), l.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Static scatter plot, one colour per cluster.
    pub fn to_svg(&self, title: &str) -> String {
        const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
        let (w, h, pad) = (480.0, 480.0, 40.0);
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let sx = (w - 2.0 * pad) / (x1 - x0).max(1e-12);
        let sy = (h - 2.0 * pad) / (y1 - y0).max(1e-12);
        let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
        let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title} (silhouette {:.3})</text>",
            self.silhouette
        );
        for (p, l) in self.points.iter().zip(&self.labels) {
            let cx = pad + (p[0] - x0) * sx;
            let cy = h - pad - (p[1] - y0) * sy;
            let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{}\"/>", COLORS[l % COLORS.len()]);
        }
        s.push_str("</svg>\n");
        s
    }
}
