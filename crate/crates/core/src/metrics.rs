//! Dice similarity and average symmetric surface distance.
//!
//! Surfaces are foreground voxels with at least one background 6-neighbour;
//! voxels outside the grid count as background. Distances are Euclidean in
//! voxel units.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{DatasetManifest, LabelMap, SplitName};
use crate::error::{Error, Result};
use crate::inference::{sliding_window_predict, InferenceConfig};
use crate::model::Network;
use crate::tensor::{voxel_count, Dims3};

fn check_masks(a: &[bool], b: &[bool], dims: Dims3) -> Result<()> {
    if a.len() != voxel_count(dims) || b.len() != a.len() {
        return Err(Error::shape(voxel_count(dims), (a.len(), b.len())));
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dsc(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Linear indices of the surface voxels of `mask`, in ascending order.
pub fn surface(mask: &[bool], dims: Dims3) -> Vec<usize> {
    let [d, h, w] = dims;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if !mask[i] {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z == d - 1 || y == h - 1 || x == w - 1;
                if edge
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1]
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

fn coords(i: usize, dims: Dims3) -> [i64; 3] {
    [
        (i / (dims[1] * dims[2])) as i64,
        ((i / dims[2]) % dims[1]) as i64,
        (i % dims[2]) as i64,
    ]
}

fn combine(a: &[usize], b: &[usize], dist_to_b: impl Fn(usize) -> f64, dist_to_a: impl Fn(usize) -> f64) -> f64 {
    let total: f64 = a.iter().map(|&p| dist_to_b(p)).sum::<f64>() + b.iter().map(|&q| dist_to_a(q)).sum::<f64>();
    total / (a.len() + b.len()) as f64
}

/// Average symmetric surface distance by exhaustive search over surface pairs.
///
/// `None` when exactly one mask is empty; `Some(0)` when both are.
pub fn asd_brute_force(a: &[bool], b: &[bool], dims: Dims3) -> Result<Option<f64>> {
    check_masks(a, b, dims)?;
    let (sa, sb) = (surface(a, dims), surface(b, dims));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let nearest = |p: usize, set: &[usize]| {
        let cp = coords(p, dims);
        set.iter()
            .map(|&q| {
                let cq = coords(q, dims);
                (0..3).map(|k| (cp[k] - cq[k]).pow(2)).sum::<i64>()
            })
            .min()
            .map(|d2| (d2 as f64).sqrt())
            .expect("non-empty surface")
    };
    Ok(Some(combine(&sa, &sb, |p| nearest(p, &sb), |q| nearest(q, &sa))))
}

/// Same value as [`asd_brute_force`], via exact squared Euclidean distance transforms.
pub fn asd(a: &[bool], b: &[bool], dims: Dims3) -> Result<Option<f64>> {
    check_masks(a, b, dims)?;
    let (sa, sb) = (surface(a, dims), surface(b, dims));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let da = squared_edt(&sa, dims);
    let db = squared_edt(&sb, dims);
    Ok(Some(combine(&sa, &sb, |p| db[p].sqrt(), |q| da[q].sqrt())))
}

/// Squared distance from every voxel to the nearest seed, separable lower-envelope method.
fn squared_edt(seeds: &[usize], dims: Dims3) -> Vec<f64> {
    let n = voxel_count(dims);
    let mut f = vec![f64::INFINITY; n];
    for &s in seeds {
        f[s] = 0.0;
    }
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for start in 0..n {
            if !(start / stride).is_multiple_of(len) {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|k| f[start + k * stride]));
            envelope_1d(&line, &mut out);
            for (k, &v) in out.iter().enumerate() {
                f[start + k * stride] = v;
            }
        }
    }
    f
}

fn envelope_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        return;
    }
    // parabola vertices and the boundaries between them
    let mut v = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let meet = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for &q in &finite {
        while let Some(&p) = v.last() {
            let s = meet(q, p);
            if s <= *z.last().expect("boundary per vertex") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        let xf = x as f64;
        while k + 1 < v.len() && z[k + 1] < xf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = (xf - p) * (xf - p) + f[v[k]];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetric {
    pub class: u8,
    pub dsc: f64,
    /// `None` when exactly one of prediction and truth is empty.
    pub asd: Option<f64>,
    pub pred_empty: bool,
    pub truth_empty: bool,
}

impl ClassMetric {
    fn flags(&self) -> String {
        let mut f = Vec::new();
        if self.asd.is_none() {
            f.push("asd_undefined");
        }
        if self.pred_empty {
            f.push("pred_empty");
        }
        if self.truth_empty {
            f.push("truth_empty");
        }
        f.join(";")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// Foreground classes `1..C`.
    pub classes: Vec<ClassMetric>,
}

impl CaseMetrics {
    pub fn mean_dsc(&self) -> f64 {
        self.classes.iter().map(|c| c.dsc).sum::<f64>() / self.classes.len().max(1) as f64
    }

    /// Mean over the classes where ASD is defined.
    pub fn mean_asd(&self) -> Option<f64> {
        let defined: Vec<f64> = self.classes.iter().filter_map(|c| c.asd).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Per-class metrics of a predicted label map against the truth.
pub fn case_metrics(case_id: &str, pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<CaseMetrics> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(truth.dims(), pred.dims()));
    }
    let dims = truth.dims();
    let classes = (1..num_classes as u8)
        .map(|class| {
            let a: Vec<bool> = pred.data().iter().map(|&l| l == class).collect();
            let b: Vec<bool> = truth.data().iter().map(|&l| l == class).collect();
            Ok(ClassMetric {
                class,
                dsc: dsc(&a, &b)?,
                asd: asd(&a, &b, dims)?,
                pred_empty: !a.contains(&true),
                truth_empty: !b.contains(&true),
            })
        })
        .collect::<Result<_>>()?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        classes,
    })
}

/// Mean and population standard deviation of the defined values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub undefined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut undefined = 0;
        let defined: Vec<f64> = values
            .into_iter()
            .filter_map(|v| {
                undefined += v.is_none() as usize;
                v
            })
            .collect();
        let count = defined.len();
        if count == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count,
                undefined,
            };
        }
        let mean = defined.iter().sum::<f64>() / count as f64;
        let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
        Self {
            mean,
            std: var.sqrt(),
            count,
            undefined,
        }
    }
}

/// Which column of the per-class table a summary refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSelector {
    Class(u8),
    Mean,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub num_classes: usize,
    pub cases: Vec<CaseMetrics>,
    /// Cases left out because they had no labels.
    pub skipped: usize,
}

impl MetricReport {
    pub fn selectors(&self) -> Vec<ClassSelector> {
        (1..self.num_classes as u8)
            .map(ClassSelector::Class)
            .chain(std::iter::once(ClassSelector::Mean))
            .collect()
    }

    fn class_of<'a>(&self, case: &'a CaseMetrics, class: u8) -> &'a ClassMetric {
        &case.classes[class as usize - 1]
    }

    pub fn dsc(&self, sel: ClassSelector) -> Summary {
        Summary::of(self.cases.iter().map(|c| {
            Some(match sel {
                ClassSelector::Class(k) => self.class_of(c, k).dsc,
                ClassSelector::Mean => c.mean_dsc(),
            })
        }))
    }

    pub fn asd(&self, sel: ClassSelector) -> Summary {
        Summary::of(self.cases.iter().map(|c| match sel {
            ClassSelector::Class(k) => self.class_of(c, k).asd,
            ClassSelector::Mean => c.mean_asd(),
        }))
    }

    /// Case-averaged mean foreground DSC.
    pub fn mean_dsc(&self) -> f64 {
        self.dsc(ClassSelector::Mean).mean
    }

    /// `case_id,class,dsc,asd,flags`, one row per case and class, then `mean` and `std` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Input(format!("csv: {e}"));
        w.write_record(["case_id", "class", "dsc", "asd", "flags"])
            .map_err(err)?;
        let fmt = |v: Option<f64>| {
            v.filter(|x| x.is_finite())
                .map(|x| format!("{x:.6}"))
                .unwrap_or_default()
        };
        for case in &self.cases {
            for c in &case.classes {
                w.write_record([
                    case.case_id.clone(),
                    c.class.to_string(),
                    fmt(Some(c.dsc)),
                    fmt(c.asd),
                    c.flags(),
                ])
                .map_err(err)?;
            }
            let asd = case.mean_asd();
            w.write_record([
                case.case_id.clone(),
                "mean".into(),
                fmt(Some(case.mean_dsc())),
                fmt(asd),
                if asd.is_none() {
                    "asd_undefined".into()
                } else {
                    String::new()
                },
            ])
            .map_err(err)?;
        }
        for sel in self.selectors() {
            let class = match sel {
                ClassSelector::Class(k) => k.to_string(),
                ClassSelector::Mean => "mean".into(),
            };
            let (d, a) = (self.dsc(sel), self.asd(sel));
            let flags = if a.undefined > 0 {
                format!("asd_undefined={}", a.undefined)
            } else {
                String::new()
            };
            w.write_record([
                "mean".into(),
                class.clone(),
                fmt(Some(d.mean)),
                fmt(Some(a.mean)),
                flags.clone(),
            ])
            .map_err(err)?;
            w.write_record(["std".into(), class, fmt(Some(d.std)), fmt(Some(a.std)), flags])
                .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Segments every case of `split` with sliding windows and scores it.
pub fn evaluate_split(
    net: &Network<f32>,
    manifest: &DatasetManifest,
    split: SplitName,
    infer: &InferenceConfig,
) -> Result<MetricReport> {
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    let mut report = MetricReport {
        num_classes: net.config().num_classes,
        ..MetricReport::default()
    };
    for id in ids {
        if manifest.item(id)?.label_path.is_none() {
            log::warn!("case {id} has no labels; skipped");
            report.skipped += 1;
            continue;
        }
        let volume = manifest.load_volume(id)?.normalize()?;
        let truth = manifest.load_labels(id)?;
        let seg = sliding_window_predict(net, &volume, infer)?;
        report
            .cases
            .push(case_metrics(id, &seg.labels, &truth, report.num_classes)?);
    }
    if report.cases.is_empty() {
        return Err(Error::Dataset(format!("no labeled cases in split {split:?}")));
    }
    Ok(report)
}
