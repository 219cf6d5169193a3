//! Session streams: a synthetic Gaussian mixture on the sphere and an embedding-table CSV
//! reader/writer for running the protocol on exported features.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, normalized, Matrix, Rng};

/// Attempts allowed when placing separated class means.
pub const SEPARATION_BUDGET: usize = 100_000;

/// Class schedule and sampling parameters for a synthetic stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub total_classes: usize,
    pub base_classes: usize,
    /// Novel classes introduced at each incremental stage; its length is the stage count `T`.
    pub new_per_stage: Vec<usize>,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    /// Fraction of each incremental training set drawn from already known classes.
    pub old_class_mix_fraction: f64,
    pub input_dim: usize,
    /// Minimum pairwise angle between class means, in degrees.
    pub class_separation_deg: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            total_classes: 20,
            base_classes: 10,
            new_per_stage: vec![5, 5],
            samples_per_class_train: 40,
            samples_per_class_test: 20,
            old_class_mix_fraction: 0.5,
            input_dim: 32,
            class_separation_deg: 60.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn stages(&self) -> usize {
        self.new_per_stage.len()
    }

    pub fn validate(&self) -> Result<()> {
        let scheduled = self.base_classes + self.new_per_stage.iter().sum::<usize>();
        if scheduled > self.total_classes {
            return Err(Error::Argument(format!(
                "schedule needs {scheduled} classes but total_classes = {}",
                self.total_classes
            )));
        }
        if self.base_classes == 0 {
            return Err(Error::Argument("base_classes must be at least 1".into()));
        }
        if self.samples_per_class_train == 0 || self.samples_per_class_test == 0 {
            return Err(Error::Argument("samples per class must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.old_class_mix_fraction) {
            return Err(Error::Argument(format!(
                "old_class_mix_fraction = {} must lie in [0, 1)",
                self.old_class_mix_fraction
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Argument("input_dim must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Argument("noise_sigma must be non-negative".into()));
        }
        if !(0.0..=180.0).contains(&self.class_separation_deg) {
            return Err(Error::Argument("class_separation_deg must lie in [0, 180]".into()));
        }
        Ok(())
    }

    /// Class ids introduced at stage `t` (stage 0 is the base set).
    pub fn schedule(&self) -> Vec<Vec<usize>> {
        let mut next = 0;
        let mut out = Vec::with_capacity(self.stages() + 1);
        for count in std::iter::once(self.base_classes).chain(self.new_per_stage.iter().copied()) {
            out.push((next..next + count).collect());
            next += count;
        }
        out
    }
}

/// One split of a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub ids: Vec<String>,
    pub inputs: Matrix,
    /// Ground truth. For incremental training splits these are never shown to training code.
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageData {
    pub stage: usize,
    /// Classes known before this stage (`C_old^t`).
    pub classes_known: Vec<usize>,
    /// Classes first appearing at this stage (`C_new^t`; the base set at stage 0).
    pub classes_new: Vec<usize>,
    pub train: Split,
    pub test: Split,
}

impl StageData {
    /// Stage 0 training data is labeled; later stages are not.
    pub fn train_labeled(&self) -> bool {
        self.stage == 0
    }

    /// `C^t = C_old^t ∪ C_new^t`.
    pub fn classes_seen(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.classes_known.iter().chain(&self.classes_new).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Unit-sphere class means with pairwise angle at least `separation_deg`, by rejection.
pub fn sample_class_means(count: usize, dim: usize, separation_deg: f64, rng: &mut Rng) -> Result<Matrix> {
    let max_cos = separation_deg.to_radians().cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while means.len() < count {
        if attempts == SEPARATION_BUDGET {
            return Err(Error::InfeasibleSeparation {
                placed: means.len(),
                wanted: count,
                attempts,
            });
        }
        attempts += 1;
        let Some(candidate) = normalized(&rng.gaussian_vec(dim)) else {
            continue;
        };
        if means.iter().all(|m| dot(m, &candidate) <= max_cos + 1e-12) {
            means.push(candidate);
        }
    }
    Matrix::from_rows(&means)
}

fn draw_split(
    stage: usize,
    split: &str,
    per_class: &[(usize, usize)],
    means: &Matrix,
    sigma: f64,
    rng: &mut Rng,
) -> Result<Split> {
    let mut labels = Vec::new();
    for &(class, n) in per_class {
        labels.extend(std::iter::repeat_n(class, n));
    }
    rng.shuffle(&mut labels);
    let dim = means.cols();
    let mut data = Vec::with_capacity(labels.len() * dim);
    for &y in &labels {
        for &m in means.row(y) {
            data.push(m + sigma * rng.gaussian());
        }
    }
    Ok(Split {
        ids: (0..labels.len()).map(|i| format!("s{stage}-{split}-{i}")).collect(),
        inputs: Matrix::from_vec(labels.len(), dim, data)?,
        labels,
    })
}

/// Builds the full stage list for `spec`, deterministically per seed.
pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<StageData>> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let means = sample_class_means(
        spec.total_classes,
        spec.input_dim,
        spec.class_separation_deg,
        &mut root.fork(0),
    )?;
    let schedule = spec.schedule();
    let mut known: Vec<usize> = Vec::new();
    let mut stages = Vec::with_capacity(schedule.len());
    for (t, new) in schedule.into_iter().enumerate() {
        let mut rng = root.fork(1 + t as u64);
        let mut train_counts: Vec<(usize, usize)> = new.iter().map(|&c| (c, spec.samples_per_class_train)).collect();
        if t > 0 && !known.is_empty() {
            let n_new = new.len() * spec.samples_per_class_train;
            let f = spec.old_class_mix_fraction;
            let n_old = (n_new as f64 * f / (1.0 - f)).round() as usize;
            let mut per_old = vec![0usize; known.len()];
            for i in 0..n_old {
                per_old[i % known.len()] += 1;
            }
            train_counts.extend(known.iter().copied().zip(per_old).filter(|&(_, n)| n > 0));
        }
        let seen: Vec<usize> = known.iter().chain(&new).copied().collect();
        let test_counts: Vec<(usize, usize)> = seen.iter().map(|&c| (c, spec.samples_per_class_test)).collect();
        let train = draw_split(t, "train", &train_counts, &means, spec.noise_sigma, &mut rng)?;
        let test = draw_split(t, "test", &test_counts, &means, spec.noise_sigma, &mut rng)?;
        stages.push(StageData {
            stage: t,
            classes_known: known.clone(),
            classes_new: new.clone(),
            train,
            test,
        });
        known.extend(new);
        known.sort_unstable();
    }
    Ok(stages)
}

/// Writes stages as `id,stage,split,label,f0,…,f{d-1}` with 17 significant digits.
pub fn write_embeddings<W: Write>(stages: &[StageData], w: W) -> Result<()> {
    let dim = stages
        .first()
        .map_or(0, |s| s.train.inputs.cols().max(s.test.inputs.cols()));
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["id", "stage", "split", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("f{i}")));
    out.write_record(&header).map_err(csv_err)?;
    for s in stages {
        for (name, split) in [("train", &s.train), ("test", &s.test)] {
            for i in 0..split.len() {
                let mut rec = vec![
                    split.ids[i].clone(),
                    s.stage.to_string(),
                    name.to_string(),
                    split.labels[i].to_string(),
                ];
                rec.extend(split.inputs.row(i).iter().map(|x| format!("{x:.16e}")));
                out.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

#[derive(Default)]
struct PendingSplit {
    ids: Vec<String>,
    labels: Vec<usize>,
    data: Vec<f64>,
}

/// Reads an embedding table and groups rows by stage and split.
pub fn load_embeddings<R: Read>(r: R) -> Result<Vec<StageData>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header = reader.headers().map_err(csv_err)?.clone();
    let fixed = ["id", "stage", "split", "label"];
    for (i, name) in fixed.iter().enumerate() {
        if header.get(i).map(str::trim) != Some(*name) {
            return Err(Error::Parse {
                line: 1,
                message: format!("column {i} must be `{name}`"),
            });
        }
    }
    let dim = header.len() - fixed.len();
    for (i, name) in header.iter().skip(fixed.len()).enumerate() {
        if name.trim() != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("feature column {i} must be `f{i}`, found `{name}`"),
            });
        }
    }
    if dim == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut groups: BTreeMap<usize, (PendingSplit, PendingSplit)> = BTreeMap::new();
    let mut first_line: BTreeMap<usize, u64> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse { line, message };
        let found = rec.len().saturating_sub(fixed.len());
        if found != dim {
            return Err(Error::DimensionMismatch {
                line,
                expected: dim,
                found,
            });
        }
        let id = rec[0].trim().to_string();
        if !ids.insert(id.clone()) {
            return Err(bad(format!("duplicate id `{id}`")));
        }
        let stage: usize = rec[1].trim().parse().map_err(|e| bad(format!("bad stage: {e}")))?;
        let label: usize = rec[3].trim().parse().map_err(|e| bad(format!("bad label: {e}")))?;
        let entry = groups.entry(stage).or_default();
        first_line.entry(stage).or_insert(line);
        let target = match rec[2].trim() {
            "train" => &mut entry.0,
            "test" => &mut entry.1,
            other => return Err(bad(format!("split must be `train` or `test`, found `{other}`"))),
        };
        for v in rec.iter().skip(fixed.len()) {
            target.data.push(
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("bad feature `{v}`: {e}")))?,
            );
        }
        target.ids.push(id);
        target.labels.push(label);
    }
    if groups.is_empty() {
        return Err(Error::Empty("embedding table has no rows".into()));
    }
    for (expected, (&stage, _)) in groups.iter().enumerate() {
        if stage != expected {
            return Err(Error::UnknownStage {
                line: first_line[&stage],
                stage,
            });
        }
    }

    let mut known: BTreeSet<usize> = BTreeSet::new();
    let mut stages = Vec::with_capacity(groups.len());
    for (stage, (train, test)) in groups {
        let present: BTreeSet<usize> = train.labels.iter().chain(&test.labels).copied().collect();
        let new: Vec<usize> = present.difference(&known).copied().collect();
        let to_split = |p: PendingSplit| -> Result<Split> {
            Ok(Split {
                inputs: Matrix::from_vec(p.ids.len(), dim, p.data)?,
                ids: p.ids,
                labels: p.labels,
            })
        };
        stages.push(StageData {
            stage,
            classes_known: known.iter().copied().collect(),
            classes_new: new.clone(),
            train: to_split(train)?,
            test: to_split(test)?,
        });
        known.extend(new);
    }
    Ok(stages)
}
