use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use etfcd_core::eval::nc_diagnostics;
use etfcd_core::report::{write_nc_trace_csv, write_stages_csv, SummaryRecord};
use etfcd_core::{
    generate_stream, load_embeddings, run_protocol, AllocationLedger, Encoder, EtfFrame, Matrix, NcDiagnostics,
    ProtocolRun, StageData,
};

use crate::config::{ConfigError, RunConfig, StreamSource};

pub const ABLATION_HEADER: [&str; 6] = [
    "sup_etf_align",
    "unsup_etf_align",
    "seeds",
    "acc_all",
    "acc_old",
    "acc_new",
];
pub const ALPHA_SWEEP_HEADER: [&str; 5] = ["alpha", "seeds", "acc_all", "acc_old", "acc_new"];

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: etfcd_core::Error },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Runtime(#[from] etfcd_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Input { .. } => 2,
            Failure::Infeasible(_) => 4,
            Failure::Runtime(_) | Failure::Io { .. } => 3,
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |source| Failure::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_at(path))
}

fn infeasible_or_runtime(e: etfcd_core::Error) -> Failure {
    match e {
        etfcd_core::Error::InfeasibleSeparation { .. } | etfcd_core::Error::Capacity { .. } => {
            Failure::Infeasible(e.to_string())
        }
        other => Failure::Runtime(other),
    }
}

fn load_stream(cfg: &RunConfig) -> Outcome<Vec<StageData>> {
    match &cfg.stream {
        StreamSource::Synthetic(spec) => generate_stream(spec).map_err(infeasible_or_runtime),
        StreamSource::Embeddings(path) => {
            let file = File::open(path).map_err(|e| Failure::Input {
                path: path.clone(),
                source: e.into(),
            })?;
            load_embeddings(BufReader::new(file)).map_err(|source| Failure::Input {
                path: path.clone(),
                source,
            })
        }
    }
}

fn execute(cfg: &RunConfig) -> Outcome<ProtocolRun> {
    let stream = load_stream(cfg)?;
    let classes: BTreeSet<usize> = stream
        .iter()
        .flat_map(|s| s.classes_new.iter().chain(&s.classes_known).copied())
        .collect();
    let count = cfg.session.frame_count.unwrap_or(classes.len());
    if count > cfg.session.embed_dim {
        return Err(Failure::Infeasible(format!(
            "{count} prototypes do not fit in embed_dim = {}",
            cfg.session.embed_dim
        )));
    }
    if classes.len() > count {
        return Err(Failure::Infeasible(format!(
            "{} classes but only {count} prototypes",
            classes.len()
        )));
    }
    run_protocol(&cfg.session, &stream).map_err(infeasible_or_runtime)
}

fn ensure_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

pub fn run(cfg: &RunConfig) -> Outcome<()> {
    ensure_dir(&cfg.output_dir)?;
    let started = Instant::now();
    let result = execute(cfg)?;
    let wall = started.elapsed().as_secs_f64();
    let dir = &cfg.output_dir;

    let path = dir.join("stages.csv");
    write_stages_csv(&result.reports, create(&path)?)?;
    let path = dir.join("nc_trace.csv");
    write_nc_trace_csv(&result.nc_trace(), create(&path)?)?;
    let path = dir.join("summary.json");
    SummaryRecord::new(result.summary, cfg.seed, wall, cfg).write(create(&path)?)?;
    let path = dir.join("frame.csv");
    result.state.frame.write_csv(create(&path)?)?;
    let path = dir.join("encoder.ckpt");
    result.state.encoder.save(create(&path)?)?;

    let s = result.summary;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
    eprintln!(
        "seed {}: {} stages, M_f {} M_d {} ({wall:.1} s) -> {}",
        cfg.seed,
        result.reports.len(),
        fmt(s.m_f),
        fmt(s.m_d),
        dir.display()
    );
    Ok(())
}

/// Mean All/Old/New over the incremental stages of one run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageMeans {
    pub all: f64,
    pub old: f64,
    pub new: f64,
}

impl StageMeans {
    pub fn of(run: &ProtocolRun) -> Outcome<StageMeans> {
        let inc: Vec<_> = run.reports.iter().filter(|r| r.t > 0).collect();
        if inc.is_empty() {
            return Err(Failure::Runtime(etfcd_core::Error::Empty(
                "no incremental stages".into(),
            )));
        }
        let n = inc.len() as f64;
        Ok(StageMeans {
            all: inc.iter().map(|r| r.acc_all).sum::<f64>() / n,
            old: inc.iter().map(|r| r.acc_old).sum::<f64>() / n,
            new: inc.iter().map(|r| r.acc_new.unwrap_or(0.0)).sum::<f64>() / n,
        })
    }

    fn average(items: &[StageMeans]) -> StageMeans {
        let n = items.len() as f64;
        StageMeans {
            all: items.iter().map(|m| m.all).sum::<f64>() / n,
            old: items.iter().map(|m| m.old).sum::<f64>() / n,
            new: items.iter().map(|m| m.new).sum::<f64>() / n,
        }
    }
}

/// Runs every config on its own thread and returns results in input order.
fn run_all(configs: &[RunConfig]) -> Outcome<Vec<StageMeans>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|cfg| scope.spawn(move || execute(cfg).and_then(|r| StageMeans::of(&r))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn cells_over_seeds(base: &RunConfig, cells: &[RunConfig]) -> Outcome<Vec<StageMeans>> {
    let seeds = base.seeds();
    let jobs: Vec<RunConfig> = cells
        .iter()
        .flat_map(|cell| seeds.iter().map(move |&s| cell.with_seed(s)))
        .collect();
    let means = run_all(&jobs)?;
    Ok(means.chunks(seeds.len()).map(StageMeans::average).collect())
}

pub fn ablate(cfg: &RunConfig) -> Outcome<()> {
    ensure_dir(&cfg.output_dir)?;
    let grid = [(true, true), (true, false), (false, true), (false, false)];
    let cells: Vec<RunConfig> = grid
        .iter()
        .map(|&(sup, unsup)| {
            let mut c = cfg.clone();
            c.session.sup_etf_align = sup;
            c.session.unsup_etf_align = unsup;
            c
        })
        .collect();
    let means = cells_over_seeds(cfg, &cells)?;

    let path = cfg.output_dir.join("ablation.csv");
    let mut out = csv::Writer::from_writer(create(&path)?);
    let csv_err = |e: csv::Error| Failure::Io {
        path: path.clone(),
        source: e.into(),
    };
    out.write_record(ABLATION_HEADER).map_err(csv_err)?;
    for (&(sup, unsup), m) in grid.iter().zip(&means) {
        out.write_record([
            sup.to_string(),
            unsup.to_string(),
            cfg.repeats.to_string(),
            m.all.to_string(),
            m.old.to_string(),
            m.new.to_string(),
        ])
        .map_err(csv_err)?;
        eprintln!(
            "sup {sup:<5} unsup {unsup:<5} all {:.2} old {:.2} new {:.2}",
            m.all, m.old, m.new
        );
    }
    out.flush().map_err(io_at(&path))?;
    Ok(())
}

pub fn sweep_alpha(cfg: &RunConfig) -> Outcome<()> {
    ensure_dir(&cfg.output_dir)?;
    let cells: Vec<RunConfig> = cfg
        .alphas
        .iter()
        .map(|&a| {
            let mut c = cfg.clone();
            c.session.alpha = a;
            c
        })
        .collect();
    let means = cells_over_seeds(cfg, &cells)?;

    let path = cfg.output_dir.join("alpha_sweep.csv");
    let mut out = csv::Writer::from_writer(create(&path)?);
    let csv_err = |e: csv::Error| Failure::Io {
        path: path.clone(),
        source: e.into(),
    };
    out.write_record(ALPHA_SWEEP_HEADER).map_err(csv_err)?;
    for (a, m) in cfg.alphas.iter().zip(&means) {
        out.write_record([
            a.to_string(),
            cfg.repeats.to_string(),
            m.all.to_string(),
            m.old.to_string(),
            m.new.to_string(),
        ])
        .map_err(csv_err)?;
        eprintln!("alpha {a:<4} all {:.2} old {:.2} new {:.2}", m.all, m.old, m.new);
    }
    out.flush().map_err(io_at(&path))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct FrameReport {
    pub dim: usize,
    pub count: usize,
    pub seed: u64,
    pub gram_deviation: f64,
    pub centroid_norm: f64,
}

#[derive(Debug, Serialize)]
pub struct DiagReport {
    pub frame: FrameReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nc: Option<NcDiagnostics>,
}

fn read_input<T>(path: &Path, parse: impl FnOnce(BufReader<File>) -> etfcd_core::Result<T>) -> Outcome<T> {
    let file = File::open(path).map_err(|e| Failure::Input {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    parse(BufReader::new(file)).map_err(|source| Failure::Input {
        path: path.to_path_buf(),
        source,
    })
}

/// Frame geometry, plus collapse statistics when an embedding table is given. Each true label
/// takes the smallest free prototype in label order and the prototypes serve as the head.
pub fn diag(frame_path: &Path, embeddings: Option<&Path>, checkpoint: Option<&Path>) -> Outcome<DiagReport> {
    let frame = read_input(frame_path, EtfFrame::read_csv)?;
    let report = FrameReport {
        dim: frame.dim(),
        count: frame.count(),
        seed: frame.seed(),
        gram_deviation: frame.gram_deviation(),
        centroid_norm: frame.centroid_norm(),
    };
    let Some(emb_path) = embeddings else {
        return Ok(DiagReport {
            frame: report,
            nc: None,
        });
    };

    let stages = read_input(emb_path, load_embeddings)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for split in stages.iter().flat_map(|s| [&s.train, &s.test]) {
        rows.extend(split.inputs.row_iter().map(<[f64]>::to_vec));
        labels.extend(&split.labels);
    }
    let mut points = Matrix::from_rows(&rows)?;
    if let Some(ckpt) = checkpoint {
        let encoder = read_input(ckpt, Encoder::load)?;
        points = encoder.embed(&points)?;
    }
    if points.cols() != frame.dim() {
        return Err(Failure::Input {
            path: emb_path.to_path_buf(),
            source: etfcd_core::Error::Dimension(format!(
                "embeddings have {} columns, frame has dimension {}",
                points.cols(),
                frame.dim()
            )),
        });
    }

    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let mut ledger = AllocationLedger::new(frame.count());
    for &c in &classes {
        ledger.assign(c).map_err(infeasible_or_runtime)?;
    }
    let width = classes.last().map_or(0, |&c| c + 1);
    let mut weights = Matrix::zeros(frame.dim(), width);
    for &c in &classes {
        let p = frame.prototype(ledger.require(c)?);
        for (i, v) in p.into_iter().enumerate() {
            weights[(i, c)] = v;
        }
    }
    let nc = nc_diagnostics(&points, &labels, &frame, &ledger, &weights).map_err(infeasible_or_runtime)?;
    Ok(DiagReport {
        frame: report,
        nc: Some(nc),
    })
}

pub fn print_json<T: Serialize>(value: &T) -> Outcome<()> {
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    serde_json::to_writer_pretty(&mut lock, value).map_err(|e| Failure::Io {
        path: "<stdout>".into(),
        source: e.into(),
    })?;
    writeln!(lock).map_err(io_at(Path::new("<stdout>")))
}
