//! Runs one algorithm over a benchmark and writes a resumable report.
//!
//! Per-item records are appended to `records.jsonl` as they finish; a rerun
//! into the same directory skips items already scored and retries errored
//! ones. When the run completes the journal is rewritten in dataset order,
//! so an interrupted-then-resumed run leaves the same bytes as an
//! uninterrupted one.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::dataset::BenchmarkItem;
use super::metrics::Metric;
use crate::algorithms::{run_inference, Algorithm, InferenceContext, InstructionSelection, TrackSummary};
use crate::digest::{json_digest, sha256_hex};
use crate::generator::{GenParams, Generator};
use crate::instruction::{format_choices, Bindings, InstructionError, InstructionStore, PoolKind};
use crate::retriever::{RetrievalError, Retriever};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const FINGERPRINT_FILE: &str = "fingerprint.json";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
    #[error("{path} holds records from a different run configuration; remove it or pick another output directory")]
    ForeignRun { path: String },
    #[error("corrupt record journal {path} at line {line}: {reason}")]
    Journal { path: String, line: usize, reason: String },
    #[error("runs are not aligned: `{component}` differs between {first} and {second}")]
    Misaligned {
        component: String,
        first: String,
        second: String,
    },
    #[error("nothing to evaluate: the dataset sample is empty")]
    EmptySample,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Digests of every component that shapes a run's outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentFingerprint {
    pub seed: String,
    pub generator_params: String,
    pub generator_endpoint: String,
    pub retriever: String,
    pub instructions: String,
    pub dataset: String,
    pub algorithm: String,
    /// Over seed, generator params, retriever, instructions and dataset:
    /// the parts every run in a comparison must share.
    pub shared: String,
    /// Over everything above.
    pub run: String,
}

impl AlignmentFingerprint {
    /// Shared components by name, in a fixed order.
    pub fn shared_components(&self) -> [(&'static str, &str); 5] {
        [
            ("seed", &self.seed),
            ("generator_params", &self.generator_params),
            ("retriever", &self.retriever),
            ("instructions", &self.instructions),
            ("dataset", &self.dataset),
        ]
    }
}

/// One algorithm wired to its backends, as evaluated.
pub struct RunComponents<'a> {
    pub algorithm: &'a dyn Algorithm,
    pub retriever: &'a dyn Retriever,
    pub generator: &'a dyn Generator,
    pub instructions: &'a InstructionStore,
    pub selection: &'a InstructionSelection,
    pub params: &'a GenParams,
    pub n_docs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub run_id: String,
    pub benchmark: String,
    pub metrics: Vec<Metric>,
    pub seed: u64,
    /// Run directory for the journal and report files; `None` keeps
    /// everything in memory.
    pub output_dir: Option<PathBuf>,
    /// Items evaluated concurrently; 1 is sequential.
    pub parallelism: usize,
    /// Echoed into the report so it can be re-run.
    pub effective_config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub question: String,
    pub answer: Option<String>,
    pub error: Option<String>,
    pub scores: BTreeMap<String, f64>,
    pub track: TrackSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub items: usize,
    pub scored: usize,
    pub errored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub algorithm: String,
    pub benchmark: String,
    pub fingerprint: AlignmentFingerprint,
    pub counts: RunCounts,
    /// Metric name → mean over scored items.
    pub aggregates: BTreeMap<String, f64>,
    pub config: Value,
    #[serde(skip)]
    pub records: Vec<ItemRecord>,
}

impl EvalReport {
    /// Aggregates recomputed from the per-item records.
    pub fn recompute_aggregates(records: &[ItemRecord], metrics: &[Metric]) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for m in metrics {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.error.is_none())
                .filter_map(|r| r.scores.get(m.name()).copied())
                .collect();
            if !vals.is_empty() {
                out.insert(m.name().to_string(), vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }
}

/// Computes the fingerprint without running anything.
pub fn fingerprint(
    components: &RunComponents<'_>,
    items: &[BenchmarkItem],
    settings: &EvalSettings,
) -> Result<AlignmentFingerprint, EvalError> {
    let sel = components.selection;
    let text_of = |pool, name: &str| components.instructions.get(pool, name).map(|t| t.text().to_string());
    let instructions = json_digest(&json!({
        "system": { "name": sel.system, "text": text_of(PoolKind::System, &sel.system)? },
        "task": { "name": sel.task, "text": text_of(PoolKind::Task, &sel.task)? },
    }));
    let mut stages = BTreeMap::new();
    for stage in components.algorithm.stages() {
        let name = sel.template_for(stage);
        stages.insert(
            stage.to_string(),
            json!({ "name": name, "text": text_of(PoolKind::Algorithm, name)? }),
        );
    }
    let algorithm = json_digest(&json!({
        "name": components.algorithm.kind().name(),
        "parameters": components.algorithm.parameters(),
        "templates": stages,
    }));
    let seed = json_digest(&settings.seed);
    // the seed is a component of its own
    let mut params = serde_json::to_value(components.params).expect("params serialize");
    if let Some(map) = params.as_object_mut() {
        map.remove("seed");
    }
    let generator_params = json_digest(&params);
    let generator_endpoint = sha256_hex(components.generator.describe().as_bytes());
    let retriever = json_digest(&json!({
        "describe": components.retriever.describe()?,
        "n_docs": components.n_docs,
    }));
    let dataset = json_digest(&json!({
        "benchmark": settings.benchmark,
        "metrics": settings.metrics,
        "items": items,
    }));
    let shared = json_digest(&[&seed, &generator_params, &retriever, &instructions, &dataset]);
    let run = json_digest(&[&shared, &generator_endpoint, &algorithm]);
    Ok(AlignmentFingerprint {
        seed,
        generator_params,
        generator_endpoint,
        retriever,
        instructions,
        dataset,
        algorithm,
        shared,
        run,
    })
}

/// Fails on the first shared component that differs between two runs.
pub fn check_alignment(runs: &[(String, AlignmentFingerprint)]) -> Result<(), EvalError> {
    let Some((first_id, first)) = runs.first() else {
        return Ok(());
    };
    for (id, fp) in &runs[1..] {
        for ((component, a), (_, b)) in first.shared_components().iter().zip(fp.shared_components()) {
            if *a != b {
                return Err(EvalError::Misaligned {
                    component: component.to_string(),
                    first: first_id.clone(),
                    second: id.clone(),
                });
            }
        }
    }
    Ok(())
}

fn item_bindings(item: &BenchmarkItem) -> Bindings {
    let mut b = Bindings::new();
    if let Some(choices) = &item.choices {
        let pairs: Vec<(String, String)> = choices.iter().map(|c| (c.label.clone(), c.text.clone())).collect();
        b.insert("choices".into(), format_choices(&pairs));
    }
    b
}

/// Runs and scores a single item; failures become errored records.
pub fn evaluate_item(components: &RunComponents<'_>, item: &BenchmarkItem, metrics: &[Metric]) -> ItemRecord {
    let ctx = InferenceContext::new(
        components.retriever,
        components.generator,
        components.instructions,
        components.selection,
        components.params,
        components.n_docs,
    )
    .with_bindings(item_bindings(item));
    let mut record = ItemRecord {
        id: item.id.clone(),
        question: item.question.clone(),
        answer: None,
        error: None,
        scores: BTreeMap::new(),
        track: TrackSummary {
            retrievals: 0,
            generations: 0,
            decisions: Vec::new(),
            retrieved_ids: Vec::new(),
        },
    };
    match run_inference(components.algorithm, &ctx, &item.question) {
        Ok(inference) => {
            record.track = inference.track.summary();
            for m in metrics {
                match m.score(&inference.answer, item) {
                    Ok(v) => {
                        record.scores.insert(m.name().to_string(), v);
                    }
                    Err(e) => {
                        record.error = Some(format!("scoring {m}: {e}"));
                        record.scores.clear();
                        break;
                    }
                }
            }
            record.answer = Some(inference.answer);
        }
        Err(failure) => {
            record.track = failure.track.summary();
            record.error = Some(failure.error.to_string());
        }
    }
    record
}

struct Journal {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl Journal {
    fn append(&self, record: &ItemRecord) -> Result<(), EvalError> {
        let line = serde_json::to_string(record).expect("records serialize");
        let mut w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        writeln!(w, "{line}")
            .and_then(|()| w.flush())
            .map_err(io_err(&self.path))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn records_bytes(records: &[ItemRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(serde_json::to_string(r).expect("records serialize").as_bytes());
        out.push(b'\n');
    }
    out
}

/// Reads finished records, tolerating an unterminated last line.
fn read_journal(path: &Path) -> Result<Vec<ItemRecord>, EvalError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ItemRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => {
                log::warn!("{}: dropping unterminated final record", path.display());
            }
            Err(e) => {
                return Err(EvalError::Journal {
                    path: path.display().to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Prepares the run directory and returns the records that can be reused.
fn open_run_dir(
    dir: &Path,
    fp: &AlignmentFingerprint,
    items: &[BenchmarkItem],
) -> Result<(Vec<ItemRecord>, Journal), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let fp_path = dir.join(FINGERPRINT_FILE);
    let records_path = dir.join(RECORDS_FILE);
    match fs::read_to_string(&fp_path) {
        Ok(existing) => {
            let prior: AlignmentFingerprint = serde_json::from_str(&existing).map_err(|e| EvalError::Journal {
                path: fp_path.display().to_string(),
                line: 1,
                reason: e.to_string(),
            })?;
            if prior.run != fp.run {
                return Err(EvalError::ForeignRun {
                    path: dir.display().to_string(),
                });
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if records_path.exists() {
                return Err(EvalError::ForeignRun {
                    path: dir.display().to_string(),
                });
            }
            let body = serde_json::to_string_pretty(fp).expect("fingerprint serializes");
            write_atomic(&fp_path, format!("{body}\n").as_bytes())?;
        }
        Err(e) => return Err(io_err(&fp_path)(e)),
    }
    let wanted: HashMap<&str, ()> = items.iter().map(|i| (i.id.as_str(), ())).collect();
    let mut seen = HashMap::new();
    let kept: Vec<ItemRecord> = read_journal(&records_path)?
        .into_iter()
        .filter(|r| r.error.is_none() && wanted.contains_key(r.id.as_str()))
        .filter(|r| seen.insert(r.id.clone(), ()).is_none())
        .collect();
    write_atomic(&records_path, &records_bytes(&kept))?;
    let file = OpenOptions::new()
        .append(true)
        .open(&records_path)
        .map_err(io_err(&records_path))?;
    Ok((
        kept,
        Journal {
            path: records_path,
            writer: Mutex::new(BufWriter::new(file)),
        },
    ))
}

/// Evaluates every item and assembles the report.
pub fn evaluate_run(
    components: &RunComponents<'_>,
    items: &[BenchmarkItem],
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let fp = fingerprint(components, items, settings)?;
    let (reused, journal) = match &settings.output_dir {
        Some(dir) => {
            let (r, j) = open_run_dir(dir, &fp, items)?;
            (r, Some(j))
        }
        None => (Vec::new(), None),
    };
    if !reused.is_empty() {
        log::info!(
            "{}: resuming, {} of {} items already scored",
            settings.run_id,
            reused.len(),
            items.len()
        );
    }
    let mut done: HashMap<String, ItemRecord> = reused.into_iter().map(|r| (r.id.clone(), r)).collect();
    let pending: Vec<&BenchmarkItem> = items.iter().filter(|i| !done.contains_key(&i.id)).collect();
    let fresh: Mutex<Vec<ItemRecord>> = Mutex::new(Vec::with_capacity(pending.len()));
    let failure: Mutex<Option<EvalError>> = Mutex::new(None);
    let run_one = |item: &BenchmarkItem| {
        let record = evaluate_item(components, item, &settings.metrics);
        if let Some(e) = &record.error {
            log::warn!("{} item {}: {e}", settings.run_id, record.id);
        }
        if let Some(j) = &journal {
            if let Err(e) = j.append(&record) {
                failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
            }
        }
        fresh.lock().unwrap_or_else(|p| p.into_inner()).push(record);
    };
    let workers = settings.parallelism.max(1).min(pending.len().max(1));
    if workers == 1 {
        for item in &pending {
            run_one(item);
        }
    } else {
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(item) = pending.get(i) else { break };
                    run_one(item);
                });
            }
        });
    }
    if let Some(e) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(e);
    }
    for r in fresh.into_inner().unwrap_or_else(|p| p.into_inner()) {
        done.insert(r.id.clone(), r);
    }
    let records: Vec<ItemRecord> = items
        .iter()
        .map(|i| done.remove(&i.id).expect("every item has a record"))
        .collect();
    let errored = records.iter().filter(|r| r.error.is_some()).count();
    let report = EvalReport {
        run_id: settings.run_id.clone(),
        algorithm: components.algorithm.kind().name().to_string(),
        benchmark: settings.benchmark.clone(),
        aggregates: EvalReport::recompute_aggregates(&records, &settings.metrics),
        counts: RunCounts {
            items: records.len(),
            scored: records.len() - errored,
            errored,
        },
        fingerprint: fp,
        config: settings.effective_config.clone(),
        records,
    };
    if let (Some(dir), Some(journal)) = (&settings.output_dir, journal) {
        drop(journal);
        write_report_files(dir, &report, &settings.metrics)?;
    }
    Ok(report)
}

fn write_report_files(dir: &Path, report: &EvalReport, metrics: &[Metric]) -> Result<(), EvalError> {
    write_atomic(&dir.join(RECORDS_FILE), &records_bytes(&report.records))?;
    let body = serde_json::to_string_pretty(report).expect("report serializes");
    write_atomic(&dir.join(REPORT_FILE), format!("{body}\n").as_bytes())?;
    let (tsv, text) = aggregate_tables(std::slice::from_ref(report), metrics);
    write_atomic(&dir.join("aggregates.tsv"), tsv.as_bytes())?;
    write_atomic(&dir.join("aggregates.txt"), text.as_bytes())
}

/// One row per report: TSV and a space-aligned rendering of the same table.
pub fn aggregate_tables(reports: &[EvalReport], metrics: &[Metric]) -> (String, String) {
    let mut header: Vec<String> = ["run", "algorithm", "benchmark", "items", "errored"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(metrics.iter().map(|m| m.name().to_string()));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![
            r.run_id.clone(),
            r.algorithm.clone(),
            r.benchmark.clone(),
            r.counts.items.to_string(),
            r.counts.errored.to_string(),
        ];
        row.extend(metrics.iter().map(|m| {
            r.aggregates
                .get(m.name())
                .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
        }));
        rows.push(row);
    }
    let tsv: String = rows.iter().map(|r| format!("{}\n", r.join("\t"))).collect();
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let text: String = rows
        .iter()
        .map(|r| {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c < 3 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            format!("{}\n", cells.join("  ").trim_end())
        })
        .collect();
    (tsv, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, err: bool, acc: f64) -> ItemRecord {
        ItemRecord {
            id: id.into(),
            question: "q".into(),
            answer: Some("a".into()),
            error: err.then(|| "boom".to_string()),
            scores: [("acc".to_string(), acc)].into_iter().collect(),
            track: TrackSummary {
                retrievals: 0,
                generations: 1,
                decisions: vec![],
                retrieved_ids: vec![],
            },
        }
    }

    #[test]
    fn aggregates_skip_errored() {
        let recs = vec![record("1", false, 1.0), record("2", true, 1.0), record("3", false, 0.0)];
        let agg = EvalReport::recompute_aggregates(&recs, &[Metric::Acc, Metric::F1]);
        assert_eq!(agg["acc"], 0.5);
        assert!(!agg.contains_key("f1"));
    }

    #[test]
    fn journal_tolerates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let mut bytes = records_bytes(&[record("1", false, 1.0)]);
        bytes.extend_from_slice(b"{\"id\":\"2\",\"quest");
        fs::write(&p, &bytes).unwrap();
        assert_eq!(read_journal(&p).unwrap().len(), 1);
        fs::write(&p, b"garbage\n{}\n").unwrap();
        assert!(matches!(read_journal(&p), Err(EvalError::Journal { line: 1, .. })));
    }

    #[test]
    fn tables_align() {
        let report = EvalReport {
            run_id: "popqa-direct".into(),
            algorithm: "direct".into(),
            benchmark: "popqa".into(),
            fingerprint: AlignmentFingerprint {
                seed: String::new(),
                generator_params: String::new(),
                generator_endpoint: String::new(),
                retriever: String::new(),
                instructions: String::new(),
                dataset: String::new(),
                algorithm: String::new(),
                shared: String::new(),
                run: String::new(),
            },
            counts: RunCounts {
                items: 2,
                scored: 2,
                errored: 0,
            },
            aggregates: [("acc".to_string(), 0.5)].into_iter().collect(),
            config: Value::Null,
            records: vec![],
        };
        let (tsv, text) = aggregate_tables(&[report], &[Metric::Acc, Metric::F1]);
        assert_eq!(
            tsv,
            "run\talgorithm\tbenchmark\titems\terrored\tacc\tf1\npopqa-direct\tdirect\tpopqa\t2\t0\t0.5000\t-\n"
        );
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0].len(), lines[1].len());
    }
}
