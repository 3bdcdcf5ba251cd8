//! Runs one evaluation: extract, launch, drive the protocol, score.
//!
//! Every failure is expressed through the returned record's error class;
//! nothing here panics or returns an error to the worker.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::value::RawValue;
use serde_json::Value;

use super::dataset::DatasetRef;
use super::metrics::{score, Metric, ScoreError};
use super::protocol::{Exit, ModelProcess, ProtocolError};
use super::record::{ErrorClass, EvalStatus, EvaluationRecord};
use super::sandbox::SandboxPolicy;
use crate::blobstore::BlobStore;
use crate::bundle::{BundleContents, BundleLimits, SubmissionBundle};
use crate::clock::Clock;

/// Everything a run needs besides the record itself.
pub struct RunContext<'a> {
    pub blobs: &'a BlobStore,
    pub scratch_root: &'a Path,
    pub policy: &'a SandboxPolicy,
    pub clock: &'a dyn Clock,
}

struct Failure {
    class: ErrorClass,
    detail: String,
}

impl Failure {
    fn new(class: ErrorClass, detail: impl Into<String>) -> Self {
        Self { class, detail: detail.into() }
    }
}

/// Classifies a child that went away on its own.
fn classify_exit(exit: Option<Exit>, clean_exit_class: ErrorClass, what: &str) -> Failure {
    match exit {
        Some(e) if e.hit_resource_limit() => Failure::new(ErrorClass::ResourceLimit, format!("{what}: killed by {e:?}")),
        Some(Exit::Code(0)) => Failure::new(clean_exit_class, format!("{what}: process exited with code 0")),
        Some(e) => Failure::new(ErrorClass::NonzeroExit, format!("{what}: process ended with {e:?}")),
        None => Failure::new(clean_exit_class, format!("{what}: stdout closed")),
    }
}

fn classify_protocol(err: ProtocolError, process: &mut ModelProcess, clean_exit_class: ErrorClass) -> Failure {
    match err {
        ProtocolError::StartupTimeout => Failure::new(ErrorClass::StartupTimeout, err.to_string()),
        ProtocolError::RecordTimeout => Failure::new(ErrorClass::RecordTimeout, err.to_string()),
        ProtocolError::TotalTimeout => Failure::new(ErrorClass::ResourceLimit, err.to_string()),
        ProtocolError::Violation(_) => Failure::new(ErrorClass::ProtocolViolation, err.to_string()),
        ProtocolError::MissingOutput(_) => Failure::new(ErrorClass::IncompletePredictions, err.to_string()),
        ProtocolError::Closed | ProtocolError::StdinClosed(_) => {
            classify_exit(process.reap(Duration::from_secs(2)), clean_exit_class, &err.to_string())
        }
    }
}

/// Renders predictions as NDJSON `{"id":..,"output":..}` lines, keeping each
/// output's bytes exactly as the model wrote them.
pub fn predictions_ndjson(predictions: &[(String, Box<RawValue>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (id, output) in predictions {
        out.extend_from_slice(format!("{{\"id\":{},\"output\":{}}}\n", Value::String(id.clone()), output.get()).as_bytes());
    }
    out
}

/// Parses the NDJSON written by [`predictions_ndjson`] back into raw outputs.
pub fn parse_predictions(bytes: &[u8]) -> Result<Vec<(String, Box<RawValue>)>, serde_json::Error> {
    #[derive(serde::Deserialize)]
    struct Line {
        id: String,
        output: Box<RawValue>,
    }
    let mut out = Vec::new();
    for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        let l: Line = serde_json::from_slice(line)?;
        out.push((l.id, l.output));
    }
    Ok(out)
}

struct Outcome {
    result: Result<(BTreeMap<String, f64>, Vec<(String, Box<RawValue>)>), Failure>,
    stderr: Option<Vec<u8>>,
}

fn drive(
    bundle: &SubmissionBundle,
    dataset: &DatasetRef,
    metrics: &[Metric],
    ctx: &RunContext<'_>,
) -> Outcome {
    let internal = |detail: String| Outcome { result: Err(Failure::new(ErrorClass::Internal, detail)), stderr: None };
    let data = match dataset.load() {
        Ok(d) => d,
        Err(e) => return internal(format!("dataset {}: {e}", dataset.dataset_id)),
    };
    let contents = match ctx.blobs.get(&bundle.blob_digest).map_err(|e| e.to_string()).and_then(|blob| {
        BundleContents::open(&blob, &BundleLimits::default()).map_err(|e| e.to_string())
    }) {
        Ok(c) => c,
        Err(e) => return internal(format!("bundle {}: {e}", bundle.bundle_id)),
    };
    if let Err(e) = std::fs::create_dir_all(ctx.scratch_root) {
        return internal(format!("scratch root: {e}"));
    }
    let scratch = match tempfile::Builder::new().prefix("eval-").tempdir_in(ctx.scratch_root) {
        Ok(d) => d,
        Err(e) => return internal(format!("scratch dir: {e}")),
    };
    let root = scratch.path().join("bundle");
    if let Err(e) = contents.extract_to(&root) {
        return internal(format!("extract: {e}"));
    }

    let mut process = match ModelProcess::spawn(&bundle.manifest.entrypoints.predict, &root, ctx.policy) {
        Ok(p) => p,
        Err(e) => {
            return Outcome {
                result: Err(Failure::new(ErrorClass::NonzeroExit, format!("could not start predict entrypoint: {e}"))),
                stderr: None,
            }
        }
    };

    let result = (|| {
        process
            .await_ready()
            .map_err(|e| classify_protocol(e, &mut process, ErrorClass::ProtocolViolation))?;
        let mut predictions = Vec::with_capacity(data.len());
        for (id, input) in &data.inputs {
            let output = process
                .request(id, &input.to_string())
                .map_err(|e| classify_protocol(e, &mut process, ErrorClass::IncompletePredictions))?;
            predictions.push((id.clone(), output));
        }
        match process.finish() {
            Exit::Code(0) => {}
            Exit::Killed => {
                return Err(Failure::new(ErrorClass::NonzeroExit, "process did not exit after stdin was closed"))
            }
            e if e.hit_resource_limit() => return Err(Failure::new(ErrorClass::ResourceLimit, format!("killed by {e:?}"))),
            e => return Err(Failure::new(ErrorClass::NonzeroExit, format!("process ended with {e:?}"))),
        }

        let mut parsed = BTreeMap::new();
        for (id, raw) in &predictions {
            let v: Value = serde_json::from_str(raw.get())
                .map_err(|e| Failure::new(ErrorClass::ProtocolViolation, format!("output for {id:?}: {e}")))?;
            parsed.insert(id.clone(), v);
        }
        let mut scores = BTreeMap::new();
        for m in metrics {
            let s = score(&parsed, &data.labels, *m).map_err(|e| match e {
                ScoreError::NonNumeric(_) => Failure::new(ErrorClass::IncompletePredictions, e.to_string()),
                other => Failure::new(ErrorClass::Internal, other.to_string()),
            })?;
            scores.insert(m.id().to_owned(), s);
        }
        Ok((scores, predictions))
    })();

    let stderr = process.into_stderr();
    drop(scratch);
    Outcome { result, stderr: Some(stderr.bytes) }
}

/// Evaluates `bundle` on `dataset` and returns the terminal record.
pub fn run_evaluation(
    record: &EvaluationRecord,
    bundle: &SubmissionBundle,
    dataset: &DatasetRef,
    metrics: &[Metric],
    ctx: &RunContext<'_>,
) -> EvaluationRecord {
    let mut out = record.clone();
    out.started_at = Some(record.started_at.unwrap_or_else(|| ctx.clock.now()));
    let t0 = Instant::now();
    let outcome = drive(bundle, dataset, metrics, ctx);
    out.wall_time_s = t0.elapsed().as_secs_f64();
    out.log_ref = None;
    out.predictions_ref = None;
    out.metrics.clear();
    out.error_detail = None;

    if let Some(stderr) = &outcome.stderr {
        match ctx.blobs.put(stderr) {
            Ok(d) => out.log_ref = Some(d),
            Err(e) => tracing::warn!(eval_id = %record.eval_id, "could not store stderr: {e}"),
        }
    }
    match outcome.result {
        Ok((scores, predictions)) => match ctx.blobs.put(&predictions_ndjson(&predictions)) {
            Ok(d) => {
                out.status = EvalStatus::Succeeded;
                out.error_class = ErrorClass::None;
                out.metrics = scores;
                out.predictions_ref = Some(d);
            }
            Err(e) => {
                out.status = EvalStatus::Failed;
                out.error_class = ErrorClass::Internal;
                out.error_detail = Some(format!("could not store predictions: {e}"));
            }
        },
        Err(f) => {
            out.status = EvalStatus::Failed;
            out.error_class = f.class;
            out.error_detail = Some(f.detail);
        }
    }
    out.finished_at = Some(ctx.clock.now());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{pack_files, parse_manifest, BundleFile};
    use crate::clock::ManualClock;
    use crate::eval::Visibility;
    use chrono::DateTime;
    use std::fs;

    struct Env {
        dir: tempfile::TempDir,
        blobs: BlobStore,
        clock: ManualClock,
        dataset: DatasetRef,
    }

    fn env() -> Env {
        let dir = tempfile::tempdir().unwrap();
        let blobs = BlobStore::open(dir.path().join("blobs")).unwrap();
        let inputs = dir.path().join("inputs.ndjson");
        let labels = dir.path().join("labels.ndjson");
        fs::write(&inputs, "{\"id\":\"a\",\"input\":1}\n{\"id\":\"b\",\"input\":2}\n{\"id\":\"c\",\"input\":3}\n{\"id\":\"d\",\"input\":4}\n").unwrap();
        fs::write(&labels, "{\"id\":\"a\",\"label\":1}\n{\"id\":\"b\",\"label\":0}\n{\"id\":\"c\",\"label\":1}\n{\"id\":\"d\",\"label\":1}\n").unwrap();
        let dataset = DatasetRef { dataset_id: "toy".into(), inputs_path: inputs, labels_path: labels, visibility: Visibility::HiddenEval };
        let clock = ManualClock::new(DateTime::from_timestamp(1_700_000_000, 0).unwrap());
        Env { dir, blobs, clock, dataset }
    }

    /// A bundle whose predict entrypoint is `sh predict.sh`.
    fn sh_bundle(env: &Env, script: &str) -> SubmissionBundle {
        let manifest_json = r#"{"schema_version":1,"competition_id":"c","team_id":"t","entrypoints":{"predict":["sh","predict.sh"]}}"#;
        let mut files = BTreeMap::new();
        files.insert("manifest.json".to_owned(), BundleFile { bytes: manifest_json.as_bytes().to_vec(), executable: false });
        files.insert("predict.sh".to_owned(), BundleFile { bytes: script.as_bytes().to_vec(), executable: true });
        let blob = pack_files(&files).unwrap();
        SubmissionBundle {
            bundle_id: "b".into(),
            blob_digest: env.blobs.put(&blob).unwrap(),
            manifest: parse_manifest(manifest_json).unwrap(),
            byte_size: blob.len() as u64,
            submitted_at: env.clock.now(),
            team_id: "t".into(),
        }
    }

    fn queued(env: &Env) -> EvaluationRecord {
        EvaluationRecord {
            eval_id: "e".into(),
            bundle_id: "b".into(),
            dataset_id: "toy".into(),
            competition_id: "c".into(),
            team_id: "t".into(),
            status: EvalStatus::Running,
            error_class: ErrorClass::None,
            error_detail: None,
            metrics: BTreeMap::new(),
            wall_time_s: 0.0,
            log_ref: None,
            predictions_ref: None,
            enqueued_at: env.clock.now(),
            started_at: None,
            finished_at: None,
            target: None,
        }
    }

    fn run(env: &Env, script: &str, policy: SandboxPolicy) -> EvaluationRecord {
        let bundle = sh_bundle(env, script);
        let scratch = env.dir.path().join("scratch");
        let ctx = RunContext { blobs: &env.blobs, scratch_root: &scratch, policy: &policy, clock: &env.clock };
        let out = run_evaluation(&queued(env), &bundle, &env.dataset, &[Metric::Accuracy], &ctx);
        assert!(out.is_consistent(Some("accuracy")), "{out:?}");
        out
    }

    const READY: &str = "echo '{\"ready\":true,\"protocol\":1}'\n";

    fn constant_one() -> String {
        format!(
            "{READY}while IFS= read -r line; do\n  id=$(printf '%s' \"$line\" | sed 's/.*\"id\":\"\\([^\"]*\\)\".*/\\1/')\n  printf '{{\"id\":\"%s\",\"output\":1}}\\n' \"$id\"\ndone\n"
        )
    }

    fn fast() -> SandboxPolicy {
        SandboxPolicy { startup_timeout_s: 2.0, per_record_timeout_s: 1.0, total_timeout_s: 10.0, exit_timeout_s: 2.0, ..Default::default() }
    }

    #[test]
    fn constant_one_scores_three_quarters() {
        let env = env();
        let out = run(&env, &constant_one(), fast());
        assert_eq!(out.status, EvalStatus::Succeeded, "{:?}", out.error_detail);
        assert_eq!(out.metrics["accuracy"], 0.75);
        let preds = env.blobs.get(out.predictions_ref.as_ref().unwrap()).unwrap();
        assert_eq!(
            String::from_utf8(preds).unwrap(),
            "{\"id\":\"a\",\"output\":1}\n{\"id\":\"b\",\"output\":1}\n{\"id\":\"c\",\"output\":1}\n{\"id\":\"d\",\"output\":1}\n"
        );
        assert!(out.log_ref.is_some());
        assert_eq!(out.finished_at, Some(env.clock.now()));
        // Scratch directories are removed afterwards.
        assert_eq!(fs::read_dir(env.dir.path().join("scratch")).unwrap().count(), 0);
    }

    #[test]
    fn no_ready_line_is_startup_timeout() {
        let env = env();
        let out = run(&env, "sleep 30\n", SandboxPolicy { startup_timeout_s: 0.3, ..fast() });
        assert_eq!((out.status, out.error_class), (EvalStatus::Failed, ErrorClass::StartupTimeout));
    }

    #[test]
    fn half_answers_are_incomplete() {
        let env = env();
        let script = format!("{READY}read -r l; printf '{{\"id\":\"a\",\"output\":1}}\\n'\nread -r l; printf '{{\"id\":\"b\",\"output\":1}}\\n'\nexit 0\n");
        let out = run(&env, &script, fast());
        assert_eq!(out.error_class, ErrorClass::IncompletePredictions, "{:?}", out.error_detail);
    }

    #[test]
    fn garbage_reply_is_protocol_violation() {
        let env = env();
        let out = run(&env, &format!("{READY}read -r l; echo nonsense; sleep 5\n"), fast());
        assert_eq!(out.error_class, ErrorClass::ProtocolViolation);
    }

    #[test]
    fn wrong_id_is_protocol_violation() {
        let env = env();
        let out = run(&env, &format!("{READY}read -r l; echo '{{\"id\":\"zzz\",\"output\":1}}'; sleep 5\n"), fast());
        assert_eq!(out.error_class, ErrorClass::ProtocolViolation);
    }

    #[test]
    fn crash_is_nonzero_exit_and_stderr_is_kept() {
        let env = env();
        let out = run(&env, "echo boom >&2; exit 3\n", fast());
        assert_eq!(out.error_class, ErrorClass::NonzeroExit);
        assert_eq!(env.blobs.get(out.log_ref.as_ref().unwrap()).unwrap(), b"boom\n");
    }

    #[test]
    fn bad_exit_code_after_answers_is_nonzero_exit() {
        let env = env();
        let script = constant_one() + "exit 4\n";
        let out = run(&env, &script, fast());
        assert_eq!(out.error_class, ErrorClass::NonzeroExit);
    }

    #[test]
    fn slow_record_is_record_timeout() {
        let env = env();
        let out = run(&env, &format!("{READY}read -r l; sleep 5\n"), SandboxPolicy { per_record_timeout_s: 0.3, ..fast() });
        assert_eq!(out.error_class, ErrorClass::RecordTimeout);
    }

    #[test]
    fn missing_entrypoint_is_nonzero_exit() {
        let env = env();
        let mut bundle = sh_bundle(&env, "");
        bundle.manifest.entrypoints.predict = vec!["./does-not-exist".into()];
        let scratch = env.dir.path().join("scratch");
        let policy = fast();
        let ctx = RunContext { blobs: &env.blobs, scratch_root: &scratch, policy: &policy, clock: &env.clock };
        let out = run_evaluation(&queued(&env), &bundle, &env.dataset, &[Metric::Accuracy], &ctx);
        assert_eq!(out.error_class, ErrorClass::NonzeroExit);
    }

    #[test]
    fn unreadable_dataset_is_internal() {
        let mut env = env();
        env.dataset.inputs_path = env.dir.path().join("missing.ndjson");
        let out = run(&env, &constant_one(), fast());
        assert_eq!(out.error_class, ErrorClass::Internal);
    }

    #[test]
    fn predictions_round_trip() {
        let raw: Vec<(String, Box<RawValue>)> =
            vec![("x".into(), RawValue::from_string("{\"b\":1,  \"a\":2}".into()).unwrap())];
        let bytes = predictions_ndjson(&raw);
        let back = parse_predictions(&bytes).unwrap();
        assert_eq!(back[0].1.get(), "{\"b\":1,  \"a\":2}");
    }
}
