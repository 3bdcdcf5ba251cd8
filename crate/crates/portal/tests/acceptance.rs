//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//! Tolerances are pinned here and printed with each line.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration as StdDuration, Instant};

use anyhow::{ensure, Context};
use axum::http::StatusCode;
use chrono::{DateTime, Duration, Utc};
use common::*;
use forge_core::bundle::{BundleContents, BundleLimits};
use forge_core::eval::runner::parse_predictions;
use forge_core::eval::{score, ErrorClass, EvalStatus, EvaluationRecord, Metric};
use forge_core::fixtures::{gate_corpus, model_bundle, FixtureModel};
use forge_core::gate::{default_ruleset, Severity, Verdict};
use forge_core::leaderboard::{compute_leaderboard, CompetitionSpec, Direction, Phase};
use forge_core::registry::{RegistryError, Stage};
use forge_core::serving::validate_openapi;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

const E2E_BUDGET: StdDuration = StdDuration::from_secs(60);
const METRIC_TOL: f64 = 1e-9;
const METRIC_CASES: usize = 1000;
const LEADERBOARD_SETS: usize = 500;
const HARVESTS: u32 = 100;
const BURST: usize = 20;
const SEED: u64 = 0x5eed;

type Check = fn() -> anyhow::Result<String>;

fn main() {
    let criteria: [(&str, Check); 7] = [
        ("end-to-end toy competition", end_to_end),
        ("metrics match reference implementations", metrics),
        ("leaderboard ranking properties", leaderboard),
        ("registry versions, stage machine and binaries", registry),
        ("code gate corpus and reproducibility", gate),
        ("serving consistency and pipelines", serving),
        ("quota atomicity and authorization", quota_and_authz),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r.map_err(|e| format!("{e:#}")),
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn leaderboard_rows(env: &Env) -> Vec<(u64, String, f64)> {
    env.get(&format!("/competitions/{COMPETITION}/leaderboard"), None)
        .json()
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["rank"].as_u64().unwrap(), e["team_id"].as_str().unwrap().to_owned(), e["best_score"].as_f64().unwrap()))
        .collect()
}

fn serve_version(env: &Env, bundle_id: &str) -> anyhow::Result<(String, u32)> {
    let r = env.post_empty(&format!("/harvest/{bundle_id}"), Some(&env.organizer));
    ensure!(r.status == StatusCode::OK, "harvest: {}", r.text());
    let name = r.json()["model_name"].as_str().unwrap().to_owned();
    let version = r.json()["version"].as_u64().unwrap() as u32;
    for stage in ["validated", "serving"] {
        let r = env.post_json(&format!("/models/{name}/{version}/promote"), Some(&env.product), &json!({"to_stage": stage}));
        ensure!(r.status == StatusCode::OK, "promote to {stage}: {}", r.text());
    }
    let r = env.post_empty(&format!("/models/{name}/{version}/serve"), Some(&env.product));
    ensure!(r.status == StatusCode::OK, "serve: {}", r.text());
    Ok((name, version))
}

/// Create, submit three models, evaluate, rank, harvest the winner and
/// serve it, all over the HTTP API.
fn end_to_end() -> anyhow::Result<String> {
    let started = Instant::now();
    let env = Env::with_competition();
    let subs = [
        (&env.alice, "alpha", FixtureModel::ConstantOne),
        (&env.bob, "beta", FixtureModel::Parity),
        (&env.carol, "gamma", FixtureModel::BrokenProtocol),
    ]
    .map(|(token, team, model)| env.submit_fixture(token, team, model));
    for s in &subs {
        ensure!(s.status == StatusCode::ACCEPTED, "submit: {}", s.text());
    }
    let done = env.drain();
    let states: Vec<_> = done.iter().map(|r| (r.team_id.as_str(), r.status, r.error_class)).collect();
    ensure!(
        states
            == vec![
                ("alpha", EvalStatus::Succeeded, ErrorClass::None),
                ("beta", EvalStatus::Succeeded, ErrorClass::None),
                ("gamma", EvalStatus::Failed, ErrorClass::ProtocolViolation),
            ],
        "evaluation states {states:?}"
    );
    let board = leaderboard_rows(&env);
    ensure!(board == vec![(1, "beta".into(), 1.0), (2, "alpha".into(), 0.75)], "leaderboard {board:?}");

    let (name, v) = serve_version(&env, subs[1].json()["bundle_id"].as_str().unwrap())?;
    let r = env.post_json(&format!("/models/{name}/{v}/predict"), Some(&env.alice), &json!({"input": 4}));
    ensure!(r.text() == r#"{"output":0}"#, "predict: {}", r.text());
    let elapsed = started.elapsed();
    ensure!(elapsed < E2E_BUDGET, "took {elapsed:?}");
    Ok(format!("leaderboard {board:?}, served {name} v{v}, runtime {:.2}s < {}s", elapsed.as_secs_f64(), E2E_BUDGET.as_secs()))
}

fn oracle_accuracy(pairs: &[(Value, Value)]) -> f64 {
    pairs.iter().filter(|(p, l)| p == l).count() as f64 / pairs.len() as f64
}

/// Per-class F1 from tp/fp/fn counts, averaged over label classes.
fn oracle_macro_f1(pairs: &[(Value, Value)]) -> f64 {
    let mut classes: Vec<&Value> = Vec::new();
    for (_, l) in pairs {
        if !classes.contains(&l) {
            classes.push(l);
        }
    }
    let mut sum = 0.0;
    for c in &classes {
        let tp = pairs.iter().filter(|(p, l)| p == *c && l == *c).count() as f64;
        let fp = pairs.iter().filter(|(p, l)| p == *c && l != *c).count() as f64;
        let fn_ = pairs.iter().filter(|(p, l)| p != *c && l == *c).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        sum += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    }
    sum / classes.len() as f64
}

fn oracle_rmse(pairs: &[(f64, f64)]) -> f64 {
    (pairs.iter().map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / pairs.len() as f64).sqrt()
}

fn by_id(pairs: &[(Value, Value)]) -> (BTreeMap<String, Value>, BTreeMap<String, Value>) {
    let preds = pairs.iter().enumerate().map(|(i, (p, _))| (format!("r{i:03}"), p.clone())).collect();
    let labels = pairs.iter().enumerate().map(|(i, (_, l))| (format!("r{i:03}"), l.clone())).collect();
    (preds, labels)
}

fn metrics() -> anyhow::Result<String> {
    let mut rng = StdRng::seed_from_u64(SEED);
    let classes = [json!(0), json!(1), json!("cat"), json!(true)];
    let mut worst: f64 = 0.0;
    for case in 0..METRIC_CASES {
        let n = rng.random_range(1..=32);
        let pairs: Vec<(Value, Value)> = (0..n)
            .map(|_| (classes[rng.random_range(0..4)].clone(), classes[rng.random_range(0..4)].clone()))
            .collect();
        let (p, l) = by_id(&pairs);
        for (metric, want) in [(Metric::Accuracy, oracle_accuracy(&pairs)), (Metric::MacroF1, oracle_macro_f1(&pairs))] {
            let got = score(&p, &l, metric)?;
            worst = worst.max((got - want).abs());
            ensure!((got - want).abs() <= METRIC_TOL, "case {case} {metric:?}: got {got}, want {want}");
        }
        let floats: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3))).collect();
        let values: Vec<_> = floats.iter().map(|(a, b)| (json!(a), json!(b))).collect();
        let (p, l) = by_id(&values);
        let (got, want) = (score(&p, &l, Metric::Rmse)?, oracle_rmse(&floats));
        let err = (got - want).abs() / want.max(1.0);
        worst = worst.max(err);
        ensure!(err <= METRIC_TOL, "case {case} rmse: got {got}, want {want}");
    }

    let pinned = [
        (Metric::Accuracy, vec![(json!(1), json!(1)), (json!(0), json!(0)), (json!(0), json!(1)), (json!(1), json!(1))], 0.75),
        (Metric::MacroF1, vec![(json!(1), json!(1)), (json!(0), json!(1)), (json!(0), json!(0)), (json!(0), json!(0))], 0.733_333_333_333_333_3),
        (Metric::Rmse, vec![(json!(3), json!(0)), (json!(4), json!(0))], 3.535_533_905_932_737_6),
    ];
    for (metric, pairs, want) in pinned {
        let (p, l) = by_id(&pairs);
        let got = score(&p, &l, metric)?;
        ensure!((got - want).abs() <= 1e-12, "pinned {metric:?}: got {got}, want {want}");
    }
    Ok(format!("{METRIC_CASES} cases per metric, max error {worst:.1e} <= {METRIC_TOL:.0e}; pinned 0.75, 0.7333333333, 3.5355339059"))
}

fn t(s: i64) -> DateTime<Utc> {
    t0() + Duration::seconds(s)
}

fn board_spec(direction: Direction) -> CompetitionSpec {
    CompetitionSpec {
        competition_id: "c".into(),
        title: "c".into(),
        description: String::new(),
        primary_metric: Metric::Accuracy,
        direction,
        secondary_metrics: vec![],
        phases: vec![Phase { phase_id: "p".into(), opens_at: t(0), closes_at: t(1000) }],
        daily_quota: 5,
        hidden_dataset: "hidden".into(),
        public_dataset: None,
        reward_text: String::new(),
    }
}

fn record(n: usize, team: &str, score: Option<f64>, at: i64) -> EvaluationRecord {
    let (status, error_class, metrics) = match score {
        Some(s) => (EvalStatus::Succeeded, ErrorClass::None, BTreeMap::from([("accuracy".to_owned(), s)])),
        None => (EvalStatus::Failed, ErrorClass::NonzeroExit, BTreeMap::new()),
    };
    EvaluationRecord {
        eval_id: format!("evl-{n:06}"),
        bundle_id: format!("bnd-{n:06}"),
        dataset_id: "hidden".into(),
        competition_id: "c".into(),
        team_id: team.into(),
        status,
        error_class,
        error_detail: None,
        metrics,
        wall_time_s: 0.0,
        log_ref: None,
        predictions_ref: None,
        enqueued_at: t(0),
        started_at: Some(t(at)),
        finished_at: Some(t(at)),
        target: None,
    }
}

/// Best per team (earliest finish breaks ties), then rank = 1 + number of
/// teams with a strictly better best score.
fn board_oracle(records: &[EvaluationRecord], direction: Direction) -> Vec<(u32, String, f64)> {
    let better = |a: f64, b: f64| if direction == Direction::Maximize { a > b } else { a < b };
    let mut best: BTreeMap<&str, &EvaluationRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == EvalStatus::Succeeded) {
        let s = r.metrics["accuracy"];
        let replace = match best.get(r.team_id.as_str()) {
            None => true,
            Some(b) => {
                let bs = b.metrics["accuracy"];
                better(s, bs) || (s == bs && (r.finished_at, &r.eval_id) < (b.finished_at, &b.eval_id))
            }
        };
        if replace {
            best.insert(&r.team_id, r);
        }
    }
    let mut rows: Vec<_> = best
        .values()
        .map(|b| {
            let s = b.metrics["accuracy"];
            let rank = 1 + best.values().filter(|o| better(o.metrics["accuracy"], s)).count() as u32;
            (rank, b.finished_at, b.team_id.clone(), s)
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    rows.into_iter().map(|(rank, _, team, s)| (rank, team, s)).collect()
}

fn leaderboard() -> anyhow::Result<String> {
    let mut rng = StdRng::seed_from_u64(SEED);
    let mut checked_improvements = 0;
    for set in 0..LEADERBOARD_SETS {
        let direction = if set % 2 == 0 { Direction::Maximize } else { Direction::Minimize };
        let mut records = Vec::new();
        for team in 0..rng.random_range(0..=20) {
            for _ in 0..rng.random_range(1..=10) {
                let score = rng.random_bool(0.8).then(|| f64::from(rng.random_range(0u8..6)) / 5.0);
                records.push(record(records.len(), &format!("team{team:02}"), score, rng.random_range(0..40)));
            }
        }
        let got = compute_leaderboard(&records, &board_spec(direction))?;
        let flat: Vec<_> = got.iter().map(|e| (e.rank, e.team_id.clone(), e.best_score)).collect();
        ensure!(flat == board_oracle(&records, direction), "set {set}: {flat:?}");
        ensure!(got.windows(2).all(|w| w[0].rank <= w[1].rank), "set {set}: ranks not ascending");

        // A strictly better score never worsens a team's rank.
        if let Some(target) = got.get(rng.random_range(0..got.len().max(1))) {
            let improved = if direction == Direction::Maximize { target.best_score + 0.2 } else { target.best_score - 0.2 };
            let mut more = records.clone();
            more.push(record(records.len(), &target.team_id, Some(improved), 39));
            let after = compute_leaderboard(&more, &board_spec(direction))?;
            let rank = after.iter().find(|e| e.team_id == target.team_id).unwrap().rank;
            ensure!(rank <= target.rank, "set {set}: {} fell from {} to {rank}", target.team_id, target.rank);
            checked_improvements += 1;
        }
    }
    Ok(format!("{LEADERBOARD_SETS} random sets match the reference; {checked_improvements} improvements never lowered rank"))
}

fn registry() -> anyhow::Result<String> {
    let env = Env::with_competition();
    let blob = model_bundle(FixtureModel::Identity, COMPETITION, "crowd");
    let bundles: Vec<String> = (0..HARVESTS).map(|i| fabricate_finished(&env, "crowd", &blob, f64::from(i) / 100.0)).collect();
    let registry = env.platform.registry();
    let mut versions: Vec<u32> = std::thread::scope(|s| {
        let handles: Vec<_> = bundles.iter().map(|b| s.spawn(move || registry.harvest(b).map(|m| m.version))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect::<Result<_, _>>()
    })?;
    versions.sort_unstable();
    ensure!(versions == (1..=HARVESTS).collect::<Vec<_>>(), "versions {versions:?}");

    // Every (from, to) pair, each on a fresh version walked to `from`.
    let legal = [
        (Stage::Harvested, Stage::Validated),
        (Stage::Validated, Stage::Serving),
        (Stage::Serving, Stage::Archived),
        (Stage::Harvested, Stage::Archived),
        (Stage::Validated, Stage::Archived),
    ];
    let mut pairs = 0;
    for from in Stage::ALL {
        for to in Stage::ALL {
            let m = registry.harvest(&fabricate_finished(&env, "walker", &model_bundle(FixtureModel::Identity, COMPETITION, "walker"), 0.5))?;
            env.platform.gate(&m)?;
            let path: &[Stage] = match from {
                Stage::Harvested => &[],
                Stage::Validated => &[Stage::Validated],
                Stage::Serving => &[Stage::Validated, Stage::Serving],
                Stage::Archived => &[Stage::Archived],
            };
            for s in path {
                registry.transition_stage(&m.model_name, m.version, *s, "acceptance")?;
            }
            let result = registry.transition_stage(&m.model_name, m.version, to, "acceptance");
            let now = registry.get(&m.model_name, m.version)?.stage;
            if legal.contains(&(from, to)) {
                result.with_context(|| format!("{from} -> {to}"))?;
                ensure!(now == to, "{from} -> {to} left the version in {now}");
            } else {
                ensure!(matches!(result, Err(RegistryError::IllegalTransition { .. })), "{from} -> {to} was allowed");
                ensure!(now == from, "{from} -> {to} moved the version to {now}");
            }
            pairs += 1;
        }
    }

    let m = registry.get("toy/crowd", 1)?;
    let bytes = registry.binary(&m)?;
    ensure!(bytes == blob, "binary differs from the submitted bundle");
    ensure!(forge_core::digest::compute_digest(&bytes) == m.binary_ref, "binary digest mismatch");
    Ok(format!("{HARVESTS} concurrent harvests gave versions 1..={HARVESTS}; {pairs} stage pairs ({} legal); binary round-trips", legal.len()))
}

fn gate() -> anyhow::Result<String> {
    use Severity::*;
    let expected: Vec<(&str, Verdict, Vec<(&str, Severity, &str, Option<u64>)>)> = vec![
        ("clean", Verdict::Pass, vec![]),
        ("aws-key", Verdict::Fail, vec![("SEC-002", Block, "config.py", Some(1))]),
        ("private-key", Verdict::Fail, vec![("SEC-001", Block, "keys/id_rsa.pem", Some(1))]),
        ("github-token", Verdict::Fail, vec![("SEC-003", Block, "settings.py", Some(1))]),
        ("slack-token", Verdict::Fail, vec![("SEC-004", Block, "notify.py", Some(1))]),
        ("password-warning", Verdict::Pass, vec![("SEC-005", Warn, "config.yaml", Some(2))]),
        ("subprocess-warning", Verdict::Pass, vec![("EXE-001", Warn, "helper.py", Some(2))]),
        ("oversize", Verdict::Fail, vec![("BIN-SKIP", Info, "weights.bin", None), ("LIM-001", Block, "weights.bin", None)]),
        ("over-count", Verdict::Fail, vec![("LIM-002", Block, ".", None)]),
        ("binary-skip", Verdict::Pass, vec![("BIN-SKIP", Info, "blob.bin", None)]),
    ];
    let rules = default_ruleset();
    let limits = BundleLimits { max_files: 20_000, ..BundleLimits::default() };
    let corpus = gate_corpus(COMPETITION);
    ensure!(corpus.len() == expected.len(), "corpus has {} cases", corpus.len());
    for (case, (name, verdict, rows)) in corpus.iter().zip(&expected) {
        ensure!(case.name == *name, "case order: {} vs {name}", case.name);
        let scan = || -> anyhow::Result<Vec<u8>> {
            let report = rules.scan(name, &BundleContents::open(&case.pack(), &limits)?, t0());
            let got: Vec<_> = report.findings.iter().map(|f| (f.rule_id.as_str(), f.severity, f.path.as_str(), f.line)).collect();
            ensure!(got == *rows, "{name}: findings {got:?}");
            ensure!(report.verdict == *verdict, "{name}: verdict {:?}", report.verdict);
            Ok(serde_json::to_vec(&report)?)
        };
        let (a, b) = (scan()?, scan()?);
        ensure!(a == b, "{name}: report bytes differ between runs");
    }
    Ok(format!("{} cases with exact findings and verdicts; reports byte-identical across runs", expected.len()))
}

fn serving() -> anyhow::Result<String> {
    let env = Env::with_competition();
    let inc = env.submit_fixture(&env.alice, "alpha", FixtureModel::AddOne).json();
    let dbl = env.submit_fixture(&env.bob, "beta", FixtureModel::Double).json();
    let par = env.submit_fixture(&env.carol, "gamma", FixtureModel::Parity).json();
    let done = env.drain();
    ensure!(done.iter().all(|r| r.status == EvalStatus::Succeeded), "evaluations: {done:?}");
    let inc = serve_version(&env, inc["bundle_id"].as_str().unwrap())?;
    let dbl = serve_version(&env, dbl["bundle_id"].as_str().unwrap())?;
    let par = serve_version(&env, par["bundle_id"].as_str().unwrap())?;

    for (name, v) in [&inc, &dbl, &par] {
        let doc = env.get(&format!("/models/{name}/{v}/openapi.json"), Some(&env.alice)).json();
        validate_openapi(&doc).with_context(|| format!("{name} v{v} openapi"))?;
    }

    // Served outputs are byte-equal to what the offline evaluation recorded.
    let offline_record = done.iter().find(|r| r.team_id == "gamma").unwrap();
    let offline = parse_predictions(&env.platform.blobs().get(offline_record.predictions_ref.as_ref().unwrap())?)?;
    for ((id, input, _), (pid, out)) in toy_rows().iter().zip(&offline) {
        ensure!(id == pid, "prediction order");
        let r = env.post_json(&format!("/models/{}/{}/predict", par.0, par.1), Some(&env.alice), &json!({"input": input}));
        ensure!(r.text() == format!("{{\"output\":{}}}", out.get()), "record {id}: {}", r.text());
    }

    let stages = json!({"stages": [{"model_name": inc.0, "version": inc.1}, {"model_name": dbl.0, "version": dbl.1}]});
    let r = env.post_json("/pipelines", Some(&env.product), &stages);
    ensure!(r.status == StatusCode::CREATED, "compose: {}", r.text());
    let id = r.json()["pipeline_id"].as_str().unwrap().to_owned();
    let r = env.post_json(&format!("/pipelines/{id}/predict"), Some(&env.alice), &json!({"input": 3}));
    ensure!(r.text() == r#"{"output":8}"#, "pipeline: {}", r.text());
    Ok(format!("3 OpenAPI documents valid; {} served outputs equal offline; [add-one, double](3) = 8", offline.len()))
}

fn quota_and_authz() -> anyhow::Result<String> {
    let env = Env::with_competition();
    let codes = burst(&env, &env.alice, "alpha", BURST);
    let (ok, limited) = (count(&codes, StatusCode::ACCEPTED), count(&codes, StatusCode::TOO_MANY_REQUESTS));
    ensure!((ok, limited) == (5, BURST - 5), "{ok} accepted, {limited} limited");

    let (env, bundle, eval, pipeline) = common::matrix::setup();
    let cases = common::matrix::cases(&bundle, &eval, &pipeline);
    let failures = common::matrix::run_matrix(&env, &cases);
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(format!(
        "{BURST} concurrent submits against quota 5: {ok} accepted, {limited} refused; {} endpoints x {} actors as expected",
        cases.len(),
        common::matrix::ACTORS.len()
    ))
}
