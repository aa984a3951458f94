//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use dms::data::{teacher_spec, TaskSpec};
use dms::fidelity::{self, COMPOSITE_TOLERANCE, PRIMITIVE_TOLERANCE};
use dms::network::MaskSource;
use dms::resource::{fit_latency_model, LatencyTable};
use dms::search::{
    evaluate, pretrain, retrain, run_pipeline, weight_digest, Checkpoint, EpochRecord,
    Pipeline, PipelineConfig, PipelineOutcome, SearchError, TaskData,
};
use dms::topk::{OperatorKind, TopkOperator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const FIDELITY_SEEDS: u64 = 100;
const FIDELITY_BUDGET: Duration = Duration::from_secs(60);
const POLARIZATION_DRAWS: usize = 1000;
const POLARIZATION_UNITS: [usize; 3] = [16, 100, 512];
const MAX_FUZZY_UNITS: usize = 6;
const POLAR_ERROR: f64 = 0.05;
const ATTAINMENT: f64 = 0.02;
const SEED_BUDGET: Duration = Duration::from_secs(600);
const MIN_PASSING_SEEDS: usize = 4;
const MIN_RECALL: f64 = 0.8;
const MAX_BLOCKS: usize = 4;
const MSE_FACTOR: f64 = 2.0;
const SOFT_HARD_GAP: f64 = 0.05;
const MIN_R_SQUARED: f64 = 0.95;
const LATENCY_ATTAINMENT: f64 = 0.05;
const SCHEDULE_TOLERANCE: f64 = 1e-12;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn planted(seed: u64, normalization: &str, extra: &str) -> PipelineConfig {
    serde_json::from_str(&format!(
        r#"{{
      "pipeline": "np",
      "model": {{"input_dim": 64, "input_search": {{}}, "layers": [
        {{"kind": "linear", "name": "fc1", "out_features": 256, "activation": "relu", "search": {{}}}},
        {{"kind": "linear", "name": "fc2", "out_features": 256, "activation": "relu", "search": {{}}}},
        {{"kind": "linear", "name": "out", "out_features": 4}}]}},
      "task": {{"kind": "planted-features", "input_dim": 64, "classes": 4, "informative": 8,
               "train": 4000, "val": 1000, "test": 2000, "seed": {seed}}},
      "resource": {{"kind": "macs", "target": {{"fraction": 0.25}}}},
      "hyperparams": {{"search_epochs": 10, "retrain_epochs": 30, "seed": {seed},
                       "lr_structure": 1e-3}},
      "operators": {{"normalization": "{normalization}"}}
      {extra}
    }}"#
    ))
    .unwrap()
}

struct Run {
    seed: u64,
    outcome: Result<PipelineOutcome, SearchError>,
    records: Vec<EpochRecord>,
    elapsed: Duration,
}

fn run(seed: u64, cfg: &PipelineConfig) -> Run {
    let mut records = Vec::new();
    let start = Instant::now();
    let outcome = run_pipeline(cfg, &mut |r| {
        records.push(r.clone());
        Ok(())
    });
    Run {
        seed,
        outcome,
        records,
        elapsed: start.elapsed(),
    }
}

fn accuracy(o: &PipelineOutcome) -> f64 {
    o.report.test.accuracy.expect("classification task")
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let report = match fidelity::run(FIDELITY_SEEDS) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite failed to run: {e}")),
    };
    let elapsed = start.elapsed();
    let prim = report.max_error(false);
    let comp = report.max_error(true);
    verdict(
        report.passed() && elapsed < FIDELITY_BUDGET,
        format!(
            "{} cases x {FIDELITY_SEEDS} seeds; max rel err primitives {prim:.2e} (< {PRIMITIVE_TOLERANCE:.0e}), composites {comp:.2e} (< {COMPOSITE_TOLERANCE:.0e}); {:.1}s (< {}s)",
            report.cases.len(),
            elapsed.as_secs_f64(),
            FIDELITY_BUDGET.as_secs()
        ),
    )
}

fn polarization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_count = 0;
    let mut worst_error: f64 = 0.0;
    let mut ok = true;
    for &u in &POLARIZATION_UNITS {
        let mut op = TopkOperator::new("w", OperatorKind::Width, u, 1, None).unwrap();
        ok &= op.lambda == u as f64;
        for _ in 0..POLARIZATION_DRAWS {
            op.importance = (0..u).map(|_| rng.gen()).collect();
            op.a = rng.gen_range(0.0..1.0);
            let c = op.normalized_importance().unwrap();
            let m = op.unit_mask().unwrap();
            let fuzzy = m.iter().filter(|&&v| v > 0.05 && v < 0.95).count();
            worst_count = worst_count.max(fuzzy);
            for (ci, mi) in c.iter().zip(&m) {
                if (ci - op.a).abs() > 3.0 / u as f64 {
                    worst_error = worst_error.max((mi - mi.round()).abs());
                }
            }
        }
    }
    verdict(
        ok && worst_count <= MAX_FUZZY_UNITS && worst_error < POLAR_ERROR,
        format!(
            "{POLARIZATION_DRAWS} draws at U in {POLARIZATION_UNITS:?}; max fuzzy units {worst_count} (<= {MAX_FUZZY_UNITS}); max |m - round(m)| beyond 3/U {worst_error:.4} (< {POLAR_ERROR})"
        ),
    )
}

fn attainment(runs: &[Run]) -> Verdict {
    let mut hits = 0;
    let mut parts = Vec::new();
    let mut slowest = Duration::ZERO;
    for r in runs {
        slowest = slowest.max(r.elapsed);
        match &r.outcome {
            Ok(o) => {
                let rel = o.report.exported_resource / o.report.r_final - 1.0;
                hits += usize::from(rel.abs() <= ATTAINMENT);
                parts.push(format!("s{} {:+.2}%", r.seed, 100.0 * rel));
            }
            Err(e) => parts.push(format!("s{} error: {e}", r.seed)),
        }
    }
    verdict(
        hits >= MIN_PASSING_SEEDS && slowest < SEED_BUDGET,
        format!(
            "{hits}/{} seeds within +-{}% of target [{}]; slowest seed {:.0}s (< {}s)",
            runs.len(),
            100.0 * ATTAINMENT,
            parts.join(", "),
            slowest.as_secs_f64(),
            SEED_BUDGET.as_secs()
        ),
    )
}

fn beats_uniform(runs: &[Run]) -> Verdict {
    let mut deltas = Vec::new();
    let mut recalls = Vec::new();
    for r in runs {
        let Ok(o) = &r.outcome else {
            return verdict(false, format!("seed {} failed", r.seed));
        };
        let b = o.report.baseline.as_ref().expect("baseline requested");
        deltas.push(accuracy(o) - b.test.accuracy.expect("classification task"));
        let cfg = planted(r.seed, "rank", "");
        let informative = cfg.task.generate().unwrap().metadata.informative.unwrap();
        let kept = &o.architecture.entry("input").unwrap().retained;
        let found = informative.iter().filter(|i| kept.contains(i)).count();
        recalls.push(found as f64 / informative.len() as f64);
    }
    let med = median(deltas.clone());
    let min_recall = recalls.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        med > 0.0 && min_recall >= MIN_RECALL,
        format!(
            "searched - uniform accuracy {:?}; median {med:+.4} (> 0); input recall of planted set {recalls:?} (min >= {MIN_RECALL})",
            deltas.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn normalization_ablation(rank: &[Run], identity: &[Run]) -> Verdict {
    let acc = |runs: &[Run]| -> (Vec<f64>, usize) {
        let mut a = Vec::new();
        let mut misses = 0;
        for r in runs {
            match &r.outcome {
                Ok(o) => a.push(accuracy(o)),
                Err(SearchError::TargetMissed { .. }) => misses += 1,
                Err(e) => panic!("seed {}: {e}", r.seed),
            }
        }
        (a, misses)
    };
    let (ra, _) = acc(rank);
    let (ia, misses) = acc(identity);
    let rm = median(ra);
    let im = if ia.is_empty() { f64::NAN } else { median(ia) };
    verdict(
        misses > 0 || im < rm,
        format!("identity: {misses} target misses, median accuracy {im:.4}; rank: median accuracy {rm:.4}"),
    )
}

fn teacher_task(seed: u64) -> String {
    format!(
        r#"{{"kind": "teacher-student", "input_dim": 16, "output_dim": 4, "width": 32, "hidden": 64,
            "blocks": 2, "train": 4000, "val": 1000, "test": 2000, "seed": {seed}}}"#
    )
}

fn depth_recovery() -> Verdict {
    let mut passing = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let task = teacher_task(seed);
        let cfg: PipelineConfig = serde_json::from_str(&format!(
            r#"{{
          "pipeline": "np",
          "model": {{"input_dim": 16, "layers": [
            {{"kind": "linear", "name": "in", "out_features": 32}},
            {{"kind": "residual", "name": "stage", "blocks": 8, "hidden": 64, "depth_search": {{}}}},
            {{"kind": "linear", "name": "out", "out_features": 4}}]}},
          "task": {task},
          "resource": {{"kind": "macs", "target": {{"fraction": {}}}}},
          "hyperparams": {{"search_epochs": 10, "retrain_epochs": 30, "seed": {seed},
                           "lr_structure": 1e-3}}
        }}"#,
            17024.0 / 33408.0
        ))
        .unwrap();
        let r = run(seed, &cfg);
        let ts: TaskSpec = serde_json::from_str(&task).unwrap();
        let data = ts.generate().unwrap();
        let reference = retrain(
            &teacher_spec(&ts).unwrap(),
            &data,
            &cfg.hyperparams.resolved(),
            &mut |_| Ok(()),
        )
        .unwrap();
        let ref_mse = evaluate(
            &reference,
            &TaskData::new(&reference, &data).unwrap(),
            &data.test,
            MaskSource::Ones,
        )
        .unwrap()
        .loss;
        match &r.outcome {
            Ok(o) => {
                let blocks = o
                    .architecture
                    .entries
                    .iter()
                    .find(|e| e.kind == OperatorKind::Depth)
                    .unwrap()
                    .k;
                let mse = o.report.test.loss;
                let ok = blocks <= MAX_BLOCKS && mse <= MSE_FACTOR * ref_mse;
                passing += usize::from(ok);
                parts.push(format!("s{seed} {blocks} blocks, mse {mse:.3e} vs ref {ref_mse:.3e}"));
            }
            Err(e) => parts.push(format!("s{seed} error: {e}")),
        }
    }
    verdict(
        passing >= MIN_PASSING_SEEDS,
        format!(
            "{passing}/{} seeds with <= {MAX_BLOCKS} blocks and mse <= {MSE_FACTOR}x reference [{}]",
            SEEDS.len(),
            parts.join("; ")
        ),
    )
}

fn soft_discrete(runs: &[Run]) -> Verdict {
    let mut gaps = Vec::new();
    let mut soft = Vec::new();
    let mut fuzzy = 0;
    for r in runs {
        let Ok(o) = &r.outcome else {
            return verdict(false, format!("seed {} failed", r.seed));
        };
        let s = o.report.soft_val_loss.unwrap();
        let h = o.report.exported_val_loss.unwrap();
        gaps.push((s - h).abs());
        soft.push(s);
        fuzzy = fuzzy.max(o.report.max_fuzzy_units);
    }
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let soft_mean = soft.iter().sum::<f64>() / soft.len() as f64;
    verdict(
        gap < SOFT_HARD_GAP * soft_mean && fuzzy <= MAX_FUZZY_UNITS,
        format!(
            "mean |soft - exported| val loss {gap:.4} = {:.2}% of soft loss {soft_mean:.4} (< {}%); max fuzzy units {fuzzy} (<= {MAX_FUZZY_UNITS})",
            100.0 * gap / soft_mean,
            100.0 * SOFT_HARD_GAP
        ),
    )
}

fn latency(dir: &Path) -> Verdict {
    let layers: Vec<(String, [f64; 6])> = [
        ("fc1", 64.0 * 256.0),
        ("fc2", 256.0 * 256.0),
        ("out", 256.0 * 4.0),
    ]
    .iter()
    .map(|&(n, macs)| {
        let s = macs * 1e-9;
        (n.to_string(), [1.05 * s, -s, -s, 0.0, s, 0.0])
    })
    .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let table = LatencyTable::synthesize(&layers, 6, 0.95, 0.01, &mut rng).unwrap();
    let fit = fit_latency_model(&table).unwrap();
    let min_r2 = fit
        .layers
        .values()
        .map(|l| l.r_squared)
        .fold(f64::INFINITY, f64::min);
    let path = dir.join("latency.csv");
    table
        .write_csv(std::fs::File::create(&path).unwrap())
        .unwrap();
    let mut cfg = planted(0, "rank", "");
    cfg.hyperparams.retrain_epochs = 1;
    cfg.resource = serde_json::from_str(&format!(
        r#"{{"kind": "latency", "target": {{"fraction": 0.4}}, "latency_table": {path:?}}}"#
    ))
    .unwrap();
    let detail = format!("min R^2 {min_r2:.5} (> {MIN_R_SQUARED})");
    match run(0, &cfg).outcome {
        Ok(o) => {
            let rel = o.report.exported_resource / o.report.r_final - 1.0;
            verdict(
                min_r2 > MIN_R_SQUARED && rel.abs() <= LATENCY_ATTAINMENT,
                format!(
                    "{detail}; exported latency {:+.2}% off target (within +-{}%)",
                    100.0 * rel,
                    100.0 * LATENCY_ATTAINMENT
                ),
            )
        }
        Err(e) => verdict(false, format!("{detail}; search failed: {e}")),
    }
}

fn pipeline_contracts(dir: &Path) -> Verdict {
    let mut base = planted(0, "rank", "");
    base.hyperparams.retrain_epochs = 5;
    let data = base.task.generate().unwrap();
    let ck = pretrain(&base.model, &data, &base.hyperparams.resolved(), &mut |_| Ok(())).unwrap();
    let path = dir.join("pretrained.ckpt");
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let digest = weight_digest(&ck.params);

    let np = run_pipeline(&base, &mut |_| Ok(())).unwrap();
    let mut with_ck = base.clone();
    with_ck.checkpoint = Some(path.clone());
    let np_ok = np.report.checkpoints_read == 0
        && np.report.pretrained_digest.is_none()
        && with_ck.validate().is_err();

    let mut pm = with_ck.clone();
    pm.pipeline = Pipeline::PMinus;
    let pm = run_pipeline(&pm, &mut |_| Ok(())).unwrap();
    let pm_ok = pm.report.checkpoints_read == 1
        && pm.report.pretrained_digest.as_deref() == Some(digest.as_str())
        && pm.report.searched_digest == digest
        && pm.report.retrain_epochs == 0;

    let mut p = with_ck;
    p.pipeline = Pipeline::P;
    let p = run_pipeline(&p, &mut |_| Ok(())).unwrap();
    let p_ok = p.report.checkpoints_read == 1
        && p.report.pretrained_digest.as_deref() == Some(digest.as_str())
        && p.report.searched_digest != digest;

    let file_ok = std::fs::read(&path).unwrap() == bytes
        && weight_digest(&Checkpoint::load(&path).unwrap().params) == digest;
    verdict(
        np_ok && pm_ok && p_ok && file_ok,
        format!(
            "np reads none: {np_ok}; p- keeps digest {}..: {pm_ok}; p loads and changes it to {}..: {p_ok}; checkpoint file unchanged: {file_ok}",
            &digest[..12],
            &p.report.searched_digest[..12]
        ),
    )
}

fn schedule(runs: &[Run]) -> Verdict {
    let mut worst: f64 = 0.0;
    let mut endpoints = true;
    let mut checked = 0;
    for r in runs {
        let Ok(o) = &r.outcome else { continue };
        let (r0, rf) = (o.report.r_supernet, o.report.r_final);
        let search: Vec<&EpochRecord> = r.records.iter().filter(|x| x.stage == "search").collect();
        let epochs = search.len() - 1;
        let decay = epochs - epochs / 5;
        for rec in &search {
            let e = rec.epoch.min(decay);
            let expected = (rf / r0).powf(e as f64 / decay as f64) * r0;
            let got = rec.r_t.unwrap();
            worst = worst.max((got - expected).abs() / expected);
            checked += 1;
        }
        endpoints &= search[0].r_t == Some(r0) && search[decay].r_t == Some(rf);
        endpoints &= search.last().unwrap().r_t == Some(rf);
    }
    verdict(
        checked > 0 && worst < SCHEDULE_TOLERANCE && endpoints,
        format!(
            "{checked} emitted targets; max rel err {worst:.2e} (< {SCHEDULE_TOLERANCE:.0e}); exact endpoints: {endpoints}"
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!(
            "[{}] criterion {n:>2} {name}: {} ({:.0}s elapsed)",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
        results.push((n, name, v));
    };

    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "polarization bound", polarization());

    let rank: Vec<Run> = SEEDS
        .iter()
        .map(|&s| run(s, &planted(s, "rank", r#", "compare_baseline": true"#)))
        .collect();
    report(3, "resource attainment", attainment(&rank));
    report(4, "search beats uniform scaling", beats_uniform(&rank));
    let identity: Vec<Run> = SEEDS
        .iter()
        .map(|&s| run(s, &planted(s, "identity", "")))
        .collect();
    report(5, "normalization ablation", normalization_ablation(&rank, &identity));
    report(6, "depth recovery", depth_recovery());
    report(7, "soft/discrete consistency", soft_discrete(&rank));
    report(8, "latency constraint", latency(dir.path()));
    report(9, "pipeline contracts", pipeline_contracts(dir.path()));
    report(10, "schedule exactness", schedule(&rank));

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, v)| !v.passed)
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
