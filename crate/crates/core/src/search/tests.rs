use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Graph;
use crate::network::{MaskSource, ModelSpec, Network, OperatorOptions};
use crate::resource::{
    current_consumption, resource_loss, supernet_consumption, target_schedule, ResourceModel,
};

fn toy_json(pipeline: &str, extra: &str) -> String {
    format!(
        r#"{{
          "pipeline": "{pipeline}",
          "model": {{"input_dim": 8, "input_search": {{}}, "layers": [
            {{"kind": "linear", "name": "fc1", "out_features": 16, "activation": "relu", "search": {{}}}},
            {{"kind": "linear", "name": "fc2", "out_features": 16, "activation": "relu", "search": {{}}}},
            {{"kind": "linear", "name": "out", "out_features": 3}}]}},
          "task": {{"kind": "planted-features", "input_dim": 8, "classes": 3, "informative": 3,
                   "train": 256, "val": 64, "test": 300, "seed": 5}},
          "resource": {{"kind": "macs", "target": {{"fraction": 0.5}}}},
          "hyperparams": {{"search_epochs": 4, "retrain_epochs": 3, "batch_size": 32, "seed": 1,
                           "lr_structure": 0.05}}
          {extra}
        }}"#
    )
}

fn toy(pipeline: &str) -> PipelineConfig {
    serde_json::from_str(&toy_json(pipeline, "")).unwrap()
}

fn toy_net(cfg: &PipelineConfig, seed: u64) -> Network {
    Network::build(&cfg.model, &mut ChaCha8Rng::seed_from_u64(seed), cfg.operators).unwrap()
}

fn quiet() -> impl FnMut(&EpochRecord) -> Result<()> {
    |_| Ok(())
}

#[test]
fn structure_step_examples() {
    let b = (0.0, 0.9);
    assert_eq!(structure_step(0.4, 0.0, 0.0, 0.01, 1.0, b), Some(0.4));
    assert_eq!(structure_step(0.0, 5.0, 0.0, 0.01, 1.0, b), Some(0.0));
    let a = structure_step(0.5, 1.0, 2.0, 0.01, 1.0, b).unwrap();
    assert!((0.5 - a - 0.03).abs() < 1e-15);
    assert_eq!(structure_step(0.89, 0.0, -10.0, 0.01, 1.0, b), Some(0.9));
    assert_eq!(structure_step(0.5, f64::NAN, 0.0, 0.01, 1.0, b), None);
    assert_eq!(structure_step(0.5, 0.0, f64::INFINITY, 0.01, 1.0, b), None);
}

#[test]
fn resource_pressure_raises_every_ratio() {
    let cfg = toy("np");
    let mut net = toy_net(&cfg, 0);
    let rm = ResourceModel::Macs;
    let r_t = 0.05 * supernet_consumption(net.layout(), &rm).unwrap();
    let mut steps = 0;
    loop {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false, MaskSource::Soft).unwrap();
        let rc = current_consumption(&mut g, &net, &bound, &rm).unwrap();
        let rl = resource_loss(&mut g, rc, r_t).unwrap();
        if g.value(rl).item() == 0.0 {
            break;
        }
        steps += 1;
        let grads = g.backward(rl).unwrap();
        for (i, op) in net.operators.iter_mut().enumerate() {
            let gr = grads.scalar(bound.a[i]);
            assert!(gr < 0.0, "{}: {gr}", op.name);
            let next = structure_step(op.a, 0.0, gr, 0.01, 1.0, (op.a_min, op.a_max)).unwrap();
            assert!(next > op.a || next == op.a_max, "{}", op.name);
            op.a = next;
        }
    }
    assert!(steps > 10, "{steps}");
}

fn one_epoch(
    cfg: &PipelineConfig,
    net: &mut Network,
    phase: Phase,
    r_t: f64,
    hp: &Hyperparams,
) -> EpochStats {
    let data = cfg.task.generate().unwrap();
    let task = TaskData::new(net, &data).unwrap();
    let mut adam = Adam::new(hp.lr_weights, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    train_epoch(net, &mut adam, &task, Some(&ResourceModel::Macs), r_t, hp, phase, &mut rng, 1)
        .unwrap()
}

#[test]
fn structure_only_epoch_keeps_weights() {
    let cfg = toy("p-");
    let mut net = toy_net(&cfg, 0);
    let before = net.params().to_vec();
    let r_t = 0.3 * supernet_consumption(net.layout(), &ResourceModel::Macs).unwrap();
    one_epoch(&cfg, &mut net, Phase::StructureOnly, r_t, &cfg.hyperparams);
    assert_eq!(net.params(), &before[..]);
    assert_eq!(weight_digest(net.params()), weight_digest(&before));
    assert!(net.operators.iter().all(|o| o.a > 0.0));
}

#[test]
fn inactive_resource_loss_leaves_only_task_gradient() {
    let cfg = toy("np");
    let r_sup = supernet_consumption(toy_net(&cfg, 0).layout(), &ResourceModel::Macs).unwrap();
    let mut runs = Vec::new();
    for lambda in [1.0, 1e6] {
        let hp = Hyperparams {
            lambda_resource: lambda,
            ..cfg.hyperparams.clone()
        };
        let mut net = toy_net(&cfg, 0);
        let stats = one_epoch(&cfg, &mut net, Phase::Joint, r_sup, &hp);
        assert_eq!(stats.resource_loss, 0.0);
        runs.push(net);
    }
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].operators.iter().any(|o| o.a != 0.0));
}

#[test]
fn width_only_phase_freezes_depth() {
    let cfg: PipelineConfig = serde_json::from_str(
        r#"{"pipeline": "np",
            "model": {"input_dim": 4, "layers": [
              {"kind": "linear", "name": "in", "out_features": 8},
              {"kind": "residual", "name": "stage", "blocks": 4, "hidden": 8,
               "hidden_search": {}, "depth_search": {}},
              {"kind": "linear", "name": "out", "out_features": 2}]},
            "task": {"kind": "teacher-student", "input_dim": 4, "output_dim": 2, "width": 8,
                     "hidden": 8, "blocks": 1, "train": 128, "val": 0, "test": 16},
            "resource": {"kind": "macs", "target": {"fraction": 0.5}},
            "hyperparams": {"batch_size": 16}}"#,
    )
    .unwrap();
    let mut net = toy_net(&cfg, 0);
    let depth = net.operator_index("stage.depth").unwrap();
    let before = net.operators[depth].clone();
    let r_t = 0.2 * supernet_consumption(net.layout(), &ResourceModel::Macs).unwrap();
    one_epoch(&cfg, &mut net, Phase::WidthOnly, r_t, &cfg.hyperparams);
    assert_eq!(net.operators[depth], before);
    assert!(net.operators.iter().any(|o| o.a > 0.0));
}

#[test]
fn divergent_loss_aborts() {
    let cfg = toy("np");
    let mut net = toy_net(&cfg, 0);
    net.params_mut()[0].data_mut()[0] = f64::NAN;
    let data = cfg.task.generate().unwrap();
    let task = TaskData::new(&net, &data).unwrap();
    let mut adam = Adam::new(1e-3, net.params());
    let err = train_epoch(
        &mut net,
        &mut adam,
        &task,
        Some(&ResourceModel::Macs),
        1.0,
        &cfg.hyperparams,
        Phase::Joint,
        &mut ChaCha8Rng::seed_from_u64(0),
        3,
    )
    .unwrap_err();
    assert!(matches!(err, SearchError::Divergence { epoch: 3, batch: 0, .. }), "{err}");
}

// recorded from the first verified build; guards against silent changes
// to initialization, batching, or the update order
const GOLDEN_TASK_LOSS: f64 = 1.1157985197142162;
const GOLDEN_RESOURCE_LOSS: f64 = 0.4009328727232325;

#[test]
fn one_epoch_matches_golden_trace() {
    let cfg = toy("np");
    let mut net = toy_net(&cfg, 0);
    let r_t = 0.5 * supernet_consumption(net.layout(), &ResourceModel::Macs).unwrap();
    let stats = one_epoch(&cfg, &mut net, Phase::Joint, r_t, &cfg.hyperparams);
    assert_eq!(stats.batches, 8);
    assert!((stats.task_loss - GOLDEN_TASK_LOSS).abs() <= 1e-12 * GOLDEN_TASK_LOSS.abs());
    assert!(
        (stats.resource_loss - GOLDEN_RESOURCE_LOSS).abs() <= 1e-12 * GOLDEN_RESOURCE_LOSS.abs()
    );
}

#[test]
fn zero_search_epochs_export_supernet() {
    let mut cfg = toy("np");
    cfg.hyperparams.search_epochs = Some(0);
    cfg.hyperparams.retrain_epochs = 0;
    cfg.resource.target = Budget::Fraction(0.99);
    let out = run_pipeline(&cfg, &mut quiet()).unwrap();
    assert!(out.architecture.entries.iter().all(|e| e.k == e.n_max));
    assert_eq!(out.report.exported_resource, out.report.r_supernet);
}

#[test]
fn unreached_target_is_an_error() {
    let mut cfg = toy("np");
    cfg.hyperparams.search_epochs = Some(1);
    cfg.hyperparams.lr_structure = 1e-9;
    match run_pipeline(&cfg, &mut quiet()) {
        Err(SearchError::TargetMissed {
            exported,
            limit,
            r_c,
            ..
        }) => {
            assert!(exported > limit);
            assert!(r_c > 0.0);
        }
        other => panic!("expected a target miss, got {other:?}"),
    }
}

#[test]
fn records_follow_schedule() {
    let cfg = toy("np");
    let mut recs = Vec::new();
    let out = run_pipeline(&cfg, &mut |r| {
        recs.push(r.clone());
        Ok(())
    })
    .unwrap();
    let search: Vec<_> = recs.iter().filter(|r| r.stage == "search").collect();
    assert_eq!(search.len(), 5);
    assert_eq!(search[0].r_t, Some(out.report.r_supernet));
    // default width-only tail of 4/5 = 0 epochs
    for r in &search[1..] {
        let want = target_schedule(r.epoch, 4, out.report.r_final, out.report.r_supernet).unwrap();
        assert_eq!(r.r_t, Some(want));
    }
    assert_eq!(search[4].r_t, Some(out.report.r_final));
    assert_eq!(recs.iter().filter(|r| r.stage == "retrain").count(), 3);
}

#[test]
fn width_only_tail_holds_final_target() {
    let mut cfg = toy("np");
    cfg.hyperparams.width_only_epochs = Some(2);
    let mut recs = Vec::new();
    let out = run_pipeline(&cfg, &mut |r| {
        recs.push(r.clone());
        Ok(())
    })
    .unwrap();
    let phases: Vec<_> = recs[1..5].iter().map(|r| r.phase.unwrap()).collect();
    assert_eq!(phases, [Phase::Joint, Phase::Joint, Phase::WidthOnly, Phase::WidthOnly]);
    for r in &recs[2..5] {
        assert_eq!(r.r_t, Some(out.report.r_final));
    }
}

#[test]
fn resume_continues_bit_identically() {
    let cfg = toy("np").resolved();
    let hp = &cfg.hyperparams;
    let data = cfg.task.generate().unwrap();
    let rm = ResourceModel::Macs;
    let net = toy_net(&cfg, 0);
    let r_final = 0.5 * supernet_consumption(net.layout(), &rm).unwrap();

    let mut straight = Search::new(net.clone(), &rm, r_final, hp, false).unwrap();
    while !straight.is_done() {
        straight.run_epoch(&data, &rm, hp).unwrap();
    }

    let mut first = Search::new(net, &rm, r_final, hp, false).unwrap();
    first.run_epoch(&data, &rm, hp).unwrap();
    first.run_epoch(&data, &rm, hp).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("search.ckpt");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Search::resume(&Checkpoint::load(&path).unwrap()).unwrap();
    while !resumed.is_done() {
        resumed.run_epoch(&data, &rm, hp).unwrap();
    }
    assert_eq!(resumed, straight);
}

#[test]
fn same_config_same_result() {
    let cfg = toy("np");
    let a = run_pipeline(&cfg, &mut quiet()).unwrap();
    let b = run_pipeline(&cfg, &mut quiet()).unwrap();
    assert_eq!(a.architecture, b.architecture);
    assert_eq!(a.report, b.report);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn config_defaults_and_strictness() {
    let cfg = toy("np");
    let hp = Hyperparams::default();
    assert_eq!(hp.lambda_resource, 1.0);
    assert_eq!(hp.lr_structure, 5e-3);
    assert_eq!(hp.decay, 0.99);
    assert_eq!(hp.search_epochs(), 10);
    assert_eq!(hp.width_only_epochs(), 2);
    assert_eq!(cfg.operators, OperatorOptions::default());

    let echoed = serde_json::to_string(&cfg.resolved()).unwrap();
    let back: PipelineConfig = serde_json::from_str(&echoed).unwrap();
    assert_eq!(back, cfg.resolved());
    assert_eq!(back.resolved(), back);

    let typo = toy_json("np", r#", "hyperparams_": {}"#);
    assert!(serde_json::from_str::<PipelineConfig>(&typo).is_err());
    let bad_hp = toy_json("np", "").replace(r#""seed": 1"#, r#""seed": 1, "lr": 2"#);
    assert!(serde_json::from_str::<PipelineConfig>(&bad_hp).is_err());
    let bad_enum = toy_json("q", "");
    assert!(serde_json::from_str::<PipelineConfig>(&bad_enum).is_err());

    let mut c = toy("np");
    c.hyperparams.width_only_epochs = Some(5);
    assert!(c.validate().is_err());
    c = toy("np");
    c.hyperparams.lr_structure = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn pipelines_check_checkpoint_presence() {
    assert!(toy("p-").validate().is_err());
    assert!(toy("p").validate().is_err());
    let mut np = toy("np");
    np.checkpoint = Some("w.ckpt".into());
    assert!(matches!(
        run_pipeline(&np, &mut quiet()),
        Err(SearchError::Config(_))
    ));
}

fn pretrained(cfg: &PipelineConfig, dir: &std::path::Path) -> std::path::PathBuf {
    let data = cfg.task.generate().unwrap();
    let ck = pretrain(&cfg.model, &data, &cfg.hyperparams, &mut quiet()).unwrap();
    let path = dir.join("pretrained.ckpt");
    ck.save(&path).unwrap();
    path
}

#[test]
fn pipeline_weight_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let path = pretrained(&toy("np"), dir.path());
    let bytes = std::fs::read(&path).unwrap();
    let digest = weight_digest(&Checkpoint::load(&path).unwrap().params);

    let np = run_pipeline(&toy("np"), &mut quiet()).unwrap();
    assert_eq!(np.report.checkpoints_read, 0);
    assert_eq!(np.report.pretrained_digest, None);

    let mut pm = toy("p-");
    pm.checkpoint = Some(path.clone());
    let out = run_pipeline(&pm, &mut quiet()).unwrap();
    assert_eq!(out.report.checkpoints_read, 1);
    assert_eq!(out.report.pretrained_digest.as_deref(), Some(digest.as_str()));
    assert_eq!(out.report.searched_digest, digest);
    assert_eq!(out.search.params, Checkpoint::load(&path).unwrap().params);
    assert_eq!(out.report.retrain_epochs, 0);
    assert!(out.search.operators.iter().any(|o| o.a > 0.0));

    let mut p = toy("p");
    p.checkpoint = Some(path.clone());
    let out = run_pipeline(&p, &mut quiet()).unwrap();
    assert_eq!(out.report.checkpoints_read, 1);
    assert_eq!(out.report.pretrained_digest.as_deref(), Some(digest.as_str()));
    assert_ne!(out.report.searched_digest, digest);

    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn p_minus_exports_pretrained_slices() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy("p-");
    cfg.checkpoint = Some(pretrained(&toy("np"), dir.path()));
    let out = run_pipeline(&cfg, &mut quiet()).unwrap();
    let fc1 = out.architecture.entry("fc1").unwrap();
    let input = out.architecture.entry("input").unwrap();
    let full = &out.search.params[0];
    let cut = &out.model.params()[0];
    assert_eq!(cut.shape(), &[input.k, fc1.k]);
    for (r, &i) in input.retained.iter().enumerate() {
        for (c, &j) in fc1.retained.iter().enumerate() {
            assert_eq!(cut.data()[r * fc1.k + c], full.data()[i * 16 + j]);
        }
    }
}

#[test]
fn p_rejects_checkpoint_for_another_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut other = toy("np");
    if let crate::network::LayerSpec::Linear { out_features, .. } = &mut other.model.layers[0] {
        *out_features = 12;
    }
    let mut cfg = toy("p");
    cfg.checkpoint = Some(pretrained(&other, dir.path()));
    assert!(matches!(run_pipeline(&cfg, &mut quiet()), Err(SearchError::Config(_))));
}

fn one_hidden() -> ModelSpec {
    serde_json::from_str(
        r#"{"input_dim": 100, "layers": [
             {"kind": "linear", "name": "hidden", "out_features": 200, "activation": "relu",
              "search": {}},
             {"kind": "linear", "name": "out", "out_features": 100}]}"#,
    )
    .unwrap()
}

#[test]
fn uniform_baseline_examples() {
    let spec = one_hidden();
    let rm = ResourceModel::Macs;
    let full = spec.count(crate::network::ResourceKind::Macs).unwrap();
    assert_eq!(full, 40000.0);

    let (desc, s) = uniform_baseline(&spec, full, &rm).unwrap();
    assert_eq!(s, 1.0);
    assert_eq!(desc.entry("hidden").unwrap().k, 200);

    // MACs = 100·h + h·100, so a quarter of the budget is h = 50
    let (desc, s) = uniform_baseline(&spec, 0.25 * full, &rm).unwrap();
    assert_eq!(desc.entry("hidden").unwrap().k, 50);
    assert!((s - 0.25).abs() < 2.5e-3, "{s}");
    assert_eq!(desc.provenance.source.as_deref(), Some("uniform"));

    // one hidden unit costs 200 MACs
    assert!(uniform_baseline(&spec, 100.0, &rm).is_err());
}

#[test]
fn uniform_baseline_keeps_input() {
    let cfg = toy("np");
    let rm = ResourceModel::Macs;
    let full = cfg.model.count(crate::network::ResourceKind::Macs).unwrap();
    // both hidden widths at h cost h² + 11h MACs
    let (desc, _) = uniform_baseline(&cfg.model, 210.0, &rm).unwrap();
    assert!(full > 210.0);
    assert_eq!(desc.entry("input").unwrap().k, 8);
    assert_eq!(desc.entry("fc1").unwrap().k, 10);
    assert_eq!(desc.model.count(crate::network::ResourceKind::Macs).unwrap(), 210.0);
}

#[test]
fn retrain_zero_epochs_is_chance() {
    let cfg = toy("np");
    let data = cfg.task.generate().unwrap();
    let hp = Hyperparams {
        retrain_epochs: 0,
        ..cfg.hyperparams.clone()
    };
    let (desc, _) = Network::skeleton(&cfg.model, OperatorOptions::default())
        .unwrap()
        .export_pruned()
        .unwrap();
    let net = retrain(&desc.model, &data, &hp, &mut quiet()).unwrap();
    let m = evaluate_on(&net, &desc, &data, Split::Test).unwrap();
    let acc = m.accuracy.unwrap();
    assert!((acc - 1.0 / 3.0).abs() < 0.1, "{acc}");

    let trained = retrain(&desc.model, &data, &cfg.hyperparams, &mut quiet()).unwrap();
    let again = retrain(&desc.model, &data, &cfg.hyperparams, &mut quiet()).unwrap();
    assert_eq!(trained.params(), again.params());
    assert_eq!(
        evaluate_on(&trained, &desc, &data, Split::Test).unwrap(),
        evaluate_on(&again, &desc, &data, Split::Test).unwrap()
    );
}

#[test]
fn checkpoint_rejects_foreign_bytes() {
    let ck = Checkpoint::of(&toy_net(&toy("np"), 0));
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&newer).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::from_bytes(b"DMS").is_err());
}
