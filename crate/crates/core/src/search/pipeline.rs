use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{weight_digest, Checkpoint};
use super::train::{ratios, EpochRecord, Phase, TaskData};
use super::{evaluate, train_epoch, Adam, EvalMetrics, Hyperparams, Pipeline, PipelineConfig};
use super::{Result, SearchError};
use crate::data::Dataset;
use crate::network::{
    ArchitectureDescription, MaskSource, ModelSpec, Network, OperatorOptions, Provenance,
    ResourceKind,
};
use crate::resource::{
    consumption_value, discrete_consumption, supernet_consumption, target_schedule,
    ResourceModel,
};
use crate::topk::ImportanceMetric;

/// Exported resource may exceed the final target by this factor.
pub const TARGET_SLACK: f64 = 1.02;

// independent random streams derived from the run seed
const STREAM_INIT: u64 = 0;
const STREAM_SEARCH_ORDER: u64 = 1;
const STREAM_RETRAIN_INIT: u64 = 2;
const STREAM_RETRAIN_ORDER: u64 = 3;

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything needed to continue a search bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    /// Completed epochs.
    pub epoch: usize,
    pub epochs: usize,
    pub width_only_epochs: usize,
    pub structure_only: bool,
    pub r_supernet: f64,
    pub r_final: f64,
    pub rng: ChaCha8Rng,
    pub records: Vec<EpochRecord>,
    pub skipped_steps: usize,
}

/// A search in progress over a supernet.
#[derive(Debug, Clone, PartialEq)]
pub struct Search {
    pub net: Network,
    pub adam: Adam,
    pub state: SearchState,
}

impl Search {
    /// Starts a search and records epoch 0 (`r_t = r_supernet`).
    pub fn new(
        net: Network,
        rm: &ResourceModel,
        r_final: f64,
        hp: &Hyperparams,
        structure_only: bool,
    ) -> Result<Self> {
        rm.check(net.layout())?;
        let r_supernet = supernet_consumption(net.layout(), rm)?;
        if !(r_final > 0.0 && r_final < r_supernet) {
            return Err(SearchError::Config(format!(
                "final target {r_final} must be positive and below the supernet's {r_supernet}"
            )));
        }
        let adam = Adam::new(hp.lr_weights, net.params());
        let mut s = Self {
            state: SearchState {
                epoch: 0,
                epochs: hp.search_epochs(),
                width_only_epochs: hp.width_only_epochs(),
                structure_only,
                r_supernet,
                r_final,
                rng: stream(hp.seed, STREAM_SEARCH_ORDER),
                records: Vec::new(),
                skipped_steps: 0,
            },
            net,
            adam,
        };
        let r_c = consumption_value(&s.net, rm)?;
        s.state.records.push(EpochRecord {
            stage: "search".into(),
            epoch: 0,
            phase: None,
            task_loss: None,
            resource_loss: None,
            r_c: Some(r_c),
            r_t: Some(r_supernet),
            a: ratios(&s.net),
            val_loss: None,
            val_accuracy: None,
            skipped_steps: 0,
        });
        Ok(s)
    }

    /// Epochs over which the target decays; the width-only tail follows.
    pub fn decay_epochs(&self) -> usize {
        self.state.epochs - self.state.width_only_epochs
    }

    /// Target for epoch `e` (1-based); held at the final target after decay.
    pub fn target(&self, e: usize) -> Result<f64> {
        let d = self.decay_epochs();
        if d == 0 {
            return Ok(self.state.r_final);
        }
        Ok(target_schedule(
            e.min(d),
            d,
            self.state.r_final,
            self.state.r_supernet,
        )?)
    }

    pub fn phase(&self, e: usize) -> Phase {
        match (e > self.decay_epochs(), self.state.structure_only) {
            (false, false) => Phase::Joint,
            (true, false) => Phase::WidthOnly,
            (false, true) => Phase::StructureOnly,
            (true, true) => Phase::StructureWidthOnly,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.state.epochs
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.state.records
    }

    /// Runs the next epoch and returns its record.
    pub fn run_epoch(
        &mut self,
        data: &Dataset,
        rm: &ResourceModel,
        hp: &Hyperparams,
    ) -> Result<EpochRecord> {
        let e = self.state.epoch + 1;
        let r_t = self.target(e)?;
        let phase = self.phase(e);
        let task = TaskData::new(&self.net, data)?;
        let stats = train_epoch(
            &mut self.net,
            &mut self.adam,
            &task,
            Some(rm),
            r_t,
            hp,
            phase,
            &mut self.state.rng,
            e,
        )?;
        let val = if data.val.rows() > 0 {
            Some(evaluate(&self.net, &task, &data.val, MaskSource::Soft)?)
        } else {
            None
        };
        let rec = EpochRecord {
            stage: "search".into(),
            epoch: e,
            phase: Some(phase),
            task_loss: Some(stats.task_loss),
            resource_loss: Some(stats.resource_loss),
            r_c: Some(consumption_value(&self.net, rm)?),
            r_t: Some(r_t),
            a: ratios(&self.net),
            val_loss: val.map(|v| v.loss),
            val_accuracy: val.and_then(|v| v.accuracy),
            skipped_steps: stats.skipped_steps,
        };
        self.state.epoch = e;
        self.state.skipped_steps += stats.skipped_steps;
        self.state.records.push(rec.clone());
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            adam: Some(self.adam.clone()),
            search: Some(self.state.clone()),
            ..Checkpoint::of(&self.net)
        }
    }

    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let (Some(adam), Some(state)) = (&ck.adam, &ck.search) else {
            return Err(SearchError::Checkpoint("holds no search state".into()));
        };
        Ok(Self {
            net: ck.network()?,
            adam: adam.clone(),
            state: state.clone(),
        })
    }
}

/// Trains a freshly initialized `spec` with every mask at one. On a
/// searchable spec this pretrains the supernet.
pub fn retrain(
    spec: &ModelSpec,
    data: &Dataset,
    hp: &Hyperparams,
    on_record: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Network> {
    let mut net = Network::build(
        spec,
        &mut stream(hp.seed, STREAM_RETRAIN_INIT),
        OperatorOptions::default(),
    )?;
    let task = TaskData::new(&net, data)?;
    let mut adam = Adam::new(hp.lr_weights, net.params());
    let mut rng = stream(hp.seed, STREAM_RETRAIN_ORDER);
    for e in 1..=hp.retrain_epochs {
        let stats = train_epoch(
            &mut net,
            &mut adam,
            &task,
            None,
            0.0,
            hp,
            Phase::WeightsOnly,
            &mut rng,
            e,
        )?;
        let val = if data.val.rows() > 0 {
            Some(evaluate(&net, &task, &data.val, MaskSource::Ones)?)
        } else {
            None
        };
        on_record(&EpochRecord {
            stage: "retrain".into(),
            epoch: e,
            phase: Some(Phase::WeightsOnly),
            task_loss: Some(stats.task_loss),
            resource_loss: None,
            r_c: None,
            r_t: None,
            a: Default::default(),
            val_loss: val.map(|v| v.loss),
            val_accuracy: val.and_then(|v| v.accuracy),
            skipped_steps: 0,
        })?;
    }
    Ok(net)
}

/// Supernet weights for the `p` and `p-` pipelines.
pub fn pretrain(
    spec: &ModelSpec,
    data: &Dataset,
    hp: &Hyperparams,
    on_record: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Checkpoint> {
    Ok(Checkpoint::of(&retrain(spec, data, hp, on_record)?))
}

/// Scales every searchable dimension except the model input by one shared
/// multiplier, keeping the first `k` elements, with the multiplier found by
/// bisection so the counted resource lands within 2% of `budget`.
pub fn uniform_baseline(
    spec: &ModelSpec,
    budget: f64,
    rm: &ResourceModel,
) -> Result<(ArchitectureDescription, f64)> {
    let mut net = Network::skeleton(
        spec,
        OperatorOptions {
            metric: ImportanceMetric::Index,
            ..Default::default()
        },
    )?;
    let layout = net.layout().clone();
    rm.check(&layout)?;
    let input_op = layout.dim_index("input").and_then(|d| net.dim_operator(d));
    let mut at = |s: f64| -> Result<(ArchitectureDescription, f64)> {
        for (i, op) in net.operators.iter_mut().enumerate() {
            if Some(i) == input_op {
                op.a = 0.0;
                continue;
            }
            let k = ((s * op.n as f64).round() as usize).max(1);
            op.a = 1.0 - k as f64 / op.n as f64;
            op.clamp_a();
        }
        let (desc, _) = net.export_pruned()?;
        let r = discrete_consumption(&layout, &desc, rm)?;
        Ok((desc, r))
    };
    let within = |r: f64| (r - budget).abs() <= 0.02 * budget;

    let (full, r_full) = at(1.0)?;
    if r_full <= budget {
        return Ok((with_source(full), 1.0));
    }
    let (_, r_min) = at(0.0)?;
    if r_min > budget * TARGET_SLACK {
        return Err(SearchError::Config(format!(
            "budget {budget} is below the smallest uniformly scaled model ({r_min})"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if at(mid)?.1 <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for s in [lo, hi] {
        let (desc, r) = at(s)?;
        if within(r) {
            return Ok((with_source(desc), s));
        }
    }
    Err(SearchError::Config(format!(
        "no uniform multiplier lands within 2% of budget {budget} \
         (nearest: {} and {})",
        at(lo)?.1,
        at(hi)?.1
    )))
}

fn with_source(mut d: ArchitectureDescription) -> ArchitectureDescription {
    d.provenance.source = Some("uniform".into());
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub multiplier: f64,
    pub resource: f64,
    pub test: EvalMetrics,
}

/// Summary of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub resource_kind: ResourceKind,
    pub r_supernet: f64,
    pub r_final: f64,
    /// Soft consumption at the end of the search.
    pub search_r_c: f64,
    pub exported_resource: f64,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub checkpoints_read: usize,
    pub pretrained_digest: Option<String>,
    /// Supernet weights after the search.
    pub searched_digest: String,
    /// Largest number of units of any operator with mask in (0.05, 0.95).
    pub max_fuzzy_units: usize,
    pub soft_val_loss: Option<f64>,
    pub exported_val_loss: Option<f64>,
    pub skipped_steps: usize,
    pub test: EvalMetrics,
    pub baseline: Option<BaselineReport>,
}

/// Outputs of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub architecture: ArchitectureDescription,
    /// The retrained model (`np`, `p`) or the pruned pretrained one (`p-`).
    pub model: Network,
    /// Supernet with operator and search state at the end of the search.
    pub search: Checkpoint,
}

/// Runs a configured pipeline end to end, streaming epoch records.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    on_record: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let hp = &cfg.hyperparams;
    let data = cfg.task.generate()?;
    let rm = cfg.resource.model()?;

    let mut net = Network::build(&cfg.model, &mut stream(hp.seed, STREAM_INIT), cfg.operators)?;
    let mut checkpoints_read = 0;
    let mut pretrained_digest = None;
    if let Some(path) = &cfg.checkpoint {
        let ck = Checkpoint::load(path)?;
        checkpoints_read += 1;
        if ck.spec != cfg.model {
            return Err(SearchError::Config(format!(
                "checkpoint {} was trained for a different model",
                path.display()
            )));
        }
        net.set_params(ck.params)?;
        pretrained_digest = Some(weight_digest(net.params()));
    }
    let task = TaskData::new(&net, &data)?;
    rm.check(net.layout())?;
    let r_supernet = supernet_consumption(net.layout(), &rm)?;
    let r_final = cfg.resource.target.resolve(r_supernet)?;

    let mut search = Search::new(net, &rm, r_final, hp, cfg.pipeline == Pipeline::PMinus)?;
    on_record(&search.records()[0])?;
    while !search.is_done() {
        let rec = search.run_epoch(&data, &rm, hp)?;
        on_record(&rec)?;
    }
    let supernet = &search.net;
    let search_r_c = consumption_value(supernet, &rm)?;

    let (mut desc, pruned) = supernet.export_pruned()?;
    desc.provenance = Provenance {
        source: Some("dms".into()),
        pipeline: Some(cfg.pipeline.to_string()),
        seed: Some(hp.seed),
    };
    let exported = discrete_consumption(supernet.layout(), &desc, &rm)?;
    if exported > TARGET_SLACK * r_final {
        return Err(SearchError::TargetMissed {
            exported,
            limit: TARGET_SLACK * r_final,
            target: r_final,
            r_c: search_r_c,
        });
    }

    let max_fuzzy_units = supernet
        .operators
        .iter()
        .map(|o| o.fuzzy_units())
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .max()
        .unwrap_or(0);
    let (soft_val_loss, exported_val_loss) = if data.val.rows() > 0 {
        let soft = evaluate(supernet, &task, &data.val, MaskSource::Soft)?;
        let hard = evaluate_on(&pruned, &desc, &data, Split::Val)?;
        (Some(soft.loss), Some(hard.loss))
    } else {
        (None, None)
    };

    let model = match cfg.pipeline {
        Pipeline::PMinus => pruned,
        Pipeline::Np | Pipeline::P => retrain(&desc.model, &reduced(&data, &desc)?, hp, on_record)?,
    };
    let test = evaluate_on(&model, &desc, &data, Split::Test)?;

    let baseline = if cfg.compare_baseline {
        let (bdesc, multiplier) = uniform_baseline(&cfg.model, r_final, &rm)?;
        let resource = discrete_consumption(search.net.layout(), &bdesc, &rm)?;
        let bnet = retrain(&bdesc.model, &reduced(&data, &bdesc)?, hp, &mut |_| Ok(()))?;
        Some(BaselineReport {
            multiplier,
            resource,
            test: evaluate_on(&bnet, &bdesc, &data, Split::Test)?,
        })
    } else {
        None
    };

    let report = PipelineReport {
        pipeline: cfg.pipeline,
        seed: hp.seed,
        resource_kind: rm.kind(),
        r_supernet,
        r_final,
        search_r_c,
        exported_resource: exported,
        search_epochs: hp.search_epochs(),
        retrain_epochs: if cfg.pipeline == Pipeline::PMinus {
            0
        } else {
            hp.retrain_epochs
        },
        checkpoints_read,
        pretrained_digest,
        searched_digest: weight_digest(search.net.params()),
        max_fuzzy_units,
        soft_val_loss,
        exported_val_loss,
        skipped_steps: search.state.skipped_steps,
        test,
        baseline,
    };
    Ok(PipelineOutcome {
        report,
        architecture: desc,
        search: search.checkpoint(),
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

/// Dataset restricted to the input features an architecture retains.
pub fn reduced(data: &Dataset, desc: &ArchitectureDescription) -> Result<Dataset> {
    let Some(input) = desc.entry("input") else {
        return Ok(data.clone());
    };
    if input.k == input.n_max {
        return Ok(data.clone());
    }
    let tokens = desc.model.seq_len;
    let n = input.n_max;
    let cols: Vec<usize> = (0..tokens)
        .flat_map(|t| input.retained.iter().map(move |&c| t * n + c))
        .collect();
    let pick = |s: &crate::data::Split| crate::data::Split {
        cols: cols.len(),
        x: (0..s.rows())
            .flat_map(|r| cols.iter().map(move |&c| s.x[r * s.cols + c]))
            .collect(),
        y: s.y.clone(),
    };
    Ok(Dataset {
        train: pick(&data.train),
        val: pick(&data.val),
        test: pick(&data.test),
        output: data.output.clone(),
        metadata: data.metadata.clone(),
    })
}

/// Evaluates a discrete model of `desc` on the matching input features.
pub fn evaluate_on(
    net: &Network,
    desc: &ArchitectureDescription,
    data: &Dataset,
    split: Split,
) -> Result<EvalMetrics> {
    let r = reduced(data, desc)?;
    let task = TaskData::new(net, &r)?;
    let s = match split {
        Split::Val => &r.val,
        Split::Test => &r.test,
    };
    evaluate(net, &task, s, MaskSource::Ones)
}
