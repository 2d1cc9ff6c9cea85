use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Method, ProtocolConfig};
use crate::data::{build_split_mnist, load_mnist, TaskDataset};
use crate::ensemble::{argmax, fine_tune, full_retrain, fuse, train_expert, ExpertModel};
use crate::error::{Error, Result};
use crate::indomain::{embed, membership, train_feature_extractor, DistanceKind, InDomainModel, MembershipVector, OutlierScorer};
use crate::losses::update_center_epoch;
use crate::merge::{distill_experts, merge_in_domain};
use crate::metrics::{self, backward_transfer, mean, sample_std, AccuracyMatrix};
use crate::nn::{Activation, DenseNet};
use crate::rng::Rng;

// Fork streams. Each artifact draws from its own stream so that what gets
// trained does not depend on which methods are enabled.
const STREAM_EXPERT: u64 = 100;
const STREAM_FE: u64 = 200;
const STREAM_DM: u64 = 300;
const STREAM_PRETRAINED: u64 = 400;
const STREAM_FINE_TUNE: u64 = 500;
const STREAM_FULL_RETRAIN: u64 = 600;
const STREAM_DISTILL: u64 = 700;

/// Per-run random generator.
pub fn run_rng(cfg: &ProtocolConfig, run: usize) -> Rng {
    Rng::new(cfg.seed).fork(run as u64)
}

/// Loads MNIST from the configured directory and applies the sample caps.
pub fn load_tasks(cfg: &ProtocolConfig) -> Result<Vec<TaskDataset>> {
    let (train, test) = load_mnist(&cfg.data_dir())?;
    Ok(build_split_mnist(&train, &test)
        .into_iter()
        .take(cfg.tasks)
        .map(|t| t.truncated(cfg.max_train, cfg.max_test))
        .collect())
}

/// SHA-256 over a network's parameters.
pub fn params_digest(net: &DenseNet) -> String {
    let mut h = Sha256::new();
    for v in net.params_flat() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// What to build for one task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TaskNeeds {
    pub expert: bool,
    pub lof: bool,
    pub mahalanobis: bool,
    pub pretrained: bool,
}

impl TaskNeeds {
    pub fn for_methods(methods: &[Method]) -> Self {
        let has = |m| methods.contains(&m);
        Self {
            expert: methods.iter().any(|m| m.uses_ensemble()),
            lof: has(Method::FeDmLof),
            mahalanobis: has(Method::FeDmMahalanobis),
            pretrained: has(Method::PretrainedFeDm),
        }
    }
}

/// Models trained on a single task. Never modified once built.
#[derive(Debug, Clone, Default)]
pub struct TaskModels {
    pub expert: Option<ExpertModel>,
    pub lof: Option<InDomainModel>,
    pub mahalanobis: Option<InDomainModel>,
    pub pretrained: Option<InDomainModel>,
}

/// Trains the expert and in-domain models of `task` using its training set only.
pub fn train_task(cfg: &ProtocolConfig, rng: &Rng, task: &TaskDataset, needs: TaskNeeds) -> Result<TaskModels> {
    let t = task.task_id as u64;
    let mut out = TaskModels::default();
    if needs.expert {
        out.expert = Some(train_expert(
            task.task_id,
            &task.train,
            &cfg.expert,
            &mut rng.fork(STREAM_EXPERT + t),
        )?);
    }
    if needs.lof || needs.mahalanobis {
        let trained = train_feature_extractor(&task.train, &cfg.fe, &mut rng.fork(STREAM_FE + t))?;
        let emb = embed(&trained.fe, task.train.inputs())?;
        for (want, kind) in [(needs.lof, DistanceKind::Lof), (needs.mahalanobis, DistanceKind::Mahalanobis)] {
            if want {
                let model = InDomainModel::from_embeddings(
                    trained.fe.clone(),
                    trained.center.clone(),
                    emb.view(),
                    kind,
                    &cfg.dm,
                    &mut rng.fork(STREAM_DM + t),
                )?;
                match kind {
                    DistanceKind::Lof => out.lof = Some(model),
                    DistanceKind::Mahalanobis => out.mahalanobis = Some(model),
                }
            }
        }
    }
    if needs.pretrained {
        let mut r = rng.fork(STREAM_PRETRAINED + t);
        let fe = DenseNet::new(&cfg.fe.dims(task.train.dim()), Activation::Relu, Activation::Identity, &mut r)?;
        let center = update_center_epoch(&fe, task.train.inputs())?;
        out.pretrained = Some(InDomainModel::fit(
            fe,
            center,
            task.train.inputs(),
            DistanceKind::Lof,
            &cfg.dm,
            &mut r,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub run: usize,
    pub task: usize,
    pub artifact: String,
    pub sha256: String,
}

/// Outcome of one method across all runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    /// One accuracy matrix per run.
    pub matrices: Vec<AccuracyMatrix>,
    /// Final-stage average accuracy per run.
    pub final_average: Vec<f64>,
    pub average_mean: f64,
    /// Sample standard deviation over runs.
    pub average_std: f64,
    /// Per run; empty for single-task protocols.
    pub bwt: Vec<f64>,
    pub bwt_mean: Option<f64>,
    /// Final-stage task-identification accuracy per run (dynamic methods only).
    pub membership_accuracy: Vec<f64>,
    pub membership_accuracy_mean: Option<f64>,
    /// Final-stage own-task membership histograms summed over runs, one per true task.
    pub histograms: Vec<Vec<usize>>,
}

/// Deterministic result of a protocol run. Wall-clock lives in [`Timings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ProtocolConfig,
    pub seeds: Vec<u64>,
    pub results: Vec<MethodResult>,
    pub fingerprints: Vec<Fingerprint>,
}

impl RunReport {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub run: usize,
    pub stage: usize,
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings(pub Vec<Timing>);

impl Timings {
    fn time<T>(&mut self, run: usize, stage: usize, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.0.push(Timing {
            run,
            stage,
            phase: phase.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|t| t.seconds).sum()
    }
}

/// Per-probe quantities for (model task i, test task j), computed once.
#[derive(Default)]
struct Cache {
    probs: BTreeMap<(usize, usize), Array2<f64>>,
    scores: BTreeMap<(Method, usize, usize), Vec<f64>>,
}

fn in_domain(models: &TaskModels, method: Method) -> Option<&InDomainModel> {
    match method {
        Method::FeDmLof => models.lof.as_ref(),
        Method::FeDmMahalanobis => models.mahalanobis.as_ref(),
        Method::PretrainedFeDm => models.pretrained.as_ref(),
        _ => None,
    }
}

/// Fused predictions of the stage-`stage` ensemble on test task `j`.
/// Returns (accuracy, own-task membership per probe, argmax membership per probe).
fn ensemble_eval(
    method: Method,
    cfg: &ProtocolConfig,
    cache: &Cache,
    stage: usize,
    test: &TaskDataset,
) -> Result<(f64, Vec<f64>, Vec<usize>)> {
    let j = test.task_id;
    let slots = stage + 1;
    let n = test.test.len();
    let probs: Vec<&Array2<f64>> = (0..slots).map(|i| &cache.probs[&(i, j)]).collect();
    let scores: Vec<&Vec<f64>> = if method.is_dynamic() {
        (0..slots).map(|i| &cache.scores[&(method, i, j)]).collect()
    } else {
        Vec::new()
    };
    let mut correct = 0;
    let mut own = Vec::with_capacity(n);
    let mut winners = Vec::with_capacity(n);
    let mut row_scores = vec![0.0; slots];
    for p in 0..n {
        let m = match method {
            Method::Equal => MembershipVector::equal(slots),
            Method::Manual => MembershipVector::one_hot(slots, j),
            _ => {
                for (i, s) in scores.iter().enumerate() {
                    row_scores[i] = s[p];
                }
                membership(&row_scores, cfg.beta)?
            }
        };
        let rows: Vec<&[f64]> = probs.iter().map(|a| a.row(p).to_slice().expect("row-major")).collect();
        let fused = fuse(&rows, &m)?;
        if argmax(&fused) == test.test.labels()[p] {
            correct += 1;
        }
        own.push(m.0[j]);
        winners.push(m.argmax());
    }
    Ok((100.0 * correct as f64 / n.max(1) as f64, own, winners))
}

struct RunOutcome {
    matrices: BTreeMap<Method, AccuracyMatrix>,
    own: BTreeMap<Method, Vec<Vec<f64>>>,
    winners: BTreeMap<Method, Vec<Vec<usize>>>,
    fingerprints: Vec<Fingerprint>,
}

fn run_once(cfg: &ProtocolConfig, tasks: &[TaskDataset], run: usize, timings: &mut Timings) -> Result<RunOutcome> {
    let methods = cfg.method_set();
    let rng = run_rng(cfg, run);
    let needs = TaskNeeds::for_methods(&methods);
    let t_total = tasks.len();
    let mut models: Vec<TaskModels> = Vec::with_capacity(t_total);
    let mut cache = Cache::default();
    let mut matrices: BTreeMap<Method, AccuracyMatrix> = methods.iter().map(|&m| (m, AccuracyMatrix::new(t_total))).collect();
    let mut own = BTreeMap::new();
    let mut winners = BTreeMap::new();
    let mut fingerprints = Vec::new();
    let mut tuned: Option<ExpertModel> = None;

    for stage in 0..t_total {
        // Only tasks 0..=stage are visible from here on.
        let seen = &tasks[..=stage];
        let current = &seen[stage];
        let trained = timings.time(run, stage, "train_task", || train_task(cfg, &rng, current, needs))?;
        if let Some(e) = &trained.expert {
            fingerprints.push(Fingerprint {
                run,
                task: stage,
                artifact: "expert".into(),
                sha256: params_digest(&e.net),
            });
        }
        for (name, m) in [
            ("fe_lof", &trained.lof),
            ("fe_mahalanobis", &trained.mahalanobis),
            ("pretrained_fe", &trained.pretrained),
        ] {
            if let Some(m) = m {
                fingerprints.push(Fingerprint {
                    run,
                    task: stage,
                    artifact: name.into(),
                    sha256: m.fingerprint().to_string(),
                });
            }
        }
        models.push(trained);

        timings.time(run, stage, "score_cache", || {
            for (i, model) in models.iter().enumerate() {
                for test in seen {
                    let j = test.task_id;
                    if i != stage && j != stage {
                        continue;
                    }
                    if let Some(e) = &model.expert {
                        cache.probs.insert((i, j), e.predict_batch(test.test.inputs())?);
                    }
                    for &m in methods.iter().filter(|m| m.is_dynamic()) {
                        let dm = in_domain(model, m).expect("trained for this method");
                        cache.scores.insert((m, i, j), dm.outlier_scores(test.test.inputs())?);
                    }
                }
            }
            Ok(())
        })?;

        for &method in &methods {
            let r = matrices.get_mut(&method).expect("initialized");
            match method {
                Method::FineTuned => {
                    let next = timings.time(run, stage, "fine_tune", || {
                        let mut rr = rng.fork(STREAM_FINE_TUNE + stage as u64);
                        match &tuned {
                            None => train_expert(stage, &current.train, &cfg.expert, &mut rr),
                            Some(prev) => fine_tune(prev, stage, &current.train, &cfg.expert, &mut rr),
                        }
                    })?;
                    for test in seen {
                        r.set(stage, test.task_id, next.accuracy(&test.test)?)?;
                    }
                    tuned = Some(next);
                }
                Method::FullRetrain => {
                    let expert = timings.time(run, stage, "full_retrain", || {
                        let sets: Vec<_> = seen.iter().map(|t| &t.train).collect();
                        full_retrain(&sets, &cfg.expert, &mut rng.fork(STREAM_FULL_RETRAIN + stage as u64))
                    })?;
                    for test in seen {
                        r.set(stage, test.task_id, expert.accuracy(&test.test)?)?;
                    }
                }
                _ => {
                    let mut stage_own = Vec::new();
                    let mut stage_win = Vec::new();
                    for test in seen {
                        let (acc, o, w) = ensemble_eval(method, cfg, &cache, stage, test)?;
                        r.set(stage, test.task_id, acc)?;
                        stage_own.push(o);
                        stage_win.push(w);
                    }
                    if stage + 1 == t_total && method.is_dynamic() {
                        own.insert(method, stage_own);
                        winners.insert(method, stage_win);
                    }
                }
            }
        }
    }
    Ok(RunOutcome {
        matrices,
        own,
        winners,
        fingerprints,
    })
}

/// Runs the sequential protocol on already loaded tasks.
pub fn run_protocol_on(cfg: &ProtocolConfig, tasks: &[TaskDataset]) -> Result<(RunReport, Timings)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("protocol over zero tasks".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.task_id != i {
            return Err(Error::InvalidArgument(format!("task at position {i} has id {}", t.task_id)));
        }
    }
    let methods = cfg.method_set();
    let mut timings = Timings::default();
    let mut outcomes = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        outcomes.push(run_once(cfg, tasks, run, &mut timings)?);
    }

    let mut results = Vec::new();
    for &method in &methods {
        let matrices: Vec<AccuracyMatrix> = outcomes.iter().map(|o| o.matrices[&method].clone()).collect();
        let final_average = matrices.iter().map(|m| m.final_average()).collect::<Result<Vec<_>>>()?;
        let bwt = if tasks.len() >= 2 {
            matrices.iter().map(backward_transfer).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mut membership_accuracy = Vec::new();
        let mut histograms = vec![vec![0; cfg.histogram_bins]; if method.is_dynamic() { tasks.len() } else { 0 }];
        if method.is_dynamic() {
            for o in &outcomes {
                let rep = metrics::membership_report(0..tasks.len(), &o.own[&method], &o.winners[&method], cfg.histogram_bins);
                membership_accuracy.push(rep.accuracy);
                for (acc, h) in histograms.iter_mut().zip(rep.histograms) {
                    for (a, c) in acc.iter_mut().zip(h) {
                        *a += c;
                    }
                }
            }
        }
        results.push(MethodResult {
            method,
            average_mean: mean(&final_average),
            average_std: sample_std(&final_average),
            final_average,
            bwt_mean: (!bwt.is_empty()).then(|| mean(&bwt)),
            bwt,
            membership_accuracy_mean: (!membership_accuracy.is_empty()).then(|| mean(&membership_accuracy)),
            membership_accuracy,
            histograms,
            matrices,
        });
    }
    let report = RunReport {
        config: cfg.clone(),
        seeds: (0..cfg.runs).map(|r| run_rng(cfg, r).seed()).collect(),
        results,
        fingerprints: outcomes.into_iter().flat_map(|o| o.fingerprints).collect(),
    };
    Ok((report, timings))
}

/// Loads the data named by `cfg` and runs the protocol.
pub fn run_protocol(cfg: &ProtocolConfig) -> Result<(RunReport, Timings)> {
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    run_protocol_on(cfg, &tasks)
}

/// Three-task pipeline with and without merging tasks 0 and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    /// Average accuracy over the three test sets, per run.
    pub unmerged: Vec<f64>,
    pub merged: Vec<f64>,
    /// Student vs. teacher accuracy on tasks 0 and 1, per run.
    pub student_accuracy: Vec<[f64; 2]>,
    pub unmerged_mean: f64,
    pub merged_mean: f64,
}

fn fused_accuracy(experts: &[&ExpertModel], scorers: &[&dyn OutlierScorer], beta: f64, test: &TaskDataset) -> Result<f64> {
    let x = test.test.inputs();
    let probs: Vec<Array2<f64>> = experts.iter().map(|e| e.predict_batch(x)).collect::<Result<_>>()?;
    let scores: Vec<Vec<f64>> = scorers.iter().map(|s| s.outlier_scores(x)).collect::<Result<_>>()?;
    let mut correct = 0;
    for p in 0..test.test.len() {
        let s: Vec<f64> = scores.iter().map(|v| v[p]).collect();
        let m = membership(&s, beta)?;
        let rows: Vec<&[f64]> = probs.iter().map(|a| a.row(p).to_slice().expect("row-major")).collect();
        if argmax(&fuse(&rows, &m)?) == test.test.labels()[p] {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test.test.len().max(1) as f64)
}

/// Compares the LOF ensemble over tasks 0..3 against the same ensemble with
/// tasks 0 and 1 distilled into one expert and their in-domain models averaged.
pub fn run_merge_experiment(cfg: &ProtocolConfig, tasks: &[TaskDataset]) -> Result<MergeReport> {
    cfg.validate()?;
    if tasks.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "merge experiment needs 3 tasks, got {}",
            tasks.len()
        )));
    }
    let tasks = &tasks[..3];
    let needs = TaskNeeds {
        expert: true,
        lof: true,
        ..TaskNeeds::default()
    };
    let mut unmerged = Vec::new();
    let mut merged = Vec::new();
    let mut student_accuracy = Vec::new();
    for run in 0..cfg.runs {
        let rng = run_rng(cfg, run);
        let models: Vec<TaskModels> = tasks.iter().map(|t| train_task(cfg, &rng, t, needs)).collect::<Result<_>>()?;
        let experts: Vec<&ExpertModel> = models.iter().map(|m| m.expert.as_ref().expect("expert")).collect();
        let dms: Vec<&InDomainModel> = models.iter().map(|m| m.lof.as_ref().expect("lof")).collect();

        let scorers: Vec<&dyn OutlierScorer> = dms.iter().map(|d| *d as &dyn OutlierScorer).collect();
        let accs = tasks
            .iter()
            .map(|t| fused_accuracy(&experts, &scorers, cfg.beta, t))
            .collect::<Result<Vec<_>>>()?;
        unmerged.push(mean(&accs));

        let student = distill_experts(experts[0], experts[1], &cfg.distill, &mut rng.fork(STREAM_DISTILL))?;
        let merged_dm = merge_in_domain(dms[0].clone(), dms[1].clone());
        let m_experts = [&student, experts[2]];
        let m_scorers: [&dyn OutlierScorer; 2] = [&merged_dm, dms[2]];
        let accs = tasks
            .iter()
            .map(|t| fused_accuracy(&m_experts, &m_scorers, cfg.beta, t))
            .collect::<Result<Vec<_>>>()?;
        merged.push(mean(&accs));
        student_accuracy.push([student.accuracy(&tasks[0].test)?, student.accuracy(&tasks[1].test)?]);
    }
    Ok(MergeReport {
        unmerged_mean: mean(&unmerged),
        merged_mean: mean(&merged),
        unmerged,
        merged,
        student_accuracy,
    })
}
