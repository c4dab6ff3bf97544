use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::Serialize;

use empathic::dataset::{behavior_episode, build_dataset, derive_seed, Dataset, DatasetConfig};
use empathic::features::{make_splits, partition, WindowSample};
use empathic::frame::load_feature_csv;
use empathic::gridworld::{EnvState, ObjectType, RewardClass, RewardSpec};
use empathic::inference::{rank_episode, HypothesisSpace, Likelihood, Pooling, RankConfig, RankingReport};
use empathic::model::{checkpoint, train as fit, EpochRecord, Model, TrainConfig, TrainReport};
use empathic::observer::ObserverProfile;
use empathic::planning::{run_episode, GreedyPolicy, RandomPolicy, SWITCH_PROB};
use empathic::robotic::{evaluate_transfer, TrajectorySet};
use empathic::session::experiments::{metrics_csv, online_batch, train_final, transfer_csv, OnlineBatchConfig};
use empathic::session::{OnlineSession, ReactionSource, ReplanTrigger, SessionConfig};
use empathic::stats::{wilcoxon_signed_rank, Alternative, WilcoxonResult};

use crate::serve::{serve_on, ServeOptions};
use crate::{LikelihoodArg, PolicyArg, PoolingArg, ProfileArgs, RankArgs, ReplanArg, SessionArgs, SpaceArg};

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> anyhow::Result<Arc<Model>> {
    Ok(Arc::new(checkpoint::load(path).with_context(|| format!("loading model {}", path.display()))?))
}

impl ProfileArgs {
    fn resolve(&self) -> anyhow::Result<ObserverProfile> {
        let base = match self.profile.as_str() {
            "clean" => ObserverProfile::clean(),
            "default" => ObserverProfile::default_profile(),
            path => {
                let bytes = std::fs::read(path).with_context(|| format!("reading profile {path}"))?;
                serde_json::from_slice(&bytes).with_context(|| format!("parsing profile {path}"))?
            }
        };
        let p = match self.confusion {
            Some(c) if !(0.0..=1.0).contains(&c) => bail!("confusion {c} must lie in [0, 1]"),
            Some(c) => base.with_confusion(c),
            None => base,
        };
        p.validate()?;
        Ok(p)
    }
}

impl RankArgs {
    fn config(self) -> RankConfig {
        RankConfig {
            space: match self.space {
                SpaceArg::Permutations => HypothesisSpace::Permutations,
                SpaceArg::BehaviorMappings => HypothesisSpace::BehaviorMappings,
            },
            pooling: match self.pooling {
                PoolingArg::GeometricMean => Pooling::GeometricMean,
                PoolingArg::PerFrame => Pooling::PerFrame,
            },
            likelihood: match self.likelihood {
                LikelihoodArg::Predicted => Likelihood::Predicted,
                LikelihoodArg::PriorCorrected => Likelihood::PriorCorrected,
            },
        }
    }
}

impl SessionArgs {
    fn apply(self, cfg: &mut SessionConfig) {
        cfg.rank = self.rank.config();
        cfg.replan = match self.replan {
            ReplanArg::BeliefUpdate => ReplanTrigger::BeliefUpdate,
            ReplanArg::Pickup => ReplanTrigger::Pickup,
        };
        cfg.warmup_ticks = self.warmup_ticks;
    }
}

#[derive(Serialize)]
struct EpisodeSummary {
    index: usize,
    seed: u64,
    total_reward: i64,
    pickups: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct SimulateReport {
    policy: &'static str,
    seed: u64,
    episodes: Vec<EpisodeSummary>,
    mean_return: f64,
}

pub fn simulate(seed: u64, episodes: usize, policy: PolicyArg, out: &Path) -> anyhow::Result<()> {
    if episodes == 0 {
        bail!("at least one episode required");
    }
    std::fs::create_dir_all(out)?;
    let truth = RewardSpec::ground_truth();
    let mut rows = Vec::new();
    for index in 0..episodes {
        let s = derive_seed(seed, &[index as u64]);
        let env = || EnvState::new_episode(derive_seed(s, &[1]), truth);
        let log = match policy {
            PolicyArg::Behavior => behavior_episode(s, SWITCH_PROB)?,
            PolicyArg::Greedy => run_episode(env(), &mut GreedyPolicy::new(&truth))?.0,
            PolicyArg::Random => run_episode(env(), &mut RandomPolicy::new(derive_seed(s, &[4])))?.0,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(out.join(format!("episode_{index:03}.jsonl")))?);
        log.write_jsonl(&mut w)?;
        let mut pickups: BTreeMap<String, usize> = ObjectType::ALL.iter().map(|o| (format!("{o:?}"), 0)).collect();
        for (_, o) in log.pickups() {
            *pickups.get_mut(&format!("{o:?}")).expect("every object type listed") += 1;
        }
        rows.push(EpisodeSummary { index, seed: s, total_reward: log.total_reward(), pickups });
    }
    let mean_return = rows.iter().map(|r| r.total_reward as f64).sum::<f64>() / rows.len() as f64;
    let policy = match policy {
        PolicyArg::Behavior => "behavior",
        PolicyArg::Greedy => "greedy",
        PolicyArg::Random => "random",
    };
    write_json(&out.join("summary.json"), &SimulateReport { policy, seed, episodes: rows, mean_return })?;
    println!("{episodes} episodes, mean return {mean_return:.3}");
    Ok(())
}

pub fn synth_data(subjects: usize, episodes: usize, profile: &ProfileArgs, seed: u64, out: &Path) -> anyhow::Result<()> {
    let cfg = DatasetConfig { subjects, episodes, profile: profile.resolve()?, seed, ..DatasetConfig::default() };
    let ds = build_dataset(&cfg)?;
    ds.save(out)?;
    println!("{} subjects x {} episodes, {} windows", subjects, episodes, ds.samples.len());
    Ok(())
}

#[derive(Serialize)]
struct FoldSummary {
    fold: usize,
    best_epoch: usize,
    best_test_loss: f64,
    validation_loss: Option<f64>,
    validation_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct TrainSummary {
    config: TrainConfig,
    folds: Vec<FoldSummary>,
    report: TrainReport,
}

fn accuracy(model: &Model, samples: &[&WindowSample]) -> anyhow::Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let preds = model.predict_many(samples)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| p.argmax() == s.label.index()).count();
    Ok(Some(hits as f64 / samples.len() as f64))
}

fn curves_csv(curves: &[EpochRecord]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train", "test", "validation"])?;
    for c in curves {
        w.write_record([c.epoch.to_string(), c.train.to_string(), c.test.to_string(), c.validation.map_or(String::new(), |v| v.to_string())])?;
    }
    Ok(w.into_inner()?)
}

pub fn train(data: &Path, config: Option<&Path>, folds: usize, seed: Option<u64>, binary: bool, out: &Path) -> anyhow::Result<()> {
    let ds = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let mut cfg = match config {
        Some(p) => {
            let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?;
            if cfg.window != ds.config.window {
                bail!("config window {:?} differs from the dataset's {:?}", cfg.window, ds.config.window);
            }
            cfg
        }
        None => TrainConfig { window: ds.config.window, ..TrainConfig::default() },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if binary {
        cfg = cfg.binary();
    }
    cfg.validate()?;
    let splits = make_splits(&ds.episodes_per_subject(), ds.config.seed)?;
    if folds > splits.folds.len() {
        bail!("{folds} folds requested, the dataset has {}", splits.folds.len());
    }
    let mut fold_rows = Vec::new();
    for (i, fold) in splits.folds.iter().take(folds).enumerate() {
        let parts = partition(&ds.samples, fold, ds.episode_ticks());
        let pick = |k: &str| parts[k].iter().map(|j| &ds.samples[*j]).collect::<Vec<_>>();
        let validation = pick("validation");
        let (model, report) = fit(&cfg, &pick("train"), &pick("test"), &validation)?;
        fold_rows.push(FoldSummary {
            fold: i,
            best_epoch: report.best_epoch,
            best_test_loss: report.best_test_loss,
            validation_loss: report.curves.iter().find(|c| c.epoch == report.best_epoch).and_then(|c| c.validation),
            validation_accuracy: accuracy(&model, &validation)?,
        });
        log::info!("fold {i}: best test loss {:.4}", report.best_test_loss);
    }
    let (model, report) = train_final(&ds, &splits, &cfg)?;
    std::fs::create_dir_all(out)?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    write_file(&out.join("curves.csv"), &curves_csv(&report.curves)?)?;
    println!("best epoch {} of {}, test loss {:.4}", report.best_epoch, report.curves.len(), report.best_test_loss);
    write_json(&out.join("train_report.json"), &TrainSummary { config: cfg, folds: fold_rows, report })?;
    Ok(())
}

#[derive(Serialize)]
struct RankedEpisode {
    subject: usize,
    episode: usize,
    n_events: usize,
    ranking: Option<RankingReport>,
}

#[derive(Serialize)]
struct RankReport {
    config: RankConfig,
    episodes: Vec<RankedEpisode>,
    /// Episodes without evidence count as zero.
    mean_tau: f64,
    wilcoxon: Option<WilcoxonResult>,
}

pub fn rank(model: &Path, data: &Path, report: &Path, all: bool, args: RankArgs) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let ds = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    if model.window() != ds.config.window {
        bail!("model window {:?} differs from the dataset's {:?}", model.window(), ds.config.window);
    }
    let cfg = args.config();
    let truth = RewardSpec::ground_truth();
    let targets: Vec<(usize, usize)> = if all {
        ds.sessions.iter().enumerate().flat_map(|(s, row)| (0..row.len()).map(move |e| (s, e))).collect()
    } else {
        let splits = make_splits(&ds.episodes_per_subject(), ds.config.seed)?;
        splits.holdout.iter().copied().enumerate().collect()
    };
    let mut episodes = Vec::new();
    for (subject, episode) in targets {
        let out = rank_episode(model.as_ref(), &ds.sessions[subject][episode], &truth, &cfg)?;
        let ranking = out.as_ref().map(|o| RankingReport::new(o, &truth)).transpose()?;
        episodes.push(RankedEpisode { subject, episode, n_events: out.map_or(0, |o| o.n_events), ranking });
    }
    let taus: Vec<f64> = episodes.iter().map(|e| e.ranking.as_ref().map_or(0.0, |r| r.tau)).collect();
    let mean_tau = taus.iter().sum::<f64>() / taus.len().max(1) as f64;
    let wilcoxon = wilcoxon_signed_rank(&taus, 0.0, Alternative::Greater).ok();
    println!("{} episodes, mean tau {mean_tau:.3}", episodes.len());
    write_json(report, &RankReport { config: cfg, episodes, mean_tau, wilcoxon })
}

#[derive(Serialize)]
struct LiveReport {
    seed: u64,
    frames_supplied: usize,
    final_return: i64,
    final_map: RewardSpec,
    final_posterior: Vec<f64>,
    passenger_highest: bool,
    updates: usize,
    skipped_updates: Vec<u32>,
    starved_frames: u32,
}

#[allow(clippy::too_many_arguments)]
pub fn online(
    model: &Path,
    profile: &ProfileArgs,
    live: Option<&Path>,
    seed: u64,
    seeds: u64,
    baseline_episodes: usize,
    session: SessionArgs,
    report: &Path,
    metrics: Option<&Path>,
) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let mut cfg = SessionConfig { seed, profile: profile.resolve()?, ..SessionConfig::default() };
    session.apply(&mut cfg);
    if let Some(path) = live {
        return online_live(model, cfg, path, report, metrics);
    }
    if seeds == 0 {
        bail!("at least one seed required");
    }
    let batch = OnlineBatchConfig { session: cfg, seeds: (seed..seed + seeds).collect(), baseline_episodes, baseline_seed: derive_seed(seed, &[1000]) };
    let r = online_batch(&batch, model)?;
    println!(
        "{}/{} positive returns, {}/{} passenger highest, mean return {:.2} vs random {:.2}",
        r.n_positive,
        r.runs.len(),
        r.n_passenger_highest,
        r.runs.len(),
        r.mean_return,
        r.random_baseline.mean_return
    );
    if let Some(m) = metrics {
        write_file(m, metrics_csv(&r.metrics)?.as_bytes())?;
    }
    write_json(report, &r)
}

/// One session whose frames come from a feature CSV, consumed at the
/// session's frame rate; frames missing at the end are counted as starved.
fn online_live(model: Arc<Model>, mut cfg: SessionConfig, path: &Path, report: &Path, metrics: Option<&Path>) -> anyhow::Result<()> {
    cfg.reactions = ReactionSource::Live;
    let stream = load_feature_csv(path).with_context(|| format!("reading live features {}", path.display()))?;
    let fpt = cfg.timing.frames_per_tick() as usize;
    let seed = cfg.seed;
    let mut s = OnlineSession::new(cfg, model)?;
    let mut frames = stream.frames.into_iter();
    let mut supplied = 0;
    while !s.is_finished() {
        for f in frames.by_ref().take(fpt) {
            s.push_frame(f);
            supplied += 1;
        }
        s.step()?;
    }
    for f in frames {
        s.push_frame(f);
        supplied += 1;
    }
    s.flush()?;
    let map = s.belief().map();
    let r = LiveReport {
        seed,
        frames_supplied: supplied,
        final_return: s.log().total_reward(),
        final_map: map,
        final_posterior: s.belief().probabilities(),
        passenger_highest: map.class(ObjectType::Passenger) == RewardClass::Plus6,
        updates: s.updates().len(),
        skipped_updates: s.skipped_updates().to_vec(),
        starved_frames: s.starved_frames(),
    };
    if let Some(m) = metrics {
        write_file(m, metrics_csv(&[(seed, s.metrics().to_vec())])?.as_bytes())?;
    }
    println!("return {}, {} updates, {} starved frames", r.final_return, r.updates, r.starved_frames);
    write_json(report, &r)
}

pub fn eval_robotic(
    model: &Path,
    trajectories: Option<&Path>,
    subjects: usize,
    profile: &ProfileArgs,
    seed: u64,
    report: &Path,
    csv: Option<&Path>,
) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let set = match trajectories {
        Some(p) => TrajectorySet::load(p).with_context(|| format!("loading trajectories {}", p.display()))?,
        None => TrajectorySet::builtin(),
    };
    let r = evaluate_transfer(&model, &set, &profile.resolve()?, subjects, seed)?;
    match r.ranking.tau_b {
        Some(t) => println!("tau-b {t:.3}, p {:.4}", r.ranking.p_value.unwrap_or(f64::NAN)),
        None => println!("tau-b undefined"),
    }
    if let Some(c) = csv {
        write_file(c, transfer_csv(&r)?.as_bytes())?;
    }
    write_json(report, &r)
}

#[allow(clippy::too_many_arguments)]
pub fn serve(
    bind: SocketAddr,
    model: &Path,
    seed: u64,
    profile: &ProfileArgs,
    live: bool,
    tick_ms: Option<u64>,
    session: SessionArgs,
    record: Option<PathBuf>,
    exit_on_finish: bool,
) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let mut cfg = SessionConfig { seed, profile: profile.resolve()?, ..SessionConfig::default() };
    session.apply(&mut cfg);
    if live {
        cfg.reactions = ReactionSource::Live;
    }
    let tick = tick_ms.map_or(Duration::from_secs_f64(cfg.timing.step_period_s), Duration::from_millis);
    let listener = TcpListener::bind(bind).with_context(|| format!("binding {bind}"))?;
    println!("listening on ws://{}", listener.local_addr()?);
    let opts = ServeOptions { config: cfg, tick, autostart: !live, record, exit_on_finish };
    serve_on(listener, opts, model)
}
