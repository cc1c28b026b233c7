use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use spatial_lab::flow::{fm_pretrain, FlowExample, PretrainConfig, SdeSchedule, VelocityNet};
use spatial_lab::forge::{build_dataset, read_pairs, DatasetFiles, DatasetManifest, ForgeConfig, GrammarConfig, PreferencePair};
use spatial_lab::grpo::{
    diagnose_advantage_bias, evaluate_policy, grpo_train, GrpoConfig, GrpoMetrics, GrpoState, RewardSource,
};
use spatial_lab::numerics::{Adam, RngStream};
use spatial_lab::reward::{
    pairwise_accuracy, train_reward_from, OracleScorer, RewardNet, RewardTrainConfig, RewardTrainState, SceneScorer,
};
use spatial_lab::scene::SpatialPrompt;
use spatial_lab::LabError;

use crate::run::{
    apply_config, require_file, resolve, start_run, write_csv, write_json, CliError, CliResult, MetricsLog,
};
use crate::store;

// Seed stream ids, one per consumer, so runs sharing a seed stay independent.
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const ADAPTER_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

fn load_split(data: &Path, eval: bool) -> CliResult<Vec<PreferencePair>> {
    let files = DatasetFiles::in_dir(data);
    let path = if eval { files.eval } else { files.train };
    require_file(&path, "dataset split")?;
    let pairs = read_pairs(&path)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no pairs", path.display())));
    }
    Ok(pairs)
}

/// Object count from the data, class count from the manifest when present.
fn vocab(data: &Path, pairs: &[PreferencePair]) -> CliResult<(usize, usize)> {
    let k = pairs[0].prompt.k();
    let manifest = DatasetFiles::in_dir(data).manifest;
    let classes = if manifest.is_file() {
        let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&manifest)?)?;
        m.config.map(|c| c.grammar.n_classes)
    } else {
        None
    };
    let classes = classes.unwrap_or_else(|| {
        pairs
            .iter()
            .flat_map(|p| p.prompt.class_slots().iter().copied())
            .max()
            .map_or(1, |c| c + 1)
    });
    Ok((k, classes))
}

fn prompts_of(pairs: &[PreferencePair]) -> Vec<SpatialPrompt> {
    pairs.iter().map(|p| p.prompt.clone()).collect()
}

fn scorer(source: RewardSource, reward: &Path) -> CliResult<Box<dyn SceneScorer>> {
    Ok(match source {
        RewardSource::Oracle => Box::new(OracleScorer),
        RewardSource::Learned => {
            require_file(reward, "reward checkpoint")?;
            Box::new(store::load_reward(reward)?)
        }
    })
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ForgeArgs {
    #[arg(long, default_value_t = 5000)]
    pub train_n: usize,
    #[arg(long, default_value_t = 1000)]
    pub eval_n: usize,
    /// Fraction of single-edit pairs.
    #[arg(long, default_value_t = 0.5)]
    pub pert_mix: f64,
    #[arg(long, default_value_t = 4)]
    pub k_objects: usize,
    #[arg(long, default_value_t = 12)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 2)]
    pub atoms_min: usize,
    #[arg(long, default_value_t = 5)]
    pub atoms_max: usize,
    #[arg(long, default_value_t = 200)]
    pub attempts_per_pair: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $SPATIAL_LAB_OUT/forge]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn forge(args: ForgeArgs, config: Option<&Path>) -> CliResult<()> {
    let mut args = apply_config(args, config, "forge")?;
    let out = resolve(&args.out, "forge");
    args.out = Some(out.clone());
    let cfg = ForgeConfig {
        grammar: GrammarConfig {
            k_objects: args.k_objects,
            n_classes: args.n_classes,
            atoms_min: args.atoms_min,
            atoms_max: args.atoms_max,
            ..GrammarConfig::default()
        },
        train_n: args.train_n,
        eval_n: args.eval_n,
        pert_mix: args.pert_mix,
        attempts_per_pair: args.attempts_per_pair,
    };
    cfg.validate()?;
    start_run(&out, "forge", &args)?;
    let (files, manifest) = build_dataset(&cfg, args.seed, &out)?;
    info!(
        "wrote {} train / {} eval pairs to {} (discard rate {:.3})",
        manifest.train.emitted,
        manifest.eval.emitted,
        out.display(),
        manifest.discard_rate
    );
    if manifest.exhausted() > 0 {
        return Err(LabError::Generation(format!(
            "{} records ran out of candidates; see {}",
            manifest.exhausted(),
            files.manifest.display()
        ))
        .into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PretrainArgs {
    /// Dataset directory [default: $SPATIAL_LAB_OUT/forge]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [128, 128])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    /// Continue from an existing checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $SPATIAL_LAB_OUT/pretrain]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

pub fn pretrain(args: PretrainArgs, config: Option<&Path>) -> CliResult<()> {
    let mut args = apply_config(args, config, "pretrain")?;
    let data = resolve(&args.data, "forge");
    let out = resolve(&args.out, "pretrain");
    args.data = Some(data.clone());
    args.out = Some(out.clone());
    if args.checkpoint_every == 0 {
        return Err(CliError::Usage("--checkpoint-every must be positive".into()));
    }
    let pairs = load_split(&data, false)?;
    let (k, classes) = vocab(&data, &pairs)?;
    start_run(&out, "pretrain", &args)?;
    let ckpt = out.join("policy.ckpt");

    let (mut net, mut adam, mut step) = if args.resume && ckpt.is_file() {
        let c = store::load_policy(&ckpt)?;
        info!("resuming pretraining at step {}", c.step);
        (c.net, c.adam, c.step)
    } else {
        let net = VelocityNet::new(k, classes, &args.hidden, &mut RngStream::new(args.seed, INIT_STREAM))?;
        let adam = Adam::for_mlp(&net.mlp);
        (net, adam, 0)
    };
    let examples: Vec<FlowExample> = pairs.iter().map(|p| FlowExample::new(&net, &p.prompt, &p.winner)).collect();
    let resume_at = step;
    let keep = move |r: &LossRow| r.step < resume_at;
    let mut log = MetricsLog::create::<LossRow>(&out.join("metrics.csv"), args.resume.then_some(&keep as _))?;
    let stream = RngStream::new(args.seed, TRAIN_STREAM);
    let mut last = f64::NAN;
    while step < args.steps {
        let end = (step + args.checkpoint_every).min(args.steps);
        let cfg = PretrainConfig {
            steps: end,
            batch_size: args.batch_size,
            lr: args.lr,
            ..PretrainConfig::default()
        };
        let mut rows = Vec::new();
        let result = fm_pretrain(&mut net, &mut adam, &examples, &cfg, step, &stream, |s, loss| {
            rows.push(LossRow { step: s, loss })
        });
        for r in &rows {
            log.push(r)?;
        }
        result?;
        step = end;
        last = rows.last().map_or(last, |r| r.loss);
        store::save_policy(&ckpt, &net, &adam, step)?;
        info!("step {step}/{} loss {last:.4}", args.steps);
    }
    write_json(
        &out.join("summary.json"),
        &json!({ "steps": step, "final_loss": last, "checkpoint": ckpt }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainRewardArgs {
    /// Dataset directory [default: $SPATIAL_LAB_OUT/forge]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Monte-Carlo draws per pair in the Bradley-Terry loss.
    #[arg(long, default_value_t = 100)]
    pub mc_samples: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [128, 128])]
    pub hidden: Vec<usize>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $SPATIAL_LAB_OUT/train-reward]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
    eval_accuracy: Option<f64>,
    acc_1: Option<f64>,
    acc_2_3: Option<f64>,
}

pub fn train_reward(args: TrainRewardArgs, config: Option<&Path>) -> CliResult<()> {
    let mut args = apply_config(args, config, "train-reward")?;
    let data = resolve(&args.data, "forge");
    let out = resolve(&args.out, "train-reward");
    args.data = Some(data.clone());
    args.out = Some(out.clone());
    let train = load_split(&data, false)?;
    let eval = load_split(&data, true)?;
    let (k, classes) = vocab(&data, &train)?;
    start_run(&out, "train-reward", &args)?;
    let ckpt = out.join("reward.ckpt");
    let stream = RngStream::new(args.seed, TRAIN_STREAM);
    let mut state = if args.resume && ckpt.is_file() {
        let s = store::load_reward_state(&ckpt)?;
        info!("resuming reward training at epoch {}", s.epoch);
        s
    } else {
        let net = RewardNet::new(k, classes, &args.hidden, &mut RngStream::new(args.seed, INIT_STREAM))?;
        RewardTrainState::fresh(net, train.len(), &stream)
    };
    let resume_at = state.epoch;
    let keep = move |r: &EpochRow| r.epoch < resume_at;
    let mut log = MetricsLog::create::<EpochRow>(&out.join("metrics.csv"), args.resume.then_some(&keep as _))?;
    let cfg = RewardTrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        weight_decay: args.weight_decay,
        mc_samples: args.mc_samples,
        shuffle: true,
    };
    let mut io_error = None;
    let (_, aborted) = train_reward_from(&mut state, &train, &eval, &cfg, &stream, |rec, st| {
        info!(
            "epoch {} loss {:.4} held-out accuracy {:?}",
            rec.epoch, rec.train_loss, rec.eval_accuracy
        );
        let row = EpochRow {
            epoch: rec.epoch,
            train_loss: rec.train_loss,
            eval_accuracy: rec.eval_accuracy,
            acc_1: rec.eval_by_pert.get("1").copied(),
            acc_2_3: rec.eval_by_pert.get("2_3").copied(),
        };
        let r = log.push(&row).and_then(|_| store::save_reward(&ckpt, st).map_err(CliError::from));
        if let Err(e) = r {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    let report = pairwise_accuracy(&state.net, &eval)?;
    write_json(
        &out.join("summary.json"),
        &json!({ "epochs": state.epoch, "eval": report, "aborted": aborted, "checkpoint": ckpt }),
    )?;
    if let Some(reason) = aborted {
        return Err(LabError::NonFinite(reason).into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalRewardArgs {
    /// Reward checkpoint [default: $SPATIAL_LAB_OUT/train-reward/reward.ckpt]
    #[arg(long)]
    pub reward: Option<PathBuf>,
    /// Score with the rule-based oracle instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    /// Dataset directory; its eval split is scored [default: $SPATIAL_LAB_OUT/forge]
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory [default: $SPATIAL_LAB_OUT/eval-reward]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct AccuracyRow<'a> {
    subset: &'a str,
    accuracy: f64,
}

pub fn eval_reward(args: EvalRewardArgs, config: Option<&Path>) -> CliResult<()> {
    let mut args = apply_config(args, config, "eval-reward")?;
    let data = resolve(&args.data, "forge");
    let out = resolve(&args.out, "eval-reward");
    args.data = Some(data.clone());
    args.out = Some(out.clone());
    let source = if args.oracle {
        RewardSource::Oracle
    } else {
        let reward = resolve(&args.reward, "train-reward/reward.ckpt");
        args.reward = Some(reward);
        RewardSource::Learned
    };
    let scorer = scorer(source, args.reward.as_deref().unwrap_or(Path::new("")))?;
    let eval = load_split(&data, true)?;
    start_run(&out, "eval-reward", &args)?;
    let report = pairwise_accuracy(scorer.as_ref(), &eval)?;
    info!("accuracy {:.4} over {} pairs {:?}", report.overall, report.n_pairs, report.by_pert);
    write_json(&out.join("report.json"), &report)?;
    let mut rows = vec![AccuracyRow {
        subset: "overall",
        accuracy: report.overall,
    }];
    rows.extend(report.by_pert.iter().map(|(k, v)| AccuracyRow {
        subset: k,
        accuracy: *v,
    }));
    write_csv(&out.join("report.csv"), &rows)
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GrpoArgs {
    /// Pretrained policy [default: $SPATIAL_LAB_OUT/pretrain/policy.ckpt]
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Reward checkpoint [default: $SPATIAL_LAB_OUT/train-reward/reward.ckpt]
    #[arg(long)]
    pub reward: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "learned")]
    pub reward_source: SourceArg,
    /// Dataset directory; prompts come from its train split [default: $SPATIAL_LAB_OUT/forge]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 24)]
    pub group: usize,
    /// Members kept from each end of the reward ranking; 0 disables filtering.
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long, default_value_t = 6)]
    pub steps_per_traj: usize,
    #[arg(long, default_value_t = 0.7)]
    pub noise_level: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub clip: f64,
    /// KL penalty coefficient.
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub prompts_per_step: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 4.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 50)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $SPATIAL_LAB_OUT/grpo]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceArg {
    Learned,
    Oracle,
}

impl From<SourceArg> for RewardSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Learned => RewardSource::Learned,
            SourceArg::Oracle => RewardSource::Oracle,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GrpoRow {
    step: usize,
    reward_mean: f64,
    reward_std: f64,
    oracle_rate: f64,
    kl: f64,
    loss: f64,
    nfe_sampling: f64,
    nfe_training: usize,
}

impl From<&GrpoMetrics> for GrpoRow {
    fn from(m: &GrpoMetrics) -> Self {
        Self {
            step: m.step,
            reward_mean: m.reward_mean,
            reward_std: m.reward_std,
            oracle_rate: m.oracle_rate,
            kl: m.kl,
            loss: m.loss,
            nfe_sampling: m.nfe_sampling,
            nfe_training: m.nfe_training,
        }
    }
}

impl GrpoArgs {
    fn config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group,
            k: self.k,
            clip_eps: self.clip,
            kl_coef: self.beta,
            lr: self.lr,
            schedule: SdeSchedule {
                steps: self.steps_per_traj,
                noise_level: self.noise_level,
                ..SdeSchedule::train()
            },
            reward_source: self.reward_source.into(),
            prompts_per_step: self.prompts_per_step,
            adapter_rank: self.rank,
            adapter_alpha: self.alpha,
            ..GrpoConfig::default()
        }
    }
}

pub fn grpo(args: GrpoArgs, config: Option<&Path>) -> CliResult<()> {
    let mut args = apply_config(args, config, "grpo")?;
    let policy = resolve(&args.policy, "pretrain/policy.ckpt");
    let reward = resolve(&args.reward, "train-reward/reward.ckpt");
    let data = resolve(&args.data, "forge");
    let out = resolve(&args.out, "grpo");
    args.policy = Some(policy.clone());
    args.reward = Some(reward.clone());
    args.data = Some(data.clone());
    args.out = Some(out.clone());
    if args.checkpoint_every == 0 {
        return Err(CliError::Usage("--checkpoint-every must be positive".into()));
    }
    let cfg = args.config();
    cfg.validate()?;
    require_file(&policy, "policy checkpoint")?;
    let scorer = scorer(cfg.reward_source, &reward)?;
    let prompts = prompts_of(&load_split(&data, false)?);
    start_run(&out, "grpo", &args)?;

    let ckpt = out.join("grpo.ckpt");
    let (base, mut state) = if args.resume && ckpt.is_file() {
        let (base, state) = store::load_grpo(&ckpt)?;
        info!("resuming GRPO at step {}", state.step);
        (base, state)
    } else {
        let base = store::load_policy(&policy)?.net;
        let state = GrpoState::fresh(&base, &cfg, &mut RngStream::new(args.seed, ADAPTER_STREAM))?;
        (base, state)
    };
    let resume_at = state.step;
    let keep = move |r: &GrpoRow| r.step < resume_at;
    let mut log = MetricsLog::create::<GrpoRow>(&out.join("metrics.csv"), args.resume.then_some(&keep as _))?;
    let stream = RngStream::new(args.seed, TRAIN_STREAM);
    let mut aborted = None;
    while state.step < args.steps && aborted.is_none() {
        let until = (state.step + args.checkpoint_every).min(args.steps);
        let mut rows = Vec::new();
        let run = grpo_train(&base, &mut state, scorer.as_ref(), &prompts, &cfg, until, &stream, |m, _| {
            rows.push(GrpoRow::from(m))
        })?;
        for r in &rows {
            log.push(r)?;
        }
        if let Some(last) = rows.last() {
            info!(
                "step {} reward {:.3} oracle {:.3} kl {:.3e} nfe/prompt {}",
                last.step, last.reward_mean, last.oracle_rate, last.kl, last.nfe_training
            );
        }
        store::save_grpo(&ckpt, &base, &state)?;
        aborted = run.aborted;
    }
    let per_prompt: Vec<usize> = {
        let mut v: Vec<usize> = state.ledger.steps.iter().filter_map(|e| e.training_per_prompt()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let training_nfe = match per_prompt.as_slice() {
        [one] => json!(one),
        _ => json!(per_prompt),
    };
    write_json(
        &out.join("summary.json"),
        &json!({
            "steps": state.step,
            "training_nfe_per_prompt_per_step": training_nfe,
            "sampling_nfe_per_prompt_per_step": cfg.group_size * cfg.schedule.steps,
            "total_training_nfe": state.ledger.total_training,
            "total_sampling_nfe": state.ledger.total_sampling,
            "aborted": aborted,
            "checkpoint": ckpt,
        }),
    )?;
    if let Some(reason) = aborted {
        return Err(LabError::NonFinite(reason).into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalPolicyArgs {
    /// Policy or GRPO checkpoints, repeatable [default: pretrain and grpo checkpoints under $SPATIAL_LAB_OUT]
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Dataset directory; prompts come from its eval split [default: $SPATIAL_LAB_OUT/forge]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub prompts: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub steps_per_traj: usize,
    #[arg(long, default_value_t = 0.7)]
    pub noise_level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $SPATIAL_LAB_OUT/eval-policy]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CurveRow {
    checkpoint: String,
    mean_oracle: f64,
    full_rate: f64,
    n_samples: usize,
}

pub fn eval_policy(args: EvalPolicyArgs, config: Option<&Path>) -> CliResult<()> {
    let mut args = apply_config(args, config, "eval-policy")?;
    let data = resolve(&args.data, "forge");
    let out = resolve(&args.out, "eval-policy");
    args.data = Some(data.clone());
    args.out = Some(out.clone());
    if args.checkpoints.is_empty() {
        args.checkpoints = ["pretrain/policy.ckpt", "grpo/grpo.ckpt"]
            .iter()
            .map(|p| resolve(&None, p))
            .filter(|p| p.is_file())
            .collect();
        if args.checkpoints.is_empty() {
            return Err(CliError::Usage("no checkpoints given and none found under the output root".into()));
        }
    }
    for c in &args.checkpoints {
        require_file(c, "policy checkpoint")?;
    }
    let prompts: Vec<SpatialPrompt> = prompts_of(&load_split(&data, true)?).into_iter().take(args.prompts).collect();
    let schedule = SdeSchedule {
        steps: args.steps_per_traj,
        noise_level: args.noise_level,
        ..SdeSchedule::eval()
    };
    start_run(&out, "eval-policy", &args)?;
    let stream = RngStream::new(args.seed, EVAL_STREAM);
    let mut rows = Vec::new();
    for c in &args.checkpoints {
        let net = store::load_any_policy(c)?;
        let e = evaluate_policy(&net, |p| net.condition(p), &prompts, &schedule, args.samples, &stream)?;
        info!("{}: mean oracle {:.4}, perfect {:.4}", c.display(), e.mean_oracle, e.full_rate);
        rows.push(CurveRow {
            checkpoint: c.display().to_string(),
            mean_oracle: e.mean_oracle,
            full_rate: e.full_rate,
            n_samples: e.n_samples,
        });
    }
    write_json(&out.join("report.json"), &rows)?;
    write_csv(&out.join("curve.csv"), &rows)
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseArgs {
    /// Policy or GRPO checkpoint [default: grpo, else pretrain checkpoint under $SPATIAL_LAB_OUT]
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Reward checkpoint [default: $SPATIAL_LAB_OUT/train-reward/reward.ckpt]
    #[arg(long)]
    pub reward: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "learned")]
    pub reward_source: SourceArg,
    /// Dataset directory; prompts come from its eval split [default: $SPATIAL_LAB_OUT/forge]
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub prompts: usize,
    #[arg(long, default_value_t = 24)]
    pub group: usize,
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long, default_value_t = 6)]
    pub steps_per_traj: usize,
    /// Oracle fraction at or above which a member counts as high quality.
    #[arg(long, default_value_t = 1.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $SPATIAL_LAB_OUT/diagnose]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct BiasRow {
    prompt_index: usize,
    prompt: String,
    high_quality: usize,
    penalized_k0: usize,
    penalized_topk: usize,
}

pub fn diagnose(args: DiagnoseArgs, config: Option<&Path>) -> CliResult<()> {
    let mut args = apply_config(args, config, "diagnose")?;
    let policy = args.policy.clone().unwrap_or_else(|| {
        let tuned = resolve(&None, "grpo/grpo.ckpt");
        if tuned.is_file() {
            tuned
        } else {
            resolve(&None, "pretrain/policy.ckpt")
        }
    });
    let reward = resolve(&args.reward, "train-reward/reward.ckpt");
    let data = resolve(&args.data, "forge");
    let out = resolve(&args.out, "diagnose");
    args.policy = Some(policy.clone());
    args.reward = Some(reward.clone());
    args.data = Some(data.clone());
    args.out = Some(out.clone());
    if !(args.threshold > 0.0 && args.threshold <= 1.0) {
        return Err(CliError::Usage(format!("--threshold {} outside (0, 1]", args.threshold)));
    }
    let cfg = GrpoConfig {
        group_size: args.group,
        k: args.k,
        schedule: SdeSchedule {
            steps: args.steps_per_traj,
            ..SdeSchedule::train()
        },
        reward_source: args.reward_source.into(),
        ..GrpoConfig::default()
    };
    cfg.validate()?;
    require_file(&policy, "policy checkpoint")?;
    let scorer = scorer(cfg.reward_source, &reward)?;
    let net = store::load_any_policy(&policy)?;
    let prompts: Vec<SpatialPrompt> = prompts_of(&load_split(&data, true)?).into_iter().take(args.prompts).collect();
    start_run(&out, "diagnose", &args)?;
    let stream = RngStream::new(args.seed, EVAL_STREAM);
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for (j, p) in prompts.iter().enumerate() {
        let cond = net.condition(p);
        let r = diagnose_advantage_bias(&net, &cond, p, scorer.as_ref(), &cfg, args.threshold, &stream.derive(j as u64))?;
        rows.push(BiasRow {
            prompt_index: j,
            prompt: p.to_string(),
            high_quality: r.high_quality,
            penalized_k0: r.penalized_full.len(),
            penalized_topk: r.penalized_topk.len(),
        });
        let mut entry = serde_json::to_value(&r)?;
        entry["prompt"] = json!(p.to_string());
        reports.push(entry);
    }
    let totals: BTreeMap<&str, usize> = [
        ("high_quality", rows.iter().map(|r| r.high_quality).sum()),
        ("penalized_k0", rows.iter().map(|r| r.penalized_k0).sum()),
        ("penalized_topk", rows.iter().map(|r| r.penalized_topk).sum()),
    ]
    .into_iter()
    .collect();
    if totals["penalized_topk"] > totals["penalized_k0"] {
        warn!("top-k filtering penalized more high-quality members than the full group");
    }
    info!("totals {totals:?}");
    write_json(&out.join("report.json"), &json!({ "totals": totals, "prompts": reports }))?;
    write_csv(&out.join("diagnose.csv"), &rows)
}
