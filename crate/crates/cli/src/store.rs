//! Checkpoint layouts for the three trainable artifacts.

use std::path::Path;

use serde_json::{json, Value};
use spatial_lab::flow::{apply_adapter, LowRankAdapter, VelocityNet};
use spatial_lab::grpo::{GrpoState, NfeLedger};
use spatial_lab::numerics::{Adam, Checkpoint, RngState, RngStream};
use spatial_lab::reward::{RewardNet, RewardTrainState};
use spatial_lab::{LabError, Result};

fn meta_usize(meta: &Value, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| LabError::Format(format!("checkpoint meta lacks `{key}`")))
}

fn meta_kind(ck: &Checkpoint) -> &str {
    ck.meta.get("kind").and_then(Value::as_str).unwrap_or("")
}

fn with_adam(ck: Checkpoint, adam: &Adam) -> Checkpoint {
    let (m, v) = adam.flat_moments();
    ck.with_array("adam.m", &m).with_array("adam.v", &v)
}

fn restore_adam(ck: &Checkpoint, adam: &mut Adam) -> Result<()> {
    let step = meta_usize(&ck.meta, "adam_step")? as u64;
    adam.restore(step, ck.array("adam.m")?, ck.array("adam.v")?)
}

// ---------------------------------------------------------------------------

pub struct PolicyCheckpoint {
    pub net: VelocityNet,
    pub adam: Adam,
    pub step: usize,
}

pub fn save_policy(path: &Path, net: &VelocityNet, adam: &Adam, step: usize) -> Result<()> {
    let ck = Checkpoint::new().with_mlp("velocity", &net.mlp).with_meta(json!({
        "kind": "policy",
        "k_objects": net.k_objects,
        "n_classes": net.n_classes,
        "step": step,
        "adam_step": adam.steps_taken(),
    }));
    with_adam(ck, adam).save(path)
}

fn velocity_net(ck: &Checkpoint) -> Result<VelocityNet> {
    VelocityNet::from_mlp(
        ck.mlp("velocity")?.clone(),
        meta_usize(&ck.meta, "k_objects")?,
        meta_usize(&ck.meta, "n_classes")?,
    )
}

pub fn load_policy(path: &Path) -> Result<PolicyCheckpoint> {
    let ck = Checkpoint::load(path)?;
    if meta_kind(&ck) != "policy" {
        return Err(LabError::Format(format!("{} is not a pretrained policy checkpoint", path.display())));
    }
    let net = velocity_net(&ck)?;
    let mut adam = Adam::for_mlp(&net.mlp);
    restore_adam(&ck, &mut adam)?;
    Ok(PolicyCheckpoint {
        net,
        adam,
        step: meta_usize(&ck.meta, "step")?,
    })
}

// ---------------------------------------------------------------------------

pub fn save_reward(path: &Path, state: &RewardTrainState) -> Result<()> {
    let order: Vec<f64> = state.order.iter().map(|&i| i as f64).collect();
    let ck = Checkpoint::new()
        .with_mlp("reward", &state.net.mlp)
        .with_array("order", &order)
        .with_meta(json!({
            "kind": "reward",
            "k_objects": state.net.k_objects,
            "n_classes": state.net.n_classes,
            "epoch": state.epoch,
            "adam_step": state.adam.steps_taken(),
            "shuffler": state.shuffler.state(),
        }));
    with_adam(ck, &state.adam).save(path)
}

pub fn load_reward_state(path: &Path) -> Result<RewardTrainState> {
    let ck = Checkpoint::load(path)?;
    if meta_kind(&ck) != "reward" {
        return Err(LabError::Format(format!("{} is not a reward checkpoint", path.display())));
    }
    let net = RewardNet::from_mlp(
        ck.mlp("reward")?.clone(),
        meta_usize(&ck.meta, "k_objects")?,
        meta_usize(&ck.meta, "n_classes")?,
    )?;
    let mut adam = Adam::for_mlp(&net.mlp);
    restore_adam(&ck, &mut adam)?;
    let shuffler: RngState = serde_json::from_value(ck.meta["shuffler"].clone())?;
    Ok(RewardTrainState {
        net,
        adam,
        epoch: meta_usize(&ck.meta, "epoch")?,
        order: ck.array("order")?.iter().map(|&v| v as usize).collect(),
        shuffler: RngStream::from_state(shuffler),
    })
}

pub fn load_reward(path: &Path) -> Result<RewardNet> {
    Ok(load_reward_state(path)?.net)
}

// ---------------------------------------------------------------------------

pub fn save_grpo(path: &Path, base: &VelocityNet, state: &GrpoState) -> Result<()> {
    let ck = Checkpoint::new()
        .with_mlp("velocity", &base.mlp)
        .with_array("adapter", &state.adapter.flat())
        .with_meta(json!({
            "kind": "grpo",
            "k_objects": base.k_objects,
            "n_classes": base.n_classes,
            "rank": state.adapter.rank,
            "alpha": state.adapter.alpha,
            "step": state.step,
            "adam_step": state.adam.steps_taken(),
            "ledger": state.ledger,
        }));
    with_adam(ck, &state.adam).save(path)
}

pub fn load_grpo(path: &Path) -> Result<(VelocityNet, GrpoState)> {
    let ck = Checkpoint::load(path)?;
    if meta_kind(&ck) != "grpo" {
        return Err(LabError::Format(format!("{} is not a GRPO checkpoint", path.display())));
    }
    let base = velocity_net(&ck)?;
    let rank = meta_usize(&ck.meta, "rank")?;
    let alpha = ck.meta["alpha"]
        .as_f64()
        .ok_or_else(|| LabError::Format("checkpoint meta lacks `alpha`".into()))?;
    // A is overwritten below; the stream only shapes the placeholder.
    let mut adapter = LowRankAdapter::new(&base.mlp, rank, alpha, &mut RngStream::new(0, 0))?;
    adapter.set_flat(ck.array("adapter")?)?;
    let mut adam = Adam::new(&adapter.parts());
    restore_adam(&ck, &mut adam)?;
    let ledger: NfeLedger = serde_json::from_value(ck.meta["ledger"].clone())?;
    let state = GrpoState {
        adapter,
        adam,
        step: meta_usize(&ck.meta, "step")?,
        ledger,
    };
    Ok((base, state))
}

/// The sampling network stored in either a policy or a GRPO checkpoint.
pub fn load_any_policy(path: &Path) -> Result<VelocityNet> {
    let ck = Checkpoint::load(path)?;
    match meta_kind(&ck) {
        "policy" => velocity_net(&ck),
        "grpo" => {
            let (base, state) = load_grpo(path)?;
            apply_adapter(&base, &state.adapter)
        }
        other => Err(LabError::Format(format!(
            "{} holds a `{other}` checkpoint, expected a policy",
            path.display()
        ))),
    }
}
