//! Learned spatial reward with a Gaussian head.
//!
//! The scorer reads `[prompt features ⊕ scene features]` and emits
//! `(μ, pre_σ)`; `σ = softplus(pre_σ) + SIGMA_FLOOR`. Training minimizes the
//! Bradley-Terry negative log-likelihood averaged over reparameterized
//! samples `s = μ + σ·ε` drawn for winner and loser. Downstream consumers use
//! `μ` as the scalar reward.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::forge::PreferencePair;
use crate::numerics::{log_sigmoid, sigmoid, softplus, Adam, GradBundle, MlpParams, RngStream};
use crate::scene::{embed_prompt, embed_scene, pair_feature_dim, pair_features, oracle_score, prompt_embedding_dim, Scene, SpatialPrompt};

pub const SIGMA_FLOOR: f64 = 1e-4;

/// Anything that can assign a scalar reward to a scene under a prompt.
pub trait SceneScorer: Sync {
    fn reward(&self, prompt: &SpatialPrompt, scene: &Scene) -> Result<f64>;
}

/// Ground-truth scorer: the fraction of satisfied atoms.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

impl SceneScorer for OracleScorer {
    fn reward(&self, prompt: &SpatialPrompt, scene: &Scene) -> Result<f64> {
        Ok(oracle_score(scene, prompt)?.fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianReward {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardNet {
    pub mlp: MlpParams,
    pub k_objects: usize,
    pub n_classes: usize,
}

pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

impl RewardNet {
    pub fn input_dim(k_objects: usize, n_classes: usize) -> usize {
        prompt_embedding_dim(k_objects, n_classes) + 2 * k_objects + pair_feature_dim(k_objects)
    }

    pub fn new(k_objects: usize, n_classes: usize, hidden: &[usize], stream: &mut RngStream) -> Result<Self> {
        let mut dims = vec![Self::input_dim(k_objects, n_classes)];
        dims.extend_from_slice(hidden);
        dims.push(2);
        Ok(Self {
            mlp: MlpParams::random(&dims, stream)?,
            k_objects,
            n_classes,
        })
    }

    pub fn from_mlp(mlp: MlpParams, k_objects: usize, n_classes: usize) -> Result<Self> {
        if mlp.input_dim() != Self::input_dim(k_objects, n_classes) || mlp.output_dim() != 2 {
            return Err(LabError::Shape(format!(
                "reward network dims {:?} do not fit k={k_objects}, classes={n_classes}",
                mlp.dims()
            )));
        }
        Ok(Self {
            mlp,
            k_objects,
            n_classes,
        })
    }

    pub fn features(&self, prompt: &SpatialPrompt, scene: &Scene) -> Result<Vec<f64>> {
        if prompt.k() != self.k_objects || scene.k() != self.k_objects {
            return Err(LabError::Shape(format!(
                "reward net expects {} objects, got prompt {} / scene {}",
                self.k_objects,
                prompt.k(),
                scene.k()
            )));
        }
        let mut x = embed_prompt(prompt, self.n_classes);
        x.extend(embed_scene(scene));
        x.extend(pair_features(scene));
        Ok(x)
    }

    pub fn score(&self, prompt: &SpatialPrompt, scene: &Scene) -> Result<GaussianReward> {
        let out = self.mlp.forward(&self.features(prompt, scene)?)?;
        head(out[0], out[1])
    }
}

fn head(mu: f64, pre_sigma: f64) -> Result<GaussianReward> {
    let sigma = softplus(pre_sigma) + SIGMA_FLOOR;
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(LabError::NonFinite(format!("reward head ({mu}, {pre_sigma})")));
    }
    Ok(GaussianReward { mu, sigma })
}

pub fn score(net: &RewardNet, prompt: &SpatialPrompt, scene: &Scene) -> Result<GaussianReward> {
    net.score(prompt, scene)
}

impl SceneScorer for RewardNet {
    fn reward(&self, prompt: &SpatialPrompt, scene: &Scene) -> Result<f64> {
        Ok(self.score(prompt, scene)?.mu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtLossConfig {
    pub mc_samples: usize,
}

impl Default for BtLossConfig {
    fn default() -> Self {
        Self { mc_samples: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct BtLoss {
    pub loss: f64,
    pub grads: GradBundle,
    pub winner: GaussianReward,
    pub loser: GaussianReward,
}

/// Bradley-Terry loss for one pair with caller-supplied standard-normal
/// draws (`eps_winner[j]`, `eps_loser[j]` form sample pair `j`).
pub fn bt_loss_frozen(
    net: &RewardNet,
    prompt: &SpatialPrompt,
    winner: &Scene,
    loser: &Scene,
    eps_winner: &[f64],
    eps_loser: &[f64],
) -> Result<BtLoss> {
    let n = eps_winner.len();
    if n == 0 || eps_loser.len() != n {
        return Err(LabError::Shape(format!(
            "need matching non-empty draws, got {} and {}",
            n,
            eps_loser.len()
        )));
    }
    let tw = net.mlp.forward_trace(&net.features(prompt, winner)?)?;
    let tl = net.mlp.forward_trace(&net.features(prompt, loser)?)?;
    let (ow, ol) = (tw.output(), tl.output());
    let gw = head(ow[0], ow[1])?;
    let gl = head(ol[0], ol[1])?;

    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let (mut d_mu, mut d_sw, mut d_sl) = (0.0, 0.0, 0.0);
    for (ew, el) in eps_winner.iter().zip(eps_loser) {
        let diff = (gw.mu + gw.sigma * ew) - (gl.mu + gl.sigma * el);
        loss -= log_sigmoid(diff);
        // d(-ln sigmoid(d))/dd = -sigmoid(-d)
        let g = -sigmoid(-diff);
        d_mu += g;
        d_sw += g * ew;
        d_sl -= g * el;
    }
    loss *= inv_n;
    let (d_mu, d_sw, d_sl) = (d_mu * inv_n, d_sw * inv_n, d_sl * inv_n);

    let mut grads = GradBundle::zeros_like(&net.mlp);
    // dσ/dpre = sigmoid(pre)
    net.mlp
        .backward_accumulate(&tw, &[d_mu, d_sw * sigmoid(ow[1])], &mut grads)?;
    net.mlp
        .backward_accumulate(&tl, &[-d_mu, d_sl * sigmoid(ol[1])], &mut grads)?;
    if !loss.is_finite() {
        return Err(LabError::NonFinite("Bradley-Terry loss".into()));
    }
    Ok(BtLoss {
        loss,
        grads,
        winner: gw,
        loser: gl,
    })
}

/// Monte-Carlo Bradley-Terry loss; draws `2 * mc_samples` normals from `stream`.
pub fn bt_loss(
    net: &RewardNet,
    pair: &PreferencePair,
    config: &BtLossConfig,
    stream: &mut RngStream,
) -> Result<BtLoss> {
    if config.mc_samples == 0 {
        return Err(LabError::Config("mc_samples must be at least 1".into()));
    }
    let ew = stream.gauss_draw(config.mc_samples);
    let el = stream.gauss_draw(config.mc_samples);
    bt_loss_frozen(net, &pair.prompt, &pair.winner, &pair.loser, &ew, &el)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    /// Keyed "1" and "2_3"; a subset with no pairs is omitted.
    pub by_pert: BTreeMap<String, f64>,
    pub n_pairs: usize,
}

/// Fraction of pairs where the winner outscores the loser; exact ties count half.
pub fn pairwise_accuracy<S: SceneScorer + ?Sized>(scorer: &S, pairs: &[PreferencePair]) -> Result<AccuracyReport> {
    if pairs.is_empty() {
        return Err(LabError::Domain("accuracy over an empty pair set".into()));
    }
    let credits: Vec<(usize, f64)> = pairs
        .par_iter()
        .map(|p| {
            let w = scorer.reward(&p.prompt, &p.winner)?;
            let l = scorer.reward(&p.prompt, &p.loser)?;
            let c = if w > l {
                1.0
            } else if w == l {
                0.5
            } else {
                0.0
            };
            Ok((p.n_perturbations(), c))
        })
        .collect::<Result<_>>()?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (n, c) in &credits {
        total += c;
        let key = if *n == 1 { "1" } else { "2_3" };
        let e = sums.entry(key.into()).or_default();
        e.0 += c;
        e.1 += 1;
    }
    Ok(AccuracyReport {
        overall: total / credits.len() as f64,
        by_pert: sums
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        n_pairs: credits.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mc_samples: usize,
    pub shuffle: bool,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            mc_samples: BtLossConfig::default().mc_samples,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_by_pert: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct RewardTraining {
    pub net: RewardNet,
    pub history: Vec<EpochRecord>,
    /// Set when a non-finite loss stopped training; `net` then holds the last
    /// finite parameters.
    pub aborted: Option<String>,
}

/// Everything needed to continue reward training at `epoch`.
#[derive(Debug, Clone)]
pub struct RewardTrainState {
    pub net: RewardNet,
    pub adam: Adam,
    pub epoch: usize,
    pub order: Vec<usize>,
    pub shuffler: RngStream,
}

impl RewardTrainState {
    pub fn fresh(net: RewardNet, n_train: usize, stream: &RngStream) -> Self {
        Self {
            adam: Adam::for_mlp(&net.mlp),
            net,
            epoch: 0,
            order: (0..n_train).collect(),
            shuffler: stream.derive(u64::MAX),
        }
    }
}

/// Mini-batch Adam on the Monte-Carlo Bradley-Terry loss.
pub fn train_reward(
    net: RewardNet,
    train: &[PreferencePair],
    eval: &[PreferencePair],
    config: &RewardTrainConfig,
    stream: &RngStream,
    mut on_epoch: impl FnMut(&EpochRecord, &RewardNet),
) -> Result<RewardTraining> {
    let mut state = RewardTrainState::fresh(net, train.len(), stream);
    let (history, aborted) = train_reward_from(&mut state, train, eval, config, stream, |r, s| on_epoch(r, &s.net))?;
    Ok(RewardTraining {
        net: state.net,
        history,
        aborted,
    })
}

/// Continues training from `state` until `config.epochs`. On a non-finite
/// step `state` keeps the last finite parameters and the reason is returned.
pub fn train_reward_from(
    state: &mut RewardTrainState,
    train: &[PreferencePair],
    eval: &[PreferencePair],
    config: &RewardTrainConfig,
    stream: &RngStream,
    mut on_epoch: impl FnMut(&EpochRecord, &RewardTrainState),
) -> Result<(Vec<EpochRecord>, Option<String>)> {
    if train.is_empty() {
        return Err(LabError::Domain("reward training needs at least one pair".into()));
    }
    if config.batch_size == 0 || config.mc_samples == 0 {
        return Err(LabError::Config("batch_size and mc_samples must be positive".into()));
    }
    if state.order.len() != train.len() {
        return Err(LabError::Shape(format!(
            "training state covers {} pairs, dataset has {}",
            state.order.len(),
            train.len()
        )));
    }
    let bt = BtLossConfig {
        mc_samples: config.mc_samples,
    };
    let mut history = Vec::new();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let snapshot = state.clone();
        if config.shuffle {
            state.shuffler.shuffle(&mut state.order);
        }
        let epoch_stream = stream.derive(epoch as u64);
        let mut loss_sum = 0.0;
        for (b, batch) in state.order.chunks(config.batch_size).enumerate() {
            let net = &state.net;
            let results: Vec<BtLoss> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut s = epoch_stream.derive(((b as u64) << 20) | j as u64);
                    bt_loss(net, &train[i], &bt, &mut s)
                })
                .collect::<Result<_>>()
                .or_else(|e| if e.is_numeric() { Ok(Vec::new()) } else { Err(e) })?;
            let mut grads = GradBundle::zeros_like(&state.net.mlp);
            let mut batch_loss = 0.0;
            for r in &results {
                grads.add_assign(&r.grads);
                batch_loss += r.loss;
            }
            grads.scale(1.0 / results.len().max(1) as f64);
            if config.weight_decay > 0.0 {
                for (g, p) in grads.parts.iter_mut().zip(state.net.mlp.parts()) {
                    for (gi, pi) in g.iter_mut().zip(p) {
                        *gi += config.weight_decay * pi;
                    }
                }
            }
            let failure = if results.is_empty() {
                Some("non-finite loss".to_string())
            } else {
                match state.adam.step(state.net.mlp.parts_mut(), &grads, config.lr) {
                    Ok(()) => None,
                    Err(e) if e.is_numeric() => Some(e.to_string()),
                    Err(e) => return Err(e),
                }
            };
            if let Some(reason) = failure {
                *state = snapshot;
                return Ok((history, Some(format!("{reason} in epoch {epoch}, batch {b}"))));
            }
            loss_sum += batch_loss;
        }
        let (eval_accuracy, eval_by_pert) = if eval.is_empty() {
            (None, BTreeMap::new())
        } else {
            let r = pairwise_accuracy(&state.net, eval)?;
            (Some(r.overall), r.by_pert)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_accuracy,
            eval_by_pert,
        };
        state.epoch += 1;
        on_epoch(&rec, state);
        history.push(rec);
    }
    Ok((history, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::{forge_dataset, ForgeConfig};
    use crate::scene::{Predicate, RelationAtom};

    fn tiny_prompt() -> SpatialPrompt {
        SpatialPrompt::new(vec![0, 1, 2, 3], vec![RelationAtom::new(0, Predicate::LeftOf, 1)]).unwrap()
    }

    fn scene(x0: f64) -> Scene {
        Scene::new(&[0, 1, 2, 3], &[[x0, 0.5], [0.5, 0.5], [0.2, 0.2], [0.8, 0.8]]).unwrap()
    }

    #[test]
    fn constant_net_scores_its_bias() {
        let mut mlp = MlpParams::zeros(&[RewardNet::input_dim(4, 12), 8, 2]).unwrap();
        mlp.layers_mut()[1].bias = vec![0.7, -0.3];
        let net = RewardNet::from_mlp(mlp, 4, 12).unwrap();
        for x in [0.1, 0.9] {
            let g = net.score(&tiny_prompt(), &scene(x)).unwrap();
            assert_eq!(g.mu, 0.7);
            assert_eq!(g.sigma, softplus(-0.3) + SIGMA_FLOOR);
        }
    }

    #[test]
    fn equal_distributions_give_ln2() {
        let net = RewardNet::new(4, 12, &[16], &mut RngStream::new(1, 0)).unwrap();
        let eps = RngStream::new(2, 0).gauss_draw(100);
        let r = bt_loss_frozen(&net, &tiny_prompt(), &scene(0.1), &scene(0.1), &eps, &eps).unwrap();
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn biased_net(mu_gap: f64, pre_sigma: f64) -> RewardNet {
        // μ = mu_gap · (x0 feature), σ fixed by bias.
        let dim = RewardNet::input_dim(4, 12);
        let mut mlp = MlpParams::zeros(&[dim, 2]).unwrap();
        let x0_col = dim - 8 - crate::scene::pair_feature_dim(4);
        mlp.layers_mut()[0].weight.set(0, x0_col, mu_gap);
        mlp.layers_mut()[0].bias = vec![0.0, pre_sigma];
        RewardNet::from_mlp(mlp, 4, 12).unwrap()
    }

    #[test]
    fn saturated_margin_has_tiny_loss() {
        let net = biased_net(10.0, -30.0);
        let mut s = RngStream::new(3, 0);
        let ew = s.gauss_draw(100);
        let el = s.gauss_draw(100);
        let r = bt_loss_frozen(&net, &tiny_prompt(), &scene(1.0), &scene(0.0), &ew, &el).unwrap();
        assert!((r.winner.mu - r.loser.mu - 10.0).abs() < 1e-12);
        assert!(r.loss < 1e-4, "loss {}", r.loss);
    }

    #[test]
    fn unit_margin_matches_closed_form() {
        let net = biased_net(1.0, -40.0);
        let mut s = RngStream::new(4, 0);
        let ew = s.gauss_draw(100);
        let el = s.gauss_draw(100);
        let r = bt_loss_frozen(&net, &tiny_prompt(), &scene(1.0), &scene(0.0), &ew, &el).unwrap();
        // -ln sigmoid(1) = ln(1 + e^-1)
        assert!((r.loss - 0.313_261_687_518_222_8).abs() < 1e-4, "loss {}", r.loss);
    }

    #[test]
    fn swapped_pair_probabilities_sum_to_one() {
        let net = RewardNet::new(4, 12, &[8], &mut RngStream::new(5, 0)).unwrap();
        let (w, l) = (scene(0.1), scene(0.8));
        let gw = net.score(&tiny_prompt(), &w).unwrap();
        let gl = net.score(&tiny_prompt(), &l).unwrap();
        let mut s = RngStream::new(6, 0);
        for _ in 0..50 {
            let (a, b) = (s.gauss(), s.gauss());
            let sw = gw.mu + gw.sigma * a;
            let sl = gl.mu + gl.sigma * b;
            assert!((sigmoid(sw - sl) + sigmoid(sl - sw) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_mc_samples_rejected() {
        let net = RewardNet::new(4, 12, &[4], &mut RngStream::new(1, 1)).unwrap();
        assert!(bt_loss_frozen(&net, &tiny_prompt(), &scene(0.1), &scene(0.2), &[], &[]).is_err());
    }

    #[test]
    fn oracle_scorer_is_perfect_on_forged_pairs() {
        let cfg = ForgeConfig {
            train_n: 40,
            eval_n: 0,
            ..Default::default()
        };
        let (train, _, _) = forge_dataset(&cfg, 3).unwrap();
        let r = pairwise_accuracy(&OracleScorer, &train).unwrap();
        assert_eq!(r.overall, 1.0);
        assert_eq!(r.by_pert["1"], 1.0);
        assert_eq!(r.by_pert["2_3"], 1.0);
    }

    #[test]
    fn ties_count_half() {
        let cfg = ForgeConfig {
            train_n: 6,
            eval_n: 0,
            ..Default::default()
        };
        let (train, _, _) = forge_dataset(&cfg, 4).unwrap();
        let net = RewardNet::from_mlp(MlpParams::zeros(&[RewardNet::input_dim(4, 12), 2]).unwrap(), 4, 12).unwrap();
        assert_eq!(pairwise_accuracy(&net, &train).unwrap().overall, 0.5);
        assert!(pairwise_accuracy(&net, &[]).is_err());
    }

    #[test]
    fn single_pair_overfits() {
        let cfg = ForgeConfig {
            train_n: 1,
            eval_n: 0,
            ..Default::default()
        };
        let (train, _, _) = forge_dataset(&cfg, 5).unwrap();
        let net = RewardNet::new(4, 12, &[16, 16], &mut RngStream::new(7, 0)).unwrap();
        let config = RewardTrainConfig {
            epochs: 400,
            batch_size: 1,
            lr: 1e-2,
            ..Default::default()
        };
        let out = train_reward(net, &train, &[], &config, &RngStream::new(8, 0), |_, _| {}).unwrap();
        assert!(out.aborted.is_none());
        let last = out.history.last().unwrap().train_loss;
        assert!(last < 0.01, "loss {last}");
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = ForgeConfig {
            train_n: 20,
            eval_n: 10,
            ..Default::default()
        };
        let (train, eval, _) = forge_dataset(&cfg, 6).unwrap();
        let run = |shuffle: bool| {
            let net = RewardNet::new(4, 12, &[8], &mut RngStream::new(9, 0)).unwrap();
            let config = RewardTrainConfig {
                epochs: 3,
                batch_size: 4,
                shuffle,
                ..Default::default()
            };
            train_reward(net, &train, &eval, &config, &RngStream::new(10, 0), |_, _| {}).unwrap()
        };
        let (a, b, c) = (run(true), run(true), run(false));
        assert_eq!(a.history, b.history);
        assert_eq!(a.net, b.net);
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let cfg = ForgeConfig {
            train_n: 24,
            eval_n: 8,
            ..Default::default()
        };
        let (train, eval, _) = forge_dataset(&cfg, 11).unwrap();
        let stream = RngStream::new(12, 0);
        let fresh = || {
            let net = RewardNet::new(4, 12, &[8], &mut RngStream::new(13, 0)).unwrap();
            RewardTrainState::fresh(net, train.len(), &stream)
        };
        let config = |epochs| RewardTrainConfig {
            epochs,
            batch_size: 5,
            ..Default::default()
        };
        let mut straight = fresh();
        let (h, _) = train_reward_from(&mut straight, &train, &eval, &config(4), &stream, |_, _| {}).unwrap();
        let mut split = fresh();
        let (h1, _) = train_reward_from(&mut split, &train, &eval, &config(2), &stream, |_, _| {}).unwrap();
        let (h2, _) = train_reward_from(&mut split, &train, &eval, &config(4), &stream, |_, _| {}).unwrap();
        assert_eq!(straight.net, split.net);
        assert_eq!(h, [h1, h2].concat());
    }
}
