//! Adversarial preference-pair construction.
//!
//! A pair starts from a "perfect" prompt and a scene satisfying all of its
//! atoms (the winner). One to three atoms are then edited to produce a
//! perturbed prompt, a scene is synthesized for that prompt (the loser), and
//! the candidate is kept only if the loser really breaks every edited atom of
//! the perfect prompt and its layout visibly differs from the winner's.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::RngStream;
use crate::scene::{
    oracle_score, relation_satisfied, Predicate, RelationAtom, Scene, SceneJson, SpatialPrompt,
    DEFAULT_CLASSES, DEFAULT_MARGIN, DEFAULT_OBJECTS,
};

/// Rejection-sampling budget for one scene.
pub const SYNTH_ATTEMPTS: usize = 10_000;
/// Minimum largest per-object displacement between winner and loser.
pub const MIN_LAYOUT_SHIFT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub k_objects: usize,
    pub n_classes: usize,
    pub atoms_min: usize,
    pub atoms_max: usize,
    /// Prompt redraws allowed before giving up on satisfiability.
    pub prompt_attempts: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            k_objects: DEFAULT_OBJECTS,
            n_classes: DEFAULT_CLASSES,
            atoms_min: 2,
            atoms_max: 5,
            prompt_attempts: 200,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(3..=6).contains(&self.k_objects) {
            return Err(LabError::Config(format!(
                "k_objects must be in 3..=6, got {}",
                self.k_objects
            )));
        }
        if self.n_classes == 0 {
            return Err(LabError::Config("n_classes must be positive".into()));
        }
        let max_atoms = self.k_objects * (self.k_objects - 1) * Predicate::ALL.len();
        if self.atoms_min == 0 || self.atoms_min > self.atoms_max || self.atoms_max > max_atoms {
            return Err(LabError::Config(format!(
                "atom range {}..={} invalid",
                self.atoms_min, self.atoms_max
            )));
        }
        if self.prompt_attempts == 0 {
            return Err(LabError::Config("prompt_attempts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PerturbKind {
    InvertPredicate,
    SwapArguments,
    RetargetObject,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 3] = [
        PerturbKind::InvertPredicate,
        PerturbKind::SwapArguments,
        PerturbKind::RetargetObject,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbOp {
    pub kind: PerturbKind,
    pub atom_index: usize,
    pub before: RelationAtom,
    pub after: RelationAtom,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerturbationSpec {
    pub ops: Vec<PerturbOp>,
}

impl PerturbationSpec {
    pub fn n_perturbations(&self) -> usize {
        self.ops.len()
    }

    /// The perfect-prompt atoms that were edited.
    pub fn targets(&self) -> impl Iterator<Item = &RelationAtom> {
        self.ops.iter().map(|op| &op.before)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: SpatialPrompt,
    pub winner: Scene,
    pub loser: Scene,
    pub perturbation: PerturbationSpec,
    /// Id of the random stream the pair was drawn from.
    pub seed: u64,
}

impl PreferencePair {
    pub fn n_perturbations(&self) -> usize {
        self.perturbation.n_perturbations()
    }

    /// Rebuilds the perturbed prompt from the perfect prompt and the ops.
    pub fn perturbed_prompt(&self) -> Result<SpatialPrompt> {
        let mut atoms = self.prompt.atoms().to_vec();
        for op in &self.perturbation.ops {
            atoms[op.atom_index] = op.after;
        }
        SpatialPrompt::new(self.prompt.class_slots().to_vec(), atoms)
    }
}

/// Canonical form with the lower slot first, so `LeftOf(1,0)` and
/// `RightOf(0,1)` compare equal.
fn canonical(a: &RelationAtom) -> RelationAtom {
    if a.subject < a.object {
        return *a;
    }
    let p = match a.predicate {
        Predicate::LeftOf => Predicate::RightOf,
        Predicate::RightOf => Predicate::LeftOf,
        Predicate::Above => Predicate::Below,
        Predicate::Below => Predicate::Above,
        p @ (Predicate::Near | Predicate::Far) => p,
    };
    RelationAtom::new(a.object, p, a.subject)
}

/// True when two atoms state the same relation, possibly written mirrored.
pub fn equivalent(a: &RelationAtom, b: &RelationAtom) -> bool {
    canonical(a) == canonical(b)
}

/// Cheap pre-check for direct contradictions (`LeftOf(0,1)` with `LeftOf(1,0)`, ...).
fn directly_contradictory(atoms: &[RelationAtom]) -> bool {
    let set: BTreeSet<RelationAtom> = atoms.iter().map(canonical).collect();
    set.iter().any(|a| {
        let inv = RelationAtom::new(a.subject, a.predicate.inverse(), a.object);
        set.contains(&inv)
    })
}

/// Rejection-samples uniform layouts until every atom of `prompt` holds.
pub fn synthesize_scene(prompt: &SpatialPrompt, stream: &mut RngStream) -> Result<Scene> {
    synthesize_with_budget(prompt, stream, SYNTH_ATTEMPTS)
}

pub fn synthesize_with_budget(
    prompt: &SpatialPrompt,
    stream: &mut RngStream,
    attempts: usize,
) -> Result<Scene> {
    let k = prompt.k();
    let classes = prompt.class_slots();
    let mut positions = vec![[0.0; 2]; k];
    for _ in 0..attempts {
        for p in positions.iter_mut() {
            *p = [stream.uniform(), stream.uniform()];
        }
        let scene = Scene::new(classes, &positions)?;
        if oracle_score(&scene, prompt)?.satisfied == prompt.atoms().len() {
            return Ok(scene);
        }
    }
    Err(LabError::Unsatisfiable(format!(
        "no layout satisfies {prompt} within {attempts} attempts"
    )))
}

fn random_atom(stream: &mut RngStream, k: usize) -> RelationAtom {
    let subject = stream.index(k);
    let mut object = stream.index(k - 1);
    if object >= subject {
        object += 1;
    }
    let predicate = Predicate::from_index(stream.index(Predicate::ALL.len())).expect("in range");
    RelationAtom::new(subject, predicate, object)
}

/// Draws a prompt with `n_atoms` atoms that is jointly satisfiable.
pub fn generate_prompt_with_atoms(
    stream: &mut RngStream,
    config: &GrammarConfig,
    n_atoms: usize,
) -> Result<SpatialPrompt> {
    config.validate()?;
    let k = config.k_objects;
    // Distinct relations on unordered pairs, each pair carrying at most one
    // directional-x, one directional-y and one distance atom.
    let capacity = k * (k - 1) / 2 * 3;
    if n_atoms == 0 || n_atoms > capacity {
        return Err(LabError::Config(format!(
            "cannot place {n_atoms} atoms among {k} objects"
        )));
    }
    for _ in 0..config.prompt_attempts {
        let classes: Vec<usize> = (0..k).map(|_| stream.index(config.n_classes)).collect();
        let mut atoms: Vec<RelationAtom> = Vec::with_capacity(n_atoms);
        let mut guard = 0;
        while atoms.len() < n_atoms && guard < 1000 {
            guard += 1;
            let a = random_atom(stream, k);
            if atoms.iter().any(|b| equivalent(&a, b)) {
                continue;
            }
            atoms.push(a);
            if directly_contradictory(&atoms) {
                atoms.pop();
            }
        }
        if atoms.len() < n_atoms {
            continue;
        }
        let prompt = SpatialPrompt::with_vocab(classes, atoms, config.n_classes)?;
        match synthesize_scene(&prompt, stream) {
            Ok(_) => return Ok(prompt),
            Err(LabError::Unsatisfiable(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(LabError::Generation(format!(
        "no satisfiable {n_atoms}-atom prompt within {} draws",
        config.prompt_attempts
    )))
}

/// Draws a prompt with an atom count uniform in `atoms_min..=atoms_max`.
pub fn generate_prompt(stream: &mut RngStream, config: &GrammarConfig) -> Result<SpatialPrompt> {
    config.validate()?;
    let r = config.atoms_min + stream.index(config.atoms_max - config.atoms_min + 1);
    generate_prompt_with_atoms(stream, config, r)
}

/// Applies one edit; `None` when the edit is not meaningful for this atom.
pub fn apply_perturbation(
    kind: PerturbKind,
    atom: &RelationAtom,
    k: usize,
    stream: &mut RngStream,
) -> Option<RelationAtom> {
    match kind {
        PerturbKind::InvertPredicate => Some(RelationAtom::new(
            atom.subject,
            atom.predicate.inverse(),
            atom.object,
        )),
        PerturbKind::SwapArguments => match atom.predicate {
            // Symmetric relations are unchanged by swapping.
            Predicate::Near | Predicate::Far => None,
            _ => Some(RelationAtom::new(atom.object, atom.predicate, atom.subject)),
        },
        PerturbKind::RetargetObject => {
            let choices: Vec<usize> = (0..k)
                .filter(|&s| s != atom.subject && s != atom.object)
                .collect();
            if choices.is_empty() {
                return None;
            }
            let object = choices[stream.index(choices.len())];
            Some(RelationAtom::new(atom.subject, atom.predicate, object))
        }
    }
}

/// Draws a perturbation budget of edits used by [`perturb_prompt`].
const PERTURB_ATTEMPTS: usize = 100;

/// Edits exactly `n` distinct atoms, leaving the rest unchanged; returns the
/// perturbed prompt, the edit record, and a layout satisfying the perturbed
/// prompt.
pub fn perturb_prompt_with_witness(
    prompt: &SpatialPrompt,
    n: usize,
    stream: &mut RngStream,
) -> Result<(SpatialPrompt, PerturbationSpec, Scene)> {
    let r = prompt.atoms().len();
    if n == 0 || n > r.min(3) {
        return Err(LabError::Config(format!(
            "perturbation count {n} outside 1..={}",
            r.min(3)
        )));
    }
    let k = prompt.k();
    'attempt: for _ in 0..PERTURB_ATTEMPTS {
        let mut indices: Vec<usize> = (0..r).collect();
        stream.shuffle(&mut indices);
        indices.truncate(n);
        indices.sort_unstable();
        let mut atoms = prompt.atoms().to_vec();
        let mut ops = Vec::with_capacity(n);
        for &i in &indices {
            let kind = PerturbKind::ALL[stream.index(PerturbKind::ALL.len())];
            let before = prompt.atoms()[i];
            let Some(after) = apply_perturbation(kind, &before, k, stream) else {
                continue 'attempt;
            };
            if equivalent(&after, &before) {
                continue 'attempt;
            }
            atoms[i] = after;
            ops.push(PerturbOp {
                kind,
                atom_index: i,
                before,
                after,
            });
        }
        // Edited atoms must not collide with each other or the untouched ones.
        for (i, a) in atoms.iter().enumerate() {
            if atoms[..i].iter().any(|b| equivalent(a, b)) {
                continue 'attempt;
            }
        }
        if directly_contradictory(&atoms) {
            continue;
        }
        let perturbed = SpatialPrompt::new(prompt.class_slots().to_vec(), atoms)?;
        match synthesize_scene(&perturbed, stream) {
            Ok(scene) => return Ok((perturbed, PerturbationSpec { ops }, scene)),
            Err(LabError::Unsatisfiable(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(LabError::Generation(format!(
        "no satisfiable {n}-edit perturbation of {prompt}"
    )))
}

pub fn perturb_prompt(
    prompt: &SpatialPrompt,
    n: usize,
    stream: &mut RngStream,
) -> Result<(SpatialPrompt, PerturbationSpec)> {
    perturb_prompt_with_witness(prompt, n, stream).map(|(p, s, _)| (p, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// The winner breaks at least one perfect-prompt atom.
    WinnerImperfect,
    /// The loser still satisfies an edited atom of the perfect prompt.
    PerturbationUnexpressed,
    /// Winner and loser layouts are nearly identical.
    LayoutUnchanged,
    /// Object counts disagree, or the edit record is malformed.
    Malformed,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::WinnerImperfect => "winner_imperfect",
            RejectReason::PerturbationUnexpressed => "perturbation_unexpressed",
            RejectReason::LayoutUnchanged => "layout_unchanged",
            RejectReason::Malformed => "malformed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

pub fn verify_pair(pair: &PreferencePair) -> Verdict {
    let k = pair.prompt.k();
    if pair.winner.k() != k || pair.loser.k() != k || pair.perturbation.ops.is_empty() {
        return Verdict::Reject(RejectReason::Malformed);
    }
    for op in &pair.perturbation.ops {
        if pair.prompt.atoms().get(op.atom_index) != Some(&op.before) {
            return Verdict::Reject(RejectReason::Malformed);
        }
    }
    match oracle_score(&pair.winner, &pair.prompt) {
        Ok(s) if s.satisfied == s.total => {}
        _ => return Verdict::Reject(RejectReason::WinnerImperfect),
    }
    for target in pair.perturbation.targets() {
        match relation_satisfied(&pair.loser, target, DEFAULT_MARGIN) {
            Ok(false) => {}
            _ => return Verdict::Reject(RejectReason::PerturbationUnexpressed),
        }
    }
    if pair.winner.max_displacement(&pair.loser) < MIN_LAYOUT_SHIFT {
        return Verdict::Reject(RejectReason::LayoutUnchanged);
    }
    Verdict::Accept
}

// ---------------------------------------------------------------------------
// Dataset construction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub grammar: GrammarConfig,
    pub train_n: usize,
    pub eval_n: usize,
    /// Fraction of one-edit pairs; the rest alternate between two and three edits.
    pub pert_mix: f64,
    /// Candidate draws allowed per emitted pair.
    pub attempts_per_pair: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarConfig::default(),
            train_n: 1000,
            eval_n: 500,
            pert_mix: 0.5,
            attempts_per_pair: 200,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        if self.train_n == 0 && self.eval_n == 0 {
            return Err(LabError::Config("requested sizes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pert_mix) {
            return Err(LabError::Config(format!("pert_mix {} outside [0,1]", self.pert_mix)));
        }
        if self.pert_mix < 1.0 && self.grammar.atoms_max < 3 {
            return Err(LabError::Config(
                "multi-edit pairs need atoms_max >= 3".into(),
            ));
        }
        if self.attempts_per_pair == 0 {
            return Err(LabError::Config("attempts_per_pair must be positive".into()));
        }
        Ok(())
    }

    /// Number of one-edit pairs in a split of `n`.
    pub fn one_edit_count(&self, n: usize) -> usize {
        (self.pert_mix * n as f64).round() as usize
    }

    /// Edit count assigned to record `index` of a split of `n`.
    pub fn edits_for(&self, index: usize, n: usize) -> usize {
        let ones = self.one_edit_count(n);
        if index < ones {
            1
        } else if (index - ones) % 2 == 0 {
            2
        } else {
            3
        }
    }
}

#[derive(Debug, Clone)]
struct SlotOutcome {
    pair: Option<PreferencePair>,
    discards: BTreeMap<String, usize>,
}

/// Draws candidates for one record until one verifies or the budget runs out.
fn forge_one(config: &ForgeConfig, n_edits: usize, mut stream: RngStream) -> Result<SlotOutcome> {
    let g = &config.grammar;
    let mut discards: BTreeMap<String, usize> = BTreeMap::new();
    let lo = g.atoms_min.max(n_edits);
    for _ in 0..config.attempts_per_pair {
        let r = lo + stream.index(g.atoms_max - lo + 1);
        let prompt = match generate_prompt_with_atoms(&mut stream, g, r) {
            Ok(p) => p,
            Err(LabError::Generation(_)) => {
                *discards.entry("prompt_unsatisfiable".into()).or_default() += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let winner = match synthesize_scene(&prompt, &mut stream) {
            Ok(s) => s,
            Err(LabError::Unsatisfiable(_)) => {
                *discards.entry("winner_unsatisfiable".into()).or_default() += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (_, perturbation, loser) = match perturb_prompt_with_witness(&prompt, n_edits, &mut stream) {
            Ok(t) => t,
            Err(LabError::Generation(_)) => {
                *discards.entry("perturbation_unsatisfiable".into()).or_default() += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let pair = PreferencePair {
            prompt,
            winner,
            loser,
            perturbation,
            seed: stream.stream_id(),
        };
        match verify_pair(&pair) {
            Verdict::Accept => {
                return Ok(SlotOutcome {
                    pair: Some(pair),
                    discards,
                })
            }
            Verdict::Reject(reason) => {
                *discards.entry(reason.as_str().into()).or_default() += 1;
            }
        }
    }
    Ok(SlotOutcome {
        pair: None,
        discards,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub requested: usize,
    pub emitted: usize,
    /// Keyed by edit count: "1", "2", "3".
    pub by_n_pert: BTreeMap<String, usize>,
    /// Keyed by subset: "1", "2_3".
    pub by_subset: BTreeMap<String, usize>,
    /// Records whose candidate budget ran out.
    pub exhausted: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub global_seed: u64,
    pub config: Option<ForgeConfig>,
    pub train: SplitCounts,
    pub eval: SplitCounts,
    pub discards: usize,
    pub discard_reasons: BTreeMap<String, usize>,
    /// Discarded candidates over all candidates drawn.
    pub discard_rate: f64,
}

impl DatasetManifest {
    pub fn exhausted(&self) -> usize {
        self.train.exhausted + self.eval.exhausted
    }
}

pub const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
pub const EVAL_STREAM: u64 = 0x6576_616c_0000;

/// Generates one split; records are ordered by index and each index draws
/// from its own derived stream.
pub fn forge_split(
    config: &ForgeConfig,
    seed: u64,
    split_stream: u64,
    n: usize,
) -> Result<(Vec<PreferencePair>, SplitCounts, BTreeMap<String, usize>)> {
    config.validate()?;
    let base = RngStream::new(seed, split_stream);
    let outcomes: Vec<Result<SlotOutcome>> = (0..n)
        .into_par_iter()
        .map(|i| forge_one(config, config.edits_for(i, n), base.derive(i as u64)))
        .collect();
    let mut pairs = Vec::with_capacity(n);
    let mut counts = SplitCounts {
        requested: n,
        ..Default::default()
    };
    let mut discards: BTreeMap<String, usize> = BTreeMap::new();
    for outcome in outcomes {
        let outcome = outcome?;
        for (k, v) in outcome.discards {
            *discards.entry(k).or_default() += v;
        }
        match outcome.pair {
            Some(p) => {
                let e = p.n_perturbations();
                *counts.by_n_pert.entry(e.to_string()).or_default() += 1;
                let subset = if e == 1 { "1" } else { "2_3" };
                *counts.by_subset.entry(subset.into()).or_default() += 1;
                pairs.push(p);
            }
            None => counts.exhausted += 1,
        }
    }
    counts.emitted = pairs.len();
    Ok((pairs, counts, discards))
}

/// In-memory dataset build: `(train, eval, manifest)`.
pub fn forge_dataset(
    config: &ForgeConfig,
    seed: u64,
) -> Result<(Vec<PreferencePair>, Vec<PreferencePair>, DatasetManifest)> {
    let (train, train_counts, mut discards) = forge_split(config, seed, TRAIN_STREAM, config.train_n)?;
    let (eval, eval_counts, eval_discards) = forge_split(config, seed, EVAL_STREAM, config.eval_n)?;
    for (k, v) in eval_discards {
        *discards.entry(k).or_default() += v;
    }
    let total_discards: usize = discards.values().sum();
    let accepted = train.len() + eval.len();
    let manifest = DatasetManifest {
        global_seed: seed,
        config: Some(config.clone()),
        train: train_counts,
        eval: eval_counts,
        discards: total_discards,
        discard_rate: if total_discards + accepted == 0 {
            0.0
        } else {
            total_discards as f64 / (total_discards + accepted) as f64
        },
        discard_reasons: discards,
    };
    Ok((train, eval, manifest))
}

pub struct DatasetFiles {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub manifest: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.jsonl"),
            eval: dir.join("eval.jsonl"),
            manifest: dir.join("manifest.json"),
        }
    }
}

/// Builds both splits and writes `train.jsonl`, `eval.jsonl`, `manifest.json`
/// into `out_dir`.
pub fn build_dataset(config: &ForgeConfig, seed: u64, out_dir: &Path) -> Result<(DatasetFiles, DatasetManifest)> {
    let (train, eval, manifest) = forge_dataset(config, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let files = DatasetFiles::in_dir(out_dir);
    write_pairs(&files.train, &train)?;
    write_pairs(&files.eval, &eval)?;
    std::fs::write(&files.manifest, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok((files, manifest))
}

// ---------------------------------------------------------------------------
// JSON-lines records

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpRecord {
    pub op: PerturbKind,
    pub atom: usize,
    pub before: (usize, Predicate, usize),
    pub after: (usize, Predicate, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: SceneJson,
    pub winner: SceneJson,
    pub loser: SceneJson,
    pub n_pert: usize,
    pub ops: Vec<OpRecord>,
    pub seed: u64,
}

fn atom_tuple(a: &RelationAtom) -> (usize, Predicate, usize) {
    (a.subject, a.predicate, a.object)
}

impl From<&PreferencePair> for PairRecord {
    fn from(p: &PreferencePair) -> Self {
        Self {
            prompt: SceneJson::from_prompt(&p.prompt),
            winner: SceneJson::from_scene(&p.winner),
            loser: SceneJson::from_scene(&p.loser),
            n_pert: p.n_perturbations(),
            ops: p
                .perturbation
                .ops
                .iter()
                .map(|op| OpRecord {
                    op: op.kind,
                    atom: op.atom_index,
                    before: atom_tuple(&op.before),
                    after: atom_tuple(&op.after),
                })
                .collect(),
            seed: p.seed,
        }
    }
}

impl PairRecord {
    pub fn into_pair(self) -> Result<PreferencePair> {
        let prompt = self.prompt.to_prompt()?;
        let ops: Vec<PerturbOp> = self
            .ops
            .iter()
            .map(|o| PerturbOp {
                kind: o.op,
                atom_index: o.atom,
                before: RelationAtom::new(o.before.0, o.before.1, o.before.2),
                after: RelationAtom::new(o.after.0, o.after.1, o.after.2),
            })
            .collect();
        if ops.len() != self.n_pert {
            return Err(LabError::Domain(format!(
                "n_pert {} but {} ops",
                self.n_pert,
                ops.len()
            )));
        }
        Ok(PreferencePair {
            prompt,
            winner: self.winner.to_scene()?,
            loser: self.loser.to_scene()?,
            perturbation: PerturbationSpec { ops },
            seed: self.seed,
        })
    }
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, &PairRecord::from(p))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<PairRecord>(l)?.into_pair())
        .collect()
}
