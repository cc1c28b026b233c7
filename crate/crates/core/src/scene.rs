//! Toy spatial scenes, relation atoms, and the rule-based oracle.
//!
//! Coordinates live in the unit square with `y` increasing upward, so
//! `Above(a, b)` means `y_a > y_b + margin`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Strict margin for the four directional predicates.
pub const DEFAULT_MARGIN: f64 = 0.02;
/// `Near` holds strictly below this center distance.
pub const D_NEAR: f64 = 0.2;
/// `Far` holds strictly above this center distance.
pub const D_FAR: f64 = 0.5;
pub const DEFAULT_CLASSES: usize = 12;
pub const DEFAULT_OBJECTS: usize = 4;
pub const NUM_PREDICATES: usize = 6;

pub const CLASS_NAMES: [&str; DEFAULT_CLASSES] = [
    "cube", "sphere", "cone", "cylinder", "torus", "pyramid", "lamp", "chair", "vase", "book",
    "cup", "plant",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Predicate {
    LeftOf,
    RightOf,
    Above,
    Below,
    Near,
    Far,
}

impl Predicate {
    pub const ALL: [Predicate; NUM_PREDICATES] = [
        Predicate::LeftOf,
        Predicate::RightOf,
        Predicate::Above,
        Predicate::Below,
        Predicate::Near,
        Predicate::Far,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Predicate> {
        Self::ALL.get(i).copied()
    }

    /// The predicate that can never hold together with `self` on the same pair.
    pub fn inverse(self) -> Predicate {
        match self {
            Predicate::LeftOf => Predicate::RightOf,
            Predicate::RightOf => Predicate::LeftOf,
            Predicate::Above => Predicate::Below,
            Predicate::Below => Predicate::Above,
            Predicate::Near => Predicate::Far,
            Predicate::Far => Predicate::Near,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Predicate::LeftOf => "LEFT_OF",
            Predicate::RightOf => "RIGHT_OF",
            Predicate::Above => "ABOVE",
            Predicate::Below => "BELOW",
            Predicate::Near => "NEAR",
            Predicate::Far => "FAR",
        }
    }

    pub fn from_token(s: &str) -> Option<Predicate> {
        Self::ALL.into_iter().find(|p| p.token() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationAtom {
    pub subject: usize,
    pub predicate: Predicate,
    pub object: usize,
}

impl RelationAtom {
    pub fn new(subject: usize, predicate: Predicate, object: usize) -> Self {
        Self {
            subject,
            predicate,
            object,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.subject >= k || self.object >= k {
            return Err(LabError::Domain(format!(
                "atom {self:?} references a slot outside 0..{k}"
            )));
        }
        if self.subject == self.object {
            return Err(LabError::Domain(format!("atom {self:?} relates a slot to itself")));
        }
        Ok(())
    }
}

impl std::fmt::Display for RelationAtom {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}({},{})", self.predicate.token(), self.subject, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub slot: usize,
    pub class_id: usize,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    objects: Vec<SceneObject>,
}

impl Scene {
    pub fn new(classes: &[usize], positions: &[[f64; 2]]) -> Result<Self> {
        if classes.len() != positions.len() {
            return Err(LabError::Domain(format!(
                "{} classes but {} positions",
                classes.len(),
                positions.len()
            )));
        }
        if classes.is_empty() {
            return Err(LabError::Domain("scene has no objects".into()));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(LabError::Domain(format!(
                    "object {i} position {p:?} outside the unit square"
                )));
            }
        }
        Ok(Self {
            objects: classes
                .iter()
                .zip(positions)
                .enumerate()
                .map(|(slot, (&class_id, &position))| SceneObject {
                    slot,
                    class_id,
                    position,
                })
                .collect(),
        })
    }

    /// Inverse of [`embed_scene`], clamping each coordinate into `[0, 1]`.
    pub fn from_flat_clamped(classes: &[usize], flat: &[f64]) -> Result<Self> {
        if flat.len() != 2 * classes.len() {
            return Err(LabError::Shape(format!(
                "{} coordinates for {} objects",
                flat.len(),
                classes.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("scene coordinates".into()));
        }
        let positions: Vec<[f64; 2]> = flat
            .chunks_exact(2)
            .map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0)])
            .collect();
        Self::new(classes, &positions)
    }

    pub fn k(&self) -> usize {
        self.objects.len()
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn position(&self, slot: usize) -> [f64; 2] {
        self.objects[slot].position
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.objects.iter().map(|o| o.position).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.class_id).collect()
    }

    /// Largest per-object displacement between two scenes of equal size.
    pub fn max_displacement(&self, other: &Scene) -> f64 {
        self.objects
            .iter()
            .zip(&other.objects)
            .map(|(a, b)| {
                let dx = a.position[0] - b.position[0];
                let dy = a.position[1] - b.position[1];
                (dx * dx + dy * dy).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialPrompt {
    class_slots: Vec<usize>,
    atoms: Vec<RelationAtom>,
}

impl SpatialPrompt {
    pub fn new(class_slots: Vec<usize>, atoms: Vec<RelationAtom>) -> Result<Self> {
        Self::with_vocab(class_slots, atoms, DEFAULT_CLASSES)
    }

    pub fn with_vocab(class_slots: Vec<usize>, atoms: Vec<RelationAtom>, n_classes: usize) -> Result<Self> {
        let k = class_slots.len();
        if k < 2 {
            return Err(LabError::Domain(format!("prompt needs at least 2 objects, got {k}")));
        }
        if let Some(&c) = class_slots.iter().find(|&&c| c >= n_classes) {
            return Err(LabError::Domain(format!("class id {c} outside vocabulary of {n_classes}")));
        }
        if atoms.is_empty() {
            return Err(LabError::Domain("prompt needs at least one relation atom".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &atoms {
            a.validate(k)?;
            if !seen.insert(*a) {
                return Err(LabError::Domain(format!("duplicate atom {a}")));
            }
        }
        Ok(Self { class_slots, atoms })
    }

    pub fn k(&self) -> usize {
        self.class_slots.len()
    }

    pub fn class_slots(&self) -> &[usize] {
        &self.class_slots
    }

    pub fn atoms(&self) -> &[RelationAtom] {
        &self.atoms
    }
}

impl std::fmt::Display for SpatialPrompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<String> = self
            .class_slots
            .iter()
            .map(|&c| class_name(c))
            .collect();
        let atoms: Vec<String> = self.atoms.iter().map(ToString::to_string).collect();
        write!(f, "[{}] {}", names.join(","), atoms.join(" & "))
    }
}

pub fn class_name(id: usize) -> String {
    CLASS_NAMES
        .get(id)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{id}"))
}

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES
        .iter()
        .position(|&n| n == name)
        .or_else(|| name.strip_prefix("class").and_then(|s| s.parse().ok()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScore {
    pub satisfied: usize,
    pub total: usize,
    pub fraction: f64,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Boundary cases (exactly `margin` apart, or exactly at a distance threshold)
/// count as unsatisfied.
pub fn relation_satisfied(scene: &Scene, atom: &RelationAtom, margin: f64) -> Result<bool> {
    atom.validate(scene.k())?;
    if !(margin >= 0.0) {
        return Err(LabError::Domain(format!("margin must be non-negative, got {margin}")));
    }
    let [xs, ys] = scene.position(atom.subject);
    let [xo, yo] = scene.position(atom.object);
    Ok(match atom.predicate {
        Predicate::LeftOf => xs < xo - margin,
        Predicate::RightOf => xs > xo + margin,
        Predicate::Above => ys > yo + margin,
        Predicate::Below => ys < yo - margin,
        Predicate::Near => distance([xs, ys], [xo, yo]) < D_NEAR,
        Predicate::Far => distance([xs, ys], [xo, yo]) > D_FAR,
    })
}

pub fn oracle_score(scene: &Scene, prompt: &SpatialPrompt) -> Result<OracleScore> {
    if scene.k() != prompt.k() {
        return Err(LabError::Domain(format!(
            "scene has {} objects, prompt has {}",
            scene.k(),
            prompt.k()
        )));
    }
    let mut satisfied = 0;
    for atom in prompt.atoms() {
        if relation_satisfied(scene, atom, DEFAULT_MARGIN)? {
            satisfied += 1;
        }
    }
    let total = prompt.atoms().len();
    Ok(OracleScore {
        satisfied,
        total,
        fraction: satisfied as f64 / total as f64,
    })
}

/// Length of [`embed_prompt`] output for `k` objects and `n_classes` classes.
pub fn prompt_embedding_dim(k: usize, n_classes: usize) -> usize {
    k * n_classes + 2 * k + NUM_PREDICATES + k * NUM_PREDICATES * k
}

/// Fixed-length prompt features, three concatenated blocks:
///
/// 1. `k * n_classes` one-hots of the class in each slot;
/// 2. the sum over atoms of `onehot(subject, k) ⊕ onehot(predicate, 6) ⊕ onehot(object, k)`;
/// 3. the sum over atoms of `onehot(subject) ⊗ onehot(predicate) ⊗ onehot(object)`,
///    flattened subject-major.
///
/// Block 2 alone cannot tell which subject goes with which predicate once a
/// prompt has several atoms; block 3 keeps each atom identifiable. Both are
/// sums, so atom order never matters.
pub fn embed_prompt(prompt: &SpatialPrompt, n_classes: usize) -> Vec<f64> {
    let k = prompt.k();
    let mut v = vec![0.0; prompt_embedding_dim(k, n_classes)];
    for (slot, &c) in prompt.class_slots().iter().enumerate() {
        v[slot * n_classes + c] = 1.0;
    }
    let sum_base = k * n_classes;
    let outer_base = sum_base + 2 * k + NUM_PREDICATES;
    for a in prompt.atoms() {
        let p = a.predicate.index();
        v[sum_base + a.subject] += 1.0;
        v[sum_base + k + p] += 1.0;
        v[sum_base + k + NUM_PREDICATES + a.object] += 1.0;
        v[outer_base + (a.subject * NUM_PREDICATES + p) * k + a.object] += 1.0;
    }
    v
}

/// `[x0, y0, x1, y1, ...]` in slot order.
pub fn embed_scene(scene: &Scene) -> Vec<f64> {
    scene.objects.iter().flat_map(|o| o.position).collect()
}

pub fn pair_feature_dim(k: usize) -> usize {
    3 * k * (k - 1) / 2
}

/// `(x_i - x_j, y_i - y_j, d_ij)` for every slot pair `i < j`.
pub fn pair_features(scene: &Scene) -> Vec<f64> {
    let p = scene.positions();
    let mut out = Vec::with_capacity(pair_feature_dim(p.len()));
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let (dx, dy) = (p[i][0] - p[j][0], p[i][1] - p[j][1]);
            out.extend([dx, dy, dx.hypot(dy)]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// JSON

/// Slot reference inside a serialized atom; accepts `0` or `"0"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum SlotRef {
    Index(usize),
    Text(String),
}

impl SlotRef {
    fn get(&self) -> Result<usize> {
        match self {
            SlotRef::Index(i) => Ok(*i),
            SlotRef::Text(s) => s
                .parse()
                .map_err(|_| LabError::Domain(format!("bad slot reference '{s}'"))),
        }
    }
}

/// Serialized prompt and/or scene:
/// `{"classes":[...], "atoms":[[s,"PRED",o],...], "positions":[[x,y],...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneJson {
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atoms: Option<Vec<(SlotRef, String, SlotRef)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<[f64; 2]>>,
}

fn encode_classes(ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&c| class_name(c)).collect()
}

fn decode_classes(names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| class_id(n).ok_or_else(|| LabError::Domain(format!("unknown class '{n}'"))))
        .collect()
}

impl SceneJson {
    pub fn from_prompt(prompt: &SpatialPrompt) -> Self {
        Self {
            classes: encode_classes(prompt.class_slots()),
            atoms: Some(
                prompt
                    .atoms()
                    .iter()
                    .map(|a| {
                        (
                            SlotRef::Index(a.subject),
                            a.predicate.token().to_string(),
                            SlotRef::Index(a.object),
                        )
                    })
                    .collect(),
            ),
            positions: None,
        }
    }

    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            classes: encode_classes(&scene.classes()),
            atoms: None,
            positions: Some(scene.positions()),
        }
    }

    pub fn from_both(prompt: &SpatialPrompt, scene: &Scene) -> Self {
        let mut j = Self::from_prompt(prompt);
        j.positions = Some(scene.positions());
        j
    }

    pub fn to_prompt(&self) -> Result<SpatialPrompt> {
        let classes = decode_classes(&self.classes)?;
        let raw = self
            .atoms
            .as_ref()
            .ok_or_else(|| LabError::Domain("record has no atoms".into()))?;
        let atoms = raw
            .iter()
            .map(|(s, p, o)| {
                let predicate = Predicate::from_token(p)
                    .ok_or_else(|| LabError::Domain(format!("unknown predicate '{p}'")))?;
                Ok(RelationAtom::new(s.get()?, predicate, o.get()?))
            })
            .collect::<Result<Vec<_>>>()?;
        SpatialPrompt::new(classes, atoms)
    }

    pub fn to_scene(&self) -> Result<Scene> {
        let classes = decode_classes(&self.classes)?;
        let positions = self
            .positions
            .as_ref()
            .ok_or_else(|| LabError::Domain("record has no positions".into()))?;
        Scene::new(&classes, positions)
    }
}
