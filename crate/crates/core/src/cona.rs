//! The knowledge-interaction grid: which encoder pairs learn from which, with
//! which supervision strategy, and how each grid cell wires the four
//! embedding batches into the loss kernels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::{feature_distance, infonce, kl_div_directed, similarity_distance, EmbeddingBatch, KlDirection, LossValue, DEFAULT_TAU};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LearningType {
    IntraStuStu,
    InterStuStu,
    IntraTchStu,
    InterTchStu,
}

impl LearningType {
    pub const ALL: [LearningType; 4] = [
        LearningType::IntraStuStu,
        LearningType::InterStuStu,
        LearningType::IntraTchStu,
        LearningType::InterTchStu,
    ];

    /// Row label used in ablation tables.
    pub fn description(self) -> &'static str {
        match self {
            LearningType::IntraStuStu => "intra-modal stu-stu learning",
            LearningType::InterStuStu => "inter-modal stu-stu learning",
            LearningType::IntraTchStu => "intra-modal tch-stu learning",
            LearningType::InterTchStu => "inter-modal tch-stu learning",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    InfoNCE,
    FD,
    SD,
    KLDiv,
    SymSD,
    SymKLDiv,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::InfoNCE,
        Strategy::FD,
        Strategy::SD,
        Strategy::KLDiv,
        Strategy::SymSD,
        Strategy::SymKLDiv,
    ];
}

macro_rules! display_fromstr {
    ($ty:ty, $($variant:ident),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                match self {
                    $(<$ty>::$variant => f.write_str(stringify!($variant)),)+
                }
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $(stringify!($variant) => Ok(<$ty>::$variant),)+
                    other => Err(Error::InvalidConfig(format!(
                        "unknown {} `{}`",
                        stringify!($ty),
                        other
                    ))),
                }
            }
        }
    };
}

display_fromstr!(LearningType, IntraStuStu, InterStuStu, IntraTchStu, InterTchStu);
display_fromstr!(Strategy, InfoNCE, FD, SD, KLDiv, SymSD, SymKLDiv);

/// The encoder whose output fills a loss argument.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    TextStudent,
    ImageStudent,
    TextTeacher,
    ImageTeacher,
}

impl Role {
    pub fn is_teacher(self) -> bool {
        matches!(self, Role::TextTeacher | Role::ImageTeacher)
    }

    fn index(self) -> usize {
        self as usize
    }

    /// The same role in the other modality.
    pub fn swap_modality(self) -> Role {
        match self {
            Role::TextStudent => Role::ImageStudent,
            Role::ImageStudent => Role::TextStudent,
            Role::TextTeacher => Role::ImageTeacher,
            Role::ImageTeacher => Role::TextTeacher,
        }
    }
}

/// Loss kernel behind a summand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    InfoNce,
    FeatureDistance,
    SimilarityDistance,
    KlDiv,
}

impl Kernel {
    pub fn arity(self) -> usize {
        match self {
            Kernel::InfoNce | Kernel::FeatureDistance => 2,
            Kernel::SimilarityDistance | Kernel::KlDiv => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub role: Role,
    pub detached: bool,
}

/// One loss expression: a kernel applied to role-bound arguments.
#[derive(Clone, Debug, PartialEq)]
pub struct Summand {
    pub kernel: Kernel,
    pub slots: Vec<Slot>,
}

/// One grid cell with its weight and argument wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub learning_type: LearningType,
    pub strategy: Strategy,
    pub weight: f64,
    pub summands: Vec<Summand>,
}

impl LossTerm {
    pub fn label(&self) -> String {
        format!("{}:{}", self.learning_type, self.strategy)
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

/// Meaningless cells, excluded from the grid.
const EXCLUDED: [(LearningType, Strategy); 4] = [
    (LearningType::IntraStuStu, Strategy::InfoNCE),
    (LearningType::IntraStuStu, Strategy::FD),
    (LearningType::InterStuStu, Strategy::SymSD),
    (LearningType::InterStuStu, Strategy::SymKLDiv),
];

pub fn is_valid_cell(lt: LearningType, s: Strategy) -> bool {
    !EXCLUDED.contains(&(lt, s))
}

/// The 20 meaningful (learning type, strategy) cells in row-major grid order.
pub fn valid_cells() -> Vec<(LearningType, Strategy)> {
    LearningType::ALL
        .iter()
        .flat_map(|&lt| Strategy::ALL.iter().map(move |&s| (lt, s)))
        .filter(|&(lt, s)| is_valid_cell(lt, s))
        .collect()
}

/// Builds a cell with the default stop-gradient on student target slots.
pub fn build_term(lt: LearningType, s: Strategy) -> Result<LossTerm> {
    build_term_with(lt, s, false)
}

/// Builds a cell. Teacher slots are always detached. Student slots in the
/// target position of SD / KL-Div summands are detached unless `two_sided`.
pub fn build_term_with(lt: LearningType, s: Strategy, two_sided: bool) -> Result<LossTerm> {
    use LearningType::*;
    use Role::{ImageStudent as Is, ImageTeacher as It, TextStudent as Ts, TextTeacher as Tt};
    use Strategy::*;

    if !is_valid_cell(lt, s) {
        return Err(Error::MeaninglessCombination {
            learning_type: lt.to_string(),
            strategy: s.to_string(),
        });
    }

    // (prediction pair, target pair) for the similarity-based strategies, or
    // the argument pair for InfoNCE / FD.
    type Pairs = Vec<[Role; 4]>;
    let (kernel, wiring): (Kernel, Pairs) = match (lt, s) {
        (IntraStuStu, SD) => (Kernel::SimilarityDistance, vec![[Ts, Ts, Tt, Tt], [Is, Is, It, It]]),
        (IntraStuStu, KLDiv) => (Kernel::KlDiv, vec![[Ts, Ts, Tt, Tt], [Is, Is, It, It]]),
        (IntraStuStu, SymSD) => (Kernel::SimilarityDistance, vec![[Ts, Ts, Is, Is]]),
        (IntraStuStu, SymKLDiv) => (Kernel::KlDiv, vec![[Ts, Ts, Is, Is], [Is, Is, Ts, Ts]]),

        (InterStuStu, InfoNCE) => (Kernel::InfoNce, vec![[Ts, Is, Ts, Is], [Is, Ts, Is, Ts]]),
        (InterStuStu, FD) => (Kernel::FeatureDistance, vec![[Ts, Is, Ts, Is]]),
        (InterStuStu, SD) => (Kernel::SimilarityDistance, vec![[Ts, Is, Tt, It], [Is, Ts, It, Tt]]),
        (InterStuStu, KLDiv) => (Kernel::KlDiv, vec![[Ts, Is, Tt, It], [Is, Ts, It, Tt]]),

        (IntraTchStu, InfoNCE) => (Kernel::InfoNce, vec![[Ts, Tt, Ts, Tt], [Is, It, Is, It]]),
        (IntraTchStu, FD) => (Kernel::FeatureDistance, vec![[Ts, Tt, Ts, Tt], [Is, It, Is, It]]),
        (IntraTchStu, SD) => (Kernel::SimilarityDistance, vec![[Ts, Tt, Tt, Tt], [Is, It, It, It]]),
        (IntraTchStu, KLDiv) => (Kernel::KlDiv, vec![[Ts, Tt, Tt, Tt], [Is, It, It, It]]),
        (IntraTchStu, SymSD) => (Kernel::SimilarityDistance, vec![[Ts, Tt, Is, It]]),
        (IntraTchStu, SymKLDiv) => (Kernel::KlDiv, vec![[Ts, Tt, Is, It], [Is, It, Ts, Tt]]),

        (InterTchStu, InfoNCE) => (Kernel::InfoNce, vec![[Ts, It, Ts, It], [Is, Tt, Is, Tt]]),
        (InterTchStu, FD) => (Kernel::FeatureDistance, vec![[Ts, It, Ts, It], [Is, Tt, Is, Tt]]),
        (InterTchStu, SD) => (Kernel::SimilarityDistance, vec![[Ts, It, Tt, It], [Is, Tt, It, Tt]]),
        (InterTchStu, KLDiv) => (Kernel::KlDiv, vec![[Ts, It, Tt, It], [Is, Tt, It, Tt]]),
        (InterTchStu, SymSD) => (Kernel::SimilarityDistance, vec![[Ts, It, Is, Tt]]),
        (InterTchStu, SymKLDiv) => (Kernel::KlDiv, vec![[Ts, It, Is, Tt], [Is, Tt, Ts, It]]),

        _ => unreachable!("excluded cells rejected above"),
    };

    let summands = wiring
        .into_iter()
        .map(|roles| {
            let slots = roles[..kernel.arity()]
                .iter()
                .enumerate()
                .map(|(pos, &role)| {
                    let is_target = kernel.arity() == 4 && pos >= 2;
                    Slot {
                        role,
                        detached: role.is_teacher() || (is_target && !two_sided),
                    }
                })
                .collect();
            Summand { kernel, slots }
        })
        .collect();

    Ok(LossTerm {
        learning_type: lt,
        strategy: s,
        weight: 1.0,
        summands,
    })
}

/// A weighted set of grid cells evaluated together.
#[derive(Clone, Debug, PartialEq)]
pub struct ConaConfig {
    pub terms: Vec<LossTerm>,
    pub tau: f64,
    pub deterministic: bool,
    /// Let gradient flow into student target slots of SD / KL-Div summands.
    pub two_sided: bool,
    pub kl_direction: KlDirection,
}

impl ConaConfig {
    pub fn new(terms: Vec<LossTerm>) -> Result<Self> {
        let cfg = Self {
            terms,
            tau: DEFAULT_TAU,
            deterministic: true,
            two_sided: false,
            kl_direction: KlDirection::Forward,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds a config from cells at unit weight.
    pub fn from_cells(cells: &[(LearningType, Strategy)]) -> Result<Self> {
        let terms = cells
            .iter()
            .map(|&(lt, s)| build_term(lt, s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(terms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidConfig("at least one loss term is required".into()));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::BadTemperature(self.tau));
        }
        for t in &self.terms {
            if !t.weight.is_finite() || t.weight < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "term {} has invalid weight {}",
                    t.label(),
                    t.weight
                )));
            }
            if !is_valid_cell(t.learning_type, t.strategy) {
                return Err(Error::MeaninglessCombination {
                    learning_type: t.learning_type.to_string(),
                    strategy: t.strategy.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Re-derives every term's wiring for a different detachment policy.
    pub fn with_two_sided(mut self, two_sided: bool) -> Self {
        self.two_sided = two_sided;
        for t in &mut self.terms {
            let weight = t.weight;
            *t = build_term_with(t.learning_type, t.strategy, two_sided)
                .expect("terms were validated")
                .with_weight(weight);
        }
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn contains(&self, lt: LearningType, s: Strategy) -> bool {
        self.terms.iter().any(|t| t.learning_type == lt && t.strategy == s)
    }

    /// Appends a cell at unit weight unless it is already present.
    pub fn with_cell(mut self, lt: LearningType, s: Strategy) -> Result<Self> {
        if !self.contains(lt, s) {
            self.terms.push(build_term_with(lt, s, self.two_sided)?);
        }
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermDoc {
    learning_type: LearningType,
    strategy: Strategy,
    #[serde(default = "unit_weight")]
    weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    terms: Vec<TermDoc>,
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default = "default_true")]
    deterministic: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    two_sided: bool,
    #[serde(default, skip_serializing_if = "is_forward")]
    kl_direction: KlDirection,
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_forward(d: &KlDirection) -> bool {
    *d == KlDirection::Forward
}

impl Serialize for ConaConfig {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ConfigDoc {
            terms: self
                .terms
                .iter()
                .map(|t| TermDoc {
                    learning_type: t.learning_type,
                    strategy: t.strategy,
                    weight: t.weight,
                })
                .collect(),
            tau: self.tau,
            deterministic: self.deterministic,
            two_sided: self.two_sided,
            kl_direction: self.kl_direction,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ConaConfig {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = ConfigDoc::deserialize(deserializer)?;
        let terms = doc
            .terms
            .iter()
            .map(|t| build_term_with(t.learning_type, t.strategy, doc.two_sided).map(|term| term.with_weight(t.weight)))
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        let cfg = ConaConfig {
            terms,
            tau: doc.tau,
            deterministic: doc.deterministic,
            two_sided: doc.two_sided,
            kl_direction: doc.kl_direction,
        };
        cfg.validate().map_err(D::Error::custom)?;
        Ok(cfg)
    }
}

/// Named configurations.
///
/// * `clip`: symmetric text-image InfoNCE between the trainable pair; used to
///   pre-train teachers by placing the teacher encoders in the student roles.
/// * `motis`: intra-modal teacher-student InfoNCE in both modalities (the baseline).
/// * `conaclip`: the baseline plus the five strongest cells.
pub fn recipe(name: &str) -> Result<ConaConfig> {
    use LearningType::*;
    use Strategy::*;
    let cells: &[(LearningType, Strategy)] = match name {
        "clip" => &[(InterStuStu, InfoNCE)],
        "motis" => &[(IntraTchStu, InfoNCE)],
        "conaclip" => &[
            (IntraTchStu, InfoNCE),
            (IntraStuStu, SD),
            (InterStuStu, SD),
            (IntraTchStu, SD),
            (IntraTchStu, SymSD),
            (InterTchStu, SymKLDiv),
        ],
        other => return Err(Error::UnknownRecipe(other.to_string())),
    };
    ConaConfig::from_cells(cells)
}

/// The four batches a configuration is evaluated on.
#[derive(Clone, Debug)]
pub struct RoleBatches<T> {
    pub text_student: EmbeddingBatch<T>,
    pub image_student: EmbeddingBatch<T>,
    pub text_teacher: EmbeddingBatch<T>,
    pub image_teacher: EmbeddingBatch<T>,
}

impl<T: Scalar> RoleBatches<T> {
    pub fn new(
        text_student: EmbeddingBatch<T>,
        image_student: EmbeddingBatch<T>,
        text_teacher: EmbeddingBatch<T>,
        image_teacher: EmbeddingBatch<T>,
    ) -> Self {
        Self {
            text_student,
            image_student,
            text_teacher: text_teacher.detach(),
            image_teacher: image_teacher.detach(),
        }
    }

    pub fn get(&self, role: Role) -> &EmbeddingBatch<T> {
        match role {
            Role::TextStudent => &self.text_student,
            Role::ImageStudent => &self.image_student,
            Role::TextTeacher => &self.text_teacher,
            Role::ImageTeacher => &self.image_teacher,
        }
    }
}

/// Total loss with the value of each configured term (weight applied).
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    /// Slots in [`Role`] order; teacher slots never carry a gradient.
    pub loss: LossValue<T>,
    pub term_values: Vec<(String, T)>,
}

impl<T: Scalar> Evaluation<T> {
    pub fn value(&self) -> T {
        self.loss.value
    }

    pub fn grad(&self, role: Role) -> Option<&Matrix<T>> {
        self.loss.grad(role.index())
    }
}

/// Evaluates one summand, returning its value and per-role gradients.
pub fn evaluate_summand<T: Scalar>(
    summand: &Summand,
    batches: &RoleBatches<T>,
    tau: T,
    kl_direction: KlDirection,
) -> Result<LossValue<T>> {
    let args: Vec<EmbeddingBatch<T>> = summand
        .slots
        .iter()
        .map(|slot| {
            let b = batches.get(slot.role);
            let detached = b.is_detached() || slot.detached;
            b.clone().with_detached(detached)
        })
        .collect();
    match summand.kernel {
        Kernel::InfoNce => infonce(&args[0], &args[1], tau),
        Kernel::FeatureDistance => feature_distance(&args[0], &args[1]),
        Kernel::SimilarityDistance => similarity_distance(&args[0], &args[1], &args[2], &args[3]),
        Kernel::KlDiv => kl_div_directed(&args[0], &args[1], &args[2], &args[3], tau, kl_direction),
    }
}

/// Weighted sum of every configured term, with gradients accumulated into
/// the (non-detached) student batches only.
pub fn evaluate<T: Scalar>(config: &ConaConfig, batches: &RoleBatches<T>) -> Result<Evaluation<T>> {
    config.validate()?;
    let n = batches.text_student.batch_size();
    for role in [Role::ImageStudent, Role::TextTeacher, Role::ImageTeacher] {
        if batches.get(role).batch_size() != n {
            return Err(Error::shape("evaluate", n, batches.get(role).batch_size()));
        }
    }
    let tau = T::of(config.tau);

    let mut grads: Vec<Option<Matrix<T>>> = [Role::TextStudent, Role::ImageStudent]
        .iter()
        .map(|&r| {
            let b = batches.get(r);
            (!b.is_detached()).then(|| Matrix::zeros(b.batch_size(), b.dim()))
        })
        .collect();
    grads.extend([None, None]);

    let mut total = T::zero();
    let mut term_values = Vec::with_capacity(config.terms.len());
    for term in &config.terms {
        let weight = T::of(term.weight);
        let mut term_value = T::zero();
        for summand in &term.summands {
            let mut lv = evaluate_summand(summand, batches, tau, config.kl_direction)?;
            term_value = term_value + lv.value;
            for (pos, slot) in summand.slots.iter().enumerate() {
                if slot.role.is_teacher() {
                    continue;
                }
                if let (Some(acc), Some(g)) = (grads[slot.role.index()].as_mut(), lv.take_grad(pos)) {
                    acc.add_scaled(&g, weight)?;
                }
            }
        }
        let weighted = weight * term_value;
        total = total + weighted;
        term_values.push((term.label(), weighted));
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteValue("cona evaluate"));
    }
    Ok(Evaluation {
        loss: LossValue::new(total, grads),
        term_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batches(seed: u64, n: usize, d: usize) -> RoleBatches<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut b = || EmbeddingBatch::normalized(&Matrix::random_normal(n, d, &mut r)).unwrap();
        RoleBatches::new(b(), b(), b(), b())
    }

    #[test]
    fn grid_has_twenty_cells() {
        let cells = valid_cells();
        assert_eq!(cells.len(), 20);
        assert!(cells.contains(&(LearningType::IntraTchStu, Strategy::InfoNCE)));
        assert!(!cells.contains(&(LearningType::IntraStuStu, Strategy::InfoNCE)));
        for (lt, s) in EXCLUDED {
            assert!(matches!(build_term(lt, s), Err(Error::MeaninglessCombination { .. })));
        }
    }

    #[test]
    fn teacher_slots_always_detached() {
        for two_sided in [false, true] {
            for (lt, s) in valid_cells() {
                let t = build_term_with(lt, s, two_sided).unwrap();
                for su in &t.summands {
                    assert_eq!(su.slots.len(), su.kernel.arity());
                    for slot in &su.slots {
                        if slot.role.is_teacher() {
                            assert!(slot.detached);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn student_targets_detached_by_default() {
        let t = build_term(LearningType::InterTchStu, Strategy::SymKLDiv).unwrap();
        assert_eq!(t.summands.len(), 2);
        let s = &t.summands[0];
        assert_eq!(s.slots[2], Slot { role: Role::ImageStudent, detached: true });
        assert!(!s.slots[0].detached);
        let t = build_term_with(LearningType::InterTchStu, Strategy::SymKLDiv, true).unwrap();
        assert!(!t.summands[0].slots[2].detached);
    }

    #[test]
    fn recipes() {
        assert_eq!(recipe("conaclip").unwrap().terms.len(), 6);
        assert_eq!(recipe("motis").unwrap().terms.len(), 1);
        assert_eq!(recipe("clip").unwrap().terms.len(), 1);
        assert!(matches!(recipe("bert"), Err(Error::UnknownRecipe(_))));
    }

    #[test]
    fn json_round_trip_and_rejections() {
        let cfg = recipe("conaclip").unwrap();
        let back = ConaConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);

        let bad = r#"{"terms":[{"learning_type":"IntraStuStu","strategy":"InfoNCE","weight":1.0}],"tau":0.07,"deterministic":true}"#;
        let err = ConaConfig::from_json(bad).unwrap_err().to_string();
        assert!(err.contains("IntraStuStu") && err.contains("meaningless"), "{err}");

        let unknown = r#"{"terms":[{"learning_type":"IntraTchStu","strategy":"SD"}],"tau":0.07,"deterministic":true,"lr":1}"#;
        assert!(ConaConfig::from_json(unknown).is_err());

        let empty = r#"{"terms":[],"tau":0.07,"deterministic":true}"#;
        assert!(ConaConfig::from_json(empty).is_err());

        let minimal = r#"{"terms":[{"learning_type":"IntraTchStu","strategy":"SD"}]}"#;
        let cfg = ConaConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.tau, DEFAULT_TAU);
        assert_eq!(cfg.terms[0].weight, 1.0);
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut cfg = recipe("conaclip").unwrap();
        for t in &mut cfg.terms {
            t.weight = 0.0;
        }
        let ev = evaluate(&cfg, &batches(1, 6, 4)).unwrap();
        assert_eq!(ev.value(), 0.0);
        for role in [Role::TextStudent, Role::ImageStudent] {
            assert!(ev.grad(role).unwrap().as_slice().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn no_teacher_gradients() {
        let b = batches(2, 5, 3);
        for (lt, s) in valid_cells() {
            let cfg = ConaConfig::from_cells(&[(lt, s)]).unwrap().with_two_sided(true);
            let ev = evaluate(&cfg, &b).unwrap();
            assert!(ev.grad(Role::TextTeacher).is_none());
            assert!(ev.grad(Role::ImageTeacher).is_none());
        }
    }

    #[test]
    fn linear_in_weights() {
        let b = batches(3, 7, 5);
        let cfg = recipe("conaclip").unwrap();
        let base = evaluate(&cfg, &b).unwrap().value();
        let mut scaled = cfg.clone();
        for t in &mut scaled.terms {
            t.weight *= 4.0;
        }
        assert_eq!(evaluate(&scaled, &b).unwrap().value(), 4.0 * base);
    }

    #[test]
    fn detaching_a_student_drops_its_gradient_only() {
        let mut b = batches(4, 5, 3);
        let cfg = recipe("conaclip").unwrap();
        let full = evaluate(&cfg, &b).unwrap();
        b.image_student = b.image_student.clone().detach();
        let part = evaluate(&cfg, &b).unwrap();
        assert_eq!(full.value(), part.value());
        assert!(part.grad(Role::ImageStudent).is_none());
    }

    #[test]
    fn mismatched_batch_sizes_rejected() {
        let b = batches(5, 4, 3);
        let other = batches(6, 3, 3);
        let mixed = RoleBatches::new(b.text_student, b.image_student, other.text_teacher, b.image_teacher);
        assert!(evaluate(&recipe("motis").unwrap(), &mixed).is_err());
    }
}
