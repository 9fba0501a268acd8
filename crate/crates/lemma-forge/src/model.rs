//! Domain types shared by every stage of the synthesis pipeline: reasoning
//! steps and trajectories, the 12-type error taxonomy, reflection phrases,
//! annotated bad trajectories, revision records, and problem records.
//!
//! All values are immutable after construction; constructors validate their
//! invariants and reject violations. Step ordinals are 1-based throughout.

use crate::answer::{self, NormalizedAnswer};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("step text must be non-empty with no surrounding whitespace")]
    InvalidStepText,
    #[error("step index must be >= 1")]
    InvalidStepIndex,
    #[error("trajectory must contain at least one step when raw text is non-empty")]
    EmptyTrajectory,
    #[error("joined step texts do not reconstruct the raw text")]
    StepsDoNotMatchRawText,
    #[error("unknown error type `{0}`")]
    UnknownErrorType(String),
    #[error("first_error_index {index} out of range 1..={len}")]
    FirstErrorIndexOutOfRange { index: usize, len: usize },
    #[error("a bad trajectory must not end with the gold answer")]
    TrajectoryEndsCorrect,
    #[error("reflection phrase is not in the catalog: {0:?}")]
    PhraseNotInCatalog(String),
    #[error("revision bad prefix must be non-empty")]
    EmptyBadPrefix,
    #[error("gold answer failed normalization: {0}")]
    UnparseableGoldAnswer(String),
    #[error("distribution weights must be non-negative and sum to 1 (got {0})")]
    InvalidDistribution(f64),
}

// ---------------------------------------------------------------------------
// Steps and trajectories
// ---------------------------------------------------------------------------

/// One reasoning step. `index` is the 1-based ordinal within its trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub text: String,
}

impl Step {
    pub fn new(index: usize, text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        if index < 1 {
            return Err(ModelError::InvalidStepIndex);
        }
        if text.is_empty() || text.trim() != text {
            return Err(ModelError::InvalidStepText);
        }
        Ok(Step { index, text })
    }
}

/// An ordered sequence of reasoning steps plus the extracted predicted
/// answer. `predicted_answer` holds the normalized canonical form; the
/// original generation is kept in `raw_text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub predicted_answer: Option<String>,
    pub raw_text: String,
}

impl Trajectory {
    pub fn new(
        steps: Vec<Step>,
        predicted_answer: Option<String>,
        raw_text: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let raw_text = raw_text.into();
        if !raw_text.trim().is_empty() && steps.is_empty() {
            return Err(ModelError::EmptyTrajectory);
        }
        // Joining the step texts must reconstruct the raw text modulo
        // whitespace normalization.
        let non_ws = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
        let joined: String = steps.iter().map(|s| s.text.as_str()).collect();
        if non_ws(&joined) != non_ws(&raw_text) {
            return Err(ModelError::StepsDoNotMatchRawText);
        }
        Ok(Trajectory {
            steps,
            predicted_answer,
            raw_text,
        })
    }

    /// Predicted answer in normalized form, when present and parseable.
    pub fn predicted_normalized(&self) -> Option<NormalizedAnswer> {
        self.predicted_answer
            .as_deref()
            .and_then(|a| answer::normalize_answer(a).ok())
    }
}

// ---------------------------------------------------------------------------
// Error taxonomy
// ---------------------------------------------------------------------------

/// The 12-category error taxonomy used to label wrong solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorType {
    Calculation,
    Counting,
    ContextValue,
    Hallucination,
    UnitConversion,
    Operator,
    FormulaConfusion,
    MissingStep,
    ContradictoryStep,
    QuestionMisinterpretation,
    ConfusingConcept,
    NonsensicalOutput,
}

impl ErrorType {
    pub const ALL: [ErrorType; 12] = [
        ErrorType::Calculation,
        ErrorType::Counting,
        ErrorType::ContextValue,
        ErrorType::Hallucination,
        ErrorType::UnitConversion,
        ErrorType::Operator,
        ErrorType::FormulaConfusion,
        ErrorType::MissingStep,
        ErrorType::ContradictoryStep,
        ErrorType::QuestionMisinterpretation,
        ErrorType::ConfusingConcept,
        ErrorType::NonsensicalOutput,
    ];

    /// Two-letter code, e.g. "CA".
    pub fn code(self) -> &'static str {
        match self {
            ErrorType::Calculation => "CA",
            ErrorType::Counting => "CO",
            ErrorType::ContextValue => "CV",
            ErrorType::Hallucination => "HA",
            ErrorType::UnitConversion => "UC",
            ErrorType::Operator => "OP",
            ErrorType::FormulaConfusion => "FC",
            ErrorType::MissingStep => "MS",
            ErrorType::ContradictoryStep => "CS",
            ErrorType::QuestionMisinterpretation => "QM",
            ErrorType::ConfusingConcept => "CC",
            ErrorType::NonsensicalOutput => "NO",
        }
    }

    /// Canonical snake_case label, e.g. "calculation_error". These are the
    /// labels the judge model is asked to produce.
    pub fn label(self) -> &'static str {
        match self {
            ErrorType::Calculation => "calculation_error",
            ErrorType::Counting => "counting_error",
            ErrorType::ContextValue => "context_value_error",
            ErrorType::Hallucination => "hallucination_error",
            ErrorType::UnitConversion => "unit_conversion_error",
            ErrorType::Operator => "operator_error",
            ErrorType::FormulaConfusion => "formula_confusion_error",
            ErrorType::MissingStep => "missing_step_error",
            ErrorType::ContradictoryStep => "contradictory_step_error",
            ErrorType::QuestionMisinterpretation => "question_misinterpretation_error",
            ErrorType::ConfusingConcept => "confusing_concept_error",
            ErrorType::NonsensicalOutput => "nonsense_output_error",
        }
    }

    /// Human-readable display name with code, e.g. "Calculation Error (CA)".
    pub fn display_name(self) -> &'static str {
        match self {
            ErrorType::Calculation => "Calculation Error (CA)",
            ErrorType::Counting => "Counting Error (CO)",
            ErrorType::ContextValue => "Context Value Error (CV)",
            ErrorType::Hallucination => "Hallucination (HA)",
            ErrorType::UnitConversion => "Unit Conversion Error (UC)",
            ErrorType::Operator => "Operator Error (OP)",
            ErrorType::FormulaConfusion => "Formula Confusion Error (FC)",
            ErrorType::MissingStep => "Missing Step (MS)",
            ErrorType::ContradictoryStep => "Contradictory Step (CS)",
            ErrorType::QuestionMisinterpretation => "Question Misinterpretation Error (QM)",
            ErrorType::ConfusingConcept => "Confusing Concept Error (CC)",
            ErrorType::NonsensicalOutput => "Nonsensical Output (NO)",
        }
    }

    /// One-sentence definition used in judge and injection prompts.
    pub fn description(self) -> &'static str {
        match self {
            ErrorType::Calculation => "Error appears during the calculation process.",
            ErrorType::Counting => "Error occurs during the counting process.",
            ErrorType::ContextValue => {
                "Error arises when attributes of named entities do not align with the information provided."
            }
            ErrorType::Hallucination => {
                "Error involves adding fictitious unrelated statements contradictory to the question."
            }
            ErrorType::UnitConversion => "Error occurs during unit conversion process.",
            ErrorType::Operator => {
                "Error involves a single operator being erroneously applied within the expression."
            }
            ErrorType::FormulaConfusion => {
                "Error appears when applying formula in inappropriate scenario."
            }
            ErrorType::MissingStep => {
                "Error entails an incomplete generation of reasoning process, lacking a necessary step."
            }
            ErrorType::ContradictoryStep => {
                "Error manifests inconsistency between preceding and subsequent reasoning steps."
            }
            ErrorType::QuestionMisinterpretation => {
                "Error appears because the question is misunderstood, such as ignoring specific constraints in the question."
            }
            ErrorType::ConfusingConcept => {
                "Error occurs because two similar but actually different concepts are mistakenly confused."
            }
            ErrorType::NonsensicalOutput => "Inconceivable, illogical, or question-irrelevant output.",
        }
    }

    /// Lowercase name used to fill prose slots like "a {error_type} error".
    pub fn prose_name(self) -> &'static str {
        match self {
            ErrorType::Calculation => "calculation",
            ErrorType::Counting => "counting",
            ErrorType::ContextValue => "context value",
            ErrorType::Hallucination => "hallucination",
            ErrorType::UnitConversion => "unit conversion",
            ErrorType::Operator => "operator",
            ErrorType::FormulaConfusion => "formula confusion",
            ErrorType::MissingStep => "missing step",
            ErrorType::ContradictoryStep => "contradictory step",
            ErrorType::QuestionMisinterpretation => "question misinterpretation",
            ErrorType::ConfusingConcept => "confusing concept",
            ErrorType::NonsensicalOutput => "nonsensical output",
        }
    }

    pub fn from_code(code: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|t| t.code() == code)
            .ok_or_else(|| ModelError::UnknownErrorType(code.to_string()))
    }

    pub fn from_label(label: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|t| t.label() == label)
            .ok_or_else(|| ModelError::UnknownErrorType(label.to_string()))
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Serialize, Deserialize)]
struct ErrorTypeRepr {
    code: String,
    label: String,
}

impl Serialize for ErrorType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ErrorTypeRepr {
            code: self.code().to_string(),
            label: self.label().to_string(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ErrorType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = ErrorTypeRepr::deserialize(deserializer)?;
        let t = ErrorType::from_code(&repr.code).map_err(D::Error::custom)?;
        if t.label() != repr.label {
            return Err(D::Error::custom(format!(
                "label {:?} does not match code {:?}",
                repr.label, repr.code
            )));
        }
        Ok(t)
    }
}

/// Serde adapter for maps keyed by [`ErrorType`]; keys serialize as the
/// two-letter code so the JSON stays a plain object.
pub mod error_type_key_map {
    use super::ErrorType;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S, V>(map: &BTreeMap<ErrorType, V>, serializer: S) -> Result<S::Ok, S::Error>
    where
        S: Serializer,
        V: Serialize,
    {
        let by_code: BTreeMap<&str, &V> = map.iter().map(|(k, v)| (k.code(), v)).collect();
        by_code.serialize(serializer)
    }

    pub fn deserialize<'de, D, V>(deserializer: D) -> Result<BTreeMap<ErrorType, V>, D::Error>
    where
        D: Deserializer<'de>,
        V: Deserialize<'de>,
    {
        let by_code: BTreeMap<String, V> = BTreeMap::deserialize(deserializer)?;
        by_code
            .into_iter()
            .map(|(k, v)| ErrorType::from_code(&k).map(|t| (t, v)).map_err(D::Error::custom))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Bad trajectories
// ---------------------------------------------------------------------------

/// Where a wrong solution came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    StudentSampled,
    TeacherInjected,
}

impl fmt::Display for TrajectorySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrajectorySource::StudentSampled => write!(f, "student_sampled"),
            TrajectorySource::TeacherInjected => write!(f, "teacher_injected"),
        }
    }
}

/// A wrong trajectory annotated with the ordinal of its first erroneous
/// step, the error type, and the judge's explanation. Steps before
/// `first_error_index` are presumed correct; the step at it is the first
/// wrong one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBadTrajectory {
    pub trajectory: Trajectory,
    pub first_error_index: usize,
    pub error_type: ErrorType,
    pub explanation: String,
    pub source: TrajectorySource,
}

impl AnnotatedBadTrajectory {
    /// Builds an annotated bad trajectory, checking that the error index is
    /// in range and that the trajectory does not end with the gold answer.
    pub fn new(
        trajectory: Trajectory,
        first_error_index: usize,
        error_type: ErrorType,
        explanation: impl Into<String>,
        source: TrajectorySource,
        gold: &NormalizedAnswer,
    ) -> Result<Self, ModelError> {
        let len = trajectory.steps.len();
        if first_error_index < 1 || first_error_index > len {
            return Err(ModelError::FirstErrorIndexOutOfRange {
                index: first_error_index,
                len,
            });
        }
        if let Some(pred) = trajectory.predicted_normalized() {
            if answer::answers_equivalent(&pred, gold) {
                return Err(ModelError::TrajectoryEndsCorrect);
            }
        }
        Ok(AnnotatedBadTrajectory {
            trajectory,
            first_error_index,
            error_type,
            explanation: explanation.into(),
            source,
        })
    }
}

// ---------------------------------------------------------------------------
// Reflection phrases
// ---------------------------------------------------------------------------

/// The fixed catalog of transition phrases bridging a bad prefix to its
/// correction. Detection matches against these byte-exactly.
pub const REFLECTION_PHRASES: [&str; 13] = [
    "But, wait, let's pause and examine this more carefully.",
    "Wait a second, let's ensure this is right. Calculating carefully:",
    "Hmm, I want to verify this calculation. Let's go through it:",
    "Wait, this doesn't seem right. Let's pause and consider this:",
    "Let's pause and consider what we know so far.",
    "This didn't seem right. Wait, let's correct that.",
    "Wait, something seems off. Let's pause and consider what we know so far.",
    "Let's pause and consider if we've set up everything correctly.",
    "Wait a second. Is everything correct? Let me double-check.",
    "Wait, maybe there's something wrong. Let's pause and reconsider.",
    "The result looks strange, is everything correct? Let me double-check.",
    "Does this make sense? Let's rethink this.",
    "Could I have missed something? Let's pause and consider what we know so far.",
];

/// One of the 13 fixed transition phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReflectionPhrase {
    text: &'static str,
}

#[derive(Serialize, Deserialize)]
struct PhraseRepr {
    text: String,
}

impl Serialize for ReflectionPhrase {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        PhraseRepr {
            text: self.text.to_string(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ReflectionPhrase {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = PhraseRepr::deserialize(deserializer)?;
        ReflectionPhrase::new(&repr.text).map_err(D::Error::custom)
    }
}

impl ReflectionPhrase {
    /// Accepts only verbatim catalog entries.
    pub fn new(text: &str) -> Result<Self, ModelError> {
        REFLECTION_PHRASES
            .iter()
            .find(|p| **p == text)
            .map(|p| ReflectionPhrase { text: p })
            .ok_or_else(|| ModelError::PhraseNotInCatalog(text.to_string()))
    }

    pub fn text(&self) -> &'static str {
        self.text
    }

    pub fn catalog() -> impl Iterator<Item = ReflectionPhrase> {
        REFLECTION_PHRASES.iter().map(|p| ReflectionPhrase { text: p })
    }

    /// Finds the earliest catalog phrase in `text`, returning the phrase and
    /// its byte offset. When two phrases start at the same offset the longer
    /// one wins.
    pub fn find_first_in(text: &str) -> Option<(ReflectionPhrase, usize)> {
        let mut best: Option<(usize, &'static str)> = None;
        for phrase in REFLECTION_PHRASES {
            if let Some(pos) = text.find(phrase) {
                best = match best {
                    None => Some((pos, phrase)),
                    Some((bp, bphrase)) => {
                        if pos < bp || (pos == bp && phrase.len() > bphrase.len()) {
                            Some((pos, phrase))
                        } else {
                            Some((bp, bphrase))
                        }
                    }
                };
            }
        }
        best.map(|(pos, phrase)| (ReflectionPhrase { text: phrase }, pos))
    }
}

// ---------------------------------------------------------------------------
// Revision trajectories
// ---------------------------------------------------------------------------

/// The correction strategy that produced a revision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionStrategy {
    FixAndContinue,
    FreshAndRestart,
}

impl fmt::Display for CorrectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorrectionStrategy::FixAndContinue => write!(f, "fix_and_continue"),
            CorrectionStrategy::FreshAndRestart => write!(f, "fresh_and_restart"),
        }
    }
}

/// Joins a bad prefix, a reflection phrase, and a correct continuation into
/// the revision text: prefix steps joined by newlines, then the phrase, a
/// space, and the correction.
pub fn assemble_text(prefix: &[Step], reflection: &ReflectionPhrase, correction: &Trajectory) -> String {
    let head: Vec<&str> = prefix.iter().map(|s| s.text.as_str()).collect();
    format!(
        "{}\n{} {}",
        head.join("\n"),
        reflection.text(),
        correction.raw_text
    )
}

/// A truncated bad prefix joined to a correct continuation through a
/// reflection phrase, plus provenance metadata. `full_text` is always the
/// deterministic assembly of the three parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionTrajectory {
    pub problem_id: String,
    pub bad_prefix: Vec<Step>,
    pub reflection: ReflectionPhrase,
    pub correction: Trajectory,
    pub full_text: String,
    pub strategy: CorrectionStrategy,
    pub error_type: ErrorType,
    pub error_source: TrajectorySource,
    pub final_answer: String,
}

impl RevisionTrajectory {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem_id: impl Into<String>,
        bad_prefix: Vec<Step>,
        reflection: ReflectionPhrase,
        correction: Trajectory,
        strategy: CorrectionStrategy,
        error_type: ErrorType,
        error_source: TrajectorySource,
        final_answer: impl Into<String>,
    ) -> Result<Self, ModelError> {
        if bad_prefix.is_empty() {
            return Err(ModelError::EmptyBadPrefix);
        }
        let full_text = assemble_text(&bad_prefix, &reflection, &correction);
        Ok(RevisionTrajectory {
            problem_id: problem_id.into(),
            bad_prefix,
            reflection,
            correction,
            full_text,
            strategy,
            error_type,
            error_source,
            final_answer: final_answer.into(),
        })
    }
}

// ---------------------------------------------------------------------------
// Problem records
// ---------------------------------------------------------------------------

/// A source question with its gold solution and gold final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub id: String,
    pub question: String,
    pub gold_solution: String,
    pub gold_answer: String,
    pub dataset_tag: String,
    pub difficulty_meta: Option<BTreeMap<String, String>>,
}

impl ProblemRecord {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        gold_solution: impl Into<String>,
        gold_answer: impl Into<String>,
        dataset_tag: impl Into<String>,
        difficulty_meta: Option<BTreeMap<String, String>>,
    ) -> Result<Self, ModelError> {
        let gold_answer = gold_answer.into();
        answer::normalize_answer(&gold_answer)
            .map_err(|_| ModelError::UnparseableGoldAnswer(gold_answer.clone()))?;
        Ok(ProblemRecord {
            id: id.into(),
            question: question.into(),
            gold_solution: gold_solution.into(),
            gold_answer,
            dataset_tag: dataset_tag.into(),
            difficulty_meta,
        })
    }

    /// Gold answer in normalized form. Construction guarantees this parses.
    pub fn gold_normalized(&self) -> NormalizedAnswer {
        answer::normalize_answer(&self.gold_answer)
            .expect("gold answer was validated at construction")
    }
}

// ---------------------------------------------------------------------------
// Error distributions
// ---------------------------------------------------------------------------

/// A categorical distribution over error types for one (dataset, model)
/// scope. Absent types are implicitly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub scope: (String, String),
    #[serde(with = "error_type_key_map")]
    pub weights: BTreeMap<ErrorType, f64>,
}

impl ErrorDistribution {
    pub fn new(
        scope: (String, String),
        weights: BTreeMap<ErrorType, f64>,
    ) -> Result<Self, ModelError> {
        if weights.values().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(ModelError::InvalidDistribution(f64::NAN));
        }
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidDistribution(total));
        }
        Ok(ErrorDistribution { scope, weights })
    }

    pub fn weight(&self, t: ErrorType) -> f64 {
        self.weights.get(&t).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::normalize_answer;

    fn steps(texts: &[&str]) -> Vec<Step> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Step::new(i + 1, *t).unwrap())
            .collect()
    }

    #[test]
    fn step_rejects_bad_input() {
        assert_eq!(Step::new(0, "x").unwrap_err(), ModelError::InvalidStepIndex);
        assert_eq!(Step::new(1, "").unwrap_err(), ModelError::InvalidStepText);
        assert_eq!(Step::new(1, " x ").unwrap_err(), ModelError::InvalidStepText);
    }

    #[test]
    fn trajectory_requires_steps_for_nonempty_text() {
        assert_eq!(
            Trajectory::new(vec![], None, "some text").unwrap_err(),
            ModelError::EmptyTrajectory
        );
    }

    #[test]
    fn taxonomy_has_twelve_bijective_entries() {
        assert_eq!(ErrorType::ALL.len(), 12);
        let codes: std::collections::BTreeSet<_> = ErrorType::ALL.iter().map(|t| t.code()).collect();
        let labels: std::collections::BTreeSet<_> =
            ErrorType::ALL.iter().map(|t| t.label()).collect();
        assert_eq!(codes.len(), 12);
        assert_eq!(labels.len(), 12);
        for t in ErrorType::ALL {
            assert_eq!(ErrorType::from_code(t.code()).unwrap(), t);
            assert_eq!(ErrorType::from_label(t.label()).unwrap(), t);
        }
        assert!(ErrorType::from_code("XX").is_err());
    }

    #[test]
    fn error_type_serializes_as_code_and_label() {
        let json = serde_json::to_value(ErrorType::QuestionMisinterpretation).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"code": "QM", "label": "question_misinterpretation_error"})
        );
        let back: ErrorType = serde_json::from_value(json).unwrap();
        assert_eq!(back, ErrorType::QuestionMisinterpretation);
        // Mismatched label is rejected.
        let bad = serde_json::json!({"code": "QM", "label": "calculation_error"});
        assert!(serde_json::from_value::<ErrorType>(bad).is_err());
    }

    #[test]
    fn annotated_bad_trajectory_checks_index_and_answer() {
        let gold = normalize_answer("7").unwrap();
        let traj = Trajectory::new(steps(&["a", "b", "c"]), Some("9".into()), "a\nb\nc").unwrap();

        let ok = AnnotatedBadTrajectory::new(
            traj.clone(),
            3,
            ErrorType::Calculation,
            "calc slip",
            TrajectorySource::StudentSampled,
            &gold,
        );
        assert!(ok.is_ok());

        let out_of_range = AnnotatedBadTrajectory::new(
            traj.clone(),
            4,
            ErrorType::Calculation,
            "x",
            TrajectorySource::StudentSampled,
            &gold,
        );
        assert_eq!(
            out_of_range.unwrap_err(),
            ModelError::FirstErrorIndexOutOfRange { index: 4, len: 3 }
        );

        let correct_traj =
            Trajectory::new(steps(&["a", "b"]), Some("7".into()), "a\nb").unwrap();
        let ends_right = AnnotatedBadTrajectory::new(
            correct_traj,
            1,
            ErrorType::Calculation,
            "x",
            TrajectorySource::TeacherInjected,
            &gold,
        );
        assert_eq!(ends_right.unwrap_err(), ModelError::TrajectoryEndsCorrect);
    }

    #[test]
    fn phrase_catalog_has_thirteen_entries() {
        assert_eq!(REFLECTION_PHRASES.len(), 13);
        for p in REFLECTION_PHRASES {
            assert!(ReflectionPhrase::new(p).is_ok());
        }
        assert!(ReflectionPhrase::new("Wait, let me think.").is_err());
    }

    #[test]
    fn phrase_detection_reports_first_occurrence() {
        let text = format!(
            "step one\n{} fix here\n{} more",
            REFLECTION_PHRASES[6], REFLECTION_PHRASES[0]
        );
        let (phrase, pos) = ReflectionPhrase::find_first_in(&text).unwrap();
        // Phrase 7 contains phrase 5 as a suffix; the earlier, longer match
        // must win over the embedded one.
        assert_eq!(phrase.text(), REFLECTION_PHRASES[6]);
        assert_eq!(pos, "step one\n".len());
    }

    #[test]
    fn phrase_detection_none_when_absent() {
        assert!(ReflectionPhrase::find_first_in("no transitions here").is_none());
    }

    #[test]
    fn revision_assembles_full_text() {
        let prefix = steps(&["A"]);
        let rp = ReflectionPhrase::new(REFLECTION_PHRASES[5]).unwrap();
        let correction = Trajectory::new(
            steps(&["B. The answer is: 1"]),
            Some("1".into()),
            "B. The answer is: 1",
        )
        .unwrap();
        let rev = RevisionTrajectory::new(
            "p1",
            prefix,
            rp.clone(),
            correction,
            CorrectionStrategy::FixAndContinue,
            ErrorType::Calculation,
            TrajectorySource::StudentSampled,
            "1",
        )
        .unwrap();
        assert_eq!(
            rev.full_text,
            format!("A\n{} B. The answer is: 1", rp.text())
        );
    }

    #[test]
    fn revision_rejects_empty_prefix() {
        let rp = ReflectionPhrase::new(REFLECTION_PHRASES[0]).unwrap();
        let correction = Trajectory::new(steps(&["B"]), None, "B").unwrap();
        let rev = RevisionTrajectory::new(
            "p1",
            vec![],
            rp,
            correction,
            CorrectionStrategy::FreshAndRestart,
            ErrorType::MissingStep,
            TrajectorySource::TeacherInjected,
            "1",
        );
        assert_eq!(rev.unwrap_err(), ModelError::EmptyBadPrefix);
    }

    #[test]
    fn revision_rejects_non_catalog_phrase_via_serde() {
        let json = serde_json::json!({"text": "Not a real phrase."});
        assert!(serde_json::from_value::<ReflectionPhrase>(json).is_err());
    }

    #[test]
    fn problem_record_validates_gold_answer() {
        let ok = ProblemRecord::new("p", "q?", "sol", "694", "gsm8k", None);
        assert!(ok.is_ok());
        let bad = ProblemRecord::new("p", "q?", "sol", "  $ ", "gsm8k", None);
        assert!(matches!(bad, Err(ModelError::UnparseableGoldAnswer(_))));
    }

    #[test]
    fn distribution_validates_weights() {
        let mut w = BTreeMap::new();
        w.insert(ErrorType::QuestionMisinterpretation, 0.5);
        w.insert(ErrorType::Calculation, 0.5);
        let dist = ErrorDistribution::new(("gsm8k".into(), "student".into()), w).unwrap();
        assert_eq!(dist.weight(ErrorType::Calculation), 0.5);
        assert_eq!(dist.weight(ErrorType::MissingStep), 0.0);

        let mut bad = BTreeMap::new();
        bad.insert(ErrorType::Calculation, 0.9);
        assert!(ErrorDistribution::new(("a".into(), "b".into()), bad).is_err());

        let mut neg = BTreeMap::new();
        neg.insert(ErrorType::Calculation, -0.5);
        neg.insert(ErrorType::Counting, 1.5);
        assert!(ErrorDistribution::new(("a".into(), "b".into()), neg).is_err());
    }

    #[test]
    fn serde_roundtrips_preserve_all_fields() {
        let gold = normalize_answer("5").unwrap();
        let traj =
            Trajectory::new(steps(&["a", "b"]), Some("9".into()), "a\nb").unwrap();
        let bad = AnnotatedBadTrajectory::new(
            traj.clone(),
            2,
            ErrorType::ConfusingConcept,
            "mixed up revenue and profit",
            TrajectorySource::StudentSampled,
            &gold,
        )
        .unwrap();
        let rp = ReflectionPhrase::new(REFLECTION_PHRASES[12]).unwrap();
        let rev = RevisionTrajectory::new(
            "p9",
            steps(&["a"]),
            rp,
            traj.clone(),
            CorrectionStrategy::FreshAndRestart,
            ErrorType::ConfusingConcept,
            TrajectorySource::StudentSampled,
            "5",
        )
        .unwrap();
        let problem = ProblemRecord::new(
            "p9",
            "how many?",
            "work it out",
            "5",
            "gsm8k",
            Some(BTreeMap::from([("level".to_string(), "3".to_string())])),
        )
        .unwrap();
        let mut w = BTreeMap::new();
        w.insert(ErrorType::NonsensicalOutput, 1.0);
        let dist = ErrorDistribution::new(("gsm8k".into(), "m".into()), w).unwrap();

        macro_rules! roundtrip {
            ($value:expr, $ty:ty) => {{
                let json = serde_json::to_string(&$value).unwrap();
                let back: $ty = serde_json::from_str(&json).unwrap();
                assert_eq!(back, $value);
            }};
        }
        roundtrip!(traj, Trajectory);
        roundtrip!(bad, AnnotatedBadTrajectory);
        roundtrip!(rev, RevisionTrajectory);
        roundtrip!(problem, ProblemRecord);
        roundtrip!(dist, ErrorDistribution);
    }
}
