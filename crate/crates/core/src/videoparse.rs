//! Video parsing and House-Brackmann grading.
//!
//! Pipeline: sample frame timestamps, collect external context, observe each
//! frame (from a manifest or through an image-capable backend), gate on a
//! strict majority of palsy frames, aggregate features worst-case, grade.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{self, AdapterError, AudioRef, Backend};
use crate::agent::Turn;
use crate::templates::{CallSite, PromptTemplates};
use crate::text;

pub const MIN_FPS: f64 = 1.0;
pub const MAX_FPS: f64 = 2.0;
pub const DEFAULT_FPS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("fps {0} outside [1, 2]")]
    InvalidFps(f64),
    #[error("duration must be positive and finite, got {0}")]
    InvalidDuration(f64),
    #[error("no frame observations")]
    EmptyObservations,
    #[error("cannot read a yes/no answer from reply: {0:?}")]
    UnparseableReply(String),
    #[error("inconsistent facial features: {0}")]
    InconsistentFeatures(String),
    #[error("frame timestamps must be finite, non-negative and strictly increasing")]
    NonIncreasingTimestamps,
    #[error("frame listing has {found} images but sampling yields {expected} frames")]
    FrameCountMismatch { expected: usize, found: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Backend(#[from] AdapterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Movement {
    #[default]
    Normal,
    ObviousWeakness,
    BarelyPerceptible,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EyeClosure {
    #[default]
    Complete,
    Incomplete,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Synkinesis {
    #[default]
    None,
    Slight,
    Noticeable,
    Severe,
}

impl Movement {
    pub const ALL: [Movement; 4] = [Movement::Normal, Movement::ObviousWeakness, Movement::BarelyPerceptible, Movement::None];
}

impl EyeClosure {
    pub const ALL: [EyeClosure; 3] = [EyeClosure::Complete, EyeClosure::Incomplete, EyeClosure::None];
}

impl Synkinesis {
    pub const ALL: [Synkinesis; 4] = [Synkinesis::None, Synkinesis::Slight, Synkinesis::Noticeable, Synkinesis::Severe];
}

/// Per-frame or aggregated facial findings. Enum variants are declared from
/// best to worst, so `Ord` is the severity order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct FacialFeatures {
    pub symmetry_at_rest: bool,
    pub movement: Movement,
    pub eye_closure: EyeClosure,
    pub synkinesis: Synkinesis,
    pub forehead_motion: bool,
    pub tone_loss: bool,
}

impl Default for FacialFeatures {
    fn default() -> Self {
        Self::normal()
    }
}

impl FacialFeatures {
    pub const fn normal() -> Self {
        Self {
            symmetry_at_rest: true,
            movement: Movement::Normal,
            eye_closure: EyeClosure::Complete,
            synkinesis: Synkinesis::None,
            forehead_motion: true,
            tone_loss: false,
        }
    }

    pub fn is_all_normal(&self) -> bool {
        *self == Self::normal()
    }

    pub fn validate(&self) -> Result<(), VideoError> {
        if self.movement == Movement::None && self.eye_closure != EyeClosure::None {
            return Err(VideoError::InconsistentFeatures("no movement requires no eye closure".into()));
        }
        if self.movement == Movement::Normal && self.synkinesis > Synkinesis::Slight {
            return Err(VideoError::InconsistentFeatures("normal movement allows at most slight synkinesis".into()));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// Nearest valid state, resolving conflicts toward the worse reading.
    pub fn reconciled(mut self) -> Self {
        if self.movement == Movement::Normal && self.synkinesis > Synkinesis::Slight {
            self.movement = Movement::ObviousWeakness;
        }
        if self.movement == Movement::None {
            self.eye_closure = EyeClosure::None;
        }
        self
    }

    /// Every combination of feature values, valid or not (384 in total).
    pub fn enumerate_all() -> Vec<Self> {
        let mut out = Vec::with_capacity(384);
        for symmetry_at_rest in [true, false] {
            for movement in Movement::ALL {
                for eye_closure in EyeClosure::ALL {
                    for synkinesis in Synkinesis::ALL {
                        for forehead_motion in [true, false] {
                            for tone_loss in [false, true] {
                                out.push(Self { symmetry_at_rest, movement, eye_closure, synkinesis, forehead_motion, tone_loss });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// The states reachable by worsening exactly one feature by one step.
    pub fn one_step_worse(&self) -> Vec<Self> {
        let mut out = Vec::new();
        if self.symmetry_at_rest {
            out.push(Self { symmetry_at_rest: false, ..*self });
        }
        if let Some(m) = Movement::ALL.iter().find(|m| **m > self.movement) {
            out.push(Self { movement: *m, ..*self });
        }
        if let Some(e) = EyeClosure::ALL.iter().find(|e| **e > self.eye_closure) {
            out.push(Self { eye_closure: *e, ..*self });
        }
        if let Some(s) = Synkinesis::ALL.iter().find(|s| **s > self.synkinesis) {
            out.push(Self { synkinesis: *s, ..*self });
        }
        if self.forehead_motion {
            out.push(Self { forehead_motion: false, ..*self });
        }
        if !self.tone_loss {
            out.push(Self { tone_loss: true, ..*self });
        }
        out
    }

    fn describe(&self) -> String {
        format!(
            "symmetry_at_rest={}, movement={}, eye_closure={}, synkinesis={}, forehead_motion={}, tone_loss={}",
            self.symmetry_at_rest,
            enum_name(&self.movement),
            enum_name(&self.eye_closure),
            enum_name(&self.synkinesis),
            self.forehead_motion,
            self.tone_loss
        )
    }
}

fn enum_name<E: Serialize>(value: &E) -> String {
    serde_json::to_value(value).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grade {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl Grade {
    pub const ALL: [Grade; 6] = [Grade::I, Grade::II, Grade::III, Grade::IV, Grade::V, Grade::VI];

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::I => "I",
            Grade::II => "II",
            Grade::III => "III",
            Grade::IV => "IV",
            Grade::V => "V",
            Grade::VI => "VI",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HBGrade {
    pub grade: Grade,
    pub rationale: String,
}

/// Which rubric clause holds for `f`, from the most severe down. Every
/// clause is closed under worsening any feature, so the first one that
/// holds is also the highest, and grading is monotone.
pub fn rubric_clauses(f: &FacialFeatures) -> [bool; 6] {
    let sym_loss = !f.symmetry_at_rest;
    [
        f.movement == Movement::None && f.tone_loss && sym_loss,
        f.movement >= Movement::BarelyPerceptible
            || (sym_loss && f.movement >= Movement::ObviousWeakness && f.eye_closure == EyeClosure::None),
        f.movement >= Movement::ObviousWeakness
            && (f.eye_closure >= EyeClosure::Incomplete || f.synkinesis == Synkinesis::Severe),
        f.movement >= Movement::ObviousWeakness,
        !f.is_all_normal(),
        true,
    ]
}

pub fn grade_hb(features: &FacialFeatures) -> Result<HBGrade, VideoError> {
    features.validate()?;
    let clauses = rubric_clauses(features);
    let first = clauses.iter().position(|c| *c).unwrap_or(5);
    let (grade, reason) = match first {
        0 => (Grade::VI, "total paralysis: no movement, lost muscle tone and asymmetry at rest"),
        1 => (Grade::V, "severe dysfunction: at most a flicker of movement, or asymmetry at rest with no eye closure"),
        2 => (Grade::IV, "moderately severe dysfunction: obvious weakness with incomplete eye closure or severe synkinesis"),
        3 => (Grade::III, "moderate dysfunction: obvious weakness with complete eye closure"),
        4 => (Grade::II, "mild dysfunction: movement preserved with minor findings"),
        _ => (Grade::I, "normal: every feature within normal limits"),
    };
    Ok(HBGrade { grade, rationale: format!("Grade {grade}, {reason} ({})", features.describe()) })
}

/// Frame timestamps `i / fps` for `i` in `0..floor(duration * fps)`.
pub fn sample_frames(duration_s: f64, fps: f64) -> Result<Vec<f64>, VideoError> {
    if !(MIN_FPS..=MAX_FPS).contains(&fps) {
        return Err(VideoError::InvalidFps(fps));
    }
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(VideoError::InvalidDuration(duration_s));
    }
    let count = (duration_s * fps).floor() as usize;
    Ok((0..count).map(|i| i as f64 / fps).filter(|t| *t < duration_s).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExternalContext {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Labeled context blocks in fixed order: conversation, metadata,
/// transcript. Empty sources are left out.
pub fn collect_external(turns: &[Turn], metadata: Option<&str>, audio: &AudioRef, backend: &dyn Backend) -> ExternalContext {
    let mut blocks = Vec::new();
    if !turns.is_empty() {
        let lines: Vec<String> = turns.iter().map(|t| format!("{}: {}", t.speaker.as_str(), t.text)).collect();
        blocks.push(format!("Previous conversation:\n{}", lines.join("\n")));
    }
    if let Some(meta) = metadata.map(str::trim).filter(|m| !m.is_empty()) {
        blocks.push(format!("Video metadata:\n{meta}"));
    }
    let transcript = adapters::transcribe(audio, backend);
    let mut warning = transcript.warning.clone();
    if !transcript.text.trim().is_empty() {
        blocks.push(format!("Transcript:\n{}", transcript.text.trim()));
    }
    if blocks.is_empty() {
        warning = Some(match warning {
            Some(w) => format!("no external context available; {w}"),
            None => "no external context available".into(),
        });
    }
    ExternalContext { text: blocks.join("\n\n"), warning }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub t: f64,
    #[serde(alias = "palsy")]
    pub palsy_flag: bool,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub features: FacialFeatures,
    /// Whether the face is at rest in this frame; only such frames inform
    /// symmetry at rest.
    #[serde(default = "yes")]
    pub at_rest: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrameRef {
    Observation(FrameObservation),
    Image(PathBuf),
}

fn yes_no_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").expect("static regex"))
}

/// Earliest standalone yes/no in the reply.
pub fn parse_yes_no(reply: &str) -> Result<bool, VideoError> {
    yes_no_re()
        .captures(reply)
        .map(|c| c[1].eq_ignore_ascii_case("yes"))
        .ok_or_else(|| VideoError::UnparseableReply(reply.to_owned()))
}

/// Reads feature phrases from free text; unmentioned features stay normal
/// and the result is reconciled to a valid state.
pub fn parse_features(reply: &str) -> FacialFeatures {
    let t = text::normalize(reply);
    let has = |phrases: &[&str]| phrases.iter().any(|p| t.contains(p));
    let mut f = FacialFeatures::normal();
    f.movement = if has(&["no movement", "complete paralysis"]) {
        Movement::None
    } else if has(&["barely perceptible"]) {
        Movement::BarelyPerceptible
    } else if has(&["obvious weakness"]) {
        Movement::ObviousWeakness
    } else {
        Movement::Normal
    };
    f.eye_closure = if has(&["no eye closure", "unable to close"]) {
        EyeClosure::None
    } else if has(&["incomplete eye closure", "incomplete closure"]) {
        EyeClosure::Incomplete
    } else {
        EyeClosure::Complete
    };
    f.synkinesis = if has(&["severe synkinesis"]) {
        Synkinesis::Severe
    } else if has(&["noticeable synkinesis"]) {
        Synkinesis::Noticeable
    } else if has(&["slight synkinesis"]) {
        Synkinesis::Slight
    } else {
        Synkinesis::None
    };
    f.symmetry_at_rest = !has(&["asymmetry at rest", "asymmetric at rest"]);
    f.forehead_motion = !has(&["no forehead motion", "no forehead movement"]);
    f.tone_loss = has(&["loss of tone", "tone loss"]);
    f.reconciled()
}

/// Stored observations pass through untouched; image frames are sent to the
/// backend three times (palsy, features, description).
pub fn analyze_frame(
    frame: &FrameRef,
    t: f64,
    external_context: &str,
    backend: &dyn Backend,
    templates: &PromptTemplates,
) -> Result<FrameObservation, VideoError> {
    let path = match frame {
        FrameRef::Observation(obs) => return Ok(obs.clone()),
        FrameRef::Image(path) => path,
    };
    let ts = format!("{t}");
    let vars = [("t", ts.as_str()), ("context", external_context)];
    let ask = |site: CallSite| -> Result<String, VideoError> {
        let prompt = adapters::templated_prompt(templates, site, &vars);
        adapters::validate_conversation(&prompt)?;
        let reply = backend.describe_image(path, &prompt)?;
        if reply.trim().is_empty() {
            return Err(AdapterError::EmptyReply.into());
        }
        Ok(reply)
    };
    let palsy_flag = parse_yes_no(&ask(CallSite::FramePalsy)?)?;
    let features = parse_features(&ask(CallSite::FrameFeatures)?);
    let description = ask(CallSite::FrameDescription)?.trim().to_owned();
    Ok(FrameObservation { t, palsy_flag, description, features, at_rest: true })
}

/// Strict majority of palsy frames.
pub fn palsy_gate(observations: &[FrameObservation]) -> Result<bool, VideoError> {
    if observations.is_empty() {
        return Err(VideoError::EmptyObservations);
    }
    let flagged = observations.iter().filter(|o| o.palsy_flag).count();
    Ok(2 * flagged > observations.len())
}

/// Worst case across frames. Symmetry at rest holds only if it holds in
/// every at-rest frame.
pub fn aggregate_features(observations: &[FrameObservation]) -> Result<FacialFeatures, VideoError> {
    let first = observations.first().ok_or(VideoError::EmptyObservations)?;
    let mut agg = first.features;
    agg.symmetry_at_rest = true;
    for o in observations {
        let f = &o.features;
        agg.movement = agg.movement.max(f.movement);
        agg.eye_closure = agg.eye_closure.max(f.eye_closure);
        agg.synkinesis = agg.synkinesis.max(f.synkinesis);
        agg.forehead_motion &= f.forehead_motion;
        agg.tone_loss |= f.tone_loss;
        if o.at_rest {
            agg.symmetry_at_rest &= f.symmetry_at_rest;
        }
    }
    Ok(agg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScript {
    pub video_id: String,
    pub per_second: Vec<FrameObservation>,
    pub transcript: String,
    pub external_context: String,
    pub summary: String,
    pub aggregate_features: FacialFeatures,
}

fn observation_lines(observations: &[FrameObservation]) -> String {
    observations
        .iter()
        .map(|o| {
            let desc = if o.description.is_empty() { "(no description)" } else { o.description.as_str() };
            format!("[{}s] palsy={} {desc}", o.t, if o.palsy_flag { "yes" } else { "no" })
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Orders observations by time and builds the script. The summary comes
/// from the backend when one is given, otherwise it is the line-per-frame
/// join of the descriptions.
pub fn compose_script(
    video_id: &str,
    mut observations: Vec<FrameObservation>,
    transcript: &str,
    external_context: &str,
    summarizer: Option<(&dyn Backend, &PromptTemplates)>,
) -> Result<VideoScript, VideoError> {
    if observations.iter().any(|o| !(o.t.is_finite() && o.t >= 0.0)) {
        return Err(VideoError::NonIncreasingTimestamps);
    }
    observations.sort_by(|a, b| a.t.total_cmp(&b.t));
    if observations.windows(2).any(|w| w[0].t >= w[1].t) {
        return Err(VideoError::NonIncreasingTimestamps);
    }
    let aggregate_features = aggregate_features(&observations)?;
    let lines = observation_lines(&observations);
    let summary = match summarizer {
        Some((backend, templates)) => {
            let prompt = adapters::templated_prompt(
                templates,
                CallSite::VideoSummary,
                &[("observations", &lines), ("transcript", transcript), ("context", external_context)],
            );
            adapters::chat_complete(&prompt, backend)?.trim().to_owned()
        }
        None => lines,
    };
    Ok(VideoScript {
        video_id: video_id.to_owned(),
        per_second: observations,
        transcript: transcript.to_owned(),
        external_context: external_context.to_owned(),
        summary,
        aggregate_features,
    })
}

/// Pre-computed observations for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationManifest {
    pub video_id: String,
    pub duration_s: f64,
    pub frames: Vec<FrameObservation>,
    #[serde(default)]
    pub transcript: Option<String>,
    #[serde(default)]
    pub metadata: Option<String>,
}

impl ObservationManifest {
    pub fn from_json(json: &str) -> Result<Self, VideoError> {
        let manifest: Self = serde_json::from_str(json)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn from_file(path: &Path) -> Result<Self, VideoError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), VideoError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(VideoError::InvalidDuration(self.duration_s));
        }
        if self.frames.is_empty() {
            return Err(VideoError::EmptyObservations);
        }
        for frame in &self.frames {
            if !(frame.t.is_finite() && frame.t >= 0.0 && frame.t < self.duration_s) {
                return Err(VideoError::InvalidManifest(format!("frame time {} outside [0, {})", frame.t, self.duration_s)));
            }
            frame.features.validate()?;
        }
        Ok(())
    }
}

/// Image files, one per sampled timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameListing {
    pub video_id: String,
    pub duration_s: f64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub transcript: Option<String>,
    #[serde(default)]
    pub audio: Option<PathBuf>,
    #[serde(default)]
    pub metadata: Option<String>,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VideoInput {
    Manifest(ObservationManifest),
    Listing(FrameListing),
}

impl VideoInput {
    pub fn video_id(&self) -> &str {
        match self {
            VideoInput::Manifest(m) => &m.video_id,
            VideoInput::Listing(l) => &l.video_id,
        }
    }
}

pub struct VideoContext<'a> {
    pub backend: &'a dyn Backend,
    pub templates: &'a PromptTemplates,
    /// Prior conversation of the session the video belongs to.
    pub history: &'a [Turn],
    /// Summarize through the backend instead of joining descriptions.
    pub summarize_with_backend: bool,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnalysis {
    pub script: VideoScript,
    pub gate: bool,
    pub grade: Option<HBGrade>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Runs `analyze` over every frame with at most `workers` threads. Results
/// keep input order; the first failing frame (in order) is reported.
pub fn analyze_frames_parallel<F>(frames: &[(FrameRef, f64)], workers: usize, analyze: F) -> Result<Vec<FrameObservation>, VideoError>
where
    F: Fn(&FrameRef, f64) -> Result<FrameObservation, VideoError> + Sync,
{
    crate::par::ordered_map(frames, workers, |(frame, t)| analyze(frame, *t)).into_iter().collect()
}

pub fn analyze_video(input: &VideoInput, ctx: &VideoContext<'_>) -> Result<VideoAnalysis, VideoError> {
    let (metadata, audio, frames) = match input {
        VideoInput::Manifest(m) => {
            m.validate()?;
            let frames = m.frames.iter().map(|f| (FrameRef::Observation(f.clone()), f.t)).collect::<Vec<_>>();
            (m.metadata.as_deref(), AudioRef { transcript: m.transcript.clone(), path: None }, frames)
        }
        VideoInput::Listing(l) => {
            let times = sample_frames(l.duration_s, l.fps)?;
            if times.len() != l.images.len() {
                return Err(VideoError::FrameCountMismatch { expected: times.len(), found: l.images.len() });
            }
            let frames = l.images.iter().cloned().map(FrameRef::Image).zip(times).collect::<Vec<_>>();
            (l.metadata.as_deref(), AudioRef { transcript: l.transcript.clone(), path: l.audio.clone() }, frames)
        }
    };
    let external = collect_external(ctx.history, metadata, &audio, ctx.backend);
    let transcript = adapters::transcribe(&audio, ctx.backend).text;
    let observations = analyze_frames_parallel(&frames, ctx.workers, |frame, t| {
        analyze_frame(frame, t, &external.text, ctx.backend, ctx.templates)
    })?;
    let gate = palsy_gate(&observations)?;
    let summarizer = ctx.summarize_with_backend.then_some((ctx.backend, ctx.templates));
    let script = compose_script(input.video_id(), observations, &transcript, &external.text, summarizer)?;
    let grade = if gate { Some(grade_hb(&script.aggregate_features)?) } else { None };
    Ok(VideoAnalysis { script, gate, grade, warnings: external.warning.into_iter().collect() })
}
