//! Prompt templates, one file per call site. Built-in defaults are compiled
//! in; a templates directory may override any subset of them.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

/// Every place the engine talks to a language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CallSite {
    System,
    GenerateQa,
    Classify,
    Assess,
    FollowUp,
    Report,
    FramePalsy,
    FrameFeatures,
    FrameDescription,
    VideoSummary,
    Mcq,
}

impl CallSite {
    pub const ALL: [CallSite; 11] = [
        CallSite::System,
        CallSite::GenerateQa,
        CallSite::Classify,
        CallSite::Assess,
        CallSite::FollowUp,
        CallSite::Report,
        CallSite::FramePalsy,
        CallSite::FrameFeatures,
        CallSite::FrameDescription,
        CallSite::VideoSummary,
        CallSite::Mcq,
    ];

    /// File name inside a templates directory.
    pub fn file_name(self) -> &'static str {
        match self {
            CallSite::System => "system.txt",
            CallSite::GenerateQa => "generate_qa.txt",
            CallSite::Classify => "classify.txt",
            CallSite::Assess => "assess.txt",
            CallSite::FollowUp => "follow_up.txt",
            CallSite::Report => "report.txt",
            CallSite::FramePalsy => "frame_palsy.txt",
            CallSite::FrameFeatures => "frame_features.txt",
            CallSite::FrameDescription => "frame_description.txt",
            CallSite::VideoSummary => "video_summary.txt",
            CallSite::Mcq => "mcq.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            CallSite::System => include_str!("../templates/system.txt"),
            CallSite::GenerateQa => include_str!("../templates/generate_qa.txt"),
            CallSite::Classify => include_str!("../templates/classify.txt"),
            CallSite::Assess => include_str!("../templates/assess.txt"),
            CallSite::FollowUp => include_str!("../templates/follow_up.txt"),
            CallSite::Report => include_str!("../templates/report.txt"),
            CallSite::FramePalsy => include_str!("../templates/frame_palsy.txt"),
            CallSite::FrameFeatures => include_str!("../templates/frame_features.txt"),
            CallSite::FrameDescription => include_str!("../templates/frame_description.txt"),
            CallSite::VideoSummary => include_str!("../templates/video_summary.txt"),
            CallSite::Mcq => include_str!("../templates/mcq.txt"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PromptTemplates {
    texts: BTreeMap<CallSite, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let texts = CallSite::ALL
            .iter()
            .map(|site| (*site, site.builtin().to_owned()))
            .collect();
        Self { texts }
    }
}

impl PromptTemplates {
    /// Built-in templates overridden by whichever files exist in `dir`.
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        let mut templates = Self::default();
        for site in CallSite::ALL {
            let path = dir.join(site.file_name());
            if path.is_file() {
                templates.texts.insert(site, fs::read_to_string(path)?);
            }
        }
        Ok(templates)
    }

    pub fn set(&mut self, site: CallSite, text: impl Into<String>) {
        self.texts.insert(site, text.into());
    }

    pub fn raw(&self, site: CallSite) -> &str {
        &self.texts[&site]
    }

    /// Substitutes `{name}` placeholders. Unknown placeholders are left as-is.
    pub fn render(&self, site: CallSite, vars: &[(&str, &str)]) -> String {
        let mut out = self.raw(site).to_owned();
        for (name, value) in vars {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out.trim_end().to_owned()
    }
}
