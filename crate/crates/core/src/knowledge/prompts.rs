use std::fmt;

use serde::{Deserialize, Serialize};

use super::{validate_class_name, KnowledgeError};

pub const CLASS_PLACEHOLDER: &str = "[CLS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptId {
    /// Hand-crafted class template, rendered locally.
    Ka,
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl PromptId {
    pub const ALL: [PromptId; 7] = [
        PromptId::Ka,
        PromptId::P1,
        PromptId::P2,
        PromptId::P3,
        PromptId::P4,
        PromptId::P5,
        PromptId::P6,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptId::Ka => "Ka",
            PromptId::P1 => "P1",
            PromptId::P2 => "P2",
            PromptId::P3 => "P3",
            PromptId::P4 => "P4",
            PromptId::P5 => "P5",
            PromptId::P6 => "P6",
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: PromptId,
    pub body: &'static str,
    pub requires_image: bool,
}

// Bodies are kept byte-exact, including the typographic quotes and the
// missing space after "[CLS]." in P2.
const TEMPLATES: [PromptTemplate; 7] = [
    PromptTemplate {
        id: PromptId::Ka,
        body: "A photo of a [CLS].",
        requires_image: false,
    },
    PromptTemplate {
        id: PromptId::P1,
        body: "This is a picture of a [CLS] hidden in the background, please give me a brief \
               description based only on the morphological information of a general [CLS] \
               (Only describe physical characteristics, do not need to describe life habits \
               and so on). No more than 50 words.",
        requires_image: false,
    },
    PromptTemplate {
        id: PromptId::P2,
        body: "Please use detailed language to describe the entire scene in the given image of \
               a [CLS].No more than 30 words.",
        requires_image: true,
    },
    PromptTemplate {
        id: PromptId::P3,
        body: "Within this scene, how does the [CLS] blend in the environment? Please describe \
               it from the perspective of \u{201c}colour\u{201d} in one sentence.",
        requires_image: true,
    },
    PromptTemplate {
        id: PromptId::P4,
        body: "Within this scene, how does the [CLS] blend in the environment? Please describe \
               it from the perspective of \u{201c}texture\u{201d} in one sentence.",
        requires_image: true,
    },
    PromptTemplate {
        id: PromptId::P5,
        body: "Within this scene, how does the [CLS] blend in the environment? Please describe \
               it from the perspective of \u{201c}shape\u{201d} in one sentence.",
        requires_image: true,
    },
    PromptTemplate {
        id: PromptId::P6,
        body: "Within this scene, how does the [CLS] blend in the environment? Please describe \
               it from the perspective of \u{201c}environment lighting condition\u{201d} in one \
               sentence.",
        requires_image: true,
    },
];

impl PromptTemplate {
    pub fn get(id: PromptId) -> &'static PromptTemplate {
        &TEMPLATES[id as usize]
    }

    pub fn all() -> &'static [PromptTemplate] {
        &TEMPLATES
    }
}

/// Substitutes every `[CLS]` in the template body with `class_name`.
pub fn render_prompt(template: &PromptTemplate, class_name: &str) -> Result<String, KnowledgeError> {
    validate_class_name(class_name)?;
    Ok(template.body.replace(CLASS_PLACEHOLDER, class_name))
}
