//! Language-driven instance retrieval: instruction parsing, similarity
//! ranking, and spatially grounded candidate selection over a built map.

pub mod embed;
pub mod ground;
pub mod kdtree;
pub mod labels;
pub mod llm;
pub mod map;
pub mod prompts;

pub use embed::{HttpTextEmbedder, SyntheticTextEmbedder, TextEmbedder};
pub use ground::{
    ground_instruction, load_trace, save_trace, CandidateRecord, GroundingOptions,
    GroundingRecord, TraceFile, TRACE_FORMAT,
};
pub use kdtree::KdTree;
pub use labels::{assign_labels, LabelTable};
pub use llm::{ChatMessage, HttpLlm, LlmClient, ScriptedLlm};
pub use map::InstanceMap;
