use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, RawConfig};
use crate::error::{Error, Result};
use crate::grounding::embed::TextEmbedder;
use crate::grounding::labels::LabelTable;
use crate::grounding::llm::{parse_choice_reply, ChatMessage, LlmClient};
use crate::grounding::map::InstanceMap;
use crate::grounding::prompts::{render_round1, render_round2, retry_reminder, CandidateLine};
use crate::scalar::Scalar;

pub const TRACE_FORMAT: &str = "instmap-trace/1";

/// Record of grounding runs, written next to the map and consumed by the
/// retrieval evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceFile {
    pub format: String,
    pub map: String,
    pub text_embedder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<String>,
    pub parsing: bool,
    pub selection: bool,
    pub config: RawConfig,
    #[serde(default, rename = "grounding")]
    pub groundings: Vec<GroundingRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub instruction: String,
    /// Round-1 output; absent when parsing was disabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub chosen_instance: u32,
    /// Set when the model never produced a usable candidate number and the
    /// similarity rank-1 instance was used instead.
    #[serde(default)]
    pub llm_fallback: bool,
    /// Navigation attempts in order: the chosen instance's centroid first,
    /// then the remaining candidates by similarity rank.
    pub attempts: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round1_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round1_reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round2_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub round2_replies: Vec<String>,
    #[serde(default, rename = "candidate")]
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub instance_id: u32,
    pub similarity: f64,
    pub center: [f64; 3],
    pub cells: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroundingOptions {
    /// Round 1: rewrite the instruction into an object description before
    /// embedding. Off embeds the raw instruction.
    pub parsing: bool,
    /// Round 2: let the model pick among candidates. Off takes rank 1.
    pub selection: bool,
}

impl Default for GroundingOptions {
    fn default() -> Self {
        Self { parsing: true, selection: true }
    }
}

fn need_llm<'a>(
    llm: &'a mut Option<&mut dyn LlmClient>,
    what: &str,
) -> Result<&'a mut dyn LlmClient> {
    match llm {
        Some(l) => Ok(&mut **l),
        None => Err(Error::llm(format!("{what} needs a language model"))),
    }
}

/// Grounds one instruction against the map. See [`GroundingRecord`] for
/// what comes back; errors are reserved for broken inputs and transport
/// failures, while unusable model replies degrade to the similarity rank-1
/// choice with `llm_fallback` set.
pub fn ground_instruction<T: Scalar>(
    map: &InstanceMap<T>,
    labels: Option<&LabelTable<T>>,
    instruction: &str,
    embedder: &dyn TextEmbedder<T>,
    mut llm: Option<&mut dyn LlmClient>,
    cfg: &PipelineConfig<T>,
    opts: GroundingOptions,
) -> Result<GroundingRecord> {
    if map.instances.is_empty() {
        return Err(Error::domain("cannot ground against an empty map"));
    }

    let mut round1_prompt = None;
    let mut round1_reply = None;
    let description: Option<String> = if opts.parsing {
        let client = need_llm(&mut llm, "instruction parsing")?;
        let prompt = render_round1(instruction);
        let reply = client.chat(&[ChatMessage::user(prompt.clone())])?;
        let desc = reply.trim().to_string();
        if desc.is_empty() {
            return Err(Error::llm("model returned an empty description"));
        }
        round1_prompt = Some(prompt);
        round1_reply = Some(reply);
        Some(desc)
    } else {
        None
    };

    let query_text = description.as_deref().unwrap_or(instruction);
    let feature = embedder.embed(query_text)?;
    if feature.len() != map.feature_dim {
        return Err(Error::config(format!(
            "text embedder dimension {} does not match map feature dimension {}",
            feature.len(),
            map.feature_dim
        )));
    }

    let ranked = map.rank_candidates(&feature, cfg.candidates);
    let name_of = |idx: usize| -> Option<String> {
        let inst = &map.instances[idx];
        labels
            .and_then(|t| inst.label_id.and_then(|id| t.name_of(id)))
            .map(str::to_string)
    };
    let candidates: Vec<CandidateRecord> = ranked
        .iter()
        .map(|&(sim, idx)| {
            let inst = &map.instances[idx];
            CandidateRecord {
                instance_id: inst.instance_id,
                similarity: sim.to_f64_out(),
                center: [
                    inst.centroid[0].to_f64_out(),
                    inst.centroid[1].to_f64_out(),
                    inst.centroid[2].to_f64_out(),
                ],
                cells: inst.cloud.len(),
                label: name_of(idx),
            }
        })
        .collect();

    let mut round2_prompt = None;
    let mut round2_replies = Vec::new();
    let mut llm_fallback = false;
    let chosen_pos: usize = if !opts.selection || ranked.len() == 1 {
        0
    } else {
        let client = need_llm(&mut llm, "candidate selection")?;
        let lines: Vec<CandidateLine> = ranked
            .iter()
            .zip(&candidates)
            .enumerate()
            .map(|(i, (&(_, idx), rec))| CandidateLine {
                index: i + 1,
                label: rec.label.clone().unwrap_or_else(|| "object".to_string()),
                center: rec.center,
                cells: rec.cells,
                similarity: rec.similarity,
                nearby: map
                    .spatial_context(idx, cfg.neighbor_radius, cfg.neighbors)
                    .into_iter()
                    .map(|(d, nidx)| {
                        (
                            name_of(nidx).unwrap_or_else(|| "object".to_string()),
                            d.to_f64_out(),
                        )
                    })
                    .collect(),
            })
            .collect();
        let prompt = render_round2(instruction, query_text, &lines);
        round2_prompt = Some(prompt.clone());
        let mut messages = vec![ChatMessage::user(prompt)];
        let reply = client.chat(&messages)?;
        round2_replies.push(reply.clone());
        match parse_choice_reply(&reply, ranked.len()) {
            Some(i) => i - 1,
            None => {
                messages.push(ChatMessage { role: "assistant".into(), content: reply });
                messages.push(ChatMessage::user(retry_reminder(ranked.len())));
                let retry = client.chat(&messages)?;
                round2_replies.push(retry.clone());
                match parse_choice_reply(&retry, ranked.len()) {
                    Some(i) => i - 1,
                    None => {
                        log::warn!(
                            "instruction {instruction:?}: unusable candidate replies, \
                             falling back to similarity rank 1"
                        );
                        llm_fallback = true;
                        0
                    }
                }
            }
        }
    };

    let mut order = vec![chosen_pos];
    order.extend((0..candidates.len()).filter(|&i| i != chosen_pos));
    let attempts: Vec<[f64; 3]> = order.iter().map(|&i| candidates[i].center).collect();

    Ok(GroundingRecord {
        instruction: instruction.to_string(),
        description,
        chosen_instance: candidates[chosen_pos].instance_id,
        llm_fallback,
        attempts,
        round1_prompt,
        round1_reply,
        round2_prompt,
        round2_replies,
        candidates,
    })
}

pub fn save_trace(path: &Path, trace: &TraceFile) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, toml::to_string_pretty(trace).expect("trace serializes"))?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<TraceFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, &e.to_string()))?;
    let trace: TraceFile =
        toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    if trace.format != TRACE_FORMAT {
        return Err(Error::schema(format!(
            "{}: unsupported trace format {:?}",
            path.display(),
            trace.format
        )));
    }
    Ok(trace)
}
