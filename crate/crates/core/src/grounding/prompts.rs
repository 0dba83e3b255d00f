//! Prompt assembly for the two grounding rounds. The candidate line format
//! is load-bearing: the scripted model's neighbor directive and the trace
//! files both key off it, so change it deliberately.

pub const ROUND1_TEMPLATE: &str = include_str!("prompts/round1.txt");
pub const ROUND2_TEMPLATE: &str = include_str!("prompts/round2.txt");

pub fn render_round1(instruction: &str) -> String {
    ROUND1_TEMPLATE.replace("{instruction}", instruction)
}

/// One candidate as shown to the model. Distances and similarity print with
/// two decimals.
#[derive(Debug, Clone)]
pub struct CandidateLine {
    pub index: usize,
    pub label: String,
    pub center: [f64; 3],
    pub cells: usize,
    pub similarity: f64,
    /// (label, distance in meters), already sorted.
    pub nearby: Vec<(String, f64)>,
}

impl CandidateLine {
    fn render(&self) -> String {
        let nearby = if self.nearby.is_empty() {
            "none".to_string()
        } else {
            self.nearby
                .iter()
                .map(|(l, d)| format!("{l} ({d:.2} m)"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!(
            "Candidate {}: {}; center ({:.2}, {:.2}, {:.2}) m; {} cells; similarity {:.2}; nearby: {}",
            self.index,
            self.label,
            self.center[0],
            self.center[1],
            self.center[2],
            self.cells,
            self.similarity,
            nearby
        )
    }
}

pub fn render_round2(instruction: &str, description: &str, candidates: &[CandidateLine]) -> String {
    let lines: Vec<String> = candidates.iter().map(CandidateLine::render).collect();
    ROUND2_TEMPLATE
        .replace("{count}", &candidates.len().to_string())
        .replace("{instruction}", instruction)
        .replace("{description}", description)
        .replace("{candidates}", &lines.join("\n"))
}

pub fn retry_reminder(count: usize) -> String {
    format!(
        "Your previous reply did not match the required format. Reply with a \
         single candidate number between 1 and {count}, digits only."
    )
}
