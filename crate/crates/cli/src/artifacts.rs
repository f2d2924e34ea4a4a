//! Files the commands emit: atomic writes, occupancy frames and token timelines.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stepflow::path_data::{Sequence, Token};

use crate::config::FrameFormat;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("writing into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Counts of fully unmasked two-token states on a `grid x grid` board,
/// indexed `[x1][x2]`.
pub fn occupancy(states: &[Sequence], grid: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; grid]; grid];
    for s in states {
        if let [a, b] = s[..] {
            if (a as usize) < grid && (b as usize) < grid {
                counts[a as usize][b as usize] += 1;
            }
        }
    }
    counts
}

/// One row per `x1`, one column per `x2`.
pub fn frame_bytes(counts: &[Vec<u64>], format: FrameFormat) -> Vec<u8> {
    match format {
        FrameFormat::Csv => {
            let mut out = String::new();
            for row in counts {
                let cells: Vec<String> = row.iter().map(u64::to_string).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            out.into_bytes()
        }
        FrameFormat::Pgm => {
            // Plain graymap; darker cells hold more chains.
            let max = counts.iter().flatten().copied().max().unwrap_or(0).max(1);
            let mut out = format!("P2\n{} {}\n255\n", counts.first().map_or(0, Vec::len), counts.len());
            for row in counts {
                let cells: Vec<String> = row.iter().map(|&c| (255 - c * 255 / max).to_string()).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
    }
}

pub const TIMELINE_BINS: u8 = 8;

/// A final sequence with the step of each token's last change quantized to
/// eight bins. Untouched tokens fall in bin 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineArtifact {
    pub tokens: Vec<Token>,
    /// Display text of each token.
    pub pieces: Vec<String>,
    pub bins: Vec<u8>,
    pub steps: usize,
}

pub fn last_change_bin(last_change: usize, steps: usize) -> u8 {
    if last_change == 0 || steps == 0 {
        return 1;
    }
    let bin = (last_change * TIMELINE_BINS as usize).div_ceil(steps);
    bin.clamp(1, TIMELINE_BINS as usize) as u8
}

impl TimelineArtifact {
    pub fn new(tokens: Vec<Token>, pieces: Vec<String>, last_change: &[usize], steps: usize) -> Result<Self> {
        if tokens.len() != pieces.len() || tokens.len() != last_change.len() {
            bail!("timeline tokens, pieces and last-change steps differ in length");
        }
        let bins = last_change.iter().map(|&s| last_change_bin(s, steps)).collect();
        Ok(Self { tokens, pieces, bins, steps })
    }

    pub fn check(&self) -> Result<()> {
        if self.tokens.len() != self.pieces.len() || self.tokens.len() != self.bins.len() {
            bail!("timeline tokens, pieces and bins differ in length");
        }
        if let Some(b) = self.bins.iter().find(|&&b| !(1..=TIMELINE_BINS).contains(&b)) {
            bail!("timeline bin {b} outside 1..={TIMELINE_BINS}");
        }
        Ok(())
    }
}

/// Light backgrounds, start to end.
const BIN_COLORS: [&str; 8] = ["#dbeafe", "#cffafe", "#d1fae5", "#ecfccb", "#fef9c3", "#ffedd5", "#fee2e2", "#f3e8ff"];

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Self-contained HTML. Only colors of bins that occur are emitted.
pub fn render_timeline(artifacts: &[TimelineArtifact]) -> Result<String> {
    let mut used = [false; TIMELINE_BINS as usize];
    for a in artifacts {
        a.check()?;
        for &b in &a.bins {
            used[b as usize - 1] = true;
        }
    }
    let mut out = String::from("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>token timeline</title>\n<style>\n");
    out.push_str("body { font-family: monospace; }\n.seq { white-space: pre-wrap; margin-bottom: 1.5em; }\n");
    for (k, &on) in used.iter().enumerate() {
        if on {
            writeln!(out, ".b{} {{ background: {}; }}", k + 1, BIN_COLORS[k]).expect("string write");
        }
    }
    out.push_str("</style>\n</head>\n<body>\n<p>last-change bin:");
    for (k, &on) in used.iter().enumerate() {
        if on {
            write!(out, " <span class=\"b{0}\">{0}</span>", k + 1).expect("string write");
        }
    }
    out.push_str("</p>\n");
    for a in artifacts {
        write!(out, "<div class=\"seq\" data-steps=\"{}\">", a.steps).expect("string write");
        for (piece, &bin) in a.pieces.iter().zip(&a.bins) {
            write!(out, "<span class=\"b{bin}\">{}</span>", escape(piece)).expect("string write");
        }
        out.push_str("</div>\n");
    }
    out.push_str("</body>\n</html>\n");
    Ok(out)
}
