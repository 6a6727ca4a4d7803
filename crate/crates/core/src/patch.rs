//! Line-diff patches over whole source files.
//!
//! A patch is an ordered list of hunks. Each hunk names an inclusive range of
//! lines in the *original* file and the lines that replace it. Pure insertion
//! is written as `end = start - 1`; deletion is an empty replacement.
//!
//! Canonical text form:
//!
//! ```text
//! @@ 2 2 @@
//! +replacement line
//! @@ 5 4 @@
//! +inserted before original line 5
//! ```

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Opening fence for a patch embedded in a model response.
pub const PATCH_OPEN: &str = "<<<PATCH";
/// Closing fence for a patch embedded in a model response.
pub const PATCH_CLOSE: &str = "PATCH>>>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatchError {
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("cannot apply hunk {hunk_index}: {reason}")]
    Apply { hunk_index: usize, reason: String },
    #[error("invalid source file: {0}")]
    InvalidFile(String),
}

impl PatchError {
    fn parse(line: usize, reason: impl Into<String>) -> Self {
        PatchError::Parse {
            line,
            reason: reason.into(),
        }
    }
}

/// A file as an ordered sequence of lines without terminators.
///
/// Content is split on `\n`, so `"a\nb\n"` holds three lines, the last one
/// empty. Empty content holds no lines.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SourceFile {
    path: String,
    lines: Vec<String>,
}

impl SourceFile {
    pub fn new(path: impl Into<String>, lines: Vec<String>) -> Result<Self, PatchError> {
        let path = path.into();
        if path.is_empty() {
            return Err(PatchError::InvalidFile("path is empty".into()));
        }
        if path.contains('\0') {
            return Err(PatchError::InvalidFile("path contains a null byte".into()));
        }
        Ok(SourceFile { path, lines })
    }

    pub fn from_content(path: impl Into<String>, content: &str) -> Result<Self, PatchError> {
        Self::new(path, split_lines(content))
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn content(&self) -> String {
        self.lines.join("\n")
    }

    /// Lines `start..=end` (1-based, clamped to the file).
    pub fn excerpt(&self, start: usize, end: usize) -> &[String] {
        let lo = start.saturating_sub(1).min(self.lines.len());
        let hi = end.min(self.lines.len()).max(lo);
        &self.lines[lo..hi]
    }
}

pub(crate) fn split_lines(content: &str) -> Vec<String> {
    if content.is_empty() {
        Vec::new()
    } else {
        content.split('\n').map(str::to_owned).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct SourceFileRepr {
    path: String,
    content: String,
}

impl Serialize for SourceFile {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        SourceFileRepr {
            path: self.path.clone(),
            content: self.content(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SourceFile {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = SourceFileRepr::deserialize(deserializer)?;
        SourceFile::from_content(repr.path, &repr.content).map_err(serde::de::Error::custom)
    }
}

/// One contiguous replacement, addressed in original-file coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hunk {
    pub start: usize,
    pub end: usize,
    pub replacement: Vec<String>,
}

impl Hunk {
    pub fn new(start: usize, end: usize, replacement: Vec<String>) -> Self {
        Hunk {
            start,
            end,
            replacement,
        }
    }

    pub fn is_insertion(&self) -> bool {
        self.end + 1 == self.start
    }

    /// Number of original lines this hunk replaces.
    pub fn span(&self) -> usize {
        self.end + 1 - self.start
    }

    fn check_shape(&self) -> Result<(), String> {
        if self.start == 0 {
            return Err("hunk start must be at least 1".into());
        }
        if self.end + 1 < self.start {
            return Err(format!(
                "hunk end {} is before start {} minus one",
                self.end, self.start
            ));
        }
        Ok(())
    }

    fn check_bounds(&self, original_length: usize) -> Result<(), String> {
        if self.start > original_length + 1 {
            return Err(format!(
                "start {} is past the end of a {original_length}-line file",
                self.start
            ));
        }
        if self.end > original_length {
            return Err(format!(
                "end {} is past the end of a {original_length}-line file",
                self.end
            ));
        }
        Ok(())
    }
}

/// Ordered, non-overlapping hunks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct LineDiffPatch {
    hunks: Vec<Hunk>,
}

impl LineDiffPatch {
    pub fn empty() -> Self {
        LineDiffPatch::default()
    }

    /// Builds a patch, checking shape and ordering but not file bounds.
    pub fn new(hunks: Vec<Hunk>) -> Result<Self, PatchError> {
        for (i, h) in hunks.iter().enumerate() {
            h.check_shape()
                .map_err(|reason| PatchError::parse(0, format!("hunk {i}: {reason}")))?;
        }
        for (i, pair) in hunks.windows(2).enumerate() {
            if pair[0].start >= pair[1].start {
                return Err(PatchError::parse(
                    0,
                    format!("hunks {} and {} are not sorted by start", i, i + 1),
                ));
            }
            if pair[0].end >= pair[1].start {
                return Err(PatchError::parse(
                    0,
                    format!("hunks {} and {} overlap", i, i + 1),
                ));
            }
        }
        Ok(LineDiffPatch { hunks })
    }

    pub fn hunks(&self) -> &[Hunk] {
        &self.hunks
    }

    pub fn is_empty(&self) -> bool {
        self.hunks.is_empty()
    }

    /// Checks every hunk against a file of `original_length` lines.
    pub fn check_bounds(&self, original_length: usize) -> Result<(), PatchError> {
        for (i, h) in self.hunks.iter().enumerate() {
            h.check_bounds(original_length)
                .map_err(|reason| PatchError::Apply {
                    hunk_index: i,
                    reason,
                })?;
        }
        Ok(())
    }

    /// Net change in line count after application.
    pub fn length_delta(&self) -> isize {
        self.hunks
            .iter()
            .map(|h| h.replacement.len() as isize - h.span() as isize)
            .sum()
    }

    /// Inclusive 1-based ranges each hunk's replacement occupies after
    /// application. Empty replacements yield `None`.
    pub fn post_positions(&self) -> Vec<Option<(usize, usize)>> {
        let mut offset: isize = 0;
        self.hunks
            .iter()
            .map(|h| {
                let new_start = (h.start as isize + offset) as usize;
                offset += h.replacement.len() as isize - h.span() as isize;
                if h.replacement.is_empty() {
                    None
                } else {
                    Some((new_start, new_start + h.replacement.len() - 1))
                }
            })
            .collect()
    }
}

impl fmt::Display for LineDiffPatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_patch(self))
    }
}

impl Serialize for LineDiffPatch {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&serialize_patch(self))
    }
}

impl<'de> Deserialize<'de> for LineDiffPatch {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_patch_unbounded(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses canonical patch text and checks it against a file of
/// `original_length` lines.
pub fn parse_patch(text: &str, original_length: usize) -> Result<LineDiffPatch, PatchError> {
    let patch = parse_patch_unbounded(text)?;
    for (i, h) in patch.hunks.iter().enumerate() {
        h.check_bounds(original_length)
            .map_err(|reason| PatchError::parse(0, format!("hunk {i}: {reason}")))?;
    }
    Ok(patch)
}

/// Parses canonical patch text without a file-length check. Line numbers
/// are validated later, when the patch is applied.
pub fn parse_patch_unbounded(text: &str) -> Result<LineDiffPatch, PatchError> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    // A single trailing newline is tolerated.
    if lines.last() == Some(&"") {
        lines.pop();
    }

    let mut hunks: Vec<Hunk> = Vec::new();
    for (idx, line) in lines.iter().enumerate() {
        let line_no = idx + 1;
        if let Some(body) = line.strip_prefix('+') {
            match hunks.last_mut() {
                Some(h) => h.replacement.push(body.to_owned()),
                None => return Err(PatchError::parse(line_no, "body line before any hunk header")),
            }
        } else if line.starts_with("@@") {
            let (start, end) = parse_header(line).map_err(|r| PatchError::parse(line_no, r))?;
            hunks.push(Hunk::new(start, end, Vec::new()));
        } else {
            return Err(PatchError::parse(
                line_no,
                format!("line is neither a header nor a '+' body line: {line:?}"),
            ));
        }
    }
    LineDiffPatch::new(hunks)
}

fn parse_header(line: &str) -> Result<(usize, usize), String> {
    let inner = line
        .strip_prefix("@@ ")
        .and_then(|s| s.strip_suffix(" @@"))
        .ok_or_else(|| format!("malformed header {line:?}"))?;
    let mut parts = inner.split(' ');
    let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(format!("header needs exactly two numbers: {line:?}"));
    };
    Ok((parse_number(a)?, parse_number(b)?))
}

fn parse_number(s: &str) -> Result<usize, String> {
    let canonical = !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_digit())
        && !(s.len() > 1 && s.starts_with('0'));
    if !canonical {
        return Err(format!("not a canonical decimal line number: {s:?}"));
    }
    s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"))
}

pub fn serialize_patch(patch: &LineDiffPatch) -> String {
    let mut out: Vec<String> = Vec::new();
    for h in &patch.hunks {
        out.push(format!("@@ {} {} @@", h.start, h.end));
        out.extend(h.replacement.iter().map(|l| format!("+{l}")));
    }
    out.join("\n")
}

/// Wraps canonical patch text in the response fences.
pub fn fence_patch(patch: &LineDiffPatch) -> String {
    let body = serialize_patch(patch);
    if body.is_empty() {
        format!("{PATCH_OPEN}\n{PATCH_CLOSE}")
    } else {
        format!("{PATCH_OPEN}\n{body}\n{PATCH_CLOSE}")
    }
}

/// Returns the text of the first fenced block, or `None` when no complete
/// block exists.
pub fn extract_fenced(response: &str) -> Option<String> {
    let mut inside = false;
    let mut body: Vec<&str> = Vec::new();
    for line in response.lines() {
        let trimmed = line.trim_end();
        if !inside {
            if trimmed == PATCH_OPEN {
                inside = true;
            }
        } else if trimmed == PATCH_CLOSE {
            return Some(body.join("\n"));
        } else {
            body.push(line);
        }
    }
    None
}

/// Applies `patch` to `file`, interpreting every hunk in original
/// coordinates. The input is left untouched.
pub fn apply_patch(file: &SourceFile, patch: &LineDiffPatch) -> Result<SourceFile, PatchError> {
    patch.check_bounds(file.len())?;
    let mut lines = file.lines.clone();
    // Splice from the bottom so earlier ranges keep their original positions.
    for h in patch.hunks.iter().rev() {
        let lo = h.start - 1;
        let hi = h.end;
        lines.splice(lo..hi, h.replacement.iter().cloned());
    }
    Ok(SourceFile {
        path: file.path.clone(),
        lines,
    })
}

/// Byte equality of the rendered contents, ignoring at most one trailing
/// newline per side.
pub fn exact_match(candidate: &SourceFile, ground_truth: &SourceFile) -> bool {
    let a = candidate.content();
    let b = ground_truth.content();
    a.strip_suffix('\n').unwrap_or(&a) == b.strip_suffix('\n').unwrap_or(&b)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectMode {
    #[default]
    Strict,
    Content,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedStatus {
    AppliedAtLines,
    AppliedByContent,
    NotDetected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedVerdict {
    pub status: AppliedStatus,
    /// Inclusive 1-based line range in the committed file.
    pub matched_lines: Option<(usize, usize)>,
}

impl AppliedVerdict {
    fn not_detected() -> Self {
        AppliedVerdict {
            status: AppliedStatus::NotDetected,
            matched_lines: None,
        }
    }

    pub fn is_applied(&self) -> bool {
        self.status != AppliedStatus::NotDetected
    }
}

/// Decides whether `patch` shows up in a committed version of the file.
///
/// Strict mode looks for each replacement at the line positions it would
/// occupy after application. Content mode falls back to finding every
/// non-empty replacement as a contiguous run anywhere in the file.
pub fn detect_applied(committed: &SourceFile, patch: &LineDiffPatch, mode: DetectMode) -> AppliedVerdict {
    let positions = patch.post_positions();
    let at_lines = patch.hunks.iter().zip(&positions).all(|(h, pos)| match pos {
        None => true,
        Some((lo, hi)) => {
            *hi <= committed.len() && committed.lines[lo - 1..*hi] == h.replacement[..]
        }
    });
    if at_lines {
        let occupied: Vec<(usize, usize)> = positions.iter().flatten().copied().collect();
        let matched_lines = match (occupied.first(), occupied.last()) {
            (Some(first), Some(last)) => Some((first.0, last.1)),
            _ => None,
        };
        return AppliedVerdict {
            status: AppliedStatus::AppliedAtLines,
            matched_lines,
        };
    }
    if mode == DetectMode::Strict {
        return AppliedVerdict::not_detected();
    }

    let mut first_match = None;
    let mut any = false;
    for h in patch.hunks.iter().filter(|h| !h.replacement.is_empty()) {
        any = true;
        match find_run(&committed.lines, &h.replacement) {
            Some(at) => {
                first_match.get_or_insert((at + 1, at + h.replacement.len()));
            }
            None => return AppliedVerdict::not_detected(),
        }
    }
    if !any {
        return AppliedVerdict::not_detected();
    }
    AppliedVerdict {
        status: AppliedStatus::AppliedByContent,
        matched_lines: first_match,
    }
}

fn find_run(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Computes a patch turning `original` into `target`.
pub fn diff_files(original: &SourceFile, target: &SourceFile) -> LineDiffPatch {
    use similar::{capture_diff_slices, Algorithm, DiffOp};

    let ops = capture_diff_slices(Algorithm::Myers, &original.lines, &target.lines);
    let mut hunks: Vec<Hunk> = Vec::new();
    for op in ops {
        let (old_index, old_len, new_index, new_len) = match op {
            DiffOp::Equal { .. } => continue,
            DiffOp::Delete {
                old_index,
                old_len,
                new_index,
            } => (old_index, old_len, new_index, 0),
            DiffOp::Insert {
                old_index,
                new_index,
                new_len,
            } => (old_index, 0, new_index, new_len),
            DiffOp::Replace {
                old_index,
                old_len,
                new_index,
                new_len,
            } => (old_index, old_len, new_index, new_len),
        };
        let start = old_index + 1;
        let end = old_index + old_len;
        let replacement = target.lines[new_index..new_index + new_len].to_vec();
        // Adjacent edit ops collapse into one hunk.
        match hunks.last_mut() {
            Some(prev) if prev.end + 1 == start || prev.end >= start => {
                prev.end = end.max(prev.end);
                prev.replacement.extend(replacement);
            }
            _ => hunks.push(Hunk::new(start, end, replacement)),
        }
    }
    LineDiffPatch { hunks }
}
