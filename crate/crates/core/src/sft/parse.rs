//! Parsers for free-form model output.

/// Lines with list markers ("1.", "2)", "-", "*", "Q3:") stripped; blank lines dropped.
pub fn parse_numbered_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(strip_list_marker)
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim_start();
    if let Some(rest) = line.strip_prefix(['-', '*', '•']) {
        return rest;
    }
    let body = line
        .strip_prefix('Q')
        .or_else(|| line.strip_prefix('q'))
        .filter(|r| r.starts_with(|c: char| c.is_ascii_digit()))
        .unwrap_or(line);
    let digits = body.len() - body.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        if let Some(rest) = body[digits..].strip_prefix(['.', ')', ':']) {
            return rest;
        }
    }
    line
}

/// A yes/no judgement from a judge model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

/// First yes/no token in the reply, tolerating a "VERDICT:"-style prefix.
pub fn parse_verdict(text: &str) -> Verdict {
    for raw in text.split(|c: char| c.is_whitespace() || c == ':') {
        let word = raw
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_ascii_lowercase();
        match word.as_str() {
            "yes" => return Verdict::Yes,
            "no" => return Verdict::No,
            "" | "verdict" | "answer" => continue,
            _ => return Verdict::Unparseable,
        }
    }
    Verdict::Unparseable
}

/// Parse an extraction reply into (evidence, relevance 0..=10).
///
/// Accepts the `EVIDENCE: ... / RELEVANCE: n` form or a JSON object with
/// `evidence` and `relevance` keys. Relevance outside 0..=10 is clamped.
pub fn parse_extraction(text: &str) -> Option<(String, f64)> {
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(text.trim()) {
        let relevance = value.get("relevance").and_then(|r| {
            r.as_f64()
                .or_else(|| r.as_str().and_then(|s| s.trim().parse().ok()))
        })?;
        let evidence = value
            .get("evidence")
            .and_then(|e| e.as_str())
            .unwrap_or_default();
        return finish(evidence, relevance);
    }
    let upper = text.to_ascii_uppercase();
    let rel_at = upper.rfind("RELEVANCE:")?;
    let relevance: f64 = text[rel_at + "RELEVANCE:".len()..]
        .split_whitespace()
        .next()?
        .trim_end_matches(|c: char| !c.is_ascii_digit())
        .split('/')
        .next()?
        .parse()
        .ok()?;
    let evidence = match upper[..rel_at].find("EVIDENCE:") {
        Some(ev_at) => &text[ev_at + "EVIDENCE:".len()..rel_at],
        None => "",
    };
    finish(evidence, relevance)
}

fn finish(evidence: &str, relevance: f64) -> Option<(String, f64)> {
    if !relevance.is_finite() {
        return None;
    }
    let evidence = evidence.trim();
    let evidence = if evidence.eq_ignore_ascii_case("none") { "" } else { evidence };
    Some((evidence.to_string(), relevance.clamp(0.0, 10.0)))
}

/// Lines of the form `<n>: <rest>` keyed by 1-based number.
pub(crate) fn parse_indexed_lines(text: &str) -> Vec<(usize, String)> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
            if digits == 0 {
                return None;
            }
            let n: usize = line[..digits].parse().ok()?;
            let rest = line[digits..].strip_prefix([':', '.', ')'])?;
            Some((n, rest.trim().to_string()))
        })
        .collect()
}
