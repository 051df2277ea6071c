//! Annotation prompt templates and the response formats requested from the
//! model.

use crate::AnnotateError;

pub const DESCRIBE_PROMPT: &str =
    "Generate a concise one-sentence description of the content and layout of the provided webpage screenshot.";

pub const HTML_RENDER_TEMPLATE: &str = "Your task is to convert the simplified HTML input provided by the user into a fully renderable, standard HTML format while preserving all original information intact. Enhance the HTML with appropriate styling to make it visually appealing and resemble a typical, functional website. Return only the HTML code without any additional text. HTML: {html}. Ensure that the returned HTML code includes the ID [{id}] (mentioned in {context}) with the same element exactly as provided.";

pub const NER_TEMPLATE: &str = "You are a helpful AI assistant proficient in Named Entity Recognition (NER). Analyze the following sentence and provide the most comprehensive NER results for each noun in JSON format, using greedy matching. Labels should be specific contextual descriptions of the entity. Sentence: {instruction}.";

pub const ALTERNATIVES_TEMPLATE: &str = "You are an AI assistant skilled in generating alternatives. Given a sentence and a list of named entities, generate five alternative texts for each entity that align with its semantic label while being entirely different in meaning from the original text. Ensure the alternatives fit naturally and consistently within the sentence, maintaining the original representation (e.g., text remains text, emojis remain emojis). \nSentence: {instruction}, Named Entities: {ners}. \n";

pub const REWRITE_TEMPLATE: &str = "You are an AI assistant specialized in rewriting user queries. Your task is to refine the following five queries to ensure they are consistent, natural, concise, logical, and human-like. Rewrite each query by varying the wording, structure, and style to ensure diversity in expression. Your response should align with real-world common sense and factual accuracy.";

pub const NER_FORMAT: &str =
    "Respond with a JSON array of objects with the keys \"surface\" (exact text from the sentence) and \"label\".";

pub const ALTERNATIVES_FORMAT: &str =
    "Respond with a JSON object mapping each entity surface to an array of exactly five alternatives.";

pub const REWRITE_FORMAT: &str = "Respond with a JSON array of exactly five rewritten queries, in input order.";

/// The three silver-generation stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Describe,
    Ner,
    Alternatives,
    Rewrite,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Describe => "describe",
            Stage::Ner => "ner",
            Stage::Alternatives => "alternatives",
            Stage::Rewrite => "rewrite",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// HTML completion prompt with `html`, `id` and `context` substituted.
pub fn build_html_render_prompt(html: &str, id: &str, context: &str) -> Result<String, AnnotateError> {
    if html.trim().is_empty() {
        return Err(AnnotateError::Precondition("html must not be empty".into()));
    }
    // Substitute in one pass so placeholder-like text in the inputs stays put.
    let mut out = String::with_capacity(HTML_RENDER_TEMPLATE.len() + html.len() + id.len() + context.len());
    let mut rest = HTML_RENDER_TEMPLATE;
    while let Some(start) = rest.find('{') {
        let end = start + rest[start..].find('}').expect("template braces are balanced");
        out.push_str(&rest[..start]);
        out.push_str(match &rest[start + 1..end] {
            "html" => html,
            "id" => id,
            "context" => context,
            other => unreachable!("unknown placeholder {other}"),
        });
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn ner_prompt(instruction: &str) -> String {
    format!("{}\n{NER_FORMAT}", NER_TEMPLATE.replacen("{instruction}", instruction, 1))
}

pub fn alternatives_prompt(instruction: &str, ners_json: &str) -> String {
    let body = ALTERNATIVES_TEMPLATE
        .replacen("{instruction}", instruction, 1)
        .replacen("{ners}", ners_json, 1);
    format!("{body}{ALTERNATIVES_FORMAT}")
}

pub fn rewrite_prompt(queries: &[String]) -> String {
    let mut out = format!("{REWRITE_TEMPLATE}\nQueries:\n");
    for (k, q) in queries.iter().enumerate() {
        out.push_str(&format!("{}. {q}\n", k + 1));
    }
    out.push_str(REWRITE_FORMAT);
    out
}

/// Recovers the instruction from a prompt built by [`ner_prompt`].
pub(crate) fn parse_ner_prompt(prompt: &str) -> Option<&str> {
    let (head, tail) = NER_TEMPLATE.split_once("{instruction}")?;
    prompt.strip_prefix(head)?.strip_suffix(&format!("{tail}\n{NER_FORMAT}"))
}

/// Recovers instruction and entity JSON from an [`alternatives_prompt`].
pub(crate) fn parse_alternatives_prompt(prompt: &str) -> Option<(&str, &str)> {
    let (head, rest) = ALTERNATIVES_TEMPLATE.split_once("{instruction}")?;
    let (mid, tail) = rest.split_once("{ners}")?;
    let body = prompt
        .strip_prefix(head)?
        .strip_suffix(ALTERNATIVES_FORMAT)?
        .strip_suffix(tail)?;
    body.rsplit_once(mid)
}

/// Recovers the numbered queries from a [`rewrite_prompt`].
pub(crate) fn parse_rewrite_prompt(prompt: &str) -> Option<Vec<&str>> {
    let body = prompt
        .strip_prefix(REWRITE_TEMPLATE)?
        .strip_prefix("\nQueries:\n")?
        .strip_suffix(REWRITE_FORMAT)?;
    body.lines()
        .enumerate()
        .map(|(k, line)| line.strip_prefix(&format!("{}. ", k + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn html_prompt_substitutes_fields() {
        let p = build_html_render_prompt("<div id='x'/>", "x", "").unwrap();
        assert!(p.contains("includes the ID [x]"));
        assert!(p.contains("HTML: <div id='x'/>."));
        assert!(p.contains("(mentioned in )"));
        assert!(build_html_render_prompt("  ", "x", "c").is_err());
        let p = build_html_render_prompt("{id}", "y", "{html}").unwrap();
        assert!(p.contains("HTML: {id}.") && p.contains("(mentioned in {html})"));
    }

    #[test]
    fn stage_prompts_round_trip() {
        let q = "Buy a t-shirt for children on Amazon.";
        assert_eq!(parse_ner_prompt(&ner_prompt(q)), Some(q));
        let ners = r#"[{"surface":"Amazon","label":"platform"}]"#;
        assert_eq!(parse_alternatives_prompt(&alternatives_prompt(q, ners)), Some((q, ners)));
        let qs: Vec<String> = (1..=5).map(|k| format!("query {k}")).collect();
        let prompt = rewrite_prompt(&qs);
        let parsed = parse_rewrite_prompt(&prompt).unwrap();
        assert_eq!(parsed, qs.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
