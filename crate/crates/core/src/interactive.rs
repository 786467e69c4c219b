//! Line-oriented conversation loop used by `convkg converse`.

use std::io::{self, BufRead, Write};

use crate::conversation::Conversation;
use crate::pipeline::{Pipeline, RunRecord, TurnOverrides};

const SALIENT_SHOWN: usize = 5;

/// Reads queries from `input` until EOF or `exit`, answering each on `out`.
///
/// Blank lines re-prompt. A failed turn is reported and the loop continues
/// with the conversation state unchanged.
pub fn converse<R: BufRead, W: Write>(
    pipeline: &Pipeline,
    topic: &str,
    overrides: &TurnOverrides,
    input: R,
    mut out: W,
) -> io::Result<Vec<RunRecord>> {
    let mut conversation = Conversation::new(topic);
    let mut records = Vec::new();
    let mut lines = input.lines();
    loop {
        write!(out, "[{}]> ", conversation.next_index())?;
        out.flush()?;
        let Some(line) = lines.next() else {
            writeln!(out)?;
            break;
        };
        let line = line?;
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        if query.eq_ignore_ascii_case("exit") {
            break;
        }
        match pipeline.run_turn(&mut conversation, query, overrides) {
            Ok(result) => {
                let c = &result.composition;
                writeln!(out, "rewritten: {}", result.state.rewritten_query)?;
                writeln!(out, "method:    {}", c.method)?;
                for id in &c.selected {
                    let text = c.passages.iter().find(|p| &p.id == id).map_or("", |p| p.text.as_str());
                    writeln!(out, "passage:   {id} {text}")?;
                }
                let salient: Vec<String> =
                    c.salient_entities.iter().take(SALIENT_SHOWN).map(|(e, s)| format!("{e} ({s:.4})")).collect();
                if !salient.is_empty() {
                    writeln!(out, "entities:  {}", salient.join(", "))?;
                }
                for f in &c.fallbacks {
                    writeln!(out, "fallback:  {f}")?;
                }
                writeln!(out, "answer:    {}", c.answer)?;
                records.push(result.record);
            }
            Err(e) => writeln!(out, "error: {e}")?,
        }
    }
    Ok(records)
}
