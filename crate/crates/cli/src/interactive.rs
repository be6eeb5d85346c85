//! Terminal prompts for Block II corrections.

use std::io::{BufRead, Write};

use fair_embed::augment::{validate_correction, AugmentationResult, Correction, CorrectionSource};
use fair_embed::SensitiveLexicon;

/// Asks for one text per group plus a neutral text. An empty answer skips
/// the candidate; a rejected correction is asked for again.
pub struct TerminalCorrections<R, W> {
    input: R,
    output: W,
    lex: SensitiveLexicon,
}

impl<R: BufRead, W: Write> TerminalCorrections<R, W> {
    pub fn new(input: R, output: W, lex: SensitiveLexicon) -> Self {
        Self { input, output, lex }
    }

    fn ask(&mut self, label: &str, current: &str) -> Option<String> {
        writeln!(self.output, "  {label} (was: {current})").ok()?;
        write!(self.output, "  > ").ok()?;
        self.output.flush().ok()?;
        let mut line = String::new();
        if self.input.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim();
        (!line.is_empty()).then(|| line.to_string())
    }

    fn show(&mut self, c: &AugmentationResult, round: u32) {
        let _ = writeln!(
            self.output,
            "\nround {round}: {} (confidence {:.2})",
            c.content_id, c.confidence
        );
        if let Some(src) = &c.source_text {
            let _ = writeln!(self.output, "  source: {src}");
        }
        for (attr, text) in &c.group_texts {
            let _ = writeln!(self.output, "  {attr}: {text}  [{}]", self.lex.polarity(text));
        }
        let _ = writeln!(
            self.output,
            "  neutral: {}  [{}]",
            c.neutral_text,
            self.lex.polarity(&c.neutral_text)
        );
        let _ = writeln!(self.output, "enter corrected texts, or an empty line to skip");
    }
}

impl<R: BufRead, W: Write> CorrectionSource for TerminalCorrections<R, W> {
    fn correction(&mut self, candidate: &AugmentationResult, round: u32) -> Option<Correction> {
        self.show(candidate, round);
        loop {
            let mut groups = indexmap::IndexMap::new();
            for attr in self.lex.attributes().to_vec() {
                let current = candidate.group_texts.get(&attr).map_or("", String::as_str);
                groups.insert(attr.clone(), self.ask(&attr, current)?);
            }
            let neutral = self.ask("neutral", &candidate.neutral_text)?;
            let correction = Correction { neutral, groups };
            match validate_correction(&correction, &self.lex) {
                Ok(()) => return Some(correction),
                Err(e) => {
                    let _ = writeln!(self.output, "  {e}; try again");
                }
            }
        }
    }
}
