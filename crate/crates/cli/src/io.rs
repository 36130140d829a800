use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::CliError;

/// `-` reads stdin.
pub fn open_input(path: &Path) -> Result<Box<dyn BufRead>, CliError> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(io::stdin().lock())));
    }
    let f = File::open(path).map_err(|e| CliError::other(format!("{}: {e}", path.display())))?;
    Ok(Box::new(BufReader::new(f)))
}

/// `None` or `-` writes stdout.
pub fn open_output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) if p.as_path() != Path::new("-") => {
            let f =
                File::create(p).map_err(|e| CliError::other(format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        _ => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

/// Read QA JSONL, dropping a `decision` field so filter output can be piped
/// straight back in. Line numbers are preserved.
pub fn read_qa_text(path: &Path) -> Result<String, CliError> {
    let mut text = String::new();
    open_input(path)?.read_to_string(&mut text)?;
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        match serde_json::from_str::<serde_json::Value>(line) {
            Ok(serde_json::Value::Object(mut m)) if m.contains_key("decision") => {
                m.remove("decision");
                out.push_str(&serde_json::Value::Object(m).to_string());
            }
            _ => out.push_str(line),
        }
        out.push('\n');
    }
    Ok(out)
}
