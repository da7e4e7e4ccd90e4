//! Shared plumbing for the acceptance suite: locating benchmark data,
//! building run configs the same way the command line does, and printing one
//! verdict line per criterion.

use std::io::Write;
use std::path::{Path, PathBuf};

use graphprompt::config::{RunConfig, DATA_DIR_ENV};
use graphprompt::eval::Level;
use graphprompt::graph::GraphCollection;

/// Directories searched for benchmark datasets, in order: the
/// `GRAPHPROMPT_DATA_DIR` environment variable, then `data/` at the
/// workspace root.
pub fn data_roots() -> Vec<PathBuf> {
    let mut roots = Vec::new();
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        roots.push(PathBuf::from(dir));
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let workspace = manifest.parent().and_then(Path::parent).unwrap_or(manifest);
    roots.push(workspace.join("data"));
    roots
}

/// Directory holding `<name>_A.txt`, either directly under a root or one
/// level down in `<root>/<name>/`.
pub fn locate_dataset(name: &str) -> Result<PathBuf, String> {
    let roots = data_roots();
    for root in &roots {
        for dir in [root.join(name), root.clone()] {
            if dir.join(format!("{name}_A.txt")).is_file() {
                return Ok(dir);
            }
        }
    }
    let searched: Vec<String> = roots.iter().map(|r| r.display().to_string()).collect();
    Err(format!(
        "dataset {name} not found (searched {}; set {DATA_DIR_ENV} to a directory holding {name}/{name}_A.txt)",
        searched.join(", ")
    ))
}

/// Default run config for a dataset and protocol, resolved as the command
/// line would resolve it.
pub fn run_config(name: &str, level: Level, k: usize) -> Result<RunConfig, String> {
    let dir = locate_dataset(name)?;
    let text = format!(
        "[dataset]\nname = {name:?}\npath = {path:?}\n\n[protocol]\nlevel = {level:?}\nk = {k}\n",
        path = dir.display().to_string(),
        level = level.as_str(),
    );
    RunConfig::from_toml(&text)
        .and_then(RunConfig::resolve)
        .map_err(|e| e.to_string())
}

pub fn load_dataset(name: &str) -> Result<GraphCollection, String> {
    let cfg = run_config(name, Level::Graph, 1)?;
    cfg.load_collection().map_err(|e| format!("loading {name}: {e}"))
}

/// Outcome of one criterion: `Ok(detail)` passes, `Err(detail)` fails.
pub type Outcome = Result<String, String>;

/// Formats the verdict line of criterion `id`.
pub fn verdict_line(id: u32, title: &str, outcome: &Outcome) -> String {
    match outcome {
        Ok(detail) => format!("PASS [{id:>2}] {title}: {detail}"),
        Err(detail) => format!("FAIL [{id:>2}] {title}: {detail}"),
    }
}

/// Prints the verdict on a line of its own straight to stdout (test capture
/// does not swallow it) and panics on failure so the harness records it too.
pub fn report(id: u32, title: &str, outcome: Outcome) {
    let line = verdict_line(id, title, &outcome);
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "\n{line}");
    let _ = out.flush();
    if outcome.is_err() {
        panic!("acceptance criterion {id} failed");
    }
}

/// `Ok` when `cond` holds, otherwise `Err`, with the same detail text.
pub fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_format() {
        assert_eq!(verdict_line(3, "x", &Ok("fine".into())), "PASS [ 3] x: fine");
        assert_eq!(verdict_line(10, "y", &Err("bad".into())), "FAIL [10] y: bad");
    }

    #[test]
    fn missing_dataset_names_the_variable() {
        let err = locate_dataset("NO_SUCH_SET_4711").unwrap_err();
        assert!(err.contains(DATA_DIR_ENV) && err.contains("NO_SUCH_SET_4711"));
    }
}
