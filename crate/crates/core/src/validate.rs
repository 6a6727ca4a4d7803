//! Lint, test and build checks run as subprocesses against a workspace.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use globset::Glob;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckCategory {
    Lint,
    Test,
    Build,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorCheck {
    pub name: String,
    pub category: CheckCategory,
    pub argv: Vec<String>,
    /// Relative paths resolve against the workspace.
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    pub timeout_s: u64,
    #[serde(default = "default_output_cap")]
    pub output_cap_bytes: usize,
}

fn default_workdir() -> PathBuf {
    PathBuf::from(".")
}

fn default_output_cap() -> usize {
    16 * 1024
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckConfigError {
    #[error("check {0:?} has an empty argv")]
    EmptyArgv(String),
    #[error("check {0:?} needs a positive timeout")]
    ZeroTimeout(String),
    #[error("check {name:?} has an invalid glob: {reason}")]
    BadGlob { name: String, reason: String },
}

impl ValidatorCheck {
    pub fn validate(&self) -> Result<(), CheckConfigError> {
        if self.argv.is_empty() {
            return Err(CheckConfigError::EmptyArgv(self.name.clone()));
        }
        if self.timeout_s == 0 {
            return Err(CheckConfigError::ZeroTimeout(self.name.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Timeout,
    SpawnError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub category: CheckCategory,
    pub status: CheckStatus,
    pub exit_code: Option<i32>,
    pub duration_ms: u64,
    pub stdout_excerpt: String,
    pub stderr_excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub per_check: Vec<CheckResult>,
    pub all_passed: bool,
}

impl ValidationReport {
    pub fn from_results(per_check: Vec<CheckResult>) -> Self {
        let all_passed = per_check.iter().all(|c| c.status == CheckStatus::Pass);
        ValidationReport { per_check, all_passed }
    }
}

/// Runs `checks` one after another in declaration order.
pub fn run_validators(checks: &[ValidatorCheck], workspace: &Path) -> ValidationReport {
    ValidationReport::from_results(checks.iter().map(|c| run_check(c, workspace)).collect())
}

/// Whether a suggestion may be shown: every check passed, or a reviewer
/// approved it anyway.
pub fn gate_shown(report: &ValidationReport, reviewer_approved: bool) -> bool {
    report.all_passed || reviewer_approved
}

fn run_check(check: &ValidatorCheck, workspace: &Path) -> CheckResult {
    let started = Instant::now();
    let mut result = CheckResult {
        name: check.name.clone(),
        category: check.category,
        status: CheckStatus::SpawnError,
        exit_code: None,
        duration_ms: 0,
        stdout_excerpt: String::new(),
        stderr_excerpt: String::new(),
    };
    if let Err(e) = check.validate() {
        result.stderr_excerpt = e.to_string();
        return result;
    }

    let workdir = if check.workdir.is_absolute() {
        check.workdir.clone()
    } else {
        workspace.join(&check.workdir)
    };
    let mut cmd = Command::new(&check.argv[0]);
    cmd.args(&check.argv[1..])
        .current_dir(&workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        // Own process group, so a timeout can take down grandchildren too.
        cmd.process_group(0);
    }

    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            result.stderr_excerpt = format!("failed to spawn {:?}: {e}", check.argv[0]);
            result.duration_ms = started.elapsed().as_millis() as u64;
            return result;
        }
    };

    let cap = check.output_cap_bytes;
    let stdout = child.stdout.take().map(|s| drain(s, cap));
    let stderr = child.stderr.take().map(|s| drain(s, cap));

    let deadline = started + Duration::from_secs(check.timeout_s);
    let waited = wait_until(&mut child, deadline);
    let (status, exit_code) = match waited {
        Some(exit) => (
            if exit.success() { CheckStatus::Pass } else { CheckStatus::Fail },
            exit.code(),
        ),
        None => {
            kill_tree(&mut child);
            (CheckStatus::Timeout, None)
        }
    };

    result.status = status;
    result.exit_code = exit_code;
    result.stdout_excerpt = stdout.map(join_reader).unwrap_or_default();
    result.stderr_excerpt = stderr.map(join_reader).unwrap_or_default();
    result.duration_ms = started.elapsed().as_millis() as u64;
    result
}

fn wait_until(child: &mut Child, deadline: Instant) -> Option<ExitStatus> {
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Some(status),
            Ok(None) => {}
            Err(_) => return None,
        }
        let now = Instant::now();
        if now >= deadline {
            return None;
        }
        thread::sleep((deadline - now).min(Duration::from_millis(10)));
    }
}

fn kill_tree(child: &mut Child) {
    #[cfg(unix)]
    {
        let pgid = child.id() as libc::pid_t;
        // SAFETY: signalling a process group we created; no memory is touched.
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// Reads the stream to EOF, keeping at most `cap` bytes.
fn drain<R: Read + Send + 'static>(mut reader: R, cap: usize) -> JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        kept
    })
}

fn join_reader(handle: JoinHandle<Vec<u8>>) -> String {
    let bytes = handle.join().unwrap_or_default();
    match String::from_utf8(bytes) {
        Ok(s) => s,
        Err(e) => {
            // Drop a multi-byte character cut by the cap.
            let valid = e.utf8_error().valid_up_to();
            let mut bytes = e.into_bytes();
            bytes.truncate(valid);
            String::from_utf8(bytes).unwrap_or_default()
        }
    }
}

/// A configured check together with the files it applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub name: String,
    pub category: CheckCategory,
    /// `{file}` in any token is replaced with the patched file's path.
    pub argv: Vec<String>,
    #[serde(default = "default_glob")]
    pub glob: String,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    pub timeout_s: u64,
    #[serde(default = "default_output_cap")]
    pub output_cap_bytes: usize,
}

fn default_glob() -> String {
    "*".to_owned()
}

/// Picks the checks whose glob matches `file_path`, in configuration order.
pub fn select_checks(config: &[CheckConfig], file_path: &str) -> Result<Vec<ValidatorCheck>, CheckConfigError> {
    let mut out = Vec::new();
    for c in config {
        let matcher = Glob::new(&c.glob)
            .map_err(|e| CheckConfigError::BadGlob {
                name: c.name.clone(),
                reason: e.to_string(),
            })?
            .compile_matcher();
        let file_name = Path::new(file_path)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !(matcher.is_match(file_path) || matcher.is_match(&file_name)) {
            continue;
        }
        let check = ValidatorCheck {
            name: c.name.clone(),
            category: c.category,
            argv: c.argv.iter().map(|a| a.replace("{file}", file_path)).collect(),
            workdir: c.workdir.clone(),
            timeout_s: c.timeout_s,
            output_cap_bytes: c.output_cap_bytes,
        };
        check.validate()?;
        out.push(check);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(name: &str, script: &str, timeout_s: u64) -> ValidatorCheck {
        ValidatorCheck {
            name: name.into(),
            category: CheckCategory::Test,
            argv: vec!["sh".into(), "-c".into(), script.into()],
            workdir: PathBuf::from("."),
            timeout_s,
            output_cap_bytes: 64,
        }
    }

    #[test]
    fn exit_codes_drive_status() {
        let ws = tempfile::tempdir().unwrap();
        let report = run_validators(&[sh("ok", "exit 0", 5)], ws.path());
        assert!(report.all_passed);

        let report = run_validators(&[sh("ok", "exit 0", 5), sh("bad", "echo oops >&2; exit 3", 5)], ws.path());
        assert!(!report.all_passed);
        assert_eq!(report.per_check[0].name, "ok");
        assert_eq!(report.per_check[1].status, CheckStatus::Fail);
        assert_eq!(report.per_check[1].exit_code, Some(3));
        assert_eq!(report.per_check[1].stderr_excerpt, "oops\n");
    }

    #[test]
    fn timeout_kills_the_process_group() {
        let ws = tempfile::tempdir().unwrap();
        let marker = ws.path().join("survived");
        let script = format!("(sleep 2; touch {}) & sleep 30", marker.display());
        let started = Instant::now();
        let report = run_validators(&[sh("slow", &script, 1)], ws.path());
        assert_eq!(report.per_check[0].status, CheckStatus::Timeout);
        assert!(!report.all_passed);
        assert!(started.elapsed() < Duration::from_secs(5));
        thread::sleep(Duration::from_millis(2500));
        assert!(!marker.exists(), "background child outlived the timeout");
    }

    #[test]
    fn output_is_capped() {
        let ws = tempfile::tempdir().unwrap();
        let report = run_validators(&[sh("noisy", "yes x | head -c 100000", 5)], ws.path());
        assert_eq!(report.per_check[0].status, CheckStatus::Pass);
        assert_eq!(report.per_check[0].stdout_excerpt.len(), 64);
    }

    #[test]
    fn spawn_failures_and_bad_checks() {
        let ws = tempfile::tempdir().unwrap();
        let mut missing = sh("missing", "", 5);
        missing.argv = vec!["/definitely/not/a/binary".into()];
        let mut empty = sh("empty", "", 5);
        empty.argv.clear();
        let report = run_validators(&[missing, empty], ws.path());
        assert!(report.per_check.iter().all(|c| c.status == CheckStatus::SpawnError));
    }

    #[test]
    fn runs_in_the_workspace() {
        let ws = tempfile::tempdir().unwrap();
        std::fs::write(ws.path().join("patched.txt"), "x").unwrap();
        let report = run_validators(&[sh("exists", "test -f patched.txt", 5)], ws.path());
        assert!(report.all_passed);
    }

    #[test]
    fn signal_termination_is_a_failure() {
        let ws = tempfile::tempdir().unwrap();
        let report = run_validators(&[sh("sig", "kill -TERM $$", 5)], ws.path());
        assert_eq!(report.per_check[0].status, CheckStatus::Fail);
        assert_eq!(report.per_check[0].exit_code, None);
    }

    #[test]
    fn gate_truth_table() {
        let passed = ValidationReport::from_results(vec![]);
        let failed = ValidationReport {
            per_check: vec![],
            all_passed: false,
        };
        assert!(gate_shown(&passed, false));
        assert!(gate_shown(&failed, true));
        assert!(!gate_shown(&failed, false));
        assert!(gate_shown(&passed, true));
    }

    #[test]
    fn selection_by_glob() {
        let cfg = vec![
            CheckConfig {
                name: "flake8".into(),
                category: CheckCategory::Lint,
                argv: vec!["flake8".into(), "{file}".into()],
                glob: "*.py".into(),
                workdir: PathBuf::from("."),
                timeout_s: 30,
                output_cap_bytes: 1024,
            },
            CheckConfig {
                name: "always".into(),
                category: CheckCategory::Build,
                argv: vec!["true".into()],
                glob: "*".into(),
                workdir: PathBuf::from("."),
                timeout_s: 30,
                output_cap_bytes: 1024,
            },
        ];
        let py = select_checks(&cfg, "pkg/mod.py").unwrap();
        assert_eq!(py.len(), 2);
        assert_eq!(py[0].argv, vec!["flake8", "pkg/mod.py"]);
        let rs = select_checks(&cfg, "src/lib.rs").unwrap();
        assert_eq!(rs.len(), 1);
        assert_eq!(rs[0].name, "always");
    }
}
