//! Sandboxed execution behind the `code_interpreter` tool.
//!
//! Snippets run in a child interpreter with an address-space cap, a wall
//! clock timeout, and (best effort) no network. Output is captured from
//! both streams by reader threads so a chatty child cannot deadlock on a
//! full pipe, then truncated to a fixed budget.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::ToolError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SandboxConfig {
    pub interpreter: PathBuf,
    pub timeout_secs: u64,
    pub memory_limit_bytes: u64,
    pub max_output_bytes: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            interpreter: PathBuf::from("python3"),
            timeout_secs: 5,
            memory_limit_bytes: 256 * 1024 * 1024,
            max_output_bytes: 2048,
        }
    }
}

/// Run a snippet and report exit status plus captured streams.
pub fn run_code(config: &SandboxConfig, code: &str) -> Result<String, ToolError> {
    let mut command = Command::new(&config.interpreter);
    command
        .arg("-c")
        .arg(code)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());

    let memory_limit = config.memory_limit_bytes;
    // SAFETY: only async-signal-safe calls between fork and exec.
    unsafe {
        use std::os::unix::process::CommandExt;
        command.pre_exec(move || {
            let limit = libc::rlimit {
                rlim_cur: memory_limit,
                rlim_max: memory_limit,
            };
            if libc::setrlimit(libc::RLIMIT_AS, &limit) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            // Drop network access when the kernel allows it; inside an
            // already-restricted container this may fail, which is fine.
            libc::unshare(libc::CLONE_NEWNET);
            Ok(())
        });
    }

    let mut child = command.spawn().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ToolError::SandboxUnavailable(format!(
                "interpreter {} not found",
                config.interpreter.display()
            ))
        } else {
            ToolError::ExecutionFailed(format!("cannot start interpreter: {e}"))
        }
    })?;

    let stdout_reader = drain(child.stdout.take());
    let stderr_reader = drain(child.stderr.take());

    let deadline = Instant::now() + Duration::from_secs(config.timeout_secs);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    // Collect whatever was written before the kill so the
                    // reader threads do not leak.
                    let _ = stdout_reader.join();
                    let _ = stderr_reader.join();
                    return Err(ToolError::Timeout {
                        seconds: config.timeout_secs,
                    });
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                let _ = child.kill();
                return Err(ToolError::ExecutionFailed(format!("wait failed: {e}")));
            }
        }
    };

    let stdout = stdout_reader.join().unwrap_or_default();
    let stderr = stderr_reader.join().unwrap_or_default();
    Ok(render(
        status.code(),
        &truncate(&stdout, config.max_output_bytes),
        &truncate(&stderr, config.max_output_bytes),
    ))
}

fn drain(stream: Option<impl Read + Send + 'static>) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut stream) = stream {
            let _ = stream.read_to_end(&mut buf);
        }
        buf
    })
}

fn truncate(bytes: &[u8], limit: usize) -> String {
    let text = String::from_utf8_lossy(bytes);
    if text.len() <= limit {
        return text.into_owned();
    }
    let mut cut = limit;
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}... (truncated)", &text[..cut])
}

fn render(code: Option<i32>, stdout: &str, stderr: &str) -> String {
    let status = match code {
        Some(c) => c.to_string(),
        None => "killed".to_string(),
    };
    let body = |s: &str| {
        if s.trim().is_empty() {
            "(empty)".to_string()
        } else {
            s.trim_end().to_string()
        }
    };
    format!(
        "exit status: {status}\nstdout:\n{}\nstderr:\n{}",
        body(stdout),
        body(stderr)
    )
}
