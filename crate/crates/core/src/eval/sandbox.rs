//! Launching untrusted entrypoints as confined child processes.
//!
//! Each child runs in its own process group with an emptied environment,
//! rlimit caps on address space, CPU time and core dumps, and, where the
//! kernel supports Landlock, write access limited to its working directory
//! and no TCP connect/bind unless the policy allows network.

use std::os::fd::{AsRawFd, OwnedFd};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Once;
use std::time::Duration;

use landlock::{
    path_beneath_rules, Access, AccessFs, AccessNet, Ruleset, RulesetAttr, RulesetCreatedAttr, ABI,
};
use serde::{Deserialize, Serialize};

/// Directories searched for bare program names.
pub const SANDBOX_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxPolicy {
    pub startup_timeout_s: f64,
    pub per_record_timeout_s: f64,
    pub total_timeout_s: f64,
    pub max_memory_bytes: u64,
    pub max_stderr_bytes: usize,
    pub network_allowed: bool,
    /// Grace period for a clean exit after stdin is closed.
    pub exit_timeout_s: f64,
}

impl Default for SandboxPolicy {
    fn default() -> Self {
        Self {
            startup_timeout_s: 60.0,
            per_record_timeout_s: 10.0,
            total_timeout_s: 600.0,
            max_memory_bytes: 2 * 1024 * 1024 * 1024,
            max_stderr_bytes: 1024 * 1024,
            network_allowed: false,
            exit_timeout_s: 10.0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid sandbox policy: {0}")]
pub struct PolicyError(pub String);

impl SandboxPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let timeouts = [
            ("startup_timeout_s", self.startup_timeout_s),
            ("per_record_timeout_s", self.per_record_timeout_s),
            ("total_timeout_s", self.total_timeout_s),
            ("exit_timeout_s", self.exit_timeout_s),
        ];
        for (name, v) in timeouts {
            if !(v.is_finite() && v > 0.0) {
                return Err(PolicyError(format!("{name} must be > 0")));
            }
        }
        if self.per_record_timeout_s > self.total_timeout_s {
            return Err(PolicyError("per_record_timeout_s exceeds total_timeout_s".into()));
        }
        if self.max_memory_bytes == 0 {
            return Err(PolicyError("max_memory_bytes must be > 0".into()));
        }
        Ok(())
    }

    pub fn startup_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.startup_timeout_s)
    }

    pub fn per_record_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.per_record_timeout_s)
    }

    pub fn total_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.total_timeout_s)
    }

    pub fn exit_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.exit_timeout_s)
    }
}

/// Resolves `argv[0]`: paths containing `/` are taken relative to `workdir`
/// (or as-is when absolute), bare names are looked up in [`SANDBOX_PATH`].
pub fn resolve_program(program: &str, workdir: &Path) -> Option<PathBuf> {
    if program.contains('/') {
        let p = Path::new(program);
        let full = if p.is_absolute() { p.to_path_buf() } else { workdir.join(p) };
        return full.is_file().then_some(full);
    }
    SANDBOX_PATH.split(':').map(|dir| Path::new(dir).join(program)).find(|p| p.is_file())
}

static LANDLOCK_WARNING: Once = Once::new();

fn landlock_ruleset(workdir: &Path, network_allowed: bool) -> Option<OwnedFd> {
    let abi = ABI::V4;
    let build = || -> Result<Option<OwnedFd>, landlock::RulesetError> {
        let mut ruleset = Ruleset::default().handle_access(AccessFs::from_all(abi))?;
        if !network_allowed {
            ruleset = ruleset.handle_access(AccessNet::from_all(abi))?;
        }
        let created = ruleset
            .create()?
            .add_rules(path_beneath_rules(["/"], AccessFs::from_read(abi)))?
            .add_rules(path_beneath_rules([workdir], AccessFs::from_all(abi)))?
            .add_rules(path_beneath_rules(["/dev/null"], AccessFs::WriteFile | AccessFs::ReadFile))?;
        Ok(created.into())
    };
    match build() {
        Ok(Some(fd)) => Some(fd),
        Ok(None) => {
            LANDLOCK_WARNING.call_once(|| tracing::warn!("landlock unavailable; sandbox relies on rlimits only"));
            None
        }
        Err(e) => {
            LANDLOCK_WARNING.call_once(|| tracing::warn!(error = %e, "landlock ruleset failed; sandbox relies on rlimits only"));
            None
        }
    }
}

/// Spawns `argv` under `policy` with piped stdio and `workdir` as cwd.
pub fn spawn_sandboxed(argv: &[String], workdir: &Path, policy: &SandboxPolicy) -> std::io::Result<Child> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty argv"))?;
    let resolved = resolve_program(program, workdir).ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::NotFound, format!("program {program:?} not found"))
    })?;
    let tmp = workdir.join(".tmp");
    std::fs::create_dir_all(&tmp)?;

    let mut cmd = Command::new(&resolved);
    cmd.args(args)
        .current_dir(workdir)
        .env_clear()
        .env("PATH", SANDBOX_PATH)
        .env("HOME", workdir)
        .env("TMPDIR", &tmp)
        .env("LANG", "C.UTF-8")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);

    let ruleset = landlock_ruleset(workdir, policy.network_allowed);
    let ruleset_fd = ruleset.as_ref().map(|fd| fd.as_raw_fd());
    let memory = policy.max_memory_bytes as libc::rlim_t;
    let cpu = policy.total_timeout_s.ceil() as libc::rlim_t + 1;

    // Only async-signal-safe calls between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            let limits = [
                (libc::RLIMIT_AS, memory),
                (libc::RLIMIT_CPU, cpu),
                (libc::RLIMIT_CORE, 0),
            ];
            for (resource, value) in limits {
                let lim = libc::rlimit { rlim_cur: value, rlim_max: value };
                if libc::setrlimit(resource, &lim) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
            }
            if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            if let Some(fd) = ruleset_fd {
                if libc::syscall(libc::SYS_landlock_restrict_self, fd, 0) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
            }
            Ok(())
        });
    }
    let child = cmd.spawn();
    drop(ruleset);
    child
}

/// SIGKILLs the child's whole process group.
pub fn kill_group(child: &Child) {
    let pid = child.id() as libc::pid_t;
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
}
