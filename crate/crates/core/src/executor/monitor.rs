//! Event-driven supervision of a set of job processes.
//!
//! Each child gets a waiter thread that blocks in `waitid(WNOWAIT)`, marks
//! the child as exited under its slot mutex and only then reaps it. A kill
//! takes the same mutex and skips exited children, so a signal can never
//! reach a recycled pid. Children run in their own process group and are
//! killed as a group.

use std::io;
use std::os::unix::process::ExitStatusExt;
use std::process::{Child, ExitStatus};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitInfo {
    /// Exit code, or `128 + signal` for a signalled process.
    pub code: i32,
    pub signal: Option<i32>,
    /// True when the supervisor killed the process.
    pub killed: bool,
}

impl ExitInfo {
    fn from_status(status: io::Result<ExitStatus>, killed: bool) -> Self {
        match status {
            Ok(s) => ExitInfo {
                code: s.code().unwrap_or_else(|| 128 + s.signal().unwrap_or(0)),
                signal: s.signal(),
                killed,
            },
            Err(_) => ExitInfo {
                code: -1,
                signal: None,
                killed,
            },
        }
    }

    pub fn success(&self) -> bool {
        self.code == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SupervisePolicy {
    /// Index (into the children list) of the coordinating process, if any.
    pub master: Option<usize>,
    /// How long the remaining processes may keep running once the master
    /// has exited successfully or any other process has failed.
    pub grace: Duration,
    /// Upper bound on the whole run.
    pub timeout: Option<Duration>,
}

struct Slot {
    pid: i32,
    exited: Mutex<bool>,
}

impl Slot {
    fn kill(&self) -> bool {
        let exited = self.exited.lock().unwrap();
        if *exited {
            return false;
        }
        // SAFETY: plain syscall; the group leader is not yet reaped, so the
        // process group id still names our child.
        unsafe { libc::kill(-self.pid, libc::SIGKILL) == 0 }
    }
}

fn wait_exited_nowait(pid: i32) {
    loop {
        // SAFETY: zeroed siginfo_t is a valid out-parameter for waitid.
        let mut info: libc::siginfo_t = unsafe { std::mem::zeroed() };
        let rc = unsafe {
            libc::waitid(
                libc::P_PID,
                pid as libc::id_t,
                &mut info,
                libc::WEXITED | libc::WNOWAIT,
            )
        };
        if rc == 0 || io::Error::last_os_error().raw_os_error() != Some(libc::EINTR) {
            return;
        }
    }
}

/// Wait for every child, killing stragglers according to `policy`. The
/// result is indexed like `children`.
pub fn supervise(children: Vec<Child>, policy: SupervisePolicy) -> Vec<ExitInfo> {
    let n = children.len();
    let slots: Vec<Slot> = children
        .iter()
        .map(|c| Slot {
            pid: c.id() as i32,
            exited: Mutex::new(false),
        })
        .collect();
    let (tx, rx) = mpsc::channel();
    let mut results: Vec<Option<ExitInfo>> = vec![None; n];
    let mut killed = vec![false; n];

    std::thread::scope(|s| {
        for (idx, mut child) in children.into_iter().enumerate() {
            let tx = tx.clone();
            let slot = &slots[idx];
            s.spawn(move || {
                wait_exited_nowait(slot.pid);
                let status = {
                    let mut exited = slot.exited.lock().unwrap();
                    *exited = true;
                    child.wait()
                };
                let _ = tx.send((idx, status));
            });
        }
        drop(tx);

        let kill_rest = |killed: &mut [bool], results: &[Option<ExitInfo>]| {
            for (i, slot) in slots.iter().enumerate() {
                if results[i].is_none() && slot.kill() {
                    killed[i] = true;
                }
            }
        };

        let mut deadline = policy.timeout.map(|t| Instant::now() + t);
        let mut remaining = n;
        while remaining > 0 {
            let msg = match deadline {
                Some(d) => match rx.recv_timeout(d.saturating_duration_since(Instant::now())) {
                    Ok(m) => Some(m),
                    Err(mpsc::RecvTimeoutError::Timeout) => None,
                    Err(mpsc::RecvTimeoutError::Disconnected) => break,
                },
                None => match rx.recv() {
                    Ok(m) => Some(m),
                    Err(_) => break,
                },
            };
            let Some((idx, status)) = msg else {
                kill_rest(&mut killed, &results);
                deadline = None;
                continue;
            };
            let info = ExitInfo::from_status(status, killed[idx]);
            results[idx] = Some(info);
            remaining -= 1;
            if remaining == 0 || policy.master.is_none() {
                continue;
            }
            if Some(idx) == policy.master && !info.success() {
                kill_rest(&mut killed, &results);
            } else if Some(idx) == policy.master || !info.success() {
                let grace = Instant::now() + policy.grace;
                deadline = Some(deadline.map_or(grace, |d| d.min(grace)));
            }
        }
    });
    results
        .into_iter()
        .map(|r| {
            r.unwrap_or(ExitInfo {
                code: -1,
                signal: None,
                killed: false,
            })
        })
        .collect()
}
