"""Tiered isolated execution: acquire → inject → execute → capture → destroy.

Drivers:

* native_readonly — executes no code at all; acquire/destroy only (tool-only steps).
* restricted_subprocess — a fresh interpreter jailed to an ephemeral workdir via a
  runtime audit hook: writes outside the workdir, socket connections and process
  spawning are denied and recorded in the containment report. Wall-clock timeout
  and output capping enforced by the parent.
* container — thin binding to an OS container runtime; only available when
  configured. Downgrades are explicit and logged, never implicit.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Optional

from .errors import DriverUnavailable, EnvReused, SetupFailed
from .plan import IsolationTier

logger = logging.getLogger(__name__)

_CONTAINMENT_FILE = "__containment__.jsonl"
_PROGRAM_FILE = "__program__.py"
_GUARD_FILE = "__guard__.py"
_INTERNAL_FILES = {_CONTAINMENT_FILE, _PROGRAM_FILE, _GUARD_FILE}

TRUNCATION_MARKER = "\n...[truncated]"

# Runs inside the sandboxed interpreter before the untrusted program.
_GUARD_SOURCE = r'''
import json, os, runpy, sys

WORKDIR = os.path.realpath(os.getcwd())
TARGET = sys.argv[1]
_report_fd = os.open(os.path.join(WORKDIR, "__containment__.jsonl"),
                     os.O_WRONLY | os.O_CREAT | os.O_APPEND)

def _inside(path):
    try:
        real = os.path.realpath(os.fspath(path))
    except (TypeError, ValueError):
        return False
    return real == WORKDIR or real.startswith(WORKDIR + os.sep)

def _deny(op, detail):
    os.write(_report_fd, (json.dumps({"op": op, "detail": str(detail)[:200]}) + "\n")
             .encode("utf-8", "replace"))
    raise PermissionError(f"denied by sandbox: {op} {detail}")

_DEV_OK = ("/dev/null", "/dev/urandom", "/dev/random")

def _hook(event, args):
    if event == "open":
        path, mode, flags = args
        writing = False
        if isinstance(mode, str) and any(c in mode for c in "wax+"):
            writing = True
        if mode is None and flags is not None and flags & (os.O_WRONLY | os.O_RDWR | os.O_APPEND | os.O_CREAT | os.O_TRUNC):
            writing = True
        if writing and not _inside(path) and os.fspath(path) not in _DEV_OK:
            _deny("open_write_outside_workdir", path)
    elif event in ("os.remove", "os.rename", "os.rmdir", "os.mkdir", "shutil.rmtree", "os.truncate"):
        path = args[0]
        if not _inside(path):
            _deny(event + "_outside_workdir", path)
    elif event in ("socket.connect", "socket.connect_ex", "socket.bind", "socket.sendto", "socket.sendmsg"):
        _deny(event, args[1] if len(args) > 1 else "")
    elif event in ("subprocess.Popen", "os.system", "os.exec", "os.posix_spawn", "os.spawn", "os.fork", "os.forkpty"):
        _deny(event, args[0] if args else "")

sys.addaudithook(_hook)
sys.argv = [TARGET]
runpy.run_path(TARGET, run_name="__main__")
'''


@dataclass(frozen=True)
class Limits:
    timeout_s: float = 30.0
    output_cap: int = 1024 * 1024  # bytes per stream


@dataclass
class ExecutionEnvironment:
    env_id: str
    tier: IsolationTier
    workdir: Path
    limits: Limits
    network_allowed: bool = False
    effective_tier: IsolationTier = IsolationTier.restricted_subprocess
    used: bool = False
    destroyed: bool = False


@dataclass(frozen=True)
class Artifact:
    name: str
    data: bytes


@dataclass(frozen=True)
class ExecutionOutcome:
    exit_status: int
    stdout: str
    stderr: str
    artifacts: tuple[Artifact, ...]
    duration: float
    timed_out: bool
    truncated: bool
    containment_report: tuple[dict, ...]


@dataclass(frozen=True)
class ContainerConfig:
    image: str
    runtime: str = "docker"  # CLI entrypoint of the container runtime
    extra_args: tuple[str, ...] = ()


class _StreamReader(threading.Thread):
    """Drains a pipe, keeping at most `cap` bytes; never grows unbounded."""

    def __init__(self, stream: IO[bytes], cap: int) -> None:
        super().__init__(daemon=True)
        self._stream = stream
        self._cap = cap
        self.chunks: list[bytes] = []
        self.kept = 0
        self.truncated = False

    def run(self) -> None:
        while True:
            chunk = self._stream.read(65536)
            if not chunk:
                break
            if self.kept < self._cap:
                keep = chunk[: self._cap - self.kept]
                self.chunks.append(keep)
                self.kept += len(keep)
                if len(keep) < len(chunk):
                    self.truncated = True
            else:
                self.truncated = True  # keep draining, discard

    def text(self) -> str:
        out = b"".join(self.chunks).decode("utf-8", "replace")
        if self.truncated:
            out += TRUNCATION_MARKER
        return out


class SandboxManager:
    """Lifecycle owner for execution environments; safe for concurrent envs."""

    def __init__(
        self,
        root: Optional[Path] = None,
        container: Optional[ContainerConfig] = None,
        downgrades: Optional[dict[IsolationTier, IsolationTier]] = None,
        default_limits: Limits = Limits(),
    ) -> None:
        self._root = Path(root) if root else None
        self._container = container
        self._downgrades = downgrades or {}
        self._default_limits = default_limits
        self._live: dict[str, ExecutionEnvironment] = {}
        self._lock = threading.Lock()

    @property
    def live_env_ids(self) -> frozenset[str]:
        with self._lock:
            return frozenset(self._live)

    def _resolve_tier(self, tier: IsolationTier) -> IsolationTier:
        if tier == IsolationTier.container and self._container is None:
            mapped = self._downgrades.get(tier)
            if mapped is None:
                raise DriverUnavailable(
                    "container tier requested but no container runtime is configured "
                    "(downgrades are never implicit)"
                )
            logger.warning("explicit tier downgrade: container -> %s", mapped.value)
            return mapped
        return tier

    def acquire(self, tier: IsolationTier, limits: Optional[Limits] = None) -> ExecutionEnvironment:
        effective = self._resolve_tier(tier)
        env_id = uuid.uuid4().hex
        workdir = Path(tempfile.mkdtemp(prefix=f"planexec-env-{env_id[:8]}-", dir=self._root))
        env = ExecutionEnvironment(
            env_id=env_id,
            tier=tier,
            workdir=workdir,
            limits=limits or self._default_limits,
            effective_tier=effective,
        )
        with self._lock:
            self._live[env_id] = env
        return env

    def run_code(self, env: ExecutionEnvironment, program: str, entry: tuple[str, ...] = ()) -> ExecutionOutcome:
        if env.used:
            raise EnvReused(f"environment {env.env_id} already executed a program")
        if env.destroyed:
            raise SetupFailed(f"environment {env.env_id} was destroyed")
        env.used = True
        if env.effective_tier == IsolationTier.native_readonly:
            raise SetupFailed("native_readonly tier executes no code (tools only)")
        if env.effective_tier == IsolationTier.container:
            return self._run_container(env, program)
        return self._run_restricted_subprocess(env, program)

    def _run_restricted_subprocess(self, env: ExecutionEnvironment, program: str) -> ExecutionOutcome:
        workdir = env.workdir
        (workdir / _PROGRAM_FILE).write_text(program, "utf-8")
        (workdir / _GUARD_FILE).write_text(_GUARD_SOURCE, "utf-8")
        cmd = [sys.executable, "-I", _GUARD_FILE, _PROGRAM_FILE]
        start = time.monotonic()
        try:
            proc = subprocess.Popen(
                cmd,
                cwd=workdir,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                start_new_session=True,
                env={"PATH": os.environ.get("PATH", ""), "PYTHONDONTWRITEBYTECODE": "1"},
            )
        except OSError as exc:
            raise SetupFailed(f"could not start sandboxed interpreter: {exc}") from exc

        out_reader = _StreamReader(proc.stdout, env.limits.output_cap)  # type: ignore[arg-type]
        err_reader = _StreamReader(proc.stderr, env.limits.output_cap)  # type: ignore[arg-type]
        out_reader.start()
        err_reader.start()
        timed_out = False
        try:
            proc.wait(timeout=env.limits.timeout_s)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
        out_reader.join(timeout=5)
        err_reader.join(timeout=5)
        duration = time.monotonic() - start

        exit_status = proc.returncode if proc.returncode is not None else -1
        if timed_out and exit_status == 0:
            exit_status = -signal.SIGKILL

        return ExecutionOutcome(
            exit_status=exit_status,
            stdout=out_reader.text(),
            stderr=err_reader.text(),
            artifacts=self._collect_artifacts(workdir),
            duration=duration,
            timed_out=timed_out,
            truncated=out_reader.truncated or err_reader.truncated,
            containment_report=self._read_containment(workdir),
        )

    def _run_container(self, env: ExecutionEnvironment, program: str) -> ExecutionOutcome:
        assert self._container is not None
        workdir = env.workdir
        (workdir / _PROGRAM_FILE).write_text(program, "utf-8")
        cmd = [
            self._container.runtime, "run", "--rm",
            "--network", "none" if not env.network_allowed else "bridge",
            "-v", f"{workdir}:/work", "-w", "/work",
            *self._container.extra_args,
            self._container.image, "python", _PROGRAM_FILE,
        ]
        start = time.monotonic()
        try:
            completed = subprocess.run(
                cmd, capture_output=True, timeout=env.limits.timeout_s
            )
            timed_out = False
            exit_status = completed.returncode
            stdout, stderr = completed.stdout, completed.stderr
        except subprocess.TimeoutExpired as exc:
            timed_out = True
            exit_status = -signal.SIGKILL
            stdout = exc.stdout or b""
            stderr = exc.stderr or b""
        except OSError as exc:
            raise SetupFailed(f"container runtime failed: {exc}") from exc
        duration = time.monotonic() - start

        def _cap(data: bytes) -> tuple[str, bool]:
            if len(data) > env.limits.output_cap:
                return data[: env.limits.output_cap].decode("utf-8", "replace") + TRUNCATION_MARKER, True
            return data.decode("utf-8", "replace"), False

        out_text, out_trunc = _cap(stdout)
        err_text, err_trunc = _cap(stderr)
        return ExecutionOutcome(
            exit_status=exit_status,
            stdout=out_text,
            stderr=err_text,
            artifacts=self._collect_artifacts(workdir),
            duration=duration,
            timed_out=timed_out,
            truncated=out_trunc or err_trunc,
            containment_report=(),
        )

    @staticmethod
    def _collect_artifacts(workdir: Path) -> tuple[Artifact, ...]:
        artifacts = []
        for path in sorted(workdir.rglob("*")):
            if path.is_file() and path.name not in _INTERNAL_FILES:
                artifacts.append(Artifact(str(path.relative_to(workdir)), path.read_bytes()))
        return tuple(artifacts)

    @staticmethod
    def _read_containment(workdir: Path) -> tuple[dict, ...]:
        path = workdir / _CONTAINMENT_FILE
        if not path.exists():
            return ()
        records = []
        for line in path.read_text("utf-8", "replace").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                records.append({"op": "unparsed", "detail": line[:200]})
        return tuple(records)

    def destroy(self, env: ExecutionEnvironment) -> bool:
        """Idempotent teardown; best-effort with logged warnings."""
        if env.destroyed:
            return True
        env.destroyed = True
        with self._lock:
            self._live.pop(env.env_id, None)
        try:
            shutil.rmtree(env.workdir, ignore_errors=True)
        except OSError as exc:  # pragma: no cover - rmtree(ignore_errors) rarely raises
            logger.warning("destroy of %s left residue: %s", env.env_id, exc)
        return True
