"""Run generator programs in an isolated child process and capture stdout."""

from __future__ import annotations

import os
import signal
import subprocess
import tempfile
import time
from dataclasses import dataclass
from typing import Sequence

MAX_OUTPUT_BYTES = 64 * 1024 * 1024

_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "PYTHONHASHSEED", "TMPDIR")


class ExecutionError(RuntimeError):
    """Child process could not produce a usable solution."""

    def __init__(self, message: str, stderr: str = "", returncode: int | None = None):
        super().__init__(message)
        self.stderr = stderr
        self.returncode = returncode


class ExecutionTimeout(ExecutionError):
    pass


class SpawnError(ExecutionError):
    pass


class OutputTooLarge(ExecutionError):
    pass


@dataclass
class ExecutionResult:
    stdout: bytes
    stderr: str
    wall_time_ms: int


def _limit_memory(memory_hint: int | None):
    if not memory_hint:
        return None

    def apply():
        import resource

        resource.setrlimit(resource.RLIMIT_AS, (memory_hint, memory_hint))

    return apply


def _clean_env() -> dict[str, str]:
    env = {k: os.environ[k] for k in _ENV_ALLOWLIST if k in os.environ}
    env.setdefault("PYTHONHASHSEED", "0")
    return env


def execute_candidate(
    command: Sequence[str],
    time_limit_ms: int,
    memory_hint: int | None = None,
    stdin: bytes | None = None,
) -> ExecutionResult:
    """Run ``command`` in a fresh temporary directory under a wall-clock limit.

    ``memory_hint`` is an address-space cap in bytes (best effort, POSIX only).
    Raises :class:`ExecutionTimeout`, :class:`SpawnError`, :class:`OutputTooLarge`
    or :class:`ExecutionError` for a nonzero exit.
    """
    with tempfile.TemporaryDirectory(prefix="candidate-") as workdir:
        out_path = os.path.join(workdir, ".stdout")
        err_path = os.path.join(workdir, ".stderr")
        start = time.monotonic()
        with open(out_path, "wb") as out, open(err_path, "wb") as err:
            try:
                proc = subprocess.Popen(
                    list(command),
                    cwd=workdir,
                    stdin=subprocess.PIPE if stdin is not None else subprocess.DEVNULL,
                    stdout=out,
                    stderr=err,
                    env=_clean_env(),
                    preexec_fn=_limit_memory(memory_hint),
                    start_new_session=True,
                )
            except OSError as exc:
                raise SpawnError(f"failed to spawn {command[0]!r}: {exc}") from exc
            try:
                proc.communicate(input=stdin, timeout=time_limit_ms / 1000.0)
            except subprocess.TimeoutExpired:
                try:
                    os.killpg(proc.pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
                proc.wait()
                raise ExecutionTimeout(
                    f"timed out after {time_limit_ms} ms", stderr=_read_text(err_path)
                )
        elapsed = int((time.monotonic() - start) * 1000)
        stderr = _read_text(err_path)
        if proc.returncode != 0:
            raise ExecutionError(
                f"exited with code {proc.returncode}", stderr=stderr, returncode=proc.returncode
            )
        size = os.path.getsize(out_path)
        if size > MAX_OUTPUT_BYTES:
            raise OutputTooLarge(f"stdout is {size} bytes (limit {MAX_OUTPUT_BYTES})", stderr=stderr)
        with open(out_path, "rb") as fh:
            stdout = fh.read()
    return ExecutionResult(stdout=stdout, stderr=stderr, wall_time_ms=elapsed)


def _read_text(path: str, limit: int = 64 * 1024) -> str:
    with open(path, "rb") as fh:
        return fh.read(limit).decode("utf-8", errors="replace")
