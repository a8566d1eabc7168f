"""Built-in function bodies used for tests, benchmarks and demos.

Every function takes the invocation payload (bytes) and returns bytes.
"""

import time


def noop(payload: bytes) -> bytes:
    return b""


def echo(payload: bytes) -> bytes:
    return payload


def sleep(payload: bytes) -> bytes:
    """Sleep for ``int(payload)`` milliseconds."""
    ms = int(payload or b"0")
    time.sleep(ms / 1000.0)
    return str(ms).encode()


def busy(payload: bytes) -> bytes:
    """Spin the CPU for ``int(payload)`` milliseconds."""
    ms = int(payload or b"0")
    end = time.perf_counter() + ms / 1000.0
    n = 0
    while time.perf_counter() < end:
        n += 1
    return str(n).encode()


def fail(payload: bytes) -> bytes:
    raise RuntimeError(payload.decode(errors="replace") or "requested failure")


BUILTIN_REGISTRY = {
    "builtin/noop": "hpcfaas.functions:noop",
    "builtin/echo": "hpcfaas.functions:echo",
    "builtin/sleep": "hpcfaas.functions:sleep",
    "builtin/busy": "hpcfaas.functions:busy",
    "builtin/fail": "hpcfaas.functions:fail",
}
