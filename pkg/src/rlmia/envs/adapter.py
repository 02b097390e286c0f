"""Line-delimited JSON protocol for driving environments that live in another process.

Every request and every response is one JSON object on one line::

    -> {"type": "spec"}
    <- {"ok": true, "spec": {"name": ..., "state_dim": ..., "action_dim": ...,
                             "action_low": [...], "action_high": [...], "t_max": ...}}
    -> {"type": "reset", "seed": 7}
    <- {"ok": true, "state": [...]}
    -> {"type": "step", "action": [...]}
    <- {"ok": true, "next_state": [...], "reward": -0.3, "terminal": false}
    -> {"type": "close"}
    <- {"ok": true}

Failures come back as ``{"ok": false, "error": "..."}``. A server must honour
the seeding contract: equal ``reset`` seeds give bitwise-equal states. Floats
are written with ``repr`` precision so 64-bit values survive the round trip.
"""

from __future__ import annotations

import argparse
import json
import socket
import subprocess
import sys
from typing import IO, Sequence

import numpy as np

from rlmia.envs.base import EnvSpec, Environment

PROTOCOL_VERSION = 1


class AdapterError(RuntimeError):
    pass


def handle_request(env: Environment, msg: dict) -> dict:
    kind = msg.get("type")
    try:
        if kind == "spec":
            return {"ok": True, "spec": env.spec.to_dict(), "protocol": PROTOCOL_VERSION}
        if kind == "reset":
            state = env.reset(int(msg["seed"]))
            return {"ok": True, "state": [float(x) for x in state]}
        if kind == "step":
            next_state, reward, terminal = env.step(np.asarray(msg["action"], dtype=np.float64))
            return {"ok": True, "next_state": [float(x) for x in next_state],
                    "reward": float(reward), "terminal": bool(terminal)}
        if kind == "close":
            return {"ok": True}
        return {"ok": False, "error": f"unknown message type {kind!r}"}
    except Exception as exc:  # reported to the client, the server keeps running
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def serve(env: Environment, reader: IO[str], writer: IO[str]) -> None:
    """Answer requests from ``reader`` until EOF or a ``close`` message."""
    for line in reader:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            reply = {"ok": False, "error": f"bad json: {exc}"}
            msg = {}
        else:
            reply = handle_request(env, msg)
        writer.write(json.dumps(reply) + "\n")
        writer.flush()
        if msg.get("type") == "close":
            break


class ExternalEnvironment(Environment):
    """Client side of the protocol; behaves like any local :class:`Environment`."""

    def __init__(self, reader: IO[str], writer: IO[str], on_close=None):
        super().__init__()
        self._reader = reader
        self._writer = writer
        self._on_close = on_close
        self.spec = EnvSpec.from_dict(self._call({"type": "spec"})["spec"])

    @classmethod
    def from_command(cls, argv: Sequence[str]) -> "ExternalEnvironment":
        proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                text=True, bufsize=1)

        def _close():
            proc.stdin.close()
            proc.wait(timeout=10)

        return cls(proc.stdout, proc.stdin, on_close=_close)

    @classmethod
    def from_socket(cls, host: str, port: int) -> "ExternalEnvironment":
        sock = socket.create_connection((host, port))
        f = sock.makefile("rw", encoding="utf-8", newline="\n")
        return cls(f, f, on_close=lambda: (f.close(), sock.close()))

    def _call(self, msg: dict) -> dict:
        self._writer.write(json.dumps(msg) + "\n")
        self._writer.flush()
        line = self._reader.readline()
        if not line:
            raise AdapterError("environment server closed the stream")
        reply = json.loads(line)
        if not reply.get("ok"):
            raise AdapterError(reply.get("error", "unknown adapter failure"))
        return reply

    def _reset(self, seed: int) -> np.ndarray:
        state = np.asarray(self._call({"type": "reset", "seed": int(seed)})["state"], dtype=np.float64)
        if state.shape != (self.spec.state_dim,):
            raise AdapterError(f"server returned state of shape {state.shape}")
        return state

    def _step(self, action: np.ndarray):
        reply = self._call({"type": "step", "action": [float(x) for x in action]})
        return np.asarray(reply["next_state"], dtype=np.float64), float(reply["reward"]), bool(reply["terminal"])

    def close(self) -> None:
        try:
            self._call({"type": "close"})
        finally:
            if self._on_close is not None:
                self._on_close()
                self._on_close = None


def main(argv=None) -> None:
    from rlmia.envs import make_env

    parser = argparse.ArgumentParser(description="Serve a built-in environment over stdin/stdout.")
    parser.add_argument("--env", default="PointReach2D")
    parser.add_argument("--t-max", type=int, default=50)
    parser.add_argument("--sparse", action="store_true")
    args = parser.parse_args(argv)
    serve(make_env(args.env, t_max=args.t_max, sparse=args.sparse), sys.stdin, sys.stdout)


if __name__ == "__main__":
    main()
