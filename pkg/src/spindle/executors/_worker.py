"""Subprocess worker entry point: ``python -m spindle.executors._worker REF``."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback

from .registry import load_registry
from .wire import (
    PROTOCOL_VERSION,
    Opcode,
    ProtocolError,
    WireFrame,
    read_frame,
    unpack_call,
    write_frame,
)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="spindle-worker")
    parser.add_argument("registry")
    parser.add_argument("--init-delay", type=float, default=0.0)
    args = parser.parse_args(argv)

    # frames own the original stdout; stray prints from user code go to stderr
    out = os.fdopen(os.dup(1), "wb")
    os.dup2(2, 1)
    inp = os.fdopen(os.dup(0), "rb")

    registry = load_registry(args.registry)
    if args.init_delay:
        # stands in for slow library initialisation in a fresh interpreter
        time.sleep(args.init_delay)
    hello = {"protocol": PROTOCOL_VERSION, "digest": registry.digest(), "pid": os.getpid()}
    write_frame(out, WireFrame(Opcode.RESULT, 0, json.dumps(hello).encode()))

    while True:
        try:
            frame = read_frame(inp)
        except ProtocolError as e:
            write_frame(out, WireFrame(Opcode.ERROR, 0, f"protocol error: {e}".encode()))
            return 2
        if frame is None or frame.opcode == Opcode.SHUTDOWN:
            return 0
        if frame.opcode != Opcode.CALL:
            write_frame(
                out,
                WireFrame(Opcode.ERROR, frame.task_id, f"unexpected opcode {frame.opcode.name}".encode()),
            )
            return 2
        try:
            name, argument = unpack_call(frame.payload)
            fn = registry.get(name)
        except (KeyError, ProtocolError, UnicodeDecodeError) as e:
            msg = e.args[0] if isinstance(e, KeyError) else str(e)
            write_frame(out, WireFrame(Opcode.ERROR, frame.task_id, str(msg).encode()))
            continue
        try:
            result = fn(argument)
        except Exception as e:
            detail = f"{name}: {type(e).__name__}: {e}\n{traceback.format_exc()}"
            write_frame(out, WireFrame(Opcode.ERROR, frame.task_id, detail.encode()))
            continue
        write_frame(out, WireFrame(Opcode.RESULT, frame.task_id, bytes(result)))


if __name__ == "__main__":
    sys.exit(main())
