"""Remote functions used by the executor tests."""

import os
import time

from spindle.executors import RemoteFunctionRegistry

REGISTRY = RemoteFunctionRegistry()
REF = "remote_funcs:REGISTRY"


@REGISTRY.register()
def identity(data: bytes) -> bytes:
    return data


@REGISTRY.register()
def upper(data: bytes) -> bytes:
    return data.upper()


@REGISTRY.register()
def boom(data: bytes) -> bytes:
    raise ValueError(f"boom on {len(data)} bytes")


@REGISTRY.register()
def crash(data: bytes) -> bytes:
    os._exit(7)


@REGISTRY.register()
def hang(data: bytes) -> bytes:
    while True:
        time.sleep(1)


@REGISTRY.register()
def pid(data: bytes) -> bytes:
    return str(os.getpid()).encode()


@REGISTRY.register()
def nap(data: bytes) -> bytes:
    time.sleep(int(data or b"0") / 1000)
    return data
