"""Named bytes-to-bytes functions callable in subprocess workers."""

from __future__ import annotations

import hashlib
import importlib
from collections.abc import Callable, Iterator

RemoteFunction = Callable[[bytes], bytes]


class RemoteFunctionRegistry:
    """Map from function name to a ``bytes -> bytes`` callable.

    Parent and workers load the same registry from an import reference
    (``"package.module:ATTRIBUTE"``) and compare :meth:`digest` at handshake.
    """

    def __init__(self) -> None:
        self._funcs: dict[str, RemoteFunction] = {}

    def register(self, name: str | None = None) -> Callable[[RemoteFunction], RemoteFunction]:
        def deco(fn: RemoteFunction) -> RemoteFunction:
            self.add(name or fn.__name__, fn)
            return fn

        return deco

    def add(self, name: str, fn: RemoteFunction) -> None:
        if name in self._funcs:
            raise ValueError(f"remote function {name!r} already registered")
        self._funcs[name] = fn

    def get(self, name: str) -> RemoteFunction:
        try:
            return self._funcs[name]
        except KeyError:
            raise KeyError(f"no remote function named {name!r}") from None

    def name_of(self, fn: Callable) -> str:
        for name, registered in self._funcs.items():
            if registered is fn:
                return name
        raise KeyError(f"{getattr(fn, '__qualname__', fn)!r} is not registered")

    def __contains__(self, name: object) -> bool:
        return name in self._funcs

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._funcs))

    def __len__(self) -> int:
        return len(self._funcs)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._funcs):
            fn = self._funcs[name]
            code = getattr(fn, "__code__", None)
            h.update(name.encode() + b"\0")
            h.update(f"{fn.__module__}.{fn.__qualname__}".encode() + b"\0")
            h.update(hashlib.sha256(code.co_code if code else b"").digest())
        return h.hexdigest()


def load_registry(ref: str) -> RemoteFunctionRegistry:
    """Resolve ``"module:attribute"`` to a registry instance."""
    module_name, sep, attr = ref.partition(":")
    if not sep or not attr:
        raise ValueError(f"registry reference {ref!r} must look like 'module:attribute'")
    obj = getattr(importlib.import_module(module_name), attr)
    if not isinstance(obj, RemoteFunctionRegistry):
        raise TypeError(f"{ref} is a {type(obj).__name__}, not a RemoteFunctionRegistry")
    return obj
