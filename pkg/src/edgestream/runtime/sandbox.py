"""Hosting operators inside a WebAssembly sandbox (wasmtime).

Guest ABI::

    op_alloc(len: i32) -> ptr: i32           reusable buffer in linear memory, 0 on failure
    op_init(ptr: i32, len: i32) -> i32       consume config blob, 0 on success
    op_process(ptr: i32, len: i32) -> i64    (out_ptr << 32) | out_len, or 0 to drop

One store and instance per handle; handles are not thread-safe and stay on
the thread that drives them.
"""
from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass

import wasmtime

from ..errors import AbiError, ConfigError, LoadError, OperatorFault
from ..model import Schema
from .config import KINDS, output_schema

_ENGINE = wasmtime.Engine()
_compiled: dict[bytes, wasmtime.Module] = {}
_compile_lock = threading.Lock()

REQUIRED_EXPORTS = ("memory", "op_alloc", "op_init", "op_process")
INITIAL_INPUT_CAPACITY = 4096


@dataclass(frozen=True)
class OperatorModule:
    module_bytes: bytes
    kind: str
    config_blob: bytes


@dataclass(frozen=True)
class OptSample:
    operator_id: str
    t_before: int
    t_after: int

    @property
    def duration(self) -> int:
        return self.t_after - self.t_before


def _compile(module_bytes: bytes) -> wasmtime.Module:
    key = hashlib.sha256(module_bytes).digest()
    with _compile_lock:
        mod = _compiled.get(key)
        if mod is None:
            try:
                mod = wasmtime.Module(_ENGINE, module_bytes)
            except wasmtime.WasmtimeError as exc:
                raise LoadError(f"invalid operator module: {str(exc).splitlines()[0]}") from exc
            _compiled[key] = mod
        return mod


def _trap_reason(exc: Exception) -> str:
    text = str(exc)
    for line in text.splitlines():
        if "wasm trap" in line:
            return line.strip()
    return text.splitlines()[0] if text else type(exc).__name__


class OperatorHandle:
    def __init__(self, module: OperatorModule, schema_in: Schema, operator_id: str):
        if module.kind not in KINDS:
            raise LoadError(f"unknown operator kind {module.kind!r}")
        if not module.module_bytes:
            raise LoadError("empty module")
        self.kind = module.kind
        self.operator_id = operator_id
        self.schema_in = schema_in
        self.faulted: str | None = None

        compiled = _compile(bytes(module.module_bytes))
        exported = {e.name for e in compiled.exports}
        missing = [name for name in REQUIRED_EXPORTS if name not in exported]
        if missing:
            raise AbiError(f"module does not export {', '.join(missing)}")
        self._store = wasmtime.Store(_ENGINE)
        try:
            instance = wasmtime.Instance(self._store, compiled, [])
        except (wasmtime.WasmtimeError, wasmtime.Trap) as exc:
            raise LoadError(f"cannot instantiate module: {_trap_reason(exc)}") from exc
        exports = instance.exports(self._store)
        self._memory = exports["memory"]
        self._alloc = exports["op_alloc"]
        self._process = exports["op_process"]
        if not isinstance(self._memory, wasmtime.Memory):
            raise AbiError("'memory' export is not a memory")

        blob = bytes(module.config_blob)
        try:
            cfg_ptr = self._alloc(self._store, max(len(blob), 1))
            if cfg_ptr == 0:
                raise ConfigError("guest could not allocate config buffer")
            self._memory.write(self._store, blob, cfg_ptr)
            status = exports["op_init"](self._store, cfg_ptr, len(blob))
        except wasmtime.Trap as exc:
            raise ConfigError(f"op_init trapped: {_trap_reason(exc)}") from exc
        if status != 0:
            raise ConfigError(f"op_init returned status {status}")
        self.schema_out = output_schema(module.kind, blob, schema_in)
        self._in_cap = 0
        self._in_ptr = 0
        self._ensure_input(INITIAL_INPUT_CAPACITY)

    def _ensure_input(self, size: int) -> None:
        if size <= self._in_cap:
            return
        ptr = self._alloc(self._store, size)
        if ptr == 0:
            raise OperatorFault(f"{self.operator_id}: guest out of memory", reason="alloc")
        self._in_ptr, self._in_cap = ptr, size

    def invoke(self, encoded_tuple: bytes) -> tuple[bytes | None, OptSample]:
        if self.faulted:
            raise OperatorFault(f"{self.operator_id} halted after earlier fault", reason=self.faulted)
        n = len(encoded_tuple)
        store = self._store
        try:
            self._ensure_input(n)
            self._memory.write(store, encoded_tuple, self._in_ptr)
            t_before = time.monotonic_ns()
            packed = self._process(store, self._in_ptr, n)
            t_after = time.monotonic_ns()
        except wasmtime.Trap as exc:
            self.faulted = _trap_reason(exc)
            raise OperatorFault(f"{self.operator_id} trapped", reason=self.faulted) from exc
        sample = OptSample(self.operator_id, t_before, t_after)
        packed &= 0xFFFFFFFFFFFFFFFF
        if packed == 0:
            return None, sample
        ptr, length = packed >> 32, packed & 0xFFFFFFFF
        if ptr + length > self._memory.data_len(store):
            raise AbiError(f"{self.operator_id} returned out-of-bounds buffer ({ptr}, {length})")
        return bytes(self._memory.read(store, ptr, ptr + length)), sample

    def close(self) -> None:
        self._process = None
        self.faulted = self.faulted or "closed"


def load_operator(module: OperatorModule, schema_in: Schema, operator_id: str = "op") -> OperatorHandle:
    return OperatorHandle(module, schema_in, operator_id)


def invoke(handle: OperatorHandle, encoded_tuple: bytes) -> tuple[bytes | None, OptSample]:
    return handle.invoke(encoded_tuple)
