"""Bundled guest operator modules, compiled from WAT sources on first use."""
from __future__ import annotations

import functools
from importlib import resources

import wasmtime

from ..model import Schema
from .config import KINDS, config_for, kind_of
from .sandbox import OperatorModule


def wat_source(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"no bundled module for kind {kind!r}")
    return resources.files(__package__).joinpath("wat", f"{kind}.wat").read_text()


@functools.lru_cache(maxsize=None)
def module_bytes(kind: str) -> bytes:
    return bytes(wasmtime.wat2wasm(wat_source(kind)))


def operator_module(op, schema_in: Schema) -> OperatorModule:
    """Bundled module plus config blob for a logical operator over ``schema_in``."""
    kind = kind_of(op)
    return OperatorModule(module_bytes(kind), kind, config_for(op, schema_in))
