from .config import PROJECTION, SELECTION, config_for, decode_config, projection_config, selection_config
from .guest import module_bytes, operator_module
from .native import NativeOperator, native_reference
from .sandbox import OperatorHandle, OperatorModule, OptSample, invoke, load_operator


def make_operator(op, schema_in, mode: str = "sandbox", operator_id: str = "op"):
    """Instantiate a logical operator in ``sandbox`` or ``native`` mode."""
    module = operator_module(op, schema_in)
    if mode == "native":
        return NativeOperator(module.kind, module.config_blob, schema_in, operator_id)
    if mode != "sandbox":
        raise ValueError(f"unknown execution mode {mode!r}")
    return load_operator(module, schema_in, operator_id)


__all__ = [
    "PROJECTION", "SELECTION", "NativeOperator", "OperatorHandle", "OperatorModule", "OptSample",
    "config_for", "decode_config", "invoke", "load_operator", "make_operator", "module_bytes",
    "native_reference", "operator_module", "projection_config", "selection_config",
]
