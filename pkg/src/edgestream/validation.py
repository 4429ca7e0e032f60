from __future__ import annotations

from dataclasses import dataclass

from .errors import PlanError
from .model import LogicalPlan, Projection, Schema, Selection, value_matches


@dataclass(frozen=True)
class ValidatedPlan:
    plan: LogicalPlan
    # schemas[i] is the schema entering operator i; schemas[-1] reaches the sink
    schemas: tuple[Schema, ...]

    @property
    def output_schema(self) -> Schema:
        return self.schemas[-1]


def plan_errors(plan: LogicalPlan, schema: Schema) -> tuple[list[str], tuple[Schema, ...]]:
    errors: list[str] = []
    current = schema
    schemas = [schema]
    for pos, op in enumerate(plan.operators):
        where = f"operator {pos} ({op.kind})"
        if isinstance(op, Selection):
            if not op.predicates:
                errors.append(f"{where}: selection needs at least one predicate")
            for pred in op.predicates:
                if pred.attribute not in current.names:
                    errors.append(f"{where}: unknown attribute {pred.attribute!r} "
                                  f"(visible: {', '.join(current.names)})")
                    continue
                attr = current.attribute(pred.attribute)
                if not value_matches(attr.type, pred.value):
                    errors.append(f"{where}: predicate {pred} compares {attr.type.value} attribute "
                                  f"{attr.name!r} with {type(pred.value).__name__} constant")
        elif isinstance(op, Projection):
            if not op.keep:
                errors.append(f"{where}: projection must keep at least one attribute")
            seen = set()
            kept = []
            for name in op.keep:
                if name in seen:
                    errors.append(f"{where}: attribute {name!r} kept twice")
                    continue
                seen.add(name)
                if name not in current.names:
                    errors.append(f"{where}: projection of absent attribute {name!r}")
                    continue
                kept.append(name)
            if kept:
                current = current.project(kept)
        else:
            errors.append(f"{where}: unsupported operator {type(op).__name__}")
        schemas.append(current)
    return errors, tuple(schemas)


def validate_plan(plan: LogicalPlan, schema: Schema) -> ValidatedPlan:
    """Resolve every attribute reference along the chain.

    Raises PlanError listing all violations, not just the first one.
    """
    errors, schemas = plan_errors(plan, schema)
    if plan.source not in (schema.name, str(schema.schema_id)):
        errors.insert(0, f"plan source {plan.source!r} does not name schema {schema.name!r}")
    if errors:
        raise PlanError(errors)
    return ValidatedPlan(plan, schemas)
