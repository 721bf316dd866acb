"""Schema objects, ground-truth mappings, and the canonical text renderings
used everywhere else (retrieval documents, prompts, review payloads).

A schema here is purely metadata: table names, attribute names, free-text
descriptions and data-type labels. There is never access to row data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator


class SchemaError(ValueError):
    """Malformed or internally inconsistent schema input."""


class MappingError(ValueError):
    """Ground-truth mapping problems: unresolvable refs, duplicate sources."""


# Table and attribute names feed the "table.attr" CSV form and the
# "table-attr(type)" key form; dots and commas would make both ambiguous.
_FORBIDDEN_NAME_CHARS = (".", ",")


def _check_name(kind: str, name: str) -> None:
    if not name or not name.strip():
        raise SchemaError(f"{kind} name must be non-empty")
    for ch in _FORBIDDEN_NAME_CHARS:
        if ch in name:
            raise SchemaError(f"{kind} name {name!r} must not contain {ch!r}")


@dataclass(frozen=True)
class Attribute:
    """A column: identifier plus free-text description and data-type label."""

    name: str
    description: str = ""
    data_type: str = ""

    def __post_init__(self) -> None:
        _check_name("attribute", self.name)


@dataclass(frozen=True)
class Table:
    name: str
    description: str = ""
    attributes: tuple[Attribute, ...] = ()

    def __post_init__(self) -> None:
        _check_name("table", self.name)
        if not self.attributes:
            raise SchemaError(f"table {self.name!r} has no attributes")
        seen = set()
        for attr in self.attributes:
            if attr.name in seen:
                raise SchemaError(
                    f"duplicate attribute {attr.name!r} in table {self.name!r}"
                )
            seen.add(attr.name)


@dataclass(frozen=True)
class AttributeRef:
    """Identity of one attribute: the (table, attribute) pair.

    The dashed "table-attribute(type)" string is only a rendering; dashes may
    legitimately occur inside names, so code must never treat the rendered
    form as identity.
    """

    table: str
    attribute: str

    def dotted(self) -> str:
        return f"{self.table}.{self.attribute}"

    @classmethod
    def from_dotted(cls, text: str) -> "AttributeRef":
        table, sep, attribute = text.partition(".")
        if not sep or not table or not attribute:
            raise MappingError(f"cannot parse attribute ref {text!r}")
        return cls(table, attribute)


@dataclass(frozen=True)
class Schema:
    name: str
    tables: tuple[Table, ...] = ()

    def __post_init__(self) -> None:
        if not self.name or not self.name.strip():
            raise SchemaError("schema name must be non-empty")
        names = [t.name for t in self.tables]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate table names: {dupes}")
        keys = [render_key(ref, self) for ref in self.attribute_refs()]
        if len(keys) != len(set(keys)):
            dupes = sorted({k for k in keys if keys.count(k) > 1})
            raise SchemaError(f"rendered keys collide: {dupes}")

    def table(self, name: str) -> Table:
        for t in self.tables:
            if t.name == name:
                return t
        raise SchemaError(f"no table {name!r} in schema {self.name!r}")

    def resolve(self, ref: AttributeRef) -> Attribute:
        t = self.table(ref.table)
        for attr in t.attributes:
            if attr.name == ref.attribute:
                return attr
        raise SchemaError(
            f"no attribute {ref.attribute!r} in table {ref.table!r} "
            f"of schema {self.name!r}"
        )

    def contains(self, ref: AttributeRef) -> bool:
        try:
            self.resolve(ref)
            return True
        except SchemaError:
            return False

    def attribute_refs(self) -> Iterator[AttributeRef]:
        """All attribute refs in schema order (table order, then column order)."""
        for t in self.tables:
            for attr in t.attributes:
                yield AttributeRef(t.name, attr.name)

    def attribute_count(self) -> int:
        return sum(len(t.attributes) for t in self.tables)


@dataclass(frozen=True)
class MappingSet:
    """m:1 ground truth: one entry per source ref, target may be None."""

    entries: tuple[tuple[AttributeRef, AttributeRef | None], ...]

    def __post_init__(self) -> None:
        seen = set()
        for src, _ in self.entries:
            if src in seen:
                raise MappingError(f"duplicate source ref {src.dotted()!r}")
            seen.add(src)

    def as_dict(self) -> dict[AttributeRef, AttributeRef | None]:
        return dict(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def render_key(ref: AttributeRef, schema: Schema) -> str:
    """Render the canonical "table-attribute(type)" key for a resolvable ref."""
    attr = schema.resolve(ref)
    return f"{ref.table}-{ref.attribute}({attr.data_type})"


def parse_key(key: str) -> tuple[AttributeRef, str]:
    """Invert render_key, returning (ref, data_type).

    The attribute segment is everything between the first dash and the type
    parens; a table name containing a dash therefore cannot round-trip, which
    is why refs, not keys, are the internal identity.
    """
    key = key.strip()
    open_paren = key.find("(")
    if open_paren < 0 or not key.endswith(")"):
        raise SchemaError(f"cannot parse key {key!r}: missing type parens")
    head = key[:open_paren]
    data_type = key[open_paren + 1 : -1]
    table, sep, attribute = head.partition("-")
    if not sep or not table or not attribute:
        raise SchemaError(f"cannot parse key {key!r}: missing table-attribute dash")
    return AttributeRef(table, attribute), data_type


def render_query(ref: AttributeRef, schema: Schema) -> str:
    """Render the descriptive query/document text for one attribute.

    Layout: key, then the table description, then the attribute description.
    When both descriptions are empty the bare key is returned.
    """
    attr = schema.resolve(ref)
    table = schema.table(ref.table)
    key = render_key(ref, schema)
    if not table.description and not attr.description:
        return key
    return (
        f"{key}: Table {table.name} details-{table.description}, "
        f"Attribute {attr.name} details -{attr.description}"
    )


def key_lookup(schema: Schema) -> dict[str, AttributeRef]:
    """Map every rendered key of the schema to its ref, for exact-match resolution."""
    return {render_key(ref, schema): ref for ref in schema.attribute_refs()}


def load_schema(path: str | Path, format: str = "json") -> Schema:
    """Load and validate a schema file.

    Raises SchemaError both for parse failures (malformed JSON, wrong shape)
    and validation failures (duplicate names, empty tables).
    """
    if format != "json":
        raise SchemaError(f"unsupported schema format {format!r}")
    raw = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"cannot parse {path}: {exc}") from exc
    return schema_from_dict(data, where=str(path))


def schema_from_dict(data: object, where: str = "<memory>") -> Schema:
    if not isinstance(data, dict):
        raise SchemaError(f"{where}: schema document must be a JSON object")
    try:
        tables = []
        for t in data.get("tables", []):
            attributes = tuple(
                Attribute(
                    name=a["name"],
                    description=a.get("description", ""),
                    data_type=a.get("data_type", ""),
                )
                for a in t.get("attributes", [])
            )
            tables.append(
                Table(
                    name=t["name"],
                    description=t.get("description", ""),
                    attributes=attributes,
                )
            )
        return Schema(name=data["name"], tables=tuple(tables))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{where}: bad schema structure: {exc!r}") from exc


def schema_to_dict(schema: Schema) -> dict:
    return {
        "name": schema.name,
        "tables": [
            {
                "name": t.name,
                "description": t.description,
                "attributes": [
                    {
                        "name": a.name,
                        "description": a.description,
                        "data_type": a.data_type,
                    }
                    for a in t.attributes
                ],
            }
            for t in schema.tables
        ],
    }


def save_schema(schema: Schema, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(schema_to_dict(schema), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


GROUND_TRUTH_HEADER = "source,target"
NULL_TARGET = "NULL"


def load_ground_truth(
    path: str | Path,
    source: Schema | None = None,
    target: Schema | None = None,
) -> MappingSet:
    """Load a `source,target` CSV of dotted refs; NULL marks a no-match row.

    When schemas are given every ref must resolve in them; without schemas
    rows are taken at face value (useful when scoring a persisted run).
    """
    text = Path(path).read_text(encoding="utf-8")
    entries: list[tuple[AttributeRef, AttributeRef | None]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if lineno == 1 and line.lower() == GROUND_TRUTH_HEADER:
            continue
        left, sep, right = line.partition(",")
        if not sep:
            raise MappingError(f"{path}:{lineno}: expected 'source,target'")
        src = AttributeRef.from_dotted(left.strip())
        if source is not None and not source.contains(src):
            raise MappingError(
                f"{path}:{lineno}: source ref {src.dotted()!r} does not resolve"
            )
        right = right.strip()
        if right == NULL_TARGET:
            tgt: AttributeRef | None = None
        else:
            tgt = AttributeRef.from_dotted(right)
            if target is not None and not target.contains(tgt):
                raise MappingError(
                    f"{path}:{lineno}: target ref {tgt.dotted()!r} does not resolve"
                )
        entries.append((src, tgt))
    return MappingSet(entries=tuple(entries))


def save_ground_truth(mapping: MappingSet, path: str | Path) -> None:
    lines = [GROUND_TRUTH_HEADER]
    for src, tgt in mapping.entries:
        lines.append(f"{src.dotted()},{tgt.dotted() if tgt else NULL_TARGET}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
