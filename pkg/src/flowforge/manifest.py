"""Dataset manifests, OCR glyph annotations and 3D unified positional coordinates.

A manifest is a JSON Lines file; each line is one self-contained sample::

    {"id": "s0", "task": "edit", "refs": [[512, 512]], "target": [512, 512],
     "instruction": "Make the sky in Fig 1 pink",
     "glyphs": [{"char": "A", "cx": 0.5, "cy": 0.5, "scale": 0.1}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Sequence

TASKS = ("t2i", "edit")


class ManifestError(ValueError):
    """Raised for malformed or invalid manifest content.

    ``line`` is the 1-based line number in the source file when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        self.reason = message
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class ImageDims:
    height: int
    width: int

    def __post_init__(self):
        for name in ("height", "width"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ManifestError(f"image {name} must be a positive integer, got {value!r}")

    @property
    def area(self) -> int:
        return self.height * self.width

    def as_list(self) -> list[int]:
        return [self.height, self.width]


@dataclass(frozen=True)
class OcrGlyph:
    """One recognised character: center as image fractions, scale as fraction of image height."""

    char: str
    cx: float
    cy: float
    scale: float

    def __post_init__(self):
        if not isinstance(self.char, str) or len(self.char) != 1:
            raise ManifestError(f"glyph char must be a single character, got {self.char!r}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ManifestError(f"glyph center ({self.cx}, {self.cy}) outside [0, 1]")
        if not self.scale > 0:
            raise ManifestError(f"glyph scale must be > 0, got {self.scale}")

    @classmethod
    def from_dict(cls, obj: dict) -> "OcrGlyph":
        if not isinstance(obj, dict):
            raise ManifestError("glyph must be an object")
        extra = set(obj) - {"char", "cx", "cy", "scale"}
        if extra:
            raise ManifestError(f"unknown glyph keys {sorted(extra)}")
        try:
            return cls(obj["char"], float(obj["cx"]), float(obj["cy"]), float(obj["scale"]))
        except KeyError as exc:
            raise ManifestError(f"glyph missing key {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"bad glyph value: {exc}") from None

    def to_dict(self) -> dict:
        return {"char": self.char, "cx": self.cx, "cy": self.cy, "scale": self.scale}


@dataclass(frozen=True)
class SampleRecord:
    id: str
    task: str
    refs: tuple[ImageDims, ...]
    target: ImageDims
    instruction: str = ""
    glyphs: tuple[OcrGlyph, ...] | None = None

    @property
    def n_refs(self) -> int:
        return len(self.refs)

    def all_dims(self) -> list[ImageDims]:
        """Target first, then references in input order."""
        return [self.target, *self.refs]

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "task": self.task,
            "refs": [r.as_list() for r in self.refs],
            "target": self.target.as_list(),
            "instruction": self.instruction,
        }
        if self.glyphs is not None:
            out["glyphs"] = [g.to_dict() for g in self.glyphs]
        return out


@dataclass(frozen=True)
class TokenCoordinate:
    tau: int
    row: int
    col: int


def validate_record(record: SampleRecord) -> SampleRecord:
    if not isinstance(record.id, str) or not record.id:
        raise ManifestError("record id must be a non-empty string")
    if record.task not in TASKS:
        raise ManifestError(f"unknown task {record.task!r}; expected one of {TASKS}")
    if record.task == "t2i" and record.refs:
        raise ManifestError("t2i record with references")
    if record.task == "edit" and not record.refs:
        raise ManifestError("edit record without references")
    if not isinstance(record.instruction, str):
        raise ManifestError("instruction must be a string")
    return record


def _dims(value, what: str) -> ImageDims:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ManifestError(f"{what} must be [height, width]")
    return ImageDims(value[0], value[1])


_RECORD_KEYS = {"id", "task", "refs", "target", "instruction", "glyphs"}


def record_from_dict(obj) -> SampleRecord:
    if not isinstance(obj, dict):
        raise ManifestError("record must be a JSON object")
    extra = set(obj) - _RECORD_KEYS
    if extra:
        raise ManifestError(f"unknown keys {sorted(extra)}")
    for key in ("id", "task", "target"):
        if key not in obj:
            raise ManifestError(f"missing key {key!r}")
    refs = obj.get("refs", [])
    if not isinstance(refs, list):
        raise ManifestError("refs must be an array")
    glyphs = obj.get("glyphs")
    if glyphs is not None:
        if not isinstance(glyphs, list):
            raise ManifestError("glyphs must be an array")
        glyphs = tuple(OcrGlyph.from_dict(g) for g in glyphs)
    record = SampleRecord(
        id=obj["id"],
        task=obj["task"],
        refs=tuple(_dims(r, "ref") for r in refs),
        target=_dims(obj["target"], "target"),
        instruction=obj.get("instruction", ""),
        glyphs=glyphs,
    )
    return validate_record(record)


def parse_manifest(lines: Iterable[str]) -> list[SampleRecord]:
    records: list[SampleRecord] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from None
        try:
            record = record_from_dict(obj)
        except ManifestError as exc:
            raise ManifestError(exc.reason, lineno) from None
        if record.id in seen:
            raise ManifestError(f"duplicate id {record.id!r}", lineno)
        seen.add(record.id)
        records.append(record)
    return records


def load_manifest(path: str | PathLike) -> list[SampleRecord]:
    """Read a JSON Lines manifest; records are returned in file order."""
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh)


def dump_manifest(records: Sequence[SampleRecord], path: str | PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def assign_rope_coordinates(
    refs: Sequence[tuple[int, int]], target: tuple[int, int]
) -> list[list[TokenCoordinate]]:
    """Assign (tau, row, col) to every token of each image.

    Returns one list per image, references first (tau = 1..n in order) and the
    target last (tau = 0). Each image sweeps its own grid row-major from (0, 0),
    so a reference and the target share spatial indices and differ only in tau.
    """
    grids = [*refs, target]
    for rows, cols in grids:
        if rows < 1 or cols < 1:
            raise ValueError(f"grid dims must be >= 1, got {rows}x{cols}")
    taus = [*range(1, len(refs) + 1), 0]
    return [
        [TokenCoordinate(tau, r, c) for r in range(rows) for c in range(cols)]
        for tau, (rows, cols) in zip(taus, grids)
    ]


@dataclass
class GlyphRecord:
    """Recognised (or target) OCR output for one sample: text plus per-character glyphs."""

    id: str
    text: str
    glyphs: list[OcrGlyph] = field(default_factory=list)

    @classmethod
    def from_dict(cls, obj) -> "GlyphRecord":
        if not isinstance(obj, dict) or "id" not in obj:
            raise ManifestError("OCR record must be an object with an id")
        text = obj.get("text")
        glyphs = [OcrGlyph.from_dict(g) for g in obj.get("glyphs") or []]
        if text is None:
            text = "".join(g.char for g in glyphs)
        return cls(str(obj["id"]), text, glyphs)


def load_glyph_records(path: str | PathLike) -> list[GlyphRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(GlyphRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON: {exc.msg}", lineno) from None
            except ManifestError as exc:
                raise ManifestError(exc.reason, lineno) from None
    return out
