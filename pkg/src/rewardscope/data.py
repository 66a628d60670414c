"""Labeled example datasets: JSONL loading, validation, and correlation control.

A dataset pairs prompts with responses that carry a binary attribute label
(the attribute under study) and optionally a second binary label for an
off-target attribute. `induce_correlation` subsamples a dataset so the two
labels correlate at a chosen strength while both marginals stay balanced.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import DataError

VALID_LABELS = (0, 1)


@dataclass(frozen=True, slots=True)
class LabeledExample:
    """One prompt/response pair with a binary attribute label.

    `label` is the attribute of interest (1 = present). `aux_label` is an
    optional second attribute used for correlation experiments. `meta` is
    free-form and never interpreted by the toolkit.
    """

    id: str
    prompt: str
    response: str
    label: int
    aux_label: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.label not in VALID_LABELS:
            raise DataError(f"example {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if self.aux_label is not None and self.aux_label not in VALID_LABELS:
            raise DataError(
                f"example {self.id!r}: aux_label must be 0, 1 or absent, got {self.aux_label!r}"
            )
        if not self.response:
            raise DataError(f"example {self.id!r}: response must be non-empty")


@dataclass(frozen=True, slots=True)
class Dataset:
    """An ordered collection of examples for one named attribute."""

    examples: tuple[LabeledExample, ...]
    attribute_name: str
    source: str = ""

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for ex in self.examples:
            if ex.id in seen:
                raise DataError(f"duplicate example id {ex.id!r}")
            seen.add(ex.id)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def n1(self) -> int:
        return sum(1 for ex in self.examples if ex.label == 1)

    @property
    def n0(self) -> int:
        return len(self.examples) - self.n1


_REQUIRED_FIELDS = ("prompt", "response", "label")


def _example_from_obj(obj: dict, line_no: int) -> LabeledExample:
    for name in _REQUIRED_FIELDS:
        if name not in obj:
            raise DataError(f"line {line_no}: missing required field {name!r}")
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool) or label not in VALID_LABELS:
        raise DataError(f"line {line_no}: label must be the integer 0 or 1, got {label!r}")
    aux = obj.get("aux_label")
    if aux is not None and (not isinstance(aux, int) or isinstance(aux, bool) or aux not in VALID_LABELS):
        raise DataError(f"line {line_no}: aux_label must be 0 or 1, got {aux!r}")
    if not isinstance(obj["response"], str) or not obj["response"]:
        raise DataError(f"line {line_no}: response must be a non-empty string")
    if not isinstance(obj["prompt"], str):
        raise DataError(f"line {line_no}: prompt must be a string (may be empty)")
    meta = obj.get("meta") or {}
    if not isinstance(meta, dict):
        raise DataError(f"line {line_no}: meta must be an object")
    ex_id = obj.get("id")
    if ex_id is None:
        ex_id = str(line_no)
    return LabeledExample(
        id=str(ex_id),
        prompt=obj["prompt"],
        response=obj["response"],
        label=label,
        aux_label=aux,
        meta=meta,
    )


def load_dataset(path: str | Path, attribute_name: str, lenient: bool = False) -> Dataset:
    """Load a JSONL file of examples.

    Each line is a JSON object with required fields prompt (may be empty),
    response (non-empty), label (0 or 1), and optional id, aux_label, meta.
    Missing ids default to the 1-based line number. In strict mode (default)
    any malformed line aborts with its line number; with `lenient=True`
    malformed lines are skipped and counted in the dataset's provenance.
    """
    path = Path(path)
    examples: list[LabeledExample] = []
    skipped = 0
    seen_ids: set[str] = set()
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise DataError(f"line {line_no}: expected a JSON object")
            ex = _example_from_obj(obj, line_no)
            if ex.id in seen_ids:
                raise DataError(f"line {line_no}: duplicate id {ex.id!r}")
        except DataError:
            if lenient:
                skipped += 1
                continue
            raise
        except json.JSONDecodeError as exc:
            if lenient:
                skipped += 1
                continue
            raise DataError(f"line {line_no}: invalid JSON: {exc.msg}") from exc
        seen_ids.add(ex.id)
        examples.append(ex)
    source = str(path)
    if skipped:
        source = f"{path} (skipped {skipped} malformed lines)"
    return Dataset(examples=tuple(examples), attribute_name=attribute_name, source=source)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset back to JSONL; inverse of `load_dataset` on valid data."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in dataset:
            obj: dict = {
                "id": ex.id,
                "prompt": ex.prompt,
                "response": ex.response,
                "label": ex.label,
            }
            if ex.aux_label is not None:
                obj["aux_label"] = ex.aux_label
            if ex.meta:
                obj["meta"] = ex.meta
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def filter_by_length(
    dataset: Dataset,
    max_tokens: int,
    counter: Callable[[str], int] = whitespace_tokens,
) -> Dataset:
    """Drop examples whose response exceeds `max_tokens` under `counter`."""
    kept = tuple(ex for ex in dataset if counter(ex.response) <= max_tokens)
    return Dataset(
        examples=kept,
        attribute_name=dataset.attribute_name,
        source=f"{dataset.source} (length<={max_tokens})",
    )


def cell_counts(class_size: int, p: float) -> tuple[int, int, int, int]:
    """Per-cell counts (c11, c10, c01, c00) for one correlation level.

    `class_size` is the per-label class size of the output. c11 is the
    (label=1, aux=1) cell. The high cells use round(class_size * p) and the
    output keeps both marginals balanced and the total at 2 * class_size
    for every p.
    """
    if not 0.5 <= p <= 1.0:
        raise DataError(f"correlation level must lie in [0.5, 1.0], got {p}")
    high = round(class_size * p)
    low = class_size - high
    return (high, low, low, high)


@dataclass(frozen=True, slots=True)
class CorrelationSchedule:
    """A sweep of correlation levels with their derived cell counts."""

    class_size: int
    levels: tuple[float, ...]
    group_counts: tuple[tuple[int, int, int, int], ...]

    @classmethod
    def build(cls, class_size: int, levels: Sequence[float]) -> "CorrelationSchedule":
        counts = tuple(cell_counts(class_size, p) for p in levels)
        return cls(class_size=class_size, levels=tuple(levels), group_counts=counts)


DEFAULT_LEVELS = tuple(round(0.5 + 0.05 * k, 2) for k in range(11))


def _cells_of(dataset: Dataset) -> dict[tuple[int, int], list[LabeledExample]]:
    cells: dict[tuple[int, int], list[LabeledExample]] = {
        (1, 1): [], (1, 0): [], (0, 1): [], (0, 0): []
    }
    for ex in dataset:
        if ex.aux_label is None:
            raise DataError(f"example {ex.id!r} has no aux_label; correlation control needs one")
        cells[(ex.label, ex.aux_label)].append(ex)
    return cells


def default_class_size(dataset: Dataset) -> int:
    """Largest per-label class size feasible for every level in [0.5, 1.0].

    At p=1.0 the concordant cells each need class_size examples; at p=0.5
    the discordant cells each need about half. Using one size for the whole
    sweep keeps the total constant across levels.
    """
    cells = _cells_of(dataset)
    m11, m10 = len(cells[(1, 1)]), len(cells[(1, 0)])
    m01, m00 = len(cells[(0, 1)]), len(cells[(0, 0)])
    return min(min(m11, m00), 2 * min(m10, m01))


def induce_correlation(
    dataset: Dataset,
    p: float,
    seed: int,
    class_size: int | None = None,
) -> Dataset:
    """Subsample so that P(aux=1 | label=1) = P(aux=0 | label=0) = p.

    Sampling is without replacement and reproducible from `seed`. The output
    has `class_size` examples per label class (derived from the source when
    not given), balanced label and aux marginals, and a total that does not
    depend on p. Source order is preserved among selected examples.
    """
    if class_size is None:
        class_size = default_class_size(dataset)
    if class_size <= 0:
        raise DataError("source dataset is too small to induce any correlation level")
    c11, c10, c01, c00 = cell_counts(class_size, p)
    cells = _cells_of(dataset)
    need = {(1, 1): c11, (1, 0): c10, (0, 1): c01, (0, 0): c00}
    rng = random.Random(seed)
    chosen: list[LabeledExample] = []
    for key in ((1, 1), (1, 0), (0, 1), (0, 0)):
        pool = cells[key]
        want = need[key]
        if want > len(pool):
            raise DataError(
                f"cell (label={key[0]}, aux={key[1]}) has {len(pool)} examples, "
                f"but level p={p} with class size {class_size} needs {want}"
            )
        chosen.extend(rng.sample(pool, want))
    order = {ex.id: i for i, ex in enumerate(dataset)}
    chosen.sort(key=lambda ex: order[ex.id])
    return Dataset(
        examples=tuple(chosen),
        attribute_name=dataset.attribute_name,
        source=f"{dataset.source} (induced p={p}, class_size={class_size}, seed={seed})",
    )


def dataset_digest(path: str | Path) -> str:
    """Content hash of a dataset file, for run manifests."""
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def iter_jsonl(path: str | Path) -> Iterable[dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
