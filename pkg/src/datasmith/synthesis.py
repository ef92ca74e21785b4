"""Task synthesis from raw data files.

Ingestion accepts local .csv/.xlsx/.sqlite files that load cleanly, fall
inside the row bounds and have no anomalous column types; metadata extracted
from accepted files feeds a prompt template that asks an endpoint for one
question of a requested taxonomy category. A recursive composition step chains
categories to build harder multi-hop questions.

.xlsx files are read with a minimal stdlib reader (first worksheet, shared
strings; no styles or date decoding) since no spreadsheet engine is available
in this environment.
"""

from __future__ import annotations

import logging
import random
import re
import sqlite3
import xml.etree.ElementTree as ET
import zipfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from .client import ChatClient
from .model import DataFile, TaskCategory
from .templates import QUERY_SYNTHESIS, load_category_library, load_template, render

logger = logging.getLogger(__name__)

MIN_ROWS = 20
MAX_ROWS = 1000
SHORT_TEXT_MAX_CHARS = 200
DEFAULT_UNIQUE_SAMPLE = 10

REJECT_UNLOADABLE = "unloadable"
REJECT_TOO_SMALL = "too_small"
REJECT_TOO_LARGE = "too_large"
REJECT_ANOMALOUS = "anomalous_types"


class SynthesisParseError(ValueError):
    """The synthesis completion lacked required tags; safe to retry."""


class CategoryMismatchError(ValueError):
    """The completion echoed a different category than requested."""


@dataclass(frozen=True)
class FileRecord:
    file: DataFile
    row_count: int
    column_count: int
    table_name: Optional[str] = None  # representative table for databases


@dataclass(frozen=True)
class IngestOutcome:
    path: str
    accepted: bool
    reason: Optional[str] = None
    record: Optional[FileRecord] = None


@dataclass(frozen=True)
class FileMeta:
    head: tuple[dict, ...]
    columns: tuple[str, ...]
    types: dict[str, str]
    ranges: dict[str, tuple[float, float]]
    uniques: dict[str, tuple]
    row_count: int
    column_count: int
    description: Optional[str] = None

    def __post_init__(self) -> None:
        if len(self.columns) != self.column_count:
            raise ValueError("columns and column_count disagree")
        non_numeric_ranges = set(self.ranges) - {
            c for c, t in self.types.items() if t in ("integer", "real")
        }
        if non_numeric_ranges:
            raise ValueError(f"ranges defined for non-numeric columns: {non_numeric_ranges}")


@dataclass(frozen=True)
class QuerySpec:
    question: str
    description: str
    category: TaskCategory
    source_file: str
    composition_depth: int = 1
    chain: tuple[TaskCategory, ...] = ()

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError("question must be non-empty")


# ---------------------------------------------------------------------------
# Loading and type normalization
# ---------------------------------------------------------------------------


def _column_letters_to_index(letters: str) -> int:
    index = 0
    for ch in letters:
        index = index * 26 + (ord(ch) - ord("A") + 1)
    return index - 1


_XLSX_NS = {"m": "http://schemas.openxmlformats.org/spreadsheetml/2006/main"}


def read_xlsx(path: Path) -> pd.DataFrame:
    """Read the first worksheet of an .xlsx file with the stdlib only."""
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        shared: list[str] = []
        if "xl/sharedStrings.xml" in names:
            root = ET.fromstring(zf.read("xl/sharedStrings.xml"))
            for si in root.findall("m:si", _XLSX_NS):
                shared.append("".join(node.text or "" for node in si.iter(f"{{{_XLSX_NS['m']}}}t")))

        sheets = sorted(
            n for n in names if re.fullmatch(r"xl/worksheets/sheet\d+\.xml", n)
        )
        if not sheets:
            raise ValueError("no worksheets in workbook")
        if len(sheets) > 1:
            logger.info("%s has %d sheets; using the first only", path, len(sheets))

        root = ET.fromstring(zf.read(sheets[0]))
        raw_rows: list[dict[int, object]] = []
        for row in root.iter(f"{{{_XLSX_NS['m']}}}row"):
            cells: dict[int, object] = {}
            for cell in row.findall("m:c", _XLSX_NS):
                ref = cell.get("r") or ""
                m = re.match(r"[A-Z]+", ref)
                if not m:
                    continue
                col = _column_letters_to_index(m.group())
                kind = cell.get("t")
                value_node = cell.find("m:v", _XLSX_NS)
                if kind == "s" and value_node is not None:
                    cells[col] = shared[int(value_node.text)]
                elif kind == "inlineStr":
                    cells[col] = "".join(
                        node.text or "" for node in cell.iter(f"{{{_XLSX_NS['m']}}}t")
                    )
                elif value_node is not None:
                    cells[col] = value_node.text
            raw_rows.append(cells)

    if not raw_rows:
        raise ValueError("empty worksheet")
    width = max(max(cells, default=-1) for cells in raw_rows) + 1
    header = [str(raw_rows[0].get(i, f"col{i}")) for i in range(width)]
    data = [[cells.get(i) for i in range(width)] for cells in raw_rows[1:]]
    frame = pd.DataFrame(data, columns=header)
    for col in frame.columns:
        converted = pd.to_numeric(frame[col], errors="coerce")
        if converted.notna().sum() == frame[col].notna().sum():
            frame[col] = converted
    return frame


def _largest_table(conn: sqlite3.Connection) -> tuple[Optional[str], int]:
    tables = [
        row[0]
        for row in conn.execute(
            "SELECT name FROM sqlite_master WHERE type='table' AND name NOT LIKE 'sqlite_%'"
        )
    ]
    best, best_rows, total = None, -1, 0
    for table in tables:
        count = conn.execute(f'SELECT COUNT(*) FROM "{table}"').fetchone()[0]
        total += count
        if count > best_rows:
            best, best_rows = table, count
    return best, total


def load_frame(record: FileRecord) -> pd.DataFrame:
    """Load the representative tabular view of an accepted file."""
    path = Path(record.file.path)
    if record.file.format == "csv":
        return pd.read_csv(path)
    if record.file.format == "xlsx":
        return read_xlsx(path)
    conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
    try:
        return pd.read_sql_query(f'SELECT * FROM "{record.table_name}"', conn)
    finally:
        conn.close()


def normalize_type(series: pd.Series) -> Optional[str]:
    """Classify a column as integer, real, date or short_text; None if none fit.

    A column whose values fit no normalization (for example long free text or
    binary blobs, or a fully empty column) is anomalous and rejects the file.
    """
    values = series.dropna()
    if values.empty:
        return None
    numeric = pd.to_numeric(values, errors="coerce")
    if numeric.notna().all():
        return "integer" if (numeric == numeric.round()).all() else "real"
    if not pd.api.types.is_numeric_dtype(values):
        try:
            dates = pd.to_datetime(values, errors="coerce", format="mixed")
        except (TypeError, ValueError):
            dates = pd.Series(pd.NaT, index=values.index)
        if dates.notna().all():
            return "date"
    as_text = values.astype(str)
    if (as_text.str.len() <= SHORT_TEXT_MAX_CHARS).all():
        return "short_text"
    return None


def ingest_file(path: str | Path) -> IngestOutcome:
    """Accept or reject one file; rejection is a value, never an exception."""
    path = Path(path)
    try:
        file = DataFile.from_path(str(path))
    except ValueError:
        return IngestOutcome(str(path), accepted=False, reason=REJECT_UNLOADABLE)

    table_name: Optional[str] = None
    try:
        if file.format == "sqlite":
            conn = sqlite3.connect(f"file:{path}?mode=ro", uri=True)
            try:
                table_name, row_count = _largest_table(conn)
                if table_name is None:
                    return IngestOutcome(str(path), accepted=False, reason=REJECT_UNLOADABLE)
                frame = pd.read_sql_query(f'SELECT * FROM "{table_name}"', conn)
            finally:
                conn.close()
        else:
            frame = pd.read_csv(path) if file.format == "csv" else read_xlsx(path)
            row_count = len(frame)
    except Exception:
        return IngestOutcome(str(path), accepted=False, reason=REJECT_UNLOADABLE)

    if row_count < MIN_ROWS:
        return IngestOutcome(str(path), accepted=False, reason=REJECT_TOO_SMALL)
    if row_count > MAX_ROWS:
        return IngestOutcome(str(path), accepted=False, reason=REJECT_TOO_LARGE)
    for column in frame.columns:
        if normalize_type(frame[column]) is None:
            return IngestOutcome(str(path), accepted=False, reason=REJECT_ANOMALOUS)

    record = FileRecord(
        file=file,
        row_count=row_count,
        column_count=len(frame.columns),
        table_name=table_name,
    )
    return IngestOutcome(str(path), accepted=True, record=record)


def extract_meta(
    record: FileRecord,
    *,
    unique_sample: int = DEFAULT_UNIQUE_SAMPLE,
    description: Optional[str] = None,
) -> FileMeta:
    """Populate the full metadata block for an accepted file."""
    frame = load_frame(record)
    types = {col: normalize_type(frame[col]) or "short_text" for col in frame.columns}
    ranges: dict[str, tuple[float, float]] = {}
    uniques: dict[str, tuple] = {}
    for col in frame.columns:
        values = frame[col].dropna()
        if types[col] in ("integer", "real") and not values.empty:
            numeric = pd.to_numeric(values, errors="coerce")
            ranges[col] = (float(numeric.min()), float(numeric.max()))
        distinct = values.drop_duplicates().head(unique_sample)
        uniques[col] = tuple(distinct.tolist())
    head = tuple(
        {str(k): (None if pd.isna(v) else v) for k, v in row.items()}
        for row in frame.head(3).to_dict(orient="records")
    )
    if description is None and record.file.format == "sqlite":
        from .sandbox import get_db_info

        description = get_db_info(Path(record.file.path))
    return FileMeta(
        head=head,
        columns=tuple(str(c) for c in frame.columns),
        types=types,
        ranges=ranges,
        uniques=uniques,
        row_count=len(frame),
        column_count=len(frame.columns),
        description=description,
    )


# ---------------------------------------------------------------------------
# Query synthesis
# ---------------------------------------------------------------------------

_QUESTION_RE = re.compile(r"<question>(.*?)</question>", re.DOTALL)
_DESCRIPTION_RE = re.compile(r"<description>(.*?)</description>", re.DOTALL)
_TYPE_RE = re.compile(r"<type>(.*?)</type>", re.DOTALL)

_COMPOSITION_NOTE = """
---

## Composition Requirement
The new question must build on the previous question below: treat the previous
question's result as an input that the new question consumes, composing both
analyses into a single, harder multi-hop question. State the combined question
self-contained, without referring to "the previous question" explicitly.

### Previous question:
{prior_question}
"""


def _format_head(head: Sequence[dict]) -> str:
    if not head:
        return "(no rows)"
    cols = list(head[0].keys())
    lines = [", ".join(cols)]
    lines += [", ".join(str(row.get(c)) for c in cols) for row in head]
    return "\n".join(lines)


def render_synthesis_prompt(
    meta: FileMeta,
    category: TaskCategory,
    *,
    library: Optional[dict] = None,
    prior_question: Optional[str] = None,
) -> str:
    """Fill the query-synthesis template; every placeholder must resolve."""
    library = library or load_category_library()
    entry = library[category.value]
    if not entry.get("examples"):
        raise ValueError(f"no exemplar queries for category {category.value}")
    prompt = render(
        load_template(QUERY_SYNTHESIS),
        description=meta.description or "(none provided)",
        head=_format_head(meta.head),
        columns=", ".join(meta.columns),
        types="\n".join(f"- {c}: {t}" for c, t in meta.types.items()),
        ranges="\n".join(f"- {c}: {lo} to {hi}" for c, (lo, hi) in meta.ranges.items()) or "(none)",
        uniques="\n".join(f"- {c}: {list(v)}" for c, v in meta.uniques.items()),
        row_count=meta.row_count,
        column_count=meta.column_count,
        question_type=category.value,
        question_template=entry["template"],
        question_examples="\n".join(f"- {q}" for q in entry["examples"]),
    )
    known = {"{" + k + "}" for k in (
        "description", "head", "columns", "types", "ranges", "uniques",
        "row_count", "column_count", "question_type", "question_template",
        "question_examples",
    )}
    leftover = sorted(p for p in known if p in prompt)
    if leftover:
        raise ValueError(f"unresolved template placeholders: {leftover}")
    if prior_question is not None:
        prompt += _COMPOSITION_NOTE.replace("{prior_question}", prior_question)
    return prompt


def parse_synthesis_completion(completion: str, requested: TaskCategory) -> tuple[str, str]:
    """Extract (question, description); the echoed type must match."""
    q = _QUESTION_RE.search(completion)
    t = _TYPE_RE.search(completion)
    if q is None or t is None:
        raise SynthesisParseError("completion missing <question> or <type> tags")
    d = _DESCRIPTION_RE.search(completion)
    try:
        echoed = TaskCategory.from_label(t.group(1).strip())
    except ValueError as exc:
        raise SynthesisParseError(str(exc)) from exc
    if echoed is not requested:
        raise CategoryMismatchError(
            f"requested {requested.value!r} but completion is typed {echoed.value!r}"
        )
    return q.group(1).strip(), (d.group(1).strip() if d else "")


def synthesize_query(
    meta: FileMeta,
    category: TaskCategory,
    client: ChatClient,
    *,
    source_file: str,
    library: Optional[dict] = None,
    prior_question: Optional[str] = None,
) -> QuerySpec:
    """One synthesis round trip: render, complete, parse, category-check."""
    prompt = render_synthesis_prompt(
        meta, category, library=library, prior_question=prior_question
    )
    completion = client.complete([{"role": "user", "content": prompt}])
    question, description = parse_synthesis_completion(completion, category)
    return QuerySpec(
        question=question,
        description=description,
        category=category,
        source_file=source_file,
        composition_depth=1,
        chain=(category,),
    )


def sample_chain(
    start: TaskCategory, depth: int, rng: random.Random
) -> list[TaskCategory]:
    """Uniform category chain of the given depth with no immediate repeats."""
    chain = [start]
    while len(chain) < depth:
        candidates = [c for c in TaskCategory if c is not chain[-1]]
        chain.append(rng.choice(candidates))
    return chain


def compose_harder(
    base: QuerySpec,
    meta: FileMeta,
    client: ChatClient,
    depth: int,
    *,
    library: Optional[dict] = None,
    rng: Optional[random.Random] = None,
    attempts_per_stage: int = 2,
) -> QuerySpec:
    """Chain further categories onto a base query, raising its difficulty.

    Each stage feeds the prior question in as composition context. A stage
    whose completions never parse aborts the chain and the last valid spec is
    returned tagged with the depth it actually reached.
    """
    if not (2 <= depth <= 5):
        raise ValueError(f"composition depth must be in [2, 5], got {depth}")
    rng = rng or random.Random()
    chain = sample_chain(base.category, depth, rng)
    current = replace(base, chain=(base.category,))
    for stage, category in enumerate(chain[1:], start=2):
        spec: Optional[QuerySpec] = None
        for _ in range(attempts_per_stage):
            try:
                spec = synthesize_query(
                    meta,
                    category,
                    client,
                    source_file=base.source_file,
                    library=library,
                    prior_question=current.question,
                )
                break
            except (SynthesisParseError, CategoryMismatchError) as exc:
                logger.info("composition stage %d retry: %s", stage, exc)
        if spec is None:
            logger.warning(
                "composition aborted at stage %d; returning depth-%d spec",
                stage,
                current.composition_depth,
            )
            return current
        current = replace(
            spec,
            composition_depth=stage,
            chain=current.chain + (category,),
        )
    return current
