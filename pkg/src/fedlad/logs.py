"""Raw log ingestion: template masking, sliding windows and label alignment.

Lines are reduced to event templates by masking variable tokens with ``<*>``.
Template ids start at 1; id 0 is reserved for padding short windows.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
PLACEHOLDER = "<*>"

SESSION = "session"
LINE = "line"
LABEL_MODES = (SESSION, LINE)

# Alternation order is the masking priority: block ids and IPs must win over
# the bare integer rule, paths over everything they contain.
_MASK_RE = re.compile(
    r"(?P<blk>\bblk_-?\d+\b)"
    r"|(?P<ip>(?<![\w.])\d{1,3}(?:\.\d{1,3}){3}(?!\w|\.\d))"
    r"|(?P<hex>\b0[xX][0-9a-fA-F]+\b)"
    r"|(?P<path>(?<!\S)/[^\s/]+(?:/[^\s/]+)+/?)"
    r"|(?P<int>(?<![\w.])-?\d+(?!\w|\.\d))"
)
_BLK_RE = re.compile(r"^blk_-?\d+$")


class LabelModeError(ValueError):
    pass


@dataclass(frozen=True)
class RawLogLine:
    line_no: int
    text: str
    source_file: str = ""


@dataclass
class EventTemplate:
    template_id: int
    template_text: str
    occurrence_count: int = 0


@dataclass(frozen=True)
class ParsedEvent:
    template_id: int
    params: tuple[str, ...]
    session_key: str | None = None
    timestamp_index: int = 0
    anomalous: bool = False


@dataclass
class LogSequence:
    events: tuple[int, ...]
    label: int | None = None
    origin: str = ""
    members: tuple[ParsedEvent, ...] = field(default=(), repr=False, compare=False)


@dataclass
class Dataset:
    sequences: list[LogSequence]
    vocab_size: int

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (PAD plus at least one template)")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def anomaly_rate(self) -> float:
        if not self.sequences:
            return 0.0
        return sum(1 for s in self.sequences if s.label == 1) / len(self.sequences)

    def event_matrix(self) -> np.ndarray:
        if not self.sequences:
            return np.zeros((0, 0), dtype=np.int64)
        return np.array([s.events for s in self.sequences], dtype=np.int64)

    def label_vector(self) -> np.ndarray:
        return np.array([s.label or 0 for s in self.sequences], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.sequences[i] for i in indices], self.vocab_size)


@dataclass(frozen=True)
class DatasetStats:
    num_sequences: int
    vocab_size: int
    anomaly_rate: float
    mean_sequence_entropy: float


class TemplateStore:
    """Dense template dictionary keyed by template text."""

    def __init__(self) -> None:
        self._by_text: dict[str, EventTemplate] = {}
        self.templates: list[EventTemplate] = []

    def __len__(self) -> int:
        return len(self.templates)

    @property
    def vocab_size(self) -> int:
        return len(self.templates) + 1

    def intern(self, text: str) -> EventTemplate:
        tpl = self._by_text.get(text)
        if tpl is None:
            tpl = EventTemplate(len(self.templates) + 1, text)
            self._by_text[text] = tpl
            self.templates.append(tpl)
        tpl.occurrence_count += 1
        return tpl

    def text(self, template_id: int) -> str:
        return self.templates[template_id - 1].template_text

    def vocab(self) -> dict[int, str]:
        return {t.template_id: t.template_text for t in self.templates}

    @classmethod
    def from_vocab(cls, vocab: dict[int, str]) -> "TemplateStore":
        store = cls()
        for tid in sorted(vocab):
            if tid != len(store.templates) + 1:
                raise ValueError(f"vocabulary ids are not dense at {tid}")
            tpl = EventTemplate(tid, vocab[tid])
            store._by_text[tpl.template_text] = tpl
            store.templates.append(tpl)
        return store


def merge_stores(stores: Sequence[TemplateStore]) -> tuple[TemplateStore, list[dict[int, int]]]:
    """Merge independently built dictionaries.

    Ids are re-densified in lexicographic template-text order so the result does
    not depend on which file was parsed first. Returns the merged store and, for
    each input store, a mapping from its old ids to merged ids.
    """
    counts: Counter[str] = Counter()
    for st in stores:
        for tpl in st.templates:
            counts[tpl.template_text] += tpl.occurrence_count
    merged = TemplateStore()
    for text in sorted(counts):
        tpl = EventTemplate(len(merged.templates) + 1, text, counts[text])
        merged._by_text[text] = tpl
        merged.templates.append(tpl)
    remaps = [
        {tpl.template_id: merged._by_text[tpl.template_text].template_id for tpl in st.templates}
        for st in stores
    ]
    return merged, remaps


def mask_text(text: str) -> tuple[str, list[str], str | None]:
    """Mask variable tokens; return (template_text, params, first block id)."""
    params: list[str] = []
    session_key = None
    pieces: list[str] = []
    pos = 0
    for m in _MASK_RE.finditer(text):
        pieces.append(text[pos:m.start()])
        pieces.append(PLACEHOLDER)
        token = m.group(0)
        params.append(token)
        if session_key is None and m.lastgroup == "blk":
            session_key = token
        pos = m.end()
    pieces.append(text[pos:])
    return "".join(pieces), params, session_key


def parse_line(raw: RawLogLine | str, dictionary: TemplateStore, *,
               timestamp_index: int = 0, anomalous: bool = False) -> ParsedEvent:
    text = raw.text if isinstance(raw, RawLogLine) else raw
    text = text.strip()
    if not text:
        raise ValueError("cannot parse an empty log line")
    template_text, params, session_key = mask_text(text)
    tpl = dictionary.intern(template_text)
    return ParsedEvent(tpl.template_id, tuple(params), session_key, timestamp_index, anomalous)


def split_line_label(text: str) -> tuple[bool, str]:
    """Split the leading alert token of BGL/Thunderbird-style lines.

    A line whose first token is ``-`` is normal; any other token marks an alert.
    """
    head, _, rest = text.strip().partition(" ")
    return head != "-", rest.strip()


def read_raw_lines(path: str | Path) -> list[RawLogLine]:
    path = Path(path)
    out = []
    with path.open(encoding="utf-8", errors="replace") as fh:
        for no, line in enumerate(fh, start=1):
            if line.strip():
                out.append(RawLogLine(no, line.rstrip("\r\n"), str(path)))
    return out


def parse_file(path: str | Path, dictionary: TemplateStore,
               label_mode: str = SESSION) -> list[ParsedEvent]:
    if label_mode not in LABEL_MODES:
        raise ValueError(f"unknown label mode {label_mode!r}")
    events = []
    for raw in read_raw_lines(path):
        anomalous = False
        text = raw.text
        if label_mode == LINE:
            anomalous, text = split_line_label(text)
            if not text:
                continue
        events.append(parse_line(text, dictionary, timestamp_index=len(events), anomalous=anomalous))
    return events


def window_count(n: int, w: int, s: int) -> int:
    if n == 0:
        return 0
    return math.ceil(max(n - w, 0) / s) + 1


def window_sequences(events: Sequence[ParsedEvent], w: int, s: int,
                     origin: str = "") -> list[LogSequence]:
    if w < 1 or s < 1:
        raise ValueError("window size and step must be >= 1")
    out = []
    for i in range(window_count(len(events), w, s)):
        start = i * s
        members = tuple(events[start:start + w])
        ids = tuple(e.template_id for e in members) + (PAD,) * (w - len(members))
        out.append(LogSequence(ids, None, f"{origin}:{start}" if origin else str(start), members))
    return out


def session_sequences(events: Sequence[ParsedEvent], w: int, s: int) -> list[LogSequence]:
    """Group events by block id (first-seen order) and window each session."""
    groups: dict[str, list[ParsedEvent]] = {}
    orphans = 0
    for e in events:
        if e.session_key is None:
            orphans += 1
            continue
        groups.setdefault(e.session_key, []).append(e)
    if orphans:
        logger.warning("%d events carry no session key and were not windowed", orphans)
    out = []
    for key, group in groups.items():
        wins = window_sequences(group, w, s)
        for win in wins:
            win.origin = key if len(wins) == 1 else f"{key}#{win.origin}"
        out.extend(wins)
    return out


def align_labels(sequences: Sequence[LogSequence], mode: str,
                 anomaly_keys: Iterable[str] | None = None,
                 vocab_size: int | None = None) -> Dataset:
    """Attach binary labels to windows and wrap them in a Dataset."""
    if mode == SESSION:
        keys = set(anomaly_keys or ())
        if sequences and not any(e.session_key for seq in sequences for e in seq.members):
            raise LabelModeError("label mode mismatch: no session keys present in any event")
        labelled = [
            LogSequence(seq.events, int(any(e.session_key in keys for e in seq.members)),
                        seq.origin, seq.members)
            for seq in sequences
        ]
    elif mode == LINE:
        if anomaly_keys is not None:
            raise LabelModeError("label mode mismatch: line mode takes no anomaly keys")
        labelled = [
            LogSequence(seq.events, int(any(e.anomalous for e in seq.members)), seq.origin, seq.members)
            for seq in sequences
        ]
    else:
        raise ValueError(f"unknown label mode {mode!r}")
    if vocab_size is None:
        vocab_size = 1 + max((max(s.events) for s in labelled), default=0)
    return Dataset(labelled, max(vocab_size, 2))


def featurize_counts(seq: LogSequence | Sequence[int], vocab_size: int) -> np.ndarray:
    ids = np.asarray(seq.events if isinstance(seq, LogSequence) else seq, dtype=np.int64)
    if ids.size and (ids.max() >= vocab_size or ids.min() < 0):
        raise ValueError(f"template id out of range for vocab_size={vocab_size}")
    counts = np.bincount(ids, minlength=vocab_size).astype(np.float64)
    counts[PAD] = 0.0
    return counts


def read_label_csv(path: str | Path) -> set[str]:
    """Anomalous session keys from a ``key,label`` CSV (1/0 or Anomaly/Normal)."""
    keys = set()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"key", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header 'key,label'")
        for row in reader:
            if row["label"].strip().lower() in ("1", "anomaly", "anomalous", "true"):
                keys.add(row["key"].strip())
    return keys


def prepare_dataset(log_path: str | Path, label_mode: str = SESSION,
                    labels_path: str | Path | None = None,
                    window_size: int = 10, step: int = 10) -> tuple[Dataset, TemplateStore]:
    """Run the whole pipeline on one log file."""
    store = TemplateStore()
    events = parse_file(log_path, store, label_mode)
    if label_mode == SESSION:
        if labels_path is None:
            raise LabelModeError("session mode requires an anomaly label CSV")
        anomaly_keys = read_label_csv(labels_path)
        seqs = session_sequences(events, window_size, step)
        if not seqs and events:
            raise LabelModeError("label mode mismatch: no session keys present in any event")
        dataset = align_labels(seqs, SESSION, anomaly_keys, store.vocab_size)
    else:
        seqs = window_sequences(events, window_size, step, origin=Path(log_path).name)
        dataset = align_labels(seqs, LINE, None, store.vocab_size)
    return dataset, store


def write_dataset(dataset: Dataset, path: str | Path, vocab: dict[int, str]) -> Path:
    """JSON Lines dataset plus a ``vocab.json`` sidecar in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for seq in dataset.sequences:
            fh.write(json.dumps({"events": list(seq.events), "label": seq.label or 0,
                                 "origin": seq.origin}) + "\n")
    sidecar = path.parent / "vocab.json"
    payload = {str(k): vocab[k] for k in sorted(vocab)}
    sidecar.write_text(json.dumps(payload, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    return sidecar


def read_dataset(path: str | Path) -> tuple[Dataset, dict[int, str]]:
    path = Path(path)
    sidecar = path.parent / "vocab.json"
    vocab = {int(k): v for k, v in json.loads(sidecar.read_text(encoding="utf-8")).items()}
    seqs = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                seqs.append(LogSequence(tuple(obj["events"]), int(obj["label"]), obj.get("origin", "")))
    vocab_size = 1 + max(vocab, default=0)
    return Dataset(seqs, max(vocab_size, 2)), vocab


def sequence_entropy(seq: LogSequence) -> float:
    ids = [e for e in seq.events if e != PAD]
    if not ids:
        return 0.0
    counts = np.array(list(Counter(ids).values()), dtype=np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def dataset_stats(dataset: Dataset) -> DatasetStats:
    n = len(dataset)
    ent = float(np.mean([sequence_entropy(s) for s in dataset.sequences])) if n else 0.0
    return DatasetStats(n, dataset.vocab_size, dataset.anomaly_rate, ent)
