"""Synthetic HDFS-style log corpora for desk-scale experiments.

Each session is one block id. Normal sessions walk a seeded Markov chain over
normal templates; anomalous sessions (5%) append a burst of rare error templates.

Profiles:

separable  anomalies are exactly the sessions with an error burst
noisy      as separable, with 2% of labels flipped
drift      the second half of the corpus uses a different template chain and
           different error templates
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

PROFILES = ("separable", "noisy", "drift")
ANOMALY_RATE = 0.05
LABEL_NOISE = 0.02

_NORMAL = [
    ("dfs.DataNode$DataXceiver", "Receiving block {blk} src: /{ip}:{port} dest: /{ip}:{port}"),
    ("dfs.FSNamesystem", "BLOCK* NameSystem.allocateBlock: /user/root/rand/_temporary/part-{n} {blk}"),
    ("dfs.DataNode$PacketResponder", "PacketResponder {n} for block {blk} terminating"),
    ("dfs.DataNode$PacketResponder", "Received block {blk} of size {size} from {ip}"),
    ("dfs.FSNamesystem", "BLOCK* NameSystem.addStoredBlock: blockMap updated: {ip}:{port} is added to {blk} size {size}"),
    ("dfs.DataBlockScanner", "Verification succeeded for {blk}"),
    ("dfs.FSDataset", "Deleting block {blk} file /mnt/hadoop/dfs/data/current/subdir{n}/{blk}"),
    ("dfs.FSNamesystem", "BLOCK* NameSystem.delete: {blk} is added to invalidSet of {ip}:{port}"),
    ("dfs.DataNode$DataXceiver", "{ip}:{port} Served block {blk} to /{ip}"),
    ("dfs.DataNode", "Starting thread to transfer block {blk} to {ip}:{port}"),
]
_NORMAL_DRIFT = [
    ("dfs.DataNode$DataTransfer", "Transmitted block {blk} to /{ip}:{port}"),
    ("dfs.FSNamesystem", "BLOCK* ask {ip}:{port} to replicate {blk} to datanode(s) {ip}:{port}"),
    ("dfs.DataNode", "Reopen Block {blk}"),
    ("dfs.FSNamesystem", "BLOCK* NameSystem.addStoredBlock: Redundant addStoredBlock request received for {blk} on {ip}:{port} size {size}"),
    ("dfs.DataBlockScanner", "Verification succeeded for {blk}"),
    ("dfs.DataNode$PacketResponder", "Received block {blk} of size {size} from {ip}"),
]
_ANOMALY = [
    ("dfs.DataNode$DataXceiver", "writeBlock {blk} received exception java.io.EOFException"),
    ("dfs.DataNode$DataXceiver", "Exception in receiveBlock for block {blk} java.io.IOException: Connection reset by peer"),
    ("dfs.DataNode$PacketResponder", "PacketResponder {blk} {n} Exception java.net.SocketTimeoutException: {size} millis timeout"),
]
_ANOMALY_DRIFT = [
    ("dfs.DataNode", "Failed to transfer {blk} to {ip}:{port} got java.io.IOException: Broken pipe"),
    ("dfs.FSNamesystem", "BLOCK* NameSystem.addStoredBlock: addStoredBlock request received for {blk} on {ip}:{port} size {size} But it does not belong to any file"),
]


class _Chain:
    def __init__(self, templates, rng: np.random.Generator) -> None:
        self.templates = templates
        n = len(templates)
        self.start = rng.dirichlet(np.full(n, 1.0))
        self.trans = rng.dirichlet(np.full(n, 0.4), size=n)

    def walk(self, length: int, rng: np.random.Generator) -> list[int]:
        state = int(rng.choice(len(self.templates), p=self.start))
        out = [state]
        for _ in range(length - 1):
            state = int(rng.choice(len(self.templates), p=self.trans[state]))
            out.append(state)
        return out


def _render(fmt: str, blk: str, rng: np.random.Generator) -> str:
    def ip() -> str:
        return "10.{}.{}.{}".format(*rng.integers(0, 256, 3))

    text = fmt.replace("{blk}", blk)
    while "{ip}" in text:
        text = text.replace("{ip}", ip(), 1)
    while "{port}" in text:
        text = text.replace("{port}", str(int(rng.integers(1024, 65535))), 1)
    while "{n}" in text:
        text = text.replace("{n}", str(int(rng.integers(0, 64))), 1)
    while "{size}" in text:
        text = text.replace("{size}", str(int(rng.integers(1, 1 << 27))), 1)
    return text


def generate(profile: str, size: int, seed: int) -> tuple[list[str], list[tuple[str, int]]]:
    """Return (log lines, [(block id, label)]) for ``size`` sessions."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    if size < 100:
        raise ValueError("size must be >= 100")
    rng = np.random.default_rng(seed)
    chains = [_Chain(_NORMAL, rng), _Chain(_NORMAL_DRIFT, rng)]
    anomaly_sets = [_ANOMALY, _ANOMALY_DRIFT]
    lines: list[str] = []
    labels: list[tuple[str, int]] = []
    seen: set[int] = set()
    clock = 0
    for i in range(size):
        phase = 1 if profile == "drift" and i >= size // 2 else 0
        chain = chains[phase]
        while True:
            raw_id = int(rng.integers(-(1 << 62), 1 << 62))
            if raw_id not in seen:
                seen.add(raw_id)
                break
        blk = f"blk_{raw_id}"
        anomalous = bool(rng.random() < ANOMALY_RATE)
        if anomalous:
            events = [chain.templates[j] for j in chain.walk(int(rng.integers(5, 8)), rng)]
            burst = anomaly_sets[phase]
            events += [burst[int(rng.integers(len(burst)))] for _ in range(int(rng.integers(2, 4)))]
        else:
            events = [chain.templates[j] for j in chain.walk(int(rng.integers(5, 11)), rng)]
        for component, fmt in events:
            clock += int(rng.integers(0, 3))
            hh, mm, ss = (clock // 3600) % 24, (clock // 60) % 60, clock % 60
            lines.append(f"081109 {hh:02d}{mm:02d}{ss:02d} {int(rng.integers(1, 999))} INFO {component}: "
                         f"{_render(fmt, blk, rng)}")
        label = int(anomalous)
        if profile == "noisy" and rng.random() < LABEL_NOISE:
            label = 1 - label
        labels.append((blk, label))
    return lines, labels


def write_corpus(profile: str, size: int, seed: int, out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``synth.log`` and ``labels.csv`` (``key,label``) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines, labels = generate(profile, size, seed)
    log_path = out_dir / "synth.log"
    label_path = out_dir / "labels.csv"
    log_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    label_path.write_text("key,label\n" + "".join(f"{k},{v}\n" for k, v in labels),
                          encoding="utf-8", newline="\n")
    return log_path, label_path
