"""Models under test: a deterministic prologue-pattern baseline, a trainable
per-byte window classifier, and an adapter for external detector processes.

All detectors emit Detection lists; label maps inferred here are compared
against ground truth by the metrics module.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binary import CodeImage, LabelMap, parse_code_image
from .errors import (
    AdapterCrash,
    AdapterTimeout,
    EmptyCorpus,
    NonFiniteLoss,
    ProtocolViolation,
)
from .x86 import RETURN_OPCODES

LABELS = ("N", "S", "E")  # index order fixes argmax tie-breaking: N, then S, then E
OOR_TOKEN = 256  # window positions outside the section carry no feature


@dataclass(frozen=True)
class Detection:
    address: int
    label: str  # "S" or "E"
    confidence: float = 1.0


def validate_detections(detections: list[Detection], image: CodeImage) -> None:
    for det in detections:
        if det.label not in ("S", "E"):
            raise ValueError(f"bad detection label {det.label!r}")
        if image.section_at(det.address) is None:
            raise ValueError(f"detection at {det.address:#x} outside executable sections")


# ---------------------------------------------------------------------------
# Pattern-table baseline
# ---------------------------------------------------------------------------

Pattern = tuple[int | None, ...]  # None is a wildcard byte

DEFAULT_PATTERNS: tuple[tuple[Pattern, str], ...] = (
    ((0x55, 0x48, 0x89, 0xE5), "S"),  # push rbp; mov rbp,rsp
    ((0xF3, 0x0F, 0x1E, 0xFA), "S"),  # endbr64 prefix
    ((0xF3, 0x0F, 0x1E, 0xFA, 0x55), "S"),  # endbr64; push rbp
)


def parse_pattern_table(text: str) -> tuple[tuple[Pattern, str], ...]:
    """Parse a pattern table: one pattern per line, hex bytes with `??`
    wildcards, final token is the label tag."""
    table = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2 or tokens[-1] not in ("S", "E"):
            raise ValueError(f"line {lineno}: expected '<hex bytes...> <S|E>'")
        pattern: list[int | None] = []
        for tok in tokens[:-1]:
            if tok == "??":
                pattern.append(None)
            else:
                try:
                    pattern.append(int(tok, 16))
                except ValueError:
                    raise ValueError(f"line {lineno}: bad byte {tok!r}") from None
        table.append((tuple(pattern), tokens[-1]))
    return tuple(table)


def _match_at(data: bytes, pos: int, pattern: Pattern) -> bool:
    if pos + len(pattern) > len(data):
        return False
    return all(want is None or data[pos + i] == want for i, want in enumerate(pattern))


@dataclass(frozen=True)
class PatternDetector:
    """Purely syntactic baseline.

    With `extent_mode` (the default) the scanner behaves like a conservative
    recursive sweep: candidate starts are only considered at section starts
    and at anchor-aligned addresses, the position immediately following a
    matched function's return is treated as inter-function slack, and the
    scanner otherwise resumes at the next anchor. The slack decision is
    scanner state, not a byte read, so detections never depend on the bytes
    inside boundary padding; that is what keeps the baseline indifferent to
    epilogue-pad rewrites (at the cost of missing a start butted directly
    against the previous return). With `extent_mode=False` every byte offset
    is matched (and E is emitted at every return opcode), which is the
    deliberately fragile configuration.
    """

    table: tuple[tuple[Pattern, str], ...] = DEFAULT_PATTERNS
    extent_mode: bool = True
    anchor_alignment: int = 16
    return_opcodes: frozenset[int] = RETURN_OPCODES
    detector_id: str = "pattern"

    def fingerprint(self) -> str:
        blob = repr((self.table, self.extent_mode, self.anchor_alignment,
                     sorted(self.return_opcodes))).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def detect(self, image: CodeImage) -> list[Detection]:
        detections: list[Detection] = []
        for sec in image.executable_sections:
            if self.extent_mode:
                detections.extend(self._scan_extents(sec.data, sec.virtual_address))
            else:
                detections.extend(self._scan_all_offsets(sec.data, sec.virtual_address))
        detections.sort(key=lambda d: (d.address, d.label))
        return detections

    __call__ = detect

    def _s_patterns(self) -> list[Pattern]:
        return [pat for pat, tag in self.table if tag == "S"]

    def _scan_all_offsets(self, data: bytes, base: int) -> list[Detection]:
        out = []
        patterns = self._s_patterns()
        for pos in range(len(data)):
            if any(_match_at(data, pos, p) for p in patterns):
                out.append(Detection(base + pos, "S"))
            if data[pos] in self.return_opcodes:
                out.append(Detection(base + pos, "E"))
        return out

    def _next_anchor(self, base: int, pos: int) -> int:
        step = self.anchor_alignment
        addr = base + pos
        return (addr // step + 1) * step - base

    def _scan_extents(self, data: bytes, base: int) -> list[Detection]:
        out = []
        patterns = self._s_patterns()
        pos = 0
        slack_pos = -1  # byte right after the last matched extent's return
        while pos < len(data):
            anchored = pos == 0 or (base + pos) % self.anchor_alignment == 0
            if (
                anchored
                and pos != slack_pos
                and any(_match_at(data, pos, p) for p in patterns)
            ):
                out.append(Detection(base + pos, "S"))
                ret = pos
                while ret < len(data) and data[ret] not in self.return_opcodes:
                    ret += 1
                if ret < len(data):
                    out.append(Detection(base + ret, "E"))
                    pos = ret + 1
                    slack_pos = pos
                else:
                    pos = len(data)
                continue
            pos = self._next_anchor(base, pos)
        return out


def detect_pattern(
    image: CodeImage,
    table: tuple[tuple[Pattern, str], ...] = DEFAULT_PATTERNS,
    extent_mode: bool = True,
) -> list[Detection]:
    return PatternDetector(table=table, extent_mode=extent_mode).detect(image)


# ---------------------------------------------------------------------------
# Trainable one-hot byte-window classifier
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    radius: int = 8
    epochs: int = 30
    learning_rate: float = 0.5
    class_weighting: tuple[int, int, int] = (1, 1, 20)  # kept S : E : N proportions
    batch_size: int = 512


@dataclass
class WindowClassifierModel:
    """Multinomial linear classifier over one-hot byte windows.

    Weights have shape (2*radius+1, 257, 3); feature column 256 is the
    reserved out-of-range token and stays zero so edge windows contribute
    nothing for missing positions.
    """

    radius: int
    weights: np.ndarray
    bias: np.ndarray
    training_meta: dict = field(default_factory=dict)
    detector_id: str = "window"
    confidence_threshold: float = 0.0

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.weights.tobytes())
        h.update(self.bias.tobytes())
        return h.hexdigest()[:16]

    def logits_for(self, data: bytes) -> np.ndarray:
        window = 2 * self.radius + 1
        arr = np.full(len(data) + 2 * self.radius, OOR_TOKEN, dtype=np.int32)
        arr[self.radius : self.radius + len(data)] = np.frombuffer(data, dtype=np.uint8)
        logits = np.broadcast_to(self.bias, (len(data), 3)).copy()
        for j in range(window):
            logits += self.weights[j, arr[j : j + len(data)]]
        return logits

    def detect(self, image: CodeImage) -> list[Detection]:
        detections: list[Detection] = []
        for sec in image.executable_sections:
            logits = self.logits_for(sec.data)
            shifted = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            choice = np.argmax(logits, axis=1)  # first max wins: N, then S, then E
            for pos in np.nonzero(choice)[0]:
                label = LABELS[choice[pos]]
                conf = float(probs[pos, choice[pos]])
                if conf >= self.confidence_threshold:
                    detections.append(Detection(sec.virtual_address + int(pos), label, conf))
        detections.sort(key=lambda d: (d.address, d.label))
        return detections

    __call__ = detect

    def save(self, path_prefix: str | Path) -> None:
        prefix = Path(path_prefix)
        np.save(prefix.with_suffix(".npy"), np.concatenate(
            [self.weights.reshape(-1), self.bias.reshape(-1)]
        ).astype(np.float64))
        meta = dict(self.training_meta)
        meta["radius"] = self.radius
        meta["confidence_threshold"] = self.confidence_threshold
        prefix.with_suffix(".meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="ascii"
        )

    @classmethod
    def load(cls, path_prefix: str | Path) -> "WindowClassifierModel":
        prefix = Path(path_prefix)
        meta = json.loads(prefix.with_suffix(".meta.json").read_text(encoding="ascii"))
        radius = int(meta.pop("radius"))
        threshold = float(meta.pop("confidence_threshold", 0.0))
        flat = np.load(prefix.with_suffix(".npy"))
        window = 2 * radius + 1
        weights = flat[: window * 257 * 3].reshape(window, 257, 3)
        bias = flat[window * 257 * 3 :].reshape(3)
        return cls(radius=radius, weights=weights, bias=bias, training_meta=meta,
                   confidence_threshold=threshold)


def _window_matrix(data: np.ndarray, positions: np.ndarray, radius: int) -> np.ndarray:
    padded = np.full(len(data) + 2 * radius, OOR_TOKEN, dtype=np.int32)
    padded[radius : radius + len(data)] = data
    offsets = np.arange(2 * radius + 1)
    return padded[positions[:, None] + offsets[None, :]]


def build_training_set(
    pairs: list[tuple[CodeImage, LabelMap]],
    radius: int,
    class_weighting: tuple[int, int, int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Window matrix X (n, 2r+1) and label vector y with N downsampled to the
    requested S:E:N proportion."""
    xs: list[np.ndarray] = []
    ys: list[np.ndarray] = []
    w_s, _w_e, w_n = class_weighting
    for image, lm in pairs:
        for sec in image.executable_sections:
            data = np.frombuffer(sec.data, dtype=np.uint8).astype(np.int32)
            labels = np.zeros(len(data), dtype=np.int64)
            starts = np.array(
                [a - sec.virtual_address for a in lm.starts if sec.contains(a)], dtype=np.int64
            )
            ends = np.array(
                [a - sec.virtual_address for a in lm.ends if sec.contains(a)], dtype=np.int64
            )
            labels[starts] = 1
            labels[ends] = 2
            n_positions = np.nonzero(labels == 0)[0]
            n_keep = min(len(n_positions), max(1, int(len(starts) * w_n / max(w_s, 1))))
            if len(n_positions) > n_keep:
                n_positions = np.sort(
                    rng.choice(n_positions, size=n_keep, replace=False)
                )
            positions = np.concatenate([starts, ends, n_positions])
            xs.append(_window_matrix(data, positions, radius))
            ys.append(labels[positions])
    return np.concatenate(xs), np.concatenate(ys)


def softmax_cross_entropy(
    weights: np.ndarray, bias: np.ndarray, x: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy loss plus gradients for one mini-batch."""
    n, window = x.shape
    logits = bias[None, :].repeat(n, axis=0)
    for j in range(window):
        logits += weights[j, x[:, j]]
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    loss = float(-np.log(probs[np.arange(n), y] + 1e-300).mean())
    grad_logits = probs
    grad_logits[np.arange(n), y] -= 1.0
    grad_logits /= n
    grad_w = np.zeros_like(weights)
    for j in range(window):
        np.add.at(grad_w[j], x[:, j], grad_logits)
    grad_w[:, OOR_TOKEN, :] = 0.0  # reserved token carries no feature
    grad_b = grad_logits.sum(axis=0)
    return loss, grad_w, grad_b


def corpus_fingerprint(pairs: list[tuple[CodeImage, LabelMap]]) -> str:
    h = hashlib.sha256()
    for image, lm in sorted(pairs, key=lambda p: p[0].id):
        h.update(image.id.encode())
        h.update(hashlib.sha256(image.to_bytes()).digest())
        h.update(repr((lm.starts, lm.ends)).encode())
    return h.hexdigest()[:16]


def train_window_classifier(
    pairs: list[tuple[CodeImage, LabelMap]],
    hyper: TrainConfig = TrainConfig(),
    seed: int = 0,
    warm_start: WindowClassifierModel | None = None,
) -> WindowClassifierModel:
    """Train (or, with warm_start, continue training) the window classifier
    with deterministic mini-batch gradient descent."""
    if not pairs:
        raise EmptyCorpus("no training binaries")
    if hyper.radius < 1:
        raise ValueError("radius must be >= 1")
    rng = np.random.default_rng(seed)
    x, y = build_training_set(pairs, hyper.radius, hyper.class_weighting, rng)

    window = 2 * hyper.radius + 1
    if warm_start is not None:
        if warm_start.radius != hyper.radius:
            raise ValueError("warm start radius differs from hyper.radius")
        weights = warm_start.weights.copy()
        bias = warm_start.bias.copy()
    else:
        weights = np.zeros((window, 257, 3), dtype=np.float64)
        bias = np.zeros(3, dtype=np.float64)

    final_loss = float("nan")
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(y))
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, len(order), hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            loss, grad_w, grad_b = softmax_cross_entropy(weights, bias, x[idx], y[idx])
            weights -= hyper.learning_rate * grad_w
            bias -= hyper.learning_rate * grad_b
            epoch_loss += loss
            batches += 1
        final_loss = epoch_loss / max(batches, 1)
        if not np.isfinite(final_loss):
            raise NonFiniteLoss(epoch, final_loss)

    meta = {
        "seed": seed,
        "epochs": hyper.epochs,
        "learning_rate": hyper.learning_rate,
        "class_weighting": list(hyper.class_weighting),
        "corpus_fingerprint": corpus_fingerprint(pairs),
        "final_loss": final_loss,
        "n_samples": int(len(y)),
        "warm_start": warm_start.fingerprint() if warm_start is not None else None,
    }
    return WindowClassifierModel(
        radius=hyper.radius, weights=weights, bias=bias, training_meta=meta
    )


def infer_window_classifier(model: WindowClassifierModel, image: CodeImage) -> list[Detection]:
    return model.detect(image)


# ---------------------------------------------------------------------------
# External detector adapter
# ---------------------------------------------------------------------------

def run_external_detector(
    adapter: list[str],
    binary_path: str | Path,
    timeout: float = 60.0,
) -> list[Detection]:
    """Invoke `<cmd> <binary_path>` and parse stdout lines of the form
    `<hex-address> <S|E>`; addresses are validated against the binary."""
    binary_path = Path(binary_path)
    image = parse_code_image(binary_path.read_bytes(), image_id=binary_path.stem)
    try:
        proc = subprocess.run(
            [*adapter, str(binary_path)],
            capture_output=True,
            text=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired as exc:
        raise AdapterTimeout(f"{adapter[0]} exceeded {timeout}s") from exc
    if proc.returncode != 0:
        raise AdapterCrash(proc.returncode, proc.stderr)

    detections = []
    for lineno, line in enumerate(proc.stdout.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("S", "E"):
            raise ProtocolViolation(f"expected '<hex-address> <S|E>', got {line!r}", lineno)
        try:
            addr = int(parts[0], 16)
        except ValueError:
            raise ProtocolViolation(f"bad address {parts[0]!r}", lineno) from None
        if image.section_at(addr) is None:
            raise ProtocolViolation(f"address {parts[0]} outside executable sections", lineno)
        detections.append(Detection(addr, parts[1]))
    detections.sort(key=lambda d: (d.address, d.label))
    return detections


@dataclass(frozen=True)
class ExternalDetector:
    """Detector-protocol wrapper around an external command."""

    command: tuple[str, ...]
    timeout: float = 60.0
    detector_id: str = "external"

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self.command).encode()).hexdigest()[:16]

    def detect(self, image: CodeImage) -> list[Detection]:
        with tempfile.NamedTemporaryFile(suffix=".elf") as handle:
            handle.write(image.to_bytes())
            handle.flush()
            return run_external_detector(list(self.command), handle.name, self.timeout)

    __call__ = detect
