"""Dataset files (``.mvd``) and index containers (``.mvix``).

All formats are little-endian, magic-guarded and versioned; readers reject
truncation and trailing bytes and report the offending byte offset.

``.mvix`` layout: magic ``MVIX``, u16 version, u16 reserved, u32 header
length, a JSON header, then tagged sections (4-byte tag, u64 length,
payload) in a fixed order: LEVL, one ADJn per layer, TLVL, TAD0, TADU, ANT_.
Graph adjacency and navigation-table entries are packed (i4 id, f8 weight)
records, so cached weights round-trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from mvann.ant import AntTable, build_ant
from mvann.core import Dataset, Distance, FormatError, SimilarityConfig
from mvann.graph import IndexParams, MvIndex
from mvann.token_index import TokenHnswParams, TokenIndex, build_token_index

MVD_MAGIC = b"MVD1"
MVD_VERSION = 1
FLAG_WEIGHTS = 1
FLAG_NORMALIZED = 2
_MVD_HEADER = struct.Struct("<4sHHIQ")

MVIX_MAGIC = b"MVIX"
MVIX_VERSION = 1
_MVIX_HEADER = struct.Struct("<4sHHI")
_SECTION = struct.Struct("<4sQ")
_EDGE = np.dtype([("id", "<i4"), ("w", "<f8")])


class IndexMismatch(ValueError):
    """The index was built from a different dataset than the one supplied."""


# -- .mvd ---------------------------------------------------------------------

def mvd_bytes(dataset: Dataset) -> bytes:
    flags = (FLAG_WEIGHTS if dataset.has_weights else 0) | (FLAG_NORMALIZED if dataset.normalized else 0)
    parts = [_MVD_HEADER.pack(MVD_MAGIC, MVD_VERSION, flags, dataset.dim, len(dataset))]
    toks = dataset.tokens.astype("<f4", copy=False)
    wts = dataset.weights.astype("<f4", copy=False)
    offs = dataset.offsets
    for i in range(len(dataset)):
        s, e = offs[i], offs[i + 1]
        parts.append(struct.pack("<I", e - s))
        if flags & FLAG_WEIGHTS:
            parts.append(wts[s:e].tobytes())
        parts.append(toks[s:e].tobytes())
    return b"".join(parts)


def dataset_hash(dataset: Dataset) -> str:
    return hashlib.sha256(mvd_bytes(dataset)).hexdigest()


def write_mvd(path, dataset: Dataset) -> None:
    Path(path).write_bytes(mvd_bytes(dataset))


def parse_mvd(data: bytes, name: str = "<bytes>") -> Dataset:
    if len(data) < _MVD_HEADER.size:
        raise FormatError(f"{name}: truncated header at byte {len(data)}")
    magic, version, flags, dim, n = _MVD_HEADER.unpack_from(data, 0)
    if magic != MVD_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r} at byte 0")
    if version != MVD_VERSION:
        raise FormatError(f"{name}: unsupported version {version} at byte 4")
    if flags & ~(FLAG_WEIGHTS | FLAG_NORMALIZED):
        raise FormatError(f"{name}: unknown flags {flags:#x} at byte 6")
    if dim < 1:
        raise FormatError(f"{name}: dimension must be positive at byte 8")
    has_w = bool(flags & FLAG_WEIGHTS)
    pos = _MVD_HEADER.size
    counts = np.empty(n, dtype=np.int64)
    tok_at = np.empty(n, dtype=np.int64)
    w_at = np.empty(n, dtype=np.int64)
    for i in range(n):
        if pos + 4 > len(data):
            raise FormatError(f"{name}: truncated body at byte {pos} (object {i} of {n})")
        (c,) = struct.unpack_from("<I", data, pos)
        if c < 1:
            raise FormatError(f"{name}: object {i} has no tokens at byte {pos}")
        pos += 4
        w_at[i] = pos
        if has_w:
            pos += 4 * c
        tok_at[i] = pos
        pos += 4 * c * dim
        if pos > len(data):
            raise FormatError(f"{name}: truncated body at byte {len(data)} (object {i} needs {pos} bytes)")
        counts[i] = c
    if pos != len(data):
        raise FormatError(f"{name}: trailing data at byte {pos}")
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    T = int(offsets[-1])
    tokens = np.empty((T, dim), dtype=np.float32)
    weights = np.ones(T, dtype=np.float32)
    buf = np.frombuffer(data, dtype=np.uint8)
    for i in range(n):
        s, e = offsets[i], offsets[i + 1]
        tokens[s:e] = buf[tok_at[i]: tok_at[i] + 4 * (e - s) * dim].view("<f4").reshape(-1, dim)
        if has_w:
            weights[s:e] = buf[w_at[i]: w_at[i] + 4 * (e - s)].view("<f4")
    bad = ~np.isfinite(tokens)
    if bad.any():
        t, j = np.argwhere(bad)[0]
        i = int(np.searchsorted(offsets, t, side="right") - 1)
        raise FormatError(f"{name}: non-finite token value at byte {tok_at[i] + 4 * ((t - offsets[i]) * dim + j)}")
    badw = ~np.isfinite(weights) | (weights < 0) | (weights > 1)
    if badw.any():
        t = int(np.flatnonzero(badw)[0])
        i = int(np.searchsorted(offsets, t, side="right") - 1)
        raise FormatError(f"{name}: weight outside [0, 1] at byte {w_at[i] + 4 * (t - offsets[i])}")
    try:
        return Dataset(dim, tokens, offsets, weights, normalized=bool(flags & FLAG_NORMALIZED), has_weights=has_w)
    except ValueError as exc:
        raise FormatError(f"{name}: {exc}") from exc


def read_mvd(path) -> Dataset:
    return parse_mvd(Path(path).read_bytes(), str(path))


# -- index bundle -------------------------------------------------------------

@dataclass
class IndexBundle:
    index: MvIndex
    ant: AntTable
    token_index: TokenIndex
    build_seconds: dict | None = None

    @property
    def dataset(self) -> Dataset:
        return self.index.dataset

    def __iter__(self):
        return iter((self.index, self.ant, self.token_index))

    def audit(self) -> list[str]:
        problems = self.index.audit()
        problems += audit_ant(self.ant, self.dataset)
        return problems


def build_bundle(dataset: Dataset, params: IndexParams | None = None,
                 token_params: TokenHnswParams | None = None, threads: int = 1) -> IndexBundle:
    """Graph, token HNSW and navigation table over ``dataset``."""
    params = params or IndexParams()
    times = {}
    t0 = time.perf_counter()
    index = MvIndex.build(dataset, params)
    times["graph"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    tok = build_token_index(dataset, token_params, params.sim)
    times["token_index"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    ant = build_ant(dataset, tok, params.M, params.sim.gamma, threads)
    times["ant"] = time.perf_counter() - t0
    return IndexBundle(index, ant, tok, times)


def audit_ant(ant: AntTable, dataset: Dataset) -> list[str]:
    problems: list[str] = []
    if ant.n_tokens != dataset.n_tokens:
        return [f"navigation table covers {ant.n_tokens} tokens, dataset has {dataset.n_tokens}"]
    owner = dataset.owner
    n = len(dataset)
    for t in range(ant.n_tokens):
        m = int(ant.lengths[t])
        if not 0 <= m <= ant.M:
            problems.append(f"token {t}: list length {m} outside [0, {ant.M}]")
            continue
        tg = ant.targets[t, :m]
        sc = ant.scores[t, :m]
        if np.any((tg < 0) | (tg >= n)):
            problems.append(f"token {t}: target id out of range")
            continue
        if np.any(tg == owner[t]):
            problems.append(f"token {t}: list contains its own object {owner[t]}")
        if len(set(tg.tolist())) != m:
            problems.append(f"token {t}: duplicate targets")
        for r in range(1, m):
            if sc[r] > sc[r - 1] or (sc[r] == sc[r - 1] and tg[r] < tg[r - 1]):
                problems.append(f"token {t}: list not sorted at position {r}")
                break
    return problems


# -- .mvix ----------------------------------------------------------------------

def _sim_dict(sim: SimilarityConfig) -> dict:
    d = asdict(sim)
    d["distance"] = sim.distance.value
    return d


def _params_dict(p: IndexParams) -> dict:
    return {"M": p.M, "ef_construction": p.ef_construction, "m_L": p.m_L, "seed": p.seed,
            "approx_min_tokens": p.approx_min_tokens, "sim": _sim_dict(p.sim)}


def _params_from(d: dict) -> IndexParams:
    sim = dict(d["sim"])
    sim["distance"] = Distance(sim["distance"])
    return IndexParams(M=d["M"], ef_construction=d["ef_construction"], m_L=d["m_L"], seed=d["seed"],
                       approx_min_tokens=d["approx_min_tokens"], sim=SimilarityConfig(**sim))


def _edges(ids: np.ndarray, w: np.ndarray) -> bytes:
    rec = np.empty(ids.shape[0], dtype=_EDGE)
    rec["id"] = ids
    rec["w"] = w
    return rec.tobytes()


def _graph_layer(index: MvIndex, lc: int) -> bytes:
    members = np.flatnonzero(index.levels >= lc)
    deg = index.deg[lc, members].astype("<u4")
    mask = np.arange(index.adj.shape[2])[None, :] < deg[:, None]
    return deg.tobytes() + _edges(index.adj[lc, members][mask], index.adjw[lc, members][mask])


def save_index(path, bundle: IndexBundle, dataset_path: str | os.PathLike | None = None) -> None:
    index, ant, tok = bundle.index, bundle.ant, bundle.token_index
    ds = index.dataset
    header = {
        "format": "mvix",
        "dataset_sha256": dataset_hash(ds),
        "dataset_path": None if dataset_path is None else os.path.abspath(dataset_path),
        "n": len(ds),
        "n_tokens": ds.n_tokens,
        "dim": ds.dim,
        "params": _params_dict(index.params),
        "entry": index.entry,
        "top": index.top,
        "rng_state": index._rng.bit_generator.state,
        "token_params": asdict(tok.params),
        "token_entry": tok.entry,
        "token_top": tok.top,
        "token_metric": tok.metric,
        "ant": {"M": ant.M, "gamma": ant.gamma, "M_prime": ant.M_prime},
    }
    hj = json.dumps(header, sort_keys=True).encode()
    sections = [(b"LEVL", index.levels.astype("<i4").tobytes())]
    for lc in range(index.top + 1):
        sections.append((_layer_tag(lc), _graph_layer(index, lc)))
    sections.append((b"TLVL", tok.levels.astype("<i4").tobytes()))
    mask0 = np.arange(tok.adj0.shape[1])[None, :] < tok.deg0[:, None]
    sections.append((b"TAD0", tok.deg0.astype("<u4").tobytes() + tok.adj0[mask0].astype("<i4").tobytes()))
    upper = np.flatnonzero(tok.levels > 0)
    L = max(0, int(tok.levels.max()))
    degU = tok.degU[: upper.shape[0], :L] if upper.size else np.zeros((0, L), dtype=np.int32)
    maskU = np.arange(tok.adjU.shape[2])[None, None, :] < degU[:, :, None]
    sections.append((b"TADU", degU.astype("<u4").tobytes() + tok.adjU[: upper.shape[0], :L][maskU].astype("<i4").tobytes()))
    maskA = np.arange(ant.M)[None, :] < ant.lengths[:, None]
    sections.append((b"ANT_", ant.lengths.astype("<u4").tobytes() + _edges(ant.targets[maskA], ant.scores[maskA])))
    with open(path, "wb") as f:
        f.write(_MVIX_HEADER.pack(MVIX_MAGIC, MVIX_VERSION, 0, len(hj)))
        f.write(hj)
        for tag, payload in sections:
            f.write(_SECTION.pack(tag, len(payload)))
            f.write(payload)


def _layer_tag(lc: int) -> bytes:
    return b"ADJ%c" % (48 + lc) if lc < 10 else b"AD%02d" % lc


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.name = name
        self.pos = 0

    def fail(self, msg: str, at: int | None = None):
        raise FormatError(f"{self.name}: {msg} at byte {self.pos if at is None else at}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated file, need {n} more bytes", len(self.data))
        b = self.data[self.pos: self.pos + n]
        self.pos += n
        return b

    def section(self, tag: bytes) -> tuple[int, bytes]:
        at = self.pos
        got, n = _SECTION.unpack(self.take(_SECTION.size))
        if got != tag:
            self.fail(f"expected section {tag!r}, found {got!r}", at)
        start = self.pos
        return start, self.take(n)


def read_header(path) -> dict:
    data = Path(path).read_bytes()
    return _parse_header(_Reader(data, str(path)))


def _parse_header(r: _Reader) -> dict:
    if len(r.data) == 0:
        r.fail("empty index file", 0)
    magic, version, _, hlen = _MVIX_HEADER.unpack(r.take(_MVIX_HEADER.size))
    if magic != MVIX_MAGIC:
        r.fail(f"bad magic {magic!r}", 0)
    if version != MVIX_VERSION:
        r.fail(f"unsupported version {version}", 4)
    at = r.pos
    try:
        return json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        r.fail(f"malformed header ({exc})", at)


def section_offsets(path) -> dict[str, tuple[int, int]]:
    """Tag -> (payload offset, payload length) for every section of an index file."""
    r = _Reader(Path(path).read_bytes(), str(path))
    _parse_header(r)
    out = {}
    while r.pos < len(r.data):
        tag, n = _SECTION.unpack(r.take(_SECTION.size))
        out[tag.decode()] = (r.pos, n)
        r.take(n)
    return out


def _unpack_layer(r: _Reader, start: int, payload: bytes, members: np.ndarray, cap: int, n: int, lc: int):
    m = members.shape[0]
    if len(payload) < 4 * m:
        r.fail(f"layer {lc} section too short", start)
    deg = np.frombuffer(payload, dtype="<u4", count=m).astype(np.int64)
    bad = np.flatnonzero(deg > cap)
    if bad.size:
        r.fail(f"node {members[bad[0]]}: degree {deg[bad[0]]} exceeds capacity on layer {lc}", start + 4 * int(bad[0]))
    total = int(deg.sum())
    if len(payload) != 4 * m + _EDGE.itemsize * total:
        r.fail(f"layer {lc} section length does not match its degrees", start)
    rec = np.frombuffer(payload, dtype=_EDGE, offset=4 * m, count=total)
    ids = rec["id"].astype(np.int64)
    bad = np.flatnonzero((ids < 0) | (ids >= n))
    if bad.size:
        owner = members[np.searchsorted(np.cumsum(deg), bad[0], side="right")]
        r.fail(f"node {owner}: neighbour id {ids[bad[0]]} out of range on layer {lc}",
               start + 4 * m + _EDGE.itemsize * int(bad[0]))
    return deg, ids, rec["w"].astype(np.float64)


def load_index(path, dataset: Dataset | None = None) -> IndexBundle:
    """Load an index container; the dataset defaults to the path recorded at save time.

    Raises ``IndexMismatch`` when the dataset's content hash differs from the recorded one.
    """
    data = Path(path).read_bytes()
    r = _Reader(data, str(path))
    h = _parse_header(r)
    if dataset is None:
        if not h.get("dataset_path"):
            raise ValueError(f"{path}: no dataset path recorded; supply the dataset explicitly")
        dataset = read_mvd(h["dataset_path"])
    if dataset_hash(dataset) != h["dataset_sha256"]:
        raise IndexMismatch(f"{path}: dataset content hash differs from the one the index was built on")
    try:
        return _load_body(r, h, dataset)
    except (FormatError, IndexMismatch):
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed index body near byte {r.pos} ({exc})") from exc


def _load_body(r: _Reader, h: dict, dataset: Dataset) -> IndexBundle:
    data = r.data
    params = _params_from(h["params"])
    n, T = h["n"], h["n_tokens"]
    _, payload = r.section(b"LEVL")
    levels = np.frombuffer(payload, dtype="<i4").astype(np.int32)
    if levels.shape[0] != n:
        r.fail("level table has the wrong length")
    top = int(h["top"])
    L = max(1, top + 1)
    index = MvIndex(dataset, params)
    index._grow(n, L)
    index.levels = levels.copy()
    for lc in range(top + 1):
        start, payload = r.section(_layer_tag(lc))
        members = np.flatnonzero(levels >= lc)
        deg, ids, w = _unpack_layer(r, start, payload, members, params.M, n, lc)
        rows = np.repeat(members, deg)
        cols = np.arange(ids.shape[0]) - np.repeat(np.cumsum(deg) - deg, deg)
        index.adj[lc, rows, cols] = ids
        index.adjw[lc, rows, cols] = w
        index.deg[lc, members] = deg
    index.entry, index.top = int(h["entry"]), top
    index._rng.bit_generator.state = h["rng_state"]
    index._cluster_objects(0, n)

    tp = TokenHnswParams(**h["token_params"])
    _, payload = r.section(b"TLVL")
    tlev = np.frombuffer(payload, dtype="<i4").astype(np.int32)
    if tlev.shape[0] != T:
        r.fail("token level table has the wrong length")
    upper = np.flatnonzero(tlev > 0)
    TL = int(tlev.max()) if T else 0
    upper_row = np.full(T, -1, dtype=np.int64)
    upper_row[upper] = np.arange(upper.shape[0])
    start, payload = r.section(b"TAD0")
    deg0 = np.frombuffer(payload, dtype="<u4", count=T).astype(np.int32)
    adj0 = np.full((T, tp.M), -1, dtype=np.int64)
    ids = np.frombuffer(payload, dtype="<i4", offset=4 * T).astype(np.int64)
    if np.any(deg0 > tp.M) or ids.shape[0] != int(deg0.sum()) or np.any((ids < 0) | (ids >= T)):
        r.fail("token layer-0 adjacency is inconsistent", start)
    adj0[np.arange(tp.M)[None, :] < deg0[:, None]] = ids
    start, payload = r.section(b"TADU")
    R = upper.shape[0]
    degU = np.zeros((max(1, R), max(1, TL)), dtype=np.int32)
    adjU = np.full((max(1, R), max(1, TL), tp.M), -1, dtype=np.int64)
    du = np.frombuffer(payload, dtype="<u4", count=R * TL).astype(np.int32).reshape(R, TL)
    ids = np.frombuffer(payload, dtype="<i4", offset=4 * R * TL).astype(np.int64)
    if np.any(du > tp.M) or ids.shape[0] != int(du.sum()) or np.any((ids < 0) | (ids >= T)):
        r.fail("token upper-layer adjacency is inconsistent", start)
    degU[:R, :TL] = du
    adjU[:R, :TL][np.arange(tp.M)[None, None, :] < du[:, :, None]] = ids
    tok = TokenIndex(dataset, tp, int(h["token_metric"]), tlev, upper_row, adj0, deg0, adjU, degU,
                     int(h["token_entry"]), int(h["token_top"]))

    a = h["ant"]
    ant = AntTable.empty(T, a["M"], a["gamma"])
    start, payload = r.section(b"ANT_")
    lens = np.frombuffer(payload, dtype="<u4", count=T).astype(np.int32)
    if np.any(lens > a["M"]):
        r.fail("navigation list longer than M", start)
    rec = np.frombuffer(payload, dtype=_EDGE, offset=4 * T)
    if rec.shape[0] != int(lens.sum()):
        r.fail("navigation table length does not match its list lengths", start)
    mask = np.arange(a["M"])[None, :] < lens[:, None]
    ant.targets[mask] = rec["id"]
    ant.scores[mask] = rec["w"]
    ant.lengths[:] = lens
    if r.pos != len(data):
        r.fail("trailing data")
    return IndexBundle(index, ant, tok)
