"""Embedding store I/O, TREC-format parsing, and synthetic data generation.

Embeddings live on disk as float32 in the SBMV container and are widened
to float64 in memory.  Qrels and runs use the plain whitespace-separated
TREC exchange formats.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericError, ParseError

log = logging.getLogger(__name__)

STORE_MAGIC = b"SBMV"
STORE_VERSION = 1


class EmbeddingStore:
    """Ordered id-addressed matrix of fixed-dimension embedding vectors."""

    def __init__(self, dim: int, ids: list[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64).reshape(len(ids), dim)
        if len(set(ids)) != len(ids):
            raise DataError("duplicate ids in embedding store")
        if not np.all(np.isfinite(vectors)):
            raise DataError("embedding store contains non-finite values")
        self.dim = int(dim)
        self.ids = list(ids)
        self.vectors = vectors
        self._index = {item_id: row for row, item_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._index

    def get(self, item_id: str) -> np.ndarray:
        return self.vectors[self._index[item_id]]

    def subset(self, ids) -> "EmbeddingStore":
        ids = list(ids)
        missing = [i for i in ids if i not in self._index]
        if missing:
            raise DataError(f"ids not present in store: {missing[:5]}")
        rows = [self._index[i] for i in ids]
        return EmbeddingStore(self.dim, ids, self.vectors[rows].copy())

    def to_bytes(self) -> bytes:
        """Canonical SBMV serialization (also the digest preimage)."""
        parts = [STORE_MAGIC, struct.pack("<IIQ", STORE_VERSION, self.dim, len(self.ids))]
        vecs32 = np.ascontiguousarray(self.vectors, dtype="<f4")
        for row, item_id in enumerate(self.ids):
            raw = item_id.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(vecs32[row].tobytes())
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def write_store(store: EmbeddingStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(store.to_bytes())


def read_store(path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<4sIIQ")
    if len(blob) < header:
        raise FormatError("store file shorter than its header", offset=len(blob))
    magic, version, dim, count = struct.unpack_from("<4sIIQ", blob)
    if magic != STORE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != STORE_VERSION:
        raise FormatError(f"unsupported store version {version}", offset=4)

    offset = header
    ids: list[str] = []
    vectors = np.empty((count, dim), dtype=np.float64)
    vec_bytes = 4 * dim
    for row in range(count):
        if offset + 4 > len(blob):
            raise FormatError(f"truncated id length in record {row}", offset=offset)
        (id_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + id_len > len(blob):
            raise FormatError(f"truncated id in record {row}", offset=offset)
        try:
            item_id = blob[offset:offset + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record {row} id is not valid UTF-8: {exc}", offset=offset)
        offset += id_len
        if offset + vec_bytes > len(blob):
            raise FormatError(f"truncated vector in record {row}", offset=offset)
        vectors[row] = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
        ids.append(item_id)
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after last record",
                          offset=offset)
    return EmbeddingStore(dim, ids, vectors)


Qrels = dict[str, dict[str, int]]
Run = dict[str, list[tuple[str, float]]]


def parse_qrels(path) -> Qrels:
    """TREC qrels: ``query-id 0 doc-id grade``.  Duplicate pairs: last wins."""
    qrels: Qrels = {}
    duplicates = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 4:
                raise ParseError(f"expected 4 fields, got {len(fields)}", line=lineno)
            qid, _, did, grade_text = fields
            try:
                grade = int(grade_text)
            except ValueError:
                raise ParseError(f"relevance grade {grade_text!r} is not an integer",
                                 line=lineno) from None
            if grade < 0:
                raise ParseError(f"negative relevance grade {grade}", line=lineno)
            by_doc = qrels.setdefault(qid, {})
            if did in by_doc:
                duplicates += 1
            by_doc[did] = grade
    if duplicates:
        log.warning("%d duplicate (query, doc) qrels entries; last value kept", duplicates)
    return qrels


def parse_run(path) -> Run:
    """TREC run: ``query-id Q0 doc-id rank score tag`` with sane orderings."""
    run: Run = {}
    seen: dict[str, set[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 6:
                raise ParseError(f"expected 6 fields, got {len(fields)}", line=lineno)
            qid, _, did, rank_text, score_text, _ = fields
            try:
                rank = int(rank_text)
                score = float(score_text)
            except ValueError:
                raise ParseError("rank/score fields are not numeric", line=lineno) from None
            docs = run.setdefault(qid, [])
            if did in seen.setdefault(qid, set()):
                raise ParseError(f"duplicate document {did!r} for query {qid!r}",
                                 line=lineno)
            if rank != len(docs) + 1:
                raise ParseError(f"rank {rank} out of sequence (expected {len(docs) + 1})",
                                 line=lineno)
            if docs and score > docs[-1][1]:
                raise ParseError("scores increase with rank", line=lineno)
            docs.append((did, score))
            seen[qid].add(did)
    return run


def write_run(run: Run, path, tag: str = "sbmoe") -> None:
    """Scores print with 6 decimals; queries sort by id for stable output."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run):
            for rank, (did, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid} Q0 {did} {rank} {score:.6f} {tag}\n")


def pairs_from_qrels(qrels: Qrels) -> list[tuple[str, str]]:
    """One (query, doc) training pair per positive judgment, sorted."""
    return sorted((q, d) for q, docs in qrels.items() for d, g in docs.items() if g > 0)


@dataclass(frozen=True)
class SyntheticSpec:
    dim: int
    n_domains: int
    docs_per_domain: int
    queries_per_domain: int
    noise: float
    seed: int

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("dimension must be >= 2")
        if self.n_domains < 1:
            raise ConfigError("need at least one domain")
        if self.docs_per_domain < 1 or self.queries_per_domain < 1:
            raise ConfigError("need at least one doc and one query per domain")
        if self.noise < 0:
            raise ConfigError("noise level must be >= 0")


def _random_rotation(dim: int, rng) -> np.ndarray:
    """QR-orthogonalized Gaussian matrix with determinant fixed to +1."""
    g = rng.gaussian_array((dim, dim))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    return q


# Fraction of the embedding space the domain rotations act on.  Rotating a
# subspace (rather than the whole space) keeps the retrieval fix linearly
# expressible by skip-connected adapters: damping the moving subspace
# restores query/document alignment, so the task measures optimization and
# routing machinery rather than model capacity.
_MOVING_FRACTION = 0.45


def _domain_rotation(dim: int, moving_basis: np.ndarray, rng) -> np.ndarray:
    """Rotation acting inside the shared moving subspace, identity elsewhere.

    The block rotation has determinant +1, hence so does the whole matrix.
    """
    m = moving_basis.shape[1]
    block = _random_rotation(m, rng)
    return np.eye(dim) + moving_basis @ (block - np.eye(m)) @ moving_basis.T


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise NumericError("cannot normalize a zero vector")
    return v / norm


def generate_synthetic(spec: SyntheticSpec, rotations=None):
    """Multi-domain retrieval task: per-domain rotated queries.

    Documents are unit-normalized Gaussians.  Query ``i`` of a domain
    targets document ``i mod docs_per_domain`` and equals the domain's
    rotation of that document plus Gaussian noise, renormalized.  The
    rotations are sampled independently per domain but act inside one
    shared random subspace covering ``_MOVING_FRACTION`` of the dimensions.
    Ids carry the domain (``d<j>-``/``q<j>-`` prefixes).  ``rotations``
    overrides the per-domain rotation matrices (meant for tests).

    Returns ``(query_store, doc_store, qrels)``.
    """
    from .numerics import SeededRng

    rng = SeededRng(spec.seed)
    moving_dims = min(spec.dim, max(2, round(_MOVING_FRACTION * spec.dim)))
    moving_basis, _ = np.linalg.qr(
        rng.derive("moving-subspace").gaussian_array((spec.dim, moving_dims)))

    doc_ids: list[str] = []
    query_ids: list[str] = []
    doc_vecs = np.empty((spec.n_domains * spec.docs_per_domain, spec.dim))
    query_vecs = np.empty((spec.n_domains * spec.queries_per_domain, spec.dim))
    qrels: Qrels = {}

    for j in range(spec.n_domains):
        domain_rng = rng.derive(f"domain-{j}")
        rotation = (np.asarray(rotations[j], dtype=np.float64) if rotations is not None
                    else _domain_rotation(spec.dim, moving_basis, domain_rng.derive("rotation")))
        doc_rng = domain_rng.derive("docs")
        noise_rng = domain_rng.derive("query-noise")

        base = j * spec.docs_per_domain
        for i in range(spec.docs_per_domain):
            doc_ids.append(f"d{j}-{i:05d}")
            doc_vecs[base + i] = _unit(doc_rng.gaussian_array((spec.dim,)))

        qbase = j * spec.queries_per_domain
        for i in range(spec.queries_per_domain):
            qid = f"q{j}-{i:05d}"
            src = i % spec.docs_per_domain
            query_ids.append(qid)
            vec = rotation @ doc_vecs[base + src]
            if spec.noise > 0:
                vec = vec + spec.noise * noise_rng.gaussian_array((spec.dim,))
            query_vecs[qbase + i] = _unit(vec)
            qrels[qid] = {doc_ids[base + src]: 1}

    return (EmbeddingStore(spec.dim, query_ids, query_vecs),
            EmbeddingStore(spec.dim, doc_ids, doc_vecs),
            qrels)


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for did in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {did} {qrels[qid][did]}\n")
