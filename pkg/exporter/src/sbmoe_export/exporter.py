"""Batch text encoding and SBMV store writing.

The encoder runs in eval mode (no dropout), so exports are deterministic
for a given model and input. Mean pooling averages token states under the
attention mask; cls pooling takes the first token's state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

POOLING_MODES = ("mean", "cls")

STORE_MAGIC = b"SBMV"
STORE_VERSION = 1


class ExportError(Exception):
    """Bad input data (TSV problems, duplicate ids)."""


class ModelError(Exception):
    """The encoder could not be resolved or loaded."""


@dataclass(frozen=True)
class ExportSpec:
    model: str
    input_tsv: str
    output: str
    pooling: str = "mean"
    batch_size: int = 16
    max_length: int = 256

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ExportError(f"unknown pooling mode {self.pooling!r}")
        if self.batch_size < 1:
            raise ExportError("batch size must be >= 1")
        if self.max_length < 2:
            raise ExportError("max sequence length must be >= 2")


def read_tsv(path) -> list[tuple[str, str]]:
    """Parse ``id<TAB>text`` lines; ids must be unique and non-empty."""
    records: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ExportError(f"line {lineno}: expected 'id<TAB>text'")
            item_id, text = line.split("\t", 1)
            if not item_id:
                raise ExportError(f"line {lineno}: empty id")
            if item_id in seen:
                raise ExportError(f"line {lineno}: duplicate id {item_id!r}")
            seen.add(item_id)
            records.append((item_id, text))
    if not records:
        raise ExportError(f"{path}: no records")
    return records


def write_store(ids: list[str], vectors: np.ndarray, path) -> None:
    """Write vectors to the SBMV container (little-endian float32)."""
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<IIQ", STORE_VERSION, vectors.shape[1], len(ids)))
        for row, item_id in enumerate(ids):
            raw = item_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(vectors[row].tobytes())


def load_encoder(model_id: str):
    """Resolve a tokenizer/model pair from a hub name or local path."""
    import torch
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:
        raise ModelError(f"cannot resolve encoder {model_id!r}: {exc}") from exc
    model.eval()
    torch.set_grad_enabled(False)
    return tokenizer, model


def _pool(hidden, attention_mask, pooling: str):
    if pooling == "cls":
        return hidden[:, 0]
    mask = attention_mask.unsqueeze(-1).to(hidden.dtype)
    summed = (hidden * mask).sum(dim=1)
    counts = mask.sum(dim=1).clamp(min=1.0)
    return summed / counts


def encode_texts(tokenizer, model, texts: list[str], pooling: str,
                 batch_size: int, max_length: int) -> np.ndarray:
    """Embed texts in input order; returns a (len(texts), hidden) array."""
    import torch

    chunks = []
    for start in range(0, len(texts), batch_size):
        batch = texts[start:start + batch_size]
        encoded = tokenizer(batch, padding=True, truncation=True,
                            max_length=max_length, return_tensors="pt")
        with torch.no_grad():
            outputs = model(**encoded)
        pooled = _pool(outputs.last_hidden_state, encoded["attention_mask"], pooling)
        chunks.append(pooled.cpu().numpy().astype(np.float32))
    return np.concatenate(chunks, axis=0)


def export(spec: ExportSpec) -> dict:
    """Run the full pipeline; returns a small summary dict."""
    records = read_tsv(spec.input_tsv)
    tokenizer, model = load_encoder(spec.model)
    ids = [item_id for item_id, _ in records]
    texts = [text for _, text in records]
    vectors = encode_texts(tokenizer, model, texts, spec.pooling,
                           spec.batch_size, spec.max_length)
    write_store(ids, vectors, spec.output)
    return {"output": spec.output, "entries": len(ids),
            "dim": int(vectors.shape[1]), "pooling": spec.pooling}
