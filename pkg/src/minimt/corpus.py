"""Parallel-corpus loading and length-bucketed token batching.

Input files are plain UTF-8, one pre-tokenized sentence per line (LF or
CRLF). Pairs with an empty side are dropped at load time and counted, so
the effective corpus size is always reported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tokenization import PAD_ID, Vocabulary, encode_ids, whitespace_tokenize

logger = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "dev", "test")


class CorpusError(Exception):
    pass


@dataclass
class LoadReport:
    loaded: int
    dropped_empty: int

    def line(self) -> str:
        return f"loaded={self.loaded} dropped_empty={self.dropped_empty}"


@dataclass
class ParallelCorpus:
    """Aligned source/target sentence pairs for one split."""

    pairs: list[tuple[str, str]]
    split_tag: str = "train"
    report: Optional[LoadReport] = None

    def __post_init__(self):
        if self.split_tag not in SPLIT_TAGS:
            raise CorpusError(f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}")
        for src, tgt in self.pairs:
            if not src.strip() or not tgt.strip():
                raise CorpusError("corpus pair with an empty side")

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list[str]:
        return [src for src, _ in self.pairs]

    def targets(self) -> list[str]:
        return [tgt for _, tgt in self.pairs]


def _read_lines(path) -> list[str]:
    with open(path, "rb") as f:
        raw = f.read()
    blob = raw.split(b"\n")
    if blob and blob[-1] == b"":
        blob = blob[:-1]
    lines = []
    for lineno, chunk in enumerate(blob, start=1):
        if chunk.endswith(b"\r"):
            chunk = chunk[:-1]
        try:
            lines.append(chunk.decode("utf-8"))
        except UnicodeDecodeError as err:
            raise CorpusError(f"invalid UTF-8 on line {lineno} of {path}: {err}") from None
    return lines


def load_parallel(src_path, tgt_path, split_tag: str = "train") -> ParallelCorpus:
    """Pair up two aligned one-sentence-per-line files.

    Pairs where either side is empty or whitespace-only are dropped and
    counted in the attached load report.
    """
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"line counts differ: {len(src_lines)} vs {len(tgt_lines)} "
            f"({src_path} vs {tgt_path})")
    pairs, dropped = [], 0
    for src, tgt in zip(src_lines, tgt_lines):
        if not src.strip() or not tgt.strip():
            dropped += 1
            continue
        pairs.append((src, tgt))
    report = LoadReport(loaded=len(pairs), dropped_empty=dropped)
    logger.info("%s", report.line())
    return ParallelCorpus(pairs=pairs, split_tag=split_tag, report=report)


def save_parallel(corpus: ParallelCorpus, src_path, tgt_path) -> None:
    """Write the corpus back as two aligned files (LF line endings)."""
    with open(src_path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(src + "\n" for src, _ in corpus.pairs)
    with open(tgt_path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(tgt + "\n" for _, tgt in corpus.pairs)


@dataclass
class Batch:
    """Padded id matrices with non-pad masks; rows align with pair_indices."""

    src_ids: np.ndarray
    tgt_ids: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    pair_indices: list[int]

    def non_pad_tokens(self) -> int:
        return int(self.src_mask.sum() + self.tgt_mask.sum())


def _pad_matrix(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, seq in enumerate(seqs):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    return ids, mask


def make_batches(
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    token_budget: int = 4096,
    max_len: int = 100,
    seed: int = 0,
    src_transform: Optional[Callable[[list[str]], list[str]]] = None,
    tgt_transform: Optional[Callable[[list[str]], list[str]]] = None,
) -> tuple[list[Batch], int]:
    """Encode, drop over-length pairs, and pack length-sorted batches.

    ``*_transform`` hooks re-segment token lists (BPE) before encoding.
    Length limits apply after transformation, excluding sentinels. Each
    batch obeys ``rows * (padded src width + padded tgt width) <= token_budget``.
    Returns (batches in seed-shuffled order, number of dropped pairs).
    """
    if token_budget < 1 or max_len < 1:
        raise CorpusError("token_budget and max_len must be positive")
    encoded = []
    dropped = 0
    for index, (src, tgt) in enumerate(corpus.pairs):
        src_toks = whitespace_tokenize(src)
        tgt_toks = whitespace_tokenize(tgt)
        if src_transform is not None:
            src_toks = src_transform(src_toks)
        if tgt_transform is not None:
            tgt_toks = tgt_transform(tgt_toks)
        if len(src_toks) > max_len or len(tgt_toks) > max_len:
            dropped += 1
            continue
        src_ids = encode_ids(src_toks, src_vocab, add_sentinels=True)
        tgt_ids = encode_ids(tgt_toks, tgt_vocab, add_sentinels=True)
        if len(src_ids) + len(tgt_ids) > token_budget:
            raise CorpusError(
                f"token_budget {token_budget} cannot hold pair {index} "
                f"({len(src_ids)}+{len(tgt_ids)} tokens)")
        encoded.append((index, src_ids, tgt_ids))

    if dropped:
        logger.info("dropped_too_long=%d of %d pairs", dropped, len(corpus.pairs))
    if not encoded:
        return [], dropped

    encoded.sort(key=lambda item: (len(item[1]), len(item[2]), item[0]))
    batches: list[list[tuple[int, list[int], list[int]]]] = [[]]
    src_w = tgt_w = 0
    for item in encoded:
        cur = batches[-1]
        new_src_w = max(src_w, len(item[1]))
        new_tgt_w = max(tgt_w, len(item[2]))
        if cur and (len(cur) + 1) * (new_src_w + new_tgt_w) > token_budget:
            batches.append([item])
            src_w, tgt_w = len(item[1]), len(item[2])
        else:
            cur.append(item)
            src_w, tgt_w = new_src_w, new_tgt_w

    built = []
    for group in batches:
        src_ids, src_mask = _pad_matrix([g[1] for g in group])
        tgt_ids, tgt_mask = _pad_matrix([g[2] for g in group])
        built.append(Batch(src_ids=src_ids, tgt_ids=tgt_ids, src_mask=src_mask,
                           tgt_mask=tgt_mask, pair_indices=[g[0] for g in group]))
    order = np.random.default_rng(seed).permutation(len(built))
    return [built[i] for i in order], dropped
