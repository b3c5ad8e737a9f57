"""Word-level tokenization, BPE subword segmentation, and vocabularies.

BPE merges are learned on whitespace-token types initialized as character
sequences; the most frequent adjacent pair is merged each round until the
merge budget is spent or the best pair occurs fewer than twice. Ties break
lexicographically on (left, right) so learning is fully deterministic.

Segmentation is invertible: every non-final subword of a token carries a
continuation-marker suffix (default ``@@``) that ``undo_bpe`` strips.
"""

from __future__ import annotations

import hashlib
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

MIN_PAIR_FREQ = 2

UNK, PAD, BOS, EOS = "<unk>", "<pad>", "<s>", "</s>"
SPECIALS = (UNK, PAD, BOS, EOS)
UNK_ID, PAD_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

_MERGE_HEADER_PREFIX = "#bpe-merges v1"


class TokenizationError(Exception):
    pass


def whitespace_tokenize(line: str) -> list[str]:
    """Split on runs of Unicode whitespace; never yields empty tokens."""
    return line.split()


# ---------------------------------------------------------------------------
# BPE

@dataclass
class MergeTable:
    """Ordered BPE merges; list position is learning order (rank = priority)."""

    merges: list[tuple[str, str]] = field(default_factory=list)
    marker: str = "@@"

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise TokenizationError("duplicate merge pairs in table")

    def __len__(self) -> int:
        return len(self.merges)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(f"{_MERGE_HEADER_PREFIX} marker={self.marker} count={len(self.merges)}\n")
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path) -> "MergeTable":
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().rstrip("\n")
            if not header.startswith(_MERGE_HEADER_PREFIX):
                raise TokenizationError(f"not a merge file (bad header): {path}")
            fields = dict(part.split("=", 1) for part in header[len(_MERGE_HEADER_PREFIX):].split())
            marker = fields.get("marker", "@@")
            count = int(fields.get("count", "0"))
            merges = []
            for line in f:
                left, right = line.rstrip("\n").split(" ", 1)
                merges.append((left, right))
        if len(merges) != count:
            raise TokenizationError(
                f"merge file {path} declares {count} merges but contains {len(merges)}")
        return cls(merges=merges, marker=marker)


def _count_pairs(seq: Sequence[str]) -> Iterable[tuple[str, str]]:
    return zip(seq, seq[1:])


def _merge_once(seq: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    """Replace left-to-right, non-overlapping occurrences of pair."""
    left, right = pair
    out, i, n = [], 0, len(seq)
    while i < n:
        if i < n - 1 and seq[i] == left and seq[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return tuple(out)


def _word_frequencies(tokens) -> Counter:
    if isinstance(tokens, Mapping):
        return Counter(tokens)
    return Counter(tokens)


def learn_bpe(tokens, num_merges: int) -> MergeTable:
    """Learn a merge table from a token stream (or a word->frequency map).

    Stops early once the most frequent pair occurs fewer than twice.
    """
    freqs = _word_frequencies(tokens)
    if not freqs:
        raise TokenizationError("cannot learn BPE from an empty token stream")
    if num_merges < 0:
        raise TokenizationError("num_merges must be >= 0")

    words = list(freqs.items())
    seqs = [tuple(word) for word, _ in words]

    pair_counts: Counter = Counter()
    pair_to_words: dict[tuple[str, str], set[int]] = {}
    for idx, (seq, (_, freq)) in enumerate(zip(seqs, words)):
        for pair in _count_pairs(seq):
            pair_counts[pair] += freq
            pair_to_words.setdefault(pair, set()).add(idx)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges and pair_counts:
        best, best_count = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if best_count < MIN_PAIR_FREQ:
            break
        merges.append(best)
        # re-segment only the word types containing the merged pair
        for idx in sorted(pair_to_words.pop(best, ())):
            old = seqs[idx]
            freq = words[idx][1]
            new = _merge_once(old, best)
            for pair in _count_pairs(old):
                pair_counts[pair] -= freq
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                members = pair_to_words.get(pair)
                if members is not None:
                    members.discard(idx)
                    if not members:
                        del pair_to_words[pair]
            for pair in _count_pairs(new):
                pair_counts[pair] += freq
                pair_to_words.setdefault(pair, set()).add(idx)
            seqs[idx] = new
    return MergeTable(merges=merges)


def apply_bpe(tokens: Sequence[str], table: MergeTable,
              _cache: dict | None = None) -> list[str]:
    """Segment tokens into subwords, marking non-final pieces with the marker."""
    ranks = {pair: i for i, pair in enumerate(table.merges)}
    cache = _cache if _cache is not None else {}
    out: list[str] = []
    for token in tokens:
        pieces = cache.get(token)
        if pieces is None:
            seq = tuple(token)
            while len(seq) > 1:
                best = min(
                    (pair for pair in set(_count_pairs(seq)) if pair in ranks),
                    key=ranks.get, default=None)
                if best is None:
                    break
                seq = _merge_once(seq, best)
            pieces = [p + table.marker for p in seq[:-1]] + list(seq[-1:])
            cache[token] = pieces
        out.extend(pieces)
    return out


def undo_bpe(subwords: Sequence[str], marker: str = "@@") -> list[str]:
    """Join marker-suffixed subwords back into tokens (inverse of apply_bpe)."""
    tokens: list[str] = []
    current = ""
    pending = False
    for piece in subwords:
        if piece.endswith(marker):
            current += piece[: -len(marker)]
            pending = True
        else:
            tokens.append(current + piece)
            current = ""
            pending = False
    if pending:
        warnings.warn("dangling continuation marker on final subword; stripped")
        tokens.append(current)
    return tokens


# ---------------------------------------------------------------------------
# vocabularies

class Vocabulary:
    """Bidirectional token<->id map; ids 0-3 are always <unk> <pad> <s> </s>."""

    def __init__(self, tokens: Sequence[str]):
        for special in SPECIALS:
            if special in tokens:
                raise TokenizationError(f"special token {special} may not appear in tokens")
        if len(set(tokens)) != len(tokens):
            raise TokenizationError("duplicate tokens in vocabulary")
        self.id_to_token: list[str] = list(SPECIALS) + list(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def content_hash(self) -> str:
        """Stable digest of the full token list, for model/tokenizer pairing."""
        payload = "\n".join(self.id_to_token).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for token in self.id_to_token[len(SPECIALS):]:
                f.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        return cls(tokens)


def build_vocab(tokens, max_size: int, min_freq: int = 1) -> Vocabulary:
    """Most frequent tokens first (ties lexicographic), truncated to max_size
    non-special entries."""
    if max_size < 1:
        raise TokenizationError("max_size must be >= 1")
    if min_freq < 1:
        raise TokenizationError("min_freq must be >= 1")
    freqs = _word_frequencies(tokens)
    for special in SPECIALS:
        freqs.pop(special, None)
    ranked = sorted(freqs.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, freq in ranked if freq >= min_freq][:max_size]
    return Vocabulary(kept)


def encode_ids(tokens: Sequence[str], vocab: Vocabulary,
               add_sentinels: bool = False) -> list[int]:
    """Map tokens to ids; unknowns become <unk>, sentinels wrap if requested."""
    ids = [vocab.token_to_id.get(tok, UNK_ID) for tok in tokens]
    if add_sentinels:
        return [BOS_ID] + ids + [EOS_ID]
    return ids


def decode_ids(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Inverse of encode_ids on known tokens; special ids (0-3) are dropped."""
    out = []
    for i in ids:
        if not 0 <= i < len(vocab.id_to_token):
            raise TokenizationError(f"id {i} out of range for vocabulary of {len(vocab)}")
        if i >= len(SPECIALS):
            out.append(vocab.id_to_token[i])
    return out
