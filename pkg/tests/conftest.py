"""Shared helpers: synthetic parallel corpora and the brute-force BPE oracle."""

import random
from collections import Counter
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent

_EN_WORDS = [
    "the", "a", "one", "people", "student", "holy", "spirit", "body", "hall",
    "kingdom", "water", "house", "child", "man", "woman", "day", "time",
    "word", "work", "eye", "hand", "heart", "way", "thing", "life", "love",
    "learn", "help", "come", "go", "see", "know", "make", "take", "give",
    "start", "read", "speak", "hear", "walk", "eat", "drink", "good", "bad",
    "big", "small", "new", "old", "true", "happy", "from", "with", "for",
    "and", "but", "what", "how", "when", "we", "you", "they", "he", "she",
]

_PCM_WORDS = [
    "di", "one", "pipo", "student", "holy", "spirit", "body", "hall",
    "kingdom", "wota", "house", "pikin", "man", "woman", "day", "time",
    "word", "work", "eye", "hand", "heart", "road", "tin", "life", "love",
    "learn", "help", "come", "go", "see", "sabi", "make", "take", "give",
    "start", "read", "tok", "hear", "waka", "chop", "drink", "good", "bad",
    "big", "small", "new", "old", "true", "happy", "from", "wit", "for",
    "and", "but", "wetin", "how", "when", "we", "una", "dem", "e", "im",
    "dey", "don", "fit", "go", "na", "abeg", "oga", "wahala",
]

_EN_TO_PCM = {
    "the": "di", "people": "pipo", "water": "wota", "child": "pikin",
    "know": "sabi", "speak": "tok", "walk": "waka", "eat": "chop",
    "thing": "tin", "way": "road", "what": "wetin", "with": "wit",
    "they": "dem", "he": "e", "she": "im", "you": "una", "can": "fit",
    "is": "na", "has": "don",
}


def synth_line(rng: random.Random, words, min_len=3, max_len=12) -> str:
    n = rng.randint(min_len, max_len)
    toks = [rng.choice(words) for _ in range(n)]
    toks.append(rng.choice([".", "?", ".", "."]))
    return " ".join(toks)


def synth_monolingual(n_lines: int, seed: int = 0, words=None) -> list[str]:
    rng = random.Random(seed)
    pool = words if words is not None else _EN_WORDS + _PCM_WORDS
    return [synth_line(rng, pool) for _ in range(n_lines)]


def synth_parallel_pairs(n_pairs: int, seed: int = 0,
                         min_len=3, max_len=8) -> list[tuple[str, str]]:
    """English-ish lines with a deterministic word-mapped Pidgin-ish side."""
    rng = random.Random(seed)
    pairs = []
    for _ in range(n_pairs):
        n = rng.randint(min_len, max_len)
        src_toks = [rng.choice(_EN_WORDS) for _ in range(n)]
        end = rng.choice([".", "?"])
        tgt_toks = [_EN_TO_PCM.get(t, t) for t in src_toks]
        pairs.append((" ".join(src_toks + [end]), " ".join(tgt_toks + [end])))
    return pairs


def write_pairs(pairs, src_path, tgt_path) -> None:
    with open(src_path, "w", encoding="utf-8") as fs:
        fs.writelines(line + "\n" for line, _ in pairs)
    with open(tgt_path, "w", encoding="utf-8") as ft:
        ft.writelines(line + "\n" for _, line in pairs)


# ---------------------------------------------------------------------------
# brute-force BPE oracle: recounts every pair from scratch each iteration

def oracle_learn_bpe(word_freqs: dict, num_merges: int,
                     min_pair_freq: int = 2) -> list[tuple[str, str]]:
    seqs = {word: tuple(word) for word in word_freqs}
    merges = []
    for _ in range(num_merges):
        counts = Counter()
        for word, freq in word_freqs.items():
            seq = seqs[word]
            for pair in zip(seq, seq[1:]):
                counts[pair] += freq
        if not counts:
            break
        pair, count = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if count < min_pair_freq:
            break
        merges.append(pair)
        left, right = pair
        for word, seq in seqs.items():
            out, i = [], 0
            while i < len(seq):
                if i < len(seq) - 1 and seq[i] == left and seq[i + 1] == right:
                    out.append(left + right)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[word] = tuple(out)
    return merges
