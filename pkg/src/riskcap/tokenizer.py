"""Byte-pair subword tokenizer trained on the caption/prompt corpus."""

import re
from collections import Counter

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

# words keep their leading space; punctuation runs split off
_PRETOKEN = re.compile(r" ?[A-Za-z0-9]+| ?[^A-Za-z0-9\s]+|\s+")


def pretokenize(text):
    return _PRETOKEN.findall(text)


class Tokenizer:
    def __init__(self, pieces, merges):
        self.pieces = list(pieces)
        self.merges = [tuple(m) for m in merges]
        self.index = {p: i for i, p in enumerate(self.pieces)}
        self.ranks = {m: r for r, m in enumerate(self.merges)}
        self._cache = {}

    @classmethod
    def train(cls, corpus, vocab_size=512, min_frequency=2):
        """Learn merges greedily: most frequent adjacent pair, ties by lexical order."""
        corpus = list(corpus)
        if not corpus:
            raise ValueError("tokenizer corpus is empty")
        words = Counter(w for text in corpus for w in pretokenize(text))
        chars = sorted({c for w in words for c in w})
        pieces = list(SPECIALS) + chars
        seqs = {w: list(w) for w in words}
        merges = []
        while len(pieces) < vocab_size:
            pairs = Counter()
            for w, freq in words.items():
                s = seqs[w]
                for a, b in zip(s, s[1:]):
                    pairs[a, b] += freq
            if not pairs:
                break
            best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
            if best[1] < min_frequency:
                break
            (a, b), _ = best
            merges.append((a, b))
            pieces.append(a + b)
            for w in seqs:
                seqs[w] = _merge_once(seqs[w], a, b)
        return cls(pieces, merges)

    @property
    def vocab_size(self):
        return len(self.pieces)

    def _bpe(self, word):
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        seq = list(word)
        while len(seq) > 1:
            ranked = [(self.ranks.get(p, len(self.ranks)), i) for i, p in enumerate(zip(seq, seq[1:]))]
            rank, i = min(ranked)
            if rank == len(self.ranks):
                break
            seq = _merge_once(seq, *self.merges[rank])
        ids = [self.index.get(p, UNK) for p in seq]
        self._cache[word] = ids
        return ids

    def encode(self, text, specials=True):
        ids = [i for w in pretokenize(text) for i in self._bpe(w)]
        return [BOS] + ids + [EOS] if specials else ids

    def decode(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS, UNK):
                continue
            out.append(self.pieces[i])
        return "".join(out)

    def state(self):
        return {"pieces": self.pieces, "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_state(cls, state):
        return cls(state["pieces"], state["merges"])


def _merge_once(seq, a, b):
    out, i = [], 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out
