# /*
#  * Copyright © 2026 patchlab contributors.
#  * SPDX-License-Identifier: Apache-2.0
#  */
"""
Character-level vocabulary for the decimal comparison task.

Single characters map to one token each, bracketed markers such as ``<Q>``
are one token as well. Tokenization is longest-match from the left.
"""

from errors import UnknownSymbolError

DIGITS = tuple("0123456789")
PUNCTUATION = (".", " ", ":", "?")
MARKERS = ("<Q>", "<A>", "<ANS>", "<CHAT>", "</CHAT>", "<BOTH>", "<END>")

END = "<END>"


class SyntheticVocab(object):
    def __init__(self, symbols=DIGITS + PUNCTUATION + MARKERS):
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        if len(symbols) > 64:
            raise ValueError(f"vocabulary holds {len(symbols)} symbols, at most 64 allowed")
        self.symbols = tuple(symbols)
        self.ids = {s: i for i, s in enumerate(self.symbols)}
        # longest symbols first for greedy matching
        self._by_length = sorted(self.symbols, key=lambda s: (-len(s), self.ids[s]))

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, SyntheticVocab) and self.symbols == other.symbols

    def id(self, symbol):
        try:
            return self.ids[symbol]
        except KeyError:
            raise UnknownSymbolError(f"unknown symbol {symbol!r}")

    @property
    def end_id(self):
        return self.ids[END]

    def tokenize(self, text):
        tokens = []
        pos = 0
        while pos < len(text):
            for symbol in self._by_length:
                if text.startswith(symbol, pos):
                    tokens.append(self.ids[symbol])
                    pos += len(symbol)
                    break
            else:
                raise UnknownSymbolError(f"unknown symbol {text[pos]!r} at offset {pos} in {text!r}")
        return tokens

    def detokenize(self, tokens):
        parts = []
        for t in tokens:
            if not 0 <= int(t) < len(self.symbols):
                raise UnknownSymbolError(f"token id {t} outside vocabulary of {len(self.symbols)}")
            parts.append(self.symbols[int(t)])
        return "".join(parts)

    def to_list(self):
        return list(self.symbols)

    @staticmethod
    def from_list(symbols):
        return SyntheticVocab(tuple(symbols))


def tokenize(vocab, text):
    return vocab.tokenize(text)


def detokenize(vocab, tokens):
    return vocab.detokenize(tokens)
